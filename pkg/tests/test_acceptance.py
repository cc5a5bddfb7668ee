"""Acceptance gate: one test (or group) per criterion, PASS/FAIL summary printed at the end.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import time

import numpy as np
import pytest

from coma import rng as R
from coma.config import RunConfig, TrainConfig, preset
from coma.data import synth_images
from coma.dmmsa import DMMSA, window_set
from coma.gradcheck import REL_TOL, kernel_suite, model_check
from coma.layers import Conv2d
from coma.masking import compose_reconstruction, sample_mask_pair, sample_mask_pairs, simulate_coverage, stack_masks
from coma.model import DyViT, param_count, patchify
from coma.tensor import Tensor, no_grad
from coma.trainer import build_state, checkpoint_bytes, checkpoint_load, checkpoint_save, sync_evaluation, train_step

from oracles import dmmsa_direct, mha_direct

criterion = pytest.mark.criterion


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def _d2(n, r):
    return min(max(int(np.floor(n * (1 - r) + 0.5)), 1), n - 1)


# 1 ------------------------------------------------------------------------------------------


@criterion(1, "mask complementarity and visible counts")
def test_mask_complementarity():
    grid = [(n, r) for n in (4, 49, 196) for r in (0.4, 0.5, 0.6, 0.75)]
    per = -(-10_000 // len(grid))
    rng = np.random.default_rng(0)
    with Timer() as t:
        for n, r in grid:
            for _ in range(per):
                pair = sample_mask_pair(n, r, rng)
                assert np.array_equal(pair.adaptive_mask + pair.evaluation_mask, np.ones(n))
                assert int(pair.adaptive_mask.sum()) == _d2(n, r)
    assert per * len(grid) >= 10_000
    assert t.seconds < 5.0


# 2 ------------------------------------------------------------------------------------------


@criterion(2, "coverage reproduction")
def test_coverage():
    with Timer() as t:
        comp = simulate_coverage(196, 0.6, 1600, R.stream(0, R.MASK), "complementary")
        rand = simulate_coverage(196, 0.6, 1600, R.stream(1, R.MASK), "random")
    assert np.all(comp.union_counts == 1600)
    ref = np.sqrt(1600 * 0.24)
    std = rand.union_counts.std(ddof=1)
    assert abs(std - ref) <= 0.2 * ref, (std, ref)
    assert t.seconds < 10.0


# 3 ------------------------------------------------------------------------------------------


@criterion(3, "gradient correctness (kernels and end-to-end nano)")
def test_gradients():
    with Timer() as t:
        results = kernel_suite(cases=100, seed=0)
        results.append(model_check(preset("dyvit-nano"), seed=0, samples=20))
    for r in results:
        expected = 1 if r.name == "model" else 100
        assert r.cases >= expected, r.name
        assert r.ok and r.max_rel_err <= REL_TOL, (r.name, r.max_rel_err, r.failures[:3])
    assert sum(1 for r in results if r.name == "model" and r.entries == 20) == 1
    assert t.seconds < 300.0


# 4 ------------------------------------------------------------------------------------------


@criterion(4, "composite-loss gradient equals adaptive masked-only gradient")
def test_branch_gradient_equivalence():
    cfg = preset("dyvit-nano")
    with Timer() as t:
        for seed in range(10):
            model = DyViT(cfg, R.stream(seed, R.INIT), np.float64)
            images = synth_images(seed, 2, cfg.image_size).astype(np.float64)
            target = patchify(images, cfg.patch_size)
            am, em = stack_masks(sample_mask_pairs(2, cfg.n_patches, cfg.mask_ratio, R.stream(seed, R.MASK, 1)))
            with no_grad():
                E = model.forward_tokens(images, em).data

            def grads(which):
                model.zero_grad()
                A = model.forward_tokens(images, am)
                if which == "composite":
                    d = compose_reconstruction(A, E, am) - target
                    ((d * d).sum() * (1.0 / target.size)).backward()
                else:
                    hidden = (1 - am)[..., None].astype(np.float64)
                    d = (A - target) * hidden
                    ((d * d).sum() * (1.0 / target.size)).backward()
                return {k: p.grad.copy() for k, p in model.named_parameters() if p.grad is not None}

            g_comp, g_adapt = grads("composite"), grads("adaptive")
            assert g_comp.keys() == g_adapt.keys()
            for k in g_comp:
                np.testing.assert_allclose(g_comp[k], g_adapt[k], rtol=0, atol=1e-10, err_msg=k)
    assert t.seconds < 60.0


# 5 ------------------------------------------------------------------------------------------


@criterion(5, "multi-window attention matches direct summation")
@pytest.mark.parametrize("p", [2, 4, 8])
def test_dmmsa_oracle(p):
    C = 4
    with Timer() as t:
        for v in (1, 2, 4):
            for heads in (1, 2):
                rng = np.random.default_rng([p, v, heads])
                m = DMMSA(C, heads, p, rng, np.float64)
                for _, prm in m.named_parameters():
                    prm.data = rng.standard_normal(prm.shape) * 0.5
                x = rng.standard_normal((v * p * p, C))
                with no_grad():
                    got = m(Tensor(x)).data
                np.testing.assert_allclose(got, dmmsa_direct(m, x), rtol=0, atol=1e-10)
    assert t.seconds < 20.0


@criterion(5, "multi-window attention matches direct summation")
def test_dmmsa_unit_window_is_vanilla_attention():
    C, heads, p, v = 8, 2, 4, 3
    rng = np.random.default_rng(5)
    m = DMMSA(C, heads, p, rng, np.float64)
    m.windows = [1]
    ident = Conv2d(C, C, 1, rng, dtype=np.float64)
    ident.weight.data = np.eye(C).reshape(C, C, 1, 1)
    ident.bias.data = np.zeros(C)
    m.key_convs, m.value_convs = [ident], None
    for lin in (m.w_q, m.w_k, m.w_v, m.w_out):
        lin.weight.data = rng.standard_normal((C, C)) * 0.5
        lin.bias.data = rng.standard_normal(C) * 0.1
    x = rng.standard_normal((v * p * p, C))
    with no_grad():
        got = m(Tensor(x)).data
    q, k, vv = (x @ w.weight.data + w.bias.data for w in (m.w_q, m.w_k, m.w_v))
    want = mha_direct(q, k, vv, heads) @ m.w_out.weight.data + m.w_out.bias.data
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-6)


# 6 ------------------------------------------------------------------------------------------


@criterion(6, "parameter counts within published bands")
def test_parameter_counts():
    with Timer() as t:
        s = param_count(preset("dyvit-s"))
        b = param_count(preset("dyvit-b"))
    assert 29.75e6 <= s <= 40.25e6, s
    assert 59.5e6 <= b <= 80.5e6, b
    assert abs(b / s - 2.0) <= 0.2, b / s
    assert t.seconds < 5.0


# 7 ------------------------------------------------------------------------------------------


@criterion(7, "frozen evaluation branch contract")
def test_frozen_evaluation():
    run = RunConfig(model=preset("dyvit-nano"), train=TrainConfig(steps=50, batch_size=2, seed=3, dtype="float64"))
    state = build_state(run)
    images = synth_images(3, 2, run.model.image_size)
    with Timer() as t:
        for _ in range(50):
            before = {k: p.data.copy() for k, p in state.adaptive.named_parameters()}
            train_step(state, images)
            after_a = dict(state.adaptive.named_parameters())
            moved = False
            for k, p in state.evaluation.named_parameters():
                assert p.grad is None and not p.requires_grad
                # evaluation holds the pre-update adaptive weights exactly
                assert np.array_equal(p.data, before[k]), k
                moved |= not np.array_equal(after_a[k].data, before[k])
            assert moved
            snap = {k: p.data.copy() for k, p in state.evaluation.named_parameters()}
            sync_evaluation(state)
            once = {k: p.data.copy() for k, p in state.evaluation.named_parameters()}
            sync_evaluation(state)
            for k, p in state.evaluation.named_parameters():
                assert np.array_equal(p.data, once[k])
                assert np.array_equal(once[k], after_a[k].data)
                p.data = snap[k]
    assert t.seconds < 120.0


# 8 ------------------------------------------------------------------------------------------


@criterion(8, "nano overfits 16 images in 500 steps")
def test_overfit():
    run = RunConfig(model=preset("dyvit-nano"),
                    train=TrainConfig(steps=500, batch_size=16, seed=0, dtype="float32"))
    state = build_state(run)
    images = synth_images(0, 16, 64)
    with Timer() as t:
        losses = [train_step(state, images)["loss"] for _ in range(500)]
    ratio = losses[-1] / losses[0]
    print(f"overfit: step1 {losses[0]:.5f} final {losses[-1]:.5f} ratio {ratio:.4f} ({t.seconds:.1f}s)")
    assert ratio < 0.10
    assert t.seconds < 600.0


# 9 ------------------------------------------------------------------------------------------


def _float64_run(seed=11):
    run = RunConfig(model=preset("dyvit-nano"), train=TrainConfig(steps=5, batch_size=2, seed=seed, dtype="float64"))
    return build_state(run), synth_images(seed, 2, 64)


@criterion(9, "determinism and checkpoint resume")
def test_determinism_and_resume(tmp_path):
    with Timer() as t:
        traces = []
        for _ in range(2):
            state, images = _float64_run()
            traces.append([train_step(state, images)["loss"] for _ in range(5)])
        assert traces[0] == traces[1]

        full, images = _float64_run()
        for _ in range(5):
            train_step(full, images)

        part, _ = _float64_run()
        for _ in range(2):
            train_step(part, images)
        checkpoint_save(part, tmp_path / "mid.cma")
        resumed = checkpoint_load(tmp_path / "mid.cma")
        tail = [train_step(resumed, images)["loss"] for _ in range(3)]
        assert tail == traces[0][2:]
        assert checkpoint_bytes(resumed) == checkpoint_bytes(full)
    assert t.seconds < 120.0


# 10 -----------------------------------------------------------------------------------------


@criterion(10, "per-patch grid sides and window sets")
def test_shape_schedule():
    with Timer() as t:
        cfg = preset("dyvit-nano")
        assert cfg.patch_size == 32 and cfg.grid_sides == (8, 4, 2, 1)
        for name in ("dyvit-s", "dyvit-b"):
            assert preset(name).grid_sides == (8, 4, 2, 1)
        assert window_set(8) == [8, 4, 2]
        assert window_set(4) == [4, 2]
        model = DyViT(cfg, R.stream(0, R.INIT), np.float32)
        assert [blk.attn.windows for blk in model.encoder.stages[0].blocks] == [[8, 4, 2]]
        assert [blk.attn.windows for blk in model.encoder.stages[1].blocks] == [[4, 2]]
        mask = sample_mask_pair(cfg.n_patches, cfg.mask_ratio, np.random.default_rng(0)).adaptive_mask
        with no_grad():
            so = model.encode(Tensor(synth_images(0, 1, 64)), mask)
        v = int(mask.sum())
        assert [x.shape[1] for x in so.xs] == [v * s * s for s in (8, 4, 2, 1)]
        assert [x.shape[2] for x in so.xs] == list(cfg.channels)
    assert t.seconds < 1.0
