"""Central finite-difference checks for the autodiff kernels and the full model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

REL_TOL = 1e-4


def rel_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def fd_step(theta: float) -> float:
    return 1e-5 * max(1.0, abs(theta))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, index: tuple) -> float:
    """(f(theta + h) - f(theta - h)) / 2h for one entry of ``arr``, restored afterwards."""
    old = arr[index]
    h = fd_step(float(old))
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)


@dataclass
class CheckResult:
    name: str
    cases: int = 0
    entries: int = 0
    max_rel_err: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures and self.max_rel_err <= REL_TOL

    def record(self, where, analytic: float, numeric: float) -> None:
        err = rel_error(analytic, numeric)
        self.entries += 1
        self.max_rel_err = max(self.max_rel_err, err)
        if err > REL_TOL:
            self.failures.append((where, analytic, numeric, err))


def check_function(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
                   result: CheckResult, max_entries: int = 12) -> CheckResult:
    """Compare analytic and numeric gradients of ``sum(fn(*inputs) * R)`` for a fixed random ``R``.

    Up to ``max_entries`` randomly chosen entries of every input are probed.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    out0 = fn(*[Tensor(x) for x in inputs])
    weights = rng.standard_normal(out0.shape)

    def loss_value() -> float:
        with T.no_grad():
            return float((fn(*[Tensor(x) for x in inputs]).data * weights).sum())

    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*leaves)
    (out * weights).sum().backward()
    for k, (x, leaf) in enumerate(zip(inputs, leaves)):
        g = leaf.grad if leaf.grad is not None else np.zeros_like(x)
        flat = rng.permutation(x.size)[:max_entries]
        for f in flat:
            idx = np.unravel_index(f, x.shape)
            result.record((k, idx), float(g[idx]), numeric_grad(loss_value, x, idx))
    result.cases += 1
    return result


def check_parameters(loss_fn: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]], rng: np.random.Generator,
                     n_samples: int = 20, result: CheckResult | None = None) -> CheckResult:
    """Probe ``n_samples`` random scalar parameters of a model against finite differences.

    ``loss_fn`` must be deterministic (fixed masks and data).
    """
    result = result or CheckResult("model")
    for _, p in params:
        p.grad = None
    loss_fn().backward()
    sizes = np.array([p.size for _, p in params])
    owners = rng.choice(len(params), size=n_samples, p=sizes / sizes.sum())

    def value() -> float:
        with T.no_grad():
            return loss_fn().item()

    for o in owners:
        name, p = params[o]
        idx = np.unravel_index(int(rng.integers(p.size)), p.shape)
        analytic = float(p.grad[idx]) if p.grad is not None else 0.0
        result.record((name, idx), analytic, numeric_grad(value, p.data, idx))
    result.cases += 1
    return result


# ---------------------------------------------------------------- suites


def _distinct(rng: np.random.Generator, shape, spacing: float = 0.1) -> np.ndarray:
    """Values with pairwise gaps >= ``spacing`` so argmax choices survive FD perturbations."""
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * spacing - n * spacing / 2).reshape(shape)


def _case_add(rng):
    return (lambda a, b: T.add(a, b)), [rng.standard_normal((3, 4, 5)), rng.standard_normal((5,))]


def _case_mul(rng):
    return (lambda a, b: T.mul(a, b)), [rng.standard_normal((2, 3, 4)), rng.standard_normal((3, 1))]


def _case_matmul(rng):
    if rng.random() < 0.5:
        return (lambda a, b: T.matmul(a, b)), [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]
    return (lambda a, b: T.matmul(a, b)), [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))]


def _case_transpose_reshape(rng):
    return (lambda a: T.reshape(T.transpose(a, (2, 0, 1)), (5, 6))), [rng.standard_normal((2, 3, 5))]


def _case_sum_mean(rng):
    return (lambda a: T.add(T.sum_(a, axis=1, keepdims=True), T.mean(a, axis=(0, 1), keepdims=True))), [rng.standard_normal((3, 4, 2))]


def _case_gather(rng):
    idx = rng.permutation(6)[:3]
    return (lambda a: T.gather_rows(a, idx)), [rng.standard_normal((6, 4))]


def _case_gather_batched(rng):
    idx = np.stack([np.sort(rng.permutation(5)[:2]) for _ in range(3)])
    return (lambda a: T.gather_rows(a, idx)), [rng.standard_normal((3, 5, 4))]


def _case_scatter(rng):
    idx = rng.permutation(6)[:3]
    return (lambda s, t: T.scatter_rows(s, idx, t)), [rng.standard_normal((3, 4)), rng.standard_normal((6, 4))]


def _case_softmax(rng):
    return (lambda a: T.softmax(a, axis=-1)), [rng.standard_normal((3, 6)) * 3]


def _case_layer_norm(rng):
    return (lambda x, g, b: T.layer_norm(x, g, b, 1e-6)), [rng.standard_normal((4, 6)), rng.standard_normal(6), rng.standard_normal(6)]


def _case_gelu(rng):
    return T.gelu, [rng.standard_normal((4, 5)) * 2]


def _case_conv2d(rng):
    k = int(rng.choice([1, 2, 3]))
    s = int(rng.choice([1, 2]))
    q = int(rng.integers(0, 2)) if k > 1 else 0
    size = (int(rng.integers(2, 4)) - 1) * s + k - 2 * q
    return (lambda x, w, b: T.conv2d(x, w, b, s, q)), [
        rng.standard_normal((2, 2, size, size)), rng.standard_normal((3, 2, k, k)), rng.standard_normal(3)]


def _case_conv2d_window(rng):
    k = int(rng.choice([2, 4]))
    return (lambda x, w, b: T.conv2d(x, w, b, k, 0)), [
        rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((3, 3, k, k)), rng.standard_normal(3)]


def _case_conv2d_stem(rng):
    return (lambda x, w, b: T.conv2d(x, w, b, 4, (3, 0))), [
        rng.standard_normal((1, 3, 8, 8)), rng.standard_normal((2, 3, 7, 7)), rng.standard_normal(2)]


def _case_maxpool(rng):
    return T.maxpool2d, [_distinct(rng, (2, 2, 4, 4))]


def _case_attention(rng):
    from .dmmsa import attention

    return (lambda q, k, v: attention(q, k, v, 2)), [rng.standard_normal((1, 5, 4)), rng.standard_normal((1, 3, 4)), rng.standard_normal((1, 3, 4))]


KERNEL_CASES = {
    "add": _case_add,
    "mul": _case_mul,
    "matmul": _case_matmul,
    "transpose_reshape": _case_transpose_reshape,
    "sum_mean": _case_sum_mean,
    "gather_rows": _case_gather,
    "gather_rows_batched": _case_gather_batched,
    "scatter_rows": _case_scatter,
    "softmax": _case_softmax,
    "layer_norm": _case_layer_norm,
    "gelu": _case_gelu,
    "conv2d": _case_conv2d,
    "conv2d_window": _case_conv2d_window,
    "conv2d_stem": _case_conv2d_stem,
    "maxpool2d": _case_maxpool,
    "attention": _case_attention,
}


def kernel_suite(cases: int = 100, seed: int = 0, names: Sequence[str] | None = None) -> list[CheckResult]:
    results = []
    for name in names or KERNEL_CASES:
        rng = np.random.default_rng([seed, len(name), sum(map(ord, name))])
        res = CheckResult(name)
        for _ in range(cases):
            fn, inputs = KERNEL_CASES[name](rng)
            check_function(fn, inputs, rng, res)
        results.append(res)
    return results


def model_check(cfg, seed: int = 0, samples: int = 20, batch: int = 2) -> CheckResult:
    """Finite-difference check of the merged training loss w.r.t. adaptive parameters (float64)."""
    from . import rng as R
    from .data import synth_images
    from .masking import compose_reconstruction, sample_mask_pairs, stack_masks
    from .model import DyViT, patchify

    adaptive = DyViT(cfg, R.stream(seed, R.INIT), np.float64)
    images = synth_images(seed, batch, cfg.image_size).astype(np.float64)
    target = patchify(images, cfg.patch_size)
    am, em = stack_masks(sample_mask_pairs(batch, cfg.n_patches, cfg.mask_ratio, R.stream(seed, R.MASK, 1)))
    with T.no_grad():
        E = adaptive.forward_tokens(images, em).data

    def loss() -> Tensor:
        d = compose_reconstruction(adaptive.forward_tokens(images, am), E, am) - target
        return (d * d).mean()

    return check_parameters(loss, list(adaptive.named_parameters()), np.random.default_rng(seed), samples,
                            CheckResult("model"))
