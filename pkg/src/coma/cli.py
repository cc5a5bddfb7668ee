"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import rng as R
from .config import PRESETS, DataConfig, RunConfig, TrainConfig, parse_config, preset
from .errors import ConfigError, FormatError, NumericalError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("coma")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _run_config(args) -> RunConfig:
    if args.config:
        run = parse_config(Path(args.config).read_text())
    else:
        run = RunConfig(model=preset(args.preset), preset=args.preset)
    model_over = {}
    if args.ratio is not None:
        model_over["mask_ratio"] = args.ratio
    if args.fusion_mode is not None:
        model_over["fusion_mode"] = args.fusion_mode
    if args.separate_kv_conv:
        model_over["share_kv_conv"] = False
    if args.unit_window:
        model_over["include_unit_window"] = True
    model = replace(run.model, **model_over) if model_over else run.model
    train_over = {k: getattr(args, k) for k in ("steps", "batch_size", "seed", "lr", "dtype", "weight_decay", "decay_start")
                  if getattr(args, k) is not None}
    train = replace(run.train, **train_over) if train_over else run.train
    data = run.data
    if args.dataset is not None:
        data = replace(data, dataset=args.dataset)
    out = args.out if args.out is not None else run.out
    return RunConfig(model=model, train=train, data=data, preset=run.preset, out=out)


def _load_images(run: RunConfig) -> np.ndarray:
    from .data import load_dataset, synth_images

    if run.data.dataset:
        images = load_dataset(run.data.dataset).images
    else:
        images = synth_images(run.train.seed, run.data.count, run.model.image_size)
    if images.shape[-1] != run.model.image_size:
        raise ConfigError(f"dataset resolution {images.shape[-1]} != model image_size {run.model.image_size}")
    return images


def cmd_synth(args) -> int:
    from .data import synth_dataset

    ds = synth_dataset(args.seed, args.count, args.size, args.out)
    print(f"wrote {len(ds)} images of shape {ds.images.shape[1:]} to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .config import dump_config
    from .trainer import build_state, checkpoint_load, fit

    if args.out is not None:
        out = Path(args.out)
    elif args.config:
        out = Path(parse_config(Path(args.config).read_text()).out)
    else:
        out = Path(RunConfig.out)
    ckpt = out / "checkpoint.cma"
    if args.resume and ckpt.exists():
        state = checkpoint_load(ckpt)
        if args.steps is not None:
            state.run = replace(state.run, train=replace(state.run.train, steps=args.steps))
        run = state.run
        log.info("resumed from %s at step %d", ckpt, state.step)
    else:
        run = _run_config(args)
        state = build_state(run)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(run))
    images = _load_images(run)
    hist = fit(state, images, out)
    if hist:
        print(f"step {hist[-1]['step']}: loss {hist[-1]['loss']:.6f} (first {hist[0]['loss']:.6f})")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_mask_stats(args) -> int:
    from .masking import coverage_report, simulate_coverage, write_coverage_csv, write_pgm

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for mode in ("complementary", "random"):
        stats = simulate_coverage(args.n, args.ratio, args.iters, R.stream(args.seed, R.MASK, 0), mode)
        rep = coverage_report(stats)
        write_coverage_csv(out / f"{mode}.csv", stats)
        write_pgm(out / f"{mode}_adaptive.pgm", rep["adaptive_grid"])
        write_pgm(out / f"{mode}_union.pgm", rep["union_grid"])
        print(f"{mode:>13}: masked mean {rep['adaptive_mean']:.2f} std {rep['adaptive_std']:.2f} | "
              f"supervised mean {rep['union_mean']:.2f} std {rep['union_std']:.2f}")
    expected = (args.iters * args.ratio * (1 - args.ratio)) ** 0.5
    print(f"binomial reference std sqrt(T r (1-r)) = {expected:.2f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import REL_TOL, kernel_suite, model_check

    results = kernel_suite(args.cases, args.seed)
    results.append(model_check(preset(args.preset), args.seed, args.samples))
    worst = 0.0
    ok = True
    for r in results:
        worst = max(worst, r.max_rel_err)
        ok &= r.ok
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name:<20} cases={r.cases:<4} entries={r.entries:<5} max_rel_err={r.max_rel_err:.3e}")
    print(f"max rel err {worst:.3e} (tolerance {REL_TOL:g})")
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_reconstruct(args) -> int:
    from .masking import compose_reconstruction, sample_mask_pairs, stack_masks
    from .model import patchify, unpatchify
    from .serialize import save_tensor
    from .tensor import no_grad
    from .trainer import checkpoint_load

    state = checkpoint_load(args.checkpoint)
    cfg = state.cfg
    if args.dataset:
        from .data import load_dataset

        images = load_dataset(args.dataset, args.count).images
    else:
        from .data import synth_images

        images = synth_images(args.seed, args.count, cfg.image_size)
    images = images.astype(state.dtype)
    am, em = stack_masks(sample_mask_pairs(len(images), cfg.n_patches, cfg.mask_ratio, R.stream(args.seed, R.EVAL, 0)))
    with no_grad():
        A = state.adaptive.forward_tokens(images, am).data
        E = state.evaluation.forward_tokens(images, em).data
    rec = unpatchify(compose_reconstruction(A, E, am), cfg.patch_size, cfg.in_chans)
    err = float(((patchify(images, cfg.patch_size) - compose_reconstruction(A, E, am)) ** 2).mean())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(len(images)):
        pair = np.concatenate([images[i], np.clip(rec[i], 0, 1)], axis=-1)
        save_tensor(out / f"recon_{i:05d}.cmt", np.ascontiguousarray(pair.astype(np.float32)))
    print(f"wrote {len(images)} side-by-side tensors to {out}; merged mse {err:.6f}")
    return EXIT_OK


def cmd_params(args) -> int:
    from .model import decoder_param_count, param_count

    names = [args.preset] if args.preset else list(PRESETS)
    for name in names:
        cfg = preset(name)
        if args.separate_kv_conv:
            cfg = replace(cfg, share_kv_conv=False)
        if args.fusion_mode:
            cfg = replace(cfg, fusion_mode=args.fusion_mode)
        enc = param_count(cfg)
        print(f"{name:<11} encoder {enc:>11,d} ({enc / 1e6:.2f} M)  decoder {decoder_param_count(cfg):>11,d}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .data import synth_images
    from .trainer import build_state, train_step

    run = RunConfig(model=preset(args.preset), train=TrainConfig(steps=args.steps, batch_size=args.batch_size, seed=args.seed))
    state = build_state(run)
    images = synth_images(args.seed, args.batch_size, run.model.image_size)
    train_step(state, images)
    times = []
    for _ in range(args.steps):
        t0 = time.perf_counter()
        train_step(state, images)
        times.append(time.perf_counter() - t0)
    t = np.array(times)
    print(f"{args.preset} batch {args.batch_size}: {t.mean() * 1e3:.1f} ms/step (median {np.median(t) * 1e3:.1f}, "
          f"min {t.min() * 1e3:.1f}) over {args.steps} steps")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coma", description="Complementary masked autoencoder pre-training (desk scale).")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a procedural image dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", parents=[common], help="run the dual-branch training loop")
    s.add_argument("--config")
    s.add_argument("--preset", default="dyvit-nano", choices=sorted(PRESETS))
    s.add_argument("--dataset", help="directory written by 'synth' (default: generate in memory)")
    s.add_argument("--out")
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--weight-decay", dest="weight_decay", type=float)
    s.add_argument("--decay-start", dest="decay_start", type=int)
    s.add_argument("--dtype", choices=("float32", "float64"))
    s.add_argument("--ratio", type=float)
    s.add_argument("--fusion-mode", dest="fusion_mode", choices=("cascade", "parallel"))
    s.add_argument("--separate-kv-conv", action="store_true")
    s.add_argument("--unit-window", action="store_true")
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("mask-stats", parents=[common], help="coverage statistics for complementary vs random masking")
    s.add_argument("--n", type=int, default=196)
    s.add_argument("--ratio", type=float, default=0.6)
    s.add_argument("--iters", type=int, default=1600)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="mask_stats")
    s.set_defaults(func=cmd_mask_stats)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of every kernel and the model")
    s.add_argument("--preset", default="dyvit-nano", choices=sorted(PRESETS))
    s.add_argument("--cases", type=int, default=100)
    s.add_argument("--samples", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("reconstruct", parents=[common], help="write original | reconstruction tensors from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset")
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="reconstructions")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("params", parents=[common], help="encoder parameter counts per preset")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--fusion-mode", dest="fusion_mode", choices=("cascade", "parallel"))
    s.add_argument("--separate-kv-conv", action="store_true")
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("bench", parents=[common], help="per-step wall time")
    s.add_argument("--preset", default="dyvit-nano", choices=sorted(PRESETS))
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
