"""Dual-branch complementary-masking training.

Each step copies the adaptive weights into the frozen evaluation model, runs
both models on complementary visible sets, merges their predictions so every
patch comes from the branch that did not see it, and updates the adaptive
model only.
"""

from __future__ import annotations

import io
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import rng as R
from .config import ModelConfig, RunConfig, TrainConfig, dump_config, parse_config
from .errors import FormatError, InvariantError, NumericalError
from .masking import compose_reconstruction, sample_mask_pairs, stack_masks
from .model import DyViT, patchify
from .serialize import atomic_write, read_tensor, write_tensor
from .tensor import Graph, Tensor, no_grad

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CMA1"
CKPT_VERSION = 1
METRICS_HEADER = "step,loss,loss_adaptive,loss_evaluation,lr,seconds"


def mse_loss(x_rec: Tensor, x) -> Tensor:
    """Mean of squared differences (squared Frobenius norm over element count)."""
    d = x_rec - x
    return (d * d).mean()


def no_decay(name: str) -> bool:
    """Norm gains/offsets and the mask token are excluded from weight decay."""
    parts = name.split(".")
    return parts[-1] == "mask_token" or (len(parts) > 1 and parts[-2].startswith("norm"))


def adamw_step(params: dict, grads: dict, m: dict, v: dict, lr: float, betas=(0.9, 0.95), eps: float = 1e-8,
               weight_decay: float = 0.05, t: int = 1, decay_mask: Optional[dict] = None) -> None:
    """Bias-corrected Adam with decoupled weight decay, applied in place.

    ``params``/``grads``/``m``/``v`` map names to arrays. ``decay_mask[name]``
    false disables decay for that entry. Parameters without a gradient are
    left untouched.
    """
    if t < 1:
        raise ValueError("step count t must be >= 1")
    b1, b2 = betas
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        mi, vi = m[name], v[name]
        mi *= b1
        mi += (1.0 - b1) * g
        vi *= b2
        vi += (1.0 - b2) * (g * g)
        if weight_decay and (decay_mask is None or decay_mask.get(name, True)):
            p -= (lr * weight_decay) * p
        p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Constant, or constant until ``decay_start`` then linear to zero at ``steps``."""
    if cfg.decay_start is None or step <= cfg.decay_start or cfg.steps <= cfg.decay_start:
        return cfg.lr
    return cfg.lr * max(0.0, (cfg.steps - step) / (cfg.steps - cfg.decay_start))


@dataclass
class TrainState:
    run: RunConfig
    adaptive: DyViT
    evaluation: DyViT
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @property
    def cfg(self) -> ModelConfig:
        return self.run.model

    @property
    def train(self) -> TrainConfig:
        return self.run.train

    @property
    def seed(self) -> int:
        return self.run.train.seed

    @property
    def dtype(self):
        return np.dtype(self.run.train.dtype)


def build_state(run: RunConfig) -> TrainState:
    dtype = np.dtype(run.train.dtype)
    adaptive = DyViT(run.model, R.stream(run.train.seed, R.INIT), dtype)
    evaluation = DyViT(run.model, R.stream(run.train.seed, R.INIT), dtype)
    evaluation.set_requires_grad(False)
    m = {k: np.zeros_like(p.data) for k, p in adaptive.named_parameters()}
    v = {k: np.zeros_like(p.data) for k, p in adaptive.named_parameters()}
    state = TrainState(run, adaptive, evaluation, m, v, 0)
    sync_evaluation(state)
    return state


def sync_evaluation(state: TrainState) -> TrainState:
    """Hard copy of the adaptive weights into the evaluation model (no blending)."""
    src = dict(state.adaptive.named_parameters())
    for name, p in state.evaluation.named_parameters():
        p.data = src[name].data.copy()
    return state


def branch_losses(A: np.ndarray, E: np.ndarray, target: np.ndarray, adaptive_mask: np.ndarray) -> tuple[float, float]:
    """Split the merged loss by which branch supplied each position.

    Returns ``(adaptive_term, evaluation_term)``; both are normalised by the
    full element count so they sum to the merged loss.
    """
    keep = np.repeat(adaptive_mask, A.shape[1] // adaptive_mask.shape[1], axis=1)[..., None]
    N = A.size
    la = float((((A - target) ** 2) * (1 - keep)).sum() / N)
    le = float((((E - target) ** 2) * keep).sum() / N)
    return la, le


def train_step(state: TrainState, batch: np.ndarray, rng: Optional[np.random.Generator] = None) -> dict:
    t = state.step + 1
    cfg = state.cfg
    if (t - 1) % state.train.sync_every == 0:
        sync_evaluation(state)
    if rng is None:
        rng = R.stream(state.seed, R.MASK, t)
    batch = np.asarray(batch, dtype=state.dtype)
    if batch.shape[1:] != (cfg.in_chans, cfg.image_size, cfg.image_size):
        raise ValueError(f"batch shape {batch.shape} does not match model resolution {cfg.image_size}")
    pairs = sample_mask_pairs(batch.shape[0], cfg.n_patches, cfg.mask_ratio, rng)
    am, em = stack_masks(pairs)
    target = patchify(batch, cfg.patch_size)

    context = f"at step {t} (seed {state.seed}); adaptive masks {am.tolist()}"
    try:
        A = state.adaptive.forward_tokens(batch, am)
        with no_grad(), Graph() as g:
            E = state.evaluation.forward_tokens(batch, em)
    except NumericalError as exc:
        raise NumericalError(f"{exc} {context}") from exc
    if g.n_records:
        raise InvariantError(f"evaluation forward recorded {g.n_records} graph records")

    x_rec = compose_reconstruction(A, E.data, am)
    loss = mse_loss(x_rec, target)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value} {context}")
    la, le = branch_losses(A.data, E.data, target, am)

    state.adaptive.zero_grad()
    loss.backward()
    params = {k: p.data for k, p in state.adaptive.named_parameters()}
    grads = {k: p.grad for k, p in state.adaptive.named_parameters()}
    decay = {k: not no_decay(k) for k in params}
    lr = lr_at(state.train, t)
    tc = state.train
    adamw_step(params, grads, state.m, state.v, lr, (tc.beta1, tc.beta2), tc.eps, tc.weight_decay, t, decay)
    state.step = t
    return {"step": t, "loss": value, "loss_adaptive": la, "loss_evaluation": le, "lr": lr}


def select_batch(images: np.ndarray, batch_size: int, seed: int, step: int) -> np.ndarray:
    count = images.shape[0]
    if batch_size >= count:
        return images
    idx = R.stream(seed, R.DATA, step).permutation(count)[:batch_size]
    return images[np.sort(idx)]


def fit(state: TrainState, images: np.ndarray, out_dir=None, on_step: Optional[Callable[[dict], None]] = None) -> list[dict]:
    """Train until ``state.train.steps``; writes metrics and checkpoints under ``out_dir`` if given."""
    history = []
    metrics_path = ckpt_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.csv"
        ckpt_path = out_dir / "checkpoint.cma"
        if not metrics_path.exists():
            metrics_path.write_text(METRICS_HEADER + "\n")
    tc = state.train
    while state.step < tc.steps:
        t0 = time.perf_counter()
        batch = select_batch(images, tc.batch_size, tc.seed, state.step + 1)
        metrics = train_step(state, batch)
        metrics["seconds"] = time.perf_counter() - t0
        history.append(metrics)
        if metrics_path is not None:
            with open(metrics_path, "a") as f:
                f.write("{step},{loss:.9g},{loss_adaptive:.9g},{loss_evaluation:.9g},{lr:.9g},{seconds:.6f}\n".format(**metrics))
        if tc.log_every and metrics["step"] % tc.log_every == 0:
            log.info("step %d loss %.6f (adaptive %.6f, evaluation %.6f)", metrics["step"], metrics["loss"],
                     metrics["loss_adaptive"], metrics["loss_evaluation"])
        if ckpt_path is not None and tc.checkpoint_every and metrics["step"] % tc.checkpoint_every == 0:
            checkpoint_save(state, ckpt_path)
        if on_step is not None:
            on_step(metrics)
    if ckpt_path is not None:
        checkpoint_save(state, ckpt_path)
    return history


# ---------------------------------------------------------------- checkpoints


def _tensor_table(state: TrainState) -> list[tuple[str, np.ndarray]]:
    table = []
    for k, p in state.adaptive.named_parameters():
        table.append((f"adaptive/{k}", p.data))
    for k, p in state.evaluation.named_parameters():
        table.append((f"evaluation/{k}", p.data))
    for k in state.m:
        table.append((f"adam.m/{k}", state.m[k]))
    for k in state.v:
        table.append((f"adam.v/{k}", state.v[k]))
    return table


def checkpoint_bytes(state: TrainState) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQ", CKPT_VERSION, state.step))
    text = dump_config(state.run).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    buf.write(struct.pack("<Q", state.seed))
    table = _tensor_table(state)
    buf.write(struct.pack("<I", len(table)))
    for name, arr in table:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, arr)
    return buf.getvalue()


def checkpoint_save(state: TrainState, path) -> None:
    atomic_write(path, checkpoint_bytes(state))


def _read(f, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError("truncated checkpoint")
    return b


def checkpoint_load(path) -> TrainState:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise FormatError(f"not a checkpoint (magic {magic!r})")
        version, step = struct.unpack("<IQ", _read(f, 12))
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", _read(f, 4))
        run = parse_config(_read(f, n).decode("utf-8"))
        (seed,) = struct.unpack("<Q", _read(f, 8))
        if seed != run.train.seed:
            raise FormatError(f"rng seed {seed} disagrees with config seed {run.train.seed}")
        (count,) = struct.unpack("<I", _read(f, 4))
        tensors = {}
        for _ in range(count):
            (ln,) = struct.unpack("<I", _read(f, 4))
            name = _read(f, ln).decode("utf-8")
            tensors[name] = read_tensor(f)
        if f.read(1):
            raise FormatError("trailing bytes after tensor table")

    state = build_state(run)
    groups: dict[str, dict] = {"adaptive": {}, "evaluation": {}, "adam.m": {}, "adam.v": {}}
    for name, arr in tensors.items():
        head, _, rest = name.partition("/")
        if head not in groups:
            raise FormatError(f"unknown tensor group in {name!r}")
        groups[head][rest] = arr
    try:
        state.adaptive.load_state_dict(groups["adaptive"])
        state.evaluation.load_state_dict(groups["evaluation"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint does not match its config: {exc}") from None
    names = set(state.m)
    if set(groups["adam.m"]) != names or set(groups["adam.v"]) != names:
        raise FormatError("optimizer moments do not match model parameters")
    state.m = {k: groups["adam.m"][k].copy() for k in state.m}
    state.v = {k: groups["adam.v"][k].copy() for k in state.v}
    state.step = step
    return state
