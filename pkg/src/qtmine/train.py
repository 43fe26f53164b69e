"""Masked-language-model training.

Documents are encoded, wrapped in <bos>/<eos>, and chopped into fixed-size
windows. Each epoch re-masks every window with fresh randomness (dynamic
masking), so a window seen in ten epochs is seen under ten different masks.
Optimization is Adam with linear warmup followed by linear decay to zero.

Everything is driven by a single seeded generator, so a rerun with the same
seed reproduces the checkpoint bit for bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .errors import QtmineError
from .tokenizer import Vocab, encode
from .util import get_logger, kv

logger = get_logger()

MASK_RATE = 0.135
MASK_FRAC = 0.90
RANDOM_FRAC = 0.10
N_MASK_COPIES = 10


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 16
    n_epochs: int = N_MASK_COPIES
    max_steps: int | None = None
    warmup_frac: float = 0.06
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-6
    mask_rate: float = MASK_RATE
    mask_frac: float = MASK_FRAC
    random_frac: float = RANDOM_FRAC
    eval_every: int = 100
    log_every: int = 50

    def __post_init__(self):
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError(f"mask_rate must be in (0, 1), got {self.mask_rate}")
        if abs(self.mask_frac + self.random_frac - 1.0) > 1e-9:
            raise ValueError("mask_frac and random_frac must sum to 1")
        if self.lr <= 0 or self.batch_size <= 0 or self.n_epochs <= 0:
            raise ValueError("lr, batch_size and n_epochs must be positive")


@dataclass
class MaskedBatch:
    """A corrupted batch: `labels` are original ids at `delta` positions, row-major."""

    ids: np.ndarray       # (B, S) int64, corrupted
    lengths: np.ndarray   # (B,) int64, valid prefix per row
    delta: np.ndarray     # (B, S) bool, targeted positions
    labels: np.ndarray    # (n_targeted,) int64


@dataclass
class TrainResult:
    params: M.Params
    steps: int
    curve: list[tuple[int, float, float | None]]
    final_eval_ce: float | None


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup to base_lr, then linear decay to zero. `step` is 1-based."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 1 <= step <= total_steps:
        raise ValueError(f"step {step} outside [1, {total_steps}]")
    warmup = max(1, int(round(warmup_frac * total_steps)))
    if step <= warmup:
        return base_lr * step / warmup
    if total_steps == warmup:
        return base_lr
    return base_lr * (total_steps - step) / (total_steps - warmup)


def build_windows(vocab: Vocab, texts: Sequence[str], max_seq: int) -> list[np.ndarray]:
    """Encode texts, wrap in <bos>/<eos>, slice into windows of at most max_seq.

    Windows that contain no maskable (non-special) token are dropped.
    """
    specials = vocab.special_ids
    windows: list[np.ndarray] = []
    for text in texts:
        ids = [vocab.bos_id] + encode(vocab, text) + [vocab.eos_id]
        for start in range(0, len(ids), max_seq):
            chunk = ids[start:start + max_seq]
            if any(t not in specials for t in chunk):
                windows.append(np.asarray(chunk, dtype=np.int64))
    return windows


def _non_special_ids(vocab: Vocab) -> np.ndarray:
    specials = vocab.special_ids
    return np.asarray([i for i in range(vocab.size) if i not in specials], dtype=np.int64)


def dynamic_mask(rng: np.random.Generator, row: np.ndarray, vocab: Vocab,
                 cfg: TrainConfig, non_special: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corrupt one window. Returns (corrupted, delta, labels).

    Each non-special position is targeted independently with probability
    mask_rate; a targeted token becomes <mask> with probability mask_frac and
    otherwise is replaced by a random non-special token different from the
    original (a colliding draw is shifted to the next non-special id).
    """
    eligible = ~np.isin(row, np.asarray(sorted(vocab.special_ids)))
    delta = eligible & (rng.random(row.shape[0]) < cfg.mask_rate)
    corrupted = row.copy()
    idx = np.flatnonzero(delta)
    labels = row[idx].copy()
    if idx.size:
        to_mask = rng.random(idx.size) < cfg.mask_frac
        corrupted[idx[to_mask]] = vocab.mask_id
        rand_idx = idx[~to_mask]
        if rand_idx.size:
            draws = rng.integers(0, non_special.size, size=rand_idx.size)
            repl = non_special[draws]
            collide = repl == row[rand_idx]
            repl[collide] = non_special[(draws[collide] + 1) % non_special.size]
            corrupted[rand_idx] = repl
    return corrupted, delta, labels


def mask_batch(rng: np.random.Generator, rows: Sequence[np.ndarray], vocab: Vocab,
               cfg: TrainConfig, non_special: np.ndarray) -> MaskedBatch:
    """Pad rows to a common length and corrupt each one."""
    b = len(rows)
    s = max(r.shape[0] for r in rows)
    ids = np.full((b, s), vocab.pad_id, dtype=np.int64)
    delta = np.zeros((b, s), dtype=bool)
    lengths = np.asarray([r.shape[0] for r in rows], dtype=np.int64)
    labels_parts = []
    for i, row in enumerate(rows):
        corrupted, d, lab = dynamic_mask(rng, row, vocab, cfg, non_special)
        ids[i, : row.shape[0]] = corrupted
        delta[i, : row.shape[0]] = d
        labels_parts.append(lab)
    labels = np.concatenate(labels_parts) if labels_parts else np.zeros(0, dtype=np.int64)
    return MaskedBatch(ids=ids, lengths=lengths, delta=delta, labels=labels)


def mlm_loss(params: M.Params, batch: MaskedBatch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over targeted positions plus gradients.

    A batch with nothing targeted contributes zero loss and zero gradients.
    """
    if batch.labels.size == 0:
        logger.warning(kv(event="empty_mask_batch"))
        return 0.0, M.zero_grads(params)
    return M.loss_and_grads(params, batch.ids, batch.lengths, batch.delta, batch.labels)


class AdamState:
    def __init__(self, params: M.Params, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {name: np.zeros_like(a) for name, a in params.named_tensors()}
        self.v = {name: np.zeros_like(a) for name, a in params.named_tensors()}

    def update(self, params: M.Params, grads: dict[str, np.ndarray], lr: float) -> None:
        """One in-place Adam step with bias correction."""
        cfg = self.cfg
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, arr in params.named_tensors():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            arr -= (lr / bc1) * m / (np.sqrt(v / bc2) + cfg.adam_eps)


def _eval_batches(rng: np.random.Generator, windows: list[np.ndarray], vocab: Vocab,
                  cfg: TrainConfig, non_special: np.ndarray) -> list[MaskedBatch]:
    """Fixed masked batches so evaluation is comparable across steps."""
    batches = []
    for start in range(0, len(windows), cfg.batch_size):
        rows = windows[start:start + cfg.batch_size]
        batches.append(mask_batch(rng, rows, vocab, cfg, non_special))
    return batches


def eval_ce(params: M.Params, batches: Sequence[MaskedBatch]) -> float | None:
    """Mean cross-entropy per targeted position over prepared batches."""
    total, count = 0.0, 0
    for batch in batches:
        if batch.labels.size == 0:
            continue
        ce, n = M.eval_loss(params, batch.ids, batch.lengths, batch.delta, batch.labels)
        total += ce
        count += n
    return total / count if count else None


def train(
    params: M.Params,
    vocab: Vocab,
    train_texts: Sequence[str],
    cfg: TrainConfig,
    seed: int | np.random.SeedSequence,
    eval_texts: Sequence[str] = (),
    curve_path: str | Path | None = None,
) -> TrainResult:
    """Run MLM training in place on `params` and return the result.

    The learning-rate schedule is computed from the full planned step count;
    `cfg.max_steps` truncates the run without changing the schedule shape.
    A non-finite loss aborts immediately.
    """
    max_seq = params.config.max_seq
    windows = build_windows(vocab, train_texts, max_seq)
    if not windows:
        raise QtmineError("no trainable windows: corpus is empty after encoding")
    rng = np.random.default_rng(seed)
    non_special = _non_special_ids(vocab)

    per_epoch = (len(windows) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = per_epoch * cfg.n_epochs
    run_steps = min(total_steps, cfg.max_steps) if cfg.max_steps else total_steps

    eval_batches: list[MaskedBatch] = []
    if eval_texts:
        eval_windows = build_windows(vocab, eval_texts, max_seq)
        eval_batches = _eval_batches(np.random.default_rng(rng.integers(2**63)),
                                     eval_windows, vocab, cfg, non_special)

    logger.info(kv(event="train_start", windows=len(windows), steps=run_steps,
                   per_epoch=per_epoch, batch_size=cfg.batch_size, lr=cfg.lr))

    adam = AdamState(params, cfg)
    curve: list[tuple[int, float, float | None]] = []
    step = 0
    done = False
    for _epoch in range(cfg.n_epochs):
        if done:
            break
        order = rng.permutation(len(windows))
        for start in range(0, len(windows), cfg.batch_size):
            step += 1
            rows = [windows[i] for i in order[start:start + cfg.batch_size]]
            batch = mask_batch(rng, rows, vocab, cfg, non_special)
            loss, grads = mlm_loss(params, batch)
            if not np.isfinite(loss):
                raise QtmineError(f"non-finite loss {loss} at step {step}")
            lr = lr_schedule(step, total_steps, cfg.lr, cfg.warmup_frac)
            if batch.labels.size:
                adam.update(params, grads, lr)

            ce = None
            if eval_batches and (step % cfg.eval_every == 0 or step == run_steps):
                ce = eval_ce(params, eval_batches)
                logger.info(kv(event="eval", step=step, eval_ce=ce))
            curve.append((step, loss, ce))
            if step % cfg.log_every == 0 or step == run_steps:
                logger.info(kv(event="train", step=step, loss=loss, lr=lr))
            if step >= run_steps:
                done = True
                break

    final_ce = next((ce for _, _, ce in reversed(curve) if ce is not None), None)
    if curve_path is not None:
        with open(curve_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss", "eval_loss"])
            for s, loss, ce in curve:
                writer.writerow([s, f"{loss:.6f}", "" if ce is None else f"{ce:.6f}"])
    return TrainResult(params=params, steps=step, curve=curve, final_eval_ce=final_ce)


def perplexity(params: M.Params, vocab: Vocab, texts: Sequence[str],
               seed: int = 0, cfg: TrainConfig | None = None) -> float:
    """exp(mean masked cross-entropy) under a deterministic seeded masking."""
    cfg = cfg or TrainConfig()
    windows = build_windows(vocab, texts, params.config.max_seq)
    if not windows:
        raise QtmineError("perplexity needs at least one non-empty document")
    non_special = _non_special_ids(vocab)
    batches = _eval_batches(np.random.default_rng(seed), windows, vocab, cfg, non_special)
    ce = eval_ce(params, batches)
    if ce is None:
        raise QtmineError("masking targeted no positions; corpus too small")
    return float(np.exp(ce))


def kshot_finetune(
    params: M.Params,
    vocab: Vocab,
    texts: Sequence[str],
    seed: int | np.random.SeedSequence,
    n_steps: int = 50,
    lr: float = 1e-4,
    cfg: TrainConfig | None = None,
) -> M.Params:
    """Fine-tune a copy of `params` on a handful of texts; the copy is returned."""
    base = cfg or TrainConfig()
    tuned = params.copy()
    windows = build_windows(vocab, texts, tuned.config.max_seq)
    if not windows:
        raise QtmineError("no trainable windows in fine-tuning texts")
    rng = np.random.default_rng(seed)
    non_special = _non_special_ids(vocab)
    adam = AdamState(tuned, base)
    for step in range(1, n_steps + 1):
        pick = rng.integers(0, len(windows), size=min(base.batch_size, len(windows)))
        rows = [windows[i] for i in pick]
        batch = mask_batch(rng, rows, vocab, base, non_special)
        loss, grads = mlm_loss(tuned, batch)
        if not np.isfinite(loss):
            raise QtmineError(f"non-finite loss {loss} at fine-tune step {step}")
        if batch.labels.size:
            adam.update(tuned, grads, lr_schedule(step, n_steps, lr, base.warmup_frac))
    return tuned
