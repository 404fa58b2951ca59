"""Autoregressive training with four-way transition-group loss tracking."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigError, DomainError, NonFiniteLossError
from .model import TransformerModel

log = logging.getLogger(__name__)


class TransitionGroup(IntEnum):
    FF = 0
    FC = 1
    CF = 2
    CC = 3


def classify_transition(current_is_function: bool, next_is_function: bool) -> TransitionGroup:
    return TransitionGroup(2 * (not current_is_function) + (not next_is_function))


def transition_groups(tokens: Sequence[int], function_mask: np.ndarray) -> list[TransitionGroup]:
    """Groups of the consecutive (current, next) pairs of a token sequence."""
    return [classify_transition(bool(function_mask[a]), bool(function_mask[b])) for a, b in zip(tokens, tokens[1:])]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    seq_len: int = 256
    steps: int = 5000
    warmup: int = 200
    peak_lr: float = 3e-3
    floor_lr: float = 3e-5
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    grad_clip: float = 1.0
    log_every: int = 50
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.warmup < 1 or self.steps < 1:
            raise ConfigError("warmup and steps must be >= 1")
        if not 0 <= self.floor_lr <= self.peak_lr:
            raise ConfigError("need 0 <= floor_lr <= peak_lr")
        if self.seq_len < 1 or self.batch_size < 1:
            raise ConfigError("batch_size and seq_len must be >= 1")
        return self


TRAIN_PRESETS = {
    "desk": TrainConfig(),
    # recorded reference hyperparameters; not runnable at desk scale
    "full_scale": TrainConfig(batch_size=1024, seq_len=4095, steps=130_000, warmup=8000,
                                   peak_lr=8e-5, floor_lr=8e-7),
}


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr`` over ``warmup`` updates, cosine decay to
    ``floor_lr`` at ``steps``, constant afterwards. ``step`` counts updates
    (1-based), so ``lr_at(cfg.warmup) == cfg.peak_lr`` exactly."""
    if step <= cfg.warmup:
        return cfg.peak_lr * step / cfg.warmup
    if step >= cfg.steps:
        return cfg.floor_lr
    frac = (step - cfg.warmup) / (cfg.steps - cfg.warmup)
    return cfg.floor_lr + 0.5 * (cfg.peak_lr - cfg.floor_lr) * (1.0 + math.cos(math.pi * frac))


class TokenStream:
    """Concatenated training tokens with an end-of-document separator.

    The batch for update ``step`` depends only on ``(seed, step)``, so the
    data cursor of a checkpoint is simply its step.
    """

    def __init__(self, docs: Iterable[np.ndarray], eot_id: int | None):
        parts = []
        for ids in docs:
            parts.append(np.asarray(ids, dtype=np.int64))
            if eot_id is not None:
                parts.append(np.array([eot_id], dtype=np.int64))
        self.tokens = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        self.eot_id = eot_id

    def __len__(self) -> int:
        return len(self.tokens)

    def batch(self, step: int, batch_size: int, seq_len: int, seed: int) -> torch.Tensor:
        if len(self.tokens) < seq_len + 2:
            raise DomainError("training stream shorter than one sequence")
        rng = np.random.default_rng([seed, step])
        starts = rng.integers(0, len(self.tokens) - seq_len - 1, size=batch_size)
        idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
        return torch.from_numpy(self.tokens[idx])


@dataclass
class GroupStats:
    """Summed loss and token count per transition group."""

    loss_sum: np.ndarray = field(default_factory=lambda: np.zeros(4))
    count: np.ndarray = field(default_factory=lambda: np.zeros(4, dtype=np.int64))

    def add(self, other: "GroupStats") -> None:
        self.loss_sum += other.loss_sum
        self.count += other.count

    def means(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.count > 0, self.loss_sum / np.maximum(self.count, 1), np.nan)

    def overall(self) -> float:
        return float(self.loss_sum.sum() / self.count.sum())


def token_losses(model: TransformerModel, batch: torch.Tensor, function_mask: torch.Tensor,
                 eot_id: int | None = None):
    """Per-prediction cross-entropy, validity mask and group index for a
    (B, T+1) batch. Predictions touching an end-of-document token are invalid."""
    inputs, targets = batch[:, :-1], batch[:, 1:]
    logits = model(inputs)
    losses = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    cur, nxt = inputs.reshape(-1), targets.reshape(-1)
    valid = torch.ones_like(cur, dtype=torch.bool)
    if eot_id is not None:
        valid = (cur != eot_id) & (nxt != eot_id)
    group = 2 * (~function_mask[cur]).long() + (~function_mask[nxt]).long()
    return losses, valid, group


def group_stats(losses: torch.Tensor, valid: torch.Tensor, group: torch.Tensor) -> GroupStats:
    lv = losses.detach().double()[valid]
    gv = group[valid]
    sums = torch.zeros(4, dtype=torch.float64).index_add_(0, gv, lv)
    counts = torch.bincount(gv, minlength=4)
    return GroupStats(sums.numpy().copy(), counts.numpy().astype(np.int64))


def make_optimizer(model: TransformerModel, cfg: TrainConfig) -> torch.optim.AdamW:
    decay = [p for n, p in model.named_parameters() if p.dim() >= 2]
    no_decay = [p for n, p in model.named_parameters() if p.dim() < 2]
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.peak_lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps, foreach=False,
    )


@dataclass
class StepResult:
    loss: float
    stats: GroupStats
    grad_norm: float
    lr: float


def train_step(model: TransformerModel, optimizer: torch.optim.Optimizer, batch: torch.Tensor,
               function_mask: torch.Tensor, lr: float, step: int, eot_id: int | None = None,
               grad_clip: float | None = 1.0) -> StepResult:
    """One AdamW update on the mean next-token loss of the valid predictions.

    Group statistics come from the same forward pass as the gradient.
    """
    model.train()
    losses, valid, group = token_losses(model, batch, function_mask, eot_id)
    n_valid = valid.sum()
    loss = (losses * valid).sum() / n_valid.clamp(min=1)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip:
        grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip))
    else:
        grad_norm = float(torch.sqrt(sum((p.grad.double() ** 2).sum() for p in model.parameters() if p.grad is not None)))
    if not math.isfinite(loss.item()) or not math.isfinite(grad_norm):
        raise NonFiniteLossError(f"non-finite loss at step {step}: loss={loss.item()}, lr={lr:.3g}, grad_norm={grad_norm}")
    for g in optimizer.param_groups:
        g["lr"] = lr
    optimizer.step()
    return StepResult(float(loss.item()), group_stats(losses, valid, group), grad_norm, lr)


GROUP_NAMES = [g.name for g in TransitionGroup]
TRACE_COLUMNS = (["step", "lr", "loss_all"] + [f"loss_{g}" for g in GROUP_NAMES]
                 + ["count_all"] + [f"count_{g}" for g in GROUP_NAMES])


@dataclass
class TraceEntry:
    step: int
    lr: float
    stats: GroupStats

    def row(self) -> list:
        means = self.stats.means()
        return ([self.step, f"{self.lr:.6e}", f"{self.stats.overall():.6f}"]
                + [("" if np.isnan(m) else f"{m:.6f}") for m in means]
                + [int(self.stats.count.sum())] + [int(c) for c in self.stats.count])


class LossGroupTrace:
    """Append-only CSV of per-group mean losses at each logging step."""

    def __init__(self, path: str | Path | None = None, preamble: Sequence[str] = ()):
        self.entries: list[TraceEntry] = []
        self.path = Path(path) if path else None
        if self.path and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            buf = io.StringIO()
            for line in preamble:
                buf.write(f"# {line}\n")
            csv.writer(buf, lineterminator="\n").writerow(TRACE_COLUMNS)
            self.path.write_text(buf.getvalue())

    def append(self, entry: TraceEntry) -> None:
        self.entries.append(entry)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(entry.row())

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
        out = []
        for r in csv.DictReader(lines):
            out.append({k: (float(v) if v != "" else float("nan")) for k, v in r.items()})
        return out


def configure_determinism(threads: int = 1, deterministic: bool = True) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(deterministic)


@dataclass
class TrainResult:
    model: TransformerModel
    optimizer: torch.optim.Optimizer
    step: int
    trace: LossGroupTrace
    checkpoints: dict[int, Path] = field(default_factory=dict)


def train(model: TransformerModel, stream: TokenStream, function_mask: np.ndarray, cfg: TrainConfig, *,
          optimizer: torch.optim.Optimizer | None = None, start_step: int = 0, stop_step: int | None = None,
          trace: LossGroupTrace | None = None, checkpoint_steps: Iterable[int] = (),
          checkpoint_dir: str | Path | None = None, checkpoint_meta: dict | None = None,
          pending: GroupStats | None = None, progress: bool = False) -> TrainResult:
    """Run updates ``start_step .. stop_step-1``.

    Update ``s`` computes the loss of the parameters after ``s`` updates and
    applies learning rate ``lr_at(s + 1)``. A trace entry is logged at every
    multiple of ``log_every`` (and at the final update), aggregating the
    group statistics since the previous entry. ``checkpoint_steps`` are
    counts of completed updates.
    """
    from .checkpoint import save_checkpoint

    cfg.validate()
    optimizer = optimizer or make_optimizer(model, cfg)
    trace = trace if trace is not None else LossGroupTrace()
    fmask = torch.as_tensor(function_mask, dtype=torch.bool)
    stop = cfg.steps if stop_step is None else stop_step
    ckpt_steps = set(checkpoint_steps)
    out = TrainResult(model, optimizer, start_step, trace)
    acc = GroupStats(pending.loss_sum.copy(), pending.count.copy()) if pending else GroupStats()
    for s in range(start_step, stop):
        lr = lr_at(s + 1, cfg)
        batch = stream.batch(s, cfg.batch_size, cfg.seq_len, cfg.seed)
        res = train_step(model, optimizer, batch, fmask, lr, s, stream.eot_id, cfg.grad_clip)
        acc.add(res.stats)
        if s % cfg.log_every == 0 or s == cfg.steps - 1:
            trace.append(TraceEntry(s, lr, acc))
            acc = GroupStats()
            if progress:
                log.info("step %d lr %.2e loss %.4f", s, lr, res.loss)
        out.step = s + 1
        if checkpoint_dir is not None and (s + 1) in ckpt_steps:
            path = Path(checkpoint_dir) / f"step_{s + 1:07d}.ftck"
            save_checkpoint(path, model, optimizer, s + 1, cfg, pending=acc, meta=checkpoint_meta)
            out.checkpoints[s + 1] = path
    return out
