"""JumpReLU sparse autoencoders over transformer tap activations.

Encoding is ``z = jumprelu(W_enc x + b_enc, theta)`` and decoding
``x_hat = W_dec z + b_dec``, with decoder columns kept at unit norm. The
threshold and the L0 count are not differentiable; both receive
straight-through pseudo-gradients from a rectangle kernel of width
``bandwidth`` centred on the threshold.

Inputs are multiplied by a fixed ``input_scale`` (chosen at training time so
that the mean squared norm equals ``d``) before encoding, and reconstructions
are divided by it, so callers always work in the host model's units.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import __version__, container
from .errors import DomainError, NonFiniteLossError

log = logging.getLogger(__name__)

MAGIC = b"FTLAB-SA"

LAMBDA_PRESETS = {"early": 10.0, "intermediate": 4.0, "late": 2.5}


def _rectangle(u: torch.Tensor) -> torch.Tensor:
    return ((u > -0.5) & (u < 0.5)).to(u.dtype)


class _JumpReLU(torch.autograd.Function):
    @staticmethod
    def forward(ctx, pre, theta, bandwidth):
        ctx.save_for_backward(pre, theta)
        ctx.bandwidth = bandwidth
        return pre * (pre > theta).to(pre.dtype)

    @staticmethod
    def backward(ctx, grad):
        pre, theta = ctx.saved_tensors
        bw = ctx.bandwidth
        grad_pre = grad * (pre > theta).to(pre.dtype)
        grad_theta = -(theta / bw) * _rectangle((pre - theta) / bw) * grad
        return grad_pre, grad_theta.reshape(-1, theta.shape[-1]).sum(0), None


class _Step(torch.autograd.Function):
    @staticmethod
    def forward(ctx, pre, theta, bandwidth):
        ctx.save_for_backward(pre, theta)
        ctx.bandwidth = bandwidth
        return (pre > theta).to(pre.dtype)

    @staticmethod
    def backward(ctx, grad):
        pre, theta = ctx.saved_tensors
        bw = ctx.bandwidth
        grad_theta = -(1.0 / bw) * _rectangle((pre - theta) / bw) * grad
        return torch.zeros_like(pre), grad_theta.reshape(-1, theta.shape[-1]).sum(0), None


def jumprelu(pre: torch.Tensor, theta: torch.Tensor, bandwidth: float = 0.02) -> torch.Tensor:
    """``pre`` where ``pre > theta`` (strictly), else 0."""
    return _JumpReLU.apply(pre, torch.as_tensor(theta, dtype=pre.dtype).expand(pre.shape[-1]), bandwidth)


def step(pre: torch.Tensor, theta: torch.Tensor, bandwidth: float = 0.02) -> torch.Tensor:
    """Indicator ``pre > theta`` with a straight-through threshold gradient."""
    return _Step.apply(pre, torch.as_tensor(theta, dtype=pre.dtype).expand(pre.shape[-1]), bandwidth)


@dataclass(frozen=True)
class SAEConfig:
    d: int
    width_multiplier: int = 16
    host_layer: int = 0
    host_step: int = 0

    @property
    def n(self) -> int:
        return self.d * self.width_multiplier


@dataclass(frozen=True)
class SAETrainConfig:
    lam: float = 4.0
    bandwidth: float = 0.02
    lr: float = 1e-3
    batch_size: int = 1024
    steps: int = 3000
    dead_window: int = 1000
    theta_init: float = 0.01
    lambda_warmup: int = 500
    penalty: str = "l0"  # or "tanh"
    tanh_scale: float = 4.0
    threshold_lr: float | None = None  # defaults to lr
    grad_clip: float = 1.0
    seed: int = 0

    def validate(self) -> "SAETrainConfig":
        if self.lam < 0:
            raise DomainError("lambda must be >= 0")
        if self.bandwidth <= 0:
            raise DomainError("bandwidth must be > 0")
        if self.dead_window < 1:
            raise DomainError("dead window must be >= 1")
        if self.penalty not in ("l0", "tanh"):
            raise DomainError(f"unknown penalty {self.penalty!r}")
        return self


@dataclass
class SparseCode:
    feature_ids: np.ndarray
    strengths: np.ndarray

    def __post_init__(self):
        self.feature_ids = np.asarray(self.feature_ids, dtype=np.int64)
        self.strengths = np.asarray(self.strengths, dtype=np.float64)
        if len(np.unique(self.feature_ids)) != len(self.feature_ids):
            raise DomainError("duplicate feature ids in sparse code")
        if np.any(self.strengths <= 0):
            raise DomainError("sparse code strengths must be positive")

    def __len__(self) -> int:
        return len(self.feature_ids)

    def pairs(self) -> list[tuple[int, float]]:
        return list(zip(self.feature_ids.tolist(), self.strengths.tolist()))


class SAEModel(nn.Module):
    def __init__(self, cfg: SAEConfig, input_scale: float = 1.0):
        super().__init__()
        self.config = cfg
        d, n = cfg.d, cfg.n
        self.W_enc = nn.Parameter(torch.zeros(n, d))
        self.b_enc = nn.Parameter(torch.zeros(n))
        self.W_dec = nn.Parameter(torch.zeros(d, n))
        self.b_dec = nn.Parameter(torch.zeros(d))
        self.log_threshold = nn.Parameter(torch.zeros(n))
        self.input_scale = float(input_scale)

    @property
    def n(self) -> int:
        return self.config.n

    @property
    def theta(self) -> torch.Tensor:
        return self.log_threshold.exp()

    def pre_activations(self, x: torch.Tensor) -> torch.Tensor:
        return (x * self.input_scale) @ self.W_enc.T + self.b_enc

    def encode_dense(self, x: torch.Tensor, bandwidth: float = 0.02) -> torch.Tensor:
        return jumprelu(self.pre_activations(x), self.theta, bandwidth)

    def decode_dense(self, z: torch.Tensor) -> torch.Tensor:
        return (z @ self.W_dec.T + self.b_dec) / self.input_scale

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode_dense(self.encode_dense(x))

    @torch.no_grad()
    def normalize_decoder(self) -> None:
        self.W_dec.div_(self.W_dec.norm(dim=0, keepdim=True).clamp(min=1e-12))

    def feature_direction(self, i: int) -> torch.Tensor:
        """Column ``i`` of the decoder, in host-model units."""
        return self.W_dec[:, i] / self.input_scale


@torch.no_grad()
def sae_encode(model: SAEModel, x: torch.Tensor) -> SparseCode:
    z = model.encode_dense(x.reshape(-1))
    idx = torch.nonzero(z).reshape(-1)
    return SparseCode(idx.numpy(), z[idx].double().numpy())


@torch.no_grad()
def sae_decode(model: SAEModel, code: SparseCode) -> torch.Tensor:
    if len(code) and (code.feature_ids.max() >= model.n or code.feature_ids.min() < 0):
        raise DomainError(f"feature id out of range for dictionary width {model.n}")
    out = model.b_dec.clone()
    for i, c in code.pairs():
        out = out + c * model.W_dec[:, i]
    return out / model.input_scale


def sae_loss(model: SAEModel, x: torch.Tensor, cfg: SAETrainConfig, lam: float | None = None):
    """(total, recon_term, sparsity_term), each averaged over the batch.

    The reconstruction term is the squared error in scaled units, so that it
    is comparable across host models of different activation norms.
    """
    lam = cfg.lam if lam is None else lam
    x2 = x.reshape(-1, model.config.d)
    pre = model.pre_activations(x2)
    z = jumprelu(pre, model.theta, cfg.bandwidth)
    x_hat = z @ model.W_dec.T + model.b_dec
    recon = ((x2 * model.input_scale - x_hat) ** 2).sum(-1).mean()
    if cfg.penalty == "l0":
        sparsity = lam * step(pre, model.theta, cfg.bandwidth).sum(-1).mean()
    else:
        norms = model.W_dec.norm(dim=0)
        sparsity = lam * torch.tanh(cfg.tanh_scale * z * norms).sum(-1).mean()
    return recon + sparsity, recon, sparsity


def init_sae(cfg: SAEConfig, train_cfg: SAETrainConfig, data: torch.Tensor | None = None,
             dtype: torch.dtype = torch.float32) -> SAEModel:
    """Random unit decoder columns, encoder tied to the decoder transpose,
    decoder offset at the data mean, encoder offset cancelling it."""
    gen = torch.Generator().manual_seed(train_cfg.seed)
    scale = 1.0
    if data is not None and len(data):
        scale = math.sqrt(cfg.d / float((data.double() ** 2).sum(-1).mean()))
    model = SAEModel(cfg, scale).to(dtype)
    with torch.no_grad():
        model.W_dec.copy_(torch.randn(cfg.d, cfg.n, generator=gen, dtype=dtype))
        model.normalize_decoder()
        model.W_enc.copy_(model.W_dec.T)
        if data is not None and len(data):
            model.b_dec.copy_((data.to(dtype) * scale).mean(0))
        model.b_enc.copy_(-model.W_enc @ model.b_dec)
        model.log_threshold.fill_(math.log(train_cfg.theta_init))
    return model


class FiringTracker:
    """Last step on which each feature fired; dead means silent for the
    trailing ``window`` steps."""

    def __init__(self, n: int, window: int):
        self.window = window
        self.last_fired = np.full(n, -1, dtype=np.int64)
        self.never = np.ones(n, dtype=bool)
        self.step = -1

    def update(self, step: int, fired: np.ndarray) -> None:
        self.step = step
        self.last_fired[fired] = step
        self.never[fired] = False

    def dead(self) -> set[int]:
        cutoff = self.step - self.window + 1
        return set(np.nonzero(self.never | (self.last_fired < cutoff))[0].tolist())


def detect_dead_features(firing_log: np.ndarray, window: int) -> set[int]:
    """``firing_log`` is (steps, n) of firing counts; dead features have zero
    count over the last ``window`` rows."""
    firing_log = np.asarray(firing_log)
    if window < 1:
        raise DomainError("window must be >= 1")
    if firing_log.shape[0] < window:
        raise DomainError(f"firing log covers {firing_log.shape[0]} steps, fewer than window {window}")
    recent = firing_log[-window:].sum(0)
    return set(np.nonzero(recent == 0)[0].tolist())


@dataclass
class SAEStepMetrics:
    step: int
    loss: float
    recon: float
    sparsity: float
    l0: float
    lam: float


def make_sae_optimizer(model: SAEModel, cfg: SAETrainConfig) -> torch.optim.Adam:
    """Adam without momentum. The log-thresholds may take their own step size
    so that thresholds can travel far from their initial value in a short run."""
    rest = [p for n, p in model.named_parameters() if n != "log_threshold"]
    groups = [{"params": rest}, {"params": [model.log_threshold], "lr": cfg.threshold_lr or cfg.lr}]
    return torch.optim.Adam(groups, lr=cfg.lr, betas=(0.0, 0.999), foreach=False)


def sae_train_step(model: SAEModel, batch: torch.Tensor, cfg: SAETrainConfig, optimizer: torch.optim.Optimizer,
                   step_idx: int = 0, lam: float | None = None) -> tuple[SAEStepMetrics, np.ndarray]:
    """One Adam update, then decoder columns are renormalised. Returns the
    metrics and the ids of features that fired in the batch."""
    lam = cfg.lam if lam is None else lam
    total, recon, sparsity = sae_loss(model, batch, cfg, lam)
    if not torch.isfinite(total):
        raise NonFiniteLossError(f"non-finite SAE loss at step {step_idx}")
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    model.normalize_decoder()
    with torch.no_grad():
        active = model.pre_activations(batch) > model.theta
        l0 = float(active.sum(-1).double().mean())
        fired = torch.nonzero(active.any(0)).reshape(-1).numpy()
    return SAEStepMetrics(step_idx, total.item(), recon.item(), sparsity.item(), l0, lam), fired


@dataclass
class SAETrainResult:
    model: SAEModel
    history: list[SAEStepMetrics]
    dead: set[int]


def train_sae(acts: np.ndarray | torch.Tensor, cfg: SAEConfig, train_cfg: SAETrainConfig,
              log_every: int = 0) -> SAETrainResult:
    """Train on an (N, d) activation matrix, sampling batches with a
    per-step generator so runs are reproducible from the seed alone."""
    train_cfg.validate()
    data = torch.as_tensor(np.asarray(acts, dtype=np.float32))
    if data.ndim != 2 or data.shape[1] != cfg.d:
        raise DomainError(f"activations must be (N, {cfg.d}), got {tuple(data.shape)}")
    model = init_sae(cfg, train_cfg, data)
    opt = make_sae_optimizer(model, train_cfg)
    tracker = FiringTracker(cfg.n, train_cfg.dead_window)
    history = []
    for s in range(train_cfg.steps):
        rng = np.random.default_rng([train_cfg.seed, s])
        idx = rng.integers(0, len(data), size=min(train_cfg.batch_size, len(data)))
        warm = min(1.0, (s + 1) / train_cfg.lambda_warmup) if train_cfg.lambda_warmup else 1.0
        m, fired = sae_train_step(model, data[idx], train_cfg, opt, s, train_cfg.lam * warm)
        tracker.update(s, fired)
        history.append(m)
        if log_every and s % log_every == 0:
            log.info("sae step %d loss %.3f recon %.3f l0 %.1f", s, m.loss, m.recon, m.l0)
    model.eval()
    return SAETrainResult(model, history, tracker.dead())


# --- evaluation ----------------------------------------------------------------

@dataclass(frozen=True)
class ReconScore:
    h_orig: float
    h_star: float
    h_zero: float
    score: float
    in_range: bool


def _mean_ce(lm, tokens: torch.Tensor, hooks, eot_id: int | None, chunk: int = 16) -> float:
    n_vocab = lm.config.vocab_size
    sums, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(tokens), chunk):
            rows = tokens[i : i + chunk]
            inputs, targets = rows[:, :-1], rows[:, 1:]
            logits = lm(inputs, hooks=hooks)
            losses = F.cross_entropy(logits.reshape(-1, n_vocab), targets.reshape(-1), reduction="none")
            valid = torch.ones_like(losses, dtype=torch.bool)
            if eot_id is not None:
                valid = (inputs.reshape(-1) != eot_id) & (targets.reshape(-1) != eot_id)
            sums += float(losses.double()[valid].sum())
            count += int(valid.sum())
    if count == 0:
        raise DomainError("no valid evaluation predictions")
    return sums / count


def reconstruction_score(lm, sae: SAEModel, tokens: torch.Tensor, eot_id: int | None = None,
                         layer: int | None = None) -> ReconScore:
    """Cross-entropy with the tap activation kept, replaced by its SAE
    reconstruction, and replaced by zeros. ``tokens`` is (B, T+1)."""
    layer = sae.config.host_layer if layer is None else layer
    if not 0 <= layer < lm.config.n_layers:
        raise DomainError(f"SAE host layer {layer} not in model")
    if sae.config.d != lm.config.d_model:
        raise DomainError("SAE width does not match host model")
    tokens = torch.as_tensor(tokens)
    if tokens.dim() == 1:
        tokens = tokens[None]
    sae = sae.to(next(lm.parameters()).dtype)
    h_orig = _mean_ce(lm, tokens, None, eot_id)
    h_star = _mean_ce(lm, tokens, {layer: lambda x: sae(x)}, eot_id)
    h_zero = _mean_ce(lm, tokens, {layer: lambda x: torch.zeros_like(x)}, eot_id)
    return score_from_losses(h_orig, h_star, h_zero)


def score_from_losses(h_orig: float, h_star: float, h_zero: float) -> ReconScore:
    if h_orig == h_zero:
        raise DomainError("reconstruction score undefined: zero ablation leaves the loss unchanged")
    score = (h_star - h_zero) / (h_orig - h_zero) + 0.0  # +0.0 turns -0.0 into 0.0
    in_range = h_orig <= h_star <= h_zero
    if not in_range:
        log.warning("reconstruction losses out of order: orig %.4f star %.4f zero %.4f", h_orig, h_star, h_zero)
    return ReconScore(h_orig, h_star, h_zero, score, in_range)


@torch.no_grad()
def feature_firing_counts(sae: SAEModel, acts: np.ndarray | torch.Tensor, batch_size: int = 4096) -> np.ndarray:
    data = torch.as_tensor(np.asarray(acts), dtype=sae.W_enc.dtype)
    counts = np.zeros(sae.n, dtype=np.int64)
    for i in range(0, len(data), batch_size):
        counts += (sae.pre_activations(data[i : i + batch_size]) > sae.theta).sum(0).numpy()
    return counts


def count_unique_features(sae: SAEModel, acts: np.ndarray | torch.Tensor, batch_size: int = 4096) -> int:
    """Number of features active on at least one activation."""
    return int((feature_firing_counts(sae, acts, batch_size) > 0).sum())


@torch.no_grad()
def mean_l0(sae: SAEModel, acts: np.ndarray | torch.Tensor) -> float:
    counts = feature_firing_counts(sae, acts)
    return float(counts.sum() / max(len(acts), 1))


def tune_lambda(score_of: Callable[[float], float], lam0: float, target: float, tol: float,
                max_iter: int = 8) -> tuple[float, float]:
    """Adjust lambda geometrically until ``|score_of(lam) - target| <= tol``.

    Assumes the score decreases as lambda grows. Returns the best
    (lambda, score) seen.
    """
    lo, hi = None, None
    lam = lam0
    best = None
    for _ in range(max_iter):
        s = score_of(lam)
        if best is None or abs(s - target) < abs(best[1] - target):
            best = (lam, s)
        if abs(s - target) <= tol:
            break
        if s > target:
            lo = lam  # too good: raise the penalty
        else:
            hi = lam
        lam = math.sqrt(lo * hi) if lo is not None and hi is not None else (lam * 2 if hi is None else lam / 2)
    return best


# --- persistence -----------------------------------------------------------------

def save_sae(path: str | Path, model: SAEModel, train_cfg: SAETrainConfig | None = None, meta: dict | None = None) -> Path:
    tensors = {n: p.detach().cpu().contiguous().numpy() for n, p in model.named_parameters()}
    header = {
        "kind": "sae",
        "package_version": __version__,
        "config": asdict(model.config),
        "input_scale": model.input_scale,
        "host_layer": model.config.host_layer,
        "host_step": model.config.host_step,
        "train_config": asdict(train_cfg) if train_cfg else None,
        "lambda": train_cfg.lam if train_cfg else None,
        "bandwidth": train_cfg.bandwidth if train_cfg else None,
        "meta": meta or {},
    }
    return container.write(path, MAGIC, header, tensors)


def load_sae(path: str | Path) -> tuple[SAEModel, dict]:
    path = Path(path)
    if not path.exists():
        raise DomainError(f"SAE checkpoint not found: {path}")
    header, tensors = container.read(path, MAGIC)
    if header.get("kind") != "sae":
        raise DomainError(f"{path} is not an SAE checkpoint")
    model = SAEModel(SAEConfig(**header["config"]), header["input_scale"])
    if tensors["W_enc"].dtype == np.float64:
        model = model.double()
    with torch.no_grad():
        for n, p in model.named_parameters():
            p.copy_(torch.from_numpy(tensors[n]))
    model.eval()
    return model, header


FEATURE_COUNT_COLUMNS = ["checkpoint_step", "lambda", "recon_score", "unique_features", "dead_features"]


@dataclass
class FeatureCountRow:
    checkpoint_step: int
    lam: float
    recon_score: float
    unique_features: int
    dead_features: int

    def cells(self) -> list:
        return [self.checkpoint_step, f"{self.lam:.6g}", f"{self.recon_score:.6f}", self.unique_features, self.dead_features]


def identity_sae(d: int, dtype: torch.dtype = torch.float32) -> SAEModel:
    """Width-2d SAE with zero thresholds that reconstructs every input exactly
    as ``relu(x) - relu(-x)``."""
    model = SAEModel(SAEConfig(d, width_multiplier=2)).to(dtype)
    eye = torch.eye(d, dtype=dtype)
    with torch.no_grad():
        model.W_enc.copy_(torch.cat([eye, -eye]))
        model.W_dec.copy_(torch.cat([eye, -eye], dim=1))
        model.log_threshold.fill_(-math.inf)
    return model
