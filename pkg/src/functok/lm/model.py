"""Small pre-norm decoder-only transformer.

Blocks are bias-free, use rotary position encoding, and a ReLU FFN written in
key-value-memory form: ``z = relu(x W_k^T)``, ``y = z W_v`` with one key row
and one value row per memory slot. The residual stream after each block's
FFN residual addition is the tap point used for activation extraction,
SAE reconstruction and steering.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, DomainError

TAP_POINTS = ("post_ffn_addnorm",)

Hook = Callable[[torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 2
    d_model: int = 128
    d_ffn: int = 512
    n_heads: int = 4
    vocab_size: int = 4096
    max_seq_len: int = 256
    tie_embeddings: bool = False
    tap_point: str = "post_ffn_addnorm"

    def validate(self) -> "TransformerConfig":
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary encoding")
        if self.d_ffn < self.d_model:
            raise ConfigError("d_ffn must be >= d_model")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be >= 2")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.tap_point not in TAP_POINTS:
            raise ConfigError(f"unknown tap point {self.tap_point!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    # mirrors the two-layer small model at desk width
    "desk": TransformerConfig(),
    "tiny": TransformerConfig(n_layers=1, d_model=8, d_ffn=16, n_heads=2, vocab_size=16, max_seq_len=8),
    # smallest preset that exercises every pipeline stage quickly
    "micro": TransformerConfig(n_layers=2, d_model=16, d_ffn=32, n_heads=2, vocab_size=256, max_seq_len=32),
    "trait": TransformerConfig(n_layers=2, d_model=64, d_ffn=256, n_heads=4, vocab_size=768, max_seq_len=64),
}


@dataclass(frozen=True)
class FfnParams:
    W_k: torch.Tensor  # (d_m, d): row i is key k_i
    W_v: torch.Tensor  # (d_m, d): row i is value v_i


def ffn_apply(params: FfnParams, x: torch.Tensor, form: str = "matrix") -> torch.Tensor:
    """FFN output for input ``x`` of shape (..., d).

    ``form="matrix"`` evaluates ``relu(x W_k^T) W_v``; ``form="kv"`` sums
    ``z_i * v_i`` slot by slot. Both must agree.
    """
    if x.shape[-1] != params.W_k.shape[1] or params.W_k.shape != params.W_v.shape:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)}, W_k {tuple(params.W_k.shape)}, W_v {tuple(params.W_v.shape)}")
    if form == "matrix":
        return F.relu(x @ params.W_k.T) @ params.W_v
    if form == "kv":
        y = torch.zeros_like(x)
        for k_i, v_i in zip(params.W_k, params.W_v):
            z_i = torch.clamp(x @ k_i, min=0)
            y = y + z_i.unsqueeze(-1) * v_i
        return y
    raise ValueError(f"unknown form {form!r}")


def _rope_tables(T: int, head_dim: int, dtype, base: float = 10000.0):
    inv = 1.0 / (base ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim))
    ang = torch.outer(torch.arange(T, dtype=torch.float64), inv)
    return ang.cos().to(dtype), ang.sin().to(dtype)


def _rotate(x, cos, sin):
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


class Attention(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model, bias=False)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model, bias=False)

    def forward(self, x):
        B, T, C = x.shape
        hd = C // self.n_heads
        q, k, v = self.qkv(x).split(C, dim=-1)
        q, k, v = (t.view(B, T, self.n_heads, hd).transpose(1, 2) for t in (q, k, v))
        cos, sin = _rope_tables(T, hd, x.dtype)
        q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        mask = torch.ones(T, T, dtype=torch.bool).triu(1)
        att = att.masked_fill(mask, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, C)
        return self.proj(y)


class FFN(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.W_k = nn.Parameter(torch.empty(cfg.d_ffn, cfg.d_model))
        self.W_v = nn.Parameter(torch.empty(cfg.d_ffn, cfg.d_model))

    def params(self) -> FfnParams:
        return FfnParams(self.W_k, self.W_v)

    def forward(self, x):
        return ffn_apply(self.params(), x)


class Block(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FFN(cfg)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ffn(self.ln2(x))


class TransformerModel(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.config = cfg.validate()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.unembed = None if cfg.tie_embeddings else nn.Parameter(torch.zeros(cfg.vocab_size, cfg.d_model))

    def unembedding(self) -> torch.Tensor:
        return self.embed.weight if self.unembed is None else self.unembed

    def forward(self, tokens: torch.Tensor, hooks: Mapping[int, Hook] | None = None, return_taps: bool = False):
        """Logits of shape (B, T, V) for tokens (B, T) or (T,).

        ``hooks[l]`` maps the layer-``l`` tap activation (B, T, d) to the
        tensor passed downstream. With ``return_taps`` the (possibly hooked)
        taps are returned stacked as (n_layers, B, T, d).
        """
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens.unsqueeze(0)
        if tokens.shape[1] > self.config.max_seq_len:
            raise DomainError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        x = self.embed(tokens)
        taps = []
        for layer, block in enumerate(self.blocks):
            x = block(x)
            if hooks and layer in hooks:
                x = hooks[layer](x)
            if return_taps:
                taps.append(x)
        logits = self.ln_f(x) @ self.unembedding().T
        if squeeze:
            logits = logits[0]
            taps = [t[0] for t in taps]
        if return_taps:
            return logits, torch.stack(taps)
        return logits


def init_model(cfg: TransformerConfig, seed: int, dtype: torch.dtype = torch.float32) -> TransformerModel:
    """Truncated-normal (std 0.02, cut at 2 std) for every matrix, unit gains
    and zero offsets for norms, zero unembedding."""
    cfg.validate()
    gen = torch.Generator().manual_seed(seed)
    model = TransformerModel(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name == "unembed":
                p.zero_()
            elif p.dim() >= 2:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=gen)
            elif name.endswith(".weight"):
                p.fill_(1.0)
            else:
                p.zero_()
    return model.to(dtype)
