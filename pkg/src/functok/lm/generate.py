from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
import torch

from .model import Hook, TransformerModel


@torch.no_grad()
def greedy_generate(model: TransformerModel, prompt: Sequence[int], max_new_tokens: int,
                    hooks: Mapping[int, Hook] | None = None) -> list[int]:
    """Greedy decoding, recomputing the full prefix each step so that any hook
    on prompt positions applies in every forward pass. Ties in the argmax go
    to the lowest token id."""
    model.eval()
    ids = list(int(t) for t in prompt)
    out = []
    for _ in range(max_new_tokens):
        window = ids[-model.config.max_seq_len :]
        logits = model(torch.tensor(window, dtype=torch.long), hooks=hooks)
        nxt = int(torch.argmax(logits[-1]))
        ids.append(nxt)
        out.append(nxt)
    return out


@torch.no_grad()
def prediction_row(model: TransformerModel, prompt: Sequence[int]) -> np.ndarray:
    """Top-1 next token after each prefix ``prompt[:p+1]``."""
    model.eval()
    logits = model(torch.tensor(list(prompt), dtype=torch.long))
    return torch.argmax(logits, dim=-1).numpy().astype(np.int64)


def prediction_table(models: Sequence[tuple[int, TransformerModel]], prompt: Sequence[int]) -> tuple[list[int], np.ndarray]:
    """Rows are checkpoints (by step), columns prefix lengths 1..len(prompt)."""
    steps = [s for s, _ in models]
    table = np.stack([prediction_row(m, prompt) for _, m in models]) if models else np.zeros((0, len(prompt)), np.int64)
    return steps, table
