"""Activation shards: fixed-width binary records plus a JSON metadata sidecar."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..errors import DomainError
from .model import TransformerModel


def record_dtype(d: int) -> np.dtype:
    return np.dtype([("doc_id", "<u4"), ("position", "<u4"), ("token_id", "<u4"), ("layer", "<u4"),
                     ("vector", "<f4", (d,))])


@dataclass
class ActivationShard:
    records: np.ndarray  # structured, see record_dtype
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.records.dtype["vector"].shape[0]

    def __len__(self) -> int:
        return len(self.records)

    def layer(self, layer: int) -> np.ndarray:
        return self.records[self.records["layer"] == layer]

    def write(self, path: str | Path) -> Path:
        """Write ``<path>`` (records) and ``<path>.json`` (metadata)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if not np.all(np.isfinite(self.records["vector"])):
            raise DomainError("activation shard contains non-finite values")
        meta = dict(self.meta, d=self.d, n_records=len(self), record_bytes=self.records.dtype.itemsize)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.records.tobytes())
        os.replace(tmp, path)
        Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
        return path

    @classmethod
    def read(cls, path: str | Path) -> "ActivationShard":
        path = Path(path)
        side = Path(str(path) + ".json")
        if not path.exists() or not side.exists():
            raise DomainError(f"activation shard or sidecar missing: {path}")
        meta = json.loads(side.read_text())
        dt = record_dtype(meta["d"])
        raw = path.read_bytes()
        if len(raw) != dt.itemsize * meta["n_records"]:
            raise DomainError(f"{path}: size does not match sidecar record count")
        return cls(np.frombuffer(raw, dtype=dt).copy(), meta)


def sample_documents(docs: Sequence[tuple[int, np.ndarray]], n_docs: int, seed: int) -> list[int]:
    """Indices of ``n_docs`` documents drawn without replacement, in corpus order."""
    n = len(docs)
    if n_docs >= n:
        return list(range(n))
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n, size=n_docs, replace=False))


@torch.no_grad()
def extract_activations(model: TransformerModel, docs: Sequence[tuple[int, np.ndarray]], layers: Sequence[int],
                        n_docs: int, max_tokens: int, seed: int, meta: dict | None = None) -> ActivationShard:
    """Tap activations for the first ``max_tokens`` tokens of ``n_docs``
    sampled documents, one record per (document, position, layer)."""
    cfg = model.config
    for l in layers:
        if not 0 <= l < cfg.n_layers:
            raise DomainError(f"layer {l} outside 0..{cfg.n_layers - 1}")
    model.eval()
    limit = min(max_tokens, cfg.max_seq_len)
    chunks = []
    dt = record_dtype(cfg.d_model)
    for i in sample_documents(docs, n_docs, seed):
        doc_id, ids = docs[i]
        ids = np.asarray(ids[:limit], dtype=np.int64)
        if len(ids) == 0:
            continue
        _, taps = model(torch.from_numpy(ids), return_taps=True)
        for l in layers:
            rec = np.zeros(len(ids), dtype=dt)
            rec["doc_id"] = doc_id
            rec["position"] = np.arange(len(ids))
            rec["token_id"] = ids
            rec["layer"] = l
            rec["vector"] = taps[l].float().numpy()
            chunks.append(rec)
    records = np.concatenate(chunks) if chunks else np.zeros(0, dtype=dt)
    info = {"tap_point": cfg.tap_point, "sample_seed": seed, "n_docs": n_docs, "max_tokens": max_tokens,
            "layers": list(layers)}
    info.update(meta or {})
    return ActivationShard(records, info)
