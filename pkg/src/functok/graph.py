"""Token-feature bipartite graphs.

A token is linked to a feature when the SAE code of at least one activation
recorded at that token fires the feature. Each (token, feature) pair is an
edge at most once, so degrees count distinct neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from . import __version__, container
from .errors import DomainError
from .lm.activations import ActivationShard
from .sae import SAEModel

MAGIC = b"FTLAB-GR"


def _dedup(edges: np.ndarray) -> np.ndarray:
    if len(edges) == 0:
        return np.zeros((0, 2), dtype=np.uint32)
    edges = np.ascontiguousarray(edges, dtype=np.uint32)
    keys = (edges[:, 0].astype(np.uint64) << np.uint64(32)) | edges[:, 1].astype(np.uint64)
    keys = np.unique(keys)
    return np.stack([(keys >> np.uint64(32)).astype(np.uint32), (keys & np.uint64(0xFFFFFFFF)).astype(np.uint32)], 1)


@dataclass
class BipartiteGraph:
    """Edges sorted by (token_id, feature_id), no duplicates."""

    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.uint32))
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = _dedup(np.asarray(self.edges).reshape(-1, 2))

    def __len__(self) -> int:
        return len(self.edges)

    def add_edges(self, pairs: np.ndarray) -> None:
        if len(pairs):
            self.edges = _dedup(np.concatenate([self.edges, np.asarray(pairs, dtype=np.uint32).reshape(-1, 2)]))

    def union(self, other: "BipartiteGraph") -> "BipartiteGraph":
        return BipartiteGraph(np.concatenate([self.edges, other.edges]), dict(self.provenance))

    @property
    def token_nodes(self) -> np.ndarray:
        return np.unique(self.edges[:, 0])

    @property
    def feature_nodes(self) -> np.ndarray:
        return np.unique(self.edges[:, 1])

    def neighbourhoods(self) -> dict[int, np.ndarray]:
        toks = self.edges[:, 0]
        cuts = np.flatnonzero(np.diff(toks)) + 1
        return {int(chunk[0, 0]): chunk[:, 1].copy() for chunk in np.split(self.edges, cuts) if len(chunk)}

    def feature_degrees(self) -> dict[int, int]:
        f, c = np.unique(self.edges[:, 1], return_counts=True)
        return dict(zip(f.tolist(), c.tolist()))

    def save(self, path: str | Path) -> Path:
        header = dict(self.provenance, kind="graph", package_version=__version__, n_edges=len(self))
        return container.write(path, MAGIC, header, {"edges": self.edges.astype("<u4")})

    @classmethod
    def load(cls, path: str | Path) -> "BipartiteGraph":
        header, tensors = container.read(path, MAGIC)
        if header.get("kind") != "graph":
            raise DomainError(f"{path} is not a graph file")
        prov = {k: v for k, v in header.items() if k not in ("kind", "package_version", "n_edges")}
        return cls(tensors["edges"], prov)


@torch.no_grad()
def shard_edges(records: np.ndarray, sae: SAEModel, batch_size: int = 4096) -> np.ndarray:
    """Deduplicated (token_id, feature_id) pairs fired by ``records``."""
    theta = sae.theta
    out = []
    for i in range(0, len(records), batch_size):
        chunk = records[i : i + batch_size]
        x = torch.from_numpy(np.ascontiguousarray(chunk["vector"])).to(sae.W_enc.dtype)
        rows, feats = torch.nonzero(sae.pre_activations(x) > theta, as_tuple=True)
        toks = chunk["token_id"][rows.numpy()]
        out.append(_dedup(np.stack([toks, feats.numpy()], 1)))
    return _dedup(np.concatenate(out)) if out else np.zeros((0, 2), dtype=np.uint32)


def build_bipartite(shards: Iterable[ActivationShard], sae: SAEModel, graph: BipartiteGraph | None = None,
                    vocab_size: int | None = None) -> BipartiteGraph:
    """Add the edges from every shard record at the SAE's host layer.
    Re-ingesting a shard leaves the graph unchanged."""
    layer, step = sae.config.host_layer, sae.config.host_step
    graph = graph or BipartiteGraph(provenance={"checkpoint_step": step, "layer": layer, "dictionary_width": sae.n,
                                                "vocab_size": vocab_size, "shards": []})
    if graph.provenance.get("layer", layer) != layer or graph.provenance.get("checkpoint_step", step) != step:
        raise DomainError("graph and SAE come from different (checkpoint, layer)")
    for shard in shards:
        shard_step = shard.meta.get("checkpoint_step")
        if shard_step is not None and shard_step != step:
            raise DomainError(f"shard from checkpoint {shard_step} but SAE trained at {step}")
        if len(shard) and layer not in set(shard.records["layer"].tolist()):
            raise DomainError(f"shard has no records at SAE host layer {layer}")
        if shard.d != sae.config.d:
            raise DomainError("shard vector width does not match SAE")
        graph.add_edges(shard_edges(shard.layer(layer), sae))
        graph.provenance.setdefault("shards", []).append(
            {k: shard.meta.get(k) for k in ("sample_seed", "n_docs", "max_tokens")})
    return graph


def token_degrees(graph: BipartiteGraph, ranking: Sequence[int] | None = None) -> list[tuple[int, int]]:
    """(token_id, degree) in ``ranking`` order; tokens without edges get 0.
    Without a ranking, tokens with edges are listed by id."""
    toks, deg = np.unique(graph.edges[:, 0], return_counts=True)
    by_tok = dict(zip(toks.tolist(), deg.tolist()))
    if ranking is None:
        ranking = toks.tolist()
    return [(int(t), int(by_tok.get(int(t), 0))) for t in ranking]


def coverage_curve(graph: BipartiteGraph, ranking: Sequence[int]) -> np.ndarray:
    """``covered[k-1] = |union of N(t_i), i <= k|`` for k = 1..len(ranking)."""
    if len(graph) == 0:
        raise DomainError("coverage of an empty graph is undefined")
    feats = graph.feature_nodes
    seen = np.zeros(len(feats), dtype=bool)
    nb = graph.neighbourhoods()
    covered = np.zeros(len(ranking), dtype=np.int64)
    total = 0
    for k, t in enumerate(ranking):
        n = nb.get(int(t))
        if n is not None:
            idx = np.searchsorted(feats, n)
            total += int((~seen[idx]).sum())
            seen[idx] = True
        covered[k] = total
    return covered


def cumulative_feature_coverage(graph: BipartiteGraph, ranking: Sequence[int], k: int) -> float:
    if not 1 <= k <= len(ranking):
        raise DomainError(f"k={k} outside 1..{len(ranking)}")
    covered = coverage_curve(graph, list(ranking)[:k])
    return float(covered[-1] / len(graph.feature_nodes))


def activation_rate(graph: BipartiteGraph | int, dictionary_width: int) -> float:
    """Share of dictionary features with at least one edge. Accepts a graph
    or a feature-node count."""
    n_feat = graph if isinstance(graph, (int, np.integer)) else len(graph.feature_nodes)
    if dictionary_width < n_feat:
        raise DomainError(f"dictionary width {dictionary_width} smaller than {n_feat} observed features")
    if dictionary_width <= 0:
        raise DomainError("dictionary width must be positive")
    return n_feat / dictionary_width


def degree_by_checkpoint(graphs: Mapping[int, BipartiteGraph], ranking: Sequence[int]) -> tuple[list[int], np.ndarray]:
    """(steps, degrees) with ``degrees[r, j]`` the degree of ``ranking[r]`` in
    the graph of the ``j``-th step."""
    vocabs = {g.provenance.get("vocab_size") for g in graphs.values()} - {None}
    if len(vocabs) > 1:
        raise DomainError(f"graphs use different vocabularies: {sorted(vocabs)}")
    steps = sorted(graphs)
    cols = [np.array([d for _, d in token_degrees(graphs[s], ranking)], dtype=np.int64) for s in steps]
    table = np.stack(cols, 1) if cols else np.zeros((len(ranking), 0), dtype=np.int64)
    return steps, table


COVERAGE_COLUMNS = ["k", "token", "covered", "fraction"]
DEGREE_COLUMNS = ["rank", "token", "degree"]


def coverage_rows(graph: BipartiteGraph, ranking: Sequence[int], labels: Sequence[str] | None = None):
    covered = coverage_curve(graph, ranking)
    denom = len(graph.feature_nodes)
    labels = labels or [str(t) for t in ranking]
    return [[k + 1, labels[k], int(c), f"{c / denom:.6f}"] for k, c in enumerate(covered)]


def degree_rows(graph: BipartiteGraph, ranking: Sequence[int], labels: Sequence[str] | None = None):
    labels = labels or [str(t) for t in ranking]
    return [[r + 1, labels[r], d] for r, (_, d) in enumerate(token_degrees(graph, ranking))]
