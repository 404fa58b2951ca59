"""Bundled reference measurements from the original large-scale study.

Values are kept as ``Decimal`` so that cited figures (and differences
between them) are reproduced digit for digit. Every value carries a short
source label naming the table or passage it was transcribed from.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from decimal import Decimal
from functools import lru_cache
from importlib import resources


@dataclass(frozen=True)
class RefValue:
    value: Decimal
    unit: str
    source: str


@dataclass(frozen=True)
class FunctionTokenRow:
    rank: int
    token: str
    doc_coverage_pct: Decimal
    token_fraction_pct: Decimal
    cumulative_fraction_pct: Decimal


@dataclass(frozen=True)
class CoverageRow:
    rank: int
    token: str
    by_layer_pct: dict  # layer -> Decimal


def _data(name: str) -> str:
    return resources.files("functok").joinpath("data", name).read_text(encoding="utf-8")


@lru_cache(maxsize=None)
def function_token_table() -> tuple[FunctionTokenRow, ...]:
    """The 122 reference function tokens in frequency order. A leading ``_``
    marks a word-initial space."""
    rows = csv.DictReader(_data("reference_function_tokens.csv").splitlines())
    return tuple(FunctionTokenRow(int(r["rank"]), r["token"], Decimal(r["doc_coverage_pct"]),
                                  Decimal(r["token_fraction_pct"]), Decimal(r["cumulative_fraction_pct"]))
                 for r in rows)


TOKEN_TABLE_SOURCE = "reference function-token table (document coverage, token fraction, cumulative fraction)"
COVERAGE_SOURCE = "reference top-10 cumulative feature coverage table"
COVERAGE_LAYERS = (9, 20, 31)


@lru_cache(maxsize=None)
def top10_coverage() -> tuple[CoverageRow, ...]:
    rows = csv.DictReader(_data("reference_top10_coverage.csv").splitlines())
    return tuple(CoverageRow(int(r["rank"]), r["token"],
                             {l: Decimal(r[f"layer_{l}_pct"]) for l in COVERAGE_LAYERS}) for r in rows)


DICTIONARY_WIDTH = 2**20
FEATURE_NODES = {9: 965_635, 20: 947_341, 31: 919_220}
ACTIVATION_RATE_PCT = {9: Decimal("92.1"), 20: Decimal("90.3"), 31: Decimal("87.7")}
FEATURE_NODE_SOURCE = "reference bipartite-graph feature-node counts at width 2^20"

# next-token loss by transition group, small model -> large model
GROUP_LOSSES = {
    "CF": (Decimal("1.90"), Decimal("1.64")),
    "FF": (Decimal("2.12"), Decimal("1.87")),
    "FC": (Decimal("4.88"), Decimal("4.27")),
    "CC": (Decimal("3.69"), Decimal("3.08")),
}
GROUP_LOSS_DELTAS = {"CF": Decimal("0.26"), "FF": Decimal("0.25"), "FC": Decimal("0.61"), "CC": Decimal("0.61")}
GROUP_LOSS_SOURCE = "reference group losses, 1.5B -> 8B parameters"

PRETRAIN = {
    "batch_size": 1024, "seq_len": 4095, "warmup": 8000, "peak_lr": 8e-5, "floor_lr": 8e-7,
    "checkpoints": (3000, 50_000, 130_000),
}
SAE = {
    "batch_size": 4096, "dead_window": 1000, "bandwidth": 0.02, "theta_init": 0.01, "width_multiplier": 16,
    "lambda": {"early": 10.0, "intermediate": 4.0, "late": 2.5}, "count_sample": 500_000,
}
FUNCTION_THRESHOLD = 0.40


def group_loss_delta(group: str) -> Decimal:
    small, large = GROUP_LOSSES[group]
    return small - large


def activation_rate_pct(layer: int) -> Decimal:
    """Feature nodes over dictionary width, as a percentage to one decimal."""
    return (Decimal(FEATURE_NODES[layer]) * 100 / DICTIONARY_WIDTH).quantize(Decimal("0.1"))


def reference_rows() -> list[tuple[str, RefValue]]:
    """Flat (quantity, value) listing of every bundled constant."""
    out: list[tuple[str, RefValue]] = []
    for r in function_token_table():
        for col in ("doc_coverage_pct", "token_fraction_pct", "cumulative_fraction_pct"):
            out.append((f"function_token[{r.rank}:{r.token}].{col}", RefValue(getattr(r, col), "%", TOKEN_TABLE_SOURCE)))
    for r in top10_coverage():
        for layer, v in r.by_layer_pct.items():
            out.append((f"top10_coverage[layer {layer}][k={r.rank}:{r.token}]", RefValue(v, "%", COVERAGE_SOURCE)))
    for layer, n in FEATURE_NODES.items():
        out.append((f"feature_nodes[layer {layer}]", RefValue(Decimal(n), "count", FEATURE_NODE_SOURCE)))
        out.append((f"activation_rate[layer {layer}]", RefValue(ACTIVATION_RATE_PCT[layer], "%", FEATURE_NODE_SOURCE)))
    for g, (small, large) in GROUP_LOSSES.items():
        out.append((f"loss_{g}[small]", RefValue(small, "nats", GROUP_LOSS_SOURCE)))
        out.append((f"loss_{g}[large]", RefValue(large, "nats", GROUP_LOSS_SOURCE)))
        out.append((f"loss_{g}[delta]", RefValue(GROUP_LOSS_DELTAS[g], "nats", GROUP_LOSS_SOURCE)))
    return out
