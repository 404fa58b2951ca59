"""Corpus reading, streaming token statistics, Zipf fitting and function-token
classification by cumulative frequency."""

from __future__ import annotations

import csv
import gzip
import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy import stats as sstats

from .errors import ConfigError, DomainError
from .tokenizer import Tokenizer, display

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Document:
    doc_id: int
    text: bytes


def _open_text(path: Path):
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8", errors="surrogateescape")
    return open(path, encoding="utf-8", errors="surrogateescape")


def read_jsonl(path: str | Path) -> Iterator[Document]:
    """Records ``{"id": int, "text": str}``; malformed lines are logged and skipped."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"corpus not found: {path}")
    with _open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc_id = int(rec["id"])
                text = rec["text"]
                if not isinstance(text, str):
                    raise TypeError("text is not a string")
            except (ValueError, KeyError, TypeError) as exc:
                log.warning("%s:%d: skipping malformed record (%s)", path, lineno, exc)
                continue
            # surrogatepass keeps lone surrogates as invalid utf-8 so the
            # tokenizer stage can reject the document with a diagnostic
            yield Document(doc_id, text.encode("utf-8", errors="surrogatepass"))


def read_directory(path: str | Path) -> Iterator[Document]:
    """One document per file, ordered by file name."""
    path = Path(path)
    if not path.is_dir():
        raise ConfigError(f"corpus directory not found: {path}")
    for i, f in enumerate(sorted(p for p in path.iterdir() if p.is_file())):
        yield Document(i, f.read_bytes())


def read_corpus(path: str | Path) -> Iterator[Document]:
    path = Path(path)
    if path.is_dir():
        return read_directory(path)
    return read_jsonl(path)


def write_jsonl(docs: Iterable[Document], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = "".join(
        json.dumps({"id": d.doc_id, "text": d.text.decode("utf-8")}, ensure_ascii=False) + "\n" for d in docs
    ).encode("utf-8")
    if path.suffix == ".gz":
        # fixed mtime and no file name keep the archive byte-deterministic
        with open(path, "wb") as raw_fh, gzip.GzipFile(filename="", mode="wb", fileobj=raw_fh, mtime=0) as fh:
            fh.write(raw)
    else:
        path.write_bytes(raw)
    return path


def tokenize_stream(source: Iterable[Document], tokenizer: Tokenizer) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(doc_id, token_ids)`` per document; one item per document is the
    boundary record, so empty documents still appear (with zero tokens)."""
    for doc in source:
        try:
            doc.text.decode("utf-8")
        except UnicodeDecodeError as exc:
            log.warning("doc %d: skipping document with malformed utf-8 (%s)", doc.doc_id, exc)
            continue
        yield doc.doc_id, tokenizer.encode(doc.text)


def iter_pairs(stream: Iterable[tuple[int, np.ndarray]]) -> Iterator[tuple[int, int]]:
    for doc_id, ids in stream:
        for t in ids:
            yield doc_id, int(t)


class TokenCounter:
    """Mergeable streaming accumulator of token counts and document coverage.

    Shards counted independently combine with ``merge`` (associative and
    commutative); ranking happens once at the end.
    """

    def __init__(self, vocab_size: int):
        self.vocab_size = vocab_size
        self.counts = np.zeros(vocab_size, dtype=np.int64)
        self.doc_counts = np.zeros(vocab_size, dtype=np.int64)
        self.n_docs = 0

    def add_document(self, ids: np.ndarray) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise DomainError("token id outside vocabulary")
        self.counts += np.bincount(ids, minlength=self.vocab_size)
        self.doc_counts[np.unique(ids)] += 1
        self.n_docs += 1

    def update(self, stream: Iterable[tuple[int, np.ndarray]]) -> "TokenCounter":
        for _, ids in stream:
            self.add_document(ids)
        return self

    def merge(self, other: "TokenCounter") -> "TokenCounter":
        if other.vocab_size != self.vocab_size:
            raise DomainError("cannot merge counters over different vocabularies")
        out = TokenCounter(self.vocab_size)
        out.counts = self.counts + other.counts
        out.doc_counts = self.doc_counts + other.doc_counts
        out.n_docs = self.n_docs + other.n_docs
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class TokenTable:
    """Tokens with nonzero count, in rank order (count desc, token_id asc)."""

    token_ids: np.ndarray
    counts: np.ndarray
    doc_counts: np.ndarray
    n_docs: int
    surfaces: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / self.total

    @property
    def cumulative_fractions(self) -> np.ndarray:
        # from integer running sums so the last entry is exactly 1.0
        return np.cumsum(self.counts) / self.total

    @property
    def doc_coverage(self) -> np.ndarray:
        return self.doc_counts / self.n_docs

    def __len__(self) -> int:
        return len(self.token_ids)

    def rank_of(self) -> dict[int, int]:
        """Map token_id to 1-based rank."""
        return {int(t): r for r, t in enumerate(self.token_ids, 1)}

    def row(self, token_id: int) -> dict:
        r = self.rank_of()[token_id] - 1
        return {
            "rank": r + 1,
            "token_id": int(self.token_ids[r]),
            "token": self.surfaces[r] if self.surfaces else str(int(self.token_ids[r])),
            "count": int(self.counts[r]),
            "fraction": float(self.fractions[r]),
            "cumulative_fraction": float(self.cumulative_fractions[r]),
            "doc_coverage": float(self.doc_coverage[r]),
        }

    def to_csv(self, path: str | Path, preamble: Sequence[str] = ()) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        for line in preamble:
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "token_id", "token", "count", "fraction", "cumulative_fraction", "doc_coverage"])
        fr, cf, dc = self.fractions, self.cumulative_fractions, self.doc_coverage
        for r in range(len(self)):
            w.writerow(
                [r + 1, int(self.token_ids[r]), self.surfaces[r] if self.surfaces else "",
                 int(self.counts[r]), f"{fr[r]:.6f}", f"{cf[r]:.6f}", f"{dc[r]:.6f}"]
            )
        path.write_text(buf.getvalue())
        return path

    @classmethod
    def from_csv(cls, path: str | Path, n_docs: int | None = None) -> "TokenTable":
        """Rebuild from a written CSV. Document counts are recovered from the
        six-decimal coverage column, so they are exact only for |D| < 10^6."""
        rows = list(csv.DictReader(line for line in Path(path).read_text().splitlines() if not line.startswith("#")))
        if n_docs is None:
            meta = [line for line in Path(path).read_text().splitlines() if line.startswith("# n_docs=")]
            if not meta:
                raise DomainError(f"{path}: n_docs not recorded")
            n_docs = int(meta[0].split("=", 1)[1])
        return cls(
            token_ids=np.array([int(r["token_id"]) for r in rows], dtype=np.int64),
            counts=np.array([int(r["count"]) for r in rows], dtype=np.int64),
            doc_counts=np.array([round(float(r["doc_coverage"]) * n_docs) for r in rows], dtype=np.int64),
            n_docs=n_docs,
            surfaces=[r["token"] for r in rows],
        )


def table_from_counter(counter: TokenCounter, tokenizer: Tokenizer | None = None) -> TokenTable:
    if counter.n_docs == 0 or counter.total == 0:
        raise DomainError("empty corpus")
    present = np.flatnonzero(counter.counts)
    # lexsort: last key is primary -> count desc, then token_id asc
    order = present[np.lexsort((present, -counter.counts[present]))]
    surfaces = [display(tokenizer.token_bytes(int(t))) for t in order] if tokenizer is not None else []
    return TokenTable(order, counter.counts[order], counter.doc_counts[order], counter.n_docs, surfaces)


def compute_token_stats(stream: Iterable[tuple[int, np.ndarray]], vocab_size: int,
                        tokenizer: Tokenizer | None = None) -> TokenTable:
    return table_from_counter(TokenCounter(vocab_size).update(stream), tokenizer)


@dataclass(frozen=True)
class ZipfFit:
    alpha: float
    intercept: float
    r_squared: float
    fit_range: tuple[int, int]


def fit_zipf(counts: Sequence[int] | TokenTable, fit_range: tuple[int, int] | None = None) -> ZipfFit:
    """Least-squares fit of log f(r) = intercept - alpha * log r.

    ``counts`` are rank-ordered frequencies (rank 1 first). ``fit_range`` is an
    inclusive 1-based rank range, defaulting to 1..min(10^4, len).
    """
    if isinstance(counts, TokenTable):
        counts = counts.counts
    f = np.asarray(counts, dtype=np.float64)
    if fit_range is None:
        fit_range = (1, min(10_000, len(f)))
    lo, hi = fit_range
    if lo < 1 or hi > len(f) or lo > hi:
        raise DomainError(f"fit range {fit_range} outside 1..{len(f)}")
    ranks = np.arange(lo, hi + 1, dtype=np.float64)
    freq = f[lo - 1 : hi]
    keep = freq > 0
    ranks, freq = ranks[keep], freq[keep]
    if len(ranks) < 2:
        raise DomainError("underdetermined fit")
    x, y = np.log(ranks), np.log(freq)
    if np.all(y == y[0]):
        # flat line: slope 0, goodness of fit undefined -> reported as 0
        return ZipfFit(0.0, float(y[0]), 0.0, (lo, hi))
    res = sstats.linregress(x, y)
    return ZipfFit(float(-res.slope), float(res.intercept), float(res.rvalue**2), (lo, hi))


@dataclass(frozen=True)
class FunctionTokenSet:
    token_ids: frozenset[int]
    ranked_ids: tuple[int, ...]
    threshold: float
    achieved_fraction: float
    tokens: tuple[str, ...] = ()

    def __contains__(self, token_id: int) -> bool:
        return token_id in self.token_ids

    def mask(self, vocab_size: int) -> np.ndarray:
        m = np.zeros(vocab_size, dtype=bool)
        m[list(self.token_ids)] = True
        return m

    def to_json(self) -> dict:
        return {
            "threshold": self.threshold,
            "achieved_fraction": self.achieved_fraction,
            "token_ids": list(self.ranked_ids),
            "tokens": list(self.tokens),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FunctionTokenSet":
        ids = tuple(int(t) for t in obj["token_ids"])
        return cls(frozenset(ids), ids, float(obj["threshold"]), float(obj["achieved_fraction"]),
                   tuple(obj.get("tokens", ())))


def shortest_prefix(cumulative: Sequence[float], threshold: float) -> int:
    """Length of the shortest prefix whose cumulative fraction reaches
    ``threshold``; the whole sequence if it never does (with a warning)."""
    if not 0.0 < threshold:
        raise DomainError("threshold must lie in (0, 1)")
    cum = np.asarray(cumulative, dtype=np.float64)
    if len(cum) == 0:
        raise DomainError("empty table")
    if threshold >= 1.0:
        warnings.warn(f"threshold {threshold} >= 1: every token is a function token", stacklevel=3)
        return len(cum)
    k = int(np.searchsorted(cum, threshold, side="left")) + 1
    if k > len(cum):
        warnings.warn(
            f"threshold {threshold} not reached (max cumulative {cum[-1]:.6f}); returning all {len(cum)} tokens",
            stacklevel=3,
        )
        return len(cum)
    return k


def classify_function_tokens(table: TokenTable, threshold: float = 0.40) -> FunctionTokenSet:
    k = shortest_prefix(table.cumulative_fractions, threshold)
    ids = tuple(int(t) for t in table.token_ids[:k])
    achieved = float(table.counts[:k].sum() / table.total)
    return FunctionTokenSet(frozenset(ids), ids, threshold, achieved, tuple(table.surfaces[:k]))


@dataclass(frozen=True)
class BurstinessHistogram:
    token_id: int
    bins: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.bins)


def compute_burstiness(token_id: int, stream: Iterable[tuple[int, np.ndarray]], n_bins: int) -> BurstinessHistogram:
    """Occurrences of ``token_id`` per group of consecutive documents; groups
    have equal size, with the remainder spread over the leading groups."""
    if n_bins < 1:
        raise DomainError("n_bins must be >= 1")
    per_doc = [int(np.count_nonzero(np.asarray(ids) == token_id)) for _, ids in stream]
    n = len(per_doc)
    if n_bins > n:
        raise DomainError("more bins than documents")
    base, extra = divmod(n, n_bins)
    bins = np.zeros(n_bins, dtype=np.int64)
    start = 0
    for b in range(n_bins):
        size = base + (1 if b < extra else 0)
        bins[b] = sum(per_doc[start : start + size])
        start += size
    return BurstinessHistogram(token_id, bins)


def coverage_by_rank(table: TokenTable) -> tuple[np.ndarray, np.ndarray]:
    """(rank, doc_coverage) series for the coverage-vs-rank plot."""
    return np.arange(1, len(table) + 1), table.doc_coverage
