"""Tokenizers: byte-level BPE (lossless) and a whitespace splitter for oracle tests."""

from __future__ import annotations

import heapq
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError

# GPT-2 style pre-tokenization on raw bytes; every byte matches some branch,
# so the pieces concatenate back to the input.
PRETOKEN_RE = re.compile(
    rb"'(?:s|t|re|ve|m|ll|d)| ?[A-Za-z]+| ?[0-9]+| ?[^\sA-Za-z0-9]+|\s+(?!\S)|\s+"
)

EOT = "<|endoftext|>"


def display(piece: bytes) -> str:
    """Printable, single-line surface form of a token's bytes."""
    text = piece.decode("utf-8", errors="backslashreplace")
    return text.replace("\\", "\\\\").replace("\n", "\\n").replace("\r", "\\r").replace("\t", "\\t")


@dataclass(frozen=True)
class TokenizerSpec:
    mode: str = "bpe"  # "bpe" | "whitespace"
    vocab_size: int = 4096
    path: str | None = None  # trained vocabulary file

    def __post_init__(self):
        if self.mode not in ("bpe", "whitespace"):
            raise ConfigError(f"unknown tokenizer mode {self.mode!r}")
        if self.mode == "bpe" and self.vocab_size < 257:
            raise ConfigError("bpe vocab_size must exceed the 256 byte tokens")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")


class ByteBPETokenizer:
    """Byte-level BPE. Ids 0..255 are raw bytes, then merges, then special tokens."""

    lossless = True

    def __init__(self, merges: list[tuple[int, int]], specials: tuple[str, ...] = (EOT,)):
        self.merges = [tuple(m) for m in merges]
        self.specials = tuple(specials)
        self.ranks = {pair: 256 + i for i, pair in enumerate(self.merges)}
        self.pieces: list[bytes] = [bytes([i]) for i in range(256)]
        for a, b in self.merges:
            self.pieces.append(self.pieces[a] + self.pieces[b])
        self.special_ids = {s: len(self.pieces) + i for i, s in enumerate(self.specials)}
        self._cache: dict[bytes, tuple[int, ...]] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.pieces) + len(self.specials)

    @property
    def eot_id(self) -> int | None:
        return self.special_ids.get(EOT)

    @classmethod
    def train(cls, texts: Iterable[bytes], vocab_size: int, specials: tuple[str, ...] = (EOT,)):
        words = Counter()
        for text in texts:
            words.update(PRETOKEN_RE.findall(text))
        n_merges = vocab_size - 256 - len(specials)
        if n_merges < 0:
            raise ConfigError("vocab_size too small for byte tokens plus specials")
        return cls(_learn_merges(words, n_merges), specials)

    def _encode_word(self, word: bytes) -> tuple[int, ...]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        ids = list(word)
        ranks = self.ranks
        while len(ids) > 1:
            best = None
            best_rank = None
            for pair in zip(ids, ids[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            out = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == best[0] and ids[i + 1] == best[1]:
                    out.append(best_rank)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        result = tuple(ids)
        self._cache[word] = result
        return result

    def encode(self, text: bytes) -> np.ndarray:
        out: list[int] = []
        for word in PRETOKEN_RE.findall(text):
            out.extend(self._encode_word(word))
        return np.asarray(out, dtype=np.int32)

    def decode(self, ids: Iterable[int]) -> bytes:
        names = {v: k.encode() for k, v in self.special_ids.items()}
        return b"".join(self.pieces[i] if i < len(self.pieces) else names[i] for i in ids)

    def token_bytes(self, token_id: int) -> bytes:
        if token_id < len(self.pieces):
            return self.pieces[token_id]
        return self.specials[token_id - len(self.pieces)].encode()

    def to_json(self) -> dict:
        return {"type": "bpe", "merges": [list(m) for m in self.merges], "specials": list(self.specials)}


def _learn_merges(words: Counter, n_merges: int) -> list[tuple[int, int]]:
    # Incremental pair counting over unique pre-tokens; a lazy max-heap keyed on
    # (-count, pair) gives deterministic tie-breaking by lowest pair ids.
    vocab = sorted(words.items())
    seqs = [list(w) for w, _ in vocab]
    freqs = [c for _, c in vocab]
    pair_counts: dict[tuple[int, int], int] = defaultdict(int)
    where: dict[tuple[int, int], set[int]] = defaultdict(set)
    for idx, seq in enumerate(seqs):
        for pair in zip(seq, seq[1:]):
            pair_counts[pair] += freqs[idx]
            where[pair].add(idx)
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)
    merges: list[tuple[int, int]] = []
    next_id = 256
    while len(merges) < n_merges and heap:
        neg, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg or -neg <= 0:
            continue
        merges.append(pair)
        new_id = next_id
        next_id += 1
        touched: dict[tuple[int, int], int] = {}
        for idx in sorted(where.pop(pair, ())):
            seq = seqs[idx]
            f = freqs[idx]
            for p in zip(seq, seq[1:]):
                pair_counts[p] -= f
                touched[p] = pair_counts[p]
            out = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == pair[0] and seq[i + 1] == pair[1]:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[idx] = out
            for p in zip(out, out[1:]):
                pair_counts[p] += f
                touched[p] = pair_counts[p]
                where[p].add(idx)
        pair_counts.pop(pair, None)
        for p in sorted(touched):
            c = pair_counts.get(p, 0)
            if c > 0 and p != pair:
                heapq.heappush(heap, (-c, p))
    return merges


class WhitespaceTokenizer:
    """Splits on ASCII whitespace. Vocabulary ids follow byte order of the
    word types; the last id is reserved for unknown words."""

    lossless = False

    def __init__(self, vocab: list[bytes]):
        self.vocab = list(vocab)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.unk_id = len(self.vocab)
        self.eot_id = None

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + 1

    @classmethod
    def train(cls, texts: Iterable[bytes], vocab_size: int):
        counts = Counter()
        for text in texts:
            counts.update(text.split())
        keep = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: vocab_size - 1]
        return cls(sorted(w for w, _ in keep))

    def encode(self, text: bytes) -> np.ndarray:
        unk = self.unk_id
        return np.asarray([self.index.get(w, unk) for w in text.split()], dtype=np.int32)

    def decode(self, ids: Iterable[int]) -> bytes:
        return b" ".join(self.token_bytes(i) for i in ids)

    def token_bytes(self, token_id: int) -> bytes:
        return self.vocab[token_id] if token_id < len(self.vocab) else b"<unk>"

    def to_json(self) -> dict:
        return {"type": "whitespace", "vocab": [w.decode("latin-1") for w in self.vocab]}


Tokenizer = ByteBPETokenizer | WhitespaceTokenizer


def train_tokenizer(texts: Iterable[bytes], spec: TokenizerSpec) -> Tokenizer:
    if spec.mode == "bpe":
        return ByteBPETokenizer.train(texts, spec.vocab_size)
    return WhitespaceTokenizer.train(texts, spec.vocab_size)


def save_tokenizer(tok: Tokenizer, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(tok.to_json(), separators=(",", ":")) + "\n")
    return path


def load_tokenizer(path: str | Path) -> Tokenizer:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"vocabulary file not found: {path}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"vocabulary file {path} is not valid JSON: {exc}") from exc
    if obj.get("type") == "bpe":
        return ByteBPETokenizer([tuple(m) for m in obj["merges"]], tuple(obj.get("specials", (EOT,))))
    if obj.get("type") == "whitespace":
        return WhitespaceTokenizer([w.encode("latin-1") for w in obj["vocab"]])
    raise ConfigError(f"unknown tokenizer type in {path}: {obj.get('type')!r}")
