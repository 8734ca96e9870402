"""Vocabularies, token sequences, labeled samples and the shifting buffer."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

TokenSeq = tuple  # tuple of vocabulary indices


class SeqError(ValueError):
    pass


class UnknownSymbol(SeqError):
    def __init__(self, glyph, position):
        super().__init__(f"unknown symbol {glyph!r} at position {position}")
        self.glyph = glyph
        self.position = position


class SequenceTooLong(SeqError):
    pass


class SequenceTooShort(SeqError):
    pass


class ParseError(SeqError):
    def __init__(self, line, reason=""):
        super().__init__(f"line {line}: {reason}" if reason else f"line {line}")
        self.line = line


class UnlabeledProposal(SeqError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    """Emittable symbols plus the reserved BOS/EOS/PAD indices.

    Output classes are the symbols, followed by EOS for variable-length
    tasks. BOS and PAD are input-only and never emitted.
    """

    symbols: tuple
    max_len: int
    eos: bool = False

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(self.symbols))
        if not 1 <= len(self.symbols) <= 64:
            raise ValueError("vocabulary size must be in [1, 64]")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be unique")
        if self.max_len < 1:
            raise ValueError("max_len must be positive")
        self._index  # build lookup eagerly

    @property
    def _index(self):
        try:
            return self.__dict__["_lookup"]
        except KeyError:
            lookup = {s: i for i, s in enumerate(self.symbols)}
            object.__setattr__(self, "_lookup", lookup)
            return lookup

    @property
    def n_symbols(self):
        return len(self.symbols)

    @property
    def n_classes(self):
        return self.n_symbols + (1 if self.eos else 0)

    @property
    def eos_id(self):
        return self.n_symbols if self.eos else None

    @property
    def bos_id(self):
        return self.n_classes

    @property
    def pad_id(self):
        return self.n_classes + 1

    @property
    def n_inputs(self):
        return self.n_classes + 2

    @property
    def fixed_length(self):
        return not self.eos

    def to_dict(self):
        return {"symbols": list(self.symbols), "max_len": self.max_len, "eos": self.eos}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["symbols"]), int(d["max_len"]), bool(d.get("eos", False)))


def _split_glyphs(text, vocab):
    if all(len(s) == 1 for s in vocab.symbols):
        return list(text)
    # greedy longest match for multi-character glyphs
    longest = max(len(s) for s in vocab.symbols)
    out, i = [], 0
    while i < len(text):
        for width in range(min(longest, len(text) - i), 0, -1):
            if text[i:i + width] in vocab._index:
                out.append(text[i:i + width])
                i += width
                break
        else:
            raise UnknownSymbol(text[i], len(out))
    return out


def encode(text: str, vocab: Vocabulary) -> TokenSeq:
    glyphs = _split_glyphs(text, vocab)
    if not glyphs:
        raise SequenceTooShort("empty sequence")
    if len(glyphs) > vocab.max_len:
        raise SequenceTooLong(f"length {len(glyphs)} exceeds max_len {vocab.max_len}")
    out = []
    for pos, g in enumerate(glyphs):
        try:
            out.append(vocab._index[g])
        except KeyError:
            raise UnknownSymbol(g, pos) from None
    if vocab.fixed_length and len(out) != vocab.max_len:
        raise SequenceTooShort(f"fixed-length task needs {vocab.max_len} tokens, got {len(out)}")
    return tuple(out)


def decode(tokens: Sequence[int], vocab: Vocabulary) -> str:
    return "".join(vocab.symbols[t] for t in tokens)


def validate(tokens: Sequence[int], vocab: Vocabulary) -> TokenSeq:
    tokens = tuple(int(t) for t in tokens)
    if not tokens:
        raise SequenceTooShort("empty sequence")
    if len(tokens) > vocab.max_len:
        raise SequenceTooLong(f"length {len(tokens)} exceeds max_len {vocab.max_len}")
    if vocab.fixed_length and len(tokens) != vocab.max_len:
        raise SequenceTooShort(f"fixed-length task needs {vocab.max_len} tokens")
    for pos, t in enumerate(tokens):
        if not 0 <= t < vocab.n_symbols:
            raise UnknownSymbol(t, pos)
    return tokens


@dataclass
class LabeledSample:
    x: TokenSeq
    y: np.ndarray
    z0: np.ndarray | None = None
    y_is_oracle: bool = True

    def __post_init__(self):
        self.x = tuple(self.x)
        self.y = np.atleast_1d(np.asarray(self.y, dtype=np.float64))


def batch_tokens(seqs: Sequence[TokenSeq], vocab: Vocabulary):
    """Teacher-forcing arrays for a batch.

    Returns (inputs, targets, mask), each (B, T) with T = max_len. Inputs are
    BOS followed by the shifted sequence; targets include EOS after a
    variable-length sequence shorter than max_len; mask is 1 where the
    target contributes to the likelihood.
    """
    T = vocab.max_len
    B = len(seqs)
    inputs = np.full((B, T), vocab.pad_id, dtype=np.int64)
    targets = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T))
    inputs[:, 0] = vocab.bos_id
    for b, s in enumerate(seqs):
        n = len(s)
        targets[b, :n] = s
        mask[b, :n] = 1.0
        inputs[b, 1:min(n + 1, T)] = s[:T - 1]
        if vocab.eos and n < T:
            targets[b, n] = vocab.eos_id
            mask[b, n] = 1.0
    return inputs, targets, mask


# dataset files ----------------------------------------------------------------

def load_dataset(path, vocab: Vocabulary) -> list[LabeledSample]:
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) < 2:
                raise ParseError(lineno, "expected sequence<TAB>score")
            try:
                y = [float(p) for p in parts[1:]]
            except ValueError:
                raise ParseError(lineno, "score is not a number") from None
            samples.append(LabeledSample(encode(parts[0], vocab), np.array(y)))
    return samples


def _atomic_write(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def format_dataset(samples: Iterable[LabeledSample], vocab: Vocabulary, header=True) -> str:
    lines = ["# sequence\tscore"] if header else []
    for s in samples:
        scores = "\t".join(repr(float(v)) for v in s.y)
        lines.append(f"{decode(s.x, vocab)}\t{scores}")
    return "\n".join(lines) + "\n"


def save_dataset(path, samples, vocab):
    _atomic_write(path, format_dataset(samples, vocab))


# shifting buffer ---------------------------------------------------------------

RankFn = Callable[[LabeledSample], float]


def primary_rank(sample: LabeledSample) -> float:
    return float(sample.y[0])


@dataclass
class ShiftingDataset:
    """Capacity-bounded buffer of the best oracle-labeled samples.

    ``capacity=None`` keeps the plain union (no eviction).
    """

    capacity: int | None
    entries: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    threshold: float = -np.inf

    def __post_init__(self):
        if self.capacity is not None and self.capacity < 1:
            raise ValueError("capacity must be positive")

    def __len__(self):
        return len(self.entries)

    @property
    def keys(self):
        return [e.x for e in self.entries]

    @property
    def full(self):
        return self.capacity is not None and len(self.entries) >= self.capacity

    def copy(self):
        return ShiftingDataset(self.capacity, list(self.entries), list(self.scores), self.threshold)


def buffer_merge(buffer: ShiftingDataset, proposals: Sequence[LabeledSample],
                 rank: RankFn = primary_rank) -> ShiftingDataset:
    """Top-n of buffer union proposals, deduplicated by token sequence.

    At equal score incumbents beat newcomers, then lexicographic token order.
    For a duplicate sequence the higher-scored copy is kept.
    """
    for p in proposals:
        if not p.y_is_oracle:
            raise UnlabeledProposal(f"proposal {p.x} has no oracle label")
    best = {}
    for order, (sample, score) in enumerate(zip(buffer.entries, buffer.scores)):
        best[sample.x] = (-score, 0, sample.x, sample)
    for p in proposals:
        score = rank(p)
        cand = (-score, 1, p.x, p)
        cur = best.get(p.x)
        if cur is None or cand[:2] < cur[:2]:
            best[p.x] = cand
    ordered = sorted(best.values(), key=lambda t: t[:3])
    if buffer.capacity is not None:
        ordered = ordered[:buffer.capacity]
    entries = [t[3] for t in ordered]
    scores = [-t[0] for t in ordered]
    out = ShiftingDataset(buffer.capacity, entries, scores)
    if out.full and scores:
        out.threshold = max(scores[-1], buffer.threshold)
    else:
        out.threshold = buffer.threshold
    return out


def save_buffer(path, buffer: ShiftingDataset, vocab: Vocabulary, iteration: int):
    """Dataset-format snapshot plus a JSON sidecar at ``path + '.json'``."""
    path = Path(path)
    save_dataset(path, buffer.entries, vocab)
    meta = {
        "iteration": iteration,
        "threshold": None if not np.isfinite(buffer.threshold) else float(buffer.threshold),
        "capacity": buffer.capacity,
    }
    _atomic_write(path.with_name(path.name + ".json"), json.dumps(meta, indent=2))


def load_buffer(path, vocab: Vocabulary, rank: RankFn = primary_rank):
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    samples = load_dataset(path, vocab)
    buf = buffer_merge(ShiftingDataset(meta["capacity"]), samples, rank)
    if meta["threshold"] is not None:
        buf.threshold = float(meta["threshold"])
    return buf, meta["iteration"]
