"""Exact synthetic oracles and their wrappers.

Every oracle maps a batch of token sequences to an (n, n_objectives) score
array. Results are memoized per sequence, and ``query_count`` counts cache
misses only, which makes it the budget meter.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .seqcore import Vocabulary, decode, encode, load_dataset

MAX_TABLE = 2 ** 20


class OracleError(ValueError):
    pass


class SpaceTooLarge(OracleError):
    pass


class UnknownRange(OracleError):
    pass


class VocabMismatch(OracleError):
    pass


class OutOfTable(OracleError, KeyError):
    pass


class Oracle:
    """Memoizing base class; subclasses implement ``_evaluate``."""

    kind = "base"
    n_objectives = 1

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.memo = {}
        self.query_count = 0

    def _evaluate(self, seqs):
        raise NotImplementedError

    def __call__(self, seqs):
        seqs = [tuple(int(t) for t in s) for s in seqs]
        missing = list(dict.fromkeys(s for s in seqs if s not in self.memo))
        if missing:
            vals = np.asarray(self._evaluate(missing), dtype=np.float64).reshape(
                len(missing), self.n_objectives)
            for s, v in zip(missing, vals):
                self.memo[s] = v
            self.query_count += len(missing)
        if not seqs:
            return np.zeros((0, self.n_objectives))
        return np.stack([self.memo[s] for s in seqs])

    def is_cached(self, seq):
        return tuple(seq) in self.memo

    def score_range(self):
        """Per-objective (min, max) if known, else ``None``."""
        return None

    def to_dict(self):
        raise NotImplementedError


def _enumerate(n_symbols, length):
    grids = np.indices((n_symbols,) * length).reshape(length, -1).T
    return np.ascontiguousarray(grids, dtype=np.int64)


def _index_of(tokens, n_symbols):
    tokens = np.asarray(tokens, dtype=np.int64)
    powers = n_symbols ** np.arange(tokens.shape[1] - 1, -1, -1)
    return tokens @ powers


class TableOracle(Oracle):
    """Seeded fixed-length landscape over the full sequence space.

    score(x) = sum_k w_k * max_p PWM_k(x[p:p+width]) + sum_(i,j) J_ij[x_i, x_j]

    The whole table is computed at construction so the optimum, the range
    and every rank are known exactly.
    """

    kind = "table"

    def __init__(self, vocab: Vocabulary, seed=0, n_motifs=3, motif_width=4,
                 n_pairs=12, epistasis=0.5):
        super().__init__(vocab)
        if not vocab.fixed_length:
            raise OracleError("table oracles need a fixed-length vocabulary")
        V, L = vocab.n_symbols, vocab.max_len
        if V ** L > MAX_TABLE:
            raise SpaceTooLarge(f"{V}^{L} sequences exceed the {MAX_TABLE} table limit")
        if not 1 <= motif_width <= L:
            raise OracleError("motif_width must be in 1..max_len")
        self.seed = int(seed)
        self.n_motifs, self.motif_width = n_motifs, motif_width
        self.n_pairs, self.epistasis = n_pairs, epistasis
        rng = np.random.default_rng(self.seed)
        self.pwms = rng.normal(0.0, 1.0, (n_motifs, motif_width, V))
        self.motif_weights = rng.uniform(0.5, 1.5, n_motifs)
        all_pairs = [(i, j) for i in range(L) for j in range(i + 1, L)]
        pick = rng.choice(len(all_pairs), size=min(n_pairs, len(all_pairs)), replace=False)
        self.pairs = [all_pairs[k] for k in sorted(pick)]
        self.couplings = rng.normal(0.0, epistasis, (len(self.pairs), V, V))
        self.sequences = _enumerate(V, L)
        self.table = self._raw(self.sequences)
        self.min, self.max = float(self.table.min()), float(self.table.max())
        if not self.max > self.min:
            raise OracleError("degenerate table: max == min")

    def _raw(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        n, L = tokens.shape
        W = self.motif_width
        score = np.zeros(n)
        for k in range(self.n_motifs):
            best = np.full(n, -np.inf)
            for p in range(L - W + 1):
                s = np.zeros(n)
                for i in range(W):
                    s += self.pwms[k, i, tokens[:, p + i]]
                best = np.maximum(best, s)
            score += self.motif_weights[k] * best
        for c, (i, j) in enumerate(self.pairs):
            score += self.couplings[c, tokens[:, i], tokens[:, j]]
        return score

    def _evaluate(self, seqs):
        tokens = np.asarray(seqs, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] != self.vocab.max_len:
            raise OracleError("table oracle needs sequences of exactly max_len tokens")
        return self.table[_index_of(tokens, self.vocab.n_symbols)]

    def score_range(self):
        return [(self.min, self.max)]

    def normalize(self, score):
        return (np.asarray(score, dtype=np.float64) - self.min) / (self.max - self.min)

    def to_dict(self):
        return {"kind": "table", "vocab": self.vocab.to_dict(), "seed": self.seed,
                "n_motifs": self.n_motifs, "motif_width": self.motif_width,
                "n_pairs": self.n_pairs, "epistasis": self.epistasis}


class MotifOracle(Oracle):
    """Weighted overlapping motif counts minus a per-token length penalty."""

    kind = "motif"

    def __init__(self, vocab: Vocabulary, motifs=(), length_penalty=0.0):
        super().__init__(vocab)
        self.motifs = []
        for pattern, weight in motifs:
            toks = encode(pattern, vocab) if isinstance(pattern, str) else tuple(pattern)
            self.motifs.append((tuple(int(t) for t in toks), float(weight)))
        self.length_penalty = float(length_penalty)

    @staticmethod
    def count(seq, pattern):
        m = len(pattern)
        return sum(1 for i in range(len(seq) - m + 1) if tuple(seq[i:i + m]) == pattern)

    def _evaluate(self, seqs):
        out = []
        for s in seqs:
            v = sum(w * self.count(s, p) for p, w in self.motifs)
            out.append(v - self.length_penalty * len(s))
        return out

    def to_dict(self):
        return {"kind": "motif", "vocab": self.vocab.to_dict(),
                "motifs": [[decode(p, self.vocab), w] for p, w in self.motifs],
                "length_penalty": self.length_penalty}


class FileTableOracle(Oracle):
    """Lookup oracle backed by a ``sequence<TAB>score`` file."""

    kind = "file"

    def __init__(self, vocab: Vocabulary, path):
        super().__init__(vocab)
        self.path = str(path)
        samples = load_dataset(path, vocab)
        if not samples:
            raise OracleError(f"{path}: empty score table")
        self.n_objectives = len(samples[0].y)
        self.lookup = {s.x: np.asarray(s.y, dtype=np.float64) for s in samples}
        vals = np.stack(list(self.lookup.values()))
        self._range = [(float(lo), float(hi)) for lo, hi in zip(vals.min(0), vals.max(0))]

    def _evaluate(self, seqs):
        out = []
        for s in seqs:
            if s not in self.lookup:
                raise OutOfTable(f"sequence {decode(s, self.vocab)!r} is not in {self.path}")
            out.append(self.lookup[s])
        return out

    def score_range(self):
        return self._range

    def to_dict(self):
        return {"kind": "file", "vocab": self.vocab.to_dict(), "path": self.path}


def _noise_seed(seed, seq):
    h = hashlib.blake2b(repr((int(seed), tuple(seq))).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class NoisyOracle(Oracle):
    """Adds one Gaussian draw per sequence, sigma = sigma_pct% of the score range.

    The draw is a function of (seed, sequence) alone, so it does not depend
    on query order.
    """

    kind = "noisy"

    def __init__(self, base: Oracle, sigma_pct, seed=0, score_range=None):
        super().__init__(base.vocab)
        if sigma_pct < 0:
            raise OracleError("sigma_pct must be non-negative")
        rng_ = score_range or base.score_range()
        if rng_ is None:
            raise UnknownRange("base oracle range unknown; pass score_range")
        self.base = base
        self.n_objectives = base.n_objectives
        self.sigma_pct = float(sigma_pct)
        self.seed = int(seed)
        self._range = [tuple(r) for r in rng_]
        self.sigma = np.array([self.sigma_pct / 100.0 * (hi - lo) for lo, hi in self._range])

    def _evaluate(self, seqs):
        clean = self.base(seqs)
        if not self.sigma_pct:
            return clean
        noise = np.stack([np.random.default_rng(_noise_seed(self.seed, s)).standard_normal(
            self.n_objectives) for s in seqs])
        return clean + noise * self.sigma

    def true_values(self, seqs):
        return self.base(seqs)

    def score_range(self):
        return self._range

    def to_dict(self):
        return {"kind": "noisy", "base": self.base.to_dict(), "sigma_pct": self.sigma_pct,
                "seed": self.seed}


class CompositeOracle(Oracle):
    """Stacks a primary objective with constraint objectives.

    ``constraints`` is a list of (oracle, bound, direction) with direction
    ``">"`` or ``"<"``; the output row is [y1, y2, ...].
    """

    kind = "composite"

    def __init__(self, primary: Oracle, constraints=()):
        super().__init__(primary.vocab)
        self.primary = primary
        self.constraints = []
        for oracle, bound, direction in constraints:
            if oracle.vocab != primary.vocab:
                raise VocabMismatch("constraint oracle uses a different vocabulary")
            if direction not in (">", "<"):
                raise OracleError(f"constraint direction must be '>' or '<', got {direction!r}")
            self.constraints.append((oracle, float(bound), direction))
        self.n_objectives = primary.n_objectives + len(self.constraints)

    def _evaluate(self, seqs):
        cols = [self.primary(seqs)] + [o(seqs)[:, :1] for o, _, _ in self.constraints]
        return np.concatenate(cols, axis=1)

    def constraint_specs(self):
        """(objective index, direction, bound) per constraint."""
        p = self.primary.n_objectives
        return [(p + i, d, b) for i, (_, b, d) in enumerate(self.constraints)]

    def score_range(self):
        parts = [self.primary.score_range()] + [o.score_range() for o, _, _ in self.constraints]
        if any(p is None for p in parts):
            return None
        return list(parts[0]) + [p[0] for p in parts[1:]]

    def to_dict(self):
        return {"kind": "composite", "primary": self.primary.to_dict(),
                "constraints": [{"oracle": o.to_dict(), "bound": b, "direction": d}
                                for o, b, d in self.constraints]}


def feasible(y, constraint_specs):
    """Boolean mask over rows of ``y`` satisfying every (index, direction, bound)."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    ok = np.ones(len(y), dtype=bool)
    for j, direction, bound in constraint_specs:
        ok &= (y[:, j] > bound) if direction == ">" else (y[:, j] < bound)
    return ok


def oracle_from_dict(d, base_dir=None):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "noisy":
        return NoisyOracle(oracle_from_dict(d["base"], base_dir), d.get("sigma_pct", 0.0),
                           d.get("seed", 0), d.get("score_range"))
    if kind == "composite":
        cons = [(oracle_from_dict(c["oracle"], base_dir), c["bound"], c.get("direction", ">"))
                for c in d.get("constraints", [])]
        return CompositeOracle(oracle_from_dict(d["primary"], base_dir), cons)
    if "vocab" not in d:
        raise OracleError("oracle definition needs a 'vocab' entry")
    vocab = Vocabulary.from_dict(d.pop("vocab"))
    if kind == "table":
        return TableOracle(vocab, **d)
    if kind == "motif":
        return MotifOracle(vocab, [tuple(m) for m in d.get("motifs", [])],
                           d.get("length_penalty", 0.0))
    if kind == "file":
        path = Path(d["path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return FileTableOracle(vocab, path)
    raise OracleError(f"unknown oracle kind {kind!r}")


def load_oracle(path):
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise OracleError(f"{path}: invalid JSON ({e})") from None
    return oracle_from_dict(d, base_dir=path.parent)


def save_oracle(path, oracle: Oracle):
    Path(path).write_text(json.dumps(oracle.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def enumerate_space(vocab: Vocabulary):
    V, L = vocab.n_symbols, vocab.max_len
    if not vocab.fixed_length:
        raise OracleError("enumeration needs a fixed-length vocabulary")
    if V ** L > MAX_TABLE:
        raise SpaceTooLarge(f"{V}^{L} sequences exceed the {MAX_TABLE} table limit")
    return _enumerate(V, L)


def all_scores(oracle: Oracle):
    """(tokens, scores) over the whole space without touching the query meter."""
    if isinstance(oracle, TableOracle):
        return oracle.sequences, oracle.table[:, None]
    tokens = enumerate_space(oracle.vocab)
    if isinstance(oracle, CompositeOracle):
        cols = [all_scores(oracle.primary)[1]] + [all_scores(o)[1][:, :1]
                                                 for o, _, _ in oracle.constraints]
        return tokens, np.concatenate(cols, axis=1)
    if isinstance(oracle, NoisyOracle):
        return all_scores(oracle.base)
    seqs = [tuple(t) for t in tokens]
    return tokens, np.asarray(oracle._evaluate(seqs), dtype=np.float64).reshape(len(seqs), -1)


def brute_force(oracle: Oracle):
    """Exact optimum of the primary objective, subject to any constraints.

    Returns a dict with the optimum score and sequence, the feasible count,
    and the sorted feasible primary scores (descending) for rank queries.
    """
    tokens, scores = all_scores(oracle)
    mask = np.ones(len(tokens), dtype=bool)
    if isinstance(oracle, CompositeOracle):
        mask = feasible(scores, oracle.constraint_specs())
    if not mask.any():
        raise OracleError("no feasible sequence in the space")
    prim = scores[:, 0]
    cand = np.flatnonzero(mask)
    best = cand[np.argmax(prim[cand])]
    return {
        "max": float(prim[best]),
        "argmax": tuple(int(t) for t in tokens[best]),
        "min": float(prim.min()),
        "n_total": int(len(tokens)),
        "n_feasible": int(mask.sum()),
        "sorted": np.sort(prim[cand])[::-1],
    }


def rank_of(score, sorted_desc):
    """1-based rank a score would take in a descending table (ties share the best rank)."""
    return int(np.searchsorted(-np.asarray(sorted_desc), -score, side="left")) + 1


def constrained_table_task(vocab: Vocabulary, seed=0, feasible_frac=0.1):
    """Maximize one table landscape subject to a second one lying in its top ``feasible_frac``."""
    primary = TableOracle(vocab, seed=seed)
    other = TableOracle(vocab, seed=seed + 10_007)
    bound = float(np.quantile(other.table, 1.0 - feasible_frac))
    return CompositeOracle(primary, [(other, bound, ">")])


__all__ = [
    "CompositeOracle", "FileTableOracle", "MotifOracle", "NoisyOracle", "Oracle", "OracleError",
    "OutOfTable", "SpaceTooLarge", "TableOracle", "UnknownRange", "VocabMismatch", "all_scores",
    "brute_force", "constrained_table_task", "enumerate_space", "feasible", "load_oracle",
    "oracle_from_dict", "rank_of", "save_oracle",
]
