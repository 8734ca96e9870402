"""Evaluation metrics over labeled samples and run reports.

``performance`` and ``diversity`` at 128 are analogs of the usual
sequence-design reporting: diversity is the mean pairwise Hamming distance
for fixed-length tasks and the mean length-normalised Levenshtein distance
otherwise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .. import kernels


class NotEnoughUnique(ValueError):
    pass


class EmptyHistory(ValueError):
    pass


def _unique_best(samples):
    """Deduplicate (sequence, score) pairs keeping each sequence's best score."""
    best = {}
    for seq, score in samples:
        seq = tuple(seq)
        if seq not in best or score > best[seq]:
            best[seq] = float(score)
    return sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))


def eval_topk(samples, k):
    """(mean, sd, scores) of the k best unique sequences; ``samples`` are (seq, score)."""
    ranked = _unique_best(samples)
    if len(ranked) < k:
        raise NotEnoughUnique(f"need {k} unique sequences, have {len(ranked)}")
    scores = [s for _, s in ranked[:k]]
    return float(np.mean(scores)), float(np.std(scores)), scores


def eval_diversity(samples, k=128, fixed_length=None):
    ranked = _unique_best(samples)
    if len(ranked) < k:
        raise NotEnoughUnique(f"need {k} unique sequences, have {len(ranked)}")
    seqs = [s for s, _ in ranked[:k]]
    if k < 2:
        return 0.0
    if fixed_length is None:
        fixed_length = len({len(s) for s in seqs}) == 1
    if fixed_length:
        return float(kernels.mean_pairwise_hamming(np.array(seqs, dtype=np.int64)))
    total, pairs = 0.0, 0
    for i in range(len(seqs)):
        for j in range(i + 1, len(seqs)):
            d = kernels.levenshtein(seqs[i], seqs[j])
            total += d / max(len(seqs[i]), len(seqs[j]))
            pairs += 1
    return total / pairs


def top10_history(trace, k=10):
    """Running mean of the best ``k`` scores seen after each query."""
    if not len(trace):
        raise EmptyHistory("no queries recorded")
    best = []
    out = np.empty(len(trace))
    for i, v in enumerate(trace):
        best.append(float(v))
        if len(best) > k:
            best.sort(reverse=True)
            best.pop()
        out[i] = np.mean(best)
    return out


def eval_auc_top10(history, budget):
    """Area under the best-10 curve over ``budget`` queries, in [0, 1] for [0, 1] scores.

    Query i (1-based) contributes ``history[i-1]``; a run that stops early
    keeps its final value up to the budget.
    """
    h = np.asarray(history, dtype=np.float64)
    if h.size == 0:
        raise EmptyHistory("no queries recorded")
    if budget < 1:
        raise ValueError("budget must be positive")
    h = h[:budget]
    area = h.sum() + h[-1] * (budget - len(h))
    return float(area / budget)


@dataclass
class EvalReport:
    top1: float
    top2: float
    top3: float
    top50_mean: float | None
    top50_sd: float | None
    top100_mean: float | None
    top100_sd: float | None
    performance_128: float | None
    diversity_128: float | None
    auc_top10: float | None
    queries_used: int
    normalized: bool

    def to_dict(self):
        return asdict(self)


def _maybe(fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except NotEnoughUnique:
        return None


def evaluate_report(report: dict) -> EvalReport:
    """Metrics from a run report; scores are normalised when the range is known."""
    lo, hi = report.get("score_range", (0.0, 1.0))
    normalized = "score_range" in report
    key = "y_true" if report["top_k"] and "y_true" in report["top_k"][0] else None

    def norm(v):
        return (v - lo) / (hi - lo) if normalized else v

    samples = []
    for entry in report["top_k"]:
        score = entry[key][0] if key else entry["score"]
        samples.append((entry["sequence"], norm(score)))
    ranked = [s for _, s in _unique_best(samples)]
    tops = (ranked + [float("nan")] * 3)[:3]
    m50 = _maybe(eval_topk, samples, 50)
    m100 = _maybe(eval_topk, samples, 100)
    m128 = _maybe(eval_topk, samples, 128)
    # decoded sequences are compared glyph by glyph
    coded = [(tuple(ord(c) for c in seq), v) for seq, v in samples]
    div = _maybe(eval_diversity, coded, 128)
    auc = None
    trace = report.get("query_trace") or []
    if trace:
        budget = report.get("config", {}).get("dso", {}).get("budget", len(trace))
        auc = eval_auc_top10(top10_history([norm(v) for v in trace]), budget)
    return EvalReport(
        top1=tops[0], top2=tops[1], top3=tops[2],
        top50_mean=m50[0] if m50 else None, top50_sd=m50[1] if m50 else None,
        top100_mean=m100[0] if m100 else None, top100_sd=m100[1] if m100 else None,
        performance_128=m128[0] if m128 else None, diversity_128=div,
        auc_top10=auc, queries_used=int(report.get("queries_used", 0)), normalized=normalized)


def observed_top_true_mean(report: dict, k=50):
    """Mean true score of the k entries ranked best by the labels the run saw.

    For noisy runs this is what a user would actually get by trusting the
    buffer; ranking by ``y_true`` instead would peek at the clean oracle.
    """
    entries = sorted(report["top_k"], key=lambda e: -e["score"])
    if len(entries) < k:
        raise NotEnoughUnique(f"need {k} entries, have {len(entries)}")
    lo, hi = report.get("score_range", (0.0, 1.0))
    vals = [(e["y_true"][0] if "y_true" in e else e["score"]) for e in entries[:k]]
    return float((np.mean(vals) - lo) / (hi - lo))


def evaluate_file(path) -> EvalReport:
    with open(path, encoding="utf-8") as fh:
        return evaluate_report(json.load(fh))
