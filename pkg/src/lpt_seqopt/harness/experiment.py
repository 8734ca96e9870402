"""End-to-end pipelines: build a task, train offline, optimize online.

Randomness is split into independent streams derived from the run seed
(offline data, offline training, online loop), so loading a cached offline
model leaves the online run bit-identical to training it in place.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import oracles as orc
from ..dso import label_fn_for, model_properties, run
from ..model import LPT, load_checkpoint, save_checkpoint
from ..sampler import ChainBank
from ..seqcore import LabeledSample, Vocabulary, decode, encode, load_dataset, save_buffer
from ..trainer import MetricsLog, fit
from .config import RunConfig, model_config

log = logging.getLogger(__name__)

STREAM_DATA, STREAM_OFFLINE, STREAM_ONLINE, STREAM_NOISE = 1, 2, 3, 4


@dataclass
class Task:
    vocab: Vocabulary
    oracle: orc.Oracle
    offline: list
    optimum: dict | None
    constraints: list
    score_range: tuple | None

    def normalize(self, score):
        if self.score_range is None:
            return np.asarray(score, dtype=np.float64)
        lo, hi = self.score_range
        return (np.asarray(score, dtype=np.float64) - lo) / (hi - lo)


def stream(seed, which):
    return np.random.default_rng([int(seed), which])


def build_oracle(cfg: RunConfig):
    """A fresh oracle (empty memo, zero query count) for the configured task."""
    t = cfg.task
    vocab = Vocabulary(tuple(t.symbols), t.length, eos=t.eos)
    if t.kind == "table":
        base = orc.TableOracle(vocab, seed=t.oracle_seed)
    elif t.kind == "constrained":
        base = orc.constrained_table_task(vocab, t.oracle_seed, t.feasible_frac)
    else:
        base = orc.load_oracle(t.oracle_path)
        vocab = base.vocab
    if t.noise_pct:
        return vocab, orc.NoisyOracle(base, t.noise_pct, seed=cfg.seed * 7919 + STREAM_NOISE)
    return vocab, base


def _clean(oracle):
    return oracle.base if isinstance(oracle, orc.NoisyOracle) else oracle


def build_task(cfg: RunConfig) -> Task:
    vocab, oracle = build_oracle(cfg)
    clean = _clean(oracle)
    constraints = clean.constraint_specs() if isinstance(clean, orc.CompositeOracle) else []
    optimum, score_range = None, None
    rng_range = clean.score_range()
    if rng_range is not None:
        score_range = tuple(rng_range[0])
    if cfg.task.dataset_path:
        offline = load_dataset(cfg.task.dataset_path, vocab)
        try:
            optimum = orc.brute_force(clean)
        except orc.OracleError:
            optimum = None
    else:
        tokens, scores = orc.all_scores(clean)
        optimum = orc.brute_force(clean)
        offline = _offline_sample(tokens, scores, cfg, constraints)
    return Task(vocab, oracle, offline, optimum, constraints, score_range)


def _offline_sample(tokens, scores, cfg: RunConfig, constraints):
    """Uniform draw from the lowest ``offline_pool`` fraction by primary score."""
    rng = stream(cfg.seed, STREAM_DATA)
    order = np.argsort(scores[:, 0], kind="stable")
    pool = order[:max(1, int(len(order) * cfg.task.offline_pool))]
    n = min(cfg.task.n_offline, len(pool))
    pick = np.sort(rng.choice(pool, size=n, replace=False))
    return [LabeledSample(tuple(int(v) for v in tokens[i]), scores[i].copy()) for i in pick]


def new_model(cfg: RunConfig, task: Task) -> LPT:
    props_sigma = float(cfg.model.get("sigma2", 1.0))
    props = model_properties(task.oracle.n_objectives, task.constraints, props_sigma)
    mcfg, _ = model_config(cfg.model, props)
    return LPT(task.vocab, mcfg, seed=cfg.seed)


def _offline_key(cfg: RunConfig):
    d = cfg.to_dict()
    keep = {k: d[k] for k in ("seed", "task", "model", "langevin", "pretrain", "finetune")}
    keep["task"] = {k: v for k, v in keep["task"].items() if k != "noise_pct"}
    blob = json.dumps(keep, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:20]


def offline_train(cfg: RunConfig, task: Task, metrics: MetricsLog | None = None,
                  stages=("pretrain", "finetune")) -> LPT:
    """Pretrain on sequences, then finetune on (sequence, label) pairs.

    With ``cfg.cache_dir`` set, the result is stored as a float64 checkpoint
    keyed by the configuration and reused on later calls.
    """
    cache = None
    if cfg.cache_dir and tuple(stages) == ("pretrain", "finetune"):
        cache = Path(cfg.cache_dir) / f"offline-{_offline_key(cfg)}.ckpt"
        if cache.exists():
            model, _, _ = load_checkpoint(cache)
            return model
    model = new_model(cfg, task)
    label_fn = label_fn_for(task.oracle.n_objectives, task.constraints)
    ys = np.array([np.atleast_1d(s.y) for s in task.offline])
    model.fit_label_scaling(label_fn(ys) if label_fn else ys)
    model = continue_training(cfg, task, model, stages, metrics)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(cache, model, seed=cfg.seed, dtype="<f8", config=cfg.to_dict())
    return model


def continue_training(cfg: RunConfig, task: Task, model: LPT, stages, metrics=None) -> LPT:
    """Run the named offline stages on ``model`` in place."""
    rng = stream(cfg.seed, STREAM_OFFLINE)
    label_fn = label_fn_for(task.oracle.n_objectives, task.constraints)
    # persistent chains carry over from one stage to the next
    bank = ChainBank.gaussian(len(task.offline), model.latent_dim, rng)
    step = 0
    for stage in stages:
        tcfg = getattr(cfg, stage)
        bank.persistent = tcfg.persistent_chains
        if tcfg.epochs:
            _, _, n = fit(model, task.offline, tcfg, cfg.langevin, rng, bank=bank,
                          metrics=metrics, step0=step, label_fn=label_fn)
            step += n
    return model


def _atomic_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def optimize(cfg: RunConfig, model: LPT | None = None, task: Task | None = None,
             out_dir=None, timing=True):
    """Offline training (unless a model is given) then the online loop.

    Returns the report dict; with an output directory also writes the config
    echo, the report, the metrics stream, the threshold CSV, per-iteration
    buffer snapshots and checkpoints.
    """
    out = Path(out_dir or cfg.out_dir) if (out_dir or cfg.out_dir) else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _atomic_text(out / "config.json", cfg.to_json() + "\n")
    metrics = MetricsLog(out / "metrics.jsonl" if out is not None else None)
    if out is not None and (out / "metrics.jsonl").exists():
        (out / "metrics.jsonl").unlink()
    task = task or build_task(cfg)
    if model is None:
        model = offline_train(cfg, task, metrics if out is not None else None)
    model = model.copy()
    if cfg.dso.from_scratch:
        model = new_model(cfg, task)
    _, oracle = build_oracle(cfg)
    rng = stream(cfg.seed, STREAM_ONLINE)

    def checkpoint(state, m):
        if out is None:
            return
        save_buffer(out / "buffer.tsv", state.buffer, m.vocab, state.t)
        extras = {"chains": state.bank.states, "chain_ages": state.bank.ages}
        extras.update(state.optimizer.state_arrays() if state.optimizer else {})
        save_checkpoint(out / "model.ckpt", m, seed=cfg.seed, extras=extras,
                        counters={"iteration": state.t, "queries_used": state.queries_used,
                                  "opt_t": state.optimizer.t if state.optimizer else 0},
                        config=cfg.to_dict())

    dso_cfg = cfg.dso
    if task.constraints and not dso_cfg.constraints:
        dso_cfg = dataclasses.replace(dso_cfg, constraints=[tuple(c) for c in task.constraints])
    _, state, report = run(model, task.offline, oracle, dso_cfg, cfg.langevin, cfg.online, rng,
                           metrics=metrics, on_iteration=checkpoint, timing=timing)
    report = decorate_report(report, cfg, task, oracle)
    if out is not None:
        _atomic_text(out / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
        write_threshold_csv(out / "thresholds.csv", report["threshold_history"])
    return report


def decorate_report(report, cfg: RunConfig, task: Task, oracle):
    report = dict(report)
    report["config"] = cfg.to_dict()
    report["noise_pct"] = cfg.task.noise_pct
    if task.score_range is not None:
        report["score_range"] = list(task.score_range)
    if task.optimum is not None:
        report["optimum"] = {"max": task.optimum["max"], "n_feasible": task.optimum["n_feasible"],
                             "argmax": decode(task.optimum["argmax"], task.vocab)}
        best = report["best_ever"]["score"]
        if best is not None:
            report["best_ever"]["rank"] = orc.rank_of(best, task.optimum["sorted"])
    if isinstance(oracle, orc.NoisyOracle):
        clean = _clean(oracle)
        for entry in report["top_k"]:
            toks = encode(entry["sequence"], task.vocab)
            entry["y_true"] = [float(v) for v in clean([toks])[0]]
    return report


def write_threshold_csv(path, history):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "c_t"])
        for t, c in enumerate(history):
            w.writerow([t, "" if c is None else repr(c)])
    os.replace(tmp, path)


def strip_timing(report):
    """Copy of a report without wall-clock fields, for byte comparisons."""
    report = json.loads(json.dumps(report))
    for rec in report.get("records", []):
        rec.pop("wall_ms", None)
    return report


__all__ = ["Task", "build_oracle", "build_task", "continue_training", "decorate_report",
           "new_model", "offline_train", "optimize", "stream", "strip_timing",
           "write_threshold_csv"]
