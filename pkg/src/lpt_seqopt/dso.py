"""Online optimization by distribution shifting.

Each iteration proposes sequences from latents conditioned on a score just
beyond the buffer's current upper range, relabels them with the oracle,
keeps the top-n of the union in the shifting buffer and retrains the model
on that buffer with top-N weights.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .model.lpt import LPT, PropertySpec
from .oracles import feasible
from .sampler import ChainBank, GradCounter, LangevinConfig, sample_conditional, sample_posterior
from .seqcore import (
    LabeledSample,
    ShiftingDataset,
    UnlabeledProposal,
    buffer_merge,
    decode,
    encode,
)
from .trainer import AdamW, MetricsLog, TrainConfig, fit, weighted_objective

log = logging.getLogger(__name__)


class BudgetExhausted(RuntimeError):
    pass


@dataclass
class DsoConfig:
    m_proposals: int = 1000
    delta_frac: float = 0.05
    delta_y: list | None = None
    anchor: str = "mean_top_k"
    anchor_k: int = 100
    max_iters: int = 25
    budget: int = 20000
    patience: int = 3
    capacity: int | None = 1000
    top_n: int | None = 500
    constraints: list = field(default_factory=list)
    objective_weights: list | None = None
    from_scratch: bool = False
    proposal: str = "conditional"
    proposal_steps: int = 30
    guidance_weight: float = 1.0
    persistent_chains: bool = True
    online_steps: int = 2
    fresh_steps: int = 15
    chain_init: str = "gaussian"
    prefix: str | None = None
    temperature: float = 1.0

    def __post_init__(self):
        if self.m_proposals < 1:
            raise ValueError("m_proposals must be >= 1")
        if self.budget < self.m_proposals:
            raise ValueError("budget must be >= m_proposals")
        if self.anchor not in ("max", "mean_top_k"):
            raise ValueError("anchor must be 'max' or 'mean_top_k'")
        if self.proposal not in ("conditional", "prior"):
            raise ValueError("proposal must be 'conditional' or 'prior'")
        if self.chain_init not in ("gaussian", "proposal"):
            raise ValueError("chain_init must be 'gaussian' or 'proposal'")
        if self.max_iters < 1 or self.patience < 1:
            raise ValueError("max_iters and patience must be >= 1")
        if self.capacity is not None and self.top_n is not None and self.top_n > self.capacity:
            raise ValueError("top_n must not exceed capacity")
        self.constraints = [tuple(c) for c in self.constraints]
        for j, direction, _ in self.constraints:
            if direction not in (">", "<") or j < 1:
                raise ValueError("constraints are (objective index >= 1, '>' or '<', bound)")


def model_properties(n_objectives, constraints, sigma2=1.0):
    """One regression head per free objective and one binary head per constraint."""
    cons = {j for j, _, _ in constraints}
    props = [PropertySpec(f"y{j}", "regression", sigma2)
             for j in range(n_objectives) if j not in cons]
    props += [PropertySpec(f"c{j}", "binary") for j, _, _ in constraints]
    return props


def label_fn_for(n_objectives, constraints):
    """Map raw oracle rows (B, n_objectives) to model labels in head order."""
    cons = [j for j, _, _ in constraints]
    free = [j for j in range(n_objectives) if j not in cons]
    if not constraints:
        return None

    def fn(y):
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        cols = [y[:, free]] + [feasible(y, [c]).astype(np.float64)[:, None] for c in constraints]
        return np.concatenate(cols, axis=1)

    return fn


def rank_fn_for(cfg: DsoConfig):
    """Ranking score: weighted objective sum, zeroed when a constraint fails."""
    weights = cfg.objective_weights
    constraints = cfg.constraints

    def rank(sample):
        y = np.atleast_1d(sample.y)
        score = float(y[0]) if weights is None else float(np.dot(weights, y[:len(weights)]))
        if constraints and not feasible(y, constraints)[0]:
            return 0.0
        return score

    return rank


@dataclass
class RunState:
    t: int
    buffer: ShiftingDataset
    bank: ChainBank
    queries_used: int = 0
    best_ever: LabeledSample | None = None
    best_score: float = -math.inf
    threshold_history: list = field(default_factory=list)
    records: list = field(default_factory=list)
    query_trace: list = field(default_factory=list)
    budget_exhausted: bool = False
    optimizer: AdamW | None = None
    train_steps: int = 0


def _finite(v):
    return None if v is None or not math.isfinite(v) else float(v)


def conditioning_target(model: LPT, buffer: ShiftingDataset, cfg: DsoConfig, label_fn=None):
    """y* + delta_y per model head; binary heads are targeted at 1."""
    entries = buffer.entries
    y = np.array([np.atleast_1d(s.y) for s in entries], dtype=np.float64)
    labels = label_fn(y) if label_fn else y
    k = cfg.anchor_k if cfg.anchor == "mean_top_k" and len(entries) >= cfg.anchor_k else 1
    target = np.zeros(len(model.properties))
    for j, spec in enumerate(model.properties):
        if spec.kind == "binary":
            target[j] = 1.0
            continue
        col = labels[:, j]
        top = col[:k]  # buffer order is by ranking score
        anchor = float(top.mean())
        if cfg.delta_y is not None:
            delta = float(np.broadcast_to(cfg.delta_y, (len(model.properties),))[j])
        else:
            delta = cfg.delta_frac * float(col.max() - col.min())
        target[j] = anchor + delta
    return target


def propose(model: LPT, state: RunState, cfg: DsoConfig, lcfg: LangevinConfig, rng,
            label_fn=None, from_prior=False):
    """m proposals with predictor-estimated labels (not oracle labels)."""
    m = cfg.m_proposals
    bank = ChainBank.gaussian(m, model.latent_dim, rng, persistent=True)
    if from_prior or cfg.proposal == "prior" or len(state.buffer) == 0:
        z0 = bank.states
        z = model.prior_forward(z0)
    else:
        target = conditioning_target(model, state.buffer, cfg, label_fn)
        ccfg = LangevinConfig(lcfg.step_size, cfg.proposal_steps, cfg.guidance_weight,
                              lcfg.noise_scale, lcfg.clip_norm)
        z0, z = sample_conditional(model, target, bank, ccfg, rng)
    prefix = encode(cfg.prefix, model.vocab) if cfg.prefix else ()
    seqs = model.generate(z, rng, prefix=prefix, temperature=cfg.temperature)
    yhat = model.decode_labels(model.predict(z))
    return [LabeledSample(x, yhat[i], z0[i], y_is_oracle=False) for i, x in enumerate(seqs)]


def relabel(proposals, oracle, state: RunState, budget):
    """Score proposals with the oracle, spending at most the remaining budget.

    Sequences already in the oracle's memo are free. When the budget cannot
    cover every new sequence, the earliest ones are kept and
    ``state.budget_exhausted`` is set. Returns the labeled subset.
    """
    remaining = budget - state.queries_used
    keep, new = [], set()
    for p in proposals:
        if not oracle.is_cached(p.x) and p.x not in new:
            if len(new) >= remaining:
                state.budget_exhausted = True
                continue
            new.add(p.x)
        keep.append(p)
    before = oracle.query_count
    seqs = [p.x for p in keep]
    first_seen = list(dict.fromkeys(s for s in seqs if s in new))
    y = oracle(seqs)
    used = oracle.query_count - before
    state.queries_used += used
    if first_seen:
        trace = oracle(first_seen)
        state.query_trace.extend(float(v) for v in trace[:, 0])
    return [LabeledSample(p.x, y[i], p.z0, y_is_oracle=True) for i, p in enumerate(keep)]


def _remap_bank(bank: ChainBank, old_entries, new_entries, rng, init="gaussian"):
    old = {s.x: i for i, s in enumerate(old_entries)}
    states = np.empty((len(new_entries), bank.dim))
    ages = np.zeros(len(new_entries), dtype=np.int64)
    fresh = []
    for i, s in enumerate(new_entries):
        j = old.get(s.x)
        if j is not None:
            states[i], ages[i] = bank.states[j], bank.ages[j]
        elif init == "proposal" and s.z0 is not None:
            states[i] = s.z0
        else:
            fresh.append(i)
    if fresh:
        states[fresh] = rng.standard_normal((len(fresh), bank.dim))
    return ChainBank(states, ages, bank.persistent)


def select(state: RunState, labeled, cfg: DsoConfig, rng, rank=None):
    """Merge oracle-labeled proposals into the buffer and realign the chains."""
    if any(not p.y_is_oracle for p in labeled):
        raise UnlabeledProposal("select needs oracle-labeled proposals")
    rank = rank or rank_fn_for(cfg)
    old_entries = state.buffer.entries
    new_buf = buffer_merge(state.buffer, labeled, rank)
    state.bank = _remap_bank(state.bank, old_entries, new_buf.entries, rng, cfg.chain_init)
    state.buffer = new_buf
    state.threshold_history.append(new_buf.threshold)
    if new_buf.entries:
        top = new_buf.entries[0]
        score = rank(top)
        if score > state.best_score:
            state.best_score, state.best_ever = score, top
    return state


def train_weights(buffer: ShiftingDataset, cfg: DsoConfig, rank):
    n = len(buffer)
    if cfg.top_n is None or cfg.top_n >= n:
        return np.full(n, 1.0 / n)
    return weighted_objective([rank(s) for s in buffer.entries], cfg.top_n)


def improve(model: LPT, state: RunState, cfg: DsoConfig, lcfg: LangevinConfig,
            tcfg: TrainConfig, rng, rank=None, label_fn=None, metrics=None, counter=None):
    """Weighted maximum-likelihood update on the buffer with the chain bank.

    An epoch is sized by the whole buffer whatever the weights, so top-N and
    uniform weighting take the same number of optimizer steps.
    """
    rank = rank or rank_fn_for(cfg)
    weights = train_weights(state.buffer, cfg, rank)
    steps = cfg.online_steps if cfg.persistent_chains else cfg.fresh_steps
    pcfg = LangevinConfig(lcfg.step_size, steps, 1.0, lcfg.noise_scale, lcfg.clip_norm)
    state.bank.persistent = cfg.persistent_chains
    opt, _, n = fit(model, state.buffer.entries, tcfg, pcfg, rng, bank=state.bank,
                    weights=weights, opt=state.optimizer, metrics=metrics, counter=counter,
                    step0=state.train_steps, label_fn=label_fn,
                    steps_per_epoch=-(-len(state.buffer) // tcfg.batch_size))
    state.optimizer = opt
    state.train_steps += n
    return state


def initial_state(model, initial_data, oracle, cfg: DsoConfig, lcfg, rng, rank, label_fn):
    state = RunState(0, ShiftingDataset(cfg.capacity), ChainBank(
        np.zeros((0, model.latent_dim)), np.zeros(0, dtype=np.int64), cfg.persistent_chains))
    if cfg.from_scratch:
        # no anchors exist yet: the seed batch comes from the prior
        props = propose(model, state, cfg, lcfg, rng, label_fn, from_prior=True)
        labeled = relabel(props, oracle, state, cfg.budget)
        ys = np.array([np.atleast_1d(s.y) for s in labeled])
        model.fit_label_scaling(label_fn(ys) if label_fn else ys)
    else:
        if not initial_data:
            raise ValueError("initial data is empty and from_scratch is off")
        labeled = list(initial_data)
        if any(not s.y_is_oracle for s in labeled):
            raise UnlabeledProposal("initial data must carry oracle labels")
    state.buffer = buffer_merge(state.buffer, labeled, rank)
    state.bank = _remap_bank(state.bank, [], state.buffer.entries, rng, cfg.chain_init)
    state.threshold_history.append(state.buffer.threshold)
    top = state.buffer.entries[0]
    state.best_ever, state.best_score = top, rank(top)
    return state


def _progress(state, cfg):
    # an unbounded buffer never evicts, so its threshold never moves
    return state.buffer.threshold if cfg.capacity is not None else state.best_score


def _top_mean(values, k):
    if not len(values):
        return None
    v = np.sort(np.asarray(values))[::-1][:k]
    return float(v.mean())


def run(model: LPT, initial_data, oracle, cfg: DsoConfig, lcfg: LangevinConfig,
        tcfg: TrainConfig, rng, *, metrics=None, on_iteration=None, timing=True):
    """Propose, relabel, select and improve until an exit condition holds.

    Exit conditions: ``max_iters`` reached, budget exhausted, or the
    threshold failing to rise for ``patience`` consecutive iterations.
    ``on_iteration(state, model)`` runs after every iteration, e.g. to
    checkpoint. Returns (model, state, report dict).
    """
    if tcfg.mode != "online":
        tcfg = dataclasses.replace(tcfg, mode="online")
    rank = rank_fn_for(cfg)
    label_fn = label_fn_for(oracle.n_objectives, cfg.constraints)
    self_labeling = bool(getattr(oracle, "self_labeling", False))
    if self_labeling:
        log.warning("oracle is the model's own predictor: scores are not ground truth")
    metrics = metrics or MetricsLog()
    counter = GradCounter()
    state = initial_state(model, initial_data, oracle, cfg, lcfg, rng, rank, label_fn)
    stall, stop = 0, "max_iters"
    last_props = []
    for t in range(1, cfg.max_iters + 1):
        if state.queries_used >= cfg.budget:
            stop = "budget"
            break
        t0 = time.perf_counter()
        state.t = t
        props = propose(model, state, cfg, lcfg, rng, label_fn)
        labeled = relabel(props, oracle, state, cfg.budget)
        prev = _progress(state, cfg)
        select(state, labeled, cfg, rng, rank)
        if len(state.threshold_history) > 1 and state.threshold_history[-1] < state.threshold_history[-2]:
            raise AssertionError("selection threshold decreased")
        counter.reset()
        improve(model, state, cfg, lcfg, tcfg, rng, rank, label_fn, metrics, counter)
        uniq = {}
        for s in labeled:
            uniq.setdefault(s.x, rank(s))
        last_props = list(uniq.values()) if len(uniq) else last_props
        scores = [rank(s) for s in state.buffer.entries]
        rec = {
            "t": t,
            "c_t": _finite(state.buffer.threshold),
            "best": _finite(state.best_score),
            "mean_top_k": _top_mean(scores, cfg.anchor_k),
            "queries_used": state.queries_used,
            "n_proposals": len(props),
            "n_unique_proposals": len(uniq),
            "proposal_top100_mean": _top_mean(list(uniq.values()), 100),
            "posterior_grad_evals": counter.count,
        }
        if timing:
            rec["wall_ms"] = round(1000.0 * (time.perf_counter() - t0), 3)
        state.records.append(rec)
        log.info("iter %d c_t=%s best=%.4f queries=%d", t, rec["c_t"], state.best_score,
                 state.queries_used)
        if on_iteration is not None:
            on_iteration(state, model)
        stall = stall + 1 if not _progress(state, cfg) > prev else 0
        if state.budget_exhausted or state.queries_used >= cfg.budget:
            stop = "budget"
            break
        if stall >= cfg.patience:
            stop = "stalled"
            break
    report = build_report(model, state, cfg, stop, last_props, self_labeling, rank)
    return model, state, report


def build_report(model, state: RunState, cfg: DsoConfig, stop, last_props, self_labeling, rank):
    vocab = model.vocab
    top = state.buffer.entries[:128]
    return {
        "stop_reason": stop,
        "iterations": state.t,
        "queries_used": state.queries_used,
        "self_labeling": self_labeling,
        "best_ever": {"sequence": decode(state.best_ever.x, vocab),
                      "y": [float(v) for v in np.atleast_1d(state.best_ever.y)],
                      "score": _finite(state.best_score)},
        "threshold_history": [_finite(c) for c in state.threshold_history],
        "records": state.records,
        "final_proposal_top100_mean": _top_mean(last_props, 100),
        "top_k": [{"sequence": decode(s.x, vocab), "y": [float(v) for v in np.atleast_1d(s.y)],
                   "score": float(rank(s))} for s in top],
        "query_trace": state.query_trace,
    }


class SelfLabelingOracle:
    """Scores sequences with the model's own predictor at posterior latents.

    Only useful for debugging the loop; runs using it are flagged.
    """

    self_labeling = True

    def __init__(self, model: LPT, lcfg: LangevinConfig, seed=0):
        self.model = model
        self.vocab = model.vocab
        self.n_objectives = len(model.properties)
        self.lcfg = lcfg
        self.rng = np.random.default_rng(seed)
        self.memo = {}
        self.query_count = 0

    def is_cached(self, seq):
        return tuple(seq) in self.memo

    def __call__(self, seqs):
        seqs = [tuple(int(t) for t in s) for s in seqs]
        missing = list(dict.fromkeys(s for s in seqs if s not in self.memo))
        if missing:
            bank = ChainBank.gaussian(len(missing), self.model.latent_dim, self.rng)
            sample_posterior(self.model, missing, None, bank, self.lcfg, self.rng)
            yhat = self.model.decode_labels(self.model.predict(self.model.prior_forward(bank.states)))
            for s, v in zip(missing, yhat):
                self.memo[s] = v
            self.query_count += len(missing)
        return np.stack([self.memo[s] for s in seqs]) if seqs else np.zeros((0, self.n_objectives))

    def score_range(self):
        return None
