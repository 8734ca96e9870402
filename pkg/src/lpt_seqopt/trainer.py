"""Approximate maximum-likelihood learning.

Each step draws z0 for every sample by short-run Langevin dynamics on
p(z0 | x, y), then ascends the plug-in log-likelihood at those latents.
The prior transform receives gradients from both the sequence and the
property terms, the decoder only from the sequence term and the predictor
only from the property term; that split falls out of the tape because each
group's parameters only appear in the terms that use them.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .model.lpt import GROUPS, LPT, is_decayed
from .sampler import ChainBank, LangevinConfig, NonFiniteGradient, sample_posterior
from .seqcore import primary_rank

log = logging.getLogger(__name__)

MODES = ("pretrain", "finetune", "online")


class EmptyBatch(ValueError):
    pass


class NTooLarge(ValueError):
    pass


@dataclass
class TrainConfig:
    lr_max: float = 7.5e-4
    lr_min: float = 7.5e-5
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 1
    mode: str = "finetune"
    top_n: int | None = None
    posterior_samples: int = 1
    persistent_chains: bool = False

    def __post_init__(self):
        if not self.lr_max >= self.lr_min > 0:
            raise ValueError("need lr_max >= lr_min > 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.batch_size < 1 or self.epochs < 0 or self.posterior_samples < 1:
            raise ValueError("batch_size, posterior_samples >= 1 and epochs >= 0 required")
        if self.top_n is not None and self.top_n < 1:
            raise ValueError("top_n must be positive")

    @property
    def groups(self):
        # sequence-only pretraining leaves the predictor untouched
        return ("prior", "decoder") if self.mode == "pretrain" else GROUPS


def cosine_lr(step, total, lr_max, lr_min):
    if total <= 1:
        return lr_max
    frac = min(step, total - 1) / (total - 1)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay, as a descent on the negative log-likelihood."""

    def __init__(self, weight_decay=0.1, beta1=0.9, beta2=0.999, eps=1e-8):
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params, grads, lr):
        """Ascend ``grads`` (gradients of the log-likelihood) in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(grads):
            g = -grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p = params[name]
            if self.weight_decay and is_decayed(name):
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        out = {}
        for name in self.m:
            out["opt.m." + name] = self.m[name]
            out["opt.v." + name] = self.v[name]
        return out

    def load_arrays(self, arrays, t):
        self.t = int(t)
        for key, arr in arrays.items():
            if key.startswith("opt.m."):
                self.m[key[6:]] = np.array(arr, dtype=np.float64)
            elif key.startswith("opt.v."):
                self.v[key[6:]] = np.array(arr, dtype=np.float64)


@dataclass
class GradEstimate:
    grads: dict
    count: int
    loglik_x: float
    loglik_y: float

    @property
    def norm(self):
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values()))


def weighted_objective(scores, n):
    """Weights 1/N on the top-N scores and zero elsewhere.

    ``scores`` must already be in buffer order (descending, ties resolved),
    so the first N entries are the top-N.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if n > len(scores):
        raise NTooLarge(f"N={n} exceeds buffer size {len(scores)}")
    if n < 1:
        raise NTooLarge("N must be positive")
    order = np.argsort(-scores, kind="stable")
    w = np.zeros(len(scores))
    w[order[:n]] = 1.0 / n
    return w


def _batch_arrays(model: LPT, batch, mode, label_fn=None):
    if not batch:
        raise EmptyBatch("empty batch")
    seqs = [s.x for s in batch]
    if mode == "pretrain":
        return seqs, None
    y = np.array([np.atleast_1d(s.y) for s in batch], dtype=np.float64)
    if label_fn is not None:
        y = label_fn(y)
    return seqs, model.encode_labels(y)


def estimate_gradient(model: LPT, batch, bank: ChainBank, idx, lcfg: LangevinConfig,
                      tcfg: TrainConfig, rng, weights=None, counter=None,
                      label_fn=None) -> GradEstimate:
    """Monte-Carlo gradient of sum_i w_i log p(x_i, y_i) for one batch.

    Chains ``idx`` of ``bank`` hold one latent per sample. Weights default to
    uniform and are normalised to sum to one. ``label_fn`` maps raw oracle
    rows to the model's head labels.
    """
    seqs, y = _batch_arrays(model, batch, tcfg.mode, label_fn)
    B = len(batch)
    idx = np.asarray(idx, dtype=np.int64)
    w = np.full(B, 1.0 / B) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    K = tcfg.posterior_samples
    total, lx, ly = None, 0.0, 0.0
    for _ in range(K):
        sample_posterior(model, seqs, y, bank, lcfg, rng, idx, counter)
        grads, xterm, yterm = model.param_grads(bank.states[idx], seqs, y, w / K, tcfg.groups)
        if total is None:
            total = grads
        else:
            for k in total:
                total[k] += grads[k]
        lx += float(np.mean(xterm)) / K
        ly += float(np.mean(yterm)) / K
    for k, g in total.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(bank.states[idx])
    return GradEstimate(total, B, lx, ly)


def mle_step(model: LPT, batch, bank, idx, lcfg, tcfg, opt: AdamW, lr, rng,
             weights=None, counter=None, label_fn=None):
    """One learning step; updates ``model`` in place and returns metrics."""
    est = estimate_gradient(model, batch, bank, idx, lcfg, tcfg, rng, weights, counter, label_fn)
    opt.step(model.params, est.grads, lr)
    return {"loglik_x": est.loglik_x, "loglik_y": est.loglik_y, "grad_norm": est.norm}


def pretrain_step(model: LPT, batch, bank, idx, lcfg, tcfg, opt, lr, rng, counter=None):
    if tcfg.mode != "pretrain":
        raise ValueError("pretrain_step needs a TrainConfig with mode='pretrain'")
    return mle_step(model, batch, bank, idx, lcfg, tcfg, opt, lr, rng, None, counter)


class MetricsLog:
    """Append-only JSONL stream of per-step metrics."""

    def __init__(self, path=None):
        self.path = path
        self.rows = []

    def write(self, row):
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def fit(model: LPT, samples, tcfg: TrainConfig, lcfg: LangevinConfig, rng, *,
        bank: ChainBank | None = None, weights=None, opt: AdamW | None = None,
        metrics: MetricsLog | None = None, counter=None, step0=0, label_fn=None,
        steps_per_epoch=None):
    """Run ``tcfg.epochs`` passes of mini-batch learning over ``samples``.

    ``bank`` holds one chain per sample; without one a bank is created,
    persistent if ``tcfg.persistent_chains`` and otherwise re-drawn at
    every step. ``weights`` (one per
    sample) restrict and weight the objective; samples with zero weight are
    skipped. ``steps_per_epoch`` fixes the number of batches per epoch,
    cycling through the active samples as often as needed; by default an
    epoch is one pass over them. The learning-rate schedule restarts on
    every call.
    Returns (optimizer, metrics log, number of steps taken).
    """
    samples = list(samples)
    if not samples:
        raise EmptyBatch("no training samples")
    if weights is None:
        weights = np.full(len(samples), 1.0 / len(samples))
    weights = np.asarray(weights, dtype=np.float64)
    active = np.flatnonzero(weights > 0)
    if bank is None:
        bank = ChainBank.gaussian(len(samples), model.latent_dim, rng,
                                  persistent=tcfg.persistent_chains)
    opt = opt or AdamW(tcfg.weight_decay, tcfg.beta1, tcfg.beta2, tcfg.eps)
    metrics = metrics or MetricsLog()
    bs = tcfg.batch_size
    per_epoch = steps_per_epoch or -(-len(active) // bs)
    total = per_epoch * tcfg.epochs
    step = 0
    for _ in range(tcfg.epochs):
        for idx in _epoch_batches(active, bs, per_epoch, rng):
            lr = cosine_lr(step, total, tcfg.lr_max, tcfg.lr_min)
            batch = [samples[i] for i in idx]
            row = mle_step(model, batch, bank, idx, lcfg, tcfg, opt, lr, rng,
                           weights[idx], counter, label_fn)
            row.update(step=step0 + step, mode=tcfg.mode, lr=lr)
            metrics.write(row)
            step += 1
    return opt, metrics, step


def _epoch_batches(active, bs, n_batches, rng):
    """``n_batches`` sorted index batches drawn from successive shuffles of ``active``."""
    order = active[rng.permutation(len(active))]
    start = 0
    for _ in range(n_batches):
        if start >= len(order):
            order, start = active[rng.permutation(len(active))], 0
        yield np.sort(order[start:start + bs])
        start += bs


def top_n_weights(buffer_entries, n):
    return weighted_objective([primary_rank(s) for s in buffer_entries], n)


def mean_loglik(model: LPT, samples, lcfg: LangevinConfig, rng, n_steps=None):
    """Per-token sequence log-likelihood at posterior latents, for monitoring."""
    seqs = [s.x for s in samples]
    bank = ChainBank.gaussian(len(seqs), model.latent_dim, rng, persistent=True)
    cfg = LangevinConfig(lcfg.step_size, n_steps or lcfg.n_steps, 1.0, lcfg.noise_scale,
                         lcfg.clip_norm)
    sample_posterior(model, seqs, None, bank, cfg, rng)
    total, _ = model.decoder_logprob(seqs, model.prior_forward(bank.states))
    return float(total.sum() / sum(len(s) for s in seqs))


__all__ = [
    "AdamW", "EmptyBatch", "GradEstimate", "MetricsLog", "NTooLarge",
    "TrainConfig", "cosine_lr", "estimate_gradient", "fit", "mean_loglik", "mle_step",
    "pretrain_step", "top_n_weights", "weighted_objective",
]
