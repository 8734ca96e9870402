"""Langevin dynamics over the latent noise z0.

Two targets are used: the posterior p(z0 | x, y) during learning and the
property-conditioned posterior p(z0 | y) for proposals. Chains live in a
:class:`ChainBank`; a persistent bank warm-starts every call from the
states left by the previous one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    def __init__(self, z0, chains=None):
        self.z0 = np.asarray(z0)
        self.chains = chains
        super().__init__(f"non-finite Langevin gradient in chains {chains}")


@dataclass
class LangevinConfig:
    step_size: float = 0.1
    n_steps: int = 15
    guidance_weight: float = 1.0
    noise_scale: float = 1.0
    clip_norm: float = 100.0

    def __post_init__(self):
        if not self.step_size >= 0:
            raise ValueError("step_size must be non-negative")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.guidance_weight > 0:
            raise ValueError("guidance_weight must be positive")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")


class GradCounter:
    """Counts per-chain gradient evaluations."""

    def __init__(self):
        self.count = 0

    def add(self, n):
        self.count += int(n)

    def reset(self):
        self.count = 0


@dataclass
class ChainBank:
    states: np.ndarray
    ages: np.ndarray
    persistent: bool = True

    @classmethod
    def gaussian(cls, n_chains, dim, rng, persistent=True):
        return cls(rng.standard_normal((n_chains, dim)), np.zeros(n_chains, dtype=np.int64),
                   persistent)

    def __len__(self):
        return len(self.states)

    @property
    def dim(self):
        return self.states.shape[1]

    def starts(self, idx, rng):
        """Initial states for chains ``idx``: warm if persistent, else fresh draws."""
        if self.persistent:
            return self.states[idx].copy()
        return rng.standard_normal((len(idx), self.dim))

    def commit(self, idx, states, steps):
        if not np.all(np.isfinite(states)):
            raise NonFiniteGradient(states)
        self.states[idx] = states
        self.ages[idx] += steps

    def reinit(self, idx, rng):
        idx = np.asarray(idx, dtype=np.int64)
        self.states[idx] = rng.standard_normal((len(idx), self.dim))
        self.ages[idx] = 0


def clip_rows(grad, max_norm):
    norms = np.linalg.norm(grad, axis=1, keepdims=True)
    factor = np.minimum(1.0, max_norm / np.maximum(norms, 1e-300))
    return grad * factor


def langevin_step(grad_fn, z0, cfg: LangevinConfig, rng, counter=None):
    """One update z0 + s * grad + sqrt(2 s) * noise_scale * eps on a (B, d) batch."""
    z0 = np.asarray(z0, dtype=np.float64)
    _, grad = grad_fn(z0)
    if counter is not None:
        counter.add(len(z0))
    bad = ~np.all(np.isfinite(grad), axis=1)
    if bad.any():
        raise NonFiniteGradient(z0, np.flatnonzero(bad).tolist())
    if cfg.clip_norm:
        grad = clip_rows(grad, cfg.clip_norm)
    s = cfg.step_size
    out = z0 + s * grad
    if cfg.noise_scale and s:
        out = out + math.sqrt(2.0 * s) * cfg.noise_scale * rng.standard_normal(z0.shape)
    return out


def run_chains(grad_fn, z0, cfg: LangevinConfig, rng, counter=None, n_steps=None):
    z = np.asarray(z0, dtype=np.float64)
    for _ in range(cfg.n_steps if n_steps is None else n_steps):
        z = langevin_step(grad_fn, z, cfg, rng, counter)
    return z


def sample_posterior(model, seqs, y, bank: ChainBank, cfg: LangevinConfig, rng,
                     idx=None, counter=None):
    """Advance chains ``idx`` (one per sample) towards p(z0 | x, y).

    ``y`` is in model units or ``None`` for sequence-only targets. The
    guidance weight is not applied here: learning uses the plain posterior.
    """
    idx = np.arange(len(bank)) if idx is None else np.asarray(idx, dtype=np.int64)
    seqs = None if seqs is None else list(seqs)

    def grad_fn(z):
        return model.joint_logpost_grad(z, seqs, y)

    z = run_chains(grad_fn, bank.starts(idx, rng), cfg, rng, counter)
    bank.commit(idx, z, cfg.n_steps)
    return bank


def conditional_targets(model, y_target, n):
    """Broadcast per-objective targets (oracle units) to model units; binary targets stay 0/1."""
    y = np.broadcast_to(np.asarray(y_target, dtype=np.float64), (len(model.properties),))
    return np.tile(model.encode_labels(y), (n, 1))


def guidance_multipliers(model, lam):
    """Per-head multipliers on log p(y | z) for exploitation weight ``lam``.

    A regression head becomes N(y; s(z), 1/lam): its log-likelihood, which
    carries precision 1/sigma2, is rescaled by lam * sigma2. A binary head
    is raised to the power lam. With sigma2 = 1 both reduce to p(y|z)^lam.
    """
    return np.array([lam * p.sigma2 if p.kind == "regression" else lam
                     for p in model.properties])


def sample_conditional(model, y_target, bank: ChainBank, cfg: LangevinConfig, rng,
                       idx=None, counter=None):
    """Draw z0 from p0(z0) times the guided predictor term; returns (z0, z).

    The exploitation weight ``cfg.guidance_weight`` is the precision of the
    regression targets (see :func:`guidance_multipliers`). ``y_target`` is
    given in oracle units, one entry per objective.
    """
    idx = np.arange(len(bank)) if idx is None else np.asarray(idx, dtype=np.int64)
    y = conditional_targets(model, y_target, len(idx))
    lam = guidance_multipliers(model, cfg.guidance_weight)

    def grad_fn(z):
        return model.joint_logpost_grad(z, None, y, guidance=lam)

    z0 = run_chains(grad_fn, bank.starts(idx, rng), cfg, rng, counter)
    bank.commit(idx, z0, cfg.n_steps)
    return z0, model.prior_forward(z0)
