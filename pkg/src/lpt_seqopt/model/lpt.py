"""The latent prompt transformer: prior transform, decoder and predictor heads.

All computation runs in float64 on the autodiff tape in
:mod:`lpt_seqopt.autodiff`. Parameters live in a flat ``dict`` keyed by
dotted names whose first component is the group (``prior``, ``decoder``,
``predictor``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..seqcore import TokenSeq, Vocabulary, batch_tokens

log = logging.getLogger(__name__)

GROUPS = ("prior", "decoder", "predictor")
_LOG2PI = math.log(2.0 * math.pi)


class ModelError(ValueError):
    pass


class DimensionMismatch(ModelError):
    pass


class PrefixTooLong(ModelError):
    pass


class InvalidLabel(ModelError):
    pass


@dataclass
class PropertySpec:
    name: str = "y"
    kind: str = "regression"
    sigma2: float = 1.0

    def __post_init__(self):
        if self.kind not in ("regression", "binary"):
            raise ValueError(f"unknown property kind {self.kind!r}")
        if self.kind == "regression" and not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")


@dataclass
class ModelConfig:
    k_tokens: int = 2
    k_dim: int = 16
    embed: int = 32
    heads: int = 2
    layers: int = 2
    ffn_mult: int = 2
    prior: str = "unet"
    prior_hidden: int = 32
    predictor_hidden: int = 32
    predictor_layers: int = 3
    properties: list = field(default_factory=lambda: [PropertySpec()])

    def __post_init__(self):
        self.properties = [p if isinstance(p, PropertySpec) else PropertySpec(**p)
                           for p in self.properties]
        if self.prior not in ("unet", "identity"):
            raise ValueError(f"unknown prior {self.prior!r}")
        if self.embed % self.heads:
            raise ValueError("embed must be divisible by heads")
        if self.predictor_layers < 1:
            raise ValueError("predictor_layers must be >= 1")

    @property
    def latent_dim(self):
        return self.k_tokens * self.k_dim


def full_scale_preset(**overrides):
    """Model sizes reported for the molecule experiments (4.3M parameters)."""
    cfg = dict(k_tokens=4, k_dim=256, embed=256, heads=4, layers=3, ffn_mult=4,
               prior_hidden=256, predictor_hidden=256, predictor_layers=3)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def _init_params(vocab: Vocabulary, cfg: ModelConfig, rng) -> dict:
    E, Dk, T = cfg.embed, cfg.k_dim, vocab.max_len
    p = {}

    def dense(name, fan_in, fan_out, zero=False):
        p[name + ".w"] = (np.zeros((fan_in, fan_out)) if zero
                          else rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)))
        p[name + ".b"] = np.zeros(fan_out)

    def norm(name, width):
        p[name + ".g"] = np.ones(width)
        p[name + ".b"] = np.zeros(width)

    if cfg.prior == "unet":
        C = cfg.prior_hidden
        dense("prior.enc", 3 * Dk, C)
        dense("prior.mid", 3 * C, C)
        # zero output conv: the transform starts as the identity map
        dense("prior.dec", 6 * C, Dk, zero=True)

    p["decoder.tok"] = rng.normal(0.0, 1.0, (vocab.n_inputs, E))
    p["decoder.pos"] = rng.normal(0.0, 1.0, (T, E))
    for i in range(cfg.layers):
        b = f"decoder.blk{i}"
        norm(b + ".ln1", E)
        dense(b + ".attn.qkv", E, 3 * E)
        dense(b + ".attn.out", E, E)
        norm(b + ".ln2", E)
        dense(b + ".xattn.q", E, E)
        dense(b + ".xattn.kv", Dk, 2 * E)
        dense(b + ".xattn.out", E, E)
        norm(b + ".ln3", E)
        dense(b + ".ffn.up", E, cfg.ffn_mult * E)
        dense(b + ".ffn.down", cfg.ffn_mult * E, E)
    norm("decoder.lnf", E)
    dense("decoder.out", E, vocab.n_classes)

    d, H = cfg.latent_dim, cfg.predictor_hidden
    for j in range(len(cfg.properties)):
        widths = [d] + [H] * (cfg.predictor_layers - 1) + [1]
        for l in range(cfg.predictor_layers):
            dense(f"predictor.h{j}.l{l}", widths[l], widths[l + 1])
    return p


def group_of(name):
    return name.split(".", 1)[0]


def is_decayed(name):
    """Decoupled weight decay applies to matrices only, never biases or norms."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("w", "tok", "pos")


class LPT:
    """Joint model p(z0) p(x | z = U(z0)) p(y | z = U(z0))."""

    def __init__(self, vocab: Vocabulary, cfg: ModelConfig | None = None, seed=0, params=None):
        self.vocab = vocab
        self.cfg = cfg or ModelConfig()
        self.params = params if params is not None else _init_params(
            vocab, self.cfg, np.random.default_rng(seed))
        for name, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise ModelError(f"non-finite parameter {name}")
        log.debug("LPT with %d parameters", self.n_params)
        eos_mask = np.zeros(vocab.n_classes)
        if vocab.eos:
            eos_mask[vocab.eos_id] = -1e9
        self._first_step_bias = eos_mask
        # affine map from oracle units to the units the regression heads see
        n = len(self.cfg.properties)
        self.label_center = np.zeros(n)
        self.label_scale = np.ones(n)

    @property
    def n_params(self):
        return int(sum(v.size for v in self.params.values()))

    @property
    def latent_dim(self):
        return self.cfg.latent_dim

    @property
    def properties(self):
        return self.cfg.properties

    def copy(self):
        other = LPT(self.vocab, self.cfg, params={k: v.copy() for k, v in self.params.items()})
        other.label_center = self.label_center.copy()
        other.label_scale = self.label_scale.copy()
        return other

    def fit_label_scaling(self, y):
        """Center and scale regression labels by the statistics of ``y`` (N, P)."""
        y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
        for j, spec in enumerate(self.properties):
            if spec.kind != "regression":
                continue
            sd = y[:, j].std()
            self.label_center[j] = y[:, j].mean()
            self.label_scale[j] = sd if sd > 0 else 1.0

    def encode_labels(self, y):
        y = np.asarray(y, dtype=np.float64)
        return (y - self.label_center) / self.label_scale

    def decode_labels(self, y):
        y = np.asarray(y, dtype=np.float64)
        return y * self.label_scale + self.label_center

    def group_params(self, group):
        return {k: v for k, v in self.params.items() if group_of(k) == group}

    # -- tape construction ---------------------------------------------------------

    def tape_params(self, groups=()):
        """Wrap parameters as tape variables; ``groups`` receive gradients."""
        groups = set(groups)
        return {k: (ad.param(v) if group_of(k) in groups else ad.Var(v))
                for k, v in self.params.items()}

    def _check_z0(self, z0):
        z0 = np.asarray(z0, dtype=np.float64)
        if z0.ndim == 1:
            z0 = z0[None]
        if z0.ndim != 2 or z0.shape[1] != self.latent_dim:
            raise DimensionMismatch(f"z0 must have {self.latent_dim} columns, got {z0.shape}")
        return z0

    def _check_z(self, z):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 2:
            z = z[None]
        if z.shape[1:] != (self.cfg.k_tokens, self.cfg.k_dim):
            raise DimensionMismatch(
                f"prompt must be ({self.cfg.k_tokens}, {self.cfg.k_dim}), got {z.shape[1:]}")
        return z

    def prior_tape(self, P, z0v):
        B = z0v.shape[0]
        z = ad.reshape(z0v, (B, self.cfg.k_tokens, self.cfg.k_dim))
        if self.cfg.prior == "identity":
            return z
        h1 = ad.silu(ad.linear(ad.unfold3(z), P["prior.enc.w"], P["prior.enc.b"]))
        h2 = ad.silu(ad.linear(ad.unfold3(h1), P["prior.mid.w"], P["prior.mid.b"]))
        skip = ad.concat([h1, h2], axis=-1)
        return z + ad.linear(ad.unfold3(skip), P["prior.dec.w"], P["prior.dec.b"])

    def _heads(self, x, B, T):
        H = self.cfg.heads
        return ad.transpose(ad.reshape(x, (B, T, H, self.cfg.embed // H)), (0, 2, 1, 3))

    def _merge_heads(self, x, B, T):
        return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (B, T, self.cfg.embed))

    def decoder_logits_tape(self, P, inputs, z):
        """Logits (B, T, n_classes) for teacher-forced ``inputs`` (B, T)."""
        B, T = inputs.shape
        E, H, K = self.cfg.embed, self.cfg.heads, self.cfg.k_tokens
        Dh = E // H
        h = ad.embedding(P["decoder.tok"], inputs) + ad.take(P["decoder.pos"], np.arange(T), 0)
        for i in range(self.cfg.layers):
            b = f"decoder.blk{i}"
            a = ad.layer_norm(h, P[b + ".ln1.g"], P[b + ".ln1.b"])
            qkv = ad.linear(a, P[b + ".attn.qkv.w"], P[b + ".attn.qkv.b"])
            qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, H, Dh)), (2, 0, 3, 1, 4))
            att = ad.attention(ad.take(qkv, 0, 0), ad.take(qkv, 1, 0), ad.take(qkv, 2, 0), True)
            h = h + ad.linear(self._merge_heads(att, B, T), P[b + ".attn.out.w"], P[b + ".attn.out.b"])

            a = ad.layer_norm(h, P[b + ".ln2.g"], P[b + ".ln2.b"])
            q = self._heads(ad.linear(a, P[b + ".xattn.q.w"], P[b + ".xattn.q.b"]), B, T)
            kv = ad.linear(z, P[b + ".xattn.kv.w"], P[b + ".xattn.kv.b"])
            kv = ad.transpose(ad.reshape(kv, (B, K, 2, H, Dh)), (2, 0, 3, 1, 4))
            att = ad.attention(q, ad.take(kv, 0, 0), ad.take(kv, 1, 0), False)
            h = h + ad.linear(self._merge_heads(att, B, T), P[b + ".xattn.out.w"], P[b + ".xattn.out.b"])

            a = ad.layer_norm(h, P[b + ".ln3.g"], P[b + ".ln3.b"])
            up = ad.silu(ad.linear(a, P[b + ".ffn.up.w"], P[b + ".ffn.up.b"]))
            h = h + ad.linear(up, P[b + ".ffn.down.w"], P[b + ".ffn.down.b"])
        h = ad.layer_norm(h, P["decoder.lnf.g"], P["decoder.lnf.b"])
        logits = ad.linear(h, P["decoder.out.w"], P["decoder.out.b"])
        if self.vocab.eos:
            bias = np.zeros((T, self.vocab.n_classes))
            bias[0] = self._first_step_bias
            logits = logits + bias
        return logits

    def decoder_tape(self, P, seqs, z):
        """Per-token log-likelihood (B, T), masked, for a batch of sequences."""
        inputs, targets, mask = batch_tokens(seqs, self.vocab)
        B, T = inputs.shape
        logits = self.decoder_logits_tape(P, inputs, z)
        flat = ad.reshape(logits, (B * T, self.vocab.n_classes))
        per_tok = ad.reshape(ad.token_logprob(flat, targets.reshape(-1)), (B, T))
        return per_tok * mask, mask

    def predictor_tape(self, P, j, z):
        B = z.shape[0]
        h = ad.reshape(z, (B, self.latent_dim))
        nl = self.cfg.predictor_layers
        for l in range(nl):
            h = ad.linear(h, P[f"predictor.h{j}.l{l}.w"], P[f"predictor.h{j}.l{l}.b"])
            if l < nl - 1:
                h = ad.silu(h)
        return ad.reshape(h, (B,))

    def property_logprob_tape(self, P, j, y, z):
        """log p(y_j | z) per sample; ``y`` is a (B,) array."""
        spec = self.properties[j]
        out = self.predictor_tape(P, j, z)
        y = np.asarray(y, dtype=np.float64)
        if spec.kind == "regression":
            if not np.all(np.isfinite(y)):
                raise InvalidLabel("regression labels must be finite")
            resid = out - y
            return ad.square(resid) * (-0.5 / spec.sigma2) + (-0.5 * math.log(2 * math.pi * spec.sigma2))
        if not np.all((y == 0.0) | (y == 1.0)):
            raise InvalidLabel("binary labels must be 0 or 1")
        return ad.log_sigmoid(out) * y + ad.log_sigmoid(-out) * (1.0 - y)

    def _log_terms(self, P, z0v, seqs, y, guidance):
        """Per-sample (prior, x, y) log terms as tape variables (x/y may be None)."""
        d = self.latent_dim
        prior = ad.sum(ad.square(z0v), axis=1) * -0.5 + (-0.5 * d * _LOG2PI)
        z = self.prior_tape(P, z0v)
        xterm = yterm = None
        if seqs is not None:
            per_tok, _ = self.decoder_tape(P, seqs, z)
            xterm = ad.sum(per_tok, axis=1)
        if y is not None:
            y = np.asarray(y, dtype=np.float64)
            if y.ndim == 1:
                y = y[:, None]
            if y.shape[1] != len(self.properties):
                raise DimensionMismatch(f"expected {len(self.properties)} property columns")
            weights = np.broadcast_to(np.asarray(guidance, dtype=np.float64),
                                      (len(self.properties),))
            for j in range(len(self.properties)):
                t = self.property_logprob_tape(P, j, y[:, j], z)
                if weights[j] != 1.0:
                    t = t * float(weights[j])
                yterm = t if yterm is None else yterm + t
        return prior, xterm, yterm

    # -- public numeric API ----------------------------------------------------------

    def prior_forward(self, z0):
        z0 = self._check_z0(z0)
        return self.prior_tape(self.tape_params(), ad.Var(z0)).value

    def decoder_logprob(self, seqs, z):
        """(total (B,), per_token (B, T) masked) for sequences under prompts z."""
        z = self._check_z(z)
        per_tok, mask = self.decoder_tape(self.tape_params(), list(seqs), ad.Var(z))
        return per_tok.value.sum(axis=1), per_tok.value

    def predict(self, z):
        """Predictor outputs (B, P): means for regression, probabilities for binary."""
        z = self._check_z(z)
        P = self.tape_params()
        cols = []
        for j, spec in enumerate(self.properties):
            out = self.predictor_tape(P, j, ad.Var(z)).value
            cols.append(out if spec.kind == "regression" else 1.0 / (1.0 + np.exp(-out)))
        return np.stack(cols, axis=1)

    def predictor_logprob(self, j, y, z):
        z = self._check_z(z)
        y = np.broadcast_to(np.asarray(y, dtype=np.float64), (z.shape[0],))
        return self.property_logprob_tape(self.tape_params(), j, y, ad.Var(z)).value

    def log_joint(self, z0, seqs=None, y=None, guidance=1.0):
        """Per-sample log p0(z0) + log p(x|z) + guidance * log p(y|z)."""
        return self.joint_logpost_grad(z0, seqs, y, guidance, need_grad=False)[0]

    def joint_logpost_grad(self, z0, seqs=None, y=None, guidance=1.0, need_grad=True):
        """Unnormalised log posterior of z0 and its gradient, per sample.

        Returns (value (B,), grad (B, d)). ``guidance`` scales only the
        predictor term; it is a scalar or one multiplier per property head.
        """
        if seqs is None and y is None:
            raise ValueError("at least one of x or y must be given")
        z0 = self._check_z0(z0)
        z0v = ad.param(z0) if need_grad else ad.Var(z0)
        prior, xterm, yterm = self._log_terms(self.tape_params(), z0v, seqs, y, guidance)
        total = prior
        if xterm is not None:
            total = total + xterm
        if yterm is not None:
            total = total + yterm
        if not need_grad:
            return total.value, None
        ad.backward(total)
        return total.value, z0v.grad

    def param_grads(self, z0, seqs=None, y=None, weights=None, groups=GROUPS):
        """Gradient of sum_i w_i [log p(x_i|z_i) + log p(y_i|z_i)] at fixed z0.

        Returns (grads dict over the requested groups, per-sample x term,
        per-sample y term); absent terms are reported as zeros.
        """
        z0 = self._check_z0(z0)
        B = z0.shape[0]
        w = np.full(B, 1.0 / B) if weights is None else np.asarray(weights, dtype=np.float64)
        P = self.tape_params(groups)
        _, xterm, yterm = self._log_terms(P, ad.Var(z0), seqs, y, 1.0)
        obj = None
        for t in (xterm, yterm):
            if t is not None:
                obj = t if obj is None else obj + t
        ad.backward(obj, seed=w)
        grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value))
                 for k, v in P.items() if v.requires_grad}
        zeros = np.zeros(B)
        return (grads,
                zeros if xterm is None else xterm.value,
                zeros if yterm is None else yterm.value)

    def generate(self, z, rng, prefix: TokenSeq = (), temperature=1.0):
        """Ancestral sampling of one sequence per prompt in ``z`` (B, K, Dk)."""
        z = self._check_z(z)
        if not temperature > 0:
            raise ValueError("temperature must be positive")
        prefix = tuple(int(t) for t in prefix)
        T = self.vocab.max_len
        if len(prefix) >= T:
            raise PrefixTooLong(f"prefix length {len(prefix)} must be < max_len {T}")
        B = z.shape[0]
        P = self.tape_params()
        zv = ad.Var(z)
        out = np.zeros((B, T), dtype=np.int64)
        out[:, :len(prefix)] = prefix
        length = np.full(B, T)
        done = np.zeros(B, dtype=bool)
        for t in range(len(prefix), T):
            inputs = np.concatenate([np.full((B, 1), self.vocab.bos_id), out[:, :t]], axis=1)
            logits = self.decoder_logits_tape(P, inputs, zv).value[:, t] / temperature
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            u = rng.random(B)[:, None]
            tok = (probs.cumsum(axis=1) < u).sum(axis=1)
            tok = np.minimum(tok, probs.shape[1] - 1)
            if self.vocab.eos:
                stop = (tok == self.vocab.eos_id) & ~done
                length[stop] = t
                done |= stop
                tok[done] = 0
            out[:, t] = tok
            if done.all():
                break
        return [tuple(out[b, :length[b]]) for b in range(B)]
