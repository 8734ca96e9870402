import json
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpt_seqopt import _pykernels as py
from lpt_seqopt import kernels

ck = pytest.importorskip("lpt_seqopt._ckernels")


def _arr(rng, *shape):
    return np.ascontiguousarray(rng.standard_normal(shape))


def test_dispatch_prefers_compiled():
    assert kernels.BACKEND == ck.BACKEND != py.BACKEND


@pytest.mark.parametrize("causal,tq,tk", [(True, 5, 5), (False, 4, 3), (True, 2, 6)])
def test_attention_backends_agree(causal, tq, tk):
    rng = np.random.default_rng(0)
    q, k, v = _arr(rng, 2, 3, tq, 4), _arr(rng, 2, 3, tk, 4), _arr(rng, 2, 3, tk, 4)
    out_p, probs_p = py.attention_forward(q, k, v, causal)
    out_c, probs_c = ck.attention_forward(q, k, v, causal)
    assert np.allclose(out_p, out_c, atol=1e-12) and np.allclose(probs_p, probs_c, atol=1e-12)
    dout = _arr(rng, 2, 3, tq, 4)
    for a, b in zip(py.attention_backward(dout, q, k, v, probs_p),
                    ck.attention_backward(dout, q, k, v, np.asarray(probs_c))):
        assert np.allclose(a, b, atol=1e-12)


def test_layernorm_backends_agree():
    rng = np.random.default_rng(1)
    x, gain, bias = _arr(rng, 3, 4, 6), _arr(rng, 6), _arr(rng, 6)
    fp, fc = py.layernorm_forward(x, gain, bias, 1e-5), ck.layernorm_forward(x, gain, bias, 1e-5)
    for a, b in zip(fp, fc):
        assert np.allclose(a, b, atol=1e-12)
    dy = _arr(rng, 3, 4, 6)
    for a, b in zip(py.layernorm_backward(dy, fp[1], fp[2], gain),
                    ck.layernorm_backward(dy, np.asarray(fc[1]), np.asarray(fc[2]), gain)):
        assert np.allclose(a, b, atol=1e-12)


def test_token_logprob_backends_agree():
    rng = np.random.default_rng(2)
    logits = _arr(rng, 7, 5) * 3
    targets = rng.integers(0, 5, 7).astype(np.int64)
    lp_p, pr_p = py.token_logprob_forward(logits, targets)
    lp_c, pr_c = ck.token_logprob_forward(logits, targets)
    assert np.allclose(lp_p, lp_c, atol=1e-12) and np.allclose(pr_p, pr_c, atol=1e-12)
    # each row's probabilities form a distribution
    assert np.allclose(np.asarray(pr_c).sum(axis=1), 1.0)
    g = _arr(rng, 7)
    assert np.allclose(py.token_logprob_backward(g, pr_p, targets),
                       ck.token_logprob_backward(g, np.asarray(pr_c), targets), atol=1e-12)


def test_levenshtein_examples():
    kitten, sitting = [ord(c) for c in "kitten"], [ord(c) for c in "sitting"]
    for impl in (py, ck):
        assert impl.levenshtein(kitten, sitting) == 3
        assert impl.levenshtein([], [1, 2]) == 2
        assert impl.levenshtein([1, 2, 3], [1, 2, 3]) == 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=12), st.lists(st.integers(0, 3), max_size=12))
def test_levenshtein_backends_agree(a, b):
    assert py.levenshtein(a, b) == ck.levenshtein(a, b) == ck.levenshtein(b, a)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_hamming_backends_agree(n, length, seed):
    tokens = np.random.default_rng(seed).integers(0, 4, (n, length)).astype(np.int64)
    assert py.mean_pairwise_hamming(tokens) == pytest.approx(ck.mean_pairwise_hamming(tokens))


def test_hamming_example():
    # three sequences at pairwise distances 1, 3, 4
    tokens = np.array([[0, 0, 0, 0], [0, 0, 0, 1], [1, 1, 1, 0]], dtype=np.int64)
    assert ck.mean_pairwise_hamming(tokens) == pytest.approx(8 / 3)


_PROBE = """
import json, numpy as np
from lpt_seqopt import kernels
from lpt_seqopt.model import LPT, ModelConfig
from lpt_seqopt.seqcore import Vocabulary
m = LPT(Vocabulary(tuple("ACGT"), 6), ModelConfig(k_tokens=2, k_dim=4, embed=16, heads=2,
        layers=1, prior_hidden=8, predictor_hidden=8), seed=0)
z0 = np.random.default_rng(0).standard_normal((3, m.latent_dim))
val, grad = m.joint_logpost_grad(z0, [(0, 1, 2), (3, 3, 3, 3, 3, 3), (1,)], np.ones((3, 1)))
print(json.dumps({"backend": kernels.BACKEND, "val": val.tolist(), "grad": grad.ravel().tolist()}))
"""


def _probe(env_value):
    env = dict(os.environ, LPT_SEQOPT_KERNELS=env_value)
    out = subprocess.run([sys.executable, "-c", _PROBE], env=env, capture_output=True,
                         text=True, check=True)
    return json.loads(out.stdout)


def test_fallback_selected_at_import_gives_same_model():
    fast, slow = _probe(""), _probe("python")
    assert fast["backend"] != "python" and slow["backend"] == "python"
    assert np.allclose(fast["val"], slow["val"], rtol=1e-12, atol=1e-10)
    assert np.allclose(fast["grad"], slow["grad"], rtol=1e-10, atol=1e-10)
