"""Pure numpy implementations of the fused kernels.

Used when the compiled extension is unavailable, and as the reference the
compiled versions are tested against. Every array is float64 and C-contiguous.
"""

import numpy as np

BACKEND = "python"


def attention_forward(q, k, v, causal):
    """Scaled dot-product attention over (B, H, T, D) blocks.

    Returns the attended values and the attention probabilities, which the
    backward pass reuses.
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    if causal:
        tq, tk = scores.shape[-2], scores.shape[-1]
        mask = np.triu(np.ones((tq, tk), dtype=bool), k=1 + tk - tq)
        scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    return np.matmul(probs, v), probs


def attention_backward(dout, q, k, v, probs):
    scale = 1.0 / np.sqrt(q.shape[-1])
    dprobs = np.matmul(dout, np.swapaxes(v, -1, -2))
    dv = np.matmul(np.swapaxes(probs, -1, -2), dout)
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dq = np.matmul(dscores, k) * scale
    dk = np.matmul(np.swapaxes(dscores, -1, -2), q) * scale
    return dq, dk, dv


def layernorm_forward(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd


def layernorm_backward(dy, xhat, rstd, gain):
    lead = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=lead)
    dbias = dy.sum(axis=lead)
    dxhat = dy * gain
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def token_logprob_forward(logits, targets):
    """Log-probability of each row's target class under softmax(logits).

    logits: (N, V); targets: (N,) int64. Returns (logp (N,), probs (N, V)).
    """
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logprobs = shifted - lse
    rows = np.arange(logits.shape[0])
    return logprobs[rows, targets].copy(), np.exp(logprobs)


def token_logprob_backward(g, probs, targets):
    dlogits = -g[:, None] * probs
    dlogits[np.arange(probs.shape[0]), targets] += g
    return dlogits


def levenshtein(a, b):
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    prev = np.arange(len(b) + 1, dtype=np.int64)
    for i in range(1, len(a) + 1):
        cur = np.empty_like(prev)
        cur[0] = i
        for j in range(1, len(b) + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return int(prev[-1])


def mean_pairwise_hamming(tokens):
    tokens = np.asarray(tokens)
    n = tokens.shape[0]
    if n < 2:
        return 0.0
    total = 0
    for i in range(n - 1):
        total += int((tokens[i + 1:] != tokens[i]).sum())
    return total / (n * (n - 1) / 2)
