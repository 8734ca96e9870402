"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 50]

Prints one line per kernel with the median time of each backend and the
speedup.  Both backends are imported directly so a single process can time
them side by side.
"""

import argparse
import statistics
import time

import numpy as np

from lpt_seqopt import _pykernels

try:
    from lpt_seqopt import _ckernels
except ImportError:
    _ckernels = None


def _time(fn, repeat):
    fn()
    out = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t)
    return statistics.median(out)


def cases(rng):
    b, h, t, d = 64, 4, 9, 16
    q, k, v = (rng.standard_normal((b, h, t, d)) for _ in range(3))
    kx, vx = rng.standard_normal((b, h, 2, d)), rng.standard_normal((b, h, 2, d))
    x = rng.standard_normal((b * t, 64))
    gain, bias = rng.standard_normal(64), rng.standard_normal(64)
    logits = rng.standard_normal((b * t, 5))
    targets = rng.integers(0, 5, size=b * t)
    toks = rng.integers(0, 4, size=(128, 8))
    a, c = list(rng.integers(0, 4, 30)), list(rng.integers(0, 4, 28))

    def attn(mod):
        out, probs = mod.attention_forward(q, k, v, True)
        return lambda: mod.attention_backward(out, q, k, v, probs)

    def ln_back(mod):
        y, xhat, rstd = mod.layernorm_forward(x, gain, bias, 1e-5)
        return lambda: mod.layernorm_backward(y, xhat, rstd, gain)

    def tok_back(mod):
        lp, probs = mod.token_logprob_forward(logits, targets)
        return lambda: mod.token_logprob_backward(np.ones_like(lp), probs, targets)

    return {
        "attention_forward (causal)": lambda m: lambda: m.attention_forward(q, k, v, True),
        "attention_forward (cross)": lambda m: lambda: m.attention_forward(q, kx, vx, False),
        "attention_backward": attn,
        "layernorm_forward": lambda m: lambda: m.layernorm_forward(x, gain, bias, 1e-5),
        "layernorm_backward": ln_back,
        "token_logprob_forward": lambda m: lambda: m.token_logprob_forward(logits, targets),
        "token_logprob_backward": tok_back,
        "levenshtein (30x28)": lambda m: lambda: m.levenshtein(a, c),
        "mean_pairwise_hamming (128x8)": lambda m: lambda: m.mean_pairwise_hamming(toks),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; run `python3 setup.py build_ext --inplace`")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'python us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for name, make in cases(rng).items():
        tp = _time(make(_pykernels), args.repeat) * 1e6
        tc = _time(make(_ckernels), args.repeat) * 1e6
        print(f"{name:32s} {tp:10.1f} {tc:10.1f} {tp / tc:8.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
