"""Fused numeric kernels, backed by the compiled extension when it is built.

Set ``LPT_SEQOPT_KERNELS=python`` to force the numpy fallback.
"""

import os

if os.environ.get("LPT_SEQOPT_KERNELS", "").lower() == "python":
    from . import _pykernels as _impl
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not compiled
        from . import _pykernels as _impl

BACKEND = _impl.BACKEND

attention_forward = _impl.attention_forward
attention_backward = _impl.attention_backward
layernorm_forward = _impl.layernorm_forward
layernorm_backward = _impl.layernorm_backward
token_logprob_forward = _impl.token_logprob_forward
token_logprob_backward = _impl.token_logprob_backward
levenshtein = _impl.levenshtein
mean_pairwise_hamming = _impl.mean_pairwise_hamming
