"""Latent prompt transformer for black-box sequence optimization.

The model couples a learnable latent prior, an autoregressive decoder that
reads the latent through cross-attention, and property heads.  Training is
maximum likelihood with Langevin posterior sampling; ``dso.run`` drives the
online propose / relabel / select / improve loop.
"""

from . import dso, kernels, oracles, sampler, seqcore, trainer
from .model import LPT, ModelConfig, PropertySpec, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "LPT", "ModelConfig", "PropertySpec", "dso", "kernels", "load_checkpoint", "oracles",
    "sampler", "save_checkpoint", "seqcore", "trainer", "__version__",
]
