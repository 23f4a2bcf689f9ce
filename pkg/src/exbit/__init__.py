"""Exemplar-based image translation with masked cross-domain attention.

The package is organised bottom-up:

- ``autograd``: dense float64 tensors with reverse-mode differentiation
- ``layers``: spectral-normalized convs, PONO, coordinate attention, the
  adaptive conv block, SPADE- and AdaIN-style modulation
- ``attention``: masked cosine correspondence and the stacked translation
  transformer blocks
- ``network``: encoders, decoder, full generator and patch discriminator
- ``losses``: contrastive style loss with a negative queue, alignment,
  correspondence, perceptual, contextual, structural and hinge losses
- ``data`` / ``training`` / ``metrics``: synthetic triplets, the two
  time-scale Adam loop, checkpointing and quantitative evaluation
- ``netpbm`` / ``config`` / ``cli``: image I/O, configuration and the
  command-line entry points
"""

from .autograd import Tensor, gradcheck

__all__ = ["Tensor", "gradcheck"]
__version__ = "0.1.0"
