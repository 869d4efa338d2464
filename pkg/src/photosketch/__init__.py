"""Face photo/sketch translation and recognition toolkit.

Trains a cycle-consistent photo<->sketch translator with an identity-aware
perceptual term, fine-tunes recognition embedders on real+generated pairs,
and evaluates both image quality (SSIM/FSIM) and cross-domain rank-k
recognition with score fusion.
"""

__version__ = "0.1.0"
