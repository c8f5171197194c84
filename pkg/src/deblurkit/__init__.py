"""Desk-scale blind motion deblurring toolkit.

Lightweight conditional-GAN restoration networks built on a self-contained
autodiff engine, with exact parameter/MAC accounting, synthetic blur data
generation, a full adversarial training loop, and PSNR/SSIM evaluation.
"""

__version__ = "0.1.0"
