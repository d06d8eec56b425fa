"""Angular super-resolution for diffusion MRI q-space signals.

A desk-scale, numpy-based pipeline: synthetic multi-tensor phantoms,
masked diffusion-transformer pretraining with per-direction gradient
conditioning, spherical-harmonics-guided posterior sampling, and
PSNR/SSIM/DTI evaluation.
"""

__version__ = "0.1.0"
