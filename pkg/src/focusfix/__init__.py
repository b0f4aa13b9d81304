"""Region-aware reward fine-tuning of a small conditional diffusion model.

The library pretrains a toy conditional denoiser on synthetic shape images
with localized checkerboard defects, then fine-tunes LoRA adapters to
maximize a differentiable defect reward inside predicted problem regions
while penalizing change everywhere else. Unconstrained reward ascent and
inference-time reward guidance are included as baselines, together with the
evaluation stack (PSNR/SSIM/perceptual distance, region change statistics,
simulated preference votes).
"""

__version__ = "0.1.0"

FORMAT_VERSION = 1
