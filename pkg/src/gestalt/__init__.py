"""Matrix reasoning by image completion.

Submodules: ``imagecore`` (images, composites, cropping), ``tensornet``
(numpy layers, Adam, gradient checks), ``inpaint`` (VAE-GAN and patch
backends), ``train`` (training loop and checkpoints), ``problems``
(procedural matrix problems) and ``solvereval`` (solver and reports).
"""

__version__ = "0.1.0"
