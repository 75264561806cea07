"""Two-stage 3D brain MRI synthesis: a latent diffusion generator followed by a
patch-wise conditional diffusion refiner, plus the evaluation metrics used to
compare reconstructions, refinements and originals."""

__version__ = "0.1.0"
