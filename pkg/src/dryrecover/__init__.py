"""Two-stage distortion recovery for electric guitar: Mel denoiser followed by a GAN vocoder."""

__version__ = "0.1.0"
