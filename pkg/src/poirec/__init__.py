"""Next-POI recommendation with graph encoders and diffusion-sampled spatial preference."""

__version__ = "0.1.0"
