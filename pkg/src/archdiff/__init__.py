"""Score-based diffusion generation of neural-architecture DAGs with predictor guidance."""

__version__ = "0.1.0"
