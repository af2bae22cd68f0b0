"""Privacy-preserving image-to-text refinement with PPO prompt selection and retrieval feedback."""

__version__ = "0.1.0"
