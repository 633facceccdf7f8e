"""Load embeddings for scalable AC-OPF learning."""

__version__ = "0.1.0"
