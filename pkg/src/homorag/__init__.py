"""homorag: homology-evidence retrieval and two-stage context filtering for protein-text QA."""

__version__ = "0.1.0"
