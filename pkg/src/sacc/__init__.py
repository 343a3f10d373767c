"""Code classification with statement-tree encoding and sparse attention.

Pipeline: C source -> AST (``cfront``) -> statement trees plus their
parent links (``treesplit``) -> recursive tree vectors (``encoder``) ->
Transformer with masked sparse attention (``attention``) -> class logits.
``train`` holds ingestion, optimisation, metrics and checkpoints.
"""

__version__ = "0.1.0"
