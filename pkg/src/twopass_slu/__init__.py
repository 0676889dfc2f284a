"""Two-pass spoken language understanding at desk scale.

A fast first pass predicts an intent (plus a transcript) from possibly
truncated acoustic features; a deliberation second pass re-predicts by
attending jointly over acoustic embeddings and the semantic embedding of the
first-pass transcript; a confidence-thresholded router trades accuracy
against latency. Everything — autodiff, transformer blocks, the synthetic
corpus, training, decoding, evaluation — lives in this package with no
runtime dependencies beyond the optional compiled kernel extension.
"""

from twopass_slu.backend import active_backend, available_backends, use_backend

__version__ = "0.1.0"

__all__ = ["active_backend", "available_backends", "use_backend", "__version__"]
