"""Retrieval-augmented captioning at desk scale.

The pipeline: parse attribute/relationship annotations into a deduplicated
description database, embed the descriptions as unit-norm search keys,
query them with crop-based sub-region embeddings (exact top-k cosine),
condition object and text tokens on a global image feature, and feed the
concatenated token sequence to a small auto-regressive captioner trained
with cross-entropy and then self-critical reward fine-tuning.
"""

__version__ = "0.1.0"

from retrocap.errors import ConfigError, DataError, NumericCheckError

__all__ = ["ConfigError", "DataError", "NumericCheckError", "__version__"]
