"""Retrieval-constrained entity generation at desk scale.

Queries are embedded, matched against a cached entity vector index, and the
top candidates' identifiers are packed into a token trie that restricts
autoregressive decoding, so every constrained answer names a real entity.
"""

from groundgen.errors import GroundGenError

__version__ = "0.1.0"

__all__ = ["GroundGenError", "__version__"]
