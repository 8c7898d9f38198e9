"""rrgen: retrieve, rerank, and generate for document-grounded dialogue,
with adversarial training, cross-lingual pseudo-data, and staged training."""

__version__ = "0.1.0"
