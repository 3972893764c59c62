"""Reentrancy detection for Solidity contracts.

Pipeline: clean source -> snippets anchored on external calls -> symbolized
tokens -> skip-gram embeddings -> BLSTM with attention pooling -> verdict.
"""

__version__ = "0.1.0"
