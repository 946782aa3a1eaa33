"""Translation-based joint recommendation and knowledge graph completion."""

__version__ = "0.1.0"
