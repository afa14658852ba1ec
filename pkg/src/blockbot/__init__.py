"""Tabletop robot pipeline: bot-generated DSL programs, a deterministic
block-world simulator, and an offline Q-learner distilled from the
harvested demonstrations."""

__version__ = "0.1.0"
