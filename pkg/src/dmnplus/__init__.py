"""Dynamic memory networks with input fusion and attention-based GRU memory."""

__version__ = "0.1.0"
