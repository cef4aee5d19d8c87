"""misac: multimodal sensing-and-communication model sandbox."""

__version__ = "0.1.0"
