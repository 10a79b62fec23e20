"""Reference embedding provider: one POST endpoint over one sentence encoder."""

from .app import MAX_BATCH, create_app
from .encoder import (
    DEFAULT_MODEL_NAME,
    EMBED_DIM,
    Encoder,
    EncoderNotReady,
    SentenceEncoder,
)

__all__ = [
    "MAX_BATCH",
    "create_app",
    "DEFAULT_MODEL_NAME",
    "EMBED_DIM",
    "Encoder",
    "EncoderNotReady",
    "SentenceEncoder",
]
