"""Sentence encoders behind the embed endpoint.

The default encoder wraps sentence-transformers and loads lazily under a
lock; until the weights are in memory the service answers 503. Anything
with a model_name and an encode() returning one 384-dim vector per text
can stand in, which keeps test suites free of model downloads.
"""

from __future__ import annotations

import logging
import threading
from typing import Optional, Protocol, Sequence

logger = logging.getLogger(__name__)

EMBED_DIM = 384
DEFAULT_MODEL_NAME = "all-MiniLM-L6-v2"


class EncoderNotReady(RuntimeError):
    """The underlying model is still loading or failed to load."""


class Encoder(Protocol):
    model_name: str

    def encode(self, texts: Sequence[str]) -> list[list[float]]: ...


class SentenceEncoder:
    """Lazy sentence-transformers wrapper; loads once, threadsafe."""

    def __init__(self, model_name: str = DEFAULT_MODEL_NAME) -> None:
        self.model_name = model_name
        self._model = None
        self._failed: Optional[Exception] = None
        self._lock = threading.Lock()

    @property
    def ready(self) -> bool:
        return self._model is not None

    def warm(self) -> None:
        try:
            self._load()
        except EncoderNotReady:
            pass  # already logged; requests will keep reporting 503

    def _load(self):
        with self._lock:
            if self._model is None and self._failed is None:
                try:
                    from sentence_transformers import SentenceTransformer

                    logger.info("loading encoder %s", self.model_name)
                    self._model = SentenceTransformer(self.model_name)
                except Exception as exc:  # import, download, or bad model name
                    self._failed = exc
                    logger.error("encoder load failed: %s", exc)
            if self._model is None:
                raise EncoderNotReady(str(self._failed))
            return self._model

    def encode(self, texts: Sequence[str]) -> list[list[float]]:
        model = self._load()
        vectors = model.encode(
            list(texts), convert_to_numpy=True, show_progress_bar=False
        )
        return [[float(v) for v in row] for row in vectors]
