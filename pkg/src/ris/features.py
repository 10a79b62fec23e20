"""Hybrid feature pipeline for the distilled verifier.

A trace is encoded as 391 reals: a 384-dim sentence embedding of the raw
output (fetched over the embedding-provider protocol, or produced by a
deterministic hashing fallback when no provider is configured) followed by
7 structural metrics. The structural block is z-scored with moments fit on
the training split; the embedding block passes through untouched because
provider vectors are already unit-norm.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import requests

from .errors import DimensionMismatch, ParseError, TransportError
from .traces import ReasoningTrace

log = logging.getLogger(__name__)

EMBED_DIM = 384
STRUCTURAL_DIM = 7
FEATURE_DIM = EMBED_DIM + STRUCTURAL_DIM

DEFAULT_EMBED_TIMEOUT_S = 30.0
_MAX_BATCH = 64

_TOKEN = re.compile(r"[a-z0-9]+")
_DIGIT_RUN = re.compile(r"\d+")
# Both the ASCII hyphen-minus and the typographic minus count as subtraction.
_ARITHMETIC_SYMBOLS = frozenset("+-*×/=%−")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


# --- structural metrics ---------------------------------------------------------


@dataclass(frozen=True)
class StructuralFeatures:
    """Cheap verbosity-flavored counts over a parsed trace's step texts."""

    step_count: int
    total_chars: int
    mean_step_chars: float
    std_step_chars: float
    numeric_token_count: int
    arithmetic_symbol_count: int
    has_final_answer: int

    def __post_init__(self):
        counts = (
            self.step_count,
            self.total_chars,
            self.mean_step_chars,
            self.std_step_chars,
            self.numeric_token_count,
            self.arithmetic_symbol_count,
        )
        if any(v < 0 for v in counts):
            raise ValueError("structural metrics must be non-negative")
        if self.has_final_answer not in (0, 1):
            raise ValueError("has_final_answer must be 0 or 1")
        if self.step_count <= 1 and self.std_step_chars != 0.0:
            raise ValueError("std_step_chars must be 0 for single-step traces")

    def as_tuple(self) -> tuple[float, ...]:
        return (
            float(self.step_count),
            float(self.total_chars),
            float(self.mean_step_chars),
            float(self.std_step_chars),
            float(self.numeric_token_count),
            float(self.arithmetic_symbol_count),
            float(self.has_final_answer),
        )


def structural_features(trace: ReasoningTrace) -> StructuralFeatures:
    """Counts over the step texts: numeric tokens are maximal digit runs,
    arithmetic symbols come from a fixed glyph set, and spread is the
    population standard deviation of step lengths."""
    texts = [step.text for step in trace.steps]
    lengths = [len(t) for t in texts]
    n = len(texts)
    total = sum(lengths)
    mean = total / n if n else 0.0
    if n > 1:
        std = math.sqrt(math.fsum((l - mean) ** 2 for l in lengths) / n)
    else:
        std = 0.0
    numeric = sum(len(_DIGIT_RUN.findall(t)) for t in texts)
    arithmetic = sum(1 for t in texts for ch in t if ch in _ARITHMETIC_SYMBOLS)
    return StructuralFeatures(
        step_count=n,
        total_chars=total,
        mean_step_chars=mean,
        std_step_chars=std,
        numeric_token_count=numeric,
        arithmetic_symbol_count=arithmetic,
        has_final_answer=1 if trace.final_answer is not None else 0,
    )


# --- embeddings ----------------------------------------------------------------


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def _renormalize(vector: list[float]) -> list[float]:
    norm = math.sqrt(math.fsum(v * v for v in vector))
    if norm == 0.0:
        return vector
    return [v / norm for v in vector]


def fallback_embed(text: str) -> list[float]:
    """Deterministic stand-in for the sentence embedding.

    Signed bag-of-words hashing: each lowercase alphanumeric token is hashed
    with FNV-1a 64, lands in bin h mod 384 with sign from bit 63, and the
    accumulated vector is L2-normalized. Token-free text maps to the zero
    vector. Order-insensitive by construction.
    """
    vector = [0.0] * EMBED_DIM
    for token in _TOKEN.findall(text.lower()):
        h = _fnv1a64(token.encode("utf-8"))
        sign = -1.0 if h >> 63 else 1.0
        vector[h % EMBED_DIM] += sign
    return _renormalize(vector)


def fetch_embedding(
    texts: Sequence[str],
    base_url: Optional[str] = None,
    session: Optional[requests.Session] = None,
    timeout_s: float = DEFAULT_EMBED_TIMEOUT_S,
    max_in_flight: int = 4,
) -> list[list[float]]:
    """Embed texts through the provider protocol, up to 64 per request.

    Batches may run concurrently; the merged result preserves input order.
    Every vector is checked for 384 dims and re-normalized to unit L2.
    """
    if not texts:
        return []
    base = (base_url or os.environ.get("RIS_EMBED_BASE", "")).rstrip("/")
    if not base:
        raise TransportError("no embedding base URL configured; set RIS_EMBED_BASE")
    http = session or requests.Session()

    def run(chunk: list[str]) -> list[list[float]]:
        try:
            response = http.post(
                f"{base}/v1/embed", json={"texts": chunk}, timeout=timeout_s
            )
        except requests.RequestException as exc:
            raise TransportError(f"embedding request failed: {exc}") from exc
        if response.status_code != 200:
            raise TransportError(
                f"embedding provider returned HTTP {response.status_code}"
            )
        try:
            payload = response.json()
            dim = payload["dim"]
            vectors = payload["vectors"]
        except (ValueError, KeyError, TypeError) as exc:
            raise TransportError(f"malformed embedding response: {exc}") from exc
        if dim != EMBED_DIM:
            raise DimensionMismatch(f"provider dim {dim}, expected {EMBED_DIM}")
        if len(vectors) != len(chunk):
            raise TransportError(
                f"expected {len(chunk)} vectors, got {len(vectors)}"
            )
        out = []
        for vector in vectors:
            if len(vector) != EMBED_DIM:
                raise DimensionMismatch(
                    f"vector of dim {len(vector)}, expected {EMBED_DIM}"
                )
            out.append(_renormalize([float(v) for v in vector]))
        return out

    chunks = [list(texts[i : i + _MAX_BATCH]) for i in range(0, len(texts), _MAX_BATCH)]
    merged: list[list[float]] = []
    if len(chunks) == 1:
        merged.extend(run(chunks[0]))
    else:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            for batch in pool.map(run, chunks):
                merged.extend(batch)
    return merged


def embed_texts(
    texts: Sequence[str],
    base_url: Optional[str] = None,
    session: Optional[requests.Session] = None,
) -> list[list[float]]:
    """Provider embeddings when a base URL is configured (argument or
    RIS_EMBED_BASE), the hashing fallback otherwise."""
    base = base_url or os.environ.get("RIS_EMBED_BASE", "")
    if base:
        return fetch_embedding(texts, base_url=base, session=session)
    return [fallback_embed(t) for t in texts]


# --- normalization & assembly -----------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    """Structural-block moments fit on the training split.

    Stored inside the model file so serving normalizes exactly as training
    did. Dimensions with zero variance keep std 1 so z-scoring is a no-op
    for them.
    """

    means: tuple[float, ...]
    stds: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "means", tuple(float(m) for m in self.means))
        object.__setattr__(self, "stds", tuple(float(s) for s in self.stds))
        if len(self.means) != STRUCTURAL_DIM or len(self.stds) != STRUCTURAL_DIM:
            raise DimensionMismatch(
                f"norm stats need {STRUCTURAL_DIM} dims, got "
                f"{len(self.means)}/{len(self.stds)}"
            )
        if any(not math.isfinite(m) for m in self.means) or any(
            not (math.isfinite(s) and s > 0.0) for s in self.stds
        ):
            raise ValueError("means must be finite and stds finite positive")

    @classmethod
    def identity(cls) -> NormStats:
        return cls(means=(0.0,) * STRUCTURAL_DIM, stds=(1.0,) * STRUCTURAL_DIM)

    @classmethod
    def fit(cls, structural_rows: Sequence[Sequence[float]]) -> NormStats:
        if not structural_rows:
            raise ValueError("cannot fit norm stats on an empty sample")
        arr = np.asarray(structural_rows, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != STRUCTURAL_DIM:
            raise DimensionMismatch(
                f"expected rows of {STRUCTURAL_DIM} structural dims, got {arr.shape}"
            )
        means = arr.mean(axis=0)
        stds = arr.std(axis=0)  # population moments
        stds = np.where(stds == 0.0, 1.0, stds)
        return cls(means=tuple(means), stds=tuple(stds))

    def transform(self, structural: Sequence[float]) -> tuple[float, ...]:
        if len(structural) != STRUCTURAL_DIM:
            raise DimensionMismatch(
                f"expected {STRUCTURAL_DIM} structural dims, got {len(structural)}"
            )
        return tuple(
            (float(v) - m) / s for v, m, s in zip(structural, self.means, self.stds)
        )

    def to_dict(self) -> dict:
        return {"means": list(self.means), "stds": list(self.stds)}

    @classmethod
    def from_dict(cls, payload: Mapping) -> NormStats:
        try:
            return cls(means=tuple(payload["means"]), stds=tuple(payload["stds"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed norm stats payload: {exc}") from exc


@dataclass(frozen=True)
class FeatureVector:
    """391 reals: embedding block 0-383, structural block 384-390."""

    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) != FEATURE_DIM:
            raise DimensionMismatch(
                f"feature vector has {len(self.values)} dims, expected {FEATURE_DIM}"
            )
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("feature values must be finite")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def assemble_features(
    embedding: Sequence[float],
    structural: StructuralFeatures,
    norm: NormStats,
) -> FeatureVector:
    """Concatenate the raw embedding with the z-scored structural block."""
    if len(embedding) != EMBED_DIM:
        raise DimensionMismatch(
            f"embedding has {len(embedding)} dims, expected {EMBED_DIM}"
        )
    scaled = norm.transform(structural.as_tuple())
    return FeatureVector(values=tuple(float(v) for v in embedding) + scaled)


# --- feature dumps ------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureRecord:
    """One dumped training row: raw (un-normalized) features plus the label."""

    record_id: str
    features: FeatureVector
    label: int

    def __post_init__(self):
        if isinstance(self.label, bool) or self.label not in (0, 1):
            raise ValueError("label must be the integer 0 or 1")


def read_feature_dump(path: str) -> list[FeatureRecord]:
    records = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
                record = FeatureRecord(
                    record_id=payload["record_id"],
                    features=FeatureVector(values=tuple(payload["features"])),
                    label=payload["label"],
                )
            except (ValueError, KeyError, TypeError, DimensionMismatch) as exc:
                raise ParseError(f"bad feature row: {exc}", line=lineno) from exc
            if record.record_id in seen:
                raise ParseError(
                    f"duplicate record_id {record.record_id!r}", line=lineno
                )
            seen.add(record.record_id)
            records.append(record)
    return records


def write_feature_dump(path: str, records: Iterable[FeatureRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(
                json.dumps(
                    {
                        "record_id": record.record_id,
                        "features": list(record.features.values),
                        "label": record.label,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
