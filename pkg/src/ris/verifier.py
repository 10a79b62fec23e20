"""Distilled verifier: a small feed-forward classifier over hybrid features.

Training is plain numpy: He-uniform init, mini-batch focal loss, AdamW with
decoupled weight decay, early stopping on validation macro-F1. Arithmetic
runs in float64; the canonical stored parameters are float32, so a saved
and reloaded model reproduces its predictions bit-exactly.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, fields
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import (
    CorruptModel,
    DimensionMismatch,
    InvalidRatio,
    NonFiniteLoss,
    SingleClass,
    VersionMismatch,
)
from .features import EMBED_DIM, FEATURE_DIM, FeatureRecord, FeatureVector, NormStats

log = logging.getLogger(__name__)

CANONICAL_DIMS = (391, 512, 256, 128, 1)
DEFAULT_DECISION_THRESHOLD = 0.5

MODEL_MAGIC = b"RISV"
MODEL_FORMAT_VERSION = 1
_ACTIVATION = "relu-sigmoid"

PROB_FLOOR = 1e-7
_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


# --- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 2.0
    alpha: float = 0.25
    learning_rate: float = 5e-4
    weight_decay: float = 0.01
    batch_size: int = 64
    max_epochs: int = 200
    early_stop_patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive, weight_decay >= 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("batch_size, max_epochs, and patience must be >= 1")

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "alpha": self.alpha,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "early_stop_patience": self.early_stop_patience,
            "val_fraction": self.val_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> TrainConfig:
        names = [f.name for f in fields(cls)]
        return cls(**{name: payload[name] for name in names})


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_macro_f1: float


# --- model ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VerifierModel:
    """Immutable parameters plus the normalization and threshold they assume.

    weights[i] has shape (dims[i], dims[i+1]); biases[i] has shape
    (dims[i+1],); both are float32. Hidden layers are rectified, the output
    is logistic.
    """

    dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    norm_stats: NormStats
    decision_threshold: float = DEFAULT_DECISION_THRESHOLD
    train_config: Optional[TrainConfig] = None
    seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) < 2 or any(d < 1 for d in self.dims):
            raise ValueError("dims must name at least input and output layers")
        if self.dims[-1] != 1:
            raise ValueError("output layer must have a single unit")
        if len(self.weights) != len(self.dims) - 1 or len(self.biases) != len(self.dims) - 1:
            raise ValueError("one weight matrix and bias vector per layer required")
        weights = tuple(np.ascontiguousarray(w, dtype=np.float32) for w in self.weights)
        biases = tuple(np.ascontiguousarray(b, dtype=np.float32) for b in self.biases)
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.shape != (self.dims[i], self.dims[i + 1]):
                raise ValueError(
                    f"layer {i} weights shaped {w.shape}, expected "
                    f"{(self.dims[i], self.dims[i + 1])}"
                )
            if b.shape != (self.dims[i + 1],):
                raise ValueError(f"layer {i} bias shaped {b.shape}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i} has non-finite parameters")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)
        if not 0.0 <= self.decision_threshold <= 1.0:
            raise ValueError("decision_threshold must be in [0, 1]")
        # float64 copies for the compute path; exact upcast, built once.
        object.__setattr__(
            self, "_weights64", tuple(w.astype(np.float64) for w in weights)
        )
        object.__setattr__(
            self, "_biases64", tuple(b.astype(np.float64) for b in biases)
        )

    @property
    def param_count(self) -> int:
        return sum(
            (fan_in + 1) * fan_out for fan_in, fan_out in zip(self.dims, self.dims[1:])
        )


@dataclass(frozen=True)
class PredictResult:
    probability: float
    flagged: bool


@dataclass(frozen=True)
class EvalReport:
    """Confusion counts and per-class scores with "flawed" as the positive
    class; macro F1 is the unweighted mean of the two class F1s."""

    tp: int
    fp: int
    fn: int
    tn: int
    precision_flawed: float
    recall_flawed: float
    f1_flawed: float
    f1_clean: float
    macro_f1: float


# --- core math ----------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def focal_loss(
    p: Union[float, np.ndarray],
    y: Union[int, np.ndarray],
    gamma: float = 2.0,
    alpha: float = 0.25,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-example focal loss and its gradient w.r.t. the pre-logistic logit.

    pt = p if y=1 else 1-p, at = alpha if y=1 else 1-alpha:

        loss  = -at (1-pt)^gamma ln(pt)
        dL/dz = s at (1-pt)^gamma (gamma pt ln(pt) - (1-pt)),  s = +-1 by class

    Probabilities are clamped to [1e-7, 1-1e-7] before the logs.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = np.asarray(y, dtype=np.float64)
    pt = np.where(y == 1.0, p, 1.0 - p)
    at = np.where(y == 1.0, alpha, 1.0 - alpha)
    sign = np.where(y == 1.0, 1.0, -1.0)
    one_minus = 1.0 - pt
    log_pt = np.log(pt)
    focal = one_minus**gamma
    loss = -at * focal * log_pt
    grad = sign * at * focal * (gamma * pt * log_pt - one_minus)
    return loss, grad


def init_parameters(
    dims: Sequence[int], rng: np.random.Generator
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """He-uniform weights, U(-sqrt(6/fan_in), +sqrt(6/fan_in)); zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(dims, dims[1:]):
        limit = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out, dtype=np.float64))
    return weights, biases


def _forward_arrays(
    weights: Sequence[np.ndarray], biases: Sequence[np.ndarray], x: np.ndarray
) -> np.ndarray:
    a = x
    for w, b in zip(weights[:-1], biases[:-1]):
        a = np.maximum(a @ w + b, 0.0)
    z = a @ weights[-1] + biases[-1]
    return _sigmoid(z[:, 0])


def loss_and_gradients(
    weights: Sequence[np.ndarray],
    biases: Sequence[np.ndarray],
    x: np.ndarray,
    y: np.ndarray,
    gamma: float,
    alpha: float,
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean focal loss over the batch and its parameter gradients."""
    zs: list[np.ndarray] = []
    activations = [x]
    a = x
    for w, b in zip(weights[:-1], biases[:-1]):
        z = a @ w + b
        zs.append(z)
        a = np.maximum(z, 0.0)
        activations.append(a)
    z_out = a @ weights[-1] + biases[-1]
    p = _sigmoid(z_out[:, 0])
    losses, dz = focal_loss(p, y, gamma, alpha)
    n = x.shape[0]
    delta = (dz / n)[:, None]
    grads_w: list[np.ndarray] = [np.empty(0)] * len(weights)
    grads_b: list[np.ndarray] = [np.empty(0)] * len(weights)
    for layer in range(len(weights) - 1, -1, -1):
        grads_w[layer] = activations[layer].T @ delta
        grads_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ weights[layer].T) * (zs[layer - 1] > 0.0)
    return float(losses.mean()), grads_w, grads_b


def forward(model: VerifierModel, features: Sequence[float]) -> float:
    """Probability for one already-normalized input in the model's own
    input space; no structural z-scoring is applied here."""
    return float(forward_batch(model, np.asarray([features], dtype=np.float64))[0])


def forward_batch(model: VerifierModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dims[0]:
        raise DimensionMismatch(
            f"input shaped {x.shape}, expected (n, {model.dims[0]})"
        )
    return _forward_arrays(model._weights64, model._biases64, x)


# --- data handling --------------------------------------------------------------------


def stratified_split(
    records: Sequence[FeatureRecord], ratio: float = 0.8, seed: int = 0
) -> tuple[list[FeatureRecord], list[FeatureRecord]]:
    """Seeded per-class split; train receives round(ratio * class size) of
    each class and both sides preserve the input ordering."""
    if not 0.0 < ratio < 1.0:
        raise InvalidRatio(f"split ratio must be in (0, 1), got {ratio}")
    by_label: dict[int, list[int]] = {}
    for i, record in enumerate(records):
        by_label.setdefault(record.label, []).append(i)
    if len(by_label) < 2:
        raise SingleClass("stratified split needs both classes present")
    rng = np.random.default_rng(seed)
    train_idx: list[int] = []
    test_idx: list[int] = []
    for label in sorted(by_label):
        indices = by_label[label]
        order = rng.permutation(len(indices))
        take = round(ratio * len(indices))
        chosen = {indices[j] for j in order[:take]}
        train_idx.extend(i for i in indices if i in chosen)
        test_idx.extend(i for i in indices if i not in chosen)
    if not train_idx or not test_idx:
        raise InvalidRatio(
            f"ratio {ratio} leaves an empty side for {len(records)} records"
        )
    return (
        [records[i] for i in sorted(train_idx)],
        [records[i] for i in sorted(test_idx)],
    )


def _normalize_rows(norm: NormStats, x: np.ndarray) -> np.ndarray:
    scaled = x.copy()
    means = np.asarray(norm.means, dtype=np.float64)
    stds = np.asarray(norm.stds, dtype=np.float64)
    scaled[:, EMBED_DIM:] = (x[:, EMBED_DIM:] - means) / stds
    return scaled


def _record_matrix(records: Sequence[FeatureRecord]) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray([r.features.values for r in records], dtype=np.float64)
    y = np.asarray([r.label for r in records], dtype=np.float64)
    return x, y


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def _binary_scores(labels: np.ndarray, flags: np.ndarray) -> tuple[float, float, float, float]:
    """(precision_flawed, recall_flawed, f1_flawed, f1_clean); undefined
    ratios collapse to 0."""
    tp = float(np.sum((labels == 1) & flags))
    fp = float(np.sum((labels == 0) & flags))
    fn = float(np.sum((labels == 1) & ~flags))
    tn = float(np.sum((labels == 0) & ~flags))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision_clean = tn / (tn + fn) if tn + fn else 0.0
    recall_clean = tn / (tn + fp) if tn + fp else 0.0
    return precision, recall, _f1(precision, recall), _f1(precision_clean, recall_clean)


def _macro_f1(labels: np.ndarray, flags: np.ndarray) -> float:
    _, _, f1_flawed, f1_clean = _binary_scores(labels, flags)
    return (f1_flawed + f1_clean) / 2.0


# --- training ----------------------------------------------------------------------------


def train(
    records: Sequence[FeatureRecord],
    config: TrainConfig,
    dims: Sequence[int] = CANONICAL_DIMS,
) -> tuple[VerifierModel, list[EpochStats]]:
    """Fit the verifier on raw feature records.

    Normalization stats come from the inner training split only; validation
    is carved off stratified at config.val_fraction. Early stopping tracks
    validation macro-F1 and the returned parameters are from the best epoch.
    """
    dims = tuple(int(d) for d in dims)
    if dims[0] != FEATURE_DIM:
        raise DimensionMismatch(f"input layer must be {FEATURE_DIM}, got {dims[0]}")
    inner_train, val = stratified_split(
        records, ratio=1.0 - config.val_fraction, seed=config.seed
    )
    for name, side in (("train", inner_train), ("val", val)):
        counts = {0: 0, 1: 0}
        for record in side:
            counts[record.label] += 1
        if min(counts.values()) < 2:
            raise SingleClass(
                f"{name} split needs >= 2 examples per class, got {counts}"
            )

    x_train_raw, y_train = _record_matrix(inner_train)
    x_val_raw, y_val = _record_matrix(val)
    norm = NormStats.fit(x_train_raw[:, EMBED_DIM:].tolist())
    x_train = _normalize_rows(norm, x_train_raw)
    x_val = _normalize_rows(norm, x_val_raw)

    rng = np.random.default_rng(config.seed)
    weights, biases = init_parameters(dims, rng)
    m_w = [np.zeros_like(w) for w in weights]
    v_w = [np.zeros_like(w) for w in weights]
    m_b = [np.zeros_like(b) for b in biases]
    v_b = [np.zeros_like(b) for b in biases]

    best_f1 = -1.0
    best_weights = [w.copy() for w in weights]
    best_biases = [b.copy() for b in biases]
    stale = 0
    step = 0
    history: list[EpochStats] = []

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(inner_train))
        loss_total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            loss, grads_w, grads_b = loss_and_gradients(
                weights, biases, x_train[batch], y_train[batch],
                config.gamma, config.alpha,
            )
            if not math.isfinite(loss):
                raise NonFiniteLoss(
                    f"epoch {epoch}, batch at {start}: loss became {loss}"
                )
            loss_total += loss * len(batch)
            step += 1
            correction1 = 1.0 - _ADAM_BETA1**step
            correction2 = 1.0 - _ADAM_BETA2**step
            params = zip(weights + biases, grads_w + grads_b, m_w + m_b, v_w + v_b)
            for param, grad, m, v in params:
                m *= _ADAM_BETA1
                m += (1.0 - _ADAM_BETA1) * grad
                v *= _ADAM_BETA2
                v += (1.0 - _ADAM_BETA2) * grad * grad
                update = (m / correction1) / (np.sqrt(v / correction2) + _ADAM_EPS)
                param -= config.learning_rate * (update + config.weight_decay * param)

        val_p = _forward_arrays(weights, biases, x_val)
        val_f1 = _macro_f1(y_val, val_p >= DEFAULT_DECISION_THRESHOLD)
        history.append(
            EpochStats(
                epoch=epoch,
                train_loss=loss_total / len(inner_train),
                val_macro_f1=val_f1,
            )
        )
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_weights = [w.copy() for w in weights]
            best_biases = [b.copy() for b in biases]
            stale = 0
        else:
            stale += 1
            if stale >= config.early_stop_patience:
                log.info(
                    "early stop at epoch %d (best val macro-F1 %.4f)", epoch, best_f1
                )
                break

    model = VerifierModel(
        dims=dims,
        weights=tuple(np.asarray(w, dtype=np.float32) for w in best_weights),
        biases=tuple(np.asarray(b, dtype=np.float32) for b in best_biases),
        norm_stats=norm,
        decision_threshold=DEFAULT_DECISION_THRESHOLD,
        train_config=config,
        seed=config.seed,
    )
    return model, history


# --- inference & evaluation -----------------------------------------------------------------


def predict_batch(
    model: VerifierModel,
    features: Sequence[Union[FeatureVector, Sequence[float]]],
    threshold: Optional[float] = None,
) -> list[PredictResult]:
    """Probabilities and flags for raw hybrid vectors, in input order.

    Structural dimensions are z-scored with the model's stored stats; the
    flag test is probability >= threshold.
    """
    if model.dims[0] != FEATURE_DIM:
        raise DimensionMismatch(
            f"predict requires the canonical {FEATURE_DIM}-dim input layer"
        )
    rows = []
    for item in features:
        values = item.values if isinstance(item, FeatureVector) else tuple(item)
        if len(values) != FEATURE_DIM:
            raise DimensionMismatch(
                f"feature vector has {len(values)} dims, expected {FEATURE_DIM}"
            )
        rows.append(values)
    if not rows:
        return []
    cut = model.decision_threshold if threshold is None else threshold
    x = _normalize_rows(model.norm_stats, np.asarray(rows, dtype=np.float64))
    probabilities = forward_batch(model, x)
    return [
        PredictResult(probability=float(p), flagged=bool(p >= cut))
        for p in probabilities
    ]


def predict(
    model: VerifierModel,
    features: Union[FeatureVector, Sequence[float]],
    threshold: Optional[float] = None,
) -> PredictResult:
    return predict_batch(model, [features], threshold)[0]


def evaluate(model: VerifierModel, records: Sequence[FeatureRecord]) -> EvalReport:
    """Thresholded metrics on a labeled test set, flawed as positive."""
    if not records:
        raise ValueError("evaluate needs a nonempty test set")
    labels = np.asarray([r.label for r in records])
    results = predict_batch(model, [r.features for r in records])
    flags = np.asarray([r.flagged for r in results])
    tp = int(np.sum((labels == 1) & flags))
    fp = int(np.sum((labels == 0) & flags))
    fn = int(np.sum((labels == 1) & ~flags))
    tn = int(np.sum((labels == 0) & ~flags))
    if tp + fp == 0:
        log.warning("no flawed predictions; precision_flawed set to 0")
    if tn + fn == 0:
        log.warning("no clean predictions; clean-class scores set to 0")
    precision, recall, f1_flawed, f1_clean = _binary_scores(labels, flags)
    return EvalReport(
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
        precision_flawed=precision,
        recall_flawed=recall,
        f1_flawed=f1_flawed,
        f1_clean=f1_clean,
        macro_f1=(f1_flawed + f1_clean) / 2.0,
    )


# --- serialization ----------------------------------------------------------------------------


def save_model(
    model: VerifierModel, path: str, manifest_digest: Optional[str] = None
) -> None:
    """Magic + u16 version + u32 header length (LE), JSON header, then raw
    float32 LE parameters, layer-major, weights before bias."""
    header = {
        "dims": list(model.dims),
        "activation": _ACTIVATION,
        "threshold": model.decision_threshold,
        "norm_stats": model.norm_stats.to_dict(),
        "train_config": model.train_config.to_dict() if model.train_config else None,
        "param_count": model.param_count,
        "seed": model.seed,
    }
    if manifest_digest is not None:
        header["manifest_digest"] = manifest_digest
    header_bytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<H", MODEL_FORMAT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for w, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def load_model(path: str) -> VerifierModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10 or blob[:4] != MODEL_MAGIC:
        raise CorruptModel("bad magic; not a verifier model file")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != MODEL_FORMAT_VERSION:
        raise VersionMismatch(
            f"model format {version}, expected {MODEL_FORMAT_VERSION}"
        )
    (header_len,) = struct.unpack_from("<I", blob, 6)
    header_end = 10 + header_len
    if len(blob) < header_end:
        raise CorruptModel("truncated header")
    try:
        header = json.loads(blob[10:header_end].decode("utf-8"))
        dims = tuple(int(d) for d in header["dims"])
        threshold = float(header["threshold"])
        norm_stats = NormStats.from_dict(header["norm_stats"])
        config_payload = header["train_config"]
        param_count = int(header["param_count"])
        if header["activation"] != _ACTIVATION:
            raise CorruptModel(f"unsupported activation {header['activation']!r}")
        train_config = (
            TrainConfig.from_dict(config_payload) if config_payload else None
        )
    except CorruptModel:
        raise
    except (KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
        raise CorruptModel(f"malformed model header: {exc}") from exc
    expected = sum((a + 1) * b for a, b in zip(dims, dims[1:]))
    if param_count != expected:
        raise CorruptModel(
            f"header param_count {param_count} does not match dims ({expected})"
        )
    payload = blob[header_end:]
    if len(payload) != 4 * expected:
        raise CorruptModel(
            f"parameter payload is {len(payload)} bytes, expected {4 * expected}"
        )
    flat = np.frombuffer(payload, dtype="<f4")
    if not np.isfinite(flat).all():
        raise CorruptModel("non-finite parameters in payload")
    weights, biases = [], []
    offset = 0
    for fan_in, fan_out in zip(dims, dims[1:]):
        weights.append(flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out).copy())
        offset += fan_in * fan_out
        biases.append(flat[offset : offset + fan_out].copy())
        offset += fan_out
    return VerifierModel(
        dims=dims,
        weights=tuple(weights),
        biases=tuple(biases),
        norm_stats=norm_stats,
        decision_threshold=threshold,
        train_config=train_config,
        seed=header.get("seed"),
    )
