"""Statistical battery over scored traces.

Implements the analyses behind the headline tables: right-for-wrong-reasons
rates per (model, dataset), Fleiss' kappa for judge agreement, Cohen's d
effect sizes with post-hoc power, Pearson correlation, flawed-threshold
sensitivity sweeps, error-category distribution deltas, and normalized
error position. Everything here is pure and deterministic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Hashable, Iterable, Mapping, Optional, Sequence

from .errors import (
    ConstantInput,
    DegenerateMatrix,
    IndexOutOfRange,
    MissingBaseline,
    ZeroVariance,
)
from .judging import ErrorCategory, ScoredTrace
from .traces import Condition, Dataset

log = logging.getLogger(__name__)

DEFAULT_SWEEP_THRESHOLDS = (0.70, 0.75, 0.80, 0.85, 0.90)

# Table rows renormalize over the three substantive categories; Other is
# excluded because the published distributions sum to ~100% without it.
DELTA_CATEGORIES = (
    ErrorCategory.CALCULATION_ERROR,
    ErrorCategory.HALLUCINATION,
    ErrorCategory.LOGICAL_LEAP,
)

_PHI = NormalDist()


# --- inter-rater agreement -----------------------------------------------------


@dataclass(frozen=True)
class RatingMatrix:
    """Item-by-category rating counts with a constant rater count per item.

    counts[i][j] is how many raters assigned item i to category j; every row
    sums to raters_per_item.
    """

    counts: tuple[tuple[int, ...], ...]
    categories: tuple[Hashable, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "counts", tuple(tuple(int(c) for c in row) for row in self.counts)
        )
        object.__setattr__(self, "categories", tuple(self.categories))
        if not self.counts:
            raise DegenerateMatrix("rating matrix needs at least one item")
        if len(self.categories) < 2:
            raise DegenerateMatrix("rating matrix needs at least two categories")
        n = sum(self.counts[0])
        if n < 2:
            raise DegenerateMatrix("each item needs at least two raters")
        for i, row in enumerate(self.counts):
            if len(row) != len(self.categories):
                raise DegenerateMatrix(f"row {i} has {len(row)} columns, expected "
                                       f"{len(self.categories)}")
            if any(c < 0 for c in row):
                raise DegenerateMatrix(f"row {i} has a negative count")
            if sum(row) != n:
                raise DegenerateMatrix(
                    f"row {i} sums to {sum(row)}, expected {n} raters per item"
                )

    @property
    def raters_per_item(self) -> int:
        return sum(self.counts[0])

    @classmethod
    def from_ratings(
        cls,
        ratings: Iterable[Sequence[Hashable]],
        categories: Optional[Sequence[Hashable]] = None,
    ) -> RatingMatrix:
        """Build the count matrix from per-item rater assignments."""
        rows = [list(r) for r in ratings]
        if categories is None:
            seen = {value for row in rows for value in row}
            categories = sorted(seen)  # type: ignore[type-var]
        categories = tuple(categories)
        index = {c: j for j, c in enumerate(categories)}
        counts = []
        for row in rows:
            buckets = [0] * len(categories)
            for value in row:
                if value not in index:
                    raise DegenerateMatrix(f"rating {value!r} outside categories")
                buckets[index[value]] += 1
            counts.append(tuple(buckets))
        return cls(counts=tuple(counts), categories=categories)


def fleiss_kappa(matrix: RatingMatrix) -> float:
    """Chance-corrected agreement for n raters over categorical items.

    With counts n_ij (item i, category j), n raters, and N items:

        P_i  = (sum_j n_ij^2 - n) / (n (n - 1))
        Pbar = mean_i P_i
        p_j  = sum_i n_ij / (N n),   Pbar_e = sum_j p_j^2
        kappa = (Pbar - Pbar_e) / (1 - Pbar_e)

    Unanimous matrices return exactly 1.0, guarding the 0/0 case where
    Pbar_e is also 1.
    """
    n = matrix.raters_per_item
    n_items = len(matrix.counts)
    p_i = [
        (math.fsum(c * c for c in row) - n) / (n * (n - 1)) for row in matrix.counts
    ]
    p_bar = math.fsum(p_i) / n_items
    if p_bar == 1.0:
        return 1.0
    totals = [
        math.fsum(row[j] for row in matrix.counts) / (n_items * n)
        for j in range(len(matrix.categories))
    ]
    p_bar_e = math.fsum(p * p for p in totals)
    return (p_bar - p_bar_e) / (1.0 - p_bar_e)


# --- effect sizes & correlation ---------------------------------------------------


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs)


def _sample_variance(xs: Sequence[float], mean: float) -> float:
    return math.fsum((x - mean) ** 2 for x in xs) / (len(xs) - 1)


def cohens_d(treatment: Sequence[float], baseline: Sequence[float]) -> float:
    """Standardized mean difference with the pooled sample deviation.

        d = (mean_t - mean_b) / s_p,
        s_p^2 = ((n_t - 1) s_t^2 + (n_b - 1) s_b^2) / (n_t + n_b - 2)

    Positive d means the treatment raised the score.
    """
    if len(treatment) < 2 or len(baseline) < 2:
        raise ValueError("cohens_d needs at least two points per sample")
    mean_t, mean_b = _mean(treatment), _mean(baseline)
    var_t = _sample_variance(treatment, mean_t)
    var_b = _sample_variance(baseline, mean_b)
    n_t, n_b = len(treatment), len(baseline)
    pooled = ((n_t - 1) * var_t + (n_b - 1) * var_b) / (n_t + n_b - 2)
    if pooled <= 0.0:
        raise ZeroVariance("pooled variance is zero; d is undefined")
    return (mean_t - mean_b) / math.sqrt(pooled)


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    """Product-moment correlation, clamped to [-1, 1] against rounding."""
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 3:
        raise ValueError("pearson_r needs at least three points")
    mean_x, mean_y = _mean(x), _mean(y)
    dx = [xi - mean_x for xi in x]
    dy = [yi - mean_y for yi in y]
    ss_x = math.fsum(d * d for d in dx)
    ss_y = math.fsum(d * d for d in dy)
    if ss_x == 0.0 or ss_y == 0.0:
        raise ConstantInput("correlation undefined for a constant input")
    r = math.fsum(a * b for a, b in zip(dx, dy)) / math.sqrt(ss_x * ss_y)
    return max(-1.0, min(1.0, r))


def posthoc_power(d: float, n1: int, n2: int, alpha: float = 0.05) -> float:
    """Two-sided post-hoc power of a two-sample test, normal approximation.

        lambda = |d| sqrt(n1 n2 / (n1 + n2))
        power  = Phi(lambda - z) + Phi(-lambda - z),  z = z_{1 - alpha/2}

    At d = 0 both tails sum back to alpha.
    """
    if n1 < 2 or n2 < 2:
        raise ValueError("posthoc_power needs n1, n2 >= 2")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    lam = abs(d) * math.sqrt(n1 * n2 / (n1 + n2))
    z = _PHI.inv_cdf(1.0 - alpha / 2.0)
    return _phi(lam - z) + _phi(-lam - z)


def _phi(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


# --- right-for-wrong-reasons tables -------------------------------------------------


@dataclass(frozen=True)
class RwrRow:
    correct_count: int
    flawed_given_correct_count: int
    rwr_rate: Optional[float]  # absent when the row has no correct answers

    def __post_init__(self):
        if self.rwr_rate is not None and not 0.0 <= self.rwr_rate <= 1.0:
            raise ValueError("rwr_rate must be in [0, 1]")


@dataclass(frozen=True)
class RwrTable:
    """Right-for-wrong-reasons rates keyed by (model, dataset).

    Marginal averages are unweighted means over the defined row rates,
    matching the printed Avg column rather than a pooled recount.
    """

    rows: Mapping[tuple[str, Dataset], RwrRow]
    model_averages: Mapping[str, Optional[float]] = field(default_factory=dict)
    dataset_averages: Mapping[Dataset, Optional[float]] = field(default_factory=dict)


def rwr_table(scored: Sequence[ScoredTrace], threshold: float = 0.8) -> RwrTable:
    """Per (model, dataset): the share of correct answers whose reasoning is
    flawed (RIS strictly below threshold)."""
    groups: dict[tuple[str, Dataset], list[ScoredTrace]] = {}
    for item in scored:
        if item.trace.answer_correct is None:
            raise ValueError(
                f"trace {item.trace.record_id} lacks answer_correct; "
                "score correctness before tabulating"
            )
        groups.setdefault((item.trace.model, item.trace.dataset), []).append(item)

    rows = {}
    for key in sorted(groups, key=lambda k: (k[0], k[1].value)):
        items = groups[key]
        correct = [s for s in items if s.trace.answer_correct]
        flawed = [s for s in correct if s.ris < threshold]
        rate = len(flawed) / len(correct) if correct else None
        rows[key] = RwrRow(
            correct_count=len(correct),
            flawed_given_correct_count=len(flawed),
            rwr_rate=rate,
        )

    def unweighted(rates: list[Optional[float]]) -> Optional[float]:
        defined = [r for r in rates if r is not None]
        return _mean(defined) if defined else None

    models = sorted({model for model, _ in rows})
    datasets = sorted({dataset for _, dataset in rows}, key=lambda d: d.value)
    model_averages = {
        m: unweighted([row.rwr_rate for (model, _), row in rows.items() if model == m])
        for m in models
    }
    dataset_averages = {
        d: unweighted([row.rwr_rate for (_, dataset), row in rows.items() if dataset == d])
        for d in datasets
    }
    return RwrTable(rows=rows, model_averages=model_averages, dataset_averages=dataset_averages)


@dataclass(frozen=True)
class SweepPoint:
    threshold: float
    flagged_fraction: float
    rwr_rate: Optional[float]  # pooled over all correct traces; absent if none


def threshold_sweep(
    scored: Sequence[ScoredTrace],
    thresholds: Sequence[float] = DEFAULT_SWEEP_THRESHOLDS,
) -> list[SweepPoint]:
    """Flagged fraction and pooled RWR rate at each candidate threshold.

    The flawed test is strictly RIS < t, so a trace sitting exactly at a
    threshold is never flagged by it.
    """
    if not scored:
        raise ValueError("threshold_sweep needs a nonempty corpus")
    correct = [s for s in scored if s.trace.answer_correct]
    points = []
    for t in sorted(thresholds):
        flagged = sum(1 for s in scored if s.ris < t)
        rwr = (
            sum(1 for s in correct if s.ris < t) / len(correct) if correct else None
        )
        points.append(
            SweepPoint(threshold=t, flagged_fraction=flagged / len(scored), rwr_rate=rwr)
        )
    return points


# --- error taxonomy tables ------------------------------------------------------------


@dataclass(frozen=True)
class ErrorDeltaTable:
    """Per-condition error-category distribution and its shift vs baseline.

    Percentages are renormalized over the three substantive categories
    (Other excluded); deltas are percentage points, baseline deltas all zero.
    """

    distributions: Mapping[Condition, Mapping[ErrorCategory, float]]
    deltas: Mapping[Condition, Mapping[ErrorCategory, float]]


def error_delta_table(
    labels_by_condition: Mapping[Condition, Iterable[ErrorCategory]],
) -> ErrorDeltaTable:
    if Condition.BASELINE not in labels_by_condition:
        raise MissingBaseline("error deltas need a baseline condition")

    distributions: dict[Condition, dict[ErrorCategory, float]] = {}
    for condition, labels in labels_by_condition.items():
        counts = {category: 0 for category in DELTA_CATEGORIES}
        for label in labels:
            if label in counts:
                counts[label] += 1
        total = sum(counts.values())
        if total == 0:
            if condition is Condition.BASELINE:
                raise MissingBaseline(
                    "baseline has no labels in the substantive categories"
                )
            raise ValueError(
                f"condition {condition.value} has no labels in the substantive "
                "categories; cannot renormalize"
            )
        distributions[condition] = {
            category: 100.0 * counts[category] / total for category in DELTA_CATEGORIES
        }

    baseline = distributions[Condition.BASELINE]
    deltas = {
        condition: {
            category: dist[category] - baseline[category]
            for category in DELTA_CATEGORIES
        }
        for condition, dist in distributions.items()
    }
    return ErrorDeltaTable(distributions=distributions, deltas=deltas)


def error_position(scored: ScoredTrace, flawed_step_index: int) -> float:
    """Position of a flawed step normalized to [0, 1].

    (index - 1) / (n - 1) for traces of n >= 2 steps; single-step traces sit
    at the 0.5 midpoint by convention.
    """
    n_steps = len(scored.trace.steps)
    if not 1 <= flawed_step_index <= n_steps:
        raise IndexOutOfRange(
            f"step index {flawed_step_index} outside 1..{n_steps}"
        )
    if n_steps == 1:
        return 0.5
    return (flawed_step_index - 1) / (n_steps - 1)


# --- intervention effect sizes ----------------------------------------------------------


@dataclass(frozen=True)
class EffectSizeRow:
    model: str
    dataset: Dataset
    intervention: Condition
    d: float
    n_treatment: int
    n_baseline: int
    power: float


def effect_sizes(
    scored: Sequence[ScoredTrace], alpha: float = 0.05
) -> list[EffectSizeRow]:
    """Cohen's d of each intervention's RIS against baseline, with post-hoc
    power, per (model, dataset).

    Groups lacking a baseline, with fewer than two points on either side, or
    with zero pooled variance are skipped with a warning; the published
    figure omits undefined bars the same way.
    """
    samples: dict[tuple[str, Dataset, Condition], list[float]] = {}
    for item in scored:
        key = (item.trace.model, item.trace.dataset, item.trace.condition)
        samples.setdefault(key, []).append(item.ris)

    pairs = sorted(
        {(model, dataset) for model, dataset, _ in samples},
        key=lambda k: (k[0], k[1].value),
    )
    rows = []
    for model, dataset in pairs:
        baseline = samples.get((model, dataset, Condition.BASELINE))
        for condition in (Condition.RAG, Condition.SELF_CRITIQUE, Condition.VERIFICATION):
            treatment = samples.get((model, dataset, condition))
            if treatment is None:
                continue
            if baseline is None:
                log.warning(
                    "skipping %s/%s/%s: no baseline sample",
                    model, dataset.value, condition.value,
                )
                continue
            if len(treatment) < 2 or len(baseline) < 2:
                log.warning(
                    "skipping %s/%s/%s: fewer than two points per side",
                    model, dataset.value, condition.value,
                )
                continue
            try:
                d = cohens_d(treatment, baseline)
            except ZeroVariance:
                log.warning(
                    "skipping %s/%s/%s: zero pooled variance",
                    model, dataset.value, condition.value,
                )
                continue
            rows.append(
                EffectSizeRow(
                    model=model,
                    dataset=dataset,
                    intervention=condition,
                    d=d,
                    n_treatment=len(treatment),
                    n_baseline=len(baseline),
                    power=posthoc_power(d, len(treatment), len(baseline), alpha),
                )
            )
    return rows
