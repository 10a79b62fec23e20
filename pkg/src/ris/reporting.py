"""Reporting edge: CSV tables and a self-contained SVG of effect sizes.

Everything here is a pure function of its inputs so re-running a report on
identical data produces byte-identical artifacts.
"""

from __future__ import annotations

import csv
import logging
import os
from typing import Optional, Sequence

from .judging import DEFAULT_THRESHOLD, ScoredTrace
from .stats import (
    DELTA_CATEGORIES,
    EffectSizeRow,
    ErrorDeltaTable,
    rwr_table,
)
from .traces import Condition

log = logging.getLogger(__name__)

RWR_COLUMNS = ["model", "dataset", "correct_count", "flawed_given_correct_count", "rwr_rate"]
DELTA_COLUMNS = ["condition", "category", "share_pct", "delta_pp"]
EFFECT_COLUMNS = ["model", "dataset", "intervention", "d", "n_treatment", "n_baseline", "power"]

# Positive d (intervention raised RIS) draws red, negative blue.
_POSITIVE_FILL = "#c0392b"
_NEGATIVE_FILL = "#2980b9"


def write_rwr_csv(path: str, scored: Sequence[ScoredTrace], threshold: float = DEFAULT_THRESHOLD) -> None:
    table = rwr_table(scored, threshold) if scored else None
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RWR_COLUMNS)
        if table is None:
            return
        for (model, dataset), row in table.rows.items():
            writer.writerow(
                [
                    model,
                    dataset.value,
                    row.correct_count,
                    row.flawed_given_correct_count,
                    "" if row.rwr_rate is None else repr(row.rwr_rate),
                ]
            )


def write_error_deltas_csv(path: str, table: Optional[ErrorDeltaTable]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DELTA_COLUMNS)
        if table is None:
            return
        order = list(Condition)
        for condition in sorted(table.distributions, key=order.index):
            for category in DELTA_CATEGORIES:
                writer.writerow(
                    [
                        condition.value,
                        category.value,
                        repr(table.distributions[condition][category]),
                        repr(table.deltas[condition][category]),
                    ]
                )


def write_effect_sizes_csv(path: str, effects: Sequence[EffectSizeRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EFFECT_COLUMNS)
        for row in effects:
            writer.writerow(
                [
                    row.model,
                    row.dataset.value,
                    row.intervention.value,
                    repr(row.d),
                    row.n_treatment,
                    row.n_baseline,
                    repr(row.power),
                ]
            )


def render_effects_svg(
    effects: Sequence[EffectSizeRow], manifest_digest: Optional[str] = None
) -> str:
    """Grouped bar chart of Cohen's d per model x dataset x intervention.

    Bars grow up from the zero line for positive d and down for negative d;
    each rect carries data-* attributes so the chart is machine-checkable.
    """
    margin_left, margin_top = 70.0, 40.0
    margin_right, margin_bottom = 30.0, 80.0
    plot_h = 260.0
    bar_w, bar_gap, group_gap = 26.0, 6.0, 30.0

    groups: dict[tuple[str, str], list[EffectSizeRow]] = {}
    for row in effects:
        groups.setdefault((row.model, row.dataset.value), []).append(row)

    n_bars = len(effects)
    n_groups = len(groups)
    plot_w = max(
        200.0,
        n_bars * (bar_w + bar_gap) + max(n_groups - 1, 0) * group_gap,
    )
    width = margin_left + plot_w + margin_right
    height = margin_top + plot_h + margin_bottom

    d_values = [row.d for row in effects]
    d_max = max([0.0] + d_values)
    d_min = min([0.0] + d_values)
    span = d_max - d_min
    if span == 0.0:
        span = 1.0

    def y_of(value: float) -> float:
        return margin_top + (d_max - value) / span * plot_h

    zero_y = y_of(0.0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{height:.0f}" viewBox="0 0 {width:.0f} {height:.0f}" '
        f'font-family="sans-serif">'
    ]
    if manifest_digest is not None:
        parts.append(f"<!-- manifest: {manifest_digest} -->")
    parts.append(
        '<text x="10" y="20" font-size="14">Intervention effect sizes '
        "(Cohen's d on RIS vs baseline)</text>"
    )
    parts.append(
        f'<line id="zero-line" x1="{margin_left:.2f}" y1="{zero_y:.2f}" '
        f'x2="{margin_left + plot_w:.2f}" y2="{zero_y:.2f}" '
        'stroke="#333" stroke-width="1"/>'
    )
    for tick in sorted({d_min, 0.0, d_max}):
        ty = y_of(tick)
        parts.append(
            f'<text x="{margin_left - 8:.2f}" y="{ty + 4:.2f}" font-size="10" '
            f'text-anchor="end">{tick:+.2f}</text>'
        )

    if not effects:
        parts.append(
            f'<text x="{margin_left + plot_w / 2:.2f}" y="{zero_y - 10:.2f}" '
            'font-size="12" text-anchor="middle" class="empty">no effect sizes</text>'
        )

    x = margin_left + bar_gap
    for (model, dataset), rows in groups.items():
        group_start = x
        for row in rows:
            if row.d >= 0:
                top = y_of(row.d)
                bar_h = zero_y - top
                cls, fill = "bar positive", _POSITIVE_FILL
            else:
                top = zero_y
                bar_h = y_of(row.d) - zero_y
                cls, fill = "bar negative", _NEGATIVE_FILL
            parts.append(
                f'<rect class="{cls}" x="{x:.2f}" y="{top:.2f}" '
                f'width="{bar_w:.2f}" height="{bar_h:.2f}" fill="{fill}" '
                f'data-model="{model}" data-dataset="{dataset}" '
                f'data-intervention="{row.intervention.value}" '
                f'data-d="{row.d!r}">'
                f"<title>{model} {dataset} {row.intervention.value}: "
                f"d={row.d:.3f}, power={row.power:.3f} "
                f"(n={row.n_treatment}/{row.n_baseline})</title></rect>"
            )
            parts.append(
                f'<text x="{x + bar_w / 2:.2f}" y="{margin_top + plot_h + 14:.2f}" '
                f'font-size="9" text-anchor="middle">{row.intervention.value[:4]}</text>'
            )
            x += bar_w + bar_gap
        center = (group_start + x - bar_gap) / 2
        parts.append(
            f'<text x="{center:.2f}" y="{margin_top + plot_h + 30:.2f}" '
            f'font-size="10" text-anchor="middle">{model} / {dataset}</text>'
        )
        x += group_gap
    parts.append("</svg>")
    return "\n".join(parts)


def write_report(
    scored: Sequence[ScoredTrace],
    deltas: Optional[ErrorDeltaTable],
    effects: Sequence[EffectSizeRow],
    out_dir: str,
    threshold: float = DEFAULT_THRESHOLD,
    manifest_digest: Optional[str] = None,
) -> dict[str, str]:
    """Write the four report artifacts; returns {artifact name: path}."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "rwr_table": os.path.join(out_dir, "rwr_table.csv"),
        "error_deltas": os.path.join(out_dir, "error_deltas.csv"),
        "effect_sizes": os.path.join(out_dir, "effect_sizes.csv"),
        "effects_svg": os.path.join(out_dir, "effects.svg"),
    }
    write_rwr_csv(paths["rwr_table"], scored, threshold)
    write_error_deltas_csv(paths["error_deltas"], deltas)
    write_effect_sizes_csv(paths["effect_sizes"], effects)
    with open(paths["effects_svg"], "w", encoding="utf-8") as fh:
        fh.write(render_effects_svg(effects, manifest_digest))
    return paths
