"""Report JSON assembly, scores CSV export, and deterministic ROC SVG rendering."""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import numpy as np

from .evaluate import EvalReport, ScoreSet

REPORT_SCHEMA = 1


def _versions() -> dict:
    from . import __version__

    return {
        "auricle": __version__,
        "numpy": np.__version__,
        "python": sys.version.split()[0],
    }


def _stats_row(stats) -> dict | None:
    return None if stats is None else stats.as_table_row()


def report_to_dict(report: EvalReport, config: dict) -> dict:
    experiments = []
    for exp in report.experiments:
        if exp.flag is not None:
            experiments.append({
                "protocol": exp.protocol,
                "flag": exp.flag,
                "threshold": None,
                "counts": None,
                "tar": None,
                "far": None,
                "eer": None,
                "roc": [],
                "per_gap": {},
                "per_age_group": {},
            })
            continue
        rates = exp.rates
        experiments.append({
            "protocol": exp.protocol,
            "flag": None,
            "threshold": rates.threshold,
            "reject_all": rates.threshold is None,
            "counts": {"ta": rates.ta, "fr": rates.fr, "fa": rates.fa, "tr": rates.tr},
            "tar": rates.tar,
            "far": rates.far,
            "eer": exp.eer,
            "roc": [[f, t] for f, t in exp.roc],
            "per_gap": {str(gap): _stats_row(s) for gap, s in exp.per_gap.items()},
            "per_age_group": {g: _stats_row(s) for g, s in exp.per_age_group.items()},
        })
    return {
        "schema": REPORT_SCHEMA,
        "config": config,
        "experiments": experiments,
        "per_gap": {str(gap): _stats_row(s) for gap, s in report.per_gap.items()},
        "per_age_group": {g: _stats_row(s) for g, s in report.per_age_group.items()},
        "notes": list(report.notes),
        "versions": _versions(),
    }


def write_report_json(report_dict: dict, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_dict, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_scores_csv(scoresets: dict, path):
    """Concatenate all experiments' trials into the raw scores CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["enroll_key", "probe_key", "genuine", "gap_months",
                         "age_group", "distance"])
        for scores in scoresets.values():
            for trial, dist in zip(scores.trials, scores.distances):
                writer.writerow([
                    trial.enroll_key,
                    trial.probe_key,
                    "true" if trial.genuine else "false",
                    trial.gap_months,
                    trial.age_group,
                    repr(float(dist)),
                ])


def write_coordinates_csv(coords_by_key: dict, path):
    """Optional projection dump: record_key,y1,...,yk."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_components = len(next(iter(coords_by_key.values())))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["record_key"] + [f"y{i + 1}" for i in range(n_components)])
        for key, row in coords_by_key.items():
            writer.writerow([key] + [repr(float(v)) for v in row])


# --- ROC SVG --------------------------------------------------------------------

_SVG_SIZE = 480
_SVG_MARGIN = 48


def _sx(v: float) -> str:
    return f"{_SVG_MARGIN + v * (_SVG_SIZE - 2 * _SVG_MARGIN):.2f}"


def _sy(v: float) -> str:
    return f"{_SVG_SIZE - _SVG_MARGIN - v * (_SVG_SIZE - 2 * _SVG_MARGIN):.2f}"


def emit_roc_svg(points, eer: float, path, title: str = "ROC"):
    """Write a standalone, deterministic ROC SVG with the EER point marked."""
    if len(points) < 2:
        raise ValueError("degenerate curve: need at least 2 roc points")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    poly = " ".join(f"{_sx(f)},{_sy(t)}" for f, t in points)
    ticks = []
    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        ticks.append(
            f'<text x="{_sx(v)}" y="{_SVG_SIZE - _SVG_MARGIN + 16}" '
            f'font-size="10" text-anchor="middle">{v:g}</text>'
        )
        ticks.append(
            f'<text x="{_SVG_MARGIN - 8}" y="{_sy(v)}" '
            f'font-size="10" text-anchor="end" dominant-baseline="middle">{v:g}</text>'
        )
    body = f"""<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_SIZE}" height="{_SVG_SIZE}" viewBox="0 0 {_SVG_SIZE} {_SVG_SIZE}">
<rect x="{_SVG_MARGIN}" y="{_SVG_MARGIN}" width="{_SVG_SIZE - 2 * _SVG_MARGIN}" height="{_SVG_SIZE - 2 * _SVG_MARGIN}" fill="white" stroke="black"/>
<line x1="{_sx(0.0)}" y1="{_sy(0.0)}" x2="{_sx(1.0)}" y2="{_sy(1.0)}" stroke="#bbbbbb" stroke-dasharray="4 4"/>
<polyline points="{poly}" fill="none" stroke="#1f6fb2" stroke-width="1.5"/>
<circle cx="{_sx(eer)}" cy="{_sy(1.0 - eer)}" r="4" fill="#c23b22"/>
<text x="{_SVG_SIZE / 2:.0f}" y="24" font-size="14" text-anchor="middle">{title} (EER={eer:.4f})</text>
<text x="{_SVG_SIZE / 2:.0f}" y="{_SVG_SIZE - 8}" font-size="12" text-anchor="middle">FAR</text>
<text x="14" y="{_SVG_SIZE / 2:.0f}" font-size="12" text-anchor="middle" transform="rotate(-90 14 {_SVG_SIZE / 2:.0f})">TAR</text>
{chr(10).join(ticks)}
</svg>
"""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(body)
