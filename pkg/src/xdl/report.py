"""Combined run summaries and SVG grouped bar charts."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape, quoteattr

from .distill import ABLATION_ROWS


class ReportInputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# summary tables
# ---------------------------------------------------------------------------


def _load_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise ReportInputError(f"{path}: file not found") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ReportInputError(f"{path}: corrupt JSON ({exc})") from None


def _load_gap(path: Path) -> dict:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        labels = {int(r["class_id"]): int(r["label"]) for r in rows}
        margins = {int(r["class_id"]): float(r["margin"]) for r in rows}
    except FileNotFoundError:
        raise ReportInputError(f"{path}: file not found") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ReportInputError(f"{path}: not a gap-label table ({exc})") from None
    if not labels:
        raise ReportInputError(f"{path}: gap-label table has no rows")
    return {
        "source": path.name,
        "classes": len(labels),
        "positive": sorted(c for c, v in labels.items() if v == 1),
        "mean_margin": sum(margins.values()) / len(margins),
    }


def _is_report(d: dict) -> bool:
    return {"model", "split", "overall", "classes"} <= d.keys()


def _is_outcome(d: dict) -> bool:
    return {"config", "splits"} <= d.keys()


def _outcome_rows(name: str, d: dict) -> list[dict]:
    return [
        {
            "name": name,
            "student_modality": d.get("student_modality", ""),
            "split": split,
            "before": s["before"],
            "after": s["after"],
            "gain": s["gain"],
            "distill_fraction": d.get("distill_fraction"),
        }
        for split, s in sorted(d["splits"].items())
    ]


def _ablation_table(directory: Path) -> list[dict]:
    rows = []
    for name in ABLATION_ROWS:
        path = directory / f"{name}.json"
        if not path.exists():
            continue
        d = _load_json(path)
        if not _is_outcome(d):
            raise ReportInputError(f"{path}: not a distillation outcome")
        rows.append({"setting": name, **{f"{s}_accuracy": v["after"] for s, v in sorted(d["splits"].items())}})
    if not rows:
        raise ReportInputError(f"{directory}: no ablation outcomes (expected files named after {list(ABLATION_ROWS)})")
    return rows


def build_summary(paths: Sequence) -> dict:
    """Sort each input into model reports, distillation outcomes, ablation rows or gap labels."""
    if not paths:
        raise ReportInputError("no report inputs given")
    summary: dict = {"models": [], "distillation": [], "ablation": [], "gap": []}
    for raw in paths:
        path = Path(raw)
        if path.is_dir():
            summary["ablation"] = _ablation_table(path)
        elif path.suffix == ".csv":
            summary["gap"].append(_load_gap(path))
        else:
            d = _load_json(path)
            if _is_report(d):
                summary["models"].append(
                    {"name": d["model"], "modality": d["modality"], "split": d["split"], "overall": d["overall"]}
                )
            elif _is_outcome(d):
                summary["distillation"].extend(_outcome_rows(path.stem, d))
            else:
                raise ReportInputError(f"{path}: neither a class-wise report nor a distillation outcome")
    summary["models"].sort(key=lambda r: (r["name"], r["split"]))
    summary["distillation"].sort(key=lambda r: (r["name"], r["split"]))
    summary["gap"].sort(key=lambda r: r["source"])
    return summary


def summary_csv(summary: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["section", "name", "split", "metric", "value"])
    for r in summary["models"]:
        w.writerow(["model", r["name"], r["split"], "overall", f"{r['overall']:.6f}"])
    for r in summary["distillation"]:
        for metric in ("before", "after", "gain"):
            w.writerow(["distill", r["name"], r["split"], metric, f"{r[metric]:.6f}"])
    for r in summary["ablation"]:
        for key, v in r.items():
            if key != "setting":
                w.writerow(["ablation", r["setting"], key.removesuffix("_accuracy"), "accuracy", f"{v:.6f}"])
    for g in summary["gap"]:
        w.writerow(["gap", g["source"], "analysis", "positive_classes", len(g["positive"])])
        w.writerow(["gap", g["source"], "analysis", "mean_margin", f"{g['mean_margin']:.6f}"])
    return buf.getvalue()


def emit_report(paths: Sequence, out_dir, stem: str = "summary") -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.json`` into ``out_dir``; output depends only on the inputs."""
    summary = build_summary(paths)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    csv_path.write_text(summary_csv(summary))
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


# ---------------------------------------------------------------------------
# charts
# ---------------------------------------------------------------------------

PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c")

BAR_W = 8.0
GROUP_GAP = 10.0
PLOT_H = 240.0
LEFT, RIGHT, TOP, BOTTOM = 56.0, 16.0, 40.0, 110.0
LEGEND_W = 120.0


def _f(x: float) -> str:
    return f"{x:.2f}"


def emit_chart(
    categories: Sequence[str],
    series: Mapping[str, Sequence[float]],
    title: str = "",
    path=None,
) -> str:
    """Grouped bars, one group per category and one bar per series; values are fractions in [0, 1].

    The y axis always spans 0 to 100%. The same inputs give the same bytes.
    """
    if not categories:
        raise ValueError("chart needs at least one class")
    if not series:
        raise ValueError("chart needs at least one series")
    n_cat, n_ser = len(categories), len(series)
    for name, vals in series.items():
        if len(vals) != n_cat:
            raise ValueError(f"series {name!r} has {len(vals)} values for {n_cat} classes")
        for v in vals:
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueError(f"series {name!r}: value {v!r} outside [0, 1]")

    group_w = n_ser * BAR_W + GROUP_GAP
    width = max(LEFT + n_cat * group_w, LEFT + n_ser * LEGEND_W) + RIGHT
    height = TOP + PLOT_H + BOTTOM
    base_y = TOP + PLOT_H
    plot_right = LEFT + n_cat * group_w
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(width)}" height="{_f(height)}" '
        f'viewBox="0 0 {_f(width)} {_f(height)}" font-family="sans-serif" font-size="10">',
        f'<rect x="0" y="0" width="{_f(width)}" height="{_f(height)}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{_f(width / 2)}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>')

    out.append('<g class="axis">')
    for pct in (0, 25, 50, 75, 100):
        y = base_y - PLOT_H * pct / 100
        out.append(f'<line x1="{_f(LEFT)}" y1="{_f(y)}" x2="{_f(plot_right)}" y2="{_f(y)}" stroke="#dddddd"/>')
        out.append(f'<text x="{_f(LEFT - 6)}" y="{_f(y + 3)}" text-anchor="end">{pct}%</text>')
    out.append(f'<line x1="{_f(LEFT)}" y1="{_f(TOP)}" x2="{_f(LEFT)}" y2="{_f(base_y)}" stroke="black"/>')
    out.append(f'<line x1="{_f(LEFT)}" y1="{_f(base_y)}" x2="{_f(plot_right)}" y2="{_f(base_y)}" stroke="black"/>')
    out.append("</g>")

    out.append('<g class="bars">')
    for i, cat in enumerate(categories):
        x0 = LEFT + GROUP_GAP / 2 + i * group_w
        for j, (name, vals) in enumerate(series.items()):
            h = PLOT_H * float(vals[i])
            out.append(
                f'<rect class="bar" data-series={quoteattr(name)} data-class={quoteattr(str(cat))} '
                f'x="{_f(x0 + j * BAR_W)}" y="{_f(base_y - h)}" width="{_f(BAR_W)}" height="{_f(h)}" '
                f'fill="{PALETTE[j % len(PALETTE)]}"/>'
            )
        cx = x0 + n_ser * BAR_W / 2
        out.append(
            f'<text x="{_f(cx)}" y="{_f(base_y + 8)}" text-anchor="end" '
            f'transform="rotate(-60 {_f(cx)} {_f(base_y + 8)})">{escape(str(cat))}</text>'
        )
    out.append("</g>")

    out.append('<g class="legend">')
    for j, name in enumerate(series):
        x = LEFT + j * LEGEND_W
        out.append(
            f'<g class="legend-entry"><rect x="{_f(x)}" y="24" width="10" height="10" '
            f'fill="{PALETTE[j % len(PALETTE)]}"/><text x="{_f(x + 14)}" y="33">{escape(name)}</text></g>'
        )
    out.append("</g>")
    out.append("</svg>")
    svg = "\n".join(out) + "\n"
    if path is not None:
        Path(path).write_text(svg)
    return svg


def gap_chart(gap, reports: Mapping[str, object], k: int, class_names: Sequence[str], path=None) -> str:
    """Per-class accuracies for the top-``k`` classes of each gap category."""
    from .gap import gap_chart_data

    picks = gap_chart_data(gap, k)
    order = picks["student_better"] + picks["comparable"] + picks["teacher_better"]
    series = {tag: [r.accuracy[c] for c in order] for tag, r in reports.items()}
    return emit_chart([class_names[c] for c in order], series, "class-wise accuracy by gap category", path)


def outcome_chart(outcome, split: str, class_names: Sequence[str], path=None) -> str:
    """Before/after accuracy per class for one distillation run."""
    b, a = outcome.before[split], outcome.after[split]
    classes = b.classes()
    return emit_chart(
        [class_names[c] for c in classes],
        {"before": [b.accuracy[c] for c in classes], "after": [a.accuracy[c] for c in classes]},
        f"{outcome.student_before.modality} student before and after distillation ({split})",
        path,
    )
