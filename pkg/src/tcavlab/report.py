"""Result persistence and rendering: JSON results, CSV, text table, SVG bars."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .concepts import COLOR_REFERENCES
from .formats import atomic_write
from .tcav import TcavResult

CSV_COLUMNS = ("concept", "class", "layer", "mean_score", "p_value", "significant", "n_runs", "mean_cav_accuracy")

RESULTS_FORMAT = "tcavlab-results/1"

_PALETTE = ("#4e79a7", "#f28e2b", "#59a14f", "#b07aa1", "#76b7b2", "#edc948", "#ff9da7", "#9c755f", "#bab0ac")


class ResultsError(ValueError):
    pass


def _json_float(x):
    """JSON has no NaN/inf: NaN -> null, +-inf -> "inf"/"-inf"."""
    x = float(x)
    if math.isnan(x):
        return None
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _opt_float(v) -> float:
    return float("nan") if v is None else float(v)


def results_to_json(results: Sequence[TcavResult], complete: bool, class_names: Sequence[str] = ()) -> str:
    records = []
    for r in results:
        rec = r.to_record()
        for key in ("mean_score", "t_statistic", "degrees_of_freedom", "p_value", "mean_cav_accuracy"):
            rec[key] = _json_float(rec[key])
        records.append(rec)
    doc = {"format": RESULTS_FORMAT, "complete": bool(complete), "class_names": list(class_names), "results": records}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_results(path, results, complete: bool, class_names=()) -> None:
    atomic_write(path, results_to_json(results, complete, class_names).encode("utf-8"))


_REQUIRED = ("concept_name", "class_k", "layer_name", "concept_scores", "random_scores", "mean_score", "p_value",
             "significant", "alpha", "m")


def read_results(path) -> tuple[list[TcavResult], dict]:
    """Parse a results file; raises ResultsError naming the first bad record."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ResultsError(f"results file {path} not found") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ResultsError(f"results file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("results"), list):
        raise ResultsError(f"results file {path} has no 'results' list")
    out = []
    for i, rec in enumerate(doc["results"]):
        if not isinstance(rec, dict):
            raise ResultsError(f"record {i} is not an object")
        missing = [k for k in _REQUIRED if k not in rec]
        if missing:
            raise ResultsError(f"record {i} ({rec.get('concept_name', '?')}) is missing {', '.join(missing)}")
        try:
            res = TcavResult(
                concept_name=str(rec["concept_name"]),
                class_k=int(rec["class_k"]),
                layer_name=str(rec["layer_name"]),
                concept_scores=[float(v) for v in rec["concept_scores"]],
                random_scores=[float(v) for v in rec["random_scores"]],
                mean_score=_opt_float(rec["mean_score"]),
                t_statistic=_opt_float(rec.get("t_statistic")),
                degrees_of_freedom=_opt_float(rec.get("degrees_of_freedom")),
                p_value=float(rec["p_value"]),
                significant=bool(rec["significant"]),
                alpha=float(rec["alpha"]),
                m=int(rec["m"]),
                mean_cav_accuracy=_opt_float(rec.get("mean_cav_accuracy")),
                dropped_runs=[int(v) for v in rec.get("dropped_runs", [])],
                testable=bool(rec.get("testable", True)),
            )
        except (TypeError, ValueError) as exc:
            raise ResultsError(f"record {i} ({rec.get('concept_name', '?')}): {exc}") from None
        if not 0.0 <= res.p_value <= 1.0:
            raise ResultsError(f"record {i} ({res.concept_name}): p_value {res.p_value} outside [0, 1]")
        out.append(res)
    return out, {k: v for k, v in doc.items() if k != "results"}


def _class_label(k: int, class_names: Sequence[str]) -> str:
    return class_names[k] if 0 <= k < len(class_names) else str(k)


def _fmt(x: float, spec: str) -> str:
    return "nan" if x is None or math.isnan(x) else format(x, spec)


def results_to_csv(results: Sequence[TcavResult], class_names: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in results:
        writer.writerow([
            r.concept_name,
            _class_label(r.class_k, class_names),
            r.layer_name,
            _fmt(r.mean_score, ".6f"),
            _fmt(r.p_value, ".6g"),
            "true" if r.significant else "false",
            r.n_runs,
            _fmt(r.mean_cav_accuracy, ".6f"),
        ])
    return buf.getvalue()


def results_table(results: Sequence[TcavResult], class_names: Sequence[str] = ()) -> str:
    header = ("class", "layer", "concept", "score", "p", "sig", "runs", "cav_acc")
    rows = [
        (
            _class_label(r.class_k, class_names),
            r.layer_name,
            r.concept_name,
            _fmt(r.mean_score, ".3f"),
            _fmt(r.p_value, ".3g"),
            "yes" if r.significant else "*",
            str(r.n_runs),
            _fmt(r.mean_cav_accuracy, ".3f"),
        )
        for r in results
    ]
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows)
    return "\n".join(lines) + "\n"


def _concept_color(name: str, i: int) -> str:
    if name in COLOR_REFERENCES:
        r, g, b = (int(round(c * 255)) for c in COLOR_REFERENCES[name])
        return f"#{r:02x}{g:02x}{b:02x}"
    return _PALETTE[i % len(_PALETTE)]


def bar_chart_svg(results: Sequence[TcavResult], title: str = "") -> str:
    """Grouped bars: one group per layer, one bar per concept.

    Bar height is the mean TCAV score; a star marks bars whose scores did
    not pass the significance test.
    """
    layers: list[str] = []
    concepts: list[str] = []
    for r in results:
        if r.layer_name not in layers:
            layers.append(r.layer_name)
        if r.concept_name not in concepts:
            concepts.append(r.concept_name)
    lookup = {(r.layer_name, r.concept_name): r for r in results}

    bar_w, gap, margin_l, margin_t, plot_h = 22, 18, 50, 40, 200
    group_w = max(len(concepts), 1) * bar_w + gap
    width = margin_l + max(len(layers), 1) * group_w + 20 + 110
    height = margin_t + plot_h + 60
    base_y = margin_t + plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
    ]
    if title:
        out.append(f'<text x="{margin_l}" y="18" font-size="13">{escape(title)}</text>')
    for tick in range(0, 11, 2):
        v = tick / 10
        y = base_y - v * plot_h
        out.append(f'<line x1="{margin_l - 4}" y1="{y:.1f}" x2="{margin_l + len(layers) * group_w}" y2="{y:.1f}" stroke="#dddddd"/>')
        out.append(f'<text x="{margin_l - 8}" y="{y + 3:.1f}" text-anchor="end">{v:.1f}</text>')
    out.append(f'<line x1="{margin_l}" y1="{margin_t}" x2="{margin_l}" y2="{base_y}" stroke="#000000"/>')
    for li, layer in enumerate(layers):
        gx = margin_l + li * group_w + gap / 2
        for ci, concept in enumerate(concepts):
            r = lookup.get((layer, concept))
            if r is None:
                continue
            score = 0.0 if math.isnan(r.mean_score) else r.mean_score
            label = f"{score:.3f}"
            x = gx + ci * bar_w
            h = round(score, 3) * plot_h
            out.append(
                f'<rect x="{x:.1f}" y="{base_y - h:.1f}" width="{bar_w - 4}" height="{h:.1f}" '
                f'fill="{_concept_color(concept, ci)}" stroke="#333333" stroke-width="0.5" '
                f'data-concept="{escape(concept)}" data-layer="{escape(layer)}" data-score="{label}" '
                f'data-significant="{"true" if r.significant else "false"}"/>'
            )
            out.append(
                f'<text x="{x + (bar_w - 4) / 2:.1f}" y="{base_y - h - 3:.1f}" text-anchor="middle" '
                f'font-size="7">{label}</text>'
            )
            if not r.significant:
                out.append(
                    f'<text class="star" x="{x + (bar_w - 4) / 2:.1f}" y="{base_y - h - 12:.1f}" '
                    f'text-anchor="middle" font-size="12">*</text>'
                )
        out.append(
            f'<text x="{gx + len(concepts) * bar_w / 2:.1f}" y="{base_y + 16}" text-anchor="middle">{escape(layer)}</text>'
        )
    lx = margin_l + len(layers) * group_w + 20
    for ci, concept in enumerate(concepts):
        y = margin_t + ci * 16
        out.append(f'<rect x="{lx}" y="{y}" width="10" height="10" fill="{_concept_color(concept, ci)}"/>')
        out.append(f'<text x="{lx + 14}" y="{y + 9}">{escape(concept)}</text>')
    out.append(f'<text x="{margin_l}" y="{height - 12}" font-size="9">* not significant</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def charts_by_class(results: Sequence[TcavResult], class_names: Sequence[str] = ()) -> dict[str, str]:
    """One SVG per class, keyed by class label."""
    classes = sorted({r.class_k for r in results})
    return {
        _class_label(k, class_names): bar_chart_svg(
            [r for r in results if r.class_k == k], f"TCAV scores for class {_class_label(k, class_names)}"
        )
        for k in classes
    }
