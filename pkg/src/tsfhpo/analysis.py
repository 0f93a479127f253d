"""Post-hoc analysis of stored trials.

Everything here is a pure function of the records; writers only emit files
under a report directory and never touch ``trials.jsonl``.
"""

from __future__ import annotations

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .forecast.models import HParams
from .hyperspace import CANONICAL_ORDER, SearchSpace
from .records import FAILED_OOM, EpochRecord, TrialRecord

UNDERFIT = "underfit"
OVERFIT = "overfit"
CONVERGED = "converged"
INCONCLUSIVE = "inconclusive"

GAP_TOLERANCE = 0.05
FLAT_TOLERANCE = 0.01
TRIM_PERCENTILE = 95.0
DASH = "—"


class AnalysisError(ValueError):
    pass


def _completed(records: Iterable[TrialRecord]) -> list[TrialRecord]:
    return [r for r in records if r.completed]


def _param_order(records: Sequence[TrialRecord], names: Sequence[str] | None = None) -> list[str]:
    if names is not None:
        return list(names)
    seen: list[str] = []
    for r in records:
        for k in r.params:
            if k not in seen:
                seen.append(k)
    canon = [n for n in CANONICAL_ORDER if n in seen]
    return canon + [n for n in seen if n not in canon]


# --- parallel coordinates --------------------------------------------------

_PALETTE = ((68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37))


def _color(t: float) -> str:
    """Map t in [0, 1] onto a five-stop sequential palette."""
    t = min(1.0, max(0.0, t)) * (len(_PALETTE) - 1)
    i = min(int(t), len(_PALETTE) - 2)
    f = t - i
    rgb = [round(a + (b - a) * f) for a, b in zip(_PALETTE[i], _PALETTE[i + 1])]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def trim_outliers(records: Sequence[TrialRecord], percentile: float = TRIM_PERCENTILE) -> list[TrialRecord]:
    """Keep completed trials whose validation MSE is at most the given percentile."""
    done = _completed(records)
    if not done:
        return []
    cut = float(np.percentile([r.val_mse for r in done], percentile))
    return [r for r in done if r.val_mse <= cut]


def parallel_coordinates(
    records: Sequence[TrialRecord],
    space: SearchSpace,
    axis_order: Sequence[str] | None = None,
    title: str = "",
) -> str:
    """SVG with one ordinal axis per parameter plus a final validation-MSE axis."""
    done = _completed(records)
    if not done:
        raise AnalysisError("parallel coordinates need at least one completed trial")
    names = list(axis_order) if axis_order is not None else list(space)
    spacing, margin, top, height = 110, 70, 60, 320
    width = 2 * margin + spacing * len(names)
    losses = np.array([r.val_mse for r in done])
    lo, hi = float(losses.min()), float(losses.max())

    def y_ordinal(k: int, n: int) -> float:
        frac = 0.5 if n == 1 else k / (n - 1)
        return top + height * (1.0 - frac)

    def y_loss(v: float) -> float:
        frac = 0.5 if hi == lo else (v - lo) / (hi - lo)
        return top + height * (1.0 - frac)

    svg = ET.Element(
        "svg",
        {
            "xmlns": "http://www.w3.org/2000/svg",
            "width": str(width),
            "height": str(top + height + 50),
            "viewBox": f"0 0 {width} {top + height + 50}",
            "font-family": "sans-serif",
            "font-size": "11",
        },
    )
    ET.SubElement(svg, "title").text = title or "Parallel coordinates: hyperparameters vs validation MSE"
    ET.SubElement(svg, "rect", {"width": str(width), "height": str(top + height + 50), "fill": "white"})
    if title:
        ET.SubElement(svg, "text", {"x": str(margin), "y": "20", "font-size": "14"}).text = title

    xs = [margin + spacing * i for i in range(len(names) + 1)]
    lines = ET.SubElement(svg, "g", {"class": "trials", "fill": "none", "stroke-width": "1.5", "stroke-opacity": "0.8"})
    for r in done:
        pts = []
        for x, name in zip(xs, names):
            dom = space[name]
            pts.append((x, y_ordinal(dom.ordinal(r.params[name]), len(dom))))
        pts.append((xs[-1], y_loss(r.val_mse)))
        t = 0.0 if hi == lo else (r.val_mse - lo) / (hi - lo)
        pl = ET.SubElement(
            lines,
            "polyline",
            {
                "class": "trial",
                "data-trial-id": str(r.trial_id),
                "points": " ".join(f"{x:.1f},{y:.1f}" for x, y in pts),
                "stroke": _color(1.0 - t),
            },
        )
        ET.SubElement(pl, "title").text = f"trial {r.trial_id}: val_mse={r.val_mse:.6g}"

    axes = ET.SubElement(svg, "g", {"class": "axes", "stroke": "black"})
    for x, name in zip(xs, names):
        dom = space[name]
        ax = ET.SubElement(axes, "g", {"class": "axis", "data-param": name})
        ET.SubElement(ax, "line", {"x1": f"{x:.1f}", "y1": str(top), "x2": f"{x:.1f}", "y2": str(top + height)})
        ET.SubElement(ax, "text", {"x": f"{x:.1f}", "y": str(top - 14), "text-anchor": "middle", "stroke": "none"}).text = name
        for k, lit in enumerate(dom.literals):
            y = y_ordinal(k, len(dom))
            ET.SubElement(ax, "line", {"x1": f"{x - 4:.1f}", "y1": f"{y:.1f}", "x2": f"{x + 4:.1f}", "y2": f"{y:.1f}"})
            ET.SubElement(ax, "text", {"x": f"{x + 7:.1f}", "y": f"{y + 4:.1f}", "stroke": "none"}).text = lit
    x = xs[-1]
    ax = ET.SubElement(axes, "g", {"class": "axis", "data-param": "val_mse"})
    ET.SubElement(ax, "line", {"x1": f"{x:.1f}", "y1": str(top), "x2": f"{x:.1f}", "y2": str(top + height)})
    ET.SubElement(ax, "text", {"x": f"{x:.1f}", "y": str(top - 14), "text-anchor": "middle", "stroke": "none"}).text = "val_mse"
    ticks = [lo] if hi == lo else list(np.linspace(lo, hi, 5))
    for v in ticks:
        y = y_loss(v)
        ET.SubElement(ax, "line", {"x1": f"{x - 4:.1f}", "y1": f"{y:.1f}", "x2": f"{x + 4:.1f}", "y2": f"{y:.1f}"})
        ET.SubElement(ax, "text", {"x": f"{x + 7:.1f}", "y": f"{y + 4:.1f}", "stroke": "none"}).text = f"{v:.4f}"
    ET.indent(svg)
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(svg, encoding="unicode") + "\n"


# --- importance ------------------------------------------------------------


@dataclass(frozen=True)
class ImportanceRanking:
    entries: tuple[tuple[str, float], ...]
    degenerate: bool = False

    def rank_of(self, name: str) -> int:
        return [n for n, _ in self.entries].index(name) + 1

    def score(self, name: str) -> float:
        return dict(self.entries)[name]


def importance_ranking(records: Sequence[TrialRecord], names: Sequence[str] | None = None) -> ImportanceRanking:
    """Rank parameters by the share of validation-MSE variance their groups explain.

    Each parameter's score is the between-group sum of squares of the loss
    when trials are grouped by that parameter's value, divided by the total
    sum of squares; scores are then normalized to sum to one. Only value
    groupings matter, never the magnitudes of the values.
    """
    done = _completed(records)
    if len(done) < 2:
        raise AnalysisError("importance ranking needs at least two completed trials")
    names = _param_order(done, names)
    y = np.array([r.val_mse for r in done])
    total = float(np.sum((y - y.mean()) ** 2))
    raw: dict[str, float] = {}
    for name in names:
        groups: dict[Any, list[float]] = {}
        for r, v in zip(done, y):
            groups.setdefault(r.params.get(name), []).append(v)
        if len(groups) < 2 or total == 0.0:
            raw[name] = 0.0
            continue
        between = sum(len(g) * (np.mean(g) - y.mean()) ** 2 for g in groups.values())
        raw[name] = float(between) / total
    s = sum(raw.values())
    degenerate = s == 0.0
    scores = {n: (0.0 if degenerate else raw[n] / s) for n in names}
    order = sorted(names, key=lambda n: -scores[n])
    return ImportanceRanking(tuple((n, scores[n]) for n in order), degenerate)


# --- learning curves -------------------------------------------------------


@dataclass(frozen=True)
class CurveDiagnosis:
    label: str
    evidence: Mapping[str, Any] = field(default_factory=dict)


def _non_increasing(xs: Sequence[float]) -> bool:
    return all(b <= a for a, b in zip(xs, xs[1:]))


def diagnose_curve(epochs: Sequence[EpochRecord] | None = None, train=None, val=None) -> CurveDiagnosis:
    """Label a train/validation loss history.

    Rules are tried in order: overfit, underfit, converged, else inconclusive.
    """
    if epochs is not None:
        train = [e.train_loss for e in epochs]
        val = [e.val_loss for e in epochs]
    train, val = list(train), list(val)
    if len(train) != len(val):
        raise AnalysisError("train and validation histories differ in length")
    if len(val) < 2:
        return CurveDiagnosis(INCONCLUSIVE, {"too_short": True, "val_min_epoch": 1 if val else None})
    i_min = int(np.argmin(val))
    overfit = (
        i_min < len(val) - 1
        and val[-1] >= (1 + GAP_TOLERANCE) * val[i_min]
        and _non_increasing(train[i_min:])
    )
    underfit = val[-1] > (1 + GAP_TOLERANCE) * train[-1] and _non_increasing(train) and _non_increasing(val)
    gap_small = abs(val[-1] - train[-1]) <= GAP_TOLERANCE * train[-1]
    tail = val[-3:]
    flat = abs(tail[-1] - tail[0]) <= FLAT_TOLERANCE * tail[0]
    settling = _non_increasing(tail)
    converged = gap_small and (flat or settling)
    evidence = {
        "overfit": overfit,
        "underfit": underfit,
        "gap_small": gap_small,
        "val_flat": flat,
        "val_settling": settling,
        "val_min_epoch": i_min + 1,
    }
    if overfit:
        label = OVERFIT
    elif underfit:
        label = UNDERFIT
    elif converged:
        label = CONVERGED
    else:
        label = INCONCLUSIVE
    return CurveDiagnosis(label, evidence)


# --- OOM tables ------------------------------------------------------------


def percent(num: int, den: int) -> str:
    """Whole-percent string, rounding halves up."""
    if den == 0:
        return DASH
    return f"{math.floor(Fraction(100 * num, den) + Fraction(1, 2))}%"


def _markdown(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    out = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    out += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(out) + "\n"


def _axes(experiments) -> tuple[list[str], list[str]]:
    models: list[str] = []
    datasets: list[str] = []
    for e in experiments:
        if e.variant not in models:
            models.append(e.variant)
        if e.dataset not in datasets:
            datasets.append(e.dataset)
    return models, datasets


@dataclass(frozen=True)
class OomTable:
    models: tuple[str, ...]
    datasets: tuple[str, ...]
    counts: Mapping[tuple[str, str], tuple[int, int]]

    def cell(self, model: str, dataset: str) -> str:
        if (model, dataset) not in self.counts:
            return DASH
        return percent(*self.counts[model, dataset])

    def to_markdown(self) -> str:
        rows = [[m] + [self.cell(m, d) for d in self.datasets] for m in self.models]
        return _markdown(["Models", *self.datasets], rows)


def oom_table(experiments) -> OomTable:
    """Share of dispatched trials that failed the memory gate, per model and dataset."""
    experiments = list(experiments)
    if not experiments:
        raise AnalysisError("oom_table needs at least one experiment")
    models, datasets = _axes(experiments)
    counts: dict[tuple[str, str], tuple[int, int]] = {}
    for e in experiments:
        f, n = counts.get((e.variant, e.dataset), (0, 0))
        counts[e.variant, e.dataset] = (f + sum(r.status == FAILED_OOM for r in e.records), n + len(e.records))
    return OomTable(tuple(models), tuple(datasets), counts)


@dataclass(frozen=True)
class OomBoundaryRow:
    batch_size: int
    max_width: int
    min_width: int

    def cells(self) -> list[str]:
        return [str(self.batch_size), f"≥{self.max_width}", f"≥{self.min_width}"]


_DEFAULTS = HParams()


def oom_boundary(records: Sequence[TrialRecord]) -> list[OomBoundaryRow]:
    """Smallest failing widths per batch size, over out-of-memory trials only."""
    groups: dict[int, list[tuple[int, int]]] = {}
    for r in records:
        if r.status != FAILED_OOM:
            continue
        dm = int(r.params.get("d_model", _DEFAULTS.d_model))
        dff = int(r.params.get("d_ff", _DEFAULTS.d_ff))
        bs = int(r.params.get("batch_size", _DEFAULTS.batch_size))
        groups.setdefault(bs, []).append((max(dm, dff), min(dm, dff)))
    return [
        OomBoundaryRow(bs, min(w for w, _ in g), min(w for _, w in g))
        for bs, g in sorted(groups.items())
    ]


def oom_boundary_markdown(rows: Sequence[OomBoundaryRow], model: str) -> str:
    return _markdown(
        ["Model", "Batch Size", "Max(d_model, d_ff)", "Min(d_model, d_ff)"],
        [[model, *row.cells()] for row in rows],
    )


# --- best results ----------------------------------------------------------


def best_results_table(experiments) -> str:
    """Per dataset: each model's best-trial MSE, MAE and seconds; best MSE bold, runner-up underlined."""
    experiments = list(experiments)
    models, datasets = _axes(experiments)
    best: dict[tuple[str, str], TrialRecord | None] = {}
    for e in experiments:
        b = e.best
        cur = best.get((e.variant, e.dataset))
        if cur is None or (b is not None and b.val_mse < cur.val_mse):
            best[e.variant, e.dataset] = b
    marks: dict[tuple[str, str], str] = {}
    for d in datasets:
        ranked = [(best[m, d].test_mse, i, m) for i, m in enumerate(models) if best.get((m, d)) is not None]
        ranked.sort()
        if ranked:
            marks[ranked[0][2], d] = "bold"
        if len(ranked) > 1:
            marks[ranked[1][2], d] = "underline"
    header = ["Model"]
    for d in datasets:
        header += [f"{d} MSE", f"{d} MAE", f"{d} Time"]
    rows = []
    for m in models:
        row = [m]
        for d in datasets:
            b = best.get((m, d))
            if b is None:
                row += [DASH, DASH, DASH]
                continue
            mse = f"{b.test_mse:.4f}"
            if marks.get((m, d)) == "bold":
                mse = f"**{mse}**"
            elif marks.get((m, d)) == "underline":
                mse = f"<u>{mse}</u>"
            row += [mse, f"{b.test_mae:.4f}", f"{b.wall_ms / 1000:.2f}"]
        rows.append(row)
    return _markdown(header, rows)


# --- report writers --------------------------------------------------------


def _importance_markdown(ranking: ImportanceRanking) -> str:
    lines = [
        "# Hyperparameter importance",
        "",
        "Score: share of validation-MSE variance explained by grouping trials on each",
        "parameter (one-way explained variance, normalized to sum to 1).",
        "",
    ]
    if ranking.degenerate:
        lines += ["All completed trials share one validation loss; ranking is degenerate.", ""]
    body = _markdown(["Rank", "Parameter", "Score"], [[str(i + 1), n, f"{s:.4f}"] for i, (n, s) in enumerate(ranking.entries)])
    return "\n".join(lines) + "\n" + body


def _curves_markdown(result) -> str:
    best_id = result.best_trial_id
    lines = ["# Learning curves", ""]
    done = _completed(result.records)
    if best_id is not None:
        best = next(r for r in done if r.trial_id == best_id)
        diag = diagnose_curve(best.epochs)
        lines += [f"Best trial {best_id}: **{diag.label}** (minimum validation loss at epoch {diag.evidence.get('val_min_epoch')}).", ""]
        lines.append(
            _markdown(
                ["Epoch", "Train loss", "Val loss", "LR"],
                [[str(e.epoch), f"{e.train_loss:.4f}", f"{e.val_loss:.4f}", f"{e.lr:.3g}"] for e in best.epochs],
            )
        )
    rows = []
    for r in done:
        d = diagnose_curve(r.epochs)
        rows.append([str(r.trial_id), str(len(r.epochs)), f"{r.val_mse:.4f}", d.label])
    lines += ["## All completed trials", "", _markdown(["Trial", "Epochs", "Val MSE", "Diagnosis"], rows)]
    return "\n".join(lines)


def _oom_markdown(result) -> str:
    table = oom_table([result])
    rows = oom_boundary(result.records)
    lines = ["# Out-of-memory rate", "", table.to_markdown(), "# Out-of-memory cases", ""]
    if rows:
        lines.append(oom_boundary_markdown(rows, result.variant))
    else:
        lines.append("No trial failed the memory gate.\n")
    return "\n".join(lines)


def write_report(exp_dir, out_dir=None) -> Path:
    """Write the per-experiment analysis files; the store itself is only read."""
    from .scheduler import result_from_store
    from .store import REPORT_DIR, read_manifest

    exp_dir = Path(exp_dir)
    out = Path(out_dir) if out_dir is not None else exp_dir / REPORT_DIR
    out.mkdir(parents=True, exist_ok=True)
    result = result_from_store(exp_dir)
    space = SearchSpace.from_text(read_manifest(exp_dir)["space"])
    done = _completed(result.records)
    title = f"{result.variant} on {result.dataset}"
    if done:
        (out / "parallel_coords.svg").write_text(parallel_coordinates(done, space, title=title))
        (out / "parallel_coords_trimmed.svg").write_text(
            parallel_coordinates(trim_outliers(done), space, title=title + " (outliers trimmed)")
        )
    if len(done) >= 2:
        (out / "importance.md").write_text(_importance_markdown(importance_ranking(done, list(space))))
    else:
        (out / "importance.md").write_text("# Hyperparameter importance\n\nFewer than two completed trials.\n")
    (out / "curves.md").write_text(_curves_markdown(result))
    (out / "oom.md").write_text(_oom_markdown(result))
    return out


def write_summary(exp_dirs: Sequence, out_dir) -> list[Path]:
    """Cross-experiment tables: ``best_results.md`` and ``oom.md``."""
    from .scheduler import result_from_store

    results = [result_from_store(d) for d in exp_dirs]
    if not results:
        raise AnalysisError("no experiments to summarize")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best = out_dir / "best_results.md"
    best.write_text(
        "# Best result per model and dataset\n\n"
        "Test-set metrics of each model's lowest-validation-MSE trial; time in seconds.\n\n"
        + best_results_table(results)
    )
    oom = out_dir / "oom.md"
    lines = ["# Out-of-memory rate", "", oom_table(results).to_markdown()]
    for r in results:
        rows = oom_boundary(r.records)
        if rows:
            lines += [f"## Out-of-memory cases: {r.variant} on {r.dataset}", "", oom_boundary_markdown(rows, r.variant)]
    oom.write_text("\n".join(lines))
    return [best, oom]
