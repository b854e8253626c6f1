"""Pairwise comparison grid over (model, modality) cells and its CSV/Markdown renderings."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..dataio import atomic_write
from .crossval import MetricCell
from .metrics import METRICS
from .ttest import corrected_resampled_ttest

REPORT_HEADER = ["model", "modality", "fold", "metric", "value"]
SUMMARY_HEADER = ["model", "modality", "metric", "mean", "std"]
STATS_HEADER = ["comparison_type", "lhs", "rhs", "scope", "metric", "t", "p"]
AVERAGE_SCOPE = "average"


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class SummaryRow:
    model: str
    modality: str
    metric: str
    mean: float
    std: float


@dataclass(frozen=True)
class ComparisonRow:
    comparison_type: str
    lhs: str
    rhs: str
    scope: str
    metric: str
    t: float
    p: float


@dataclass
class BenchmarkReport:
    cells: list[MetricCell]
    summary: list[SummaryRow]
    comparisons: list[ComparisonRow]
    plan: str
    n_subjects: int
    k: int


def _ordered(values):
    return list(dict.fromkeys(values))


def _index(cells: list[MetricCell]) -> dict[tuple[str, str], MetricCell]:
    out = {}
    for c in cells:
        if (c.model, c.modality) in out:
            raise ReportError(f"duplicate cell {c.model}/{c.modality}")
        out[(c.model, c.modality)] = c
    return out


def pairwise_report(cells: list[MetricCell], n_subjects: int, metrics=tuple(METRICS)) -> BenchmarkReport:
    """Summary per cell plus corrected t-tests for every model pair and modality pair.

    Model pairs are compared within each modality and on per-fold values
    averaged over modalities; modality pairs within each model and averaged
    over models. Averaged scopes need the full rectangular grid.
    """
    if not cells:
        raise ReportError("no cells to report")
    plans = {c.plan for c in cells}
    if len(plans) > 1:
        raise ReportError(f"cells come from different fold plans: {sorted(plans)}")
    k = len(next(iter(cells[0].values.values())))
    if any(len(v) != k for c in cells for v in c.values.values()):
        raise ReportError("cells disagree on the number of folds")
    grid = _index(cells)
    models = _ordered(c.model for c in cells)
    modalities = _ordered(c.modality for c in cells)
    full = all((m, d) in grid for m in models for d in modalities)
    n_test = n_subjects / k
    n_train = n_subjects - n_test

    summary = [SummaryRow(c.model, c.modality, metric, float(np.mean(c.values[metric])),
                          float(np.std(c.values[metric], ddof=1)))
               for c in cells for metric in metrics]

    def vec(model, modality, metric):
        return np.asarray(grid[(model, modality)].values[metric], dtype=np.float64)

    def test(kind, lhs, rhs, scope, metric, a, b):
        res = corrected_resampled_ttest(a - b, n_train, n_test)
        return ComparisonRow(kind, lhs, rhs, scope, metric, res.t, res.p)

    rows = []
    for metric in metrics:
        for a, b in itertools.combinations(models, 2):
            for mod in modalities:
                if (a, mod) in grid and (b, mod) in grid:
                    rows.append(test("model", a, b, mod, metric, vec(a, mod, metric), vec(b, mod, metric)))
            if full and len(modalities) > 1:
                va = np.mean([vec(a, d, metric) for d in modalities], axis=0)
                vb = np.mean([vec(b, d, metric) for d in modalities], axis=0)
                rows.append(test("model", a, b, AVERAGE_SCOPE, metric, va, vb))
        for a, b in itertools.combinations(modalities, 2):
            for model in models:
                if (model, a) in grid and (model, b) in grid:
                    rows.append(test("modality", a, b, model, metric, vec(model, a, metric), vec(model, b, metric)))
            if full and len(models) > 1:
                va = np.mean([vec(m, a, metric) for m in models], axis=0)
                vb = np.mean([vec(m, b, metric) for m in models], axis=0)
                rows.append(test("modality", a, b, AVERAGE_SCOPE, metric, va, vb))
    return BenchmarkReport(cells, summary, rows, plans.pop(), n_subjects, k)


def _fmt(x: float) -> str:
    return repr(float(x))


def _csv(rows, header, preamble: str = "") -> str:
    buf = io.StringIO()
    buf.write(preamble)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def report_csv(report: BenchmarkReport) -> str:
    preamble = f"# fold_plan={report.plan} n_subjects={report.n_subjects} k={report.k}\n"
    rows = [[c.model, c.modality, fold, metric, _fmt(v)]
            for c in report.cells for metric in c.values for fold, v in enumerate(c.values[metric])]
    return _csv(rows, REPORT_HEADER, preamble)


def summary_csv(report: BenchmarkReport) -> str:
    return _csv([[r.model, r.modality, r.metric, _fmt(r.mean), _fmt(r.std)] for r in report.summary],
                SUMMARY_HEADER)


def stats_csv(report: BenchmarkReport) -> str:
    return _csv([[r.comparison_type, r.lhs, r.rhs, r.scope, r.metric, _fmt(r.t), _fmt(r.p)]
                 for r in report.comparisons], STATS_HEADER)


def format_cell(mean: float, std: float, digits: int = 3) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def report_markdown(report: BenchmarkReport) -> str:
    """One table per metric: models as rows, modalities as columns, mean ± std over folds."""
    models = _ordered(c.model for c in report.cells)
    modalities = _ordered(c.modality for c in report.cells)
    lookup = {(r.model, r.modality, r.metric): r for r in report.summary}
    out = [f"Fold plan `{report.plan}`, {report.n_subjects} subjects, {report.k} folds.", ""]
    for metric in _ordered(r.metric for r in report.summary):
        out += [f"## {metric}", "", "| model | " + " | ".join(modalities) + " |",
                "|---|" + "---|" * len(modalities)]
        for m in models:
            cells = [format_cell(lookup[(m, d, metric)].mean, lookup[(m, d, metric)].std)
                     if (m, d, metric) in lookup else "" for d in modalities]
            out.append(f"| {m} | " + " | ".join(cells) + " |")
        out.append("")
    return "\n".join(out)


def write_report(report: BenchmarkReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"report.csv": report_csv(report), "report_summary.csv": summary_csv(report),
             "stats.csv": stats_csv(report), "report.md": report_markdown(report)}
    for name, text in files.items():
        atomic_write(out / name, text)
    return [out / name for name in files]


@dataclass
class ParsedReport:
    cells: list[MetricCell]
    plan: str
    n_subjects: int
    k: int


def read_report_csv(path) -> ParsedReport:
    """Parse a ``report.csv`` back into cells; the header comment carries the plan hash."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ReportError(f"{path}: missing '# fold_plan=...' header comment")
    meta = dict(item.split("=", 1) for item in lines[0][2:].split())
    try:
        plan, n_subjects, k = meta["fold_plan"], int(meta["n_subjects"]), int(meta["k"])
    except (KeyError, ValueError):
        raise ReportError(f"{path}: malformed header comment {lines[0]!r}") from None
    rows = list(csv.reader(lines[1:]))
    if not rows or rows[0] != REPORT_HEADER:
        raise ReportError(f"{path}: header must be {','.join(REPORT_HEADER)}")
    values: dict[tuple[str, str], dict[str, dict[int, float]]] = {}
    for row in rows[1:]:
        model, modality, fold, metric, value = row
        values.setdefault((model, modality), {}).setdefault(metric, {})[int(fold)] = float(value)
    cells = []
    for (model, modality), metrics in values.items():
        for metric, folds in metrics.items():
            if sorted(folds) != list(range(k)):
                raise ReportError(f"{path}: {model}/{modality}/{metric} does not have folds 0..{k - 1}")
        cells.append(MetricCell(model, modality, {m: [f[i] for i in range(k)] for m, f in metrics.items()}, plan))
    return ParsedReport(cells, plan, n_subjects, k)
