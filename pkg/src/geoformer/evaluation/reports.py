"""CSV / JSON report writers and plain-text rollup tables."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .ablation import MODALITY, STRUCTURAL, AblationResult
from .metrics import METRIC_NAMES, MetricReport

REPORT_COLUMNS = ("model", "task", "stratum", "n", *METRIC_NAMES, "flags")
TASK_TITLES = {"bh": "Building Height (BH)", "bf": "Building Footprint (BF)"}
ROLLUP_HEADER = ("Model", "RMSE", "MAE", "ME", "NMAD", "CC", "R2")


def _num(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_reports_csv(path, reports: Iterable[MetricReport]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            row = r.as_row()
            w.writerow([_num(row[c]) for c in REPORT_COLUMNS])
    return path


def read_reports_csv(path) -> list[MetricReport]:
    out = []
    with Path(path).open(newline="") as f:
        for row in csv.DictReader(f):
            out.append(MetricReport(
                **{m: float(row[m]) for m in METRIC_NAMES}, n=int(row["n"]), task=row["task"],
                model=row["model"], stratum=row["stratum"], flags=[x for x in row["flags"].split(";") if x]))
    return out


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def write_reports_json(path, reports: Iterable[MetricReport], extra: Mapping | None = None) -> Path:
    path = Path(path)
    doc = {"reports": [{k: _jsonable(v) for k, v in r.as_row().items()} for r in reports]}
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _cell(v: float, digits: int) -> str:
    return "nan" if math.isnan(v) else f"{v:.{digits}f}"


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda cells: "  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w)
                                   for i, (c, w) in enumerate(zip(cells, widths)))
    return "\n".join([line(header), *(line(r) for r in rows)])


def rollup(reports: Iterable[MetricReport], digits: dict | None = None) -> str:
    """All-sample reports grouped into a BH block and a BF block, one row per model."""
    digits = digits or {"bh": 2, "bf": 3}
    by_task: dict[str, list[MetricReport]] = {"bh": [], "bf": []}
    for r in reports:
        if r.task in by_task and r.stratum in ("all", "test"):
            by_task[r.task].append(r)
    parts = []
    for task, reps in by_task.items():
        if not reps:
            continue
        d = digits[task]
        rows = [[r.model, *(_cell(getattr(r, m), d) for m in METRIC_NAMES)] for r in reps]
        parts.append(f"[{TASK_TITLES[task]}]\n" + _table(ROLLUP_HEADER, rows))
    return "\n\n".join(parts) + "\n"


ABLATION_LABELS = {"full": "GeoFormer (Full)", "enlarged": "Enlarged", "no_dem": "Without DEM",
                   "no_sar": "Without SAR", "no_optical": "Without Optical"}


def ablation_table(results: Mapping[str, AblationResult], group: str) -> str:
    """MAE / RMSE / R2 per task for the structural or modality group."""
    names = {"structural": STRUCTURAL, "modality": MODALITY}[group]
    header = ("Model", "BH MAE", "BH RMSE", "BH R2", "BF MAE", "BF RMSE", "BF R2")
    rows = []
    for n in names:
        if n not in results:
            continue
        t = results[n].test
        rows.append([ABLATION_LABELS[n],
                     _cell(t["bh"].mae, 2), _cell(t["bh"].rmse, 2), _cell(t["bh"].r2, 3),
                     _cell(t["bf"].mae, 3), _cell(t["bf"].rmse, 3), _cell(t["bf"].r2, 3)])
    return _table(header, rows) + "\n"


def ablation_rows(results: Mapping[str, AblationResult]) -> list[dict]:
    rows = []
    for name, res in results.items():
        for split, reps in (("train", res.train), ("test", res.test)):
            for task, r in reps.items():
                rows.append({"ablation": name, "split": split, "task": task, "mae": r.mae, "rmse": r.rmse,
                             "r2": r.r2, "gap_rmse": res.gap[task], "n_params": res.n_params})
    return rows
