"""Human-readable run summary: one table per figure analogue, plus a flat CSV bundle.

A report is built from a record dict, either the one collected during a run
or one reloaded from the output directory with :func:`load_records`.  Both
routes give the same report.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .photonstats import EmitterClass

__all__ = ["Report", "SECTIONS", "parse_csv", "load_records", "build_report", "write_report",
           "survey_line", "NOT_RUN"]

NOT_RUN = "not run"

SECTIONS = {
    "fig1_occupancy": "Fig 1 table: site occupancy",
    "fig2_residuals": "Fig 2 table: placement residuals",
    "fig3_multiplicity": "Fig 3 table: emitter multiplicity",
    "fig4_t2_survey": "Fig 4 table: coherence survey",
    "aberration": "Aberration correction",
}

_JSON_RECORDS = ("capacity", "yield", "precision", "hbt_summary", "survey", "focal_fwhm")
_CSV_RECORDS = {"residual_histogram": "residual_histogram.csv", "survey_table": "survey.csv",
                "aberration": "aberration.csv"}


def _coerce(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_csv(text: str) -> list[dict]:
    """CSV text to a list of row dicts with numeric cells converted."""
    reader = csv.DictReader(io.StringIO(text))
    return [{k: _coerce(v) for k, v in row.items()} for row in reader]


def load_records(out_dir: str | Path) -> dict:
    """Reload every summary record present in a run directory; absent files are skipped."""
    out = Path(out_dir)
    records: dict = {}
    for name in _JSON_RECORDS:
        path = out / f"{name}.json"
        if path.exists():
            records[name] = json.loads(path.read_text(encoding="utf-8"))
    for name, filename in _CSV_RECORDS.items():
        path = out / filename
        if path.exists():
            records[name] = parse_csv(path.read_text(encoding="utf-8"))
    return records


def survey_line(n_above: int, n_total: int, threshold_s: float) -> str:
    return f"{n_above}/{n_total} exceed {threshold_s * 1e6:g} μs"


@dataclass
class Report:
    # section key -> list of (metric, value) rows, or None when the stage did not run
    sections: dict[str, Optional[list[tuple[str, str]]]] = field(default_factory=dict)
    gaps: dict[str, str] = field(default_factory=dict)

    def status(self, key: str) -> str:
        return NOT_RUN if self.sections.get(key) is None else "ok"

    def to_text(self) -> str:
        lines = []
        for key, title in SECTIONS.items():
            lines.append(f"== {title} ==")
            rows = self.sections.get(key)
            if rows is None:
                lines.append(f"  {NOT_RUN} ({self.gaps.get(key, 'no outputs')})")
            else:
                width = max(len(m) for m, _ in rows)
                lines.extend(f"  {m.ljust(width)}  {v}" for m, v in rows)
            lines.append("")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["section", "metric", "value"])
        for key in SECTIONS:
            rows = self.sections.get(key)
            if rows is None:
                w.writerow([key, "status", NOT_RUN])
            else:
                w.writerows([key, m, v] for m, v in rows)
        return buf.getvalue()


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}%"


def _g(x) -> str:
    return "nan" if x is None else f"{x:.4g}"


def _fig1(rec: dict) -> list[tuple[str, str]]:
    y = rec["yield"]
    counts = y["counts"]
    rows = [("sites", str(counts["n_sites"])),
            ("occupied", f"{counts['occupied']} ({_pct(y['occupancy'])})"),
            ("single-NVC fraction", _pct(y["single_fraction"]))]
    for k, v in sorted(counts["by_multiplicity"].items()):
        rows.append((f"sites with {k} NVC", str(v)))
    pf = y["poisson_fit"]
    rows += [("Poisson lambda", f"{_g(pf['lambda_hat'])} ± {_g(pf['lambda_stderr'])}"),
             ("Poisson gof p", _g(pf["gof_p"])),
             ("nitrogen", f"{_g(y['nitrogen_ppb'])} ppb"),
             ("mean N spacing", f"{_g(y['mean_spacing_nm'])} nm")]
    if "capacity" in rec:
        cap = rec["capacity"]
        rows += [("chip capacity (sites)", str(cap["nvc_sites"])),
                 ("chip capacity (qubits)", str(cap["total_qubits"]))]
    return rows


def _fig2(rec: dict) -> list[tuple[str, str]]:
    p = rec["precision"]
    rows = [("localized sites", str(p["n"]))]
    for i, axis in enumerate("xyz"):
        rows.append((f"std {axis}", f"{_g(p['std_nm'][i])} nm"))
    for i, axis in enumerate("xyz"):
        rows.append((f"std {axis} after grid registration", f"{_g(p['registered_std_nm'][i])} nm"))
    for row in rec.get("residual_histogram", []):
        if row["count"]:
            rows.append((f"hist {row['axis']} [{_g(row['lo_nm'])}, {_g(row['hi_nm'])}) nm", str(row["count"])))
    return rows


def _fig3(rec: dict) -> list[tuple[str, str]]:
    h = rec["hbt_summary"]
    rows = [("sites measured", str(h["n"]))]
    for label in (c.value for c in EmitterClass):
        rows.append((f"g2 class {label}", f"{h['counts'][label]} ({_pct(h['fractions'][label])})"))
    rows.append(("agreement with true multiplicity", _pct(h["agreement_with_true_multiplicity"])))
    return rows


def _fig4(rec: dict) -> list[tuple[str, str]]:
    s = rec["survey"]
    rows = [("summary", survey_line(s["n_above"], s["n_total"], s["threshold_s"])),
            ("depth dependence p", _g(s["depth_p_value"]))]
    for row in rec.get("survey_table", []):
        if row["count"]:
            rows.append((f"{_g(row['depth_um'])} um, T2 in [{_g(row['t2_lo_s'] * 1e6)}, "
                         f"{_g(row['t2_hi_s'] * 1e6)}) us", str(row["count"])))
    return rows


def _aberration(rec: dict) -> list[tuple[str, str]]:
    rows = []
    for row in rec["aberration"]:
        rows.append((f"{_g(row['depth_um'])} um Strehl (uncorrected / corrected)",
                     f"{row['strehl_uncorrected']:.4f} / {row['strehl_corrected']:.6f}"))
    if "focal_fwhm" in rec:
        f = rec["focal_fwhm"]
        rows.append(("focal FWHM radial / axial", f"{_g(f['radial_nm'])} / {_g(f['axial_nm'])} nm"))
    return rows


def _gap(rec: dict, key: str, count_field: str) -> Optional[str]:
    if key not in rec:
        return f"{key} output missing"
    if not rec[key].get(count_field):
        return f"{key} is empty"
    return None


def build_report(source: dict | str | Path) -> Report:
    """Build the summary from a record dict or from a run directory."""
    rec = source if isinstance(source, dict) else load_records(source)
    report = Report()
    checks = {
        "fig1_occupancy": (lambda: _gap(rec, "yield", "counts"), _fig1),
        "fig2_residuals": (lambda: _gap(rec, "precision", "n"), _fig2),
        "fig3_multiplicity": (lambda: _gap(rec, "hbt_summary", "n"), _fig3),
        "fig4_t2_survey": (lambda: _gap(rec, "survey", "n_total"), _fig4),
        "aberration": (lambda: None if rec.get("aberration") else "aberration output missing", _aberration),
    }
    for key, (gap, build) in checks.items():
        reason = gap()
        if reason is None and key == "fig1_occupancy" and not rec["yield"]["counts"].get("n_sites"):
            reason = "fabricate output is empty"
        if reason is None:
            report.sections[key] = build(rec)
        else:
            report.sections[key] = None
            report.gaps[key] = reason
    return report


def write_report(report: Report, out_dir: str | Path) -> list[str]:
    """Write ``report.txt`` and ``report_summary.csv``; returns the file names written."""
    out = Path(out_dir)
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "report_summary.csv").write_text(report.to_csv(), encoding="utf-8")
    return ["report.txt", "report_summary.csv"]
