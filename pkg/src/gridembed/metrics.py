"""Evaluation metrics and report tables.

Each table is rendered both as aligned text and as CSV.  Rows are sorted by
case name, columns are fixed, and missing entries are written as
``absent``, so regenerating a report from the same inputs is byte-identical.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedding import Compression
from .grid import reduction_percentage
from .neural import History

VARIANTS = ("none", "linear", "full")
VARIANT_LABELS = {"none": "No Enc.", "linear": "Linear Enc.", "full": "Full Enc."}
ABSENT = "absent"


def opf_cost_error(o_orig: float, o_embed: float) -> float:
    """Signed percentage ``100 * (O_orig - O_embed) / O_orig``."""
    if o_orig == 0:
        raise ValueError("original cost is zero")
    return 100.0 * (o_orig - o_embed) / o_orig


def _rows(a, b, name: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError(f"{name}: empty test set")
    return a, b


def dispatch_l1(pg_true, qg_true, pg_pred, qg_pred) -> float:
    """Mean over instances of ``(|pg_hat - pg|_1 + |qg_hat - qg|_1) / (2 |G|)``.

    Arguments are ``(instances, generators)`` arrays (a single row is allowed).
    """
    pt, pp = _rows(pg_true, pg_pred, "dispatch_l1")
    qt, qp = _rows(qg_true, qg_pred, "dispatch_l1")
    ng = pt.shape[1]
    per = 0.5 * (np.abs(pp - pt).sum(axis=1) / ng + np.abs(qp - qt).sum(axis=1) / ng)
    return float(per.mean())


def combined_mse(pg_true, qg_true, vm_true, va_true, pg_pred, qg_pred, vm_pred=None, va_pred=None) -> float:
    """Mean over instances of ``(MSE_p + MSE_q) / 2 + (MSE_v + MSE_theta) / 2``.

    Voltages are averaged over all buses.
    """
    if vm_pred is None or va_pred is None:
        raise ValueError("combined MSE needs voltage magnitude and angle predictions")
    terms = []
    for t, p in ((pg_true, pg_pred), (qg_true, qg_pred), (vm_true, vm_pred), (va_true, va_pred)):
        a, b = _rows(t, p, "combined_mse")
        terms.append(((b - a) ** 2).mean(axis=1))
    per = 0.5 * (terms[0] + terms[1]) + 0.5 * (terms[2] + terms[3])
    return float(per.mean())


def gen_voltage_l1(vg_true, vg_pred) -> float:
    """Mean over instances of ``|vg_hat - vg|_1 / |G|``."""
    a, b = _rows(vg_true, vg_pred, "gen_voltage_l1")
    return float((np.abs(b - a).sum(axis=1) / a.shape[1]).mean())


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class CaseEval:
    """Everything measured for one network."""

    case: str
    compression: Compression | None = None
    opf_error: float | None = None
    embed_seconds: float | None = None
    dims: tuple[int, int] | None = None
    dispatch_l1: dict[str, float] = field(default_factory=dict)
    combined_mse: dict[str, float] = field(default_factory=dict)
    gen_voltage_l1: dict[str, float] = field(default_factory=dict)
    physics_dispatch_l1: dict[str, float] = field(default_factory=dict)
    physics_combined_mse: dict[str, float] = field(default_factory=dict)
    curves: dict[str, History] = field(default_factory=dict)  # "<model>/<variant>" -> history


@dataclass
class Table:
    name: str
    title: str
    header: list[str]
    rows: list[list[str]]

    def csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        writer.writerows(self.rows)
        return buf.getvalue()

    def text(self) -> str:
        cells = [self.header] + self.rows
        widths = [max(len(r[k]) for r in cells) for k in range(len(self.header))]
        line = lambda r: "  ".join(c.rjust(w) if k else c.ljust(w)  # noqa: E731
                                   for k, (c, w) in enumerate(zip(r, widths)))
        rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
        return "\n".join([self.title, rule, line(self.header), rule] + [line(r) for r in self.rows] + [rule])


@dataclass
class EvalReport:
    cases: list[CaseEval]
    tables: list[Table]
    curves_csv: str

    def text(self) -> str:
        return "\n\n".join(t.text() for t in self.tables) + "\n"

    @property
    def empty(self) -> bool:
        return not self.cases


def _fmt(x, digits: int) -> str:
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return ABSENT
    return f"{x:.{digits}f}"


def _variant_table(name, title, cases, attr, digits=4) -> Table:
    header = ["Network"] + [VARIANT_LABELS[v] for v in VARIANTS]
    rows = [[c.case] + [_fmt(getattr(c, attr).get(v), digits) for v in VARIANTS] for c in cases]
    return Table(name, title, header, rows)


def build_report(cases: Sequence[CaseEval], timings: bool = True) -> EvalReport:
    """Assemble all tables and the curve data, sorted by case name."""
    cases = sorted(cases, key=lambda c: c.case)
    comp_rows = []
    for c in cases:
        cp = c.compression
        comp_rows.append([c.case,
                          _fmt(cp.active if cp else None, 2), _fmt(cp.reactive if cp else None, 2),
                          _fmt(cp.joint if cp else None, 2), _fmt(c.opf_error, 2),
                          _fmt(c.embed_seconds if timings else None, 2)])
    dim_rows = []
    for c in cases:
        if c.dims is None:
            dim_rows.append([c.case, ABSENT, ABSENT, ABSENT])
        else:
            orig, red = c.dims
            dim_rows.append([c.case, str(orig), str(red), f"{reduction_percentage(orig, red):.0f}%"])
    tables = [
        Table("compression", "Evaluation of load embeddings",
              ["Network", "Active (%)", "Reactive (%)", "Joint (%)", "OPF Error (%)", "CPU Time (sec.)"],
              comp_rows),
        Table("dimensions", "OPF-DNN original and reduced input dimension",
              ["Network", "Original dim.", "Reduced dim.", "Reduction %"], dim_rows),
        _variant_table("dispatch_l1", "Generator dispatch L1 error (p.u.)", cases, "dispatch_l1"),
        _variant_table("combined_mse", "OPF-DNN average combined MSE (p.u.)", cases, "combined_mse", 6),
        _variant_table("gen_voltage_l1", "Generator voltage magnitude L1 error (p.u.)", cases,
                       "gen_voltage_l1"),
    ]
    if any(c.physics_dispatch_l1 or c.physics_combined_mse for c in cases):
        tables += [
            _variant_table("physics_dispatch_l1", "With physics penalty: generator dispatch L1 error (p.u.)",
                           cases, "physics_dispatch_l1"),
            _variant_table("physics_combined_mse", "With physics penalty: combined MSE (p.u.)",
                           cases, "physics_combined_mse", 6),
        ]
    return EvalReport(list(cases), tables, curves_csv(cases))


def curves_csv(cases: Sequence[CaseEval]) -> str:
    """Training curves as ``case, model, variant, split, epoch, loss, log10_loss`` rows."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["case", "model", "variant", "split", "epoch", "loss", "log10_loss"])
    for c in sorted(cases, key=lambda c: c.case):
        for key in sorted(c.curves):
            model, variant = key.split("/")
            hist = c.curves[key]
            for split, losses in (("train", hist.train), ("validation", hist.val)):
                for epoch, loss in enumerate(losses):
                    log = repr(float(np.log10(loss))) if loss > 0 else ABSENT
                    writer.writerow([c.case, model, variant, split, epoch, repr(float(loss)), log])
    return buf.getvalue()


def emit_report(cases: Sequence[CaseEval], out_dir=None, timings: bool = True) -> EvalReport:
    """Build the report and, with ``out_dir``, write ``report.txt``, one CSV per table and ``curves.csv``."""
    report = build_report(cases, timings)
    if out_dir is not None:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        (path / "report.txt").write_text(report.text())
        for table in report.tables:
            (path / f"{table.name}.csv").write_text(table.csv())
        (path / "curves.csv").write_text(report.curves_csv)
    return report
