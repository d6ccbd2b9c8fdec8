"""Training-log analytics: per-phase summaries, curve files, and figures.

Input is one or more JSON Lines log files (one record per optimizer step).
For every phase the report writes a curve CSV (step,loss,grad_norm,lr), a
dependency-free SVG polyline per curve, and a matplotlib PNG render of the
same curve; a report.json carries the phase summaries and the overall
loss-reduction percentage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import ReportError
from .evaluator import compliance_rate, loss_reduction
from .fsio import atomic_write_bytes, atomic_write_text

SVG_WIDTH = 800
SVG_HEIGHT = 400

LOG_FIELDS = (
    "phase", "step", "epoch", "loss", "grad_norm", "lr", "elapsed_ms",
    "mem_est_bytes",
)


@dataclass
class PhaseSummary:
    name: str
    initial_loss: float
    final_loss: float
    steps: int
    epochs: float
    records: list = field(default_factory=list)


@dataclass
class PhaseReport:
    phases: list
    reduction_percent: float
    compliance: float | None = None

    def to_json_obj(self) -> dict:
        out = {
            "phases": [
                {
                    "name": p.name,
                    "initial_loss": p.initial_loss,
                    "final_loss": p.final_loss,
                    "steps": p.steps,
                    "epochs": p.epochs,
                }
                for p in self.phases
            ],
            "reduction_percent": self.reduction_percent,
        }
        if self.compliance is not None:
            out["compliance_rate"] = self.compliance
        return out


def parse_log_file(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ReportError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            missing = [f for f in ("phase", "step", "loss", "grad_norm") if f not in rec]
            if missing:
                raise ReportError(f"{path}:{lineno}: missing fields {missing}")
            records.append(rec)
    return records


def group_phases(records) -> list:
    """Split a record stream into phases on changes of the phase field."""
    phases = []
    current_name = None
    current: list = []
    for rec in records:
        if rec["phase"] != current_name:
            if current:
                phases.append((current_name, current))
            current_name, current = rec["phase"], []
        current.append(rec)
    if current:
        phases.append((current_name, current))
    return [
        PhaseSummary(
            name=name,
            initial_loss=recs[0]["loss"],
            final_loss=recs[-1]["loss"],
            steps=len(recs),
            epochs=recs[-1].get("epoch", 0.0),
            records=recs,
        )
        for name, recs in phases
    ]


def _svg_polyline(xs, ys, title: str) -> str:
    """Fixed 800x400 viewport line chart with 40px margins."""
    margin = 40
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0
    pts = []
    for x, y in zip(xs, ys):
        px = margin + (x - x_lo) / x_span * (SVG_WIDTH - 2 * margin)
        py = SVG_HEIGHT - margin - (y - y_lo) / y_span * (SVG_HEIGHT - 2 * margin)
        pts.append(f"{px:.2f},{py:.2f}")
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}">\n'
        f'<rect width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>\n'
        f'<text x="{margin}" y="20" font-size="14">{title}</text>\n'
        f'<text x="{margin}" y="{SVG_HEIGHT - 10}" font-size="11">'
        f"x: {x_lo:g}..{x_hi:g}  y: {y_lo:.6g}..{y_hi:.6g}</text>\n"
        f'<line x1="{margin}" y1="{SVG_HEIGHT - margin}" x2="{SVG_WIDTH - margin}" '
        f'y2="{SVG_HEIGHT - margin}" stroke="black"/>\n'
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{SVG_HEIGHT - margin}" stroke="black"/>\n'
        f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" '
        f'points="{" ".join(pts)}"/>\n'
        "</svg>\n"
    )


def _write_png(path, xs, ys, title, ylabel):
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(xs, ys, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    # Date metadata omitted so identical runs produce identical bytes
    fig.savefig(path, dpi=100, metadata={"Date": None})
    plt.close(fig)


def _safe_name(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def build_report(log_paths, out_dir, responses=None) -> PhaseReport:
    """Summarize one or more phase logs into curve files, figures and JSON."""
    paths = [Path(p) for p in log_paths]
    if not paths:
        raise ReportError("no log files supplied")
    records = []
    for path in sorted(paths):
        records.extend(parse_log_file(path))
    if not records:
        raise ReportError("log files contain no records")

    phases = group_phases(records)
    overall = loss_reduction(phases[0].initial_loss, phases[-1].final_loss)
    report = PhaseReport(phases=phases, reduction_percent=overall)
    if responses is not None:
        report.compliance = compliance_rate(responses)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for phase in phases:
        tag = _safe_name(phase.name)
        steps = [r["step"] for r in phase.records]
        losses = [r["loss"] for r in phase.records]
        norms = [r["grad_norm"] for r in phase.records]
        lrs = [r.get("lr", 0.0) for r in phase.records]

        csv_lines = ["step,loss,grad_norm,lr"]
        csv_lines += [
            f"{s},{l:.10g},{g:.10g},{lr:.10g}"
            for s, l, g, lr in zip(steps, losses, norms, lrs)
        ]
        atomic_write_text(out / f"{tag}_curve.csv", "\n".join(csv_lines) + "\n")

        atomic_write_text(
            out / f"{tag}_loss.svg",
            _svg_polyline(steps, losses, f"{phase.name}: training loss"),
        )
        atomic_write_text(
            out / f"{tag}_grad_norm.svg",
            _svg_polyline(steps, norms, f"{phase.name}: gradient norm"),
        )
        _write_png(out / f"{tag}_loss.png", steps, losses,
                   f"{phase.name}: training loss", "loss")
        _write_png(out / f"{tag}_grad_norm.png", steps, norms,
                   f"{phase.name}: gradient norm", "grad norm")

    atomic_write_bytes(
        out / "report.json",
        json.dumps(report.to_json_obj(), indent=2, sort_keys=True).encode() + b"\n",
    )
    return report
