"""Run reports: structured text serialization, CSV, and multi-seed merging.

The text format is line-based and versioned: a header line, then
``[section]`` blocks of ``key = value`` pairs. Floats are written with
``repr``, so a report re-serializes byte-identically. Wall-clock times are
deliberately not serialized; they would break the bit-for-bit determinism
of reruns.
"""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, field

from .errors import ParseError
from .objectives import LossBreakdown

REPORT_HEADER = "fscil-run-report"
REPORT_VERSION = 1

CSV_HEADER = ["session", "accuracy", "a_base", "a_last", "a_avg", "fgt"]


@dataclass
class SessionReport:
    """Evaluation outcome of one session over all classes seen so far."""

    index: int
    way: int
    seen_classes: int
    accuracy: float
    per_class: dict[int, float]
    loss_trace: list[LossBreakdown] = field(default_factory=list)
    wall_time: float = 0.0  # seconds; reported live, never serialized


@dataclass
class RunReport:
    config: list[tuple[str, str]]
    sessions: list[SessionReport]
    a_base: float
    a_last: float
    a_avg: float
    fgt: float
    diagnostics: dict = field(default_factory=dict)

    def config_dict(self) -> dict[str, str]:
        return dict(self.config)


def _fmt(value: float) -> str:
    return repr(float(value))


def serialize_run_report(report: RunReport) -> str:
    out = io.StringIO()
    out.write(f"{REPORT_HEADER} v{REPORT_VERSION}\n")
    out.write("[config]\n")
    for key, value in report.config:
        out.write(f"{key} = {value}\n")
    for s in report.sessions:
        out.write(f"[session {s.index}]\n")
        out.write(f"way = {s.way}\n")
        out.write(f"seen_classes = {s.seen_classes}\n")
        out.write(f"accuracy = {_fmt(s.accuracy)}\n")
        per_class = " ".join(
            f"{cid}:{_fmt(acc)}" for cid, acc in sorted(s.per_class.items())
        )
        out.write(f"per_class = {per_class}\n")
        for name in ("total", "ce_main", "divergence", "distill_kl", "anchor_ce"):
            values = " ".join(_fmt(getattr(b, name)) for b in s.loss_trace)
            out.write(f"loss_{name} = {values}\n")
    out.write("[metrics]\n")
    out.write(f"a_base = {_fmt(report.a_base)}\n")
    out.write(f"a_last = {_fmt(report.a_last)}\n")
    out.write(f"a_avg = {_fmt(report.a_avg)}\n")
    out.write(f"fgt = {_fmt(report.fgt)}\n")
    out.write("[diagnostics]\n")
    diag = report.diagnostics
    norms = diag.get("prefix_grad_norms", [])
    out.write("prefix_grad_norms = " + " ".join(_fmt(v) for v in norms) + "\n")
    fisher = diag.get("fisher", {})
    out.write(
        "fisher = "
        + " ".join(f"{k}:{_fmt(v)}" for k, v in sorted(fisher.items()))
        + "\n"
    )
    if "pretext_accuracy" in diag:
        out.write(f"pretext_accuracy = {_fmt(diag['pretext_accuracy'])}\n")
    audits = diag.get("freeze_audit", [])
    out.write(
        "freeze_audit = "
        + " ".join(f"{i}:{'ok' if ok else 'CHANGED'}" for i, ok in enumerate(audits))
        + "\n"
    )
    proto = diag.get("prototype_audit", [])
    out.write(
        "prototype_audit = "
        + " ".join(f"{i}:{'ok' if ok else 'CHANGED'}" for i, ok in enumerate(proto))
        + "\n"
    )
    return out.getvalue()


def write_run_report(report: RunReport, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_run_report(report))


def parse_run_report(text: str) -> RunReport:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(REPORT_HEADER):
        raise ParseError("not a run report: missing header line")
    version = lines[0].removeprefix(REPORT_HEADER).strip()
    if version != f"v{REPORT_VERSION}":
        raise ParseError(f"unsupported report version {version!r}")

    section = None
    config: list[tuple[str, str]] = []
    sessions: list[SessionReport] = []
    metrics: dict[str, float] = {}
    diagnostics: dict = {}
    current: dict | None = None

    def close_session():
        nonlocal current
        if current is None:
            return
        trace = []
        totals = current.get("loss_total", [])
        for i in range(len(totals)):
            trace.append(
                LossBreakdown(
                    total=totals[i],
                    ce_main=current["loss_ce_main"][i],
                    divergence=current["loss_divergence"][i],
                    distill_kl=current["loss_distill_kl"][i],
                    anchor_ce=current["loss_anchor_ce"][i],
                    alpha=0.0,
                    beta=0.0,
                    gamma=0.0,
                )
            )
        sessions.append(
            SessionReport(
                index=current["index"],
                way=int(current["way"]),
                seen_classes=int(current["seen_classes"]),
                accuracy=current["accuracy"],
                per_class=current["per_class"],
                loss_trace=trace,
            )
        )
        current = None

    for lineno, line in enumerate(lines[1:], start=2):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith("["):
            close_session()
            section = line.strip("[]")
            if section.startswith("session "):
                current = {"index": int(section.split()[1]), "per_class": {}}
            continue
        if " = " not in line:
            raise ParseError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition(" = ")
        key = key.strip()
        if section == "config":
            config.append((key, value))
        elif section is not None and section.startswith("session "):
            if key == "per_class":
                pc = {}
                for item in value.split():
                    cid, _, acc = item.partition(":")
                    pc[int(cid)] = float(acc)
                current["per_class"] = pc
            elif key.startswith("loss_"):
                current[key] = [float(v) for v in value.split()] if value else []
            elif key in ("way", "seen_classes"):
                current[key] = int(value)
            else:
                current[key] = float(value)
        elif section == "metrics":
            metrics[key] = float(value)
        elif section == "diagnostics":
            if key == "prefix_grad_norms":
                diagnostics[key] = [float(v) for v in value.split()] if value else []
            elif key == "fisher":
                fisher = {}
                for item in value.split():
                    group, _, v = item.rpartition(":")
                    fisher[group] = float(v)
                diagnostics[key] = fisher
            elif key in ("freeze_audit", "prototype_audit"):
                diagnostics[key] = [
                    item.partition(":")[2] == "ok" for item in value.split()
                ]
            else:
                diagnostics[key] = float(value)
        else:
            raise ParseError(f"line {lineno}: content outside any section")
    close_session()
    for need in ("a_base", "a_last", "a_avg", "fgt"):
        if need not in metrics:
            raise ParseError(f"report is missing metric {need!r}")
    return RunReport(
        config=config,
        sessions=sessions,
        a_base=metrics["a_base"],
        a_last=metrics["a_last"],
        a_avg=metrics["a_avg"],
        fgt=metrics["fgt"],
        diagnostics=diagnostics,
    )


def read_run_report(path: str) -> RunReport:
    with open(path, encoding="utf-8") as fh:
        return parse_run_report(fh.read())


# -- flat CSV ----------------------------------------------------------------


def csv_rows(report: RunReport) -> list[list[str]]:
    rows = [list(CSV_HEADER)]
    for s in report.sessions:
        rows.append(
            [
                str(s.index),
                _fmt(s.accuracy),
                _fmt(report.a_base),
                _fmt(report.a_last),
                _fmt(report.a_avg),
                _fmt(report.fgt),
            ]
        )
    return rows


def write_csv(report: RunReport, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        csv.writer(fh).writerows(csv_rows(report))


@dataclass
class CsvSummary:
    sessions: list[tuple[int, float]]
    a_base: float
    a_last: float
    a_avg: float
    fgt: float


def read_csv_summary(path: str) -> CsvSummary:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ParseError(f"unexpected CSV header {header!r}")
        rows = [row for row in reader if row]
    if not rows:
        raise ParseError("CSV has no session rows")
    sessions = [(int(r[0]), float(r[1])) for r in rows]
    last = rows[-1]
    return CsvSummary(
        sessions=sessions,
        a_base=float(last[2]),
        a_last=float(last[3]),
        a_avg=float(last[4]),
        fgt=float(last[5]),
    )


# -- merging ------------------------------------------------------------------


@dataclass
class MergedReport:
    """Across-seed medians, session by session and metric by metric."""

    count: int
    session_accuracy: list[float]
    a_base: float
    a_last: float
    a_avg: float
    fgt: float


def merge_reports(reports: list[RunReport]) -> MergedReport:
    if not reports:
        raise ParseError("nothing to merge")
    n_sessions = len(reports[0].sessions)
    for r in reports:
        if len(r.sessions) != n_sessions:
            raise ParseError("cannot merge reports with different session counts")
    per_session = [
        statistics.median(r.sessions[t].accuracy for r in reports)
        for t in range(n_sessions)
    ]
    return MergedReport(
        count=len(reports),
        session_accuracy=per_session,
        a_base=statistics.median(r.a_base for r in reports),
        a_last=statistics.median(r.a_last for r in reports),
        a_avg=statistics.median(r.a_avg for r in reports),
        fgt=statistics.median(r.fgt for r in reports),
    )
