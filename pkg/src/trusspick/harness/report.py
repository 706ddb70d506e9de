"""Stage-wise success tables and timing footers for episode records."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

from trusspick.errors import DomainError
from trusspick.harness.episode import EpisodeRecord
from trusspick.pose import OrientationClass

STAGES = ("sp_identified", "wrapped", "detached", "harvested")
HEADERS = ("Pose", "SP Identification", "Bottom-up Wrapping", "Detach", "Harvesting")
_CLASS_ORDER = [c.value for c in OrientationClass]


def format_rate(k: int, n: int) -> str:
    """``"p% (k/n)"`` with p rounded half-up to two decimals, ``"n/a"`` when n is 0.

    Whole percentages drop the decimals: ``"100% (10/10)"``.
    """
    if n == 0:
        return "n/a"
    if not 0 <= k <= n:
        raise DomainError(f"rate numerator {k} outside 0..{n}")
    p = (Decimal(100 * k) / Decimal(n)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    if p == p.to_integral_value():
        p = p.quantize(Decimal(1))
    return f"{p}% ({k}/{n})"


def _seconds(x: float) -> str:
    q = Decimal(repr(x)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{q.normalize():f}s"


@dataclass(frozen=True)
class StageCounts:
    pose: str
    counts: tuple[tuple[int, int], ...]  # (k, n) per stage, in STAGES order

    def cells(self) -> list[str]:
        return [format_rate(k, n) for k, n in self.counts]


@dataclass(frozen=True)
class Report:
    rows: tuple[StageCounts, ...]  # one per pose class, then the overall row
    successes: int
    total_time: float | None  # None when no record carries a time
    detail: tuple[EpisodeRecord, ...]

    @property
    def overall(self) -> StageCounts:
        return self.rows[-1]

    @property
    def mean_time(self) -> float | None:
        if self.total_time is None or not self.successes:
            return None
        return self.total_time / self.successes

    def footer(self) -> str:
        if self.total_time is None:
            return f"{self.successes} successes, time not recorded"
        avg = "n/a" if self.mean_time is None else _seconds(self.mean_time)
        return f"{self.successes} successes in {_seconds(self.total_time)}, avg. {avg}"


def _counts(pose: str, records: Sequence[EpisodeRecord]) -> StageCounts:
    sp = [r.sp_identified for r in records if r.sp_identified is not None]
    wr = [r.wrapped for r in records if r.wrapped is not None]
    de = [r.detached for r in records if r.wrapped and r.detached is not None]
    hv = [bool(r.harvested) for r in records]
    return StageCounts(pose, tuple((sum(x), len(x)) for x in (sp, wr, de, hv)))


def aggregate_report(records: Sequence[EpisodeRecord]) -> Report:
    """Per-pose-class and overall stage rates over the attempted records.

    Detachment is rated over wrapped records only.  The timing footer divides
    the time of every attempt, failed ones included, by the number of
    successful harvests.
    """
    if not records:
        raise DomainError("cannot report on zero records")
    attempted = [r for r in records if r.attempted]
    if not attempted:
        raise DomainError("no record was attempted")
    classes = sorted({r.pose_class for r in attempted}, key=lambda c: (_CLASS_ORDER.index(c) if c in _CLASS_ORDER else len(_CLASS_ORDER), c))
    rows = [_counts(c.capitalize(), [r for r in attempted if r.pose_class == c]) for c in classes]
    rows.append(_counts("All", attempted))
    timed = [r.time_used for r in attempted if r.time_used is not None]
    total = float(sum(timed)) if timed else None
    return Report(tuple(rows), sum(bool(r.harvested) for r in attempted), total, tuple(attempted))


# ---------------------------------------------------------------------------
# Renderers
# ---------------------------------------------------------------------------


def _mark(x: bool | None) -> str:
    return "-" if x is None else ("✓" if x else "×")


def render_markdown(report: Report, detail: bool = False) -> str:
    lines = ["| " + " | ".join(HEADERS) + " |", "|" + "---|" * len(HEADERS)]
    for row in report.rows:
        lines.append("| " + " | ".join([row.pose, *row.cells()]) + " |")
    lines += ["", report.footer()]
    if detail:
        lines += ["", "| # | Pose | Bottom-up Wrapping | Detach | Harvesting | Time used (s) |", "|---|---|---|---|---|---|"]
        for i, r in enumerate(report.detail, 1):
            t = "-" if r.time_used is None else _seconds(r.time_used)[:-1]
            lines.append(
                f"| {i} | {r.pose_class.capitalize()} | {_mark(r.wrapped)} | {_mark(r.detached)} | {_mark(r.harvested)} | {t} |"
            )
    return "\n".join(lines) + "\n"


def render_csv(report: Report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADERS)
    for row in report.rows:
        w.writerow([row.pose, *row.cells()])
    w.writerow(["Time", "", "", "", report.footer()])
    return buf.getvalue()


def render_json(report: Report) -> str:
    rows = []
    for row in report.rows:
        rows.append(
            {
                "pose": row.pose,
                **{s: {"k": k, "n": n, "rate": format_rate(k, n)} for s, (k, n) in zip(STAGES, row.counts)},
            }
        )
    out = {
        "rows": rows,
        "successes": report.successes,
        "total_time_s": None if report.total_time is None else round(report.total_time, 6),
        "mean_time_s": None if report.mean_time is None else round(report.mean_time, 6),
        "footer": report.footer(),
    }
    return json.dumps(out, indent=2, ensure_ascii=False) + "\n"


RENDERERS = {"md": render_markdown, "csv": render_csv, "json": render_json}
