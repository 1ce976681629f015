"""Row-oriented check reports shared by all verification routines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

PASS, FAIL, XFAIL, SKIP = "PASS", "FAIL", "XFAIL", "SKIP"
VERDICTS = (PASS, FAIL, XFAIL, SKIP)


@dataclass
class Row:
    """One inequality or identity instance: ``lhs <= rhs`` with ``margin = rhs - lhs``."""

    case: str
    lhs: float
    rhs: float
    margin: float
    verdict: str
    detail: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"unknown verdict {self.verdict!r}")


@dataclass
class Report:
    """Ordered rows plus free-form summary data (fits, windows, constants)."""

    name: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, row: Row) -> Row:
        self.rows.append(row)
        return row

    @property
    def ok(self) -> bool:
        return all(r.verdict != FAIL for r in self.rows)

    def counts(self) -> dict:
        out = {v: 0 for v in VERDICTS}
        for r in self.rows:
            out[r.verdict] += 1
        return out

    def min_margin(self) -> float:
        vals = [r.margin for r in self.rows if r.verdict in (PASS, FAIL)]
        return min(vals) if vals else math.inf

    def extend(self, other: "Report", prefix: str = "") -> None:
        for r in other.rows:
            self.rows.append(Row(prefix + r.case, r.lhs, r.rhs, r.margin, r.verdict, r.detail))


def leq(case: str, lhs: float, rhs: float, rel_tol: float = 0.0, abs_tol: float = 0.0,
        **detail: Any) -> Row:
    """Row asserting ``lhs <= rhs`` up to ``abs_tol + rel_tol * max(|lhs|, |rhs|)``."""
    lhs, rhs = float(lhs), float(rhs)
    margin = rhs - lhs
    slack = abs_tol + rel_tol * max(abs(lhs), abs(rhs))
    ok = math.isfinite(margin) and margin >= -slack
    if math.isinf(rhs) and rhs > 0 and not math.isnan(lhs):
        ok = True
    return Row(case, lhs, rhs, margin, PASS if ok else FAIL, dict(detail))


def close(case: str, value: float, target: float, rel_tol: float = 0.0, abs_tol: float = 0.0,
          **detail: Any) -> Row:
    """Row asserting ``|value - target| <= abs_tol + rel_tol * |target|``.

    The margin is the unused tolerance, so it is negative exactly on failure.
    """
    value, target = float(value), float(target)
    allowed = abs_tol + rel_tol * abs(target)
    err = abs(value - target)
    ok = math.isfinite(err) and err <= allowed
    return Row(case, value, target, allowed - err, PASS if ok else FAIL, dict(detail))
