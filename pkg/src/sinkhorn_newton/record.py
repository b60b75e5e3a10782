"""Per-iteration convergence log shared by the Sinkhorn and Newton solvers."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

CSV_HEADER = (
    "outer_iter",
    "cum_cg_iters",
    "wall_time_s",
    "violation_inf",
    "cost_error",
    "plan_error_l1",
)


@dataclass
class IterationRow:
    outer_iter: int
    cum_cg_iters: int
    wall_time_s: float
    violation_inf: float
    cost_error: float | None = None
    plan_error_l1: float | None = None


@dataclass
class ConvergenceRecord:
    """Iteration history of one solve.

    ``cum_cg_iters`` is the cost-normalized iteration axis: cumulative CG
    iterations for Newton, the sweep count for Sinkhorn.
    """

    solver: str
    rows: list = field(default_factory=list)
    converged: bool = False
    clipped_steps: int = 0
    cg_reports: list = field(default_factory=list)
    # unregularized cost <C, P^k> per row; turned into cost_error by finalize()
    costs: list = field(default_factory=list)

    def append(self, outer_iter, cum_cg, wall, violation, cost=None, plan_error=None):
        self.rows.append(
            IterationRow(
                int(outer_iter),
                int(cum_cg),
                float(wall),
                float(violation),
                None,
                None if plan_error is None else float(plan_error),
            )
        )
        self.costs.append(None if cost is None else float(cost))

    def finalize(self):
        """Fill ``cost_error`` relative to the last iterate's cost."""
        if self.costs and self.costs[-1] is not None:
            ref = self.costs[-1]
            for row, c in zip(self.rows, self.costs):
                row.cost_error = abs(c - ref)
        return self

    def __len__(self):
        return len(self.rows)

    @property
    def violations(self):
        return np.array([r.violation_inf for r in self.rows])

    @property
    def outer_iterations(self):
        return self.rows[-1].outer_iter if self.rows else 0

    @property
    def total_cg_iterations(self):
        return self.rows[-1].cum_cg_iters if self.rows else 0

    @property
    def final_violation(self):
        return self.rows[-1].violation_inf if self.rows else float("nan")

    @property
    def wall_time(self):
        return self.rows[-1].wall_time_s if self.rows else 0.0

    def first_reaching(self, level):
        """First row whose violation is below ``level``, or ``None``."""
        for row in self.rows:
            if row.violation_inf < level:
                return row
        return None

    def write_csv(self, fh, header=True, prefix=()):
        """Write rows in the stable CSV schema.

        ``prefix`` is a sequence of ``(name, value)`` label columns put in
        front of the standard ones (used by sweeps and comparisons).
        """
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow([k for k, _ in prefix] + list(CSV_HEADER))
        for r in self.rows:
            w.writerow(
                [v for _, v in prefix]
                + [
                    r.outer_iter,
                    r.cum_cg_iters,
                    _fmt(r.wall_time_s),
                    _fmt(r.violation_inf),
                    _fmt(r.cost_error),
                    _fmt(r.plan_error_l1),
                ]
            )

    def to_csv(self):
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def _fmt(x):
    if x is None:
        return ""
    # repr() is locale independent and round-trips
    return repr(float(x))


def read_csv(fh):
    """Parse the stable CSV schema back into a ConvergenceRecord (converged left False)."""
    rec = ConvergenceRecord(solver="")
    reader = csv.DictReader(fh)
    for row in reader:
        rec.rows.append(
            IterationRow(
                int(row["outer_iter"]),
                int(row["cum_cg_iters"]),
                float(row["wall_time_s"]),
                float(row["violation_inf"]),
                float(row["cost_error"]) if row["cost_error"] else None,
                float(row["plan_error_l1"]) if row["plan_error_l1"] else None,
            )
        )
        rec.costs.append(None)
    return rec
