"""BIC-driven selection of the fusion penalty over a grid.

The criterion is n * log(sse / n) + df * log(n) on the unnormalized SSE,
where df counts one parameter per fusion class summed over coefficients.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

from .data import Dataset
from .fitting import FittedModel
from .solver import SolveConfig, solve_path


@dataclass(frozen=True)
class LambdaGrid:
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValueError("lambda grid must be nonempty")
        if any(v < 0 for v in vals):
            raise ValueError("lambda values must be nonnegative")
        if len(set(vals)) != len(vals):
            raise ValueError("lambda values must be distinct")
        object.__setattr__(self, "values", tuple(sorted(vals)))

    @classmethod
    def paper(cls) -> "LambdaGrid":
        return cls(tuple(i / 10000 for i in range(1, 16)))

    @classmethod
    def small_sample(cls) -> "LambdaGrid":
        return cls(tuple(i / 500 for i in range(1, 6)))

    @classmethod
    def balanced(cls) -> "LambdaGrid":
        return cls(tuple(i / 10000 for i in range(1, 21)))

    @classmethod
    def case_study(cls) -> "LambdaGrid":
        return cls.linspace(0.0, 0.005, 50)

    @classmethod
    def linspace(cls, lo: float, hi: float, count: int) -> "LambdaGrid":
        if count < 1:
            raise ValueError("count must be >= 1")
        if count == 1:
            return cls((lo,))
        step = (hi - lo) / (count - 1)
        return cls(tuple(lo + i * step for i in range(count)))


def bic(ds: Dataset, model: FittedModel) -> tuple[float, int]:
    """(criterion value, degrees of freedom) for a fitted model.

    df is the number of distinct parameters: one per fusion class per
    coefficient. A zero SSE yields -inf (reported, never an error).
    """
    df = model.pattern.n_classes()
    sse = model.fit.sse
    n = ds.n
    if sse <= 0.0:
        return -math.inf, df
    return n * math.log(sse / n) + df * math.log(n), df


@dataclass
class TraceEntry:
    lam: float
    model: FittedModel | None
    bic: float | None
    df: int | None
    certified: bool | None
    error: str | None = None


@dataclass
class SelectionTrace:
    entries: list[TraceEntry]
    chosen_index: int

    @property
    def chosen(self) -> TraceEntry:
        return self.entries[self.chosen_index]


def select_lambda(
    ds: Dataset, cfg: SolveConfig, grid: LambdaGrid, threads: int = 1
) -> SelectionTrace:
    """Solve per grid value and return the criterion-minimizing model.

    Per-value failures are recorded in the trace; selection runs over the
    successes. Criterion ties go to the smaller penalty.
    """
    entries: list[TraceEntry] = []
    reports = solve_path(ds, cfg, grid.values, threads=threads, collect_errors=True)
    for lam, report in zip(grid.values, reports):
        if isinstance(report, Exception):
            entries.append(TraceEntry(lam, None, None, None, None, str(report)))
            continue
        value, df = bic(ds, report.best)
        entries.append(TraceEntry(lam, report.best, value, df, report.certified_optimal))
    chosen = None
    for i, e in enumerate(entries):
        if e.model is None:
            continue
        if chosen is None or e.bic < entries[chosen].bic:
            chosen = i
    if chosen is None:
        raise ValueError("every grid point failed; nothing to select")
    return SelectionTrace(entries, chosen)


def trace_to_csv(trace: SelectionTrace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "objective", "sse", "df", "bic", "certified", "chosen", "error"])
        for i, e in enumerate(trace.entries):
            if e.model is None:
                writer.writerow([repr(e.lam), "", "", "", "", "", "", e.error or ""])
            else:
                writer.writerow(
                    [
                        repr(e.lam),
                        repr(e.model.fit.objective),
                        repr(e.model.fit.sse),
                        e.df,
                        repr(e.bic),
                        int(bool(e.certified)),
                        int(i == trace.chosen_index),
                        "",
                    ]
                )
