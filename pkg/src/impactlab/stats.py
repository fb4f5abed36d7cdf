"""Monte Carlo reductions and log-log rate fitting shared by the studies."""

from __future__ import annotations

from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numpy.typing import NDArray

from impactlab.io import fmt_float, write_rows

FloatArray = NDArray[np.float64]


def fit_loglog(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line through ``(log x, log y)``.

    Returns ``(slope, intercept, residual)`` where ``residual`` is the RMS
    deviation of the fitted line in log space.
    """
    lx = np.log(np.asarray(x, dtype=float))
    ly = np.log(np.asarray(y, dtype=float))
    A = np.vstack([lx, np.ones_like(lx)]).T
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - (slope * lx + intercept)
    return float(slope), float(intercept), float(np.sqrt(np.mean(resid**2)))


def grouped_jackknife(group_sums: FloatArray, group_counts: FloatArray, stat: Callable[[FloatArray], Any]):
    """Delete-one-group jackknife of ``stat(mean)``.

    ``group_sums`` has shape ``(G, ...)``: per-group sums of the per-path
    quantity whose mean feeds ``stat``.  Returns ``(estimate, std_err)``
    with the same trailing shape as ``stat``'s output.
    """
    sums = np.asarray(group_sums, dtype=float)
    counts = np.asarray(group_counts, dtype=float)
    total, n = sums.sum(axis=0), counts.sum()
    estimate = np.asarray(stat(total / n))
    G = sums.shape[0]
    if G < 2:
        return estimate, np.full(estimate.shape, np.nan)
    loo = np.stack([np.asarray(stat((total - sums[g]) / (n - counts[g]))) for g in range(G)])
    se = np.sqrt((G - 1) / G * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))
    return estimate, se


def map_batches(fn: Callable[[int, int], Any], n_paths: int, batch_size: int, threads: int = 1) -> list[Any]:
    """Apply ``fn(offset, count)`` over consecutive path batches.

    Batches are fixed by ``batch_size`` alone, so results (returned in batch
    order) do not depend on the number of worker threads.
    """
    offsets = list(range(0, n_paths, batch_size))
    jobs = [(o, min(batch_size, n_paths - o)) for o in offsets]
    if threads <= 1 or len(jobs) == 1:
        return [fn(o, c) for o, c in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


@dataclass
class ConvergenceTable:
    """Error versus a refinement parameter, with a fitted log-log slope."""

    parameter: str
    values: FloatArray
    errors: FloatArray
    std_errs: FloatArray
    error_name: str = "mse"
    slope: float = float("nan")
    intercept: float = float("nan")
    residual: float = float("nan")
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.errors = np.asarray(self.errors, dtype=float)
        self.std_errs = np.asarray(self.std_errs, dtype=float)
        if len(self.values) >= 2 and np.all(self.errors > 0):
            self.slope, self.intercept, self.residual = fit_loglog(self.values, self.errors)

    def rows(self) -> Iterable[list[str]]:
        yield [self.parameter, self.error_name, "std_err", "slope"]
        for v, e, s in zip(self.values, self.errors, self.std_errs):
            yield [fmt_float(v), fmt_float(e), fmt_float(s), ""]
        yield ["fit", "", fmt_float(self.residual), fmt_float(self.slope)]

    def to_csv(self, path: str | Path, header_comment: str | None = None) -> None:
        write_rows(path, self.rows(), header_comment=header_comment)

    def __str__(self) -> str:
        lines = [f"{self.parameter:>12} {self.error_name:>14} {'std_err':>12}"]
        for v, e, s in zip(self.values, self.errors, self.std_errs):
            lines.append(f"{v:12.6g} {e:14.6e} {s:12.3e}")
        lines.append(f"slope = {self.slope:.4f} (log-space residual {self.residual:.3g})")
        return "\n".join(lines)

