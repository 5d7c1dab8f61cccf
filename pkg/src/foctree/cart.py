"""Greedy tree baseline with a full linear model in every leaf.

At each node every feasible (variable, threshold) candidate is scored by the
summed least-squares SSE of the two children on the interaction design; the
best split is committed and the children recurse. A node stays a leaf when
the target depth is reached or no candidate strictly reduces its SSE.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, n_coefficients
from .fitting import FittedModel, FusionPattern, fit_fused
from .partition import MAX_DEPTH, Split, TreeStructure, default_candidate_grid
from .solver import _Scanner

_IMPROVE_RTOL = 1e-12


@dataclass(frozen=True)
class CartConfig:
    depth: int = 2
    n_min: int = 1
    threshold_mode: str = "auto"
    quantile_bins: int = 16

    def __post_init__(self):
        if self.n_min < 1:
            raise ValueError(f"n_min must be >= 1, got {self.n_min}")
        if not 0 <= self.depth <= MAX_DEPTH:
            raise ValueError(f"depth must be in [0, {MAX_DEPTH}], got {self.depth}")


def fit_cart(ds: Dataset, cfg: CartConfig) -> FittedModel:
    """Grow a greedy depth-limited tree and fit unfused per-leaf models."""
    if ds.n < cfg.n_min:
        raise ValueError(f"infeasible: n={ds.n} is below n_min={cfg.n_min}")
    candidates = default_candidate_grid(ds, mode=cfg.threshold_mode, q=cfg.quantile_bins)
    scanner = _Scanner(ds, candidates, cfg.n_min)
    slots: list[Split | None] = [None] * (2**cfg.depth - 1)
    # absolute floor: an already-exact node never splits on rounding noise
    sse_floor = _IMPROVE_RTOL * float(ds.y @ ds.y)

    def grow(rows: np.ndarray, branch: int, level: int) -> None:
        if level == cfg.depth:
            return
        node_sse = scanner.leaf_sse(rows)
        if node_sse <= sse_floor:
            return
        best = None
        best_key = None
        for var, thr, lrows, rrows, sl, sr in scanner.split_options(rows):
            key = (sl + sr, var, thr)
            if best_key is None or key < best_key:
                best_key = key
                best = (var, thr, lrows, rrows)
        if best is None or best_key[0] >= node_sse * (1.0 - _IMPROVE_RTOL):
            return
        var, thr, lrows, rrows = best
        slots[branch] = Split(var, thr)
        grow(lrows, 2 * branch + 1, level + 1)
        grow(rrows, 2 * branch + 2, level + 1)

    grow(np.arange(ds.n), 0, 0)
    tree = TreeStructure(cfg.depth, tuple(slots))
    pattern = FusionPattern.all_distinct(tree.active_leaves(), n_coefficients(ds.d))
    fit = fit_fused(ds, tree, pattern, lam=0.0)
    return FittedModel(tree, pattern, fit)
