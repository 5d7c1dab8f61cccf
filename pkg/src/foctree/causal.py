"""Subgroup treatment-effect estimates and bootstrap confidence intervals.

The effect for a subgroup is mu_hat + beta_hat' xbar, with xbar the sample
mean of the covariates over the subgroup's rows. Intervals come from a
percentile bootstrap that holds the tree and fusion pattern fixed: each
resample is rerouted through the tree, refit under the fixed pattern, and
its effects computed with the resample's own subgroup means.

The causal reading of these estimates presumes the usual identification
preconditions: observed outcomes equal the potential outcome under the
received arm, and treatment is as good as random given the covariates.
Neither is checkable from the data; they are the user's responsibility.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

from .data import Dataset, design_matrix
from .fitting import FittedModel, _column_layout
from .partition import assign


@dataclass
class SubgroupEffect:
    leaf: int
    n: int
    mu_hat: float
    beta_hat: np.ndarray
    xbar: np.ndarray
    tau_hat: float
    ci: tuple[float, float] | None = None


def estimate_sate(ds: Dataset, model: FittedModel) -> list[SubgroupEffect]:
    """Per-subgroup average treatment effects using training-sample means."""
    member = assign(model.tree, ds)
    d = ds.d
    effects = []
    for leaf in model.fit.coef.leaves:
        rows = member.assignment == leaf
        n_m = int(rows.sum())
        if n_m == 0:
            raise ValueError(f"active leaf {leaf} holds no rows")
        gamma = model.fit.coef.row(leaf)
        mu = float(gamma[1])
        beta = gamma[2 + d :]
        xbar = ds.x[rows].mean(axis=0)
        effects.append(
            SubgroupEffect(
                leaf=leaf,
                n=n_m,
                mu_hat=mu,
                beta_hat=beta,
                xbar=xbar,
                tau_hat=mu + float(beta @ xbar),
            )
        )
    return effects


class _BootstrapRefitter:
    """Refit machinery for one fixed (tree, pattern) on row resamples."""

    def __init__(self, ds: Dataset, model: FittedModel):
        self.ds = ds
        self.d = ds.d
        self.leaves = model.fit.coef.leaves
        self.L = len(self.leaves)
        member = assign(model.tree, ds)
        leaf_pos = {leaf: i for i, leaf in enumerate(self.leaves)}
        self.row_leaf = np.array([leaf_pos[leaf] for leaf in member.assignment])
        self.sel, n_cols = _column_layout(model.pattern, self.leaves)
        Z = design_matrix(ds)
        self.A = np.zeros((ds.n, n_cols))
        np.put_along_axis(self.A, self.sel[self.row_leaf], Z, axis=1)

    def taus(self, idx: np.ndarray) -> np.ndarray | None:
        """Effects for one resample, or None when a leaf or a treatment arm
        within a leaf is empty."""
        leaf_b = self.row_leaf[idx]
        t_b = self.ds.t[idx]
        counts = np.bincount(leaf_b, minlength=self.L)
        treated = np.bincount(leaf_b, weights=t_b, minlength=self.L)
        if np.any(counts == 0) or np.any(treated == 0) or np.any(treated == counts):
            return None
        theta, *_ = np.linalg.lstsq(self.A[idx], self.ds.y[idx], rcond=None)
        gamma = theta[self.sel]
        mu = gamma[:, 1]
        beta = gamma[:, 2 + self.d :]
        out = np.empty(self.L)
        for i in range(self.L):
            xbar = self.ds.x[idx[leaf_b == i]].mean(axis=0)
            out[i] = mu[i] + float(beta[i] @ xbar)
        return out


def _taus_block(
    refitter: _BootstrapRefitter, lo: int, hi: int, seed: int, max_attempts_factor: int
) -> tuple[np.ndarray, int]:
    """Replicates lo..hi-1. Replicate b draws from the seed stream
    (seed, b, attempt), so block boundaries never change the values."""
    n = refitter.ds.n
    out = np.empty((hi - lo, refitter.L))
    budget = max_attempts_factor * (hi - lo)
    spent = 0
    for b in range(lo, hi):
        attempt = 0
        while True:
            if spent >= budget:
                raise RuntimeError(
                    f"exhausted {budget} resampling attempts at replicate {b}; "
                    "a subgroup or treatment arm is too small to bootstrap"
                )
            rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(b, attempt))
            )
            idx = rng.integers(0, n, size=n)
            spent += 1
            attempt += 1
            row = refitter.taus(idx)
            if row is not None:
                out[b - lo] = row
                break
    return out, spent - (hi - lo)


def bootstrap_taus(
    ds: Dataset,
    model: FittedModel,
    n_boot: int,
    seed: int = 0,
    max_attempts_factor: int = 10,
    threads: int = 1,
) -> np.ndarray:
    """(n_boot, n_leaves) matrix of resampled effects, one row per replicate.

    Growing n_boot appends rows without disturbing earlier ones. Resamples
    with an empty leaf or an empty treatment arm inside a leaf are redrawn
    within an attempt budget of max_attempts_factor per replicate on
    average; running out is an error.
    """
    if n_boot < 2:
        raise ValueError(f"need at least 2 bootstrap replicates, got {n_boot}")
    refitter = _BootstrapRefitter(ds, model)
    if threads <= 1:
        taus, redraws = _taus_block(refitter, 0, n_boot, seed, max_attempts_factor)
    else:
        bounds = np.linspace(0, n_boot, threads + 1).astype(int)
        blocks = [(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(
                pool.map(
                    lambda lh: _taus_block(refitter, lh[0], lh[1], seed, max_attempts_factor),
                    blocks,
                )
            )
        taus = np.vstack([p[0] for p in parts])
        redraws = sum(p[1] for p in parts)
    if redraws:
        log.info("bootstrap redrew %d degenerate resamples over %d replicates", redraws, n_boot)
    return taus


def bootstrap_ci(
    ds: Dataset,
    model: FittedModel,
    n_boot: int,
    alpha: float = 0.10,
    seed: int = 0,
    threads: int = 1,
) -> list[SubgroupEffect]:
    """Point estimates plus percentile intervals at level 1 - alpha."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    effects = estimate_sate(ds, model)
    taus = bootstrap_taus(ds, model, n_boot, seed=seed, threads=threads)
    lo_q, hi_q = alpha / 2.0, 1.0 - alpha / 2.0
    for i, eff in enumerate(effects):
        eff.ci = (
            float(np.quantile(taus[:, i], lo_q)),
            float(np.quantile(taus[:, i], hi_q)),
        )
    return effects


def effects_to_csv(effects: list[SubgroupEffect], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["leaf", "n", "tau", "lo", "hi"])
        for e in effects:
            lo = "" if e.ci is None else repr(e.ci[0])
            hi = "" if e.ci is None else repr(e.ci[1])
            writer.writerow([e.leaf, e.n, repr(e.tau_hat), lo, hi])


def effects_to_json(effects: list[SubgroupEffect]) -> list[dict]:
    return [
        {
            "leaf": e.leaf,
            "n": e.n,
            "mu_hat": e.mu_hat,
            "beta_hat": [float(v) for v in e.beta_hat],
            "xbar": [float(v) for v in e.xbar],
            "tau_hat": e.tau_hat,
            "ci": None if e.ci is None else [e.ci[0], e.ci[1]],
        }
        for e in effects
    ]
