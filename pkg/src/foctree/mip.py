"""LP-format emitter of the full mixed-integer quadratic program.

Writes the tree search as a standard text LP for cross-checking against an
external MIP solver. Covariates are min-max scaled to [0, 1] so each branch
threshold lives in [0, split indicator]. The z * gamma products are
linearized with auxiliary w variables and four big-M rows each; fusion
indicators bound coefficient gaps by 2M * r; a free residual variable per
row keeps the quadratic objective diagonal.

Variable name grammar (all indices 0-based):
    z_{i}_{t}      row i assigned to leaf t            (binary)
    l_{t}          leaf t is nonempty                  (binary)
    a_{m}_{k}      branch m splits on covariate k      (binary)
    d_{m}          branch m is split                   (binary)
    b_{m}          threshold of branch m               (continuous, [0, 1])
    gam_{t}_{j}    coefficient j at leaf t             (continuous, [-M, M])
    w_{i}_{t}_{j}  z_{i}_{t} * gam_{t}_{j}             (continuous, [-M, M])
    r_{j}_{t1}_{t2} coefficient j unfused between t1<t2 (binary)
    res_{i}        residual of row i                   (free)
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Dataset
from .fitting import baseline_loss
from .solver import SolveConfig

EPSILON = 1e-6


def _default_big_m(y: np.ndarray, design: np.ndarray) -> float:
    sds = design.std(axis=0)
    nonzero = sds[sds > 0]
    denom = max(1.0, float(nonzero.min())) if nonzero.size else 1.0
    return max(10.0 * float(np.max(np.abs(y))) / denom, 1.0)


def _fmt(v: float) -> str:
    return repr(float(v))


def _leaf_ancestors(leaf: int, depth: int) -> list[tuple[int, int]]:
    """(branch index, direction) pairs from the root; direction 1 is right."""
    out = []
    node = 0
    for level in range(depth - 1, -1, -1):
        bit = (leaf >> level) & 1
        out.append((node, bit))
        node = 2 * node + 1 + bit
    return out


def emit_lp(
    ds: Dataset,
    cfg: SolveConfig,
    out_path,
    big_m: float | None = None,
    epsilon: float = EPSILON,
) -> dict:
    """Write the program for (ds, cfg) and return variable/constraint counts."""
    n, d = ds.n, ds.d
    depth = cfg.depth
    n_leaf = 2**depth
    n_branch = 2**depth - 1
    p = 2 * d + 2

    lo = ds.x.min(axis=0)
    rng = ds.x.max(axis=0) - lo
    rng[rng == 0] = 1.0
    x = (ds.x - lo) / rng
    ones = np.ones((n, 1))
    t = ds.t.reshape(n, 1)
    design = np.hstack([ones, t, x, t * x])
    scaled = Dataset(x, ds.t, ds.y, ds.feature_names)
    baseline = baseline_loss(scaled)
    quad_scale = 2.0 / baseline if baseline > 0 else 2.0
    if big_m is None:
        big_m = _default_big_m(ds.y, design)

    leaves = range(n_leaf)
    branches = range(n_branch)
    pairs = [(t1, t2) for t1 in leaves for t2 in leaves if t1 < t2]

    lines: list[str] = []
    lines.append("\\ Fused optimal tree program")
    lines.append(f"\\ n={n} d={d} depth={depth} n_min={cfg.n_min} lambda={_fmt(cfg.lam)}")
    lines.append(f"\\ big_m={_fmt(big_m)} epsilon={_fmt(epsilon)}")
    lines.append("\\ objective: SSE / baseline_sse + lambda * sum r")
    lines.append("Minimize")
    obj_linear = ""
    if cfg.lam > 0:
        terms = [f"r_{j}_{t1}_{t2}" for j in range(p) for t1, t2 in pairs]
        obj_linear = " + ".join(f"{_fmt(cfg.lam)} {name}" for name in terms)
    quad = " + ".join(f"{_fmt(quad_scale)} res_{i} ^ 2" for i in range(n))
    if obj_linear:
        lines.append(f" obj: {obj_linear} + [ {quad} ] / 2")
    else:
        lines.append(f" obj: [ {quad} ] / 2")

    cons: list[str] = []

    # membership: one leaf per row
    for i in range(n):
        expr = " + ".join(f"z_{i}_{tt}" for tt in leaves)
        cons.append(f" assign_{i}: {expr} = 1")
    # rows only in open leaves
    for i in range(n):
        for tt in leaves:
            cons.append(f" open_{i}_{tt}: z_{i}_{tt} - l_{tt} <= 0")
    # open leaves hold at least n_min rows
    for tt in leaves:
        expr = " + ".join(f"z_{i}_{tt}" for i in range(n))
        cons.append(f" minsize_{tt}: {expr} - {_fmt(cfg.n_min)} l_{tt} >= 0")
    # w = z * gam via four big-M rows
    for i in range(n):
        for tt in leaves:
            for j in range(p):
                w = f"w_{i}_{tt}_{j}"
                z = f"z_{i}_{tt}"
                g = f"gam_{tt}_{j}"
                cons.append(f" wub1_{i}_{tt}_{j}: {w} - {_fmt(big_m)} {z} <= 0")
                cons.append(f" wlb1_{i}_{tt}_{j}: {w} + {_fmt(big_m)} {z} >= 0")
                cons.append(f" wub2_{i}_{tt}_{j}: {w} - {g} + {_fmt(big_m)} {z} <= {_fmt(big_m)}")
                cons.append(f" wlb2_{i}_{tt}_{j}: {w} - {g} - {_fmt(big_m)} {z} >= {_fmt(-big_m)}")
    # residual definition: res_i = y_i - sum_t sum_j Z_ij w_itj
    for i in range(n):
        terms = []
        for tt in leaves:
            for j in range(p):
                c = design[i, j]
                if c == 0.0:
                    continue
                terms.append(f"+ {_fmt(c)} w_{i}_{tt}_{j}" if c > 0 else f"- {_fmt(-c)} w_{i}_{tt}_{j}")
        expr = " ".join(terms)
        cons.append(f" resid_{i}: res_{i} {expr} = {_fmt(ds.y[i])}")
    # routing through ancestor splits
    for tt in leaves:
        for m, direction in _leaf_ancestors(tt, depth):
            for i in range(n):
                ax = " ".join(
                    (f"+ {_fmt(x[i, k])} a_{m}_{k}" if x[i, k] >= 0 else f"- {_fmt(-x[i, k])} a_{m}_{k}")
                    for k in range(d)
                    if x[i, k] != 0.0
                )
                lhs = f"{ax} " if ax else ""
                if direction == 1:
                    # a'x >= b - (1 - z)
                    cons.append(f" routeR_{i}_{tt}_{m}: {lhs}- b_{m} - z_{i}_{tt} >= -1")
                else:
                    # a'x < b + (1 - z), strictness via epsilon
                    cons.append(
                        f" routeL_{i}_{tt}_{m}: {lhs}- b_{m} + z_{i}_{tt} <= {_fmt(1.0 - epsilon)}"
                    )
    # one split variable per split branch
    for m in branches:
        expr = " + ".join(f"a_{m}_{k}" for k in range(d))
        cons.append(f" choose_{m}: {expr} - d_{m} = 0")
    # threshold confined to [0, d_m]
    for m in branches:
        cons.append(f" bbound_{m}: b_{m} - d_{m} <= 0")
    # children split only under split parents
    for m in branches:
        if m == 0:
            continue
        cons.append(f" hier_{m}: d_{m} - d_{(m - 1) // 2} <= 0")
    # fusion: |gam_t1_j - gam_t2_j| <= 2M r
    for j in range(p):
        for t1, t2 in pairs:
            g1, g2, r = f"gam_{t1}_{j}", f"gam_{t2}_{j}", f"r_{j}_{t1}_{t2}"
            cons.append(f" fuse1_{j}_{t1}_{t2}: {g1} - {g2} - {_fmt(2 * big_m)} {r} <= 0")
            cons.append(f" fuse2_{j}_{t1}_{t2}: {g2} - {g1} - {_fmt(2 * big_m)} {r} <= 0")

    lines.append("Subject To")
    lines.extend(cons)

    lines.append("Bounds")
    for m in branches:
        lines.append(f" 0 <= b_{m} <= 1")
    for tt in leaves:
        for j in range(p):
            lines.append(f" {_fmt(-big_m)} <= gam_{tt}_{j} <= {_fmt(big_m)}")
    for i in range(n):
        for tt in leaves:
            for j in range(p):
                lines.append(f" {_fmt(-big_m)} <= w_{i}_{tt}_{j} <= {_fmt(big_m)}")
    for i in range(n):
        lines.append(f" res_{i} free")

    binaries = (
        [f"z_{i}_{tt}" for i in range(n) for tt in leaves]
        + [f"l_{tt}" for tt in leaves]
        + [f"a_{m}_{k}" for m in branches for k in range(d)]
        + [f"d_{m}" for m in branches]
        + [f"r_{j}_{t1}_{t2}" for j in range(p) for t1, t2 in pairs]
    )
    lines.append("Binary")
    for name in binaries:
        lines.append(f" {name}")
    lines.append("End")

    n_continuous = n_branch + n_leaf * p + n * n_leaf * p + n
    summary = {
        "n_vars": len(binaries) + n_continuous,
        "n_binary": len(binaries),
        "n_continuous": n_continuous,
        "n_constraints": len(cons),
        "big_m": float(big_m),
        "epsilon": float(epsilon),
        "path": str(out_path),
    }
    Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return summary
