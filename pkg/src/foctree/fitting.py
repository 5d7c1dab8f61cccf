"""Fused least squares over tree leaves.

A fusion pattern assigns, for every design coefficient, the active leaves to
equality classes; leaves in the same class share that coefficient. Fitting
merges columns of the block design accordingly and solves a single
minimum-norm least-squares problem. The search over patterns minimizes

    sse / baseline_sse + lam * (number of unfused leaf pairs, summed over
    coefficients)

either exactly (full product of set partitions) or by block coordinate
descent over coefficients with multiple starts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import Iterator, Sequence

import numpy as np

from .data import Dataset, design_matrix, n_coefficients
from .partition import Membership, TreeStructure, assign

BELL = (1, 1, 2, 5, 15, 52, 203, 877, 4140)


def set_partitions(items: Sequence[int]) -> Iterator[tuple[tuple[int, ...], ...]]:
    """All set partitions of `items` in canonical form: classes ordered by
    smallest member, members ascending. Enumerated in restricted-growth
    order, so the all-in-one-class partition comes first."""
    items = sorted(items)
    n = len(items)
    if n == 0:
        yield ()
        return
    a = [0] * n
    while True:
        classes: list[list[int]] = []
        for it, lab in zip(items, a):
            while lab >= len(classes):
                classes.append([])
            classes[lab].append(it)
        yield tuple(tuple(c) for c in classes)
        # advance the restricted-growth string
        i = n - 1
        while i > 0:
            if a[i] <= max(a[:i]):
                a[i] += 1
                for j in range(i + 1, n):
                    a[j] = 0
                break
            a[i] = 0
            i -= 1
        else:
            return


def _canonical_partition(classes) -> tuple[tuple[int, ...], ...]:
    cleaned = [tuple(sorted(set(c))) for c in classes if len(c) > 0]
    return tuple(sorted(cleaned, key=lambda c: c[0]))


@dataclass(frozen=True)
class FusionPattern:
    """Per-coefficient set partition of the active leaves.

    groups[j] is the tuple of equality classes for coefficient j; each class
    is a sorted tuple of leaf ids, classes ordered by smallest member.
    """

    groups: tuple[tuple[tuple[int, ...], ...], ...]

    def __post_init__(self):
        groups = tuple(_canonical_partition(g) for g in self.groups)
        leaves = None
        for j, g in enumerate(groups):
            flat = sorted(leaf for c in g for leaf in c)
            if len(flat) != len(set(flat)):
                raise ValueError(f"coefficient {j}: a leaf appears in two classes")
            if leaves is None:
                leaves = flat
            elif flat != leaves:
                raise ValueError("all coefficients must partition the same leaf set")
        object.__setattr__(self, "groups", groups)

    @property
    def n_coef(self) -> int:
        return len(self.groups)

    @property
    def leaves(self) -> tuple[int, ...]:
        return tuple(sorted(leaf for c in self.groups[0] for leaf in c))

    @classmethod
    def all_distinct(cls, leaves: Sequence[int], n_coef: int) -> "FusionPattern":
        part = tuple((leaf,) for leaf in sorted(leaves))
        return cls(tuple(part for _ in range(n_coef)))

    @classmethod
    def all_fused(cls, leaves: Sequence[int], n_coef: int) -> "FusionPattern":
        part = (tuple(sorted(leaves)),)
        return cls(tuple(part for _ in range(n_coef)))

    def n_classes(self) -> int:
        return sum(len(g) for g in self.groups)

    def unfused_pairs(self) -> int:
        """Unordered leaf pairs not sharing a class, summed over coefficients."""
        L = len(self.leaves)
        total = 0
        for g in self.groups:
            fused = sum(len(c) * (len(c) - 1) // 2 for c in g)
            total += L * (L - 1) // 2 - fused
        return total

    def replace_coord(self, j: int, classes) -> "FusionPattern":
        groups = list(self.groups)
        groups[j] = _canonical_partition(classes)
        return FusionPattern(tuple(groups))

    def sort_key(self):
        return (self.n_classes(), self.groups)

    def to_json(self) -> list:
        return [[list(c) for c in g] for g in self.groups]

    @classmethod
    def from_json(cls, obj) -> "FusionPattern":
        return cls(tuple(tuple(tuple(int(v) for v in c) for c in g) for g in obj))


@dataclass(frozen=True)
class CoefTable:
    """Coefficient matrix, one row per active leaf (sorted by leaf id)."""

    leaves: tuple[int, ...]
    gamma: np.ndarray

    def __post_init__(self):
        g = np.array(self.gamma, dtype=float)
        g.setflags(write=False)
        if g.shape[0] != len(self.leaves):
            raise ValueError("one gamma row per leaf required")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "leaves", tuple(int(v) for v in self.leaves))

    def row(self, leaf: int) -> np.ndarray:
        return self.gamma[self.leaves.index(leaf)]


@dataclass(frozen=True)
class FitResult:
    coef: CoefTable
    sse: float
    normalized_loss: float
    penalty_count: int
    objective: float
    lam: float


@dataclass(frozen=True)
class FittedModel:
    """Tree, fusion pattern, and the fitted coefficients with the objective
    decomposition."""

    tree: TreeStructure
    pattern: FusionPattern
    fit: FitResult

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "tree": self.tree.to_json(),
            "pattern": self.pattern.to_json(),
            "coef": {
                "leaves": list(self.fit.coef.leaves),
                "gamma": [[float(v) for v in row] for row in self.fit.coef.gamma],
            },
            "objective": {
                "sse": self.fit.sse,
                "normalized_loss": self.fit.normalized_loss,
                "penalty_count": self.fit.penalty_count,
                "objective": self.fit.objective,
                "lambda": self.fit.lam,
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FittedModel":
        tree = TreeStructure.from_json(obj["tree"])
        pattern = FusionPattern.from_json(obj["pattern"])
        coef = CoefTable(tuple(obj["coef"]["leaves"]), np.array(obj["coef"]["gamma"]))
        o = obj["objective"]
        fit = FitResult(
            coef=coef,
            sse=float(o["sse"]),
            normalized_loss=float(o["normalized_loss"]),
            penalty_count=int(o["penalty_count"]),
            objective=float(o["objective"]),
            lam=float(o["lambda"]),
        )
        return cls(tree, pattern, fit)


def baseline_loss(ds: Dataset) -> float:
    """SSE of the pooled minimum-norm least-squares fit on the full design."""
    Z = design_matrix(ds)
    theta, *_ = np.linalg.lstsq(Z, ds.y, rcond=None)
    resid = ds.y - Z @ theta
    return float(resid @ resid)


def _normalize(sse: float, baseline: float) -> float:
    if baseline > 0.0:
        return sse / baseline
    # pooled fit is exact, so every refinement is exact as well
    return 0.0 if sse <= 1e-9 else math.inf


def _column_layout(pattern: FusionPattern, leaves: tuple[int, ...]) -> tuple[np.ndarray, int]:
    """Map (leaf index, coefficient) -> merged column index."""
    leaf_pos = {leaf: i for i, leaf in enumerate(leaves)}
    p = pattern.n_coef
    sel = np.empty((len(leaves), p), dtype=int)
    col = 0
    for j, g in enumerate(pattern.groups):
        for cls in g:
            for leaf in cls:
                sel[leaf_pos[leaf], j] = col
            col += 1
    return sel, col


def fit_fused(
    ds: Dataset,
    tree: TreeStructure,
    pattern: FusionPattern,
    lam: float = 0.0,
    membership: Membership | None = None,
    baseline: float | None = None,
) -> FitResult:
    """Fit the equality-fused least-squares model for a fixed tree/pattern.

    Each fusion class contributes one merged design column (a row's entry is
    its design value when its leaf belongs to the class, zero otherwise); the
    merged system is solved by minimum-norm least squares and the coefficients
    are scattered back to the per-leaf table.
    """
    if lam < 0:
        raise ValueError(f"lam must be nonnegative, got {lam}")
    leaves = tuple(sorted(tree.active_leaves()))
    if pattern.leaves != leaves:
        raise ValueError(
            f"pattern is over leaves {pattern.leaves}, tree has active leaves {leaves}"
        )
    if pattern.n_coef != n_coefficients(ds.d):
        raise ValueError(
            f"pattern has {pattern.n_coef} coefficients, design needs {n_coefficients(ds.d)}"
        )
    member = membership if membership is not None else assign(tree, ds)
    Z = design_matrix(ds)
    sel, n_cols = _column_layout(pattern, leaves)
    leaf_pos = {leaf: i for i, leaf in enumerate(leaves)}
    row_leaf_pos = np.array([leaf_pos[leaf] for leaf in member.assignment])

    A = np.zeros((ds.n, n_cols))
    cols_of_row = sel[row_leaf_pos]  # (n, p)
    np.put_along_axis(A, cols_of_row, Z, axis=1)
    theta, *_ = np.linalg.lstsq(A, ds.y, rcond=None)
    resid = ds.y - A @ theta
    sse = float(resid @ resid)

    gamma = theta[sel]
    base = baseline_loss(ds) if baseline is None else baseline
    norm = _normalize(sse, base)
    pairs = pattern.unfused_pairs()
    return FitResult(
        coef=CoefTable(leaves, gamma),
        sse=sse,
        normalized_loss=norm,
        penalty_count=pairs,
        objective=norm + lam * pairs,
        lam=lam,
    )


class TreeFitEngine:
    """Fast repeated pattern fits on one (dataset, tree) pair.

    Precomputes per-leaf Gram blocks once; a pattern fit then assembles the
    merged normal equations by index scatter and solves with a pseudoinverse,
    which yields the same minimum-norm solution as the explicit design.
    Results are memoized by canonical pattern.
    """

    def __init__(self, ds: Dataset, tree: TreeStructure, baseline: float | None = None):
        self.tree = tree
        self.leaves = tuple(sorted(tree.active_leaves()))
        self.p = n_coefficients(ds.d)
        member = assign(tree, ds)
        self.membership = member
        Z = design_matrix(ds)
        L = len(self.leaves)
        self.gram = np.zeros((L, self.p, self.p))
        self.zty = np.zeros((L, self.p))
        self.yty = 0.0
        for i, leaf in enumerate(self.leaves):
            rows = member.assignment == leaf
            Zl = Z[rows]
            yl = ds.y[rows]
            self.gram[i] = Zl.T @ Zl
            self.zty[i] = Zl.T @ yl
            self.yty += float(yl @ yl)
        self.baseline = baseline_loss(ds) if baseline is None else baseline
        self._memo: dict[tuple, float] = {}
        self._leaf_pos = {leaf: i for i, leaf in enumerate(self.leaves)}
        self._labels: dict[tuple, np.ndarray] = {}

    def _labels_of(self, part: tuple) -> np.ndarray:
        """Class label per leaf index for one coordinate's partition."""
        labs = self._labels.get(part)
        if labs is None:
            labs = np.empty(len(self.leaves), dtype=np.intp)
            for c, cls in enumerate(part):
                for leaf in cls:
                    labs[self._leaf_pos[leaf]] = c
            self._labels[part] = labs
        return labs

    def _selector(self, groups: tuple) -> tuple[np.ndarray, int]:
        """(leaf, coefficient) -> merged column index, plus the column count."""
        sel = np.empty((len(self.leaves), self.p), dtype=np.intp)
        col = 0
        for j, part in enumerate(groups):
            sel[:, j] = col + self._labels_of(part)
            col += len(part)
        return sel, col

    def sse_many(self, groups_list: list[tuple]) -> list[float]:
        """SSE per canonical partition tuple; misses are solved in one
        batched pass (solve with a pseudoinverse fallback on singular or
        ill-conditioned systems)."""
        missing = [g for g in groups_list if g not in self._memo]
        if missing:
            missing = list(dict.fromkeys(missing))
            sels = []
            cols = []
            for g in missing:
                sel, col = self._selector(g)
                sels.append(sel)
                cols.append(col)
            m = len(missing)
            pmax = max(cols)
            G = np.zeros((m, pmax, pmax))
            rhs = np.zeros((m, pmax))
            gram_flat = self.gram.ravel()
            zty_flat = self.zty.ravel()
            for i, sel in enumerate(sels):
                flat = (sel[:, :, None] * pmax + sel[:, None, :]).ravel()
                G[i] = np.bincount(flat, weights=gram_flat, minlength=pmax * pmax).reshape(
                    pmax, pmax
                )
                rhs[i] = np.bincount(sel.ravel(), weights=zty_flat, minlength=pmax)
                # unit diagonal on padding keeps the batched solve nonsingular
                pad = np.arange(cols[i], pmax)
                G[i, pad, pad] = 1.0
            try:
                theta = np.linalg.solve(G, rhs[..., None])[..., 0]
            except np.linalg.LinAlgError:
                theta = np.full((m, pmax), np.nan)
            scale = np.maximum(np.abs(rhs).max(axis=1), 1.0)
            bad = ~np.isfinite(theta).all(axis=1)
            resid = np.abs(np.einsum("bij,bj->bi", G, theta) - rhs).max(axis=1)
            bad |= resid > 1e-8 * scale
            for i in np.nonzero(bad)[0]:
                theta[i] = np.linalg.pinv(G[i], hermitian=True) @ rhs[i]
            sses = np.maximum(self.yty - np.einsum("bi,bi->b", rhs, theta), 0.0)
            for g, v in zip(missing, sses):
                self._memo[g] = float(v)
        return [self._memo[g] for g in groups_list]

    def sse_groups(self, groups: tuple) -> float:
        """SSE for a canonical per-coefficient partition tuple."""
        hit = self._memo.get(groups)
        if hit is not None:
            return hit
        return self.sse_many([groups])[0]

    def sse(self, pattern: FusionPattern) -> float:
        return self.sse_groups(pattern.groups)

    def objective(self, pattern: FusionPattern, lam: float) -> float:
        return _normalize(self.sse(pattern), self.baseline) + lam * pattern.unfused_pairs()


@dataclass(frozen=True)
class ExactBudget:
    """Enumerate the full product of per-coefficient set partitions."""

    max_patterns: int = 1_000_000


@dataclass(frozen=True)
class DescentBudget:
    """Block coordinate descent over coefficients with random restarts."""

    max_iter: int = 50
    restarts: int = 8
    seed: int = 0


def _random_groups(parts: list, n_coef: int, rng) -> tuple:
    return tuple(parts[int(rng.integers(0, len(parts)))] for _ in range(n_coef))


class _PatternSearch:
    """Search state over raw canonical partition tuples: per-coordinate
    penalty/class tables plus the engine's SSE memo keep the inner loop free
    of object construction."""

    def __init__(self, engine: TreeFitEngine, lam: float):
        self.engine = engine
        self.lam = lam
        self.parts = list(set_partitions(engine.leaves))
        L = len(engine.leaves)
        full = L * (L - 1) // 2
        self.pairs_of = {
            part: full - sum(len(c) * (len(c) - 1) // 2 for c in part) for part in self.parts
        }
        self.classes_of = {part: len(part) for part in self.parts}

    def key(self, groups: tuple):
        """(objective, total classes, lexicographic groups): the descent
        acceptance and tie-break order."""
        pairs = 0
        classes = 0
        for g in groups:
            pairs += self.pairs_of[g]
            classes += self.classes_of[g]
        obj = _normalize(self.engine.sse_groups(groups), self.engine.baseline) + self.lam * pairs
        return (obj, classes, groups)

    def keys_many(self, groups_list: list[tuple]) -> list[tuple]:
        sses = self.engine.sse_many(groups_list)
        out = []
        for groups, sse in zip(groups_list, sses):
            pairs = 0
            classes = 0
            for g in groups:
                pairs += self.pairs_of[g]
                classes += self.classes_of[g]
            obj = _normalize(sse, self.engine.baseline) + self.lam * pairs
            out.append((obj, classes, groups))
        return out

    def descend(self, start: tuple, max_iter: int):
        engine = self.engine
        baseline = engine.baseline
        lam = self.lam
        current = start
        cur_key = self.key(current)
        pairs_tot, classes_tot = cur_key[0], cur_key[1]  # classes from key; pairs recompute
        pairs_tot = sum(self.pairs_of[g] for g in current)
        classes_tot = cur_key[1]
        p = engine.p
        for _ in range(max_iter):
            improved = False
            for j in range(p):
                prefix, suffix = current[:j], current[j + 1 :]
                pairs_oth = pairs_tot - self.pairs_of[current[j]]
                classes_oth = classes_tot - self.classes_of[current[j]]
                cands = [
                    prefix + (part,) + suffix for part in self.parts if part != current[j]
                ]
                sses = engine.sse_many(cands)
                best_key = cur_key
                best_part = None
                for part, groups, sse in zip(
                    (part for part in self.parts if part != current[j]), cands, sses
                ):
                    key = (
                        _normalize(sse, baseline) + lam * (pairs_oth + self.pairs_of[part]),
                        classes_oth + self.classes_of[part],
                        groups,
                    )
                    if key < best_key:
                        best_key, best_part = key, part
                if best_part is not None:
                    current, cur_key = best_key[2], best_key
                    pairs_tot = pairs_oth + self.pairs_of[best_part]
                    classes_tot = best_key[1]
                    improved = True
            if not improved:
                break
        return current, cur_key


def optimize_pattern(
    engine: TreeFitEngine, lam: float, budget: ExactBudget | DescentBudget
) -> tuple[FusionPattern, float]:
    """Best fusion pattern for one tree under the given budget.

    Returns the pattern and its objective. Ties are broken toward more
    fusion (fewer classes), then by the canonical lexicographic order of
    the pattern.
    """
    leaves = engine.leaves
    p = engine.p
    search = _PatternSearch(engine, lam)
    best_key = None

    if isinstance(budget, ExactBudget):
        L = len(leaves)
        total = BELL[L] ** p
        if total > budget.max_patterns:
            raise ValueError(
                f"exact fusion search needs {total} patterns, over the budget "
                f"of {budget.max_patterns}; use descent mode"
            )
        chunk: list[tuple] = []
        for combo in product(search.parts, repeat=p):
            chunk.append(combo)
            if len(chunk) == 512:
                key = min(search.keys_many(chunk))
                if best_key is None or key < best_key:
                    best_key = key
                chunk = []
        if chunk:
            key = min(search.keys_many(chunk))
            if best_key is None or key < best_key:
                best_key = key
    else:
        distinct = tuple(tuple((leaf,) for leaf in leaves) for _ in range(p))
        fused = tuple((tuple(leaves),) for _ in range(p))
        starts = [distinct, fused]
        rng = np.random.default_rng(np.random.SeedSequence(budget.seed))
        for _ in range(budget.restarts):
            starts.append(_random_groups(search.parts, p, rng))
        for start in starts:
            _, key = search.descend(start, budget.max_iter)
            if best_key is None or key < best_key:
                best_key = key
    return FusionPattern(best_key[2]), best_key[0]


def search_fusion(
    ds: Dataset,
    tree: TreeStructure,
    lam: float,
    budget: ExactBudget | DescentBudget | None = None,
    engine: TreeFitEngine | None = None,
) -> tuple[FusionPattern, FitResult]:
    """Minimize normalized loss + lam * unfused pairs over fusion patterns
    for a fixed tree. Exact mode enumerates the full product of set
    partitions; descent mode runs seeded multi-start coordinate descent."""
    if budget is None:
        budget = DescentBudget()
    eng = engine if engine is not None else TreeFitEngine(ds, tree)
    best, _ = optimize_pattern(eng, lam, budget)
    result = fit_fused(
        ds, tree, best, lam=lam, membership=eng.membership, baseline=eng.baseline
    )
    return best, result
