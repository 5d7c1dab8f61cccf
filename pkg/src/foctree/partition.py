"""Hierarchical tree structures, routing, and candidate split thresholds.

A depth-K structure has 2^K - 1 branch positions in level order (children of
branch i are 2i+1 and 2i+2) and 2^K leaf positions. Branch positions may be
unsplit; a row reaching an unsplit branch keeps descending left, so the
leftmost leaf position under each maximal unsplit region is the single
active leaf of that region. Routing sends a row left when x[variable] is
strictly below the threshold and right otherwise (ties go right).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .data import Dataset

MAX_DEPTH = 3


@dataclass(frozen=True)
class Split:
    variable: int
    threshold: float

    def __post_init__(self):
        if self.variable < 0:
            raise ValueError(f"split variable must be nonnegative, got {self.variable}")
        object.__setattr__(self, "threshold", float(self.threshold))


@dataclass(frozen=True)
class TreeStructure:
    """Full binary tree of some depth with optional axis-aligned splits.

    `splits[i]` is the Split at branch position i or None when that branch is
    unsplit. A branch may carry a split only if its parent does (the root is
    exempt). `leaf_active` is derived from the splits.
    """

    depth: int
    splits: tuple[Split | None, ...]

    def __post_init__(self):
        if not 0 <= self.depth <= MAX_DEPTH:
            raise ValueError(f"depth must be in [0, {MAX_DEPTH}], got {self.depth}")
        splits = tuple(self.splits)
        if len(splits) != 2**self.depth - 1:
            raise ValueError(
                f"depth {self.depth} needs {2 ** self.depth - 1} branch slots, got {len(splits)}"
            )
        for i, s in enumerate(splits):
            if i > 0 and s is not None and splits[(i - 1) // 2] is None:
                raise ValueError(
                    f"branch {i} is split but its parent {(i - 1) // 2} is not"
                )
        object.__setattr__(self, "splits", splits)

    @property
    def n_leaf_positions(self) -> int:
        return 2**self.depth

    @property
    def leaf_active(self) -> tuple[bool, ...]:
        active = [False] * self.n_leaf_positions
        for leaf in self.active_leaves():
            active[leaf] = True
        return tuple(active)

    def active_leaves(self) -> tuple[int, ...]:
        """Leaf positions reachable under the descend-left-when-unsplit rule."""
        out = []

        def walk(branch: int, level: int, path: int):
            if level == self.depth:
                out.append(path)
                return
            if self.splits[branch] is None:
                walk(2 * branch + 1, level + 1, path * 2)
            else:
                walk(2 * branch + 1, level + 1, path * 2)
                walk(2 * branch + 2, level + 1, path * 2 + 1)

        walk(0, 0, 0)
        return tuple(sorted(out))

    def route(self, x_row: np.ndarray) -> int:
        """Leaf position a single covariate vector falls into."""
        branch, path = 0, 0
        for _ in range(self.depth):
            s = self.splits[branch]
            bit = 0 if s is None else int(x_row[s.variable] >= s.threshold)
            path = path * 2 + bit
            branch = 2 * branch + 1 + bit
        return path

    def sort_key(self):
        """Lexicographic key: unsplit nodes first, then by (variable,
        threshold, left key, right key). Used for deterministic tie-breaks."""

        def key(branch: int, level: int):
            if level == self.depth or self.splits[branch] is None:
                return (0,)
            s = self.splits[branch]
            return (
                1,
                s.variable,
                s.threshold,
                key(2 * branch + 1, level + 1),
                key(2 * branch + 2, level + 1),
            )

        return key(0, 0)

    def to_json(self) -> dict:
        return {
            "depth": self.depth,
            "nodes": [
                {
                    "id": i,
                    "variable": None if s is None else s.variable,
                    "threshold": None if s is None else s.threshold,
                }
                for i, s in enumerate(self.splits)
            ],
            "active_leaves": list(self.active_leaves()),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TreeStructure":
        depth = int(obj["depth"])
        splits: list[Split | None] = [None] * (2**depth - 1)
        for node in obj["nodes"]:
            if node["variable"] is not None:
                splits[int(node["id"])] = Split(int(node["variable"]), float(node["threshold"]))
        tree = cls(depth, tuple(splits))
        declared = sorted(int(v) for v in obj.get("active_leaves", tree.active_leaves()))
        if tuple(declared) != tree.active_leaves():
            raise ValueError("active_leaves inconsistent with the declared splits")
        return tree

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def stump() -> TreeStructure:
    return TreeStructure(0, ())


@dataclass(frozen=True)
class Membership:
    """Row-to-active-leaf assignment; every row lands in exactly one leaf."""

    assignment: np.ndarray
    leaf_counts: dict[int, int]

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=int)
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        if sum(self.leaf_counts.values()) != a.size:
            raise ValueError("leaf counts do not sum to the number of rows")


def assign(tree: TreeStructure, ds: Dataset) -> Membership:
    """Route every dataset row through the tree."""
    for s in tree.splits:
        if s is not None and s.variable >= ds.d:
            raise ValueError(f"split variable {s.variable} out of range for d={ds.d}")
    n = ds.n
    path = np.zeros(n, dtype=int)
    branch = np.zeros(n, dtype=int)
    for _ in range(tree.depth):
        bit = np.zeros(n, dtype=int)
        for b in np.unique(branch):
            s = tree.splits[b]
            if s is None:
                continue
            mask = branch == b
            bit[mask] = (ds.x[mask, s.variable] >= s.threshold).astype(int)
        path = path * 2 + bit
        branch = 2 * branch + 1 + bit
    active = tree.active_leaves()
    counts = {leaf: int(np.sum(path == leaf)) for leaf in active}
    return Membership(path, counts)


def candidate_thresholds(
    ds: Dataset, variable: int, mode: str = "midpoints", q: int = 16
) -> np.ndarray:
    """Candidate split thresholds for one covariate, sorted ascending.

    midpoints: midpoints of consecutive distinct sorted values.
    quantile: q empirical quantiles at levels (i+0.5)/q, deduplicated.
    A constant column yields an empty list.
    """
    if ds.n < 2:
        raise ValueError("need at least 2 rows to propose thresholds")
    if not 0 <= variable < ds.d:
        raise ValueError(f"variable {variable} out of range for d={ds.d}")
    values = np.unique(ds.x[:, variable])
    if values.size < 2:
        return np.empty(0)
    if mode == "midpoints":
        return (values[:-1] + values[1:]) / 2.0
    if mode == "quantile":
        if q < 1:
            raise ValueError("quantile mode needs q >= 1")
        levels = (np.arange(q) + 0.5) / q
        return np.unique(np.quantile(ds.x[:, variable], levels))
    raise ValueError(f"unknown threshold mode {mode!r}")


def default_candidate_grid(
    ds: Dataset,
    mode: str = "auto",
    q: int = 16,
    midpoint_cutoff: int = 64,
) -> list[np.ndarray]:
    """Per-variable threshold lists. In auto mode a variable gets exact
    midpoints when it has at most `midpoint_cutoff` distinct values and a
    q-point quantile grid otherwise."""
    grids = []
    for k in range(ds.d):
        if mode == "auto":
            m = "midpoints" if np.unique(ds.x[:, k]).size <= midpoint_cutoff else "quantile"
        else:
            m = mode
        grids.append(candidate_thresholds(ds, k, mode=m, q=q))
    return grids


def enumerate_trees(
    depth: int,
    candidates_per_var: Sequence[Sequence[float]],
    allow_partial: bool = True,
) -> Iterator[TreeStructure]:
    """Yield every distinct tree over the candidate grid exactly once.

    With allow_partial, any subset of branch positions may be unsplit subject
    to the parent-before-child rule; otherwise only fully split trees are
    produced. Guarded to depth <= MAX_DEPTH.
    """
    if not 0 <= depth <= MAX_DEPTH:
        raise ValueError(f"depth must be in [0, {MAX_DEPTH}], got {depth}")
    pairs = [
        (v, float(t)) for v in range(len(candidates_per_var)) for t in candidates_per_var[v]
    ]
    n_branch = 2**depth - 1
    if depth == 0:
        yield stump()
        return

    def fill(slots: list, branch: int, level: int) -> Iterator[list]:
        """All assignments for the subtree rooted at `branch`."""
        if level == depth:
            yield slots
            return
        if allow_partial:
            yield slots  # unsplit here; the whole subtree stays unsplit
        for v, t in pairs:
            slots2 = list(slots)
            slots2[branch] = Split(v, t)
            for left_done in fill(slots2, 2 * branch + 1, level + 1):
                yield from fill(left_done, 2 * branch + 2, level + 1)

    for slots in fill([None] * n_branch, 0, 0):
        yield TreeStructure(depth, tuple(slots))
