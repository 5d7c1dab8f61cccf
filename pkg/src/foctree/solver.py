"""Globally optimal fused tree search over a candidate-threshold grid.

The search runs in three phases. Phase 1 scans the whole tree space with a
decomposed pass: the unfused loss of a tree is the sum of per-leaf
least-squares SSEs, and for a fixed root split the best left and right
subtrees are independent, so the scan is linear in (root candidates) x
(child candidates) rather than in the number of trees. Unfused losses are
sound lower bounds on any fused objective because fusing coefficients can
only raise the SSE and the penalty is nonnegative. Phase 2 runs the fusion
search on the lowest-loss trees to obtain an incumbent. Phase 3 walks the
remaining trees in ascending lower-bound order, searching each until the
bound strictly exceeds the incumbent; the report is certified when the walk
exhausts or reaches that cut before the time limit.

With lam = 0 the optimum is the minimum-unfused-loss tree with the
all-distinct pattern, read directly off the phase-1 scan.
"""

from __future__ import annotations

import heapq
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .data import Dataset, design_matrix
from .fitting import (
    DescentBudget,
    ExactBudget,
    FittedModel,
    FusionPattern,
    TreeFitEngine,
    _normalize,
    baseline_loss,
    fit_fused,
    optimize_pattern,
)
from .partition import MAX_DEPTH, Split, TreeStructure, default_candidate_grid

_PRUNE_GUARD = 1e-12


@dataclass(frozen=True)
class SolveConfig:
    depth: int = 2
    n_min: int = 1
    lam: float = 0.0
    threshold_mode: str = "auto"  # auto | midpoints | quantile
    quantile_bins: int = 16
    fusion_budget: DescentBudget | ExactBudget = DescentBudget(max_iter=40, restarts=2, seed=0)
    top_k_fusion: int = 50
    time_limit: float | None = None
    # deterministic cap on fusion searches per penalty value; when it binds
    # the report is marked uncertified, like the time limit but reproducible
    max_fusion_searches: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_min < 1:
            raise ValueError(f"n_min must be >= 1, got {self.n_min}")
        if self.top_k_fusion < 1:
            raise ValueError(f"top_k_fusion must be >= 1, got {self.top_k_fusion}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not 0 <= self.depth <= MAX_DEPTH:
            raise ValueError(f"depth must be in [0, {MAX_DEPTH}], got {self.depth}")


@dataclass
class SolveReport:
    best: FittedModel
    certified_optimal: bool
    trees_evaluated: int
    trees_pruned: int
    wall_time: float
    lam: float


class _Scanner:
    """Per-region least-squares losses via prefix Gram matrices."""

    def __init__(self, ds: Dataset, candidates: Sequence[np.ndarray], n_min: int):
        self.X = ds.x
        self.Z = design_matrix(ds)
        self.y = ds.y
        self.p = self.Z.shape[1]
        self.candidates = [np.asarray(c, dtype=float) for c in candidates]
        self.n_min = n_min

    def leaf_sse(self, rows: np.ndarray) -> float:
        Zr = self.Z[rows]
        yr = self.y[rows]
        G = Zr.T @ Zr
        g = Zr.T @ yr
        theta = np.linalg.pinv(G, hermitian=True) @ g
        return max(float(yr @ yr - g @ theta), 0.0)

    def split_options(self, rows: np.ndarray):
        """Feasible splits of a region in (variable, threshold) order.

        Yields (var, thr, left_rows, right_rows, sse_left, sse_right) where
        feasibility means both children hold at least n_min rows.
        """
        out = []
        m = rows.size
        p = self.p
        for var, cands in enumerate(self.candidates):
            if cands.size == 0:
                continue
            xv = self.X[rows, var]
            order = np.argsort(xv, kind="stable")
            rs = rows[order]
            xs = xv[order]
            k = np.searchsorted(xs, cands, side="left")
            feas = (k >= self.n_min) & (m - k >= self.n_min)
            if not feas.any():
                continue
            Zs = self.Z[rs]
            ys = self.y[rs]
            Gpre = np.zeros((m + 1, p, p))
            np.cumsum(Zs[:, :, None] * Zs[:, None, :], axis=0, out=Gpre[1:])
            gpre = np.zeros((m + 1, p))
            np.cumsum(Zs * ys[:, None], axis=0, out=gpre[1:])
            ypre = np.zeros(m + 1)
            np.cumsum(ys * ys, out=ypre[1:])

            kf = k[feas]
            cf = cands[feas]
            GL = Gpre[kf]
            gL = gpre[kf]
            yL = ypre[kf]
            GR = Gpre[m] - GL
            gR = gpre[m] - gL
            yR = ypre[m] - yL
            thL = np.einsum("nij,nj->ni", np.linalg.pinv(GL, hermitian=True), gL)
            thR = np.einsum("nij,nj->ni", np.linalg.pinv(GR, hermitian=True), gR)
            sseL = np.maximum(yL - np.einsum("ni,ni->n", gL, thL), 0.0)
            sseR = np.maximum(yR - np.einsum("ni,ni->n", gR, thR), 0.0)
            for thr, ki, sl, sr in zip(cf, kf, sseL, sseR):
                out.append((var, float(thr), rs[:ki], rs[ki:], float(sl), float(sr)))
        return out


@dataclass
class _Table:
    """All subtree configurations of a region at some depth, in canonical
    enumeration order: the unsplit entry first, then blocks per candidate
    split, left-subtree-major within a block."""

    losses: np.ndarray
    blocks: list

    @property
    def size(self) -> int:
        return self.losses.size


@dataclass
class _Block:
    var: int
    thr: float
    left: _Table
    right: _Table
    offset: int


def _build_table(scanner: _Scanner, rows: np.ndarray, r: int, leaf_loss: float | None = None) -> _Table:
    leaf = scanner.leaf_sse(rows) if leaf_loss is None else leaf_loss
    parts = [np.array([leaf])]
    blocks: list[_Block] = []
    offset = 1
    if r >= 1:
        for var, thr, lrows, rrows, sl, sr in scanner.split_options(rows):
            lt = _build_table(scanner, lrows, r - 1, leaf_loss=sl)
            rt = _build_table(scanner, rrows, r - 1, leaf_loss=sr)
            block_losses = (lt.losses[:, None] + rt.losses[None, :]).ravel()
            blocks.append(_Block(var, thr, lt, rt, offset))
            parts.append(block_losses)
            offset += block_losses.size
    return _Table(np.concatenate(parts), blocks)


def _fill_slots(slots: list, branch: int, table: _Table, idx: int) -> None:
    if idx == 0:
        return
    for b in table.blocks:
        span = b.left.size * b.right.size
        if b.offset <= idx < b.offset + span:
            i, j = divmod(idx - b.offset, b.right.size)
            slots[branch] = Split(b.var, b.thr)
            _fill_slots(slots, 2 * branch + 1, b.left, i)
            _fill_slots(slots, 2 * branch + 2, b.right, j)
            return
    raise IndexError(f"config index {idx} out of range")


class _RootSpace:
    """The full tree space over the grid for one dataset."""

    def __init__(self, scanner: _Scanner, rows: np.ndarray, depth: int):
        self.depth = depth
        self.stump_loss = scanner.leaf_sse(rows)
        self.blocks: list[_Block] = []
        offset = 1
        if depth >= 1:
            for var, thr, lrows, rrows, sl, sr in scanner.split_options(rows):
                lt = _build_table(scanner, lrows, depth - 1, leaf_loss=sl)
                rt = _build_table(scanner, rrows, depth - 1, leaf_loss=sr)
                self.blocks.append(_Block(var, thr, lt, rt, offset))
                offset += lt.size * rt.size
        self.total = offset
        self._losses: np.ndarray | None = None
        if depth <= 2:
            parts = [np.array([self.stump_loss])]
            parts += [
                (b.left.losses[:, None] + b.right.losses[None, :]).ravel()
                for b in self.blocks
            ]
            self._losses = np.concatenate(parts)

    def iter_ascending(self) -> Iterator[tuple[float, int]]:
        """(unfused loss, enumeration position) pairs in ascending loss
        order; ties resolve to the smaller enumeration position, which is
        the canonical tree order."""
        if self._losses is not None:
            order = np.argsort(self._losses, kind="stable")
            for idx in order:
                yield float(self._losses[idx]), int(idx)
            return

        def block_stream(b: _Block):
            lord = np.argsort(b.left.losses, kind="stable")
            rord = np.argsort(b.right.losses, kind="stable")
            ls = b.left.losses[lord]
            rs = b.right.losses[rord]
            w = b.right.size
            seen = set()
            heap: list = []

            def push(i, j):
                if i < ls.size and j < rs.size and (i, j) not in seen:
                    seen.add((i, j))
                    pos = b.offset + int(lord[i]) * w + int(rord[j])
                    heapq.heappush(heap, (float(ls[i] + rs[j]), pos, i, j))

            push(0, 0)
            while heap:
                v, pos, i, j = heapq.heappop(heap)
                yield v, pos
                push(i + 1, j)
                push(i, j + 1)

        streams = [iter([(float(self.stump_loss), 0)])]
        streams += [block_stream(b) for b in self.blocks]
        yield from heapq.merge(*streams)

    def decode(self, idx: int) -> TreeStructure:
        slots: list[Split | None] = [None] * (2**self.depth - 1)
        if idx != 0:
            for b in self.blocks:
                span = b.left.size * b.right.size
                if b.offset <= idx < b.offset + span:
                    i, j = divmod(idx - b.offset, b.right.size)
                    slots[0] = Split(b.var, b.thr)
                    _fill_slots(slots, 1, b.left, i)
                    _fill_slots(slots, 2, b.right, j)
                    break
            else:
                raise IndexError(f"tree index {idx} out of range")
        return TreeStructure(self.depth, tuple(slots))


class _SearchContext:
    """Shared state for solving one dataset at several penalty values: the
    phase-1 scan, decoded trees, and per-tree fit engines with memoized
    pattern fits. Sharing is pure memoization, so per-lam results equal
    those of independent solves."""

    def __init__(self, ds: Dataset, cfg: SolveConfig):
        if ds.n < cfg.n_min:
            raise ValueError(f"infeasible: n={ds.n} is below n_min={cfg.n_min}")
        self.ds = ds
        self.cfg = cfg
        self.baseline = baseline_loss(ds)
        candidates = default_candidate_grid(
            ds, mode=cfg.threshold_mode, q=cfg.quantile_bins
        )
        self.scanner = _Scanner(ds, candidates, cfg.n_min)
        self.root = _RootSpace(self.scanner, np.arange(ds.n), cfg.depth)
        self._trees: dict[int, TreeStructure] = {}
        self._engines: dict[int, TreeFitEngine] = {}

    def tree_at(self, pos: int) -> TreeStructure:
        tree = self._trees.get(pos)
        if tree is None:
            tree = self.root.decode(pos)
            self._trees[pos] = tree
        return tree

    def engine_at(self, pos: int) -> TreeFitEngine:
        eng = self._engines.get(pos)
        if eng is None:
            eng = TreeFitEngine(self.ds, self.tree_at(pos), baseline=self.baseline)
            self._engines[pos] = eng
        return eng


def _solve_lam_zero(ctx: _SearchContext) -> SolveReport:
    t0 = time.perf_counter()
    loss, pos = next(ctx.root.iter_ascending())
    tree = ctx.tree_at(pos)
    pattern = FusionPattern.all_distinct(tree.active_leaves(), ctx.scanner.p)
    fit = fit_fused(ctx.ds, tree, pattern, lam=0.0, baseline=ctx.baseline)
    return SolveReport(
        best=FittedModel(tree, pattern, fit),
        certified_optimal=True,
        trees_evaluated=ctx.root.total,
        trees_pruned=0,
        wall_time=time.perf_counter() - t0,
        lam=0.0,
    )


def _solve_positive_lam(ctx: _SearchContext, lam: float, threads: int) -> SolveReport:
    cfg = ctx.cfg
    t0 = time.perf_counter()
    deadline = None if cfg.time_limit is None else t0 + cfg.time_limit

    best_key = None  # (objective, tree sort key)
    best_pos = None
    best_pattern = None
    searched = 0
    certified = True

    def run_one(pos: int):
        engine = ctx.engine_at(pos)
        pattern, objective = optimize_pattern(engine, lam, cfg.fusion_budget)
        return pos, pattern, objective

    def absorb(pos, pattern, objective):
        nonlocal best_key, best_pos, best_pattern
        key = (objective, ctx.tree_at(pos).sort_key())
        if best_key is None or key < best_key:
            best_key, best_pos, best_pattern = key, pos, pattern

    stream = ctx.root.iter_ascending()
    chunk_size = 1 if threads <= 1 else max(4, 2 * threads)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        exhausted = False
        while not exhausted:
            if deadline is not None and searched > 0 and time.perf_counter() > deadline:
                certified = False
                break
            room = chunk_size
            if cfg.max_fusion_searches is not None:
                # the searched set is always the first max_fusion_searches
                # stream items, whatever the chunking
                room = min(room, cfg.max_fusion_searches - searched)
                if room <= 0 and searched > 0:
                    certified = False
                    break
            chunk: list[int] = []
            for loss, pos in stream:
                lb = _normalize(loss, ctx.baseline) * (1.0 - _PRUNE_GUARD)
                past_top_k = searched + len(chunk) >= cfg.top_k_fusion
                if past_top_k and best_key is not None and lb > best_key[0]:
                    exhausted = True  # everything after is pruned soundly
                    break
                chunk.append(pos)
                if len(chunk) >= max(room, 1):
                    break
            else:
                exhausted = True
            if not chunk:
                break
            if pool is None:
                results = [run_one(pos) for pos in chunk]
            else:
                results = list(pool.map(run_one, chunk))
            for pos, pattern, objective in results:
                absorb(pos, pattern, objective)
            searched += len(chunk)
    finally:
        if pool is not None:
            pool.shutdown()

    tree = ctx.tree_at(best_pos)
    fit = fit_fused(
        ctx.ds, tree, best_pattern, lam=lam,
        membership=ctx.engine_at(best_pos).membership, baseline=ctx.baseline,
    )
    return SolveReport(
        best=FittedModel(tree, best_pattern, fit),
        certified_optimal=certified,
        trees_evaluated=searched,
        trees_pruned=ctx.root.total - searched,
        wall_time=time.perf_counter() - t0,
        lam=lam,
    )


def solve_path(
    ds: Dataset,
    cfg: SolveConfig,
    lambdas: Sequence[float],
    threads: int = 1,
    collect_errors: bool = False,
) -> list[SolveReport]:
    """Solve the same dataset at several penalty values, sharing the
    lam-independent phase-1 scan and the memoized per-tree fits.

    With collect_errors, a failing penalty value contributes the exception
    object instead of aborting the remaining values.
    """
    ctx = _SearchContext(ds, cfg)
    reports: list = []
    for lam in lambdas:
        try:
            if lam < 0:
                raise ValueError(f"lam must be >= 0, got {lam}")
            if lam == 0.0:
                reports.append(_solve_lam_zero(ctx))
            else:
                reports.append(_solve_positive_lam(ctx, float(lam), threads))
        except Exception as exc:
            if not collect_errors:
                raise
            reports.append(exc)
    return reports


def solve(ds: Dataset, cfg: SolveConfig, threads: int = 1) -> SolveReport:
    """Search every tree over the candidate grid for the best fused model."""
    return solve_path(ds, cfg, [cfg.lam], threads=threads)[0]
