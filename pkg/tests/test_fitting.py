import itertools

import numpy as np
import pytest

from foctree.data import Dataset, design_matrix
from foctree.fitting import (
    DescentBudget,
    ExactBudget,
    FusionPattern,
    baseline_loss,
    fit_fused,
    search_fusion,
    set_partitions,
)
from foctree.partition import Split, TreeStructure, assign, stump


def rand_dataset(rng, n, d, noise=1.0):
    x = rng.standard_normal((n, d))
    t = (rng.random(n) < 0.5).astype(float)
    y = rng.standard_normal(n) * noise + x[:, 0] + t
    return Dataset(x, t, y, tuple(f"x{i}" for i in range(d)))


def ols_sse(Z, y):
    theta, *_ = np.linalg.lstsq(Z, y, rcond=None)
    r = y - Z @ theta
    return float(r @ r)


def test_set_partitions_counts_and_canonical_form():
    assert list(set_partitions([])) == [()]
    assert len(list(set_partitions([1, 2]))) == 2
    parts3 = list(set_partitions([3, 1, 2]))
    assert len(parts3) == 5
    for p in parts3:
        flat = [v for c in p for v in c]
        assert sorted(flat) == [1, 2, 3]
        assert [c[0] for c in p] == sorted(c[0] for c in p)
    assert len(list(set_partitions(range(4)))) == 15


def test_baseline_loss_exact_fit_is_zero():
    # 4 rows, 4 design columns in generic position: solvable exactly
    ds = Dataset(
        np.array([[0.0], [0.0], [1.0], [1.0]]),
        np.array([0.0, 1.0, 0.0, 1.0]),
        np.array([0.0, 1.0, 1.0, 2.0]),
        ("x",),
    )
    assert baseline_loss(ds) == pytest.approx(0.0, abs=1e-18)


def test_baseline_equals_depth0_fit():
    rng = np.random.default_rng(2)
    ds = rand_dataset(rng, 25, 2)
    base = baseline_loss(ds)
    pattern = FusionPattern.all_distinct((0,), 6)
    fit = fit_fused(ds, stump(), pattern, lam=0.0)
    assert fit.sse == pytest.approx(base, rel=1e-10)
    assert fit.normalized_loss == pytest.approx(1.0, rel=1e-10)


def test_fit_fused_all_distinct_matches_per_leaf_ols():
    rng = np.random.default_rng(7)
    tree = TreeStructure(1, (Split(0, 0.0),))
    for _ in range(25):
        ds = rand_dataset(rng, int(rng.integers(16, 50)), 2)
        pattern = FusionPattern.all_distinct(tree.active_leaves(), 6)
        fit = fit_fused(ds, tree, pattern, lam=0.0)
        Z = design_matrix(ds)
        member = assign(tree, ds)
        want = 0.0
        for leaf in (0, 1):
            rows = member.assignment == leaf
            if rows.any():
                want += ols_sse(Z[rows], ds.y[rows])
                theta, *_ = np.linalg.lstsq(Z[rows], ds.y[rows], rcond=None)
                np.testing.assert_allclose(fit.coef.row(leaf), theta, rtol=1e-8, atol=1e-8)
        assert fit.sse == pytest.approx(want, rel=1e-8)
        # independent SSE recompute from the coefficient table
        pred = np.array([fit.coef.row(member.assignment[i]) @ Z[i] for i in range(ds.n)])
        assert fit.sse == pytest.approx(float(((ds.y - pred) ** 2).sum()), rel=1e-9)


def test_fit_fused_all_fused_equals_pooled():
    rng = np.random.default_rng(8)
    ds = rand_dataset(rng, 40, 1)
    tree = TreeStructure(1, (Split(0, 0.0),))
    pattern = FusionPattern.all_fused(tree.active_leaves(), 4)
    fit = fit_fused(ds, tree, pattern, lam=0.0)
    assert fit.sse == pytest.approx(baseline_loss(ds), rel=1e-10)
    assert fit.normalized_loss == pytest.approx(1.0, rel=1e-10)
    np.testing.assert_allclose(fit.coef.gamma[0], fit.coef.gamma[1])
    assert fit.penalty_count == 0


def test_fit_fused_single_coordinate_fusion_matches_normal_equations():
    # 12 rows, two leaves, d=1; fuse only the interaction coefficient
    rng = np.random.default_rng(42)
    n = 12
    x = np.concatenate([rng.uniform(-2, -0.2, 6), rng.uniform(0.2, 2, 6)]).reshape(-1, 1)
    t = np.tile([0.0, 1.0], 6)
    y = np.where(x[:, 0] < 0, 1.0 + 0.5 * t + 2.0 * x[:, 0], -1.0 + 1.5 * t - 1.0 * x[:, 0])
    y = y + 0.7 * t * x[:, 0] + rng.standard_normal(n) * 0.3
    ds = Dataset(x, t, y, ("x",))
    tree = TreeStructure(1, (Split(0, 0.0),))
    leaves = tree.active_leaves()
    distinct = ((0,), (1,))
    pattern = FusionPattern((distinct, distinct, distinct, ((0, 1),)))
    fit = fit_fused(ds, tree, pattern, lam=0.0)

    # independent merged design: loop-built columns, dense normal equations
    Z = design_matrix(ds)
    member = assign(tree, ds).assignment
    cols = []
    for j in range(3):
        for leaf in leaves:
            cols.append(np.where(member == leaf, Z[:, j], 0.0))
    cols.append(Z[:, 3])  # fused interaction column spans both leaves
    A = np.column_stack(cols)
    theta = np.linalg.solve(A.T @ A, A.T @ ds.y)
    fused_beta = theta[-1]
    assert fit.coef.row(0)[3] == pytest.approx(fused_beta, rel=1e-9)
    assert fit.coef.row(1)[3] == pytest.approx(fused_beta, rel=1e-9)
    want_sse = float(((ds.y - A @ theta) ** 2).sum())
    assert fit.sse == pytest.approx(want_sse, rel=1e-9)


def test_penalty_counts():
    leaves = (0, 1, 2, 3)
    d = 3
    p = 2 * d + 2
    assert FusionPattern.all_distinct(leaves, p).unfused_pairs() == p * 6
    assert FusionPattern.all_fused(leaves, p).unfused_pairs() == 0
    # a single coordinate with classes {0,1},{2},{3}: 6 - 1 = 5 unfused pairs
    groups = [tuple((l,) for l in leaves)] * (p - 1) + [((0, 1), (2,), (3,))]
    assert FusionPattern(tuple(groups)).unfused_pairs() == (p - 1) * 6 + 5


def test_pattern_validation_and_json():
    with pytest.raises(ValueError, match="two classes"):
        FusionPattern((((0, 1), (1,)),))
    with pytest.raises(ValueError, match="same leaf set"):
        FusionPattern((((0,), (1,)), ((0,),)))
    pat = FusionPattern((((1, 0), (2,)), ((2, 1, 0),)))
    assert pat.groups == (((0, 1), (2,)), ((0, 1, 2),))
    assert FusionPattern.from_json(pat.to_json()) == pat


def test_fit_fused_pattern_tree_mismatch():
    rng = np.random.default_rng(1)
    ds = rand_dataset(rng, 10, 1)
    tree = TreeStructure(1, (Split(0, 0.0),))
    with pytest.raises(ValueError, match="leaves"):
        fit_fused(ds, tree, FusionPattern.all_distinct((0, 1, 2), 4))


def test_search_fusion_lambda_zero_matches_unfused_loss():
    rng = np.random.default_rng(3)
    ds = rand_dataset(rng, 30, 1)
    tree = TreeStructure(1, (Split(0, 0.0),))
    pattern, fit = search_fusion(ds, tree, lam=0.0, budget=ExactBudget())
    unfused = fit_fused(ds, tree, FusionPattern.all_distinct(tree.active_leaves(), 4), lam=0.0)
    assert fit.objective == pytest.approx(unfused.normalized_loss, rel=1e-10)


def test_search_fusion_huge_lambda_fuses_everything():
    rng = np.random.default_rng(4)
    ds = rand_dataset(rng, 30, 1)
    tree = TreeStructure(1, (Split(0, 0.0),))
    for budget in (ExactBudget(), DescentBudget(restarts=2, seed=0)):
        pattern, fit = search_fusion(ds, tree, lam=1e6, budget=budget)
        assert pattern == FusionPattern.all_fused(tree.active_leaves(), 4)
        assert fit.penalty_count == 0


def test_search_fusion_exact_matches_bruteforce_16_patterns():
    rng = np.random.default_rng(5)
    tree = TreeStructure(1, (Split(0, 0.0),))
    for trial in range(50):
        ds = rand_dataset(rng, int(rng.integers(12, 30)), 1)
        lam = float(rng.uniform(0, 0.2))
        pattern, fit = search_fusion(ds, tree, lam=lam, budget=ExactBudget())
        # independent brute force over the 2^4 per-coordinate choices
        best = np.inf
        base = baseline_loss(ds)
        for choice in itertools.product([0, 1], repeat=4):
            groups = tuple(
                ((0, 1),) if fuse else ((0,), (1,)) for fuse in choice
            )
            cand = FusionPattern(groups)
            f = fit_fused(ds, tree, cand, lam=lam, baseline=base)
            best = min(best, f.objective)
        assert fit.objective == pytest.approx(best, rel=1e-9, abs=1e-12)


def test_descent_never_beats_exact_and_usually_matches():
    rng = np.random.default_rng(6)
    tree = TreeStructure(2, (Split(0, 0.0), Split(1, 0.0), Split(1, 0.0)))
    matches = 0
    trials = 12
    for trial in range(trials):
        x = rng.standard_normal((60, 1))
        # extra split variable so the depth-2 tree has 4 leaves
        x = np.column_stack([x, rng.standard_normal(60)])
        ds = Dataset(
            x[:, :1],
            (rng.random(60) < 0.5).astype(float),
            rng.standard_normal(60),
            ("x0",),
        )
        # d=1 tree needs both split variables within range: reuse variable 0
        tree1 = TreeStructure(2, (Split(0, 0.0), Split(0, -0.7), Split(0, 0.7)))
        lam = float(rng.uniform(0.001, 0.05))
        _, exact_fit = search_fusion(ds, tree1, lam=lam, budget=ExactBudget())
        _, descent_fit = search_fusion(ds, tree1, lam=lam, budget=DescentBudget(seed=trial))
        assert descent_fit.objective >= exact_fit.objective - 1e-12
        if descent_fit.objective == pytest.approx(exact_fit.objective, rel=1e-9):
            matches += 1
        # stated chain: exact <= descent <= all-distinct objective + full penalty
        ad = fit_fused(ds, tree1, FusionPattern.all_distinct(tree1.active_leaves(), 4), lam=lam)
        assert descent_fit.objective <= ad.objective + lam * ad.penalty_count + 1e-12
    assert matches >= 0.8 * trials


def test_sse_monotone_under_refinement():
    rng = np.random.default_rng(9)
    tree = TreeStructure(2, (Split(0, 0.0), Split(0, -0.7), Split(0, 0.7)))
    for _ in range(30):
        ds = rand_dataset(rng, 50, 1)
        leaves = tree.active_leaves()
        parts = list(set_partitions(leaves))
        coarse_groups = tuple(parts[int(rng.integers(0, len(parts)))] for _ in range(4))
        coarse = FusionPattern(coarse_groups)
        # refine: split one random class with >= 2 members
        j = int(rng.integers(0, 4))
        classes = list(coarse.groups[j])
        big = [c for c in classes if len(c) > 1]
        if not big:
            continue
        target = big[0]
        classes.remove(target)
        classes += [target[:1], target[1:]]
        fine = coarse.replace_coord(j, classes)
        f_coarse = fit_fused(ds, tree, coarse, lam=0.0)
        f_fine = fit_fused(ds, tree, fine, lam=0.0)
        assert f_fine.sse <= f_coarse.sse + 1e-9 * max(1.0, f_coarse.sse)


def test_shared_interaction_coefficient_is_fused_by_selection():
    # two-leaf model sharing the interaction slope; with small noise the
    # criterion-selected penalty should fuse that coordinate nearly always
    from foctree.select import LambdaGrid, bic
    from foctree.fitting import FittedModel

    rng_master = np.random.default_rng(2024)
    tree = TreeStructure(1, (Split(0, 0.0),))
    grid = LambdaGrid.paper()
    fused_hits = 0
    reps = 50
    for rep in range(reps):
        rng = np.random.default_rng(rng_master.integers(2**32))
        n = 80
        x = rng.standard_normal((n, 1))
        t = (rng.random(n) < 0.5).astype(float)
        left = x[:, 0] < 0
        # distinct intercept/main/slope, shared interaction slope 1.0
        y = np.where(left, 0.5 + 1.0 * t + 2.0 * x[:, 0], -1.5 + 3.0 * t - 2.0 * x[:, 0])
        y = y + 1.0 * t * x[:, 0] + 0.05 * rng.standard_normal(n)
        ds = Dataset(x, t, y, ("x",))
        best = None
        for lam in grid.values:
            pattern, fit = search_fusion(ds, tree, lam=lam, budget=ExactBudget())
            model = FittedModel(tree, pattern, fit)
            value, df = bic(ds, model)
            if best is None or value < best[0]:
                best = (value, pattern)
        if best[1].groups[3] == ((0, 1),):
            fused_hits += 1
    assert fused_hits >= 0.9 * reps
