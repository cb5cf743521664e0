import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from otassign.assignment import (AssignmentBatch, RealSet, StaleCacheError, assigner_gradient,
                                 assigner_loss, assignment_margins, batch_assign,
                                 c_transform_assign, dual_estimate, optimality_check,
                                 psi_values, refresh_psi_cache, stability_check,
                                 write_assignment_csv)
from otassign.costs import CostSpec, cost
from otassign.net import DenseNet, Layer

SQ = CostSpec("squared_euclidean")


def naive_assign(xs, points, psi, spec):
    idx, vals = [], []
    for x in xs:
        best, best_v = 0, np.inf
        for j, y in enumerate(points):
            v = cost(spec, x, y) + psi[j]
            if v < best_v:  # strict: keeps the lowest index on ties
                best, best_v = j, v
        idx.append(best)
        vals.append(best_v)
    return np.array(idx), np.array(vals)


def small_assigner(seed, d=2, hidden=8):
    rng = np.random.default_rng(seed)
    net = DenseNet.create([d, hidden, hidden, 1], hidden_activation="tanh", rng=rng)
    for p in net.parameters():
        p += 0.3 * rng.standard_normal(p.shape)
    return net


def frozen_loss(batch, net, points):
    return assigner_loss(batch, psi_values(net, points))


def empirical_dual(net, xs, points, spec):
    return dual_estimate(xs, RealSet(points), spec, net).value


def flat(grads):
    return np.concatenate([g.ravel() for g in grads])


def fd_params(f, net, h):
    out = []
    for p in net.parameters():
        g = np.zeros_like(p)
        for idx in np.ndindex(*p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = f()
            p[idx] = old - h
            fm = f()
            p[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return flat(out)


def test_zero_weight_assigner_cache_is_bias():
    net = DenseNet([Layer(np.zeros((2, 1)), np.array([0.75]))])
    reals = refresh_psi_cache(net, RealSet(np.random.default_rng(0).random((5, 2))))
    np.testing.assert_array_equal(reals.psi_cache, np.full(5, 0.75))
    assert reals.cache_version == net.version


def test_refresh_tracks_version():
    net = small_assigner(0)
    reals = refresh_psi_cache(net, RealSet(np.zeros((3, 2))))
    net.mark_updated()
    assert reals.cache_version != net.version
    assert refresh_psi_cache(net, reals).cache_version == net.version


def test_realset_validation():
    with pytest.raises(ValueError):
        RealSet(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        RealSet(np.zeros((3, 2)), psi_cache=np.zeros(2))


def test_zero_potential_is_nearest_neighbour():
    rng = np.random.default_rng(1)
    pts, xs = rng.random((20, 2)), rng.random((50, 2))
    batch = batch_assign(xs, RealSet(pts), SQ)
    d = ((xs[:, None, :] - pts[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(batch.indices, d.argmin(1))


def test_two_real_line_example():
    reals = RealSet.with_potential([[0.0], [10.0]], [0.0, -50.0])
    assert c_transform_assign([4.0], reals, SQ) == (1, -14.0)


def test_tie_goes_to_lowest_index():
    reals = RealSet.with_potential([[-1.0], [1.0]], [0.0, 0.0])
    assert c_transform_assign([0.0], reals, SQ) == (0, 1.0)


@pytest.mark.parametrize("kind", ["euclidean", "squared_euclidean", "ssim_cost", "psnr_cost"])
def test_matches_naive_scan(kind):
    rng = np.random.default_rng(2)
    spec = CostSpec(kind, 1.5, (11, 11))
    pts, xs = rng.random((7, 121)), rng.random((9, 121))
    psi = 0.05 * rng.standard_normal(7)
    batch = batch_assign(xs, RealSet.with_potential(pts, psi), spec)
    idx, vals = naive_assign(xs, pts, psi, spec)
    np.testing.assert_array_equal(batch.indices, idx)
    np.testing.assert_allclose(batch.values, vals, rtol=1e-12, atol=1e-12)


def test_empty_batch():
    batch = batch_assign(np.zeros((0, 2)), RealSet(np.ones((3, 2))), SQ)
    assert batch.n == 0
    np.testing.assert_array_equal(batch.counts, [0, 0, 0])


def test_points_at_distinct_reals():
    pts = np.random.default_rng(3).random((6, 4))
    batch = batch_assign(pts[::-1].copy(), RealSet(pts), CostSpec("euclidean"))
    np.testing.assert_array_equal(batch.counts, np.ones(6))
    np.testing.assert_array_equal(batch.values, np.zeros(6))
    np.testing.assert_array_equal(batch.indices, np.arange(6)[::-1])


def test_chunked_and_parallel_equal_serial():
    rng = np.random.default_rng(4)
    reals = RealSet.with_potential(rng.random((40, 3)), rng.standard_normal(40))
    xs = rng.random((1001, 3))
    a = batch_assign(xs, reals, SQ, chunk_size=5000)
    b = batch_assign(xs, reals, SQ, chunk_size=17)
    c = batch_assign(xs, reals, SQ, chunk_size=64, workers=4)
    for other in (b, c):
        np.testing.assert_array_equal(a.indices, other.indices)
        assert a.values.tobytes() == other.values.tobytes()
        np.testing.assert_array_equal(a.counts, other.counts)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 60), st.integers(1, 12))
def test_counts_sum_to_n(seed, n, m):
    rng = np.random.default_rng(seed)
    batch = batch_assign(rng.random((n, 2)), RealSet.with_potential(rng.random((m, 2)),
                                                                  rng.standard_normal(m)), SQ)
    assert batch.counts.sum() == n
    assert batch.indices.min() >= 0 and batch.indices.max() < m


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-100, 100))
def test_shift_invariance(seed, kappa):
    rng = np.random.default_rng(seed)
    pts, xs = rng.random((8, 2)), rng.random((30, 2))
    net = small_assigner(seed)
    shifted = net.copy()
    shifted.layers[-1].bias[:] += kappa
    a = batch_assign(xs, RealSet(pts, psi_values(net, pts)), SQ)
    b = batch_assign(xs, RealSet(pts, psi_values(shifted, pts)), SQ)
    np.testing.assert_array_equal(a.indices, b.indices)
    assert dual_estimate(xs, RealSet(pts), SQ, shifted).value == pytest.approx(
        dual_estimate(xs, RealSet(pts), SQ, net).value, abs=1e-9)
    assert assigner_loss(a, psi_values(shifted, pts)) == pytest.approx(
        assigner_loss(a, psi_values(net, pts)), abs=1e-9)


def _batch(counts):
    counts = np.asarray(counts)
    idx = np.repeat(np.arange(len(counts)), counts)
    return AssignmentBatch(idx, np.zeros(len(idx)), counts)


def test_loss_examples():
    assert assigner_loss(_batch([2, 0]), [1.0, 0.0]) == -0.5
    assert assigner_loss(_batch([3, 3, 3]), [5.0, -2.0, 7.0]) == 0.0


def test_gradient_zero_at_balance():
    net = small_assigner(5)
    pts = np.random.default_rng(5).random((4, 2))
    reals = refresh_psi_cache(net, RealSet(pts))
    batch = _batch([2, 2, 2, 2])
    batch.cache_version = net.version
    for g in assigner_gradient(batch, net, reals):
        assert not np.any(g)


def test_stale_cache_raises():
    net = small_assigner(6)
    reals = refresh_psi_cache(net, RealSet(np.zeros((2, 2))))
    batch = batch_assign(np.ones((3, 2)), reals, SQ)
    net.mark_updated()
    with pytest.raises(StaleCacheError):
        assigner_gradient(batch, net, reals)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_frozen_finite_differences(seed):
    rng = np.random.default_rng(seed)
    net = small_assigner(seed)
    reals = refresh_psi_cache(net, RealSet(rng.random((6, 2))))
    batch = batch_assign(rng.random((25, 2)), reals, SQ)
    g = flat(assigner_gradient(batch, net, reals))
    fd = fd_params(lambda: frozen_loss(batch, net, reals.points), net, 1e-5)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5


def test_gradient_matches_unfrozen_dual():
    # the dual is only differentiable where no assignment moves; the loss is its negation
    passes = 0
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        net = small_assigner(seed)
        pts, xs = rng.random((6, 2)), rng.random((25, 2))
        if not stability_check(xs, RealSet(pts), SQ, net, 1e-7, rng=seed):
            continue
        passes += 1
        if seed % 10:
            continue
        reals = refresh_psi_cache(net, RealSet(pts))
        batch = batch_assign(xs, reals, SQ)
        g = flat(assigner_gradient(batch, net, reals))
        fd = fd_params(lambda: empirical_dual(net, xs, pts, SQ), net, 1e-7)
        worst = max(worst, np.linalg.norm(g + fd) / np.linalg.norm(fd))
    assert passes >= 99
    assert worst < 1e-4


def test_dual_estimate_zero_potential_is_mean_nearest_cost():
    rng = np.random.default_rng(7)
    pts, xs = rng.random((10, 2)), rng.random((40, 2))
    d = ((xs[:, None] - pts[None]) ** 2).sum(-1).min(1)
    zero = DenseNet([Layer(np.zeros((2, 1)), np.zeros(1))])
    est = dual_estimate(xs, RealSet(pts), SQ, zero)
    assert est.value == pytest.approx(d.mean(), rel=1e-12)
    assert est.n_samples == 40


def test_dual_estimate_single_atom():
    zero = DenseNet([Layer(np.zeros((1, 1)), np.array([3.0]))])
    assert dual_estimate([[2.0]], RealSet([[2.0]]), SQ, zero).value == 0.0


def brute_ot(xs, ys, spec):
    n = len(xs)
    return min(np.mean([cost(spec, xs[i], ys[p[i]]) for i in range(n)])
               for p in itertools.permutations(range(n)))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(-20, 20), min_size=3, max_size=3))
def test_weak_duality_on_line(xs, ys, psi):
    xs, ys = np.array(xs)[:, None], np.array(ys)[:, None]
    net = DenseNet([Layer(np.zeros((1, 1)), np.zeros(1))])
    reals = RealSet.with_potential(ys, psi)
    batch = batch_assign(xs, reals, SQ)
    value = batch.values.mean() - np.mean(psi)
    assert value <= brute_ot(xs, ys, SQ) + 1e-9
    # same bound through the network path
    assert dual_estimate(xs, RealSet(ys), SQ, net).value <= brute_ot(xs, ys, SQ) + 1e-9


def laguerre_instance(seed, m=4, per_cell=3, d=2):
    rng = np.random.default_rng(seed)
    pts = rng.random((m, d))
    w = 0.2 * rng.standard_normal((d, 1))
    net = DenseNet([Layer(w, np.zeros(1))])
    psi = psi_values(net, pts)
    cands = rng.random((4000, d))
    full = batch_assign(cands, RealSet(pts, psi), SQ).indices
    xs = []
    for j in range(m):
        members = cands[full == j]
        if len(members) < per_cell:
            return None
        xs.append(members[:per_cell])
    return np.concatenate(xs), pts, net


def test_optimality_identity():
    pts = np.random.default_rng(0).random((5, 2))
    zero = DenseNet([Layer(np.zeros((2, 1)), np.zeros(1))])
    rep = optimality_check(pts, RealSet(pts), SQ, zero)
    assert rep.optimal
    np.testing.assert_array_equal(rep.witness, np.arange(5))


def test_optimality_fails_on_collapse():
    pts = np.array([[0.0, 0.0], [1.0, 1.0]])
    zero = DenseNet([Layer(np.zeros((2, 1)), np.zeros(1))])
    rep = optimality_check(np.zeros((4, 2)) + 0.1, RealSet(pts), SQ, zero)
    assert not rep.optimal and not rep.balanced


@pytest.mark.parametrize("seed", range(8))
def test_balanced_laguerre_map_is_optimal(seed):
    inst = laguerre_instance(seed)
    if inst is None:
        pytest.skip("a cell was empty")
    xs, pts, net = inst
    rep = optimality_check(xs, RealSet(pts), SQ, net)
    assert rep.optimal
    map_cost = np.mean([cost(SQ, x, pts[j]) for x, j in zip(xs, rep.witness)])
    # independent oracle: Hungarian on reals replicated to match the sample size
    k = len(xs) // len(pts)
    rep_pts = np.repeat(pts, k, axis=0)
    c = ((xs[:, None] - rep_pts[None]) ** 2).sum(-1)
    r, col = linear_sum_assignment(c)
    assert map_cost == pytest.approx(c[r, col].mean(), abs=1e-12)


def test_stability_delta_zero():
    net = small_assigner(0)
    assert stability_check(np.random.default_rng(0).random((10, 2)),
                           RealSet(np.random.default_rng(1).random((3, 2))), SQ, net, 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_stability_below_margin_bound(seed):
    # linear potential: jittering every weight by <= delta moves psi_j by <= delta*(|y_j|_1 + 1)
    rng = np.random.default_rng(seed)
    pts, xs = rng.random((5, 3)), rng.random((30, 3))
    net = DenseNet([Layer(rng.standard_normal((3, 1)), np.zeros(1))])
    gap = assignment_margins(xs, RealSet(pts), SQ, net).min()
    bound = 2 * (np.abs(pts).sum(1) + 1).max()
    delta = 0.99 * gap / bound
    for trial in range(20):
        assert stability_check(xs, RealSet(pts), SQ, net, delta, rng=trial)


def test_stability_fails_for_huge_delta():
    rng = np.random.default_rng(0)
    pts, xs = rng.random((10, 2)), rng.random((200, 2))
    net = small_assigner(1)
    results = [stability_check(xs, RealSet(pts), SQ, net, 1e3, rng=s) for s in range(10)]
    assert sum(results) <= 1


def test_psnr_and_mse_assign_identically():
    rng = np.random.default_rng(9)
    shape = (11, 11)
    pts, xs = rng.random((15, 121)), rng.random((60, 121))
    a = batch_assign(xs, RealSet(pts), CostSpec("psnr_cost", 1.0, shape))
    b = batch_assign(xs, RealSet(pts), CostSpec("squared_euclidean", 1 / 121))
    np.testing.assert_array_equal(a.indices, b.indices)


def test_assignment_csv(tmp_path):
    reals = RealSet.with_potential([[0.0], [10.0]], [0.0, -50.0])
    batch = batch_assign([[4.0], [-1.0]], reals, SQ)
    path = tmp_path / "a.csv"
    write_assignment_csv(path, batch, reals.psi_cache)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["generated_id", "real_index", "cost", "psi"]
    assert rows[1] == ["0", "1", "36.0", "-50.0"]
    assert rows[2] == ["1", "0", "1.0", "0.0"]
