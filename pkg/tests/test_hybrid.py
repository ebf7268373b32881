import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from okdph import nn
from okdph.hybrid import (FusionPolicy, HybridWeights, build_hwm, fuse_students,
                          route_hwm_gradient, sample_dirichlet)
from okdph.losses import cross_entropy

from oracles import dirichlet_moments, max_rel_error

def vec(values, layout=None):
    values = np.asarray(values, dtype=float)
    return nn.ParamVector(values, layout or (nn.Slot(0, "W", 0, values.size, (values.size,)),))


def test_dirichlet_single_student():
    rng = np.random.default_rng(0)
    for _ in range(10):
        assert sample_dirichlet([1.0], rng).r.tolist() == [1.0]


def test_dirichlet_two_way_mean():
    rng = np.random.default_rng(1)
    r1 = np.array([sample_dirichlet([1.0, 1.0], rng).r[0] for _ in range(100_000)])
    assert abs(r1.mean() - 0.5) < 0.01


def test_dirichlet_three_way_moments():
    rng = np.random.default_rng(2)
    n = 100_000
    draws = np.array([sample_dirichlet([1.0, 1.0, 1.0], rng).r for _ in range(n)])
    mean, cov = dirichlet_moments([1.0, 1.0, 1.0])
    assert cov[0, 0] == pytest.approx(2 / 36)
    emp_cov = np.cov(draws, rowvar=False)
    # standard error of a sample covariance: sqrt(Var[(X-mx)(Y-my)] / n)
    c = draws - draws.mean(axis=0)
    for i in range(3):
        assert abs(draws[:, i].mean() - mean[i]) < 3 * draws[:, i].std() / np.sqrt(n)
        for j in range(3):
            se = np.std(c[:, i] * c[:, j]) / np.sqrt(n)
            assert abs(emp_cov[i, j] - cov[i, j]) < 3 * se


def test_dirichlet_is_deterministic_per_stream():
    a = [sample_dirichlet([1, 1, 1], np.random.default_rng(5)).r for _ in range(3)]
    b = [sample_dirichlet([1, 1, 1], np.random.default_rng(5)).r for _ in range(3)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_dirichlet_rejects_nonpositive():
    with pytest.raises(ValueError):
        sample_dirichlet([1.0, 0.0], np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.05, 20.0), min_size=1, max_size=6), st.integers(0, 2**32 - 1))
def test_dirichlet_simplex_validity(alpha, seed):
    r = sample_dirichlet(alpha, np.random.default_rng(seed)).r
    assert np.all(r >= 0)
    assert abs(r.sum() - 1) <= 1e-12


def test_build_hwm_cases():
    a = vec([0.5, -1.0, 2.0])
    assert build_hwm([a], HybridWeights(np.array([1.0]))).params.values.tobytes() == a.values.tobytes()
    mid = build_hwm([vec([0, 0]), vec([2, 4])], HybridWeights(np.array([0.5, 0.5])))
    assert mid.params.values.tolist() == [1.0, 2.0]


def test_build_hwm_matches_summation_oracle_bitwise():
    rng = np.random.default_rng(3)
    students = [vec(rng.normal(size=50)) for _ in range(3)]
    w = sample_dirichlet([1, 1, 1], rng)
    got = build_hwm(students, w).params.values
    oracle = np.array([w.r[0] * students[0].values[k] + w.r[1] * students[1].values[k]
                       + w.r[2] * students[2].values[k] for k in range(50)])
    assert got.tobytes() == oracle.tobytes()


def test_build_hwm_layout_mismatch():
    with pytest.raises(nn.LayoutError):
        build_hwm([vec([1, 2, 3]), vec([1, 2, 3], (nn.Slot(1, "b", 0, 3, (3,)),))],
                  HybridWeights(np.array([0.5, 0.5])))


def test_hwm_convexity_and_linearity():
    rng = np.random.default_rng(4)
    students = [vec(rng.normal(size=20)) for _ in range(4)]
    w = sample_dirichlet(np.ones(4), rng)
    h = build_hwm(students, w).params.values
    stack = np.stack([s.values for s in students])
    assert np.all(h >= stack.min(axis=0) - 1e-15) and np.all(h <= stack.max(axis=0) + 1e-15)
    A = rng.normal(size=(7, 20))
    mapped = build_hwm([vec(A @ s.values) for s in students], w).params.values
    np.testing.assert_allclose(mapped, A @ h, atol=1e-12)


def test_fusion_cases():
    hwm = build_hwm([vec([1.0, 1.0])], HybridWeights(np.array([1.0])))
    s = [vec([0.0, 0.0])]
    out, fired = fuse_students(s, hwm, FusionPolicy(1, "batch", 0.0), 1)
    assert fired and out[0].values.tolist() == [0.0, 0.0]
    out, _ = fuse_students(s, hwm, FusionPolicy(1, "batch", 1.0), 1)
    assert out[0].values.tolist() == [1.0, 1.0]
    out, _ = fuse_students(s, hwm, FusionPolicy(1, "batch", 0.5), 1)
    assert out[0].values.tolist() == [0.5, 0.5]


def test_fusion_interval_and_epoch_unit():
    hwm = build_hwm([vec([1.0])], HybridWeights(np.array([1.0])))
    s = [vec([0.0])]
    policy = FusionPolicy(2, "epoch", 0.5)
    fired = [fuse_students(s, hwm, policy, t, batches_per_epoch=3)[1] for t in range(1, 13)]
    assert fired == [t % 6 == 0 for t in range(1, 13)]
    assert [fuse_students(s, hwm, FusionPolicy(5, "batch"), t)[1] for t in (4, 5, 10)] == [False, True, True]
    with pytest.raises(ValueError):
        FusionPolicy(0)
    with pytest.raises(ValueError):
        FusionPolicy(1, "epoch", 1.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(2, 4), st.integers(0, 1000))
def test_fusion_contracts_pairwise_distance(gamma, m, seed):
    rng = np.random.default_rng(seed)
    students = [vec(rng.normal(size=30)) for _ in range(m)]
    hwm = build_hwm(students, sample_dirichlet(np.ones(m), rng))
    fused, _ = fuse_students(students, hwm, FusionPolicy(1, "batch", gamma), 1)
    for i in range(m):
        for j in range(i + 1, m):
            before = np.linalg.norm(students[i].values - students[j].values)
            after = np.linalg.norm(fused[i].values - fused[j].values)
            assert abs(after - (1 - gamma) * before) <= 1e-12


def test_route_endpoints_and_modes():
    g = vec([1.0, -2.0, 0.5])
    routed = route_hwm_gradient(g, HybridWeights(np.array([1.0, 0.0])))
    assert routed[0].values.tolist() == g.values.tolist()
    assert np.all(routed[1].values == 0)
    full = route_hwm_gradient(g, HybridWeights(np.array([0.3, 0.7])), "full")
    assert all(r.values.tolist() == g.values.tolist() for r in full)
    with pytest.raises(ValueError):
        route_hwm_gradient(g, HybridWeights(np.array([1.0])), "bogus")


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10_000))
def test_route_partitions_gradient(m, seed):
    rng = np.random.default_rng(seed)
    g = vec(rng.uniform(-1, 1, size=40))
    routed = route_hwm_gradient(g, sample_dirichlet(np.ones(m), rng))
    total = sum(r.values for r in routed)
    assert np.max(np.abs(total - g.values)) <= 1e-15


def test_routed_gradient_is_chain_rule_derivative():
    spec = nn.mlp([2, 6, 3])
    rng = np.random.default_rng(7)
    students = [nn.init_network(spec, s) for s in (1, 2)]
    w = HybridWeights(np.array([0.3, 0.7]))
    x = rng.normal(size=(8, 2))
    y = rng.integers(0, 3, 8)

    def hwm_loss(thetas):
        h = build_hwm([s.like(t) for s, t in zip(students, thetas)], w).params
        return cross_entropy(nn.forward(spec, h, x), y)[0]

    hwm = build_hwm(students, w).params
    _, dz = cross_entropy(nn.forward(spec, hwm, x), y)
    routed = route_hwm_gradient(nn.backward(spec, hwm, x, dz), w)
    eps = 1e-6
    for m in range(2):
        fd = np.zeros(len(hwm))
        for k in range(len(hwm)):
            plus = [s.values.copy() for s in students]
            minus = [s.values.copy() for s in students]
            plus[m][k] += eps
            minus[m][k] -= eps
            fd[k] = (hwm_loss(plus) - hwm_loss(minus)) / (2 * eps)
        assert max_rel_error(routed[m].values, fd) < 1e-5
