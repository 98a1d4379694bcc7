import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mergestab import bounds, tasks
from mergestab.tasks import FamilyManifest


def _ls(N=3, het=1.0, n=200, seed=0, **kw):
    return FamilyManifest.from_dict({"family": "least-squares", "N": N, "p": 6, "n": n,
                                     "het_knob": het, "seed": seed, **kw})


def test_zero_heterogeneity_identical_distributions():
    envs = tasks.tasks_from_manifest(_ls(N=3, het=0.0))
    assert envs[0].distribution.same_as(envs[1].distribution)
    assert envs[1].distribution.same_as(envs[2].distribution)
    # data are independent draws
    assert not np.array_equal(envs[0].X, envs[1].X)


def test_zero_heterogeneity_zeta_floor():
    m = _ls(N=3, het=0.0, n=2000)
    envs = tasks.tasks_from_manifest(m)
    z = bounds.estimate_zeta(envs, bounds.probe_points(tasks.pretrained_base(m), seed=1))
    assert np.all(z < 1e-2)


def test_positive_heterogeneity_closed_form():
    envs = tasks.tasks_from_manifest(_ls(N=2, het=1.0))
    z = bounds.ls_zeta_sq([e.distribution for e in envs], np.zeros(6))
    assert np.all(z > 0)


def test_zeta_monotone_in_knob():
    x = np.zeros(6)
    prev = -1.0
    for het in np.linspace(0, 1, 11):
        envs = tasks.tasks_from_manifest(_ls(N=4, het=float(het)))
        z = float(np.max(bounds.ls_zeta_sq_max([e.distribution for e in envs], x, 1.0)))
        assert z >= prev - 1e-12
        prev = z


def test_generation_deterministic_and_readonly():
    a = tasks.tasks_from_manifest(_ls(seed=9))
    b = tasks.tasks_from_manifest(_ls(seed=9))
    for ea, eb in zip(a, b):
        assert ea.X.tobytes() == eb.X.tobytes()
        assert ea.y.tobytes() == eb.y.tobytes()
    with pytest.raises(ValueError):
        a[0].X[0, 0] = 1.0


def test_manifest_validation_and_round_trip():
    m = _ls()
    assert FamilyManifest.from_dict(json.loads(m.to_json())) == m
    assert FamilyManifest.from_dict({**m.to_dict(), "family": "least-squares-linear"}) == m
    for bad in ({"het_knob": 1.5}, {"n": 1}, {"N": 0}, {"p": 1}, {"family": "cnn"}, {"bogus": 1}):
        with pytest.raises((ValueError, TypeError)):
            FamilyManifest.from_dict({**m.to_dict(), **bad})
    with pytest.raises(ValueError):
        FamilyManifest.from_dict({"family": "mlp", "N": 2, "p": 3, "n": 10, "het_knob": 0, "seed": 0, "C": 1})


def test_perturb_hamming_one(ls_family):
    _, envs, _ = ls_family
    e = envs[1]
    pert = tasks.perturb(e, 17, seed=3)
    pe = pert.env
    assert pe.n == e.n
    diff = np.flatnonzero(np.any(pe.X != e.X, axis=1) | (pe.y != e.y))
    assert diff.tolist() == [17]
    again = tasks.perturb(e, 17, seed=3)
    assert again.env.X.tobytes() == pe.X.tobytes()
    assert again.env.y.tobytes() == pe.y.tobytes()
    assert not np.array_equal(tasks.perturb(e, 17, seed=4).env.X[17], pe.X[17])
    with pytest.raises(IndexError):
        tasks.perturb(e, e.n, 0)


def test_null_perturb_is_identity(ls_family):
    _, envs, _ = ls_family
    pe = tasks.null_perturb(envs[0], 5).env
    assert pe.X.tobytes() == envs[0].X.tobytes()
    assert pe.y.tobytes() == envs[0].y.tobytes()


def test_zero_noise_interpolation():
    m = _ls(het=0.7, noise_scale=0.0)
    for e in tasks.tasks_from_manifest(m):
        w = e.distribution.w
        assert tasks.empirical_risk(e, w) == pytest.approx(0.0, abs=1e-24)
        assert np.max(np.abs(tasks.full_grad(e, w))) < 1e-12
        assert tasks.population_risk_estimate(e, w, 1000, seed=1) == pytest.approx(0.0, abs=1e-24)


def _fd_check(env, x, j):
    s = env.sample(j)
    g = tasks.grad(env, x, s)
    h = 1e-5
    fd = np.empty_like(g)
    for k in range(x.shape[0]):
        e = np.zeros_like(x)
        e[k] = h
        fd[k] = (tasks.loss(env, x + e, s) - tasks.loss(env, x - e, s)) / (2 * h)
    return np.max(np.abs(fd - g)) / max(1.0, np.max(np.abs(g)))


def test_gradients_match_finite_differences(ls_family, mlp_family):
    rng = np.random.default_rng(0)
    for _, envs, x0 in (ls_family, mlp_family):
        for _ in range(3):
            x = x0 + 0.3 * rng.standard_normal(x0.shape[0])
            assert _fd_check(envs[0], x, int(rng.integers(envs[0].n))) <= 1e-5


def test_sample_grads_mean_matches_mean_grad(mlp_family):
    _, envs, x0 = mlp_family
    e = envs[2]
    fam = e.family
    G = fam.sample_grads(x0, e.X, e.y)
    np.testing.assert_allclose(G.mean(axis=0), fam.mean_grad(x0, e.X, e.y), rtol=1e-10, atol=1e-12)


def test_population_estimate_monte_carlo():
    e = tasks.tasks_from_manifest(_ls(N=2, het=0.5))[1]
    x = np.ones(6) * 0.2
    ref = tasks.population_risk_estimate(e, x, 1_000_000, seed=11)
    Xs, ys = tasks.fresh_samples(e, tasks.POP, 100_000, 11)
    sd = float(np.std(e.family.losses(x, Xs, ys)))
    est = tasks.population_risk_estimate(e, x, 100_000, seed=12)
    assert abs(est - ref) <= 3 * sd / np.sqrt(100_000)


def test_zero_heterogeneity_population_agreement():
    envs = tasks.tasks_from_manifest(_ls(N=2, het=0.0))
    x = np.full(6, 0.1)
    a = tasks.population_risk_estimate(envs[0], x, 50_000, seed=1)
    b = tasks.population_risk_estimate(envs[1], x, 50_000, seed=2)
    Xs, ys = tasks.fresh_samples(envs[0], tasks.POP, 50_000, 1)
    sd = float(np.std(envs[0].family.losses(x, Xs, ys)))
    assert abs(a - b) <= 4 * sd * np.sqrt(2 / 50_000)


def test_least_squares_smoothness_property(ls_family):
    _, envs, x0 = ls_family
    L = bounds.closed_form_L(envs)
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        x = x0 + rng.standard_normal(6) / np.sqrt(6)
        d = rng.standard_normal(6)
        y = x + rng.uniform(0.01, 1.0) * d / np.linalg.norm(d)
        e = envs[int(rng.integers(3))]
        j = int(rng.integers(e.n))
        s = e.sample(j)
        r = np.linalg.norm(tasks.grad(e, x, s) - tasks.grad(e, y, s)) / np.linalg.norm(x - y)
        worst = max(worst, r)
    assert worst <= L * (1 + 1e-12)


def test_mlp_smoothness_property(mlp_family):
    _, envs, x0 = mlp_family
    L = bounds.probe_L(envs, bounds.probe_pairs(x0, count=64, seed=0))
    rng = np.random.default_rng(6)
    d = x0.shape[0]
    worst = 0.0
    for _ in range(1000):
        u = rng.standard_normal(d)
        x = x0 + rng.uniform(0, 1) * u / np.linalg.norm(u)
        v = rng.standard_normal(d)
        y = x + rng.uniform(0.01, 1.0) * v / np.linalg.norm(v)
        e = envs[int(rng.integers(3))]
        s = e.sample(int(rng.integers(e.n)))
        r = np.linalg.norm(tasks.grad(e, x, s) - tasks.grad(e, y, s)) / np.linalg.norm(x - y)
        worst = max(worst, r)
    assert np.isfinite(L) and worst <= L


@settings(max_examples=40)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10))
def test_losses_non_negative(seed, scale):
    rng = np.random.default_rng(seed)
    ls = tasks.LeastSquares(4)
    assert np.all(ls.losses(scale * rng.standard_normal(4), rng.standard_normal((20, 4)), rng.standard_normal(20)) >= 0)
    mlp = tasks.MLP(3, 4, 5)
    x = scale * rng.standard_normal(mlp.dim)
    assert np.all(mlp.losses(x, scale * rng.standard_normal((20, 3)), rng.integers(0, 5, 20)) >= 0)


def test_prefix_and_redraw(ls_family):
    _, envs, _ = ls_family
    e = envs[0]
    p = e.prefix(100)
    assert p.n == 100 and np.array_equal(p.X, e.X[:100])
    assert e.prefix(e.n) is e
    with pytest.raises(ValueError):
        e.prefix(1)
    assert tasks.redraw(e, 0) is e
    r = tasks.redraw(e, 1)
    assert r.n == e.n and not np.array_equal(r.X, e.X)
    assert r.distribution.same_as(e.distribution)


def test_poison_labels(ls_family, mlp_family):
    for _, envs, _ in (ls_family, mlp_family):
        e = envs[0]
        bad = tasks.poison_labels(e, 5.0, seed=1)
        assert np.array_equal(bad.X, e.X)
        assert not np.array_equal(bad.y, e.y)
        assert bad.distribution is e.distribution


def test_pretrained_base_cached_and_independent_of_knob():
    a = tasks.pretrained_base(_ls(het=0.3))
    b = tasks.pretrained_base(_ls(het=0.9, N=5))
    assert a is b
    envs = tasks.tasks_from_manifest(_ls(het=0.0, n=4000))
    # near the shared generating parameter
    assert np.linalg.norm(a - envs[0].distribution.w) < 0.1


def test_family_dimension_errors(ls_family):
    _, envs, _ = ls_family
    with pytest.raises(ValueError):
        tasks.full_grad(envs[0], np.zeros(5))
    with pytest.raises(ValueError):
        tasks.batch_grad(envs[0], np.zeros(6), [])
