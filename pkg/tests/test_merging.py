import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from mergestab import merging, tasks
from mergestab.merging import (
    HeldoutSet,
    MergeSpec,
    adaptive_coefficients,
    apply_merge,
    dare_merge,
    normalized_merge,
    project_simplex,
    task_arithmetic,
    ties_merge,
    uniform_average,
)
from mergestab.params import DimensionMismatchError, merge_linear
from mergestab.trainer import FinetuneConfig, Schedule, finetune


def test_uniform_average_cases():
    rng = np.random.default_rng(0)
    base = rng.standard_normal(5)
    tau = rng.standard_normal(5)
    assert np.allclose(uniform_average(base, [tau, -tau]), base, atol=1e-15)
    assert np.array_equal(uniform_average(base, [tau]), base + tau)
    tvs = rng.standard_normal((3, 5))
    assert uniform_average(base, tvs).tobytes() == merge_linear(base, tvs, [1 / 3] * 3).tobytes()
    with pytest.raises(ValueError):
        uniform_average(base, [])


@given(st.integers(1, 8), st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_task_arithmetic_at_one_over_n_is_uniform(N, d, seed):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal(d)
    tvs = list(rng.standard_normal((N, d)))
    assert task_arithmetic(base, tvs, 1.0 / N).tobytes() == uniform_average(base, tvs).tobytes()


def test_task_arithmetic_oracle_and_errors():
    rng = np.random.default_rng(1)
    base, t1, t2 = rng.standard_normal((3, 4))
    out = task_arithmetic(base, [t1, t2], 0.3)
    for j in range(4):
        assert out[j] == pytest.approx(base[j] + 0.3 * t1[j] + 0.3 * t2[j], rel=1e-15)
    for bad in (0.0, -1.0, float("nan")):
        with pytest.raises(ValueError):
            task_arithmetic(base, [t1], bad)
    with pytest.raises(DimensionMismatchError):
        task_arithmetic(base, [np.zeros(3)], 0.5)


def _results(env, x0, Ks, sched):
    return [finetune(x0, env, FinetuneConfig(K, 2, sched, seed=i)) for i, K in enumerate(Ks)]


def test_normalized_plan_values(ls_family):
    _, envs, x0 = ls_family
    _, plan = normalized_merge(x0, _results(envs[0], x0, [7, 7, 7], Schedule.constant(0.01)))
    assert plan.tau_eff == 7
    assert np.allclose(plan.lambdas.weights, 1 / 3)
    _, plan = normalized_merge(x0, _results(envs[0], x0, [2, 6], Schedule.constant(0.01)))
    assert plan.tau_eff == 4
    assert plan.lambdas.weights.tolist() == [0.25, 0.75]


@pytest.mark.parametrize("sched", [Schedule.constant(0.01), Schedule.exp_decay(0.01, 0.98),
                                   Schedule.proximal(0.01, 0.1)], ids=lambda s: s.kind)
def test_normalized_reconstruction(ls_family, sched):
    _, envs, x0 = ls_family
    res = [finetune(x0, e, FinetuneConfig(K, 3, sched, seed=i)) for i, (e, K) in enumerate(zip(envs, [20, 45, 90]))]
    merged, plan = normalized_merge(x0, res)
    recon = x0 - plan.tau_eff * sum(l * eta * d for l, eta, d in zip(plan.lambdas.weights, plan.eta_ref, plan.normalized_dirs))
    plain = sum(r.final for r in res) / len(res)
    assert np.max(np.abs(recon - plain)) <= 1e-10
    assert np.max(np.abs(merged - plain)) <= 1e-10


def test_ties_hand_examples():
    z = np.zeros(1)
    assert ties_merge(z, [np.array([3.0]), np.array([-1.0])], 1.0).tolist() == [3.0]
    # exact cancellation, equal magnitudes: positive wins
    assert ties_merge(z, [np.array([1.0]), np.array([-1.0])], 1.0).tolist() == [1.0]
    # cancellation with one larger entry of negative sign
    assert ties_merge(z, [np.array([1.0]), np.array([1.0]), np.array([-2.0])], 1.0).tolist() == [-2.0]
    assert ties_merge(z, [z, z], 1.0).tolist() == [0.0]


def test_ties_no_conflict_equals_linear():
    rng = np.random.default_rng(3)
    mag = np.abs(rng.standard_normal((3, 6))) + 0.1
    signs = rng.choice([-1.0, 1.0], 6)
    tvs = mag * signs
    lam = [0.2, 0.3, 0.5]
    base = rng.standard_normal(6)
    np.testing.assert_allclose(ties_merge(base, tvs, 1.0, lam), merge_linear(base, tvs, lam), rtol=1e-14, atol=1e-14)


def test_ties_trim_keeps_lower_index_on_ties():
    out = merging._trim(np.array([1.0, -1.0, 1.0, 0.5]), 0.5)
    assert out.tolist() == [1.0, -1.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        ties_merge(np.zeros(2), [np.ones(2)], 0.0)


@settings(max_examples=50)
@given(st.integers(1, 5), st.integers(1, 25), st.floats(0.05, 1.0), st.integers(0, 2**31 - 1))
def test_ties_support_and_sign(N, d, density, seed):
    rng = np.random.default_rng(seed)
    tvs = rng.standard_normal((N, d)) * rng.integers(0, 2, (N, d))
    trimmed, sign, _ = merging.ties_components(tvs, density)
    delta = ties_merge(np.zeros(d), tvs, density)
    support = np.any(trimmed != 0, axis=0)
    assert np.all(delta[~support] == 0)
    nz = delta != 0
    assert np.all(np.sign(delta[nz]) == sign[nz])


def test_dare_basics():
    rng = np.random.default_rng(4)
    base = rng.standard_normal(8)
    tvs = rng.standard_normal((3, 8))
    assert dare_merge(base, tvs, 0.0).tobytes() == merge_linear(base, tvs, [1 / 3] * 3).tobytes()
    assert dare_merge(base, tvs, 0.4, seed=3).tobytes() == dare_merge(base, tvs, 0.4, seed=3).tobytes()
    assert dare_merge(base, tvs, 0.4, seed=3).tobytes() != dare_merge(base, tvs, 0.4, seed=4).tobytes()
    for bad in (-0.1, 1.0):
        with pytest.raises(ValueError):
            dare_merge(base, tvs, bad)
    big = rng.standard_normal((2, 1000))
    assert np.allclose(dare_merge(np.zeros(1000), big, 1e-9, seed=1), merge_linear(np.zeros(1000), big, [0.5, 0.5]),
                       rtol=1e-8, atol=1e-12)


def test_dare_high_drop_survivors():
    tv = np.ones(10)
    survivors = []
    for s in range(4000):
        out = dare_merge(np.zeros(10), [tv], 0.9, seed=s)
        alive = out[out != 0]
        assert np.allclose(alive, 10.0)
        survivors.append(alive.size)
    assert np.mean(survivors) == pytest.approx(1.0, abs=3 * np.sqrt(0.9 / 4000))


def test_dare_unbiased():
    rng = np.random.default_rng(6)
    tvs = rng.standard_normal((2, 5))
    plain = merge_linear(np.zeros(5), tvs, [0.5, 0.5])
    draws = np.stack([dare_merge(np.zeros(5), tvs, 0.5, seed=s) for s in range(10_000)])
    se = draws.std(axis=0, ddof=1) / np.sqrt(10_000)
    assert np.all(np.abs(draws.mean(axis=0) - plain) <= 3 * se)


def _qp_projection(v):
    n = v.size
    res = optimize.minimize(lambda w: 0.5 * np.sum((w - v) ** 2), np.full(n, 1 / n), jac=lambda w: w - v,
                            constraints=[{"type": "eq", "fun": lambda w: w.sum() - 1, "jac": lambda w: np.ones(n)}],
                            bounds=[(0, None)] * n, method="SLSQP", options={"ftol": 1e-14, "maxiter": 500})
    return res.x


@settings(max_examples=60)
@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_simplex_projection_matches_qp(n, seed):
    v = np.random.default_rng(seed).standard_normal(n) * 3
    w = project_simplex(v)
    assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-12
    np.testing.assert_allclose(w, _qp_projection(v), atol=1e-6)


def _ls_experts(seed, N=2, n=200):
    m = tasks.FamilyManifest.from_dict(
        {"family": "least-squares", "N": N, "p": 5, "n": n, "het_knob": 1.0, "seed": seed})
    envs = tasks.tasks_from_manifest(m)
    x0 = tasks.pretrained_base(m)
    cfg = FinetuneConfig(300, 4, Schedule.constant(0.01))
    tvs = [finetune(x0, e, cfg.with_(seed=i)).final - x0 for i, e in enumerate(envs)]
    return envs, x0, tvs


def test_adaptive_single_task():
    envs, x0, tvs = _ls_experts(0, N=1)
    r = adaptive_coefficients(x0, tvs, HeldoutSet.draw(envs, 50, 0))
    assert r.coefficients.weights.tolist() == [1.0]


def test_adaptive_identical_tasks_symmetric_loss():
    envs, x0, tvs = _ls_experts(1, N=1)
    held = HeldoutSet.draw(envs * 2, 100, 0)
    r = adaptive_coefficients(x0, [tvs[0], tvs[0]], held)
    half = held.loss_and_grad(x0 + tvs[0])[0]
    assert abs(r.loss - half) <= 1e-9


def test_adaptive_simplex_monotone_and_grid():
    envs, x0, tvs = _ls_experts(2)
    held = HeldoutSet.draw(envs, 300, 5)
    r = adaptive_coefficients(x0, tvs, held, steps=200)
    losses = [f for _, f in r.history]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    for lam, _ in r.history:
        assert min(lam) >= 0 and abs(sum(lam) - 1) <= 1e-12
    assert r.loss <= held.loss_and_grad(uniform_average(x0, tvs))[0]
    grid = np.linspace(0, 1, 1001)
    vals = [held.loss_and_grad(x0 + g * tvs[0] + (1 - g) * tvs[1])[0] for g in grid]
    assert abs(grid[int(np.argmin(vals))] - r.coefficients.weights[0]) <= 0.02


def test_adaptive_errors():
    envs, x0, tvs = _ls_experts(3)
    held = HeldoutSet.draw(envs, 10, 0)
    with pytest.raises(ValueError):
        adaptive_coefficients(x0, tvs, held, steps=0)
    with pytest.raises(ValueError):
        HeldoutSet.draw(envs, 0, 0)


def test_heldout_disjoint_from_training(ls_family):
    _, envs, _ = ls_family
    held = HeldoutSet.draw(envs, 50, 0)
    train_rows = {r.tobytes() for r in envs[0].X}
    assert not any(r.tobytes() in train_rows for r in held.X[0])


def test_merge_spec_and_dispatch(ls_family):
    _, envs, x0 = ls_family
    res = [finetune(x0, e, FinetuneConfig(20, 2, Schedule.constant(0.01), seed=i)) for i, e in enumerate(envs)]
    finals = [r.final for r in res]
    tvs = [f - x0 for f in finals]
    assert apply_merge(MergeSpec("uniform"), x0, res).tobytes() == uniform_average(x0, tvs).tobytes()
    assert np.allclose(apply_merge(MergeSpec("normalized"), x0, res), uniform_average(x0, tvs), atol=1e-12)
    assert np.array_equal(apply_merge(MergeSpec("ties", {"density": 0.5}), x0, finals), ties_merge(x0, tvs, 0.5))
    assert np.array_equal(apply_merge(MergeSpec("dare", {"drop_p": 0.3}, seed=2), x0, finals),
                          dare_merge(x0, tvs, 0.3, seed=2))
    assert np.isfinite(apply_merge(MergeSpec("adaptive", {"steps": 5}), x0, finals, envs)).all()
    with pytest.raises(ValueError):
        apply_merge(MergeSpec("adaptive"), x0, finals)
    with pytest.raises(ValueError):
        apply_merge(MergeSpec("normalized"), x0, finals)
    with pytest.raises(ValueError):
        MergeSpec("fisher")
    spec = MergeSpec("dare", {"drop_p": 0.2}, seed=4)
    assert MergeSpec.from_dict(spec.to_dict()) == spec


def test_elect_signs_exhaustive_small():
    # every 2x1 integer configuration in [-2, 2]: elected sign is never 0
    for a, b in itertools.product(range(-2, 3), repeat=2):
        s = merging.elect_signs(np.array([[float(a)], [float(b)]]))
        assert s[0] in (-1.0, 1.0)
        if a + b != 0:
            assert s[0] == np.sign(a + b)
