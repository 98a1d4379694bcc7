"""Model-merging algorithms over flat parameter vectors.

All functions take the shared base and per-task deltas (task vectors) and
return a new read-only parameter vector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tasks
from .params import (
    DimensionMismatchError,
    MergeCoefficients,
    as_params,
    coerce_coefficients,
    merge_linear,
    task_vector,
)

METHODS = ("uniform", "task-arith", "normalized", "ties", "dare", "adaptive")


def uniform_average(base, taskvecs: Sequence) -> np.ndarray:
    if len(taskvecs) < 1:
        raise ValueError("need at least one task vector")
    return merge_linear(base, taskvecs, MergeCoefficients.uniform(len(taskvecs)))


def task_arithmetic(base, taskvecs: Sequence, lambda_scalar: float) -> np.ndarray:
    """``base + lambda_scalar * sum(taskvecs)``."""
    if not (lambda_scalar > 0 and math.isfinite(lambda_scalar)):
        raise ValueError(f"lambda_scalar must be positive, got {lambda_scalar}")
    n = len(taskvecs)
    if n < 1:
        raise ValueError("need at least one task vector")
    b = as_params(base, name="base")
    # same accumulation order as merge_linear, so lambda = 1/N is bitwise uniform_average
    out = b.copy()
    for i, tv in enumerate(taskvecs):
        t = np.asarray(tv, dtype=np.float64)
        if t.shape != b.shape:
            raise DimensionMismatchError(f"task vector {i} has shape {t.shape}, base has {b.shape}")
        out += lambda_scalar * t
    return as_params(out)


@dataclass(frozen=True)
class NormalizedMergePlan:
    tau_eff: float
    lambdas: MergeCoefficients
    normalized_dirs: list = field(repr=False)
    eta_ref: tuple = ()


def normalized_merge(base, results: Sequence):
    """Average of fine-tuned finals, plus its normalized-update decomposition.

    With ``d_i = (base - x_i) / (eta_i * ||a_i||_1)`` the output equals
    ``base - tau_eff * sum_i lambda_i * eta_i * d_i`` exactly.
    """
    if not results:
        raise ValueError("need at least one training result")
    b = as_params(base, name="base")
    N = len(results)
    l1 = []
    dirs = []
    for i, r in enumerate(results):
        wv = getattr(r, "weight_vector", None)
        if wv is None:
            raise ValueError(f"result {i} carries no weight vector")
        l1.append(wv.l1)
        dirs.append(as_params((b - r.final) / (r.eta_ref * wv.l1)))
    l1 = np.asarray(l1)
    tau_eff = float(np.sum(l1) / N)
    lam = MergeCoefficients(l1 / np.sum(l1))
    merged = uniform_average(b, [task_vector(r.final, b) for r in results])
    return merged, NormalizedMergePlan(tau_eff, lam, dirs, tuple(float(r.eta_ref) for r in results))


def _trim(tv: np.ndarray, density: float) -> np.ndarray:
    d = tv.shape[0]
    keep = int(math.ceil(density * d))
    out = np.zeros_like(tv)
    if keep >= d:
        out[:] = tv
        return out
    # stable sort on -|tv|: at the cutoff, lower indices win
    order = np.argsort(-np.abs(tv), kind="stable")[:keep]
    out[order] = tv[order]
    return out


def elect_signs(trimmed: np.ndarray) -> np.ndarray:
    """Per-coordinate sign of the summed trimmed deltas, with tie-breaks.

    Zero sum: sign of the entry with the largest magnitude (first such task
    on equal magnitudes); still zero or a magnitude tie with opposite signs:
    positive.
    """
    total = trimmed.sum(axis=0)
    sign = np.sign(total)
    for c in np.flatnonzero(sign == 0):
        col = trimmed[:, c]
        mags = np.abs(col)
        top = mags.max()
        if top == 0:
            sign[c] = 1.0
            continue
        signs_at_top = np.unique(np.sign(col[mags == top]))
        sign[c] = signs_at_top[0] if signs_at_top.size == 1 else 1.0
    return sign


def ties_components(taskvecs: Sequence, density: float):
    """Trimmed deltas, elected signs and the agreement mask."""
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must lie in (0, 1], got {density}")
    T = np.stack([np.asarray(t, dtype=np.float64) for t in taskvecs])
    trimmed = np.stack([_trim(t, density) for t in T])
    sign = elect_signs(trimmed)
    agree = (trimmed != 0) & (np.sign(trimmed) == sign)
    return trimmed, sign, agree


def ties_merge(base, taskvecs: Sequence, density: float, coeffs=None) -> np.ndarray:
    b = as_params(base, name="base")
    N = len(taskvecs)
    lam = MergeCoefficients.uniform(N) if coeffs is None else coerce_coefficients(coeffs)
    if len(lam) != N:
        raise ValueError(f"got {N} task vectors but {len(lam)} coefficients")
    trimmed, _, agree = ties_components(taskvecs, density)
    w = lam.weights[:, None] * agree
    mass = w.sum(axis=0)
    num = (w * trimmed).sum(axis=0)
    delta = np.divide(num, mass, out=np.zeros_like(num), where=mass > 0)
    return as_params(b + delta)


def dare_mask(d: int, drop_p: float, rng) -> np.ndarray:
    return (rng.random(d) >= drop_p).astype(np.float64) / (1.0 - drop_p)


def dare_merge(base, taskvecs: Sequence, drop_p: float, coeffs=None, seed: int = 0) -> np.ndarray:
    if not 0.0 <= drop_p < 1.0:
        raise ValueError(f"drop_p must lie in [0, 1), got {drop_p}")
    N = len(taskvecs)
    lam = MergeCoefficients.uniform(N) if coeffs is None else coerce_coefficients(coeffs)
    if drop_p == 0.0:
        return merge_linear(base, taskvecs, lam)
    rescaled = []
    for i, t in enumerate(taskvecs):
        t = np.asarray(t, dtype=np.float64)
        rng = np.random.default_rng([int(seed), i])
        rescaled.append(t * dare_mask(t.shape[0], drop_p, rng))
    return merge_linear(base, rescaled, lam)


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and threshold)."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[0]
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u - css / np.arange(1, n + 1) > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    w = np.maximum(v - theta, 0.0)
    return w / w.sum()


@dataclass
class HeldoutSet:
    """Fresh per-task samples used only to fit merge coefficients."""

    envs: list
    X: list
    y: list

    @classmethod
    def draw(cls, envs, m: int, seed: int) -> "HeldoutSet":
        if m < 1:
            raise ValueError("heldout size must be >= 1")
        X, y = [], []
        for e in envs:
            a, b = tasks.fresh_samples(e, tasks.HELDOUT, m, seed)
            X.append(a)
            y.append(b)
        return cls(list(envs), X, y)

    def loss_and_grad(self, x):
        fam = self.envs[0].family
        losses = [float(np.mean(fam.losses(x, X, y))) for X, y in zip(self.X, self.y)]
        grads = [fam.mean_grad(x, X, y) for X, y in zip(self.X, self.y)]
        return float(np.mean(losses)), np.mean(grads, axis=0)


@dataclass
class AdaptiveResult:
    coefficients: MergeCoefficients
    loss: float
    history: list


def adaptive_coefficients(base, taskvecs: Sequence, heldout: HeldoutSet, steps: int = 100,
                          step_size: float = 1.0, seed: int = 0, tol: float = 1e-12) -> AdaptiveResult:
    """Projected gradient descent on the merged model's heldout loss.

    Starts at uniform weights; each step halves the trial step until the loss
    does not increase, so the loss history is monotone. ``seed`` is accepted
    for interface symmetry; the procedure is deterministic.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not heldout.X or any(len(y) == 0 for y in heldout.y):
        raise ValueError("empty heldout set")
    b = as_params(base, name="base")
    T = np.stack([np.asarray(t, dtype=np.float64) for t in taskvecs])
    N = T.shape[0]
    lam = np.full(N, 1.0 / N)

    def evaluate(w):
        x = b + w @ T
        f, g = heldout.loss_and_grad(x)
        if not math.isfinite(f):
            raise FloatingPointError("non-finite heldout loss")
        return f, T @ g

    f, g = evaluate(lam)
    history = [(lam.tolist(), f)]
    if N == 1:
        return AdaptiveResult(MergeCoefficients([1.0]), f, history)
    eta = step_size
    for _ in range(steps):
        t = eta
        accepted = False
        for _ in range(60):
            cand = project_simplex(lam - t * g)
            if np.max(np.abs(cand - lam)) <= tol:
                break
            fc, gc = evaluate(cand)
            if fc <= f:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        lam, f, g = cand, fc, gc
        history.append((lam.tolist(), f))
        # let the step grow back after successful halvings
        eta = min(step_size, 2 * t)
    return AdaptiveResult(MergeCoefficients(lam), f, history)


@dataclass(frozen=True)
class MergeSpec:
    method: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown merge method {self.method!r}; expected one of {METHODS}")
        object.__setattr__(self, "params", dict(self.params))

    def to_dict(self) -> dict:
        return {"method": self.method, "params": dict(sorted(self.params.items())), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "MergeSpec":
        return cls(d["method"], dict(d.get("params", {})), int(d.get("seed", 0)))

    @property
    def is_linear_uniform(self) -> bool:
        return self.method in ("uniform", "normalized")


def apply_merge(spec: MergeSpec, base, results: Sequence, envs=None) -> np.ndarray:
    """Merge fine-tuned results (objects with ``.final``) or raw finals."""
    finals = [getattr(r, "final", r) for r in results]
    tvs = [task_vector(f, base) for f in finals]
    p = spec.params
    coeffs = p.get("coeffs")
    if spec.method == "uniform":
        return uniform_average(base, tvs)
    if spec.method == "task-arith":
        return task_arithmetic(base, tvs, float(p.get("lambda", 1.0 / len(tvs))))
    if spec.method == "normalized":
        if not all(hasattr(r, "weight_vector") for r in results):
            raise ValueError("normalized merge needs training results with weight vectors")
        return normalized_merge(base, results)[0]
    if spec.method == "ties":
        return ties_merge(base, tvs, float(p.get("density", 0.2)), coeffs)
    if spec.method == "dare":
        return dare_merge(base, tvs, float(p.get("drop_p", 0.5)), coeffs, spec.seed)
    if envs is None:
        raise ValueError("adaptive merge needs the task environments for heldout data")
    held = HeldoutSet.draw(envs, int(p.get("heldout_m", 200)), spec.seed)
    res = adaptive_coefficients(base, tvs, held, int(p.get("steps", 50)), float(p.get("step_size", 1.0)), spec.seed)
    return merge_linear(base, tvs, res.coefficients)
