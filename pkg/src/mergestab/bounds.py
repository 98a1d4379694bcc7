"""Stability and excess-error bounds for merged fine-tuned models.

Notation used throughout::

    S  = sum_i lam_i * K_i * (sigma_i^2 / n_i + 3 b_i zeta_i^2 / n_i)
    B  = chi^2 * sum_i lam_i zeta_i^2 + (chi^2 + 1) * eps_sgd

The stability bound is ``16 eta^2 S``; for a trade-off parameter ``gamma > 0``
the excess error is bounded by ``8 (L + gamma) eta^2 S + (1/gamma + 2C) B``.
Minimizing over gamma gives ``gamma* = sqrt(B / (8 eta^2 S))`` and the tight
form ``8 L eta^2 S + 2 C B + 4 sqrt(2) eta sqrt(S B)``; fixing ``gamma = 1``
gives the headline total ``8 (L + 1) eta^2 S + (2C + 1) B``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from . import tasks
from .params import MergeCoefficients, coerce_coefficients

ZETA_COEFFS = (5, 12)
DEFAULT_C = 0.5
DEFAULT_RADIUS = 1.0
DEFAULT_PROBES = 32
UNBOUNDED = math.inf


class DegenerateCoefficientError(ValueError):
    pass


@dataclass(frozen=True)
class HeterogeneityProfile:
    sigma_sq: tuple
    zeta_sq: tuple
    L: float
    provenance: str = "probed"

    def __post_init__(self):
        s = tuple(float(v) for v in self.sigma_sq)
        z = tuple(float(v) for v in self.zeta_sq)
        object.__setattr__(self, "sigma_sq", s)
        object.__setattr__(self, "zeta_sq", z)
        if len(s) != len(z) or not s:
            raise ValueError("sigma_sq and zeta_sq need one entry per task")
        if min(s + z) < 0 or not all(map(math.isfinite, s + z)):
            raise ValueError("heterogeneity constants must be finite and non-negative")
        if not (self.L > 0 and math.isfinite(self.L)):
            raise ValueError(f"L must be positive, got {self.L}")
        if self.provenance not in ("closed-form", "probed"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def to_dict(self):
        return {"sigma_sq": list(self.sigma_sq), "zeta_sq": list(self.zeta_sq), "L": self.L, "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["sigma_sq"]), tuple(d["zeta_sq"]), float(d["L"]), d.get("provenance", "probed"))


@dataclass(frozen=True)
class BoundInputs:
    profile: HeterogeneityProfile
    n: tuple
    b: tuple
    K: tuple
    lambdas: MergeCoefficients
    eta_l: float
    C: float = DEFAULT_C
    f0_gap: float = 0.0
    weight_vectors: Optional[tuple] = None
    zeta_coeff: int = 12
    f0_gap_estimated: bool = False

    def __post_init__(self):
        for name in ("n", "b", "K"):
            v = getattr(self, name)
            if np.isscalar(v):
                v = (v,) * len(self.profile.sigma_sq)
            object.__setattr__(self, name, tuple(int(x) for x in v))
        object.__setattr__(self, "lambdas", coerce_coefficients(self.lambdas))
        N = len(self.profile.sigma_sq)
        for name in ("n", "b", "K"):
            if len(getattr(self, name)) != N:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries, expected {N}")
        if len(self.lambdas) != N:
            raise ValueError(f"lambdas has {len(self.lambdas)} entries, expected {N}")
        if min(self.K) < 1 or min(self.b) < 1:
            raise ValueError("K and b must be >= 1")
        for i, (n, b) in enumerate(zip(self.n, self.b)):
            if n < 2 * b:
                raise ValueError(f"task {i}: n={n} < 2b={2 * b}")
        if not (self.eta_l > 0 and math.isfinite(self.eta_l)):
            raise ValueError("eta_l must be positive")
        if self.C < 0 or self.f0_gap < 0:
            raise ValueError("C and f0_gap must be non-negative")
        if self.zeta_coeff not in ZETA_COEFFS:
            raise ValueError(f"zeta_coeff must be one of {ZETA_COEFFS}")
        if self.weight_vectors is not None:
            wv = tuple(np.asarray(getattr(a, "a", a), dtype=np.float64) for a in self.weight_vectors)
            if len(wv) != N:
                raise ValueError("need one weight vector per task")
            object.__setattr__(self, "weight_vectors", wv)

    @property
    def N(self) -> int:
        return len(self.n)

    def to_dict(self) -> dict:
        d = {
            "profile": self.profile.to_dict(),
            "n": list(self.n),
            "b": list(self.b),
            "K": list(self.K),
            "lambdas": self.lambdas.tolist(),
            "eta_l": self.eta_l,
            "C": self.C,
            "f0_gap": self.f0_gap,
            "zeta_coeff": self.zeta_coeff,
        }
        if self.weight_vectors is not None:
            d["weight_vectors"] = [a.tolist() for a in self.weight_vectors]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BoundInputs":
        known = {"profile", "n", "b", "K", "lambdas", "eta_l", "C", "f0_gap", "zeta_coeff", "weight_vectors"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown bound-input fields: {sorted(extra)}")
        prof = HeterogeneityProfile.from_dict(d["profile"])
        N = len(prof.sigma_sq)
        wv = d.get("weight_vectors")
        return cls(
            profile=prof,
            n=tuple(d["n"]) if not np.isscalar(d["n"]) else d["n"],
            b=tuple(d["b"]) if not np.isscalar(d["b"]) else d["b"],
            K=tuple(d["K"]) if not np.isscalar(d["K"]) else d["K"],
            lambdas=d.get("lambdas", [1.0 / N] * N),
            eta_l=float(d["eta_l"]),
            C=float(d.get("C", DEFAULT_C)),
            f0_gap=float(d.get("f0_gap", 0.0)),
            weight_vectors=None if wv is None else tuple(wv),
            zeta_coeff=int(d.get("zeta_coeff", 12)),
        )

    def replace(self, **changes) -> "BoundInputs":
        d = dict(
            profile=self.profile, n=self.n, b=self.b, K=self.K, lambdas=self.lambdas, eta_l=self.eta_l,
            C=self.C, f0_gap=self.f0_gap, weight_vectors=self.weight_vectors, zeta_coeff=self.zeta_coeff,
            f0_gap_estimated=self.f0_gap_estimated,
        )
        d.update(changes)
        return BoundInputs(**d)


# --- closed-form pieces ------------------------------------------------------


def stability_sum(inp: BoundInputs) -> float:
    lam = inp.lambdas.weights
    total = 0.0
    for i in range(inp.N):
        s2, z2 = inp.profile.sigma_sq[i], inp.profile.zeta_sq[i]
        total += lam[i] * inp.K[i] * (s2 / inp.n[i] + 3.0 * inp.b[i] * z2 / inp.n[i])
    return total


def stability_bound(inp: BoundInputs) -> float:
    return 16.0 * inp.eta_l ** 2 * stability_sum(inp)


def local_stability_bound(K: int, eta: float, sigma_sq: float, zeta_sq: float, n: int, b: int) -> float:
    """Single-task bound ``16 K eta^2 (sigma^2/n + 3 b zeta^2 / n)``."""
    return 16.0 * K * eta ** 2 * (sigma_sq / n + 3.0 * b * zeta_sq / n)


@dataclass(frozen=True)
class ACoefficients:
    A1: float
    A2: float
    A3: float
    tau_eff: float
    lambdas: tuple
    K_bar: float


def a_coefficients(weight_vectors: Optional[Sequence] = None, K: Optional[Sequence] = None) -> ACoefficients:
    """A1, A2, A3, tau_eff and the schedule-induced weights.

    Pass either per-task weight vectors (general form) or a list of step
    counts (plain SGD, all-ones weights).
    """
    if weight_vectors is not None:
        A = [np.asarray(getattr(a, "a", a), dtype=np.float64) for a in weight_vectors]
        if not A or any(a.size == 0 for a in A):
            raise ValueError("empty weight vectors")
        N = len(A)
        l1 = np.array([a.sum() for a in A])
        l2 = np.array([a @ a for a in A])
        last = np.array([a[-1] for a in A])
        tau = float(l1.sum() / N)
        lam = l1 / l1.sum()
        A1 = tau * N * float(np.sum(lam ** 2 * l2 / l1 ** 2))
        A2 = float(np.sum(lam * (l2 - last ** 2)))
        A3 = float(np.max(l1 * (l1 - last)))
        K_bar = float(np.mean([a.size for a in A]))
        return ACoefficients(A1, A2, A3, tau, tuple(lam.tolist()), K_bar)
    if K is None or len(K) == 0:
        raise ValueError("need weight vectors or a non-empty K list")
    Ks = np.asarray(K, dtype=np.float64)
    if np.any(Ks < 1):
        raise ValueError("every K must be >= 1")
    N = Ks.size
    K_bar = float(Ks.mean())
    lam = Ks / Ks.sum()
    A1 = N * float(np.sum(K_bar / Ks * lam ** 2))
    A2 = float(np.sum(lam * (Ks - 1)))
    A3 = float(np.max(Ks * (Ks - 1)))
    return ACoefficients(A1, A2, A3, K_bar, tuple(lam.tolist()), K_bar)


def _a_for(inp: BoundInputs) -> ACoefficients:
    if inp.weight_vectors is not None:
        return a_coefficients(weight_vectors=inp.weight_vectors)
    return a_coefficients(K=inp.K)


def eps_sgd_terms(f0_gap, L, sigma_sq, zeta_sq, N, K_bar, A1, A2, A3, tau_eff=None, zeta_coeff=12):
    """The four summands of the surrogate gradient-norm bound."""
    tau_eff = K_bar if tau_eff is None else tau_eff
    root = math.sqrt(N * K_bar)
    return (
        4.0 * f0_gap * (K_bar / tau_eff) / root,
        4.0 * L * sigma_sq * A1 / root,
        6.0 * N * L ** 2 * sigma_sq * A2 / K_bar,
        zeta_coeff * N * L ** 2 * zeta_sq * A3 / K_bar,
    )


def eps_sgd(inp: BoundInputs) -> float:
    a = _a_for(inp)
    terms = eps_sgd_terms(
        inp.f0_gap, inp.profile.L, max(inp.profile.sigma_sq), max(inp.profile.zeta_sq),
        inp.N, a.K_bar, a.A1, a.A2, a.A3, a.tau_eff, inp.zeta_coeff,
    )
    return float(sum(terms))


def chi_square(lambdas) -> float:
    lam = np.asarray(getattr(lambdas, "weights", lambdas), dtype=np.float64)
    if np.any(lam == 0):
        raise DegenerateCoefficientError(f"degenerate coefficient: zero weight in {lam.tolist()}")
    N = lam.size
    return float(np.sum((1.0 / N - lam) ** 2 / lam ** 2))


def weighted_zeta(inp: BoundInputs) -> float:
    return float(np.dot(inp.lambdas.weights, inp.profile.zeta_sq))


def original_grad_bound(inp: BoundInputs) -> float:
    chi = chi_square(inp.lambdas)
    return 2.0 * (chi + 1.0) * eps_sgd(inp) + 2.0 * chi * weighted_zeta(inp)


def optimization_bracket(inp: BoundInputs) -> float:
    chi = chi_square(inp.lambdas)
    return chi * weighted_zeta(inp) + (chi + 1.0) * eps_sgd(inp)


def gamma_star(inp: BoundInputs) -> Optional[float]:
    """Minimizer of :func:`bound_at_gamma`.

    Returns ``math.inf`` when the stability part vanishes but the
    optimization part does not, and ``None`` when both vanish.
    """
    num = optimization_bracket(inp)
    den = 8.0 * inp.eta_l ** 2 * stability_sum(inp)
    if den == 0.0:
        return UNBOUNDED if num > 0 else None
    return math.sqrt(num / den)


def bound_at_gamma(inp: BoundInputs, gamma: float) -> float:
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    S = stability_sum(inp)
    B = optimization_bracket(inp)
    if math.isinf(gamma):
        return 8.0 * inp.profile.L * inp.eta_l ** 2 * S + 2.0 * inp.C * B if S == 0 else math.inf
    return 8.0 * (inp.profile.L + gamma) * inp.eta_l ** 2 * S + (1.0 / gamma + 2.0 * inp.C) * B


def tight_bound(inp: BoundInputs) -> float:
    """``bound_at_gamma`` at its minimizer, in closed form."""
    S = stability_sum(inp)
    B = optimization_bracket(inp)
    return 8.0 * inp.profile.L * inp.eta_l ** 2 * S + 2.0 * inp.C * B + 4.0 * math.sqrt(2.0) * inp.eta_l * math.sqrt(S * B)


def dissimilarity_constants(lambdas, zeta_sq) -> tuple[float, float]:
    lam = np.asarray(getattr(lambdas, "weights", lambdas), dtype=np.float64)
    return 2.0, 2.0 * float(np.dot(lam, np.asarray(zeta_sq, dtype=np.float64)))


def _json_num(v):
    if v is None:
        return None
    if isinstance(v, float) and math.isinf(v):
        return "unbounded"
    return v


@dataclass(frozen=True)
class BoundBreakdown:
    stability_term: float
    stability_component: float
    A1: float
    A2: float
    A3: float
    tau_eff: float
    eps_sgd: float
    chi_sq: float
    kappa_sq: float
    optimization_term: float
    gamma_star: Optional[float]
    total: float
    total_at_gamma_star: float
    f0_gap_estimated: bool = False

    def to_dict(self) -> dict:
        return {k: _json_num(v) for k, v in self.__dict__.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def excess_bound(inp: BoundInputs) -> BoundBreakdown:
    a = _a_for(inp)
    S = stability_sum(inp)
    eta2 = inp.eta_l ** 2
    eps = eps_sgd(inp)
    chi = chi_square(inp.lambdas)
    B = chi * weighted_zeta(inp) + (chi + 1.0) * eps
    stab_comp = 8.0 * (inp.profile.L + 1.0) * eta2 * S
    opt = (2.0 * inp.C + 1.0) * B
    _, kappa = dissimilarity_constants(inp.lambdas, inp.profile.zeta_sq)
    return BoundBreakdown(
        stability_term=16.0 * eta2 * S,
        stability_component=stab_comp,
        A1=a.A1,
        A2=a.A2,
        A3=a.A3,
        tau_eff=a.tau_eff,
        eps_sgd=eps,
        chi_sq=chi,
        kappa_sq=kappa,
        optimization_term=opt,
        gamma_star=gamma_star(inp),
        total=stab_comp + opt,
        total_at_gamma_star=tight_bound(inp),
        f0_gap_estimated=inp.f0_gap_estimated,
    )


# --- probing ---------------------------------------------------------------


def probe_points(x_ref, radius: float = DEFAULT_RADIUS, count: int = DEFAULT_PROBES, seed: int = 0) -> np.ndarray:
    """``x_ref`` followed by ``count`` points uniform on the sphere of ``radius``."""
    x_ref = np.asarray(x_ref, dtype=np.float64)
    rng = np.random.default_rng([int(seed), 0xB0])
    u = rng.standard_normal((count, x_ref.shape[0]))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return np.vstack([x_ref, x_ref + radius * u])


def probe_pairs(x_ref, count: int = DEFAULT_PROBES, radius: float = DEFAULT_RADIUS, sep: float = 0.1, seed: int = 0):
    """Pairs ``(x, x + sep * u)`` with ``x`` drawn from the probe sphere."""
    pts = probe_points(x_ref, radius, count, seed)
    rng = np.random.default_rng([int(seed), 0xB1])
    u = rng.standard_normal(pts.shape)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return [(p, p + sep * d) for p, d in zip(pts, u)]


def estimate_sigma(env, x_ref, probes: Optional[np.ndarray] = None) -> float:
    """Max over probes of the per-sample gradient variance of ``env``."""
    pts = probe_points(x_ref) if probes is None else np.atleast_2d(probes)
    fam = env.family
    best = 0.0
    for x in pts:
        G = fam.sample_grads(x, env.X, env.y)
        dev = G - G.mean(axis=0)
        best = max(best, float(np.mean(np.einsum("ij,ij->i", dev, dev))))
    return best


def _full_grads(envs, x):
    return np.stack([tasks.full_grad(e, x) for e in envs])


def estimate_zeta(envs, probes) -> np.ndarray:
    """Per task: max over probes of ``||grad f_i - mean_j grad f_j||^2``."""
    pts = np.atleast_2d(probes)
    if pts.shape[0] < 1:
        raise ValueError("need at least one probe point")
    out = np.zeros(len(envs))
    if len(envs) == 1:
        return out
    for x in pts:
        G = _full_grads(envs, x)
        dev = G - G.mean(axis=0)
        out = np.maximum(out, np.einsum("ij,ij->i", dev, dev))
    return out


def probe_L(envs, pairs) -> float:
    """Max per-sample gradient Lipschitz ratio over probe pairs."""
    envs = envs if isinstance(envs, (list, tuple)) else [envs]
    best = 0.0
    for x, y in pairs:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        gap = float(np.linalg.norm(x - y))
        if gap == 0.0:
            raise ValueError("coincident probe pair")
        for e in envs:
            fam = e.family
            D = fam.sample_grads(x, e.X, e.y) - fam.sample_grads(y, e.X, e.y)
            best = max(best, float(np.sqrt(np.max(np.einsum("ij,ij->i", D, D)))) / gap)
    return best


def closed_form_L(envs) -> float:
    envs = envs if isinstance(envs, (list, tuple)) else [envs]
    return max(tasks.LeastSquares.per_sample_smoothness(e.X) for e in envs)


def gram_lambda_max(env) -> float:
    """Largest eigenvalue of the empirical second-moment matrix of the features."""
    return float(np.linalg.eigvalsh(env.X.T @ env.X / env.n)[-1])


def estimate_L(envs, pairs=None) -> tuple[float, str]:
    """Smoothness constant with its provenance."""
    envs = envs if isinstance(envs, (list, tuple)) else [envs]
    if all(e.distribution.family == "least-squares" for e in envs):
        return closed_form_L(envs), "closed-form"
    if not pairs:
        raise ValueError("probe pairs required for non-quadratic families")
    return probe_L(envs, pairs), "probed"


def probed_profile(envs, x_ref, radius: float = DEFAULT_RADIUS, count: int = DEFAULT_PROBES, seed: int = 0,
                   sigma_m: Optional[int] = None) -> HeterogeneityProfile:
    """Profile from gradient probes around ``x_ref``.

    ``sigma_m`` caps the samples used per task for the variance probe.
    """
    pts = probe_points(x_ref, radius, count, seed)
    sig = []
    for e in envs:
        sub = e.prefix(min(e.n, sigma_m)) if sigma_m else e
        sig.append(estimate_sigma(sub, x_ref, pts))
    zeta = estimate_zeta(envs, pts)
    if all(e.distribution.family == "least-squares" for e in envs):
        L = closed_form_L(envs)
    else:
        L = probe_L(envs, probe_pairs(x_ref, count, radius, seed=seed))
    return HeterogeneityProfile(tuple(sig), tuple(zeta.tolist()), L, "probed")


# --- least-squares closed forms -----------------------------------------------


def max_quadratic_on_ball(P, q, const: float, r: float) -> float:
    """``max_{||u|| <= r} u^T P u + 2 q^T u + const`` for symmetric PSD ``P``.

    The maximizer lies on the sphere and solves ``(nu I - P) u = q`` with
    ``nu >= lambda_max(P)``; ``nu`` is found by root bracketing.
    """
    P = np.asarray(P, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if r == 0:
        return float(const)
    lam, V = np.linalg.eigh(P)
    qh = V.T @ q
    lmax = lam[-1]
    scale = max(abs(lmax), 1.0)
    top = lam >= lmax - 1e-12 * scale

    def value(u):
        return float(np.sum(lam * u * u) + 2.0 * qh @ u + const)

    def norm_u(nu):
        return float(np.linalg.norm(qh / (nu - lam)))

    qnorm = float(np.linalg.norm(qh))
    lo = lmax + 1e-13 * scale
    if qnorm == 0.0 or norm_u(lo) <= r:
        # hard case: nu = lambda_max, spend the spare radius on the top eigenspace
        u = np.zeros_like(qh)
        rest = ~top
        u[rest] = qh[rest] / (lmax - lam[rest])
        spare = math.sqrt(max(r * r - float(u @ u), 0.0))
        qt = qh[top]
        nt = float(np.linalg.norm(qt))
        if nt > 0:
            u[top] = spare * qt / nt
        else:
            u[np.flatnonzero(top)[0]] = spare
        return value(u)
    hi = lmax + 1.01 * qnorm / r
    while norm_u(hi) > r:
        hi = lmax + 2.0 * (hi - lmax)
    nu = optimize.brentq(lambda t: norm_u(t) - r, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return value(qh / (nu - lam))


def ls_sigma_sq(dist, x) -> float:
    """Population per-sample gradient variance at ``x`` (Gaussian features)."""
    mu = dist.shift
    m = float(mu @ mu)
    p = dist.p
    delta = np.asarray(x) - dist.w
    a = float(mu @ delta)
    return dist.noise_scale ** 2 * (p + m) + a * a * (p + 2) + float(delta @ delta) * (m + p + 1)


def ls_sigma_sq_max(dist, x_ref, radius: float) -> float:
    mu = dist.shift
    m = float(mu @ mu)
    p = dist.p
    Q = (p + 2) * np.outer(mu, mu) + (m + p + 1) * np.eye(p)
    c = np.asarray(x_ref) - dist.w
    return max_quadratic_on_ball(Q, Q @ c, float(c @ Q @ c) + dist.noise_scale ** 2 * (p + m), radius)


def _ls_zeta_affine(dists):
    Ms, rhs = zip(*(d.population_affine() for d in dists))
    Mbar = np.mean(Ms, axis=0)
    rbar = np.mean(rhs, axis=0)
    return [(M - Mbar, r - rbar) for M, r in zip(Ms, rhs)]


def ls_zeta_sq(dists, x) -> np.ndarray:
    """Population ``||grad F_i(x) - mean_j grad F_j(x)||^2`` per task."""
    out = []
    for A, c in _ls_zeta_affine(dists):
        v = A @ x - c
        out.append(float(v @ v))
    return np.asarray(out)


def ls_zeta_sq_max(dists, x_ref, radius: float) -> np.ndarray:
    out = []
    for A, c in _ls_zeta_affine(dists):
        d = A @ x_ref - c
        out.append(max_quadratic_on_ball(A.T @ A, A.T @ d, float(d @ d), radius))
    return np.asarray(out)


def closed_form_profile(envs, x_ref, radius: float = DEFAULT_RADIUS) -> HeterogeneityProfile:
    """Population sigma^2 and zeta^2 maximized over the ball, exact per-sample L."""
    dists = [e.distribution for e in envs]
    if any(d.family != "least-squares" for d in dists):
        raise ValueError("closed-form profile exists only for the least-squares family")
    x_ref = np.asarray(x_ref, dtype=np.float64)
    sig = tuple(ls_sigma_sq_max(d, x_ref, radius) for d in dists)
    zeta = tuple(ls_zeta_sq_max(dists, x_ref, radius).tolist()) if len(dists) > 1 else (0.0,)
    return HeterogeneityProfile(sig, zeta, closed_form_L(envs), "closed-form")


# --- dissimilarity audit -------------------------------------------------------


@dataclass
class DissimilarityReport:
    beta_sq: float
    kappa_sq: float
    lhs: list
    rhs: list
    max_violation: float
    violations: int


def verify_grad_dissimilarity(envs, lambdas, probes, zeta_sq=None) -> DissimilarityReport:
    """Check ``sum lam_i ||g_i||^2 <= beta^2 ||sum lam_i g_i||^2 + kappa^2`` at each probe."""
    lam = np.asarray(getattr(lambdas, "weights", lambdas), dtype=np.float64)
    pts = np.atleast_2d(probes)
    if pts.shape[0] < 1:
        raise ValueError("need at least one probe point")
    if zeta_sq is None:
        zeta_sq = estimate_zeta(envs, pts)
    beta, kappa = dissimilarity_constants(lam, zeta_sq)
    lhs, rhs = [], []
    for x in pts:
        G = _full_grads(envs, x)
        lhs.append(float(lam @ np.einsum("ij,ij->i", G, G)))
        g = lam @ G
        rhs.append(beta * float(g @ g) + kappa)
    viol = [l - r for l, r in zip(lhs, rhs)]
    return DissimilarityReport(beta, kappa, lhs, rhs, max(0.0, max(viol)), sum(v > 0 for v in viol))


def shifted_ensemble_zeta(envs, base, deltas, probes) -> np.ndarray:
    """Heterogeneity of an ensemble of (modified) task vectors.

    Task ``i`` is represented by the gradient field of ``f_i`` re-centred so
    that it vanishes at ``base + deltas[i]``; the result is the per-task max
    over probes of the squared deviation from the ensemble mean field.
    """
    base = np.asarray(base, dtype=np.float64)
    anchors = np.stack([tasks.full_grad(e, base + np.asarray(d)) for e, d in zip(envs, deltas)])
    out = np.zeros(len(envs))
    for x in np.atleast_2d(probes):
        G = _full_grads(envs, x) - anchors
        dev = G - G.mean(axis=0)
        out = np.maximum(out, np.einsum("ij,ij->i", dev, dev))
    return out


# --- f0 gap -------------------------------------------------------------------


def f0_gap(envs, x0, lambdas, max_iter: int = 100_000, tol: float = 1e-8) -> tuple[float, dict]:
    """``f~(x0) - min f~`` for the lambda-weighted empirical risk (oracle estimate)."""
    from .oracle import oracle_minimize

    lam = np.asarray(getattr(lambdas, "weights", lambdas), dtype=np.float64)
    res = oracle_minimize(envs, x0, weights=lam, max_iter=max_iter, tol=tol)
    f_x0 = float(sum(w * tasks.empirical_risk(e, x0) for w, e in zip(lam, envs)))
    return max(f_x0 - res.value, 0.0), {"converged": res.converged, "grad_norm": res.grad_norm, "method": res.method}


def bound_inputs_for(envs, cfgs, lambdas, profile: HeterogeneityProfile, x0=None, C: float = DEFAULT_C,
                     zeta_coeff: int = 12, general: bool = False, estimate_gap: bool = True) -> BoundInputs:
    """Assemble bound inputs from environments and fine-tuning configs."""
    from .trainer import schedule_weight_vector

    n = tuple(c.n_used(e.n) for e, c in zip(envs, cfgs))
    gap = 0.0
    if estimate_gap and x0 is not None:
        gap, _ = f0_gap(envs, x0, lambdas)
    wv = tuple(schedule_weight_vector(c.schedule, c.K) for c in cfgs) if general else None
    return BoundInputs(
        profile=profile,
        n=n,
        b=tuple(c.b for c in cfgs),
        K=tuple(c.K for c in cfgs),
        lambdas=lambdas,
        eta_l=cfgs[0].schedule.eta_ref,
        C=C,
        f0_gap=gap,
        weight_vectors=wv,
        zeta_coeff=zeta_coeff,
        f0_gap_estimated=estimate_gap and x0 is not None,
    )
