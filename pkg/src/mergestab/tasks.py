"""Synthetic multi-task families with a heterogeneity knob.

Two loss families are supported:

* ``least-squares``: linear model, loss ``0.5 * (<phi, x> - y)**2``.
* ``mlp``: one tanh hidden layer with a softmax cross-entropy head.

Task ``i`` of an ``N``-task family rotates a shared generating parameter by
``het * (i / N) * pi / 2`` inside a fixed random 2-plane and shifts the feature
mean by ``het * shift_scale * (i / N)`` along a third fixed direction. With
``het = 0`` every task has the same distribution.

Datasets are never stored: every sample stream is a pure function of
``(seed, task_id, stream, ...)`` through ``numpy.random.default_rng``.
"""
from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize

from . import _pykernels, kernels
from .params import DimensionMismatchError, as_params

FAMILIES = ("least-squares", "mlp")
FAMILY_ALIASES = {
    "least-squares-linear": "least-squares",
    "mlp-tanh": "mlp",
    "mlp-tanh-softmax": "mlp",
}

# disjoint seed streams; test/heldout/population never overlap training data
TRAIN, REPLACE, TEST, HELDOUT, POP, BASE, LAYOUT = range(7)

SIGNAL_NORM = 2.0


class LeastSquares:
    name = "least-squares"

    def __init__(self, p: int):
        self.p = p
        self.dim = p

    def losses(self, x, X, y):
        r = X @ x - y
        return 0.5 * r * r

    def sample_grads(self, x, X, y):
        r = X @ x - y
        return r[:, None] * X

    def mean_grad(self, x, X, y):
        r = X @ x - y
        return (X.T @ r) / X.shape[0]

    def accuracy(self, x, X, y):
        return None

    def sgd(self, x0, X, y, idx, lrs, prox, path=None, max_norm=1e8):
        return kernels.sgd_least_squares(x0, X, y, idx, lrs, prox, path, max_norm)

    @staticmethod
    def per_sample_smoothness(X) -> float:
        """Exact per-sample constant: the Hessian of sample j is phi_j phi_j^T."""
        return float(np.max(np.einsum("ij,ij->i", X, X)))


class MLP:
    name = "mlp"

    def __init__(self, p: int, hidden: int, C: int):
        self.p, self.H, self.C = p, hidden, C
        self.dim = hidden * p + hidden + C * hidden + C

    def unpack(self, x):
        return _pykernels.mlp_unpack(x, self.p, self.H, self.C)

    def _forward(self, x, X):
        W1, b1, W2, b2 = self.unpack(x)
        Hh = np.tanh(X @ W1.T + b1)
        O = Hh @ W2.T + b2
        return Hh, O

    def logits(self, x, X):
        return self._forward(x, X)[1]

    def losses(self, x, X, y):
        O = self.logits(x, X)
        mx = O.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(O - mx).sum(axis=1))
        # clamp tiny negative rounding so losses stay non-negative
        return np.maximum(lse - O[np.arange(len(y)), y], 0.0)

    def sample_grads(self, x, X, y):
        W1, b1, W2, b2 = self.unpack(x)
        Hh, O = self._forward(x, X)
        O = O - O.max(axis=1, keepdims=True)
        P = np.exp(O)
        P /= P.sum(axis=1, keepdims=True)
        m = X.shape[0]
        P[np.arange(m), y] -= 1.0
        dA = (P @ W2) * (1.0 - Hh * Hh)
        gW1 = np.einsum("mh,mp->mhp", dA, X).reshape(m, -1)
        gW2 = np.einsum("mc,mh->mch", P, Hh).reshape(m, -1)
        return np.concatenate([gW1, dA, gW2, P], axis=1)

    def mean_grad(self, x, X, y):
        return _pykernels.mlp_batch_grad(x, X, y, self.p, self.H, self.C)

    def accuracy(self, x, X, y):
        return float(np.mean(np.argmax(self.logits(x, X), axis=1) == y))

    def sgd(self, x0, X, y, idx, lrs, prox, path=None, max_norm=1e8):
        return kernels.sgd_mlp(x0, X, y, idx, lrs, prox, self.p, self.H, self.C, path, max_norm)

    def init_params(self, rng) -> np.ndarray:
        W1 = rng.standard_normal((self.H, self.p)) / np.sqrt(self.p)
        W2 = rng.standard_normal((self.C, self.H)) / np.sqrt(self.H)
        return np.concatenate([W1.ravel(), np.zeros(self.H), W2.ravel(), np.zeros(self.C)])


@dataclass(frozen=True)
class FamilyManifest:
    """Everything needed to regenerate a task family bit-for-bit."""

    family: str
    N: int
    p: int
    n: tuple
    het_knob: float
    seed: int
    C: int = 1
    noise_scale: float = 0.5
    hidden: int = 16
    shift_scale: float = 1.0
    class_sep: float = 2.0
    n_pretrain: int = 4000

    def __post_init__(self):
        n = self.n
        if isinstance(n, (int, np.integer)):
            n = (int(n),) * int(self.N)
        object.__setattr__(self, "n", tuple(int(v) for v in n))
        object.__setattr__(self, "family", FAMILY_ALIASES.get(self.family, self.family))
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.p < 2:
            raise ValueError("p must be >= 2 (heterogeneity rotates in a 2-plane)")
        if len(self.n) != self.N:
            raise ValueError(f"got {len(self.n)} sample sizes for N={self.N} tasks")
        if min(self.n) < 2:
            raise ValueError("every task needs n >= 2 samples")
        if not 0.0 <= self.het_knob <= 1.0:
            raise ValueError(f"het_knob must lie in [0, 1], got {self.het_knob}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")
        if self.family == "mlp":
            if self.C < 2:
                raise ValueError("classification family needs C >= 2")
            if self.noise_scale > 1:
                raise ValueError("mlp noise_scale is a label-resample probability in [0, 1]")
            if self.hidden < 1:
                raise ValueError("hidden must be >= 1")

    def loss_family(self):
        if self.family == "least-squares":
            return LeastSquares(self.p)
        return MLP(self.p, self.hidden, self.C)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n"] = list(self.n)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "FamilyManifest":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown manifest fields: {sorted(extra)}")
        return cls(**d)

    def replace(self, **changes) -> "FamilyManifest":
        d = self.to_dict()
        d.update(changes)
        if "N" in changes and "n" not in changes:
            d["n"] = self.n[0]
        return FamilyManifest.from_dict(d)


@dataclass(frozen=True, eq=False)
class TaskDistribution:
    family: str
    p: int
    task_id: int
    shift: np.ndarray
    noise_scale: float
    w: Optional[np.ndarray] = None
    class_means: Optional[np.ndarray] = None
    C: int = 1

    def sample(self, rng, m: int):
        if self.family == "least-squares":
            X = self.shift + rng.standard_normal((m, self.p))
            y = X @ self.w + self.noise_scale * rng.standard_normal(m)
            return X, y
        labels = rng.integers(0, self.C, m)
        X = self.class_means[labels] + self.shift + rng.standard_normal((m, self.p))
        flip = rng.random(m) < self.noise_scale
        labels[flip] = rng.integers(0, self.C, int(flip.sum()))
        return X, labels.astype(np.int64)

    def same_as(self, other: "TaskDistribution") -> bool:
        def eq(a, b):
            return (a is None and b is None) or (a is not None and b is not None and np.array_equal(a, b))

        return (
            self.family == other.family
            and self.noise_scale == other.noise_scale
            and eq(self.shift, other.shift)
            and eq(self.w, other.w)
            and eq(self.class_means, other.class_means)
        )

    def population_affine(self):
        """Least-squares only: population gradient is ``M x - M w`` with ``M = I + mu mu^T``."""
        if self.family != "least-squares":
            raise ValueError("closed forms exist only for the least-squares family")
        M = np.eye(self.p) + np.outer(self.shift, self.shift)
        return M, M @ self.w


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: object


@dataclass(frozen=True, eq=False)
class TaskEnvironment:
    task_id: int
    distribution: TaskDistribution
    X: np.ndarray
    y: np.ndarray
    seed: int
    manifest: Optional[FamilyManifest] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def family(self):
        return _loss_family(self.distribution, self.manifest)

    def sample(self, j: int) -> Sample:
        return Sample(self.X[j].copy(), self.y[j].item())

    def fresh_stream(self, stream: int, *extra):
        return np.random.default_rng([self.seed, self.task_id, stream, *extra])

    def prefix(self, n_used: int) -> "TaskEnvironment":
        """Environment restricted to the first ``n_used`` samples."""
        if not 2 <= n_used <= self.n:
            raise ValueError(f"prefix size {n_used} outside [2, {self.n}]")
        if n_used == self.n:
            return self
        return _make_env(self.task_id, self.distribution, self.X[:n_used], self.y[:n_used], self.seed, self.manifest)


def _loss_family(dist: TaskDistribution, manifest: Optional[FamilyManifest]):
    if dist.family == "least-squares":
        return LeastSquares(dist.p)
    hidden = manifest.hidden if manifest is not None else 16
    return MLP(dist.p, hidden, dist.C)


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def _make_env(task_id, dist, X, y, seed, manifest):
    X = _readonly(np.array(X, dtype=np.float64))
    y = _readonly(np.array(y, dtype=np.float64 if dist.family == "least-squares" else np.int64))
    return TaskEnvironment(task_id, dist, X, y, seed, manifest)


def _rotation(u, v, theta):
    p = u.shape[0]
    c, s = np.cos(theta), np.sin(theta)
    return np.eye(p) + (c - 1.0) * (np.outer(u, u) + np.outer(v, v)) + s * (np.outer(v, u) - np.outer(u, v))


def _layout(m: FamilyManifest):
    """Shared generating parameter plus the rotation plane and shift direction."""
    rng = np.random.default_rng([m.seed, 0, LAYOUT])
    k = min(m.p, 3)
    if m.family == "least-squares":
        shared = rng.standard_normal(m.p)
        shared *= SIGNAL_NORM / np.linalg.norm(shared)
        anchor = shared
    else:
        shared = rng.standard_normal((m.C, m.p))
        shared *= m.class_sep / np.linalg.norm(shared, axis=1, keepdims=True)
        anchor = shared[0]
    basis = rng.standard_normal((m.p, k))
    basis[:, 0] = anchor
    q, _ = np.linalg.qr(basis)
    # qr may flip signs; orient u along the anchor
    u = q[:, 0] * np.sign(q[:, 0] @ anchor)
    v = q[:, 1]
    e = q[:, 2] if k == 3 else v
    return shared, u, v, e


def task_distribution(m: FamilyManifest, i: int, het: Optional[float] = None) -> TaskDistribution:
    het = m.het_knob if het is None else het
    shared, u, v, e = _layout(m)
    frac = i / m.N
    R = _rotation(u, v, het * frac * np.pi / 2)
    shift = het * m.shift_scale * frac * e
    if m.family == "least-squares":
        return TaskDistribution("least-squares", m.p, i, shift, m.noise_scale, w=R @ shared)
    return TaskDistribution("mlp", m.p, i, shift, m.noise_scale, class_means=shared @ R.T, C=m.C)


def tasks_from_manifest(m: FamilyManifest) -> list[TaskEnvironment]:
    envs = []
    for i in range(m.N):
        dist = task_distribution(m, i)
        X, y = dist.sample(np.random.default_rng([m.seed, i, TRAIN]), m.n[i])
        envs.append(_make_env(i, dist, X, y, m.seed, m))
    return envs


def gen_task_family(N, family, p, n, het_knob, seed, C=1, **extras) -> list[TaskEnvironment]:
    """Generate ``N`` task environments; ``n`` is an int or per-task list."""
    return tasks_from_manifest(FamilyManifest(family=family, N=N, p=p, n=n, het_knob=het_knob, seed=seed, C=C, **extras))


def redraw(env: TaskEnvironment, draw: int) -> TaskEnvironment:
    """Same distribution, independent training set (``draw = 0`` is ``env`` itself)."""
    if draw == 0:
        return env
    X, y = env.distribution.sample(np.random.default_rng([env.seed, env.task_id, TRAIN, draw]), env.n)
    return _make_env(env.task_id, env.distribution, X, y, env.seed, env.manifest)


def make_ls_tasks(ws: Sequence, n, noise_scale: float, seed: int, shifts: Optional[Sequence] = None):
    """Least-squares tasks with explicitly chosen generating parameters."""
    ws = [np.asarray(w, dtype=np.float64) for w in ws]
    p = ws[0].shape[0]
    ns = [n] * len(ws) if np.isscalar(n) else list(n)
    envs = []
    for i, w in enumerate(ws):
        shift = np.zeros(p) if shifts is None else np.asarray(shifts[i], dtype=np.float64)
        dist = TaskDistribution("least-squares", p, i, shift, noise_scale, w=w)
        X, y = dist.sample(np.random.default_rng([seed, i, TRAIN]), ns[i])
        envs.append(_make_env(i, dist, X, y, seed, None))
    return envs


# --- perturbation ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PerturbedDataset:
    origin: TaskEnvironment
    replaced_index: int
    replacement: Sample

    @functools.cached_property
    def env(self) -> TaskEnvironment:
        o = self.origin
        X = np.array(o.X)
        y = np.array(o.y)
        X[self.replaced_index] = self.replacement.features
        y[self.replaced_index] = self.replacement.label
        return _make_env(o.task_id, o.distribution, X, y, o.seed, o.manifest)

    @property
    def X(self):
        return self.env.X

    @property
    def y(self):
        return self.env.y

    @property
    def n(self):
        return self.origin.n


def perturb(env: TaskEnvironment, j: int, seed: int) -> PerturbedDataset:
    """Replace sample ``j`` with a fresh draw from the task's own distribution."""
    if not 0 <= j < env.n:
        raise IndexError(f"replacement index {j} out of range for n={env.n}")
    X, y = env.distribution.sample(env.fresh_stream(REPLACE, seed, j), 1)
    return PerturbedDataset(env, int(j), Sample(X[0], y[0].item()))


def null_perturb(env: TaskEnvironment, j: int) -> PerturbedDataset:
    """Perturbation whose replacement equals the original sample."""
    if not 0 <= j < env.n:
        raise IndexError(f"replacement index {j} out of range for n={env.n}")
    return PerturbedDataset(env, int(j), env.sample(j))


def poison_labels(env: TaskEnvironment, scale: float, seed: int) -> TaskEnvironment:
    """Training labels corrupted, distribution untouched (fresh draws stay clean).

    Regression labels get Gaussian noise of standard deviation ``scale``;
    class labels are resampled uniformly with probability ``min(scale, 1)``.
    """
    if scale < 0:
        raise ValueError("scale must be non-negative")
    rng = np.random.default_rng([env.seed, env.task_id, REPLACE, int(seed), 0x9A])
    y = np.array(env.y)
    if env.distribution.family == "least-squares":
        y = y + scale * rng.standard_normal(y.shape[0])
    else:
        hit = rng.random(y.shape[0]) < min(scale, 1.0)
        y[hit] = rng.integers(0, env.distribution.C, int(hit.sum()))
    return _make_env(env.task_id, env.distribution, env.X, y, env.seed, env.manifest)


# --- loss and gradients ----------------------------------------------------


def _x(env, x):
    x = np.asarray(x, dtype=np.float64)
    d = env.family.dim
    if x.ndim != 1 or x.shape[0] != d:
        raise DimensionMismatchError(f"parameter dim {x.shape} does not match family dim {d}")
    return x


def _sample_arrays(env, sample):
    if isinstance(sample, Sample):
        f, lab = sample.features, sample.label
    else:
        f, lab = sample
    X = np.asarray(f, dtype=np.float64).reshape(1, -1)
    y = np.asarray([lab], dtype=env.y.dtype)
    return X, y


def loss(env, x, sample) -> float:
    X, y = _sample_arrays(env, sample)
    return float(env.family.losses(_x(env, x), X, y)[0])


def grad(env, x, sample) -> np.ndarray:
    X, y = _sample_arrays(env, sample)
    return env.family.mean_grad(_x(env, x), X, y)


def batch_grad(env, x, idx) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty index set")
    return env.family.mean_grad(_x(env, x), env.X[idx], env.y[idx])


def full_grad(env, x) -> np.ndarray:
    return batch_grad(env, x, np.arange(env.n))


def empirical_risk(env, x) -> float:
    return float(np.mean(env.family.losses(_x(env, x), env.X, env.y)))


def population_risk_estimate(env, x, m: int, seed: int, chunk: int = 100_000) -> float:
    """Mean loss over ``m`` fresh draws from the task distribution."""
    if m < 1:
        raise ValueError("m must be >= 1")
    x = _x(env, x)
    rng = env.fresh_stream(POP, seed)
    total, done = 0.0, 0
    fam = env.family
    while done < m:
        k = min(chunk, m - done)
        X, y = env.distribution.sample(rng, k)
        total += float(np.sum(fam.losses(x, X, y)))
        done += k
    return total / m


def fresh_samples(env, stream: int, m: int, seed: int):
    return env.distribution.sample(env.fresh_stream(stream, seed), m)


# --- pretrained base ---------------------------------------------------------


@functools.lru_cache(maxsize=64)
def _pretrained_cached(manifest: FamilyManifest) -> np.ndarray:
    dist = task_distribution(manifest, 0, het=0.0)
    X, y = dist.sample(np.random.default_rng([manifest.seed, 0, BASE]), manifest.n_pretrain)
    fam = manifest.loss_family()
    if manifest.family == "least-squares":
        x0, *_ = np.linalg.lstsq(X, y, rcond=None)
        return as_params(x0)
    init = fam.init_params(np.random.default_rng([manifest.seed, 1, BASE]))

    def obj(x):
        return float(np.mean(fam.losses(x, X, y))), fam.mean_grad(x, X, y)

    res = optimize.minimize(obj, init, jac=True, method="L-BFGS-B", options={"maxiter": 500, "gtol": 1e-8})
    return as_params(res.x)


def pretrained_base(manifest: FamilyManifest) -> np.ndarray:
    """Minimizer of the zero-heterogeneity pooled task (cached per manifest)."""
    # the base does not depend on het_knob or per-task sizes
    key = manifest.replace(het_knob=0.0, N=1, n=2)
    return _pretrained_cached(key)
