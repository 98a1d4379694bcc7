"""Seeded mini-batch SGD fine-tuning and the coupled paired-run protocol."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tasks
from .params import as_params, read_params, write_params

DIVERGENCE_NORM = 1e8
SCHEDULE_KINDS = ("constant", "exp-decay", "proximal")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, norm: float):
        super().__init__(f"diverged at step {step}: iterate norm {norm:.3e}")
        self.step = step
        self.norm = norm


@dataclass(frozen=True)
class Schedule:
    kind: str
    params: dict

    def __post_init__(self):
        p = dict(self.params)
        object.__setattr__(self, "params", p)
        if self.kind == "constant":
            _positive(p, "eta")
        elif self.kind == "exp-decay":
            _positive(p, "eta0")
            _positive(p, "rate")
        elif self.kind == "proximal":
            _positive(p, "eta")
            a = p.get("alpha")
            if a is None or not 0.0 < a < 1.0:
                raise ValueError(f"proximal alpha must lie in (0, 1), got {a!r}")
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")

    @classmethod
    def constant(cls, eta: float) -> "Schedule":
        return cls("constant", {"eta": eta})

    @classmethod
    def exp_decay(cls, eta0: float, rate: float) -> "Schedule":
        return cls("exp-decay", {"eta0": eta0, "rate": rate})

    @classmethod
    def proximal(cls, eta: float, alpha: float) -> "Schedule":
        return cls("proximal", {"eta": eta, "alpha": alpha})

    @property
    def eta_ref(self) -> float:
        """The reference rate that normalizes the weight vector."""
        return float(self.params["eta0"] if self.kind == "exp-decay" else self.params["eta"])

    @property
    def prox(self) -> float:
        return float(self.params["alpha"]) if self.kind == "proximal" else 0.0

    def learning_rates(self, K: int) -> np.ndarray:
        if self.kind == "exp-decay":
            return self.eta_ref * float(self.params["rate"]) ** np.arange(K, dtype=np.float64)
        return np.full(K, self.eta_ref)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(sorted(self.params.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        return cls(d["kind"], dict(d.get("params", {})))


def _positive(p, key):
    v = p.get(key)
    if v is None or not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
        raise ValueError(f"schedule parameter {key!r} must be a positive finite number, got {v!r}")


@dataclass(frozen=True)
class WeightVector:
    """Per-step weights of the stochastic gradients in ``x^K - x0``."""

    a: np.ndarray

    def __post_init__(self):
        a = np.array(self.a, dtype=np.float64).reshape(-1)
        if a.size == 0 or np.any(a < 0) or not np.all(np.isfinite(a)) or a.sum() <= 0:
            raise ValueError("weight vector must be non-empty, finite, non-negative, with positive mass")
        a.flags.writeable = False
        object.__setattr__(self, "a", a)

    @property
    def l1(self) -> float:
        return float(np.sum(self.a))

    @property
    def l2_sq(self) -> float:
        return float(np.dot(self.a, self.a))

    @property
    def last(self) -> float:
        return float(self.a[-1])

    def __len__(self):
        return self.a.shape[0]


def schedule_weight_vector(schedule: Schedule, K: int) -> WeightVector:
    if K < 1:
        raise ValueError("K must be >= 1")
    if schedule.kind == "constant":
        return WeightVector(np.ones(K))
    if schedule.kind == "exp-decay":
        return WeightVector(float(schedule.params["rate"]) ** np.arange(K, dtype=np.float64))
    keep = 1.0 - schedule.prox
    return WeightVector(keep ** np.arange(K - 1, -1, -1, dtype=np.float64))


@dataclass(frozen=True)
class FinetuneConfig:
    K: int
    b: int
    schedule: Schedule
    seed: int = 0
    data_ratio: float = 1.0

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", Schedule.from_dict(self.schedule))
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K}")
        if int(self.b) != self.b or self.b < 1:
            raise ValueError(f"b must be a positive integer, got {self.b}")
        if not 0.0 < self.data_ratio <= 1.0:
            raise ValueError(f"data_ratio must lie in (0, 1], got {self.data_ratio}")

    def n_used(self, n: int) -> int:
        return int(math.ceil(self.data_ratio * n))

    def validate_for(self, n: int) -> int:
        m = self.n_used(n)
        if m < 2:
            raise ValueError(f"data_ratio {self.data_ratio} leaves fewer than 2 samples")
        if self.b > m // 2:
            raise ValueError(f"batch size {self.b} exceeds half the used dataset ({m} samples)")
        return m

    def check_regime(self, L: float, K_bar: Optional[float] = None) -> None:
        """Reject rates above ``1 / (8 K_bar L)`` (bound-comparison mode)."""
        K_bar = self.K if K_bar is None else K_bar
        cap = 1.0 / (8.0 * K_bar * L)
        if self.schedule.eta_ref > cap * (1 + 1e-12):
            raise ValueError(f"eta {self.schedule.eta_ref:.4g} outside the bound regime (max {cap:.4g})")

    def with_(self, **changes) -> "FinetuneConfig":
        d = dict(K=self.K, b=self.b, schedule=self.schedule, seed=self.seed, data_ratio=self.data_ratio)
        d.update(changes)
        return FinetuneConfig(**d)

    def to_dict(self) -> dict:
        return {
            "K": int(self.K),
            "b": int(self.b),
            "schedule": self.schedule.to_dict(),
            "seed": int(self.seed),
            "data_ratio": float(self.data_ratio),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        return cls(
            K=int(d["K"]),
            b=int(d["b"]),
            schedule=Schedule.from_dict(d["schedule"]),
            seed=int(d.get("seed", 0)),
            data_ratio=float(d.get("data_ratio", 1.0)),
        )


@dataclass(frozen=True, eq=False)
class TrainResult:
    final: np.ndarray
    weight_vector: WeightVector
    batch_index_log: np.ndarray
    eta_ref: float
    config: FinetuneConfig
    path: Optional[np.ndarray] = field(default=None, repr=False)

    def log_digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.batch_index_log, dtype="<i8").tobytes()).hexdigest()

    def save(self, out: str | Path) -> None:
        """Write ``out`` (parameter file) and ``out.json`` (sidecar)."""
        out = Path(out)
        write_params(self.final, out)
        side = {
            "config": self.config.to_dict(),
            "eta_ref": self.eta_ref,
            "weight_vector": self.weight_vector.a.tolist(),
            "batch_index_sha256": self.log_digest(),
        }
        Path(str(out) + ".json").write_text(json.dumps(side, sort_keys=True, indent=2) + "\n")


def load_result(path: str | Path) -> TrainResult:
    """Load a saved result; the batch log is not stored, only its hash."""
    final = read_params(path)
    side = json.loads(Path(str(path) + ".json").read_text())
    cfg = FinetuneConfig.from_dict(side["config"])
    return TrainResult(final, WeightVector(side["weight_vector"]), np.zeros((0, cfg.b), np.int64), float(side["eta_ref"]), cfg)


def batch_indices(cfg: FinetuneConfig, n_used: int) -> np.ndarray:
    """``(K, b)`` i.i.d. uniform indices, a function of the seed only."""
    rng = np.random.default_rng([int(cfg.seed), 0x5D])
    return rng.integers(0, n_used, size=(cfg.K, cfg.b), dtype=np.int64)


def _run(x0, X, y, fam, cfg, idx, record_path):
    lrs = cfg.schedule.learning_rates(cfg.K)
    path = np.empty((cfg.K + 1, x0.shape[0])) if record_path else None
    x, bad, nrm = fam.sgd(x0, X, y, idx, lrs, cfg.schedule.prox, path, DIVERGENCE_NORM)
    if bad >= 0:
        raise DivergenceError(int(bad), float(nrm))
    return as_params(x), path


def finetune(x0, env, cfg: FinetuneConfig, record_path: bool = False, regime_L: Optional[float] = None) -> TrainResult:
    """Run ``cfg.K`` SGD steps from ``x0`` on the first ``ceil(ratio * n)`` samples of ``env``."""
    x0 = np.ascontiguousarray(as_params(x0, name="x0"))
    fam = env.family
    if x0.shape[0] != fam.dim:
        raise ValueError(f"x0 has dim {x0.shape[0]}, family expects {fam.dim}")
    m = cfg.validate_for(env.n)
    if regime_L is not None:
        cfg.check_regime(regime_L)
    idx = batch_indices(cfg, m)
    x, path = _run(x0, env.X[:m], env.y[:m], fam, cfg, idx, record_path)
    idx.flags.writeable = False
    return TrainResult(x, schedule_weight_vector(cfg.schedule, cfg.K), idx, cfg.schedule.eta_ref, cfg, path)


def coupled_finetune(x0, env, perturbed: "tasks.PerturbedDataset", cfg: FinetuneConfig, record_path: bool = False):
    """Train on ``env`` and on its perturbed copy with one shared index stream."""
    if perturbed.origin is not env:
        raise ValueError("perturbed dataset does not originate from this environment")
    a = finetune(x0, env, cfg, record_path)
    b = finetune(x0, perturbed.env, cfg, record_path)
    return a, b


def first_hit_step(log: np.ndarray, j: int) -> int:
    """First step whose batch contains ``j``, or -1."""
    hits = np.flatnonzero(np.any(log == j, axis=1))
    return int(hits[0]) if hits.size else -1
