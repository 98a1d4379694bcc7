import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_bound_inputs(rng, general=False):
    """A valid random BoundInputs (as a plain dict) with N in 1..5."""
    N = int(rng.integers(1, 6))
    b = rng.integers(1, 33, N)
    n = b * 2 + rng.integers(0, 5000, N)
    K = rng.integers(1, 400, N)
    lam = rng.dirichlet(np.ones(N)) * 0.9 + 0.1 / N
    lam = lam / lam.sum()
    d = {
        "profile": {
            "sigma_sq": rng.uniform(0, 5, N).tolist(),
            "zeta_sq": rng.uniform(0, 5, N).tolist(),
            "L": float(rng.uniform(0.1, 50)),
        },
        "n": n.tolist(),
        "b": b.tolist(),
        "K": K.tolist(),
        "lambdas": lam.tolist(),
        "eta_l": float(10 ** rng.uniform(-5, -1)),
        "C": float(rng.uniform(0, 3)),
        "f0_gap": float(rng.uniform(0, 10)),
        "zeta_coeff": int(rng.choice([5, 12])),
    }
    if general:
        d["weight_vectors"] = [rng.uniform(0.05, 1.0, int(k)).tolist() for k in K]
    return d


@pytest.fixture
def ls_family():
    from mergestab import tasks

    m = tasks.FamilyManifest.from_dict(
        {"family": "least-squares", "N": 3, "p": 6, "n": 300, "het_knob": 1.0, "seed": 4})
    return m, tasks.tasks_from_manifest(m), tasks.pretrained_base(m)


@pytest.fixture
def mlp_family():
    from mergestab import tasks

    m = tasks.FamilyManifest.from_dict(
        {"family": "mlp-tanh", "N": 3, "p": 4, "C": 3, "n": 200, "het_knob": 0.5, "seed": 2, "hidden": 6})
    return m, tasks.tasks_from_manifest(m), tasks.pretrained_base(m)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
