import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = {
    "dataset": {"kind": "two-moons", "n": 200, "noise": 0.1, "seed": 0},
    "arch": {"name": "mlp", "params": {"hidden": [8, 8]}},
    "train": {"epochs": 4, "ramp_start": 1, "ramp_end": 2, "milestones": [3], "eval_samples": 100},
    "pruning": {"rate": 0.2, "rounds": 2, "variants": [{"name": "IMP"},
                                                      {"name": "IMP+NRS", "regularizer": "nrs"}]},
    "verifier": {"eps": "1/20", "n_samples": 20, "max_subdomains": 200},
    "oracle": {"nets": 1, "queries": 5, "min_width": 1e-4},
    "seeds": [0],
}


@pytest.fixture
def tiny_raw():
    import copy
    return copy.deepcopy(TINY)
