import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

from partreid.model import ModelConfig
from partreid.synth import SyntheticSpec, generate

SMALL_MODEL = ModelConfig(input_dim=16, height=6, width=6, channels=8, tokens=4, p1=3, p2=3)


def small_data(identities=8, per_identity=8, seed=0):
    """Train split of a tiny synthetic set: (x, y)."""
    spec = SyntheticSpec(num_identities=2 * identities, samples_per_identity=per_identity, dim=16,
                         latent_dim=4, seed=seed)
    x, recs = generate(spec)
    keep = [i for i, r in enumerate(recs) if r.split == "train"]
    return x[keep], [recs[i].identity for i in keep]


@pytest.fixture
def small():
    x, y = small_data()
    return SMALL_MODEL, x, np.array(y)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
