import numpy as np
import pytest

from setpool.actor_critic import ActorCritic
from setpool.data import FeatureSet, SyntheticConfig, gen_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return SyntheticConfig(num_identities=6, sets_per_identity=3, set_size_min=1, set_size_max=8, dim=6)


@pytest.fixture
def small_ds(small_cfg):
    return gen_synthetic(small_cfg, 5)


def perturbed_model(dim=6, classes=6, seed=0, hidden=(8,), scale=0.3):
    """Model whose zero-initialised heads have been given random weights."""
    rng = np.random.default_rng(seed)
    p = ActorCritic.create(dim, classes, rng, hidden)
    for net in (p.policy_head, p.value_head):
        for a in net.params():
            a[...] = scale * rng.standard_normal(a.shape)
    p.touch()
    return p


def make_set(features, yaws=None, identity=0, set_id="s"):
    features = np.asarray(features, dtype=float)
    yaws = np.zeros(len(features)) if yaws is None else np.asarray(yaws, dtype=float)
    return FeatureSet(set_id, identity, features, yaws)


ACCEPTANCE_LINES: list[str] = []


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
