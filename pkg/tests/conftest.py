import numpy as np
import pytest

from handmesh import synth
from handmesh.correctives import CorrectiveNets
from handmesh.pipeline import Decoder


def finite_difference(f, x, h=1e-5):
    """Central-difference gradient of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.fixture(scope="session")
def template():
    return synth.build_template(800)


@pytest.fixture(scope="session")
def hand(template):
    return template.model


@pytest.fixture
def zero_decoder(hand):
    return Decoder(hand, CorrectiveNets.for_model(hand), np.zeros(32))


@pytest.fixture(scope="session")
def small_synth():
    cfg = synth.SynthConfig(seed=3, vertex_budget=800, n_train_poses=4, n_test_poses=2,
                            n_cameras=4, image_size=96, focal=260.0)
    subject = synth.generate_subject(cfg)
    return cfg, subject, synth.generate_dataset(subject, cfg)


# Acceptance results, printed once at the end of the session.
ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
