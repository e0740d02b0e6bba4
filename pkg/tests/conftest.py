import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from facefit.procedural import make_head_model  # noqa: E402
from facefit.synth import SynthSpec, generate_sequence  # noqa: E402


@pytest.fixture(scope="session")
def model():
    return make_head_model()


@pytest.fixture(scope="session")
def small_problem(model):
    """Three frames, two uncalibrated cameras, a few hundred observations."""
    ds, gt = generate_sequence(model, SynthSpec(frames=3, cameras=2, seed=4, calibrated=False, sigma_obs=1.0, occlusion=0.7, delta_d_scale=1e-3))
    return ds, gt


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE: dict[str, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one verdict line per acceptance criterion; printed in the terminal summary."""

    def record(key: str, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[key] = f"{key} {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[key])
