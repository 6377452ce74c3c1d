"""Shared fixtures and the acceptance-summary reporter."""

import numpy as np
import pytest

from gsmark.model import GaussianModel, normalize_quaternions

# One pass/fail line per acceptance criterion, printed after the run.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_model(rng, n, sh_degree=3, opacity_range=(0.3, 0.8),
                 scale_range=(0.08, 0.25), dc_spread=0.5,
                 rest_amp=0.02, box=0.5):
    """Small random scene with parameters kept away from activation
    boundaries (colors strictly inside (0, 1), moderate opacities)."""
    n_rest = (sh_degree + 1) ** 2 - 1
    return GaussianModel(
        positions=rng.uniform(-box, box, (n, 3)),
        scales=np.exp(rng.uniform(np.log(scale_range[0]),
                                  np.log(scale_range[1]), (n, 3))),
        rotations=normalize_quaternions(rng.standard_normal((n, 4))),
        opacities=rng.uniform(*opacity_range, n),
        sh_dc=rng.uniform(-dc_spread, dc_spread, (n, 3)),
        sh_rest=rest_amp * rng.standard_normal((n, n_rest, 3)),
        sh_degree=sh_degree)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
