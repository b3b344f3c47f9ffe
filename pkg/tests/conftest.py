import numpy as np
import pytest

from copower.types import VarianceComponents

CRITERION_LINES = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    CRITERION_LINES.append(
        f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    )


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def example_vc() -> VarianceComponents:
    """Two-endpoint variance components used as the worked example throughout."""
    return VarianceComponents(
        sigma_phi=np.array([[8.3, 9.1], [9.1, 11.2]]),
        sigma_e=np.array([[170.0, 94.2], [94.2, 84.8]]),
    )


@pytest.fixture(scope="session")
def example_beta(example_vc) -> np.ndarray:
    """Standardized effect size 0.3 on each endpoint's total SD scale."""
    return 0.3 * np.sqrt(example_vc.sigma_y2)


def random_spd(rng: np.random.Generator, k: int, scale: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((k, k))
    return scale * (a @ a.T + k * np.eye(k))
