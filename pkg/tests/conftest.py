import copy
import json

import numpy as np
import pytest

from qpreduce.cli import Pipeline, bundled_config_path, parse_config


def load_bundled() -> dict:
    return json.loads(bundled_config_path().read_text(encoding="utf-8"))


def variant(cfg: dict, **solver) -> dict:
    out = copy.deepcopy(cfg)
    out.setdefault("solver", {}).update(solver)
    return out


def with_parametric_amplitude(cfg: dict, b: float) -> dict:
    out = copy.deepcopy(cfg)
    for term in out["parametric_terms"]:
        term["amplitude"] = -b
    return out


def linear_resonance_cfg(cfg: dict) -> dict:
    """Unmodulated linear oscillators forced at the slave eigenfrequency sqrt(5)."""
    out = copy.deepcopy(cfg)
    out["parametric_terms"], out["nonlinear_terms"] = [], []
    out["frequencies"][2]["value"] = 5 ** 0.5
    out["master_indices"] = [0, 1]
    return out


def internal_resonance_cfg(cfg: dict) -> dict:
    """Oscillators at 1 and 2 rad/s with x^2 driving y: twice the master eigenvalue hits the slave."""
    out = copy.deepcopy(cfg)
    out["B0"] = [[0, 1, 0, 0], [-1, 0, 0, 0], [0, 0, 0, 1], [0, 0, -4, 0]]
    out["parametric_terms"] = []
    out["nonlinear_terms"] = [{"state": 3, "exponents": [2, 0, 0, 0], "coefficient": 1.0}]
    out["frequencies"][2]["value"] = 0.5
    out["master_indices"] = [0, 1]
    return out


def trivial_cfg() -> dict:
    """Decoupled linear oscillators with forcing on the master oscillator only."""
    return {
        "schema_version": 1,
        "name": "decoupled linear oscillators",
        "dimension": 4,
        "frequencies": [{"label": "wf", "value": 1.0, "role": "forcing"}],
        "B0": [[0, 1, 0, 0], [-3, 0, 0, 0], [0, 0, 0, 1], [0, 0, -5, 0]],
        "forcing_terms": [{"state": 1, "amplitude": 1.0, "frequency": "wf"}],
        "solver": {"t_span": [0, 50], "initial_state": [0.1, 0, 0, 0]},
    }


@pytest.fixture(scope="session")
def bundled_cfg() -> dict:
    return load_bundled()


@pytest.fixture(scope="session")
def section4(bundled_cfg) -> Pipeline:
    """Shared pipeline on the bundled Mathieu-Hill example; stages are cached."""
    return Pipeline(parse_config(bundled_cfg))


@pytest.fixture(scope="session")
def probe_grid() -> np.ndarray:
    return np.linspace(0.0, 50.0, 1000)


@pytest.fixture(scope="session")
def section4_direct(section4, probe_grid):
    from qpreduce.lp_transform import invert_direct

    return invert_direct(section4.lp(), probe_grid)


@pytest.fixture(scope="session")
def section4_znn(section4, probe_grid):
    from qpreduce.lp_transform import ZNNConfig, invert_znn

    return invert_znn(section4.lp(), ZNNConfig(gamma=100.0, grid=tuple(probe_grid)))


@pytest.fixture(scope="session")
def section4_full(section4):
    """Full-system trajectory on the configured grid (the slowest shared artefact)."""
    return section4.simulate("full")


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
