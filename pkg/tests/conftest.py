"""Pytest configuration and shared fixtures."""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "../src")))

from fem import BoxTarget, DofMap  # noqa: E402
from mesh import build_unit_cube_mesh  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def study_config_path():
    """Path to the small 2D study configuration."""
    return str(FIXTURES / "study_config.yaml")


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    """Keep OCP_* environment overrides from leaking into tests."""
    for name in ("OCP_THREADS", "OCP_STRICT_DETERMINISM", "OCP_OUTPUT_FORMAT", "OCP_MAX_ITERS"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def unit_interval():
    """1D mesh of [0, 1] with 8 cells."""
    return build_unit_cube_mesh(8, 1)


@pytest.fixture
def unit_square():
    """2D Kuhn mesh of the unit square with 4 cells per axis."""
    return build_unit_cube_mesh(4, 2)


@pytest.fixture
def unit_cube():
    """3D Kuhn mesh of the unit cube with 2 cells per axis."""
    return build_unit_cube_mesh(2, 3)


@pytest.fixture
def square_dofmap(unit_square):
    return DofMap.from_mesh(unit_square)


@pytest.fixture
def box_2d():
    return BoxTarget.centered(2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
