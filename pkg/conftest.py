from __future__ import annotations

import json

import numpy as np
import pytest

from freecurve import KPoint
from lattice_fourier import build_lattice, build_model, field_from_entries, vector_field_from_entries

TWO_PI = 2.0 * np.pi
EPSILON = 0.08
T_REGULAR = 10.25


def small_potentials(lattice):
    """Â on the three modes (1,0), (0,1), (−1,−1) and a four-mode V̂, well inside the smallness region."""
    A = vector_field_from_entries(
        lattice,
        [[1, 0, 3e-4, 0.0], [-1, -1, 2e-4, 0.0]],
        [[0, 1, 3e-4, 0.0], [-1, -1, 2e-4, 0.0]],
    )
    V = field_from_entries(lattice, [[1, 0, 0.005, 0.0], [-1, 0, 0.005, 0.0], [0, 1, 0.005, 0.0], [0, -1, 0.005, 0.0]])
    return A, V


@pytest.fixture
def lattice():
    return build_lattice((TWO_PI, 0.0), (0.0, TWO_PI))


@pytest.fixture
def free_model(lattice):
    return build_model(lattice, epsilon=EPSILON, window_radius=4.0)


@pytest.fixture
def small_model(lattice):
    A, V = small_potentials(lattice)
    return build_model(lattice, A, V, epsilon=EPSILON, window_radius=4.0)


@pytest.fixture
def regular_k():
    """On N_1(0) and in no other ε-tube: z_{1,0} = 2it."""
    return KPoint(1j * T_REGULAR, T_REGULAR)


@pytest.fixture
def config_document():
    """Version-1 run configuration on the square lattice with the small potentials."""
    return {
        "version": 1,
        "lattice": {"gamma1": [TWO_PI, 0.0], "gamma2": [0.0, TWO_PI]},
        "potential": {
            "V": [[1, 0, 0.005, 0.0], [-1, 0, 0.005, 0.0], [0, 1, 0.005, 0.0], [0, -1, 0.005, 0.0]],
            "A1": [[1, 0, 3e-4, 0.0], [-1, -1, 2e-4, 0.0]],
            "A2": [[0, 1, 3e-4, 0.0], [-1, -1, 2e-4, 0.0]],
        },
        "params": {"epsilon": EPSILON, "window_radius": 4.0},
        "trace": {"nu": 1, "y_re": [10.25, 12.25, 3]},
        "handles": {"d_list": [[0, 4]], "samples": 8, "degree": 6},
        "verify": {"samples": 2},
        "spectrum": {"k": [0.5, 0.0, 0.25, 0.0]},
        "freecurve": {"k2_range": [-2.0, 2.0, 5], "radius": 2.0},
    }


@pytest.fixture
def write_config(tmp_path):
    def write(document, name="run.json"):
        path = tmp_path / name
        path.write_text(json.dumps(document), encoding="utf-8")
        return path

    return write
