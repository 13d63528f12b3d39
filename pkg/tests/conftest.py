import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tricontact.geometry import mesh_to_triangles
from tricontact.scenes import generate_noisy_sphere
from tricontact.surrogate import build_surrogate_tree


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260810)


def sphere_triangles(subdiv_level: int, eta_r: float = 1.0, seed: int = 0,
                     radius: float = 0.5) -> np.ndarray:
    verts, faces = generate_noisy_sphere(subdiv_level, eta_r, seed)
    return mesh_to_triangles(verts * radius, faces)


@pytest.fixture(scope="session")
def sphere80():
    return sphere_triangles(1)


@pytest.fixture(scope="session")
def sphere320():
    return sphere_triangles(2)


@pytest.fixture(scope="session")
def sphere1280():
    return sphere_triangles(3)


_TREE_CACHE: dict = {}


def cached_tree(key, triangles, n_surrogate=8, seed=0, finest_epsilon=1e-2):
    if key not in _TREE_CACHE:
        _TREE_CACHE[key] = build_surrogate_tree(
            triangles, n_surrogate, seed=seed, finest_epsilon=finest_epsilon
        )
    return _TREE_CACHE[key]


@pytest.fixture(scope="session")
def tree320(sphere320):
    return cached_tree("sphere320", sphere320)
