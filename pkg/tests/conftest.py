"""Shared domains and phantoms; built once per session because cut-cell quadrature is not free."""

import numpy as np
import pytest

from glymph.immersed import LevelSet, build_domain
from glymph.phantom import PhantomSpec, generate
from glymph.spline_space import SplineSpace


def sphere_level_set(center, radius):
    c = np.asarray(center, dtype=float)
    return LevelSet.from_function(lambda p: radius - np.linalg.norm(p - c, axis=1), lipschitz=1.0)


@pytest.fixture(scope="session")
def box_space():
    return SplineSpace((0, 0, 0), (10, 10, 10), (5, 5, 5))


@pytest.fixture(scope="session")
def box_domain(box_space):
    return build_domain(box_space, lambda p: np.ones(len(p)), n_q=1)


@pytest.fixture(scope="session")
def sphere_domain():
    space = SplineSpace((0, 0, 0), (10, 10, 10), (10, 10, 10))
    return build_domain(space, sphere_level_set((5, 5, 5), 3.0), n_q=2)


@pytest.fixture(scope="session")
def small_sphere_domain():
    space = SplineSpace((0, 0, 0), (10, 10, 10), (6, 6, 6))
    return build_domain(space, sphere_level_set((5, 5, 5), 3.6), n_q=1)


@pytest.fixture(scope="session")
def half_domain():
    space = SplineSpace((0, 0, 0), (10, 10, 10), (5, 5, 5))
    return build_domain(space, LevelSet.from_function(lambda p: 5.3 - p[:, 0], lipschitz=1.0), n_q=1)


@pytest.fixture(scope="session")
def small_phantom():
    spec = PhantomSpec(elements=(8, 8, 8), voxels=(16, 16, 16), velocity="curl_potential", gamma="hemisphere",
                       D="radial_ramp", steps=6, n_q=1)
    return generate(spec)


@pytest.fixture(scope="session")
def round_domain():
    """Sphere large enough to hold basis functions supported entirely inside Omega."""
    space = SplineSpace((0, 0, 0), (10, 10, 10), (10, 10, 10))
    return build_domain(space, sphere_level_set((5, 5, 5), 4.4), n_q=1)
