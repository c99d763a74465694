import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from surfelmap.core.gmm_model import GmmComponent4D, GmmMap  # noqa: E402
from surfelmap.core.pointcloud_io import CameraModel  # noqa: E402
from surfelmap.core.surfel import SurfelSet, rgb_to_sh  # noqa: E402


def frontal_surfels(centers, radii=0.3, opacity=0.5, colors=None, sh_degree=0):
    """Surfels with t_u = +x and t_v = +y, facing a camera that looks along +z."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    n = len(centers)
    radii = np.asarray(radii, dtype=np.float64)
    if radii.ndim < 2:
        radii = np.repeat(np.broadcast_to(radii, (n,))[:, None], 2, axis=1)
    colors = np.full((n, 3), 0.5) if colors is None else np.asarray(colors, dtype=np.float64)
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
    sh[:, 0] = rgb_to_sh(colors)
    return SurfelSet(centers, np.tile([1.0, 0.0, 0.0], (n, 1)), np.tile([0.0, 1.0, 0.0], (n, 1)),
                     radii, np.broadcast_to(opacity, (n,)).copy(), sh)


def plane_component(mean, normal, spread=(0.04, 0.02), weight=1.0, gray_var=0.01, rgb=(0.5, 0.5, 0.5)):
    """A flat world-space component with the given normal and in-plane variances."""
    normal = np.asarray(normal, dtype=np.float64)
    normal = normal / np.linalg.norm(normal)
    helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    a = np.cross(normal, helper)
    a /= np.linalg.norm(a)
    b = np.cross(normal, a)
    frame = np.column_stack([a, b, normal])
    cov = np.zeros((4, 4))
    cov[:3, :3] = frame @ np.diag([spread[0], spread[1], 1e-8]) @ frame.T
    cov[3, 3] = gray_var
    return GmmComponent4D(weight, np.append(mean, 0.5), cov, rgb, normal=normal)


def plane_map(points, normal, voxel_size=1.0):
    gmm_map = GmmMap(voxel_size)
    for p in points:
        gmm_map.add(plane_component(p, normal))
    return gmm_map.freeze()


@pytest.fixture
def camera():
    """25x25 identity-pose camera whose central pixel ray is the +z axis."""
    return CameraModel(20.0, 20.0, 12.0, 12.0, 25, 25)


@pytest.fixture
def floor_map():
    """Components of the plane z = 0 on a 0.5 m grid."""
    grid = [(x, y, 0.0) for x in np.arange(-1.0, 1.01, 0.5) for y in np.arange(-1.0, 1.01, 0.5)]
    return plane_map(grid, (0.0, 0.0, 1.0))
