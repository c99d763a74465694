"""Flat Gaussian surfels: storage, tangent-plane mapping, ray intersection and initialization."""
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from plyfile import PlyData
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import EmptyInputError, PlySchemaError
from .pointcloud_io import write_vertex_ply

logger = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
R_MIN = 1e-6
CUTOFF = 3.0


def sh_coeff_count(degree):
    if degree not in (0, 1):
        raise ValueError(f"SH degree must be 0 or 1, got {degree}")
    return (degree + 1) ** 2


def rgb_to_sh(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def sh_to_rgb(sh, dirs=None):
    """Evaluate degree 0/1 coefficients ``(N, B, 3)`` along unit view directions ``(N, 3)``."""
    color = 0.5 + SH_C0 * sh[:, 0]
    if sh.shape[1] > 1:
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        color = color - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
    return color


def sh_backward(sh, dirs, grad_color):
    """Gradients of `sh_to_rgb` w.r.t. the coefficients and the view directions."""
    grad_sh = np.zeros_like(sh)
    grad_sh[:, 0] = SH_C0 * grad_color
    grad_dirs = np.zeros((len(sh), 3))
    if sh.shape[1] > 1:
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        grad_sh[:, 1] = -SH_C1 * y * grad_color
        grad_sh[:, 2] = SH_C1 * z * grad_color
        grad_sh[:, 3] = -SH_C1 * x * grad_color
        grad_dirs[:, 0] = -SH_C1 * np.sum(sh[:, 3] * grad_color, axis=1)
        grad_dirs[:, 1] = -SH_C1 * np.sum(sh[:, 1] * grad_color, axis=1)
        grad_dirs[:, 2] = SH_C1 * np.sum(sh[:, 2] * grad_color, axis=1)
    return grad_sh, grad_dirs


@dataclass
class Surfel:
    p: np.ndarray
    t_u: np.ndarray
    t_v: np.ndarray
    r_u: float
    r_v: float
    opacity: float = 1.0
    sh: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))

    @property
    def normal(self):
        return np.cross(self.t_u, self.t_v)

    def point(self, u):
        """World point at tangent coordinates ``u = (u, v)``."""
        return self.p + self.r_u * self.t_u * u[0] + self.r_v * self.t_v * u[1]


def eval_gaussian(u):
    u = np.asarray(u, dtype=np.float64)
    return np.exp(-0.5 * np.sum(u * u, axis=-1))


@dataclass
class SurfelSet:
    """Parallel arrays describing N surfels.

    ``radii[:, 0]`` is r_u and ``radii[:, 1]`` is r_v; ``sh`` is
    (N, (D+1)^2, 3). ``grad_accum``/``grad_count`` hold the screen-space
    positional gradient statistics used by density control.
    """
    positions: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    radii: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray
    grad_accum: Optional[np.ndarray] = None
    grad_count: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.tangent_u = np.asarray(self.tangent_u, dtype=np.float64).reshape(n, 3)
        self.tangent_v = np.asarray(self.tangent_v, dtype=np.float64).reshape(n, 3)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(n, 2)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64)
        if self.sh.ndim == 2:
            self.sh = self.sh.reshape(n, -1, 3)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_count is None:
            self.grad_count = np.zeros(n)

    def __len__(self):
        return len(self.positions)

    @property
    def sh_degree(self):
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def normals(self):
        return np.cross(self.tangent_u, self.tangent_v)

    @classmethod
    def empty(cls, sh_degree=0):
        b = sh_coeff_count(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2)),
                   np.zeros(0), np.zeros((0, b, 3)))

    @classmethod
    def from_surfels(cls, surfels):
        surfels = list(surfels)
        if not surfels:
            return cls.empty()
        return cls(np.array([s.p for s in surfels]), np.array([s.t_u for s in surfels]),
                   np.array([s.t_v for s in surfels]), np.array([[s.r_u, s.r_v] for s in surfels]),
                   np.array([s.opacity for s in surfels]), np.array([s.sh for s in surfels]))

    def surfel(self, i):
        return Surfel(self.positions[i].copy(), self.tangent_u[i].copy(), self.tangent_v[i].copy(),
                      float(self.radii[i, 0]), float(self.radii[i, 1]), float(self.opacity[i]),
                      self.sh[i].copy())

    def copy(self):
        return SurfelSet(self.positions.copy(), self.tangent_u.copy(), self.tangent_v.copy(),
                         self.radii.copy(), self.opacity.copy(), self.sh.copy(),
                         self.grad_accum.copy(), self.grad_count.copy())

    def select(self, index):
        return SurfelSet(self.positions[index], self.tangent_u[index], self.tangent_v[index],
                         self.radii[index], self.opacity[index], self.sh[index],
                         self.grad_accum[index], self.grad_count[index])

    def extend(self, other):
        return SurfelSet(np.concatenate([self.positions, other.positions]),
                         np.concatenate([self.tangent_u, other.tangent_u]),
                         np.concatenate([self.tangent_v, other.tangent_v]),
                         np.concatenate([self.radii, other.radii]),
                         np.concatenate([self.opacity, other.opacity]),
                         np.concatenate([self.sh, other.sh]),
                         np.concatenate([self.grad_accum, other.grad_accum]),
                         np.concatenate([self.grad_count, other.grad_count]))

    def check_invariants(self, tol=1e-8, r_min=R_MIN):
        """Raise ValueError if any surfel breaks the frame, radius or opacity rules."""
        if len(self) == 0:
            return
        if np.max(np.abs(np.einsum('ij,ij->i', self.tangent_u, self.tangent_v))) > tol:
            raise ValueError("tangent vectors are not orthogonal")
        for name, vec in (('t_u', self.tangent_u), ('t_v', self.tangent_v), ('n', self.normals)):
            if np.max(np.abs(np.linalg.norm(vec, axis=1) - 1.0)) > tol:
                raise ValueError(f"{name} is not unit length")
        if np.any(self.radii[:, 0] < self.radii[:, 1]) or np.any(self.radii[:, 1] < r_min):
            raise ValueError("radii must satisfy r_u >= r_v >= r_min")
        if np.any(self.opacity < 0) or np.any(self.opacity > 1):
            raise ValueError("opacity outside [0, 1]")


@dataclass
class SurfelGradients:
    """Loss gradients laid out like the matching `SurfelSet` arrays."""
    positions: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    radii: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray

    FIELDS = ('positions', 'tangent_u', 'tangent_v', 'radii', 'opacity', 'sh')

    @classmethod
    def zeros_like(cls, surfels):
        n = len(surfels)
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 2)),
                   np.zeros(n), np.zeros_like(surfels.sh))

    def add_(self, other, scale=1.0):
        for name in self.FIELDS:
            getattr(self, name).__iadd__(scale * getattr(other, name))
        return self

    def flat(self):
        return np.concatenate([getattr(self, name).ravel() for name in self.FIELDS])


def init_from_gmm(gmm_map, sh_degree=0, r_min=R_MIN):
    """One surfel per mixture component.

    The center is the spatial mean, the normal the component normal, t_u the
    major spatial eigenvector with ``r_u = sqrt(gamma_2)``, ``r_v = sqrt(gamma_1)``,
    and opacity ``0.6 + 0.4 * weight``. DC color comes from the component's
    mean RGB; degree-1 coefficients start at zero.
    """
    comps = gmm_map.components
    if not comps:
        logger.warning("empty GMM map; no surfels initialized")
        return SurfelSet.empty(sh_degree)
    normals = np.array([c.normal for c in comps])
    tangent_u = np.array([c.eigenvectors[:, 2] for c in comps])
    tangent_v = np.cross(normals, tangent_u)
    tangent_v /= np.linalg.norm(tangent_v, axis=1, keepdims=True)
    gammas = np.array([c.eigenvalues for c in comps])
    clamped = gammas[:, 1] < r_min ** 2
    if clamped.any():
        logger.debug("%d components with gamma_1 below r_min^2; radii clamped", int(clamped.sum()))
    radii = np.sqrt(np.maximum(gammas[:, [2, 1]], r_min ** 2))
    weights = np.array([c.weight for c in comps])
    opacity = np.clip(0.6 + 0.4 * weights, 0.0, 1.0)
    sh = np.zeros((len(comps), sh_coeff_count(sh_degree), 3))
    sh[:, 0] = rgb_to_sh(np.array([c.mean_rgb for c in comps]))
    logger.info("initialized %d surfels from the GMM map", len(comps))
    return SurfelSet(np.array([c.spatial_mean for c in comps]), tangent_u, tangent_v, radii, opacity, sh)


def init_from_points(cloud, sh_degree=0, seed=0, subset=0, opacity=0.1, r_min=R_MIN):
    """One isotropic surfel per colorized point, with a random tangent frame.

    Radii are the RMS distance to the three nearest neighbours. With
    ``subset > 0`` a seeded random subset of that many points is used.
    """
    rng = np.random.default_rng(seed)
    n = len(cloud)
    if n == 0:
        raise EmptyInputError("cannot initialize surfels from an empty cloud")
    index = np.arange(n)
    if 0 < subset < n:
        index = np.sort(rng.choice(n, subset, replace=False))
    positions = cloud.positions[index]
    if len(positions) >= 4:
        dist, _ = cKDTree(positions).query(positions, k=4)
        radius = np.sqrt(np.mean(dist[:, 1:] ** 2, axis=1))
    else:
        radius = np.full(len(positions), 0.01)
    radius = np.maximum(radius, r_min)
    frames = Rotation.random(len(positions), random_state=rng).as_matrix()
    sh = np.zeros((len(positions), sh_coeff_count(sh_degree), 3))
    sh[:, 0] = rgb_to_sh(cloud.rgb[index])
    return SurfelSet(positions, frames[:, :, 0], frames[:, :, 1], np.column_stack([radius, radius]),
                     np.full(len(positions), float(opacity)), sh)


class RayHit(NamedTuple):
    u: float
    v: float
    depth: float


def intersect_rays(p_c, tu_c, tv_c, radii, dirs):
    """Ray/surfel-plane intersection in the camera frame.

    All inputs broadcast over leading axes; `dirs` have unit z so the ray
    parameter is the camera-frame depth. Returns ``(u, v, depth, hit)``.
    """
    n = np.cross(tu_c, tv_c)
    nd = np.sum(n * dirs, axis=-1)
    cos = np.abs(nd) / (np.linalg.norm(n, axis=-1) * np.linalg.norm(dirs, axis=-1))
    parallel = cos < 1e-9
    safe = np.where(parallel, 1.0, nd)
    s = np.sum(n * p_c, axis=-1) / safe
    delta = s[..., None] * dirs - p_c
    u = np.sum(tu_c * delta, axis=-1) / radii[..., 0]
    v = np.sum(tv_c * delta, axis=-1) / radii[..., 1]
    return u, v, s, ~parallel & (s > 0)


def ray_intersect(surfel, camera, pixel):
    """Tangent coordinates and depth where the pixel ray meets the surfel plane, or None."""
    rot = camera.rotation
    p_c = camera.to_camera(surfel.p)
    d = camera.ray_directions(np.asarray(pixel, dtype=np.float64))
    u, v, s, hit = intersect_rays(p_c, rot @ surfel.t_u, rot @ surfel.t_v,
                                  np.array([surfel.r_u, surfel.r_v]), d)
    if not hit:
        return None
    return RayHit(float(u), float(v), float(s))


def _ply_names(sh_count):
    return (['x', 'y', 'z', 'tu_x', 'tu_y', 'tu_z', 'tv_x', 'tv_y', 'tv_z', 'ru', 'rv', 'opacity']
            + [f'sh_{i}' for i in range(3 * sh_count)])


def save_surfels(surfels, file_path, iteration=0):
    """Checkpoint a surfel set as PLY; the header records SH degree and iteration."""
    b = surfels.sh.shape[1]
    names = _ply_names(b)
    vertex = np.empty(len(surfels), dtype=[(name, '<f8') for name in names])
    columns = np.column_stack([surfels.positions, surfels.tangent_u, surfels.tangent_v, surfels.radii,
                               surfels.opacity, surfels.sh.reshape(len(surfels), -1)])
    for j, name in enumerate(names):
        vertex[name] = columns[:, j]
    write_vertex_ply(vertex, file_path,
                     comments=[f'sh_degree {surfels.sh_degree}', f'iteration {int(iteration)}'])


def load_surfels(file_path):
    """Read a checkpoint written by `save_surfels`; returns ``(SurfelSet, iteration)``."""
    ply = PlyData.read(str(file_path))
    meta = dict(c.split(None, 1) for c in ply.comments if len(c.split(None, 1)) == 2)
    if 'sh_degree' not in meta:
        raise PlySchemaError(f"{file_path}: missing 'sh_degree' header comment")
    degree = int(meta['sh_degree'])
    b = sh_coeff_count(degree)
    data = ply['vertex'].data
    names = _ply_names(b)
    missing = [name for name in names if name not in data.dtype.names]
    if missing:
        raise PlySchemaError(f"{file_path}: missing surfel properties {missing[:4]}")
    cols = np.column_stack([data[name] for name in names]).astype(np.float64) if len(data) else \
        np.zeros((0, len(names)))
    surfels = SurfelSet(cols[:, 0:3], cols[:, 3:6], cols[:, 6:9], cols[:, 9:11], cols[:, 11],
                        cols[:, 12:].reshape(len(cols), b, 3))
    return surfels, int(meta.get('iteration', 0))
