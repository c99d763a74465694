"""Incremental plane-constrained 4D Gaussian mixture map.

Points are grouped into voxels, planes are extracted per voxel with RANSAC,
and each plane's points are modelled in the plane frame over
``(u, v, 0, gray)``. The component count of every local model comes from
Gaussian mean shift over ``(u, v, gray)``; parameters are then refined with
EM. Components are transformed to world space and appended to a spatial
hash keyed by the voxel of their spatial mean.
"""
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from .errors import GmmFormatError, MapFrozenError

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
MAGIC = b'LIGSGMM1'
_HEADER = struct.Struct('<8sdQI')
HAS_TRAILER = 0x1
_COUNT = struct.Struct('<Q')
_TRIU = np.triu_indices(4)
COMPONENT_DTYPE = np.dtype([('weight', '<f8'), ('mean', '<f8', (4,)), ('cov', '<f8', (10,)),
                            ('mean_rgb', '<f4', (3,)), ('key', '<i4', (3,))])
VOXEL_DTYPE = np.dtype([('key', '<i4', (3,)), ('count', '<i8')])


def voxel_keys(points, voxel_size):
    """(N, 3) integer keys ``floor(p / voxel_size)``."""
    return np.floor(np.asarray(points, dtype=np.float64).reshape(-1, 3) / voxel_size).astype(np.int64)


def voxel_key(p, voxel_size):
    return tuple(int(k) for k in voxel_keys(p, voxel_size)[0])


def voxelize(points, voxel_size):
    """Group point indices by voxel.

    Parameters
    ----------
    points : PointCloud or ndarray (N, 3)
    voxel_size : float

    Returns
    -------
    dict
        ``(ix, iy, iz) -> ndarray`` of point indices, keys in sorted order.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    positions = getattr(points, 'positions', points)
    keys = voxel_keys(positions, voxel_size)
    if len(keys) == 0:
        return {}
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind='stable')
    bounds = np.cumsum(np.bincount(inverse, minlength=len(uniq)))[:-1]
    return {tuple(int(v) for v in key): idx for key, idx in zip(uniq, np.split(order, bounds))}


@dataclass
class PlaneFrame:
    """Plane basis ``R = [v2 v1 v0]`` (columns) with ``det R = +1``."""
    mean: np.ndarray
    rotation: np.ndarray
    eigenvalues: np.ndarray

    @property
    def normal(self):
        return self.rotation[:, 2]

    @classmethod
    def from_points(cls, points):
        """PCA frame of `points`, or None if the covariance has rank < 2."""
        points = np.asarray(points, dtype=np.float64)
        mean = points.mean(axis=0)
        centered = points - mean
        evals, evecs = np.linalg.eigh(centered.T @ centered / len(points))
        evals = np.clip(evals, 0.0, None)
        if evals[1] <= 1e-12 * max(evals[2], 1e-300):
            return None
        rot = evecs[:, ::-1].copy()
        if np.linalg.det(rot) < 0:
            rot[:, 2] *= -1.0
        return cls(mean, rot, evals)


@dataclass
class RansacConfig:
    threshold: float = 0.02
    iterations: int = 200
    min_inliers: int = 30
    max_planes: int = 4


def extract_planes(positions, config, seed=0):
    """Greedy multi-plane RANSAC on the points of one voxel.

    Parameters
    ----------
    positions : ndarray (N, 3)
    config : RansacConfig
    seed : int or numpy.random.SeedSequence

    Returns
    -------
    planes : list of (PlaneFrame, ndarray)
        Each plane with the indices (into `positions`) of its inliers.
    residual : ndarray
        Indices of points on no accepted plane.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    remaining = np.arange(len(positions))
    planes = []
    while len(planes) < config.max_planes and len(remaining) >= config.min_inliers:
        pts = positions[remaining]
        samples = np.array([rng.choice(len(pts), 3, replace=False) for _ in range(config.iterations)])
        a, b, c = pts[samples[:, 0]], pts[samples[:, 1]], pts[samples[:, 2]]
        normals = np.cross(b - a, c - a)
        norms = np.linalg.norm(normals, axis=1)
        good = norms > 1e-12
        if not good.any():
            break
        normals[good] /= norms[good, None]
        dist = np.abs(pts @ normals.T - np.einsum('ij,ij->i', a, normals))
        counts = (dist < config.threshold).sum(axis=0)
        counts[~good] = -1
        best = int(np.argmax(counts))
        if counts[best] < config.min_inliers:
            break
        inliers = dist[:, best] < config.threshold
        frame = PlaneFrame.from_points(pts[inliers])
        if frame is None:
            break
        planes.append((frame, remaining[inliers]))
        remaining = remaining[~inliers]
    return planes, remaining


@dataclass(eq=False)
class GmmComponent4D:
    """One mixture component over ``(x, y, z, gray)``.

    The spatial eigen-decomposition of ``cov[:3, :3]`` is cached on
    construction; `normal` is the eigenvector of the smallest eigenvalue,
    possibly sign flipped by `orient_normal`.
    """
    weight: float
    mean: np.ndarray
    cov: np.ndarray
    mean_rgb: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    source_key: Tuple[int, int, int] = (0, 0, 0)
    normal: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weight = float(self.weight)
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(4)
        cov = np.asarray(self.cov, dtype=np.float64).reshape(4, 4)
        self.cov = 0.5 * (cov + cov.T)
        self.mean_rgb = np.asarray(self.mean_rgb, dtype=np.float32).astype(np.float64).reshape(3)
        self.source_key = tuple(int(k) for k in self.source_key)
        self.eigenvalues, self.eigenvectors = np.linalg.eigh(self.cov[:3, :3])
        if self.normal is None:
            self.normal = self.eigenvectors[:, 0].copy()
        else:
            n = np.asarray(self.normal, dtype=np.float64)
            self.normal = n / np.linalg.norm(n)

    @property
    def spatial_mean(self):
        return self.mean[:3]

    @property
    def cov_pp(self):
        return self.cov[:3, :3]

    @property
    def cov_pg(self):
        return self.cov[:3, 3]

    @property
    def cov_gg(self):
        return self.cov[3, 3]

    def orient_normal(self, viewpoint):
        """Flip `normal` so that it points toward `viewpoint`."""
        if np.dot(np.asarray(viewpoint) - self.spatial_mean, self.normal) < 0:
            self.normal = -self.normal
        return self


def to_world(component, frame):
    """Map a plane-frame component into world space with ``H = blockdiag(R, 1)``."""
    h = np.eye(4)
    h[:3, :3] = frame.rotation
    offset = np.append(frame.mean, 0.0)
    return GmmComponent4D(component.weight, offset + h @ component.mean, h @ component.cov @ h.T,
                          component.mean_rgb, component.source_key)


def regularize(component, eps=1e-8):
    """Copy of `component` with `eps` added to the spatial covariance diagonal."""
    cov = component.cov.copy()
    cov[:3, :3] += eps * np.eye(3)
    return GmmComponent4D(component.weight, component.mean, cov, component.mean_rgb,
                          component.source_key, component.normal)


def mean_shift_modes(points, bandwidth, max_iter=300, tol=1e-4, merge_radius=0.5):
    """Gaussian-kernel mean shift with bin seeding.

    Coordinates are divided by `bandwidth` (scalar or per axis), seeds are
    the centroids of unit bins in the scaled space, and converged seeds
    closer than `merge_radius` (scaled units) collapse to the denser one.

    Returns
    -------
    modes : ndarray (M, d)
        In the original units, ordered by decreasing kernel density.
    labels : ndarray (N,)
        Index of the nearest mode for every point.
    """
    x = np.asarray(points, dtype=np.float64)
    scale = np.broadcast_to(np.asarray(bandwidth, dtype=np.float64), x.shape[1:])
    z = x / scale
    bins = np.floor(z).astype(np.int64)
    _, inverse = np.unique(bins, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    counts = np.bincount(inverse)
    seeds = np.zeros((len(counts), z.shape[1]))
    np.add.at(seeds, inverse, z)
    seeds /= counts[:, None]

    zz = np.einsum('ij,ij->i', z, z)
    for _ in range(max_iter):
        d2 = np.einsum('ij,ij->i', seeds, seeds)[:, None] + zz[None, :] - 2.0 * seeds @ z.T
        w = np.exp(-0.5 * np.maximum(d2, 0.0))
        wsum = w.sum(axis=1)
        alive = wsum > 0
        shifted = seeds.copy()
        shifted[alive] = (w[alive] @ z) / wsum[alive, None]
        step = np.max(np.linalg.norm(shifted - seeds, axis=1))
        seeds = shifted
        if step < tol:
            break
    d2 = np.einsum('ij,ij->i', seeds, seeds)[:, None] + zz[None, :] - 2.0 * seeds @ z.T
    density = np.exp(-0.5 * np.maximum(d2, 0.0)).sum(axis=1)

    kept = []
    for i in np.argsort(-density, kind='stable'):
        if all(np.linalg.norm(seeds[i] - seeds[j]) >= merge_radius for j in kept):
            kept.append(i)
    modes = seeds[kept]
    d2 = ((z[:, None, :] - modes[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    # modes that attract no point are dropped
    used = np.unique(labels)
    remap = np.full(len(modes), -1)
    remap[used] = np.arange(len(used))
    return modes[used] * scale, remap[labels]


@dataclass
class MixtureFit:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    responsibilities: np.ndarray
    log_likelihoods: List[float]


def _log_gaussians(x, means, covs):
    diff = x[:, None, :] - means[None, :, :]
    inv = np.linalg.inv(covs)
    _, logdet = np.linalg.slogdet(covs)
    maha = np.einsum('nki,kij,nkj->nk', diff, inv, diff)
    return -0.5 * (maha + logdet[None, :] + x.shape[1] * LOG_2PI)


def _m_step(x, resp, cov_eps):
    nk = resp.sum(axis=0) + 10.0 * np.finfo(np.float64).eps
    means = (resp.T @ x) / nk[:, None]
    diff = x[:, None, :] - means[None, :, :]
    covs = np.einsum('nk,nki,nkj->kij', resp, diff, diff) / nk[:, None, None]
    covs = 0.5 * (covs + np.transpose(covs, (0, 2, 1)))
    evals, evecs = np.linalg.eigh(covs)
    if np.any(evals < cov_eps):
        evals = np.maximum(evals, cov_eps)
        covs = np.einsum('kij,kj,klj->kil', evecs, evals, evecs)
    return nk / nk.sum(), means, covs


def fit_mixture(points, bandwidth, em_tol=1e-6, max_em_iters=100, cov_eps=1e-8):
    """Mean-shift initialized EM on an (N, d) sample.

    Convergence is declared when the mean per-point log-likelihood gains less
    than `em_tol` in one iteration. Covariance eigenvalues below `cov_eps`
    are clamped to it. The returned responsibilities belong to the returned
    parameters.
    """
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    _, labels = mean_shift_modes(x, bandwidth)
    resp = np.zeros((n, labels.max() + 1))
    resp[np.arange(n), labels] = 1.0
    weights, means, covs = _m_step(x, resp, cov_eps)

    history = []
    for it in range(max_em_iters + 1):
        log_prob = _log_gaussians(x, means, covs) + np.log(weights)[None, :]
        per_point = logsumexp(log_prob, axis=1)
        history.append(float(per_point.sum()))
        resp = np.exp(log_prob - per_point[:, None])
        if it == max_em_iters or (it > 0 and (history[-1] - history[-2]) / n < em_tol):
            break
        weights, means, covs = _m_step(x, resp, cov_eps)

    keep = weights > 1e-12
    if not keep.all():
        weights, means, covs, resp = weights[keep], means[keep], covs[keep], resp[:, keep]
        weights = weights / weights.sum()
    return MixtureFit(weights, means, covs, resp, history)


def _mean_rgb(resp, rgb):
    if rgb is None:
        return np.full((resp.shape[1], 3), 0.5)
    return (resp.T @ np.asarray(rgb, dtype=np.float64)) / np.maximum(resp.sum(axis=0), 1e-300)[:, None]


def fit_local_gmm(points4d, bandwidth=(0.15, 0.15), em_tol=1e-6, max_em_iters=100,
                  cov_eps=1e-8, rgb=None, source_key=(0, 0, 0)):
    """Fit the plane-frame mixture of one plane.

    Parameters
    ----------
    points4d : ndarray (N, 4)
        ``(u, v, 0, g)`` rows; the third column must be identically zero.
    bandwidth : (float, float)
        Mean-shift bandwidth in the in-plane axes and in gray.
    rgb : ndarray (N, 3), optional
        Point colors; when given each component gets the
        responsibility-weighted mean color.

    Returns
    -------
    list of GmmComponent4D
        Plane-frame components whose weights sum to 1. Row and column 2 of
        every covariance are exactly zero.
    """
    pts = np.asarray(points4d, dtype=np.float64)
    if np.any(pts[:, 2] != 0.0):
        raise ValueError("plane-frame points must have w == 0")
    h_s, h_g = bandwidth
    fit = fit_mixture(pts[:, [0, 1, 3]], (h_s, h_s, h_g), em_tol, max_em_iters, cov_eps)
    colors = _mean_rgb(fit.responsibilities, rgb)
    sel = [0, 1, 3]
    components = []
    for k in range(len(fit.weights)):
        mean = np.zeros(4)
        mean[sel] = fit.means[k]
        cov = np.zeros((4, 4))
        cov[np.ix_(sel, sel)] = fit.covs[k]
        components.append(GmmComponent4D(fit.weights[k], mean, cov, colors[k], source_key))
    return components


def fit_free_gmm(positions, gray, bandwidth=(0.15, 0.15), em_tol=1e-6, max_em_iters=100,
                 cov_eps=1e-8, rgb=None, source_key=(0, 0, 0)):
    """Unconstrained world-space 4D mixture, used for non-planar points."""
    x = np.column_stack([positions, gray])
    h_s, h_g = bandwidth
    fit = fit_mixture(x, (h_s, h_s, h_s, h_g), em_tol, max_em_iters, cov_eps)
    colors = _mean_rgb(fit.responsibilities, rgb)
    return [GmmComponent4D(fit.weights[k], fit.means[k], fit.covs[k], colors[k], source_key)
            for k in range(len(fit.weights))]


@dataclass
class MapArrays:
    means: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    inv_pp: np.ndarray
    logdet_pp: np.ndarray


class GmmMap:
    """Append-only component arena indexed by a voxel hash.

    ``hash`` maps the voxel key of each component's spatial mean to the list
    of its component indices. ``voxel_counts`` keeps the running number of
    points fitted per source voxel, used to scale local weights.
    """

    def __init__(self, voxel_size=1.0):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.components = []
        self.hash = {}
        self.voxel_counts = {}
        self.frame_count = 0
        self.frozen = False
        self._arrays = None

    def __len__(self):
        return len(self.components)

    def add(self, component):
        if self.frozen:
            raise MapFrozenError("map is frozen")
        if not component.weight > 0:
            raise ValueError("component weight must be positive")
        index = len(self.components)
        self.components.append(component)
        self.hash.setdefault(voxel_key(component.spatial_mean, self.voxel_size), []).append(index)
        self._arrays = None
        return index

    def freeze(self):
        self.frozen = True
        self.arrays()
        return self

    def arrays(self):
        """Stacked component arrays, rebuilt lazily after insertions."""
        if self._arrays is None:
            if self.components:
                cov_pp = np.array([c.cov_pp for c in self.components])
                _, logdet = np.linalg.slogdet(cov_pp)
                self._arrays = MapArrays(np.array([c.spatial_mean for c in self.components]),
                                         np.array([c.normal for c in self.components]),
                                         np.array([c.weight for c in self.components]),
                                         np.linalg.inv(cov_pp), logdet)
            else:
                empty = np.zeros((0, 3))
                self._arrays = MapArrays(empty, empty, np.zeros(0), np.zeros((0, 3, 3)), np.zeros(0))
        return self._arrays

    def shell(self, key, ring):
        """Component indices in voxels at Chebyshev distance exactly `ring` from `key`."""
        found = []
        span = range(-ring, ring + 1)
        for off in product(span, span, span):
            if ring and max(abs(o) for o in off) != ring:
                continue
            found.extend(self.hash.get((key[0] + off[0], key[1] + off[1], key[2] + off[2]), ()))
        return found

    def neighborhood(self, key):
        """Component indices in the 27 voxels around `key`."""
        return np.array(self.shell(key, 0) + self.shell(key, 1), dtype=np.int64)

    def has_voxel(self, key):
        return key in self.hash or key in self.voxel_counts


def log_likelihoods(gmm_map, points):
    """Spatial log density of each point under its 27-voxel neighbourhood.

    Weights are renormalized over the neighbourhood; points with no
    component in reach get ``-inf``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.full(len(pts), -np.inf)
    if len(pts) == 0 or len(gmm_map) == 0:
        return out
    arr = gmm_map.arrays()
    keys = voxel_keys(pts, gmm_map.voxel_size)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    for j, key in enumerate(uniq):
        comp = gmm_map.neighborhood(tuple(int(k) for k in key))
        if len(comp) == 0:
            continue
        sel = np.nonzero(inverse == j)[0]
        w = arr.weights[comp]
        diff = pts[sel][:, None, :] - arr.means[comp][None, :, :]
        maha = np.einsum('nki,kij,nkj->nk', diff, arr.inv_pp[comp], diff)
        log_p = np.log(w / w.sum())[None, :] - 0.5 * (maha + arr.logdet_pp[comp][None, :] + 3.0 * LOG_2PI)
        out[sel] = logsumexp(log_p, axis=1)
    return out


def log_likelihood(gmm_map, p):
    return float(log_likelihoods(gmm_map, np.asarray(p).reshape(1, 3))[0])


def effective_points(gmm_map, frame, rho=-6.0):
    """Split frame points into unmapped (`F_new`) and poorly explained (`F_low`) indices."""
    positions = getattr(getattr(frame, 'points', frame), 'positions', frame)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    keys = voxel_keys(positions, gmm_map.voxel_size)
    known = np.array([gmm_map.has_voxel(tuple(int(v) for v in k)) for k in keys], dtype=bool)
    f_new = np.nonzero(~known)[0]
    existing = np.nonzero(known)[0]
    ll = log_likelihoods(gmm_map, positions[existing])
    return f_new, existing[ll < rho]


@dataclass
class GmmParams:
    ransac: RansacConfig = field(default_factory=RansacConfig)
    bandwidth_spatial: float = 0.15
    bandwidth_gray: float = 0.15
    em_tol: float = 1e-6
    max_em_iters: int = 100
    cov_eps: float = 1e-8
    rho: float = -6.0
    fit_residual: bool = True
    plane_constraint: bool = True
    seed: int = 0
    threads: int = 1

    @classmethod
    def from_config(cls, cfg):
        return cls(RansacConfig(cfg['ransac_threshold'], cfg['ransac_iterations'],
                                cfg['min_inliers'], cfg['max_planes']),
                   cfg['bandwidth_spatial'], cfg['bandwidth_gray'], cfg['em_tol'],
                   cfg['max_em_iters'], cfg['cov_eps'], cfg['rho'], cfg['fit_residual'],
                   cfg['plane_constraint'], cfg['seed'], cfg['threads'])


@dataclass
class IntegrationReport:
    frame_id: int
    new_components: int = 0
    points_consumed: int = 0
    points_skipped: int = 0
    points_discarded: int = 0
    failed_voxels: int = 0
    seconds: float = 0.0


def _voxel_seed(seed, frame_id, key):
    return np.random.SeedSequence([int(seed) % 2**32, int(frame_id) % 2**32] + [k % 2**32 for k in key])


def _fit_voxel(key, positions, gray, rgb, params, seed, viewpoint, voxel_size):
    """All local fits of one voxel as ``[(world components, point count), ...]``."""
    bandwidth = (params.bandwidth_spatial * voxel_size, params.bandwidth_gray)
    fits = []
    residual = np.arange(len(positions))
    if params.plane_constraint:
        planes, residual = extract_planes(positions, params.ransac, seed)
        for frame, idx in planes:
            local = (positions[idx] - frame.mean) @ frame.rotation
            pts4 = np.column_stack([local[:, 0], local[:, 1], np.zeros(len(idx)), gray[idx]])
            comps = fit_local_gmm(pts4, bandwidth, params.em_tol, params.max_em_iters,
                                  params.cov_eps, rgb[idx], key)
            world = [regularize(to_world(c, frame), params.cov_eps).orient_normal(viewpoint) for c in comps]
            fits.append((world, len(idx)))
    if len(residual) >= params.ransac.min_inliers and (params.fit_residual or not params.plane_constraint):
        comps = fit_free_gmm(positions[residual], gray[residual], bandwidth, params.em_tol,
                             params.max_em_iters, params.cov_eps, rgb[residual], key)
        world = [regularize(c, params.cov_eps).orient_normal(viewpoint) for c in comps]
        fits.append((world, len(residual)))
    return fits


def integrate_frame(gmm_map, frame, params=None):
    """Insert the effective points of one colorized frame into the map.

    Effective points are voxelized; every voxel is fitted independently (in
    parallel when ``params.threads > 1``) and the results are inserted in
    sorted key order, so the outcome does not depend on the thread count.
    A failing voxel is logged and skipped.

    Returns
    -------
    IntegrationReport
    """
    params = params or GmmParams()
    if gmm_map.frozen:
        raise MapFrozenError("cannot integrate into a frozen map")
    start = time.perf_counter()
    cloud = frame.points
    report = IntegrationReport(frame.frame_id)
    f_new, f_low = effective_points(gmm_map, frame, params.rho)
    eff = np.union1d(f_new, f_low)
    report.points_consumed = len(eff)
    report.points_skipped = len(cloud) - len(eff)
    buckets = voxelize(cloud.positions[eff], gmm_map.voxel_size)
    viewpoint = frame.camera.center

    def work(item):
        key, local = item
        idx = eff[local]
        try:
            return key, _fit_voxel(key, cloud.positions[idx], cloud.gray[idx], cloud.rgb[idx], params,
                                   _voxel_seed(params.seed, frame.frame_id, key), viewpoint,
                                   gmm_map.voxel_size), len(idx)
        except (ValueError, np.linalg.LinAlgError) as e:
            logger.warning("frame %d voxel %s: fit failed (%s)", frame.frame_id, key, e)
            return key, None, len(idx)

    with ThreadPoolExecutor(max_workers=max(1, params.threads)) as pool:
        results = list(pool.map(work, buckets.items()))

    for key, fits, n_points in results:
        if fits is None:
            report.failed_voxels += 1
            report.points_discarded += n_points
            continue
        fitted = sum(n for _, n in fits)
        report.points_discarded += n_points - fitted
        if not fitted:
            continue
        total = gmm_map.voxel_counts.get(key, 0) + fitted
        gmm_map.voxel_counts[key] = total
        for comps, n_local in fits:
            for comp in comps:
                comp.weight = comp.weight * n_local / total
                gmm_map.add(comp)
                report.new_components += 1
    gmm_map.frame_count += 1
    report.seconds = time.perf_counter() - start
    logger.info("frame %d: %d effective of %d points, %d new components (%d failed voxels)",
                frame.frame_id, report.points_consumed, len(cloud), report.new_components,
                report.failed_voxels)
    return report


def serialize(gmm_map):
    """Little-endian binary blob: header, component records, then a trailer
    holding the frame counter, normal signs and per-voxel point counts.

    The header flags say whether a trailer follows. A map with no components,
    no voxel counts and no integrated frames is written as the header alone.
    """
    comps = gmm_map.components
    if not comps and not gmm_map.voxel_counts and not gmm_map.frame_count:
        return _HEADER.pack(MAGIC, gmm_map.voxel_size, 0, 0)
    records = np.zeros(len(comps), dtype=COMPONENT_DTYPE)
    signs = np.ones(len(comps), dtype=np.int8)
    if comps:
        records['weight'] = [c.weight for c in comps]
        records['mean'] = np.array([c.mean for c in comps])
        records['cov'] = np.array([c.cov[_TRIU] for c in comps])
        records['mean_rgb'] = np.array([c.mean_rgb for c in comps])
        records['key'] = np.array([c.source_key for c in comps])
        flipped = [np.dot(c.normal, c.eigenvectors[:, 0]) < 0 for c in comps]
        signs[np.array(flipped, dtype=bool)] = -1
    keys = sorted(gmm_map.voxel_counts)
    voxels = np.zeros(len(keys), dtype=VOXEL_DTYPE)
    if keys:
        voxels['key'] = np.array(keys)
        voxels['count'] = [gmm_map.voxel_counts[k] for k in keys]
    return b''.join([_HEADER.pack(MAGIC, gmm_map.voxel_size, len(comps), HAS_TRAILER), records.tobytes(),
                     _COUNT.pack(gmm_map.frame_count), signs.tobytes(),
                     _COUNT.pack(len(voxels)), voxels.tobytes()])


def _check_record(index, rec, sign):
    values = np.concatenate([[rec['weight']], rec['mean'], rec['cov'], rec['mean_rgb']])
    if not np.all(np.isfinite(values)):
        raise GmmFormatError(f"component {index}: non-finite value")
    if not 0.0 < rec['weight'] <= 1.0:
        raise GmmFormatError(f"component {index}: weight {rec['weight']} outside (0, 1]")
    if sign not in (1, -1):
        raise GmmFormatError(f"component {index}: normal sign {sign} is not +1 or -1")
    cov = np.zeros((4, 4))
    cov[_TRIU] = rec['cov']
    cov = cov + np.triu(cov, 1).T
    lowest = np.linalg.eigvalsh(cov[:3, :3])[0]
    if lowest < -1e-12 * max(1.0, np.abs(cov[:3, :3]).max()):
        raise GmmFormatError(f"component {index}: spatial covariance is not positive semi-definite")
    return cov


def deserialize(blob):
    """Inverse of `serialize`; raises `GmmFormatError` on any inconsistency.

    Nothing is returned unless the whole blob parses and every record is
    valid: finite values, weight in (0, 1] and a PSD spatial covariance.
    """
    blob = bytes(blob)
    if len(blob) < _HEADER.size:
        raise GmmFormatError(f"blob of {len(blob)} bytes is shorter than the header")
    magic, voxel_size, count, flags = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise GmmFormatError(f"bad magic {magic!r}")
    if flags & ~HAS_TRAILER:
        raise GmmFormatError(f"unknown header flags {flags:#x}")
    if not (np.isfinite(voxel_size) and voxel_size > 0):
        raise GmmFormatError(f"bad voxel size {voxel_size}")
    offset = _HEADER.size
    end = offset + count * COMPONENT_DTYPE.itemsize
    if len(blob) < end:
        raise GmmFormatError(f"truncated: {count} components need {end} bytes, got {len(blob)}")
    records = _records(blob[offset:end], COMPONENT_DTYPE)
    signs = np.ones(count, dtype=np.int8)
    frame_count, voxels = 0, np.zeros(0, dtype=VOXEL_DTYPE)
    if flags & HAS_TRAILER:
        pos = end + _COUNT.size + count
        if len(blob) < pos + _COUNT.size:
            raise GmmFormatError("truncated trailer")
        (frame_count,) = _COUNT.unpack_from(blob, end)
        signs = _records(blob[end + _COUNT.size:pos], np.int8)
        (n_vox,) = _COUNT.unpack_from(blob, pos)
        pos += _COUNT.size
        stop = pos + n_vox * VOXEL_DTYPE.itemsize
        if len(blob) != stop:
            raise GmmFormatError(f"trailer expects {stop} bytes in total, blob has {len(blob)}")
        voxels = _records(blob[pos:stop], VOXEL_DTYPE)
        if np.any(voxels['count'] < 0):
            raise GmmFormatError("negative voxel point count")
    elif len(blob) != end:
        raise GmmFormatError(f"{len(blob) - end} unexpected bytes after the component records")

    covs = [_check_record(i, rec, int(sign)) for i, (rec, sign) in enumerate(zip(records, signs))]
    gmm_map = GmmMap(voxel_size)
    for rec, sign, cov in zip(records, signs, covs):
        comp = GmmComponent4D(rec['weight'], rec['mean'], cov, rec['mean_rgb'], tuple(rec['key']))
        if sign < 0:
            comp.normal = -comp.normal
        gmm_map.add(comp)
    gmm_map.voxel_counts = {tuple(int(k) for k in v['key']): int(v['count']) for v in voxels}
    gmm_map.frame_count = int(frame_count)
    return gmm_map


def save_map(gmm_map, file_path):
    with open(file_path, 'wb') as fh:
        fh.write(serialize(gmm_map))


def load_map(file_path):
    with open(file_path, 'rb') as fh:
        return deserialize(fh.read())


def _records(chunk, dtype):
    if not chunk:
        return np.zeros(0, dtype=dtype)
    return np.frombuffer(chunk, dtype=dtype)
