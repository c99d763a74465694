"""Geometric supervision of surfels by the frozen GMM map.

Each surfel is tied to its K nearest components. The weighted point-to-plane
distance of the surfel center, of its shape control points and the
disagreement between the surfel normal and the blended component normal
form the GMM loss. Kernel weights and neighbour assignments are constants
between refreshes, so the gradients below are exact for fixed queries.
"""
import logging
from dataclasses import dataclass

import numpy as np

from .gmm_model import voxel_key
from .surfel import SurfelGradients

logger = logging.getLogger(__name__)


def _sign(x, eps=1e-12):
    """Sign with a dead zone; the subgradient of |x| at 0 is taken as 0."""
    return np.where(x > eps, 1.0, np.where(x < -eps, -1.0, 0.0))


@dataclass
class LossParams:
    sigma: float = 0.1
    alpha: float = 0.5
    phi: float = 0.05
    K: int = 4
    max_rings: int = 3

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg['sigma'], cfg['alpha'], cfg['phi'], cfg['K'], cfg['max_rings'])


@dataclass
class NeighborEntry:
    indices: np.ndarray
    distances: np.ndarray
    incomplete: bool


def knn_components(gmm_map, p, K, max_rings=3):
    """The K components whose spatial means are nearest to `p`.

    Voxel shells around the key of `p` are visited in order of growing
    Chebyshev radius; the search stops once the K-th distance found is no
    larger than the distance from `p` to the boundary of the visited block,
    which makes the result exact. Ties are broken by component index.
    When `max_rings` ends the search first, or fewer than K components were
    found, the entry is flagged ``incomplete``.
    """
    p = np.asarray(p, dtype=np.float64)
    if len(gmm_map) == 0:
        return NeighborEntry(np.zeros(0, dtype=np.int64), np.zeros(0), True)
    means = gmm_map.arrays().means
    vs = gmm_map.voxel_size
    key = voxel_key(p, vs)
    lower = np.array(key, dtype=np.float64) * vs
    candidates = []
    exact = False
    for ring in range(max_rings + 1):
        candidates.extend(gmm_map.shell(key, ring))
        if len(candidates) >= K:
            dist = np.linalg.norm(means[candidates] - p, axis=1)
            kth = np.partition(dist, K - 1)[K - 1]
            reach = min(np.min(p - (lower - ring * vs)), np.min(lower + (ring + 1) * vs - p))
            if kth <= reach:
                exact = True
                break
    cand = np.array(candidates, dtype=np.int64)
    if len(cand) == 0:
        return NeighborEntry(cand, np.zeros(0), True)
    dist = np.linalg.norm(means[cand] - p, axis=1)
    order = np.lexsort((cand, dist))[:K]
    return NeighborEntry(cand[order], dist[order], len(order) < K or not exact)


@dataclass
class NeighborQuery:
    """Per-surfel neighbour table, padded with -1 and zero weight."""
    indices: np.ndarray
    weights: np.ndarray
    counts: np.ndarray
    incomplete: np.ndarray
    anchors: np.ndarray

    def __len__(self):
        return len(self.indices)


def query_neighbors(gmm_map, positions, K=4, sigma=0.1, max_rings=3):
    """Neighbour table for every surfel center with kernel weights anchored at the center."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    indices = np.full((n, K), -1, dtype=np.int64)
    weights = np.zeros((n, K))
    counts = np.zeros(n, dtype=np.int64)
    incomplete = np.zeros(n, dtype=bool)
    for i, p in enumerate(positions):
        entry = knn_components(gmm_map, p, K, max_rings)
        m = len(entry.indices)
        indices[i, :m] = entry.indices
        weights[i, :m] = np.exp(-entry.distances ** 2 / (2.0 * sigma ** 2))
        counts[i] = m
        incomplete[i] = entry.incomplete
    if n and incomplete.any():
        logger.debug("%d of %d surfels lack %d provably nearest components", int(incomplete.sum()), n, K)
    return NeighborQuery(indices, weights, counts, incomplete, positions.copy())


def weighted_distance(gmm_map, indices, weights, p):
    """``sum_k w_k |(p - mu_k) . nu_k|`` for one neighbour entry."""
    arr = gmm_map.arrays()
    idx = np.asarray(indices, dtype=np.int64)
    proj = np.einsum('ki,ki->k', np.asarray(p) - arr.means[idx], arr.normals[idx])
    return float(np.sum(np.asarray(weights) * np.abs(proj)))


def weighted_distances(gmm_map, query, probes, normalize=False):
    """Row-wise weighted distance of `probes` (N, 3); rows without neighbours get inf.

    With ``normalize=True`` the kernel weights of each row are rescaled to
    sum to one, so the result is a blend of point-to-plane distances; rows
    whose weights all underflow get inf.
    """
    probes = np.asarray(probes, dtype=np.float64).reshape(-1, 3)
    out = np.full(len(probes), np.inf)
    weights = query.weights
    if normalize:
        total = weights.sum(axis=1)
        weights = weights / np.where(total > 0, total, 1.0)[:, None]
        rows = np.nonzero((query.counts > 0) & (total > 0))[0]
    else:
        rows = np.nonzero(query.counts > 0)[0]
    if len(rows) == 0:
        return out
    arr = gmm_map.arrays()
    idx = np.where(query.indices[rows] >= 0, query.indices[rows], 0)
    proj = np.einsum('gki,gki->gk', probes[rows, None, :] - arr.means[idx], arr.normals[idx])
    out[rows] = np.sum(weights[rows] * np.abs(proj), axis=1)
    return out


@dataclass
class GmmLossBreakdown:
    L_dis: float = 0.0
    L_control: float = 0.0
    L_normal: float = 0.0
    count: int = 0
    normals_excluded: int = 0

    @property
    def L_GMM(self):
        return self.L_dis + self.L_control + self.L_normal


def _evaluate(surfels, query, gmm_map, params, visible, want_grad, project):
    grads = SurfelGradients.zeros_like(surfels) if want_grad else None
    rows = query.counts > 0
    if visible is not None:
        rows = rows & np.asarray(visible, dtype=bool)
    rows = np.nonzero(rows)[0]
    count = len(rows)
    if count == 0:
        return GmmLossBreakdown(), grads

    arr = gmm_map.arrays()
    valid = query.indices[rows] >= 0
    idx = np.where(valid, query.indices[rows], 0)
    w = query.weights[rows] * valid
    mu, nu = arr.means[idx], arr.normals[idx]
    p = surfels.positions[rows]
    tu, tv = surfels.tangent_u[rows], surfels.tangent_v[rows]
    r_u, r_v = surfels.radii[rows, 0], surfels.radii[rows, 1]

    def distance(x):
        proj = np.einsum('gki,gki->gk', x[:, None, :] - mu, nu)
        return np.sum(w * np.abs(proj), axis=1), np.einsum('gk,gki->gi', w * _sign(proj), nu)

    d_p, g_p = distance(p)
    d_u, g_u = distance(p + params.alpha * r_u[:, None] * tu)
    d_v, g_v = distance(p + params.alpha * r_v[:, None] * tv)
    use_v = r_v >= params.phi
    use_u = use_v | (r_u >= params.phi)
    control = use_u * d_u + use_v * d_v

    n = np.cross(tu, tv)
    flip = np.where(np.einsum('gki,gi->gk', nu, n) < 0, -1.0, 1.0)
    blend = np.einsum('gk,gki->gi', w * flip, nu)
    blend_norm = np.linalg.norm(blend, axis=1)
    ok = blend_norm >= 1e-12
    n_bar = blend / np.where(ok, blend_norm, 1.0)[:, None]
    diff = n - n_bar
    cos_gap = 1.0 - np.einsum('gi,gi->g', n, n_bar)
    normal_loss = np.where(ok, np.sum(np.abs(diff), axis=1) + np.abs(cos_gap), 0.0)

    loss = GmmLossBreakdown(float(np.sum(d_p) / count), float(np.sum(control) / count),
                            float(np.sum(normal_loss) / count), count, int(np.sum(~ok)))
    if not want_grad:
        return loss, None

    scale = 1.0 / count
    mu_, mv_ = use_u[:, None].astype(float), use_v[:, None].astype(float)
    grads.positions[rows] = scale * (g_p + mu_ * g_u + mv_ * g_v)
    grads.radii[rows, 0] = scale * use_u * params.alpha * np.einsum('gi,gi->g', tu, g_u)
    grads.radii[rows, 1] = scale * use_v * params.alpha * np.einsum('gi,gi->g', tv, g_v)
    g_n = ok[:, None] * (_sign(diff) - _sign(cos_gap)[:, None] * n_bar)
    g_tu = mu_ * params.alpha * r_u[:, None] * g_u + np.cross(tv, g_n)
    g_tv = mv_ * params.alpha * r_v[:, None] * g_v + np.cross(g_n, tu)
    if project:
        g_tu, g_tv = project_tangent_gradients(tu, tv, g_tu, g_tv)
    grads.tangent_u[rows] = scale * g_tu
    grads.tangent_v[rows] = scale * g_tv
    return loss, grads


def project_tangent_gradients(tu, tv, g_tu, g_tv):
    """Project ``[g_tu g_tv]`` onto the tangent space of orthonormal 2-frames: ``G - X sym(X^T G)``."""
    x = np.stack([tu, tv], axis=2)
    g = np.stack([g_tu, g_tv], axis=2)
    xtg = np.einsum('nij,nik->njk', x, g)
    sym = 0.5 * (xtg + np.transpose(xtg, (0, 2, 1)))
    out = g - np.einsum('nij,njk->nik', x, sym)
    return out[:, :, 0], out[:, :, 1]


def gmm_losses(surfels, query, gmm_map, params=None, visible=None):
    """Distance, shape-control and normal losses averaged over the supervised surfels.

    Parameters
    ----------
    surfels : SurfelSet
    query : NeighborQuery
        Aligned with `surfels`.
    gmm_map : GmmMap
    params : LossParams, optional
    visible : ndarray of bool, optional
        Surfels seen from the current view; all when omitted.

    Returns
    -------
    GmmLossBreakdown
    """
    loss, _ = _evaluate(surfels, query, gmm_map, params or LossParams(), visible, False, False)
    return loss


def gmm_loss_gradients(surfels, query, gmm_map, params=None, visible=None, project=True):
    """Analytic gradients of the GMM loss w.r.t. centers, tangents and radii.

    With ``project=True`` the tangent gradients are projected onto the
    manifold of orthonormal frames.
    """
    _, grads = _evaluate(surfels, query, gmm_map, params or LossParams(), visible, True, project)
    return grads


def gmm_losses_and_gradients(surfels, query, gmm_map, params=None, visible=None, project=True):
    return _evaluate(surfels, query, gmm_map, params or LossParams(), visible, True, project)
