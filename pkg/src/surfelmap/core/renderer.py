"""CPU reference splatter for surfels with its analytic backward pass.

Every pixel ray is intersected exactly with the planes of the surfels whose
3-sigma footprint covers it. Fragments are composited front to back by
intersection depth (ties by surfel index) into color, depth, normal and
silhouette rasters. The fragment list is kept on the buffers so the
backward pass can replay the compositing in reverse.
"""
import logging
import struct
from dataclasses import dataclass, field
from typing import Optional, Set

import numpy as np
from scipy.ndimage import correlate1d

from .surfel import CUTOFF, SurfelGradients, intersect_rays, sh_backward, sh_to_rgb

logger = logging.getLogger(__name__)

ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
S_MIN = 1e-4
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
DEPTH_MAGIC = b'LIGSDEPT'
_DEPTH_HEADER = struct.Struct('<8sII')
TILE_ROWS = 32
FRAGMENT_BUDGET = 1 << 20


@dataclass
class Fragments:
    """Contributing ray/surfel hits sorted by (pixel, depth, surfel)."""
    surfel: np.ndarray
    pixel: np.ndarray
    rank: np.ndarray
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    gauss: np.ndarray
    alpha: np.ndarray
    trans: np.ndarray
    facing: np.ndarray
    dirs: np.ndarray

    @classmethod
    def empty(cls):
        z = np.zeros(0)
        i = np.zeros(0, dtype=np.int64)
        return cls(i, i, i, z, z, z, z, z, z, z, np.zeros((0, 3)))

    @classmethod
    def concat(cls, parts):
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in cls.__dataclass_fields__))

    def __len__(self):
        return len(self.surfel)

    def take(self, index):
        return Fragments(*(getattr(self, f)[index] for f in self.__dataclass_fields__))


@dataclass
class RenderBuffers:
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    silhouette: np.ndarray
    fragments: Fragments
    visible: np.ndarray
    surfel_colors: np.ndarray
    view_dirs: np.ndarray
    view_dist: np.ndarray

    @property
    def shape(self):
        return self.depth.shape


def _footprints(p_c, tu_c, tv_c, radii, camera, cutoff):
    """Inclusive pixel bounding boxes ``(x0, x1, y0, y1)`` of each surfel's footprint."""
    n = len(p_c)
    w, h = camera.width, camera.height
    x0, y0 = np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64)
    x1, y1 = np.full(n, w - 1, dtype=np.int64), np.full(n, h - 1, dtype=np.int64)
    if not np.isfinite(cutoff):
        return x0, x1, y0, y1
    su = cutoff * radii[:, 0:1] * tu_c
    sv = cutoff * radii[:, 1:2] * tv_c
    corners = np.stack([p_c + su + sv, p_c + su - sv, p_c - su + sv, p_c - su - sv], axis=1)
    z = corners[:, :, 2]
    front = np.all(z > 1e-9, axis=1)
    behind = np.all(z <= 0, axis=1)
    xy = camera.project(corners[front])
    x0[front] = np.floor(xy[:, :, 0].min(axis=1))
    x1[front] = np.ceil(xy[:, :, 0].max(axis=1))
    y0[front] = np.floor(xy[:, :, 1].min(axis=1))
    y1[front] = np.ceil(xy[:, :, 1].max(axis=1))
    x0, y0 = np.clip(x0, 0, w), np.clip(y0, 0, h)
    x1, y1 = np.clip(x1, -1, w - 1), np.clip(y1, -1, h - 1)
    x1[behind] = -1
    return x0, x1, y0, y1


def _hit_fragments(surfels, sid, x0, x1, y0, y1, p_c, tu_c, tv_c, normals_c, camera, cutoff, alpha_min):
    """Ray/surfel hits inside the given per-surfel pixel boxes, already filtered."""
    widths = np.maximum(x1 - x0 + 1, 0)
    counts = widths * np.maximum(y1 - y0 + 1, 0)
    total = int(counts.sum())
    owner = np.repeat(sid, counts)
    offset = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    bw = np.maximum(np.repeat(widths, counts), 1)
    col = np.repeat(x0, counts) + offset % bw
    row = np.repeat(y0, counts) + offset // bw
    dirs = np.stack([(col - camera.cx) / camera.fx, (row - camera.cy) / camera.fy, np.ones(total)], axis=1)
    u, v, s, hit = intersect_rays(p_c[owner], tu_c[owner], tv_c[owner], surfels.radii[owner], dirs)
    r2 = u * u + v * v
    gauss = np.exp(-0.5 * r2)
    alpha = surfels.opacity[owner] * gauss
    keep = np.nonzero(hit & (r2 <= cutoff * cutoff) & (alpha >= alpha_min))[0]
    owner, dirs = owner[keep], dirs[keep]
    facing = np.where(np.einsum('fi,fi->f', normals_c[owner], dirs) > 0, -1.0, 1.0)
    return Fragments(owner, row[keep] * camera.width + col[keep], np.zeros(len(keep), dtype=np.int64),
                     u[keep], v[keep], s[keep], gauss[keep], alpha[keep], np.zeros(len(keep)), facing, dirs)


def _tiled_fragments(surfels, boxes, p_c, tu_c, tv_c, normals_c, camera, cutoff, alpha_min,
                     tile_rows, fragment_budget):
    """Hits of every surfel, generated in bands of `tile_rows` image rows.

    Within a band, surfels are batched so that about `fragment_budget`
    candidate fragments are alive at a time. Bands cover disjoint pixels, so
    the result does not depend on the tiling once sorted.
    """
    x0, x1, y0, y1 = boxes
    widths = np.maximum(x1 - x0 + 1, 0)
    parts = []
    for top in range(0, camera.height, tile_rows):
        ty0 = np.maximum(y0, top)
        ty1 = np.minimum(y1, top + tile_rows - 1)
        counts = widths * np.maximum(ty1 - ty0 + 1, 0)
        ids = np.nonzero(counts)[0]
        if not len(ids):
            continue
        batch = (np.cumsum(counts[ids]) - counts[ids]) // fragment_budget
        for chunk in np.split(ids, np.nonzero(np.diff(batch))[0] + 1):
            parts.append(_hit_fragments(surfels, chunk, x0[chunk], x1[chunk], ty0[chunk], ty1[chunk],
                                        p_c, tu_c, tv_c, normals_c, camera, cutoff, alpha_min))
    return Fragments.concat(parts)


def render(surfels, camera, cutoff=CUTOFF, alpha_min=ALPHA_MIN, t_min=T_MIN, tile_rows=TILE_ROWS,
           fragment_budget=FRAGMENT_BUDGET):
    """Composite `surfels` as seen by `camera`.

    Parameters
    ----------
    surfels : SurfelSet
    camera : CameraModel
    cutoff : float
        Fragments with ``|u| > cutoff`` are dropped; ``inf`` disables the test.
    alpha_min : float
        Fragments with alpha below this are dropped.
    t_min : float
        A fragment contributes only while the transmittance in front of it
        is at least `t_min`.
    tile_rows, fragment_budget : int
        Candidate fragments are generated per band of `tile_rows` rows, in
        batches of roughly `fragment_budget`; they bound peak memory and do
        not change the result.

    Returns
    -------
    RenderBuffers
        Depth and normal are alpha-normalized where the silhouette exceeds
        1e-4 and zero elsewhere; normals are in the camera frame, facing the
        viewer. Background is black.
    """
    if tile_rows < 1 or fragment_budget < 1:
        raise ValueError("tile_rows and fragment_budget must be positive")
    h, w = camera.height, camera.width
    hw = h * w
    n = len(surfels)
    rot = camera.rotation
    view = surfels.positions - camera.center
    view_dist = np.linalg.norm(view, axis=1)
    view_dirs = view / np.maximum(view_dist, 1e-300)[:, None]
    colors = sh_to_rgb(surfels.sh, view_dirs) if n else np.zeros((0, 3))

    p_c = camera.to_camera(surfels.positions)
    tu_c = surfels.tangent_u @ rot.T
    tv_c = surfels.tangent_v @ rot.T
    normals_c = np.cross(tu_c, tv_c)
    boxes = _footprints(p_c, tu_c, tv_c, surfels.radii, camera, cutoff)
    frags = _tiled_fragments(surfels, boxes, p_c, tu_c, tv_c, normals_c, camera, cutoff, alpha_min,
                             tile_rows, fragment_budget)
    visible = np.bincount(frags.surfel, minlength=n) > 0
    frags = frags.take(np.lexsort((frags.surfel, frags.depth, frags.pixel)))

    if len(frags):
        _, first, per_pixel = np.unique(frags.pixel, return_index=True, return_counts=True)
        frags.rank = np.arange(len(frags)) - np.repeat(first, per_pixel)
    contributes = np.zeros(len(frags), dtype=bool)
    transmittance = np.ones(hw)
    for ids in _levels(frags.rank):
        pix = frags.pixel[ids]
        t_before = transmittance[pix]
        live = t_before >= t_min
        frags.trans[ids] = t_before
        contributes[ids] = live
        transmittance[pix[live]] = t_before[live] * (1.0 - frags.alpha[ids[live]])
    frags = frags.take(np.nonzero(contributes)[0])

    weight = frags.alpha * frags.trans
    silhouette = np.bincount(frags.pixel, weight, minlength=hw)
    color = np.stack([np.bincount(frags.pixel, weight * colors[frags.surfel, c], minlength=hw)
                      for c in range(3)], axis=1)
    feat_n = frags.facing[:, None] * normals_c[frags.surfel]
    acc_d = np.bincount(frags.pixel, weight * frags.depth, minlength=hw)
    acc_n = np.stack([np.bincount(frags.pixel, weight * feat_n[:, c], minlength=hw) for c in range(3)], axis=1)
    ok = silhouette > S_MIN
    inv = np.where(ok, 1.0 / np.where(ok, silhouette, 1.0), 0.0)
    return RenderBuffers(color.reshape(h, w, 3), (acc_d * inv).reshape(h, w),
                         (acc_n * inv[:, None]).reshape(h, w, 3), silhouette.reshape(h, w),
                         frags, visible, colors, view_dirs, view_dist)


def _levels(rank, reverse=False):
    """Fragment index groups sharing the same per-pixel rank."""
    if len(rank) == 0:
        return []
    order = np.argsort(rank, kind='stable')
    bounds = np.cumsum(np.bincount(rank))
    groups = np.split(order, bounds[:-1])
    return groups[::-1] if reverse else groups


@dataclass
class PixelAdjoints:
    """dL/d(buffer) for each output raster."""
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    silhouette: np.ndarray

    @classmethod
    def zeros(cls, h, w):
        return cls(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w, 3)), np.zeros((h, w)))


def render_gradients(surfels, camera, buffers, adjoints, accumulate=True):
    """Backpropagate pixel adjoints to surfel parameters.

    With ``accumulate=True`` the norm of each contributing surfel's
    screen-space positional gradient (NDC scaled) is added to
    ``surfels.grad_accum`` and ``surfels.grad_count`` is incremented.

    Returns
    -------
    SurfelGradients
        World-frame gradients of the loss whose adjoints were given.
    """
    grads = SurfelGradients.zeros_like(surfels)
    frags = buffers.fragments
    n = len(surfels)
    if len(frags) == 0:
        return grads
    h, w = buffers.shape
    hw = h * w
    g_color = adjoints.color.reshape(hw, 3)
    g_depth = adjoints.depth.ravel()
    g_normal = adjoints.normal.reshape(hw, 3)
    sil = buffers.silhouette.ravel()
    ok = sil > S_MIN
    inv = np.where(ok, 1.0 / np.where(ok, sil, 1.0), 0.0)
    g_fd = g_depth * inv
    g_fn = g_normal * inv[:, None]
    g_sil = (adjoints.silhouette.ravel()
             - (g_depth * buffers.depth.ravel()
                + np.sum(g_normal * buffers.normal.reshape(hw, 3), axis=1)) * inv)

    rot = camera.rotation
    sid, pix = frags.surfel, frags.pixel
    p_c = camera.to_camera(surfels.positions)[sid]
    tu_c = (surfels.tangent_u @ rot.T)[sid]
    tv_c = (surfels.tangent_v @ rot.T)[sid]
    n_c = np.cross(tu_c, tv_c)
    feat_n = frags.facing[:, None] * n_c
    h_frag = (np.sum(g_color[pix] * buffers.surfel_colors[sid], axis=1) + g_fd[pix] * frags.depth
              + np.sum(g_fn[pix] * feat_n, axis=1) + g_sil[pix])

    g_alpha = np.zeros(len(frags))
    behind = np.zeros(hw)
    for ids in _levels(frags.rank, reverse=True):
        p = pix[ids]
        a = frags.alpha[ids]
        g_alpha[ids] = frags.trans[ids] * (h_frag[ids] - behind[p])
        behind[p] = a * h_frag[ids] + (1.0 - a) * behind[p]

    weight = frags.alpha * frags.trans
    opacity = surfels.opacity[sid]
    g_gauss = g_alpha * opacity
    g_u = -g_gauss * frags.gauss * frags.u
    g_v = -g_gauss * frags.gauss * frags.v
    g_s = weight * g_fd[pix]

    r_u, r_v = surfels.radii[sid, 0], surfels.radii[sid, 1]
    d = frags.dirs
    nd = np.einsum('fi,fi->f', n_c, d)
    tud = np.einsum('fi,fi->f', tu_c, d)
    tvd = np.einsum('fi,fi->f', tv_c, d)
    delta = frags.depth[:, None] * d - p_c
    g_pc = (g_u[:, None] * (n_c * (tud / nd)[:, None] - tu_c) / r_u[:, None]
            + g_v[:, None] * (n_c * (tvd / nd)[:, None] - tv_c) / r_v[:, None]
            + (g_s / nd)[:, None] * n_c)
    g_nc = (-(g_u * tud / r_u + g_v * tvd / r_v + g_s) / nd)[:, None] * delta
    g_nc += frags.facing[:, None] * weight[:, None] * g_fn[pix]
    g_tuc = g_u[:, None] * delta / r_u[:, None] + np.cross(tv_c, g_nc)
    g_tvc = g_v[:, None] * delta / r_v[:, None] + np.cross(g_nc, tu_c)

    def per_surfel(values):
        if values.ndim == 1:
            return np.bincount(sid, values, minlength=n)
        return np.stack([np.bincount(sid, values[:, c], minlength=n) for c in range(values.shape[1])], axis=1)

    pos_c = per_surfel(g_pc)
    g_col = per_surfel(weight[:, None] * g_color[pix])
    g_sh, g_dirs = sh_backward(surfels.sh, buffers.view_dirs, g_col)
    vd = buffers.view_dirs
    g_view = (g_dirs - vd * np.sum(vd * g_dirs, axis=1, keepdims=True)) / np.maximum(buffers.view_dist, 1e-300)[:, None]

    grads.positions = pos_c @ rot + g_view
    grads.tangent_u = per_surfel(g_tuc) @ rot
    grads.tangent_v = per_surfel(g_tvc) @ rot
    grads.radii = np.column_stack([per_surfel(-g_u * frags.u / r_u), per_surfel(-g_v * frags.v / r_v)])
    grads.opacity = per_surfel(g_alpha * frags.gauss)
    grads.sh = g_sh

    if accumulate:
        contributing = np.bincount(sid, minlength=n) > 0
        z = camera.to_camera(surfels.positions)[:, 2]
        screen = np.hypot(pos_c[:, 0] * z / camera.fx * 0.5 * w, pos_c[:, 1] * z / camera.fy * 0.5 * h)
        surfels.grad_accum[contributing] += screen[contributing]
        surfels.grad_count[contributing] += 1
    return grads


@dataclass
class LossWeights:
    lambda_GMM: float = 1.0
    lambda_d: float = 0.1
    lambda_n: float = 0.1
    lambda_dssim: float = 0.2

    def __post_init__(self):
        for name in ('lambda_GMM', 'lambda_d', 'lambda_n', 'lambda_dssim'):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg['lambda_GMM'], cfg['lambda_d'], cfg['lambda_n'], cfg['lambda_dssim'])


@dataclass
class ImageLosses:
    L_p: float = 0.0
    L_sky: float = 0.0
    L_d: float = 0.0
    L_n: float = 0.0
    l1: float = 0.0
    dssim: float = 0.0
    empty: Set[str] = field(default_factory=set)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-x ** 2 / (2.0 * sigma ** 2))
    return k / k.sum()


_WINDOW = gaussian_window()


def _blur(img):
    out = correlate1d(img, _WINDOW, axis=0, mode='constant', cval=0.0)
    return correlate1d(out, _WINDOW, axis=1, mode='constant', cval=0.0)


def ssim(x, y, weight=None, with_grad=False):
    """Weighted mean SSIM of (H, W, C) images and optionally its gradient w.r.t. `x`.

    `weight` is a per-pixel-channel weight map summing to 1; the uniform
    mean is used when omitted.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if weight is None:
        weight = np.full(x.shape, 1.0 / x.size)
    mu_x, mu_y = _blur(x), _blur(y)
    e_xx, e_yy, e_xy = _blur(x * x), _blur(y * y), _blur(x * y)
    a = 2.0 * mu_x * mu_y + SSIM_C1
    b = 2.0 * (e_xy - mu_x * mu_y) + SSIM_C2
    c = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    d = (e_xx - mu_x ** 2) + (e_yy - mu_y ** 2) + SSIM_C2
    s = a * b / (c * d)
    value = float(np.sum(weight * s))
    if not with_grad:
        return value
    cd = c * d
    d_mu = (2.0 * mu_y * b - 2.0 * mu_y * a) / cd - s * 2.0 * mu_x / c + s * 2.0 * mu_x / d
    d_xx = -s / d
    d_xy = 2.0 * a / cd
    grad = _blur(weight * d_mu) + 2.0 * x * _blur(weight * d_xx) + y * _blur(weight * d_xy)
    return value, grad


def image_losses_and_adjoints(buffers, gt_rgb, sky_mask, lidar_depth=None, lidar_normal=None,
                              lidar_mask=None, weights=None):
    """Image losses plus the adjoints of ``L_p + L_sky + lambda_d L_d + lambda_n L_n``.

    `sky_mask` is 1 (True) on non-sky pixels and 0 on sky. `lidar_mask` is
    (H, W, 2): channel 0 marks valid depth, channel 1 valid normals.
    """
    weights = weights or LossWeights()
    h, w = buffers.shape
    losses = ImageLosses()
    adj = PixelAdjoints.zeros(h, w)
    keep = np.asarray(sky_mask, dtype=bool).reshape(h, w)
    m3 = np.repeat(keep[:, :, None], 3, axis=2).astype(np.float64)

    count = int(keep.sum())
    if count:
        x = buffers.color * m3
        y = np.asarray(gt_rgb, dtype=np.float64)[:, :, :3] * m3
        diff = x - y
        losses.l1 = float(np.sum(np.abs(diff)) / (3 * count))
        sim, g_sim = ssim(x, y, m3 / (3 * count), with_grad=True)
        losses.dssim = (1.0 - sim) / 2.0
        lam = weights.lambda_dssim
        losses.L_p = (1.0 - lam) * losses.l1 + lam * losses.dssim
        adj.color += m3 * ((1.0 - lam) * np.sign(diff) / (3 * count) - lam * 0.5 * g_sim)
    else:
        losses.empty.add('L_p')

    sky = ~keep
    n_sky = int(sky.sum())
    if n_sky:
        losses.L_sky = float(np.sum(np.abs(buffers.silhouette[sky])) / n_sky)
        adj.silhouette[sky] += np.sign(buffers.silhouette[sky]) / n_sky
    else:
        losses.empty.add('L_sky')

    depth_ok = lidar_mask[:, :, 0] if lidar_mask is not None else np.zeros((h, w), dtype=bool)
    n_d = int(depth_ok.sum())
    if n_d:
        diff = buffers.depth[depth_ok] - lidar_depth[depth_ok]
        losses.L_d = float(np.sum(np.abs(diff)) / n_d)
        adj.depth[depth_ok] += weights.lambda_d * np.sign(diff) / n_d
    else:
        losses.empty.add('L_d')

    normal_ok = lidar_mask[:, :, 1] if lidar_mask is not None else np.zeros((h, w), dtype=bool)
    n_n = int(normal_ok.sum())
    if n_n:
        target = lidar_normal[normal_ok]
        losses.L_n = float(np.sum(1.0 - np.sum(buffers.normal[normal_ok] * target, axis=1)) / n_n)
        adj.normal[normal_ok] += -weights.lambda_n * target / n_n
    else:
        losses.empty.add('L_n')
    return losses, adj


def compute_image_losses(buffers, gt_rgb, sky_mask, lidar_depth=None, lidar_normal=None,
                         lidar_mask=None, lambda_dssim=0.2):
    """Photometric, sky, depth and normal losses of one rendered view.

    Terms without valid pixels are 0 and named in ``ImageLosses.empty``.
    """
    losses, _ = image_losses_and_adjoints(buffers, gt_rgb, sky_mask, lidar_depth, lidar_normal,
                                          lidar_mask, LossWeights(lambda_dssim=lambda_dssim))
    return losses


def total_loss(image_losses, gmm_losses=None, weights=None):
    """``lambda_GMM L_GMM + L_p + L_sky + lambda_d L_d + lambda_n L_n``."""
    weights = weights or LossWeights()
    l_gmm = gmm_losses.L_GMM if gmm_losses is not None else 0.0
    return (weights.lambda_GMM * l_gmm + image_losses.L_p + image_losses.L_sky
            + weights.lambda_d * image_losses.L_d + weights.lambda_n * image_losses.L_n)


def save_depth(file_path, depth):
    depth = np.asarray(depth, dtype='<f4')
    with open(file_path, 'wb') as fh:
        fh.write(_DEPTH_HEADER.pack(DEPTH_MAGIC, depth.shape[0], depth.shape[1]))
        fh.write(depth.tobytes(order='C'))


def load_depth(file_path):
    with open(file_path, 'rb') as fh:
        blob = fh.read()
    if len(blob) < _DEPTH_HEADER.size:
        raise ValueError(f"{file_path}: too short for a depth header")
    magic, h, w = _DEPTH_HEADER.unpack_from(blob, 0)
    if magic != DEPTH_MAGIC:
        raise ValueError(f"{file_path}: bad depth magic {magic!r}")
    expected = _DEPTH_HEADER.size + 4 * h * w
    if len(blob) != expected:
        raise ValueError(f"{file_path}: expected {expected} bytes, found {len(blob)}")
    return np.frombuffer(blob, dtype='<f4', offset=_DEPTH_HEADER.size).reshape(h, w).astype(np.float64)


def normal_to_rgb(normal, silhouette=None):
    """Map unit normals to [0, 1] colors; zero silhouette pixels stay black."""
    rgb = np.clip((np.asarray(normal) + 1.0) * 0.5, 0.0, 1.0)
    if silhouette is not None:
        rgb = rgb * (np.asarray(silhouette) > 0)[:, :, None]
    return rgb
