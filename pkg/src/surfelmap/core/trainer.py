"""Optimization loop: render, supervise, step, densify.

Surfels are optimized one training view per iteration with Adam. Opacity
lives in logit space and radii in log space; the tangent frame is updated
by composing a small rotation onto the current frame, which keeps it
orthonormal without re-projection.
"""
import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .config import parse_int_list
from .density_control import DensityParams, DensityReport, apply_density_control
from .errors import EmptyInputError, TrainingAborted
from .pointcloud_io import LidarImages
from .renderer import LossWeights, image_losses_and_adjoints, render, render_gradients, ssim, total_loss
from .supervision import GmmLossBreakdown, LossParams, gmm_losses_and_gradients, query_neighbors, \
    weighted_distances
from .surfel import R_MIN, save_surfels

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
_LOGIT_EPS = 1e-6


@dataclass
class TrainView:
    """A posed photo with its sky mask (True = not sky) and optional LiDAR supervision."""
    index: int
    camera: object
    image: np.ndarray
    sky_mask: np.ndarray
    lidar: Optional[LidarImages] = None


def split_views(views, stride=8):
    """Every `stride`-th view (starting with the first) is held out for testing."""
    if stride < 1:
        raise ValueError("test stride must be at least 1")
    train = [v for i, v in enumerate(views) if i % stride != 0]
    test = [v for i, v in enumerate(views) if i % stride == 0]
    return train, test


@dataclass
class TrainConfig:
    iterations: int = 30000
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_opacity: float = 0.05
    lr_radii: float = 0.005
    lr_rotation: float = 0.001
    lr_appearance: float = 0.0025
    weights: LossWeights = field(default_factory=LossWeights)
    loss_params: LossParams = field(default_factory=LossParams)
    density: DensityParams = field(default_factory=DensityParams)
    density_control: bool = True
    refresh_every: int = 100
    seed: int = 0
    test_stride: int = 8
    checkpoint_iterations: Tuple[int, ...] = ()
    r_min: float = R_MIN
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        for name in ('lr_position', 'lr_position_final', 'lr_opacity', 'lr_radii', 'lr_rotation', 'lr_appearance'):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.refresh_every < 1:
            raise ValueError("refresh_every must be at least 1")

    @classmethod
    def from_config(cls, cfg):
        return cls(iterations=cfg['iterations'], lr_position=cfg['lr_position'],
                   lr_position_final=cfg['lr_position_final'], lr_opacity=cfg['lr_opacity'],
                   lr_radii=cfg['lr_radii'], lr_rotation=cfg['lr_rotation'], lr_appearance=cfg['lr_appearance'],
                   weights=LossWeights.from_config(cfg), loss_params=LossParams.from_config(cfg),
                   density=DensityParams.from_config(cfg), density_control=cfg['density_control'],
                   refresh_every=cfg['refresh_every'], seed=cfg['seed'], test_stride=cfg['test_stride'],
                   checkpoint_iterations=tuple(parse_int_list(cfg['checkpoint_iterations'])),
                   r_min=cfg['r_min'], log_every=cfg['log_every'])

    def position_lr(self, step):
        """Log-linear decay from `lr_position` at step 1 to `lr_position_final` at the last step."""
        t = 0.0 if self.iterations <= 1 else min((step - 1) / (self.iterations - 1), 1.0)
        return float(np.exp((1.0 - t) * np.log(self.lr_position) + t * np.log(self.lr_position_final)))


class Adam:
    """Adam over named parameter groups whose rows follow the surfel set.

    Moments are kept per group; `remap` carries them across density control
    (rows of new surfels start from zero).
    """

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.steps = {}

    def step(self, name, grad, lr):
        """Return the update for one group (to be added to the parameter)."""
        if name not in self.m or self.m[name].shape != grad.shape:
            self.m[name] = np.zeros_like(grad)
            self.v[name] = np.zeros_like(grad)
            self.steps.setdefault(name, 0)
        self.steps[name] += 1
        t = self.steps[name]
        self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
        self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
        m_hat = self.m[name] / (1.0 - self.beta1 ** t)
        v_hat = self.v[name] / (1.0 - self.beta2 ** t)
        return -lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def remap(self, origin):
        """Reorder moments to a new surfel set; ``origin[i]`` is the old row or -1."""
        origin = np.asarray(origin, dtype=np.int64)
        old = origin >= 0
        for store in (self.m, self.v):
            for name, arr in store.items():
                out = np.zeros((len(origin),) + arr.shape[1:])
                out[old] = arr[origin[old]]
                store[name] = out

    def swap_columns(self, name, rows):
        for store in (self.m, self.v):
            if name in store and len(rows):
                store[name][rows] = store[name][rows][:, ::-1]


@dataclass
class TrainLogRecord:
    iteration: int
    L_p: float
    L_sky: float
    L_d: float
    L_n: float
    L_dis: float
    L_control: float
    L_normal: float
    total: float
    count: int
    ms_per_iter: float


LOG_COLUMNS = ('iteration', 'L_p', 'L_sky', 'L_d', 'L_n', 'L_dis', 'L_control', 'L_normal', 'total', 'count',
               'ms_per_iter')


def write_log_csv(records, file_path):
    with open(file_path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for rec in records:
            row = asdict(rec)
            writer.writerow([row[c] if isinstance(row[c], int) else f'{row[c]:.9g}' for c in LOG_COLUMNS])


@dataclass
class TrainResult:
    surfels: object
    log: List[TrainLogRecord]
    initial_metrics: Dict[str, float]
    density_reports: List[Tuple[int, DensityReport]]
    seconds: float


def _logit(o):
    o = np.clip(o, _LOGIT_EPS, 1.0 - _LOGIT_EPS)
    return np.log(o / (1.0 - o))


def _rotation_gradient(surfels, grads):
    return np.cross(surfels.tangent_u, grads.tangent_u) + np.cross(surfels.tangent_v, grads.tangent_v)


def _apply_step(surfels, grads, optimizer, cfg, iteration):
    """One Adam step in the optimization parameterization, then restore surfel invariants."""
    o = surfels.opacity
    surfels.positions = surfels.positions + optimizer.step('positions', grads.positions, cfg.position_lr(iteration))

    g_logit = grads.opacity * o * (1.0 - o)
    surfels.opacity = 1.0 / (1.0 + np.exp(-(_logit(o) + optimizer.step('opacity', g_logit, cfg.lr_opacity))))

    g_log_r = grads.radii * surfels.radii
    surfels.radii = np.exp(np.log(surfels.radii) + optimizer.step('radii', g_log_r, cfg.lr_radii))

    omega = optimizer.step('rotation', _rotation_gradient(surfels, grads), cfg.lr_rotation)
    frames = np.stack([surfels.tangent_u, surfels.tangent_v, surfels.normals], axis=2)
    if len(frames):
        rotated = (Rotation.from_rotvec(omega) * Rotation.from_matrix(frames)).as_matrix()
        surfels.tangent_u, surfels.tangent_v = rotated[:, :, 0].copy(), rotated[:, :, 1].copy()

    sh = surfels.sh.copy()
    sh[:, :1] += optimizer.step('sh_dc', grads.sh[:, :1], cfg.lr_appearance)
    if sh.shape[1] > 1:
        sh[:, 1:] += optimizer.step('sh_rest', grads.sh[:, 1:], cfg.lr_appearance / 20.0)
    surfels.sh = sh

    surfels.radii = np.maximum(surfels.radii, cfg.r_min)
    swap = np.nonzero(surfels.radii[:, 1] > surfels.radii[:, 0])[0]
    if len(swap):
        surfels.radii[swap] = surfels.radii[swap][:, ::-1]
        tu = surfels.tangent_u[swap].copy()
        surfels.tangent_u[swap] = surfels.tangent_v[swap]
        surfels.tangent_v[swap] = -tu
        optimizer.swap_columns('radii', swap)


def _gmm_query(gmm_map, surfels, params):
    if gmm_map is None:
        return None
    return query_neighbors(gmm_map, surfels.positions, params.K, params.sigma, params.max_rings)


def _center_distances(gmm_map, surfels, params):
    if gmm_map is None or len(gmm_map) == 0:
        return np.full(len(surfels), np.inf)
    query = _gmm_query(gmm_map, surfels, params)
    return weighted_distances(gmm_map, query, surfels.positions)


def view_losses(surfels, view, gmm_map=None, query=None, cfg=None, want_grad=True):
    """Total loss of one view, its breakdowns and (optionally) gradients.

    Returns ``(total, image_losses, gmm_breakdown, grads, buffers)``.
    """
    cfg = cfg or TrainConfig()
    buffers = render(surfels, view.camera)
    lidar = view.lidar
    img, adj = image_losses_and_adjoints(buffers, view.image, view.sky_mask,
                                         lidar.depth if lidar else None, lidar.normal if lidar else None,
                                         lidar.mask if lidar else None, cfg.weights)
    grads = render_gradients(surfels, view.camera, buffers, adj, accumulate=want_grad) if want_grad else None
    gmm = GmmLossBreakdown()
    if gmm_map is not None and query is not None and cfg.weights.lambda_GMM > 0:
        gmm, g_gmm = gmm_losses_and_gradients(surfels, query, gmm_map, cfg.loss_params,
                                              visible=buffers.visible, project=False)
        if want_grad:
            grads.add_(g_gmm, cfg.weights.lambda_GMM)
    return total_loss(img, gmm, cfg.weights), img, gmm, grads, buffers


def train(surfels, views, gmm_map=None, cfg=None, checkpoint_dir=None):
    """Optimize `surfels` against the training `views`.

    Parameters
    ----------
    surfels : SurfelSet
        Initial set; not modified.
    views : list of TrainView
        Training views only.
    gmm_map : GmmMap, optional
        Frozen map for geometric supervision and density scoring; without it
        the GMM loss is skipped and every surfel counts as off-surface.
    cfg : TrainConfig, optional
    checkpoint_dir : str or Path, optional
        Where ``surfels_NNNNNN.ply`` checkpoints go.

    Returns
    -------
    TrainResult

    Raises
    ------
    TrainingAborted
        On a non-finite loss; the surfels of the last good iteration are
        checkpointed first when `checkpoint_dir` is set.
    """
    cfg = cfg or TrainConfig()
    if not views:
        raise EmptyInputError("no training views")
    surfels = surfels.copy()
    surfels.grad_accum = np.zeros(len(surfels))
    surfels.grad_count = np.zeros(len(surfels))
    view_seq, density_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    view_rng, density_rng = np.random.default_rng(view_seq), np.random.default_rng(density_seq)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    initial = evaluate_views(surfels, views)
    logger.info("iteration 0: %d surfels, PSNR %.2f dB, L1 %.4f", len(surfels), initial['psnr'], initial['l1'])
    optimizer = Adam()
    query = _gmm_query(gmm_map, surfels, cfg.loss_params)
    order = []
    log, reports = [], []
    start = time.perf_counter()

    for iteration in range(1, cfg.iterations + 1):
        tic = time.perf_counter()
        if not order:
            order = list(view_rng.permutation(len(views)))
        view = views[order.pop(0)]
        if gmm_map is not None and iteration > 1 and (iteration - 1) % cfg.refresh_every == 0:
            query = _gmm_query(gmm_map, surfels, cfg.loss_params)

        total, img, gmm, grads, _ = view_losses(surfels, view, gmm_map, query, cfg)
        if not np.isfinite(total):
            path = None
            if checkpoint_dir is not None:
                path = checkpoint_dir / f'surfels_{iteration - 1:06d}.ply'
                save_surfels(surfels, path, iteration - 1)
            raise TrainingAborted(f"non-finite loss at iteration {iteration}", iteration, path)
        _apply_step(surfels, grads, optimizer, cfg, iteration)

        if cfg.density_control and cfg.density.scheduled(iteration):
            distances = _center_distances(gmm_map, surfels, cfg.loss_params)
            surfels, report, origin = apply_density_control(surfels, distances, cfg.density, density_rng, cfg.r_min)
            optimizer.remap(origin)
            query = _gmm_query(gmm_map, surfels, cfg.loss_params)
            reports.append((iteration, report))
            logger.info("iteration %d: density control grew %d, split %d, pruned %d -> %d surfels",
                        iteration, report.grown, report.split, report.pruned, report.after)

        ms = 1000.0 * (time.perf_counter() - tic)
        log.append(TrainLogRecord(iteration, img.L_p, img.L_sky, img.L_d, img.L_n, gmm.L_dis, gmm.L_control,
                                  gmm.L_normal, float(total), len(surfels), ms))
        if iteration % cfg.log_every == 0 or iteration == cfg.iterations:
            logger.info("iteration %d: loss %.6f (L_p %.5f, L_GMM %.5f), %d surfels, %.1f ms/iter",
                        iteration, total, img.L_p, gmm.L_GMM, len(surfels), ms)
        else:
            logger.debug("iteration %d: loss %.6f", iteration, total)
        if checkpoint_dir is not None and iteration in cfg.checkpoint_iterations:
            save_surfels(surfels, checkpoint_dir / f'surfels_{iteration:06d}.ply', iteration)

    surfels.check_invariants(tol=1e-6, r_min=cfg.r_min)
    return TrainResult(surfels, log, initial, reports, time.perf_counter() - start)


def psnr(rendered, target, mask=None):
    """PSNR in dB over masked pixels of [0, 1] images, capped at 99."""
    diff = np.clip(rendered, 0.0, 1.0) - np.asarray(target, dtype=np.float64)[:, :, :3]
    if mask is not None:
        diff = diff[np.asarray(mask, dtype=bool)]
    mse = float(np.mean(diff ** 2)) if diff.size else 0.0
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def evaluate_views(surfels, views):
    """Mean PSNR, SSIM and L1 over non-sky pixels of `views`.

    Raises
    ------
    EmptyInputError
        If there is no view or no view has a non-sky pixel.
    """
    if not views:
        raise EmptyInputError("cannot evaluate an empty view split")
    scores = []
    for view in views:
        keep = np.asarray(view.sky_mask, dtype=bool)
        count = int(keep.sum())
        if count == 0:
            continue
        color = np.clip(render(surfels, view.camera).color, 0.0, 1.0)
        target = np.asarray(view.image, dtype=np.float64)[:, :, :3]
        m3 = np.repeat(keep[:, :, None], 3, axis=2).astype(np.float64)
        s = ssim(color * m3, target * m3, m3 / (3 * count))
        l1 = float(np.mean(np.abs(color - target)[keep]))
        scores.append((psnr(color, target, keep), s, l1))
    if not scores:
        raise EmptyInputError("no non-sky pixels in the evaluated views")
    arr = np.array(scores)
    return {'psnr': float(arr[:, 0].mean()), 'ssim': float(arr[:, 1].mean()), 'l1': float(arr[:, 2].mean()),
            'views': len(scores)}
