"""Geometry-aware growing and pruning of the surfel set."""
import logging
from dataclasses import dataclass

import numpy as np

from .surfel import R_MIN

logger = logging.getLogger(__name__)

SPLIT_DIVISOR = 1.6


@dataclass
class DensityParams:
    omega_growth: float = 0.4
    omega_scale: float = 0.0002
    omega_pruning: float = 0.003
    tau: float = 0.01
    growth_threshold: float = 0.0002
    prune_threshold: float = 0.005
    split_size_threshold: float = 0.05
    interval: int = 100
    start_iter: int = 500
    stop_iter: int = 15000

    def __post_init__(self):
        if not 0.0 <= self.omega_growth <= 1.0:
            raise ValueError("omega_growth must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.interval < 1:
            raise ValueError("interval must be at least 1")

    @classmethod
    def from_config(cls, cfg):
        """Build from a flat config; ``geometry_aware_density = False`` zeroes both geometry weights."""
        geometric = cfg['geometry_aware_density']
        return cls(omega_growth=cfg['omega_growth'] if geometric else 0.0,
                   omega_scale=cfg['omega_scale'],
                   omega_pruning=cfg['omega_pruning'] if geometric else 0.0,
                   tau=cfg['tau'],
                   growth_threshold=cfg['growth_threshold'],
                   prune_threshold=cfg['prune_threshold'],
                   split_size_threshold=cfg['split_size_threshold'],
                   interval=cfg['densify_interval'],
                   start_iter=cfg['densify_start'],
                   stop_iter=cfg['densify_stop'])

    def scheduled(self, iteration):
        """True when density control runs after `iteration` (1-based)."""
        return self.start_iter <= iteration <= self.stop_iter and iteration % self.interval == 0


def _closeness(d, tau):
    d = np.asarray(d, dtype=np.float64)
    with np.errstate(over='ignore', invalid='ignore'):
        return np.where(np.isfinite(d), np.exp(-d * d / (2.0 * tau * tau)), 0.0)


def growth_score(grad, d, params=None):
    """``(1 - w_g) grad + w_g w_s exp(-d^2 / 2 tau^2)``; works on scalars and arrays."""
    params = params or DensityParams()
    w = params.omega_growth
    out = (1.0 - w) * np.asarray(grad, dtype=np.float64) + w * params.omega_scale * _closeness(d, params.tau)
    return float(out) if out.ndim == 0 else out


def prune_score(opacity, d, params=None):
    """``o - w_p (1 - exp(-d^2 / 2 tau^2))``; a surfel on the surface scores its opacity."""
    params = params or DensityParams()
    out = np.asarray(opacity, dtype=np.float64) - params.omega_pruning * (1.0 - _closeness(d, params.tau))
    return float(out) if out.ndim == 0 else out


def mean_gradients(surfels):
    """Accumulated screen-space gradient norm averaged over contributing views."""
    return np.where(surfels.grad_count > 0, surfels.grad_accum / np.maximum(surfels.grad_count, 1), 0.0)


@dataclass
class DensityReport:
    grown: int = 0
    split: int = 0
    pruned: int = 0
    before: int = 0
    after: int = 0

    def as_dict(self):
        return {'grown': self.grown, 'split': self.split, 'pruned': self.pruned,
                'before': self.before, 'after': self.after}


def apply_density_control(surfels, distances, params=None, rng=None, r_min=R_MIN):
    """Clone, split and prune surfels from their growth and prune scores.

    Parameters
    ----------
    surfels : SurfelSet
        Its gradient accumulators drive the growth score.
    distances : ndarray
        Weighted GMM distance at each center, ``inf`` where no component is
        near.
    params : DensityParams, optional
    rng : numpy.random.Generator, optional
        Draws the split offsets; a fresh ``default_rng(0)`` when omitted.

    Returns
    -------
    new_set : SurfelSet
        Survivors in their original order, then clones, then split children,
        with reset accumulators.
    report : DensityReport
    origin : ndarray of int
        Index of each new surfel in the old set, -1 for newly created ones.

    Notes
    -----
    Pruning is decided first and pruned surfels never grow. Growing
    surfels smaller than ``split_size_threshold`` are cloned, larger ones
    are replaced by two children sampled from their own Gaussian with radii
    divided by 1.6, so ``after = before + grown + split - pruned``.
    """
    params = params or DensityParams()
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(surfels)
    distances = np.asarray(distances, dtype=np.float64).reshape(n)
    grow = growth_score(mean_gradients(surfels), distances, params) > params.growth_threshold
    prune = prune_score(surfels.opacity, distances, params) < params.prune_threshold
    grow &= ~prune
    large = surfels.radii.max(axis=1) >= params.split_size_threshold if n else np.zeros(0, dtype=bool)
    clone_idx = np.nonzero(grow & ~large)[0]
    split_idx = np.nonzero(grow & large)[0]

    keep = ~prune
    keep[split_idx] = False
    keep_idx = np.nonzero(keep)[0]
    parts = [surfels.select(keep_idx), surfels.select(clone_idx)]
    if len(split_idx):
        children = surfels.select(np.repeat(split_idx, 2))
        xi = rng.standard_normal((len(children), 2))
        children.positions = (children.positions
                              + (children.radii[:, 0] * xi[:, 0])[:, None] * children.tangent_u
                              + (children.radii[:, 1] * xi[:, 1])[:, None] * children.tangent_v)
        children.radii = np.maximum(children.radii / SPLIT_DIVISOR, r_min)
        parts.append(children)
    out = parts[0]
    for part in parts[1:]:
        out = out.extend(part)
    out.grad_accum = np.zeros(len(out))
    out.grad_count = np.zeros(len(out))
    origin = np.concatenate([keep_idx, np.full(len(out) - len(keep_idx), -1, dtype=np.int64)])

    report = DensityReport(grown=len(clone_idx), split=len(split_idx), pruned=int(prune.sum()),
                           before=n, after=len(out))
    logger.debug("density control: %s", report.as_dict())
    return out, report, origin
