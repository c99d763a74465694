"""Oriented samples for screened Poisson meshing, their filtering and geometric metrics."""
import csv
import json
import logging
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from plyfile import PlyData
from scipy.spatial import cKDTree

from .errors import EmptyInputError, PlySchemaError
from .gmm_model import voxel_keys
from .pointcloud_io import write_vertex_ply
from .renderer import render
from .supervision import LossParams, query_neighbors, weighted_distances

logger = logging.getLogger(__name__)

FILTER_MODES = ('none', 'coarse', 'coarse_to_fine')


@dataclass
class OrientedSamples:
    positions: np.ndarray
    normals: np.ndarray
    view: np.ndarray = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.view is None:
            self.view = np.full(len(self.positions), -1, dtype=np.int64)
        self.view = np.asarray(self.view, dtype=np.int64).reshape(-1)

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    def select(self, index):
        return OrientedSamples(self.positions[index], self.normals[index], self.view[index])

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(np.concatenate([p.positions for p in parts]), np.concatenate([p.normals for p in parts]),
                   np.concatenate([p.view for p in parts]))


def sample_oriented_points(surfels, cameras, silhouette_threshold=0.5):
    """Unproject the rendered depth of every pixel whose silhouette exceeds the threshold.

    Normals are the rendered normals rotated to world and normalized; pixels
    with a vanishing blended normal are skipped.
    """
    parts = []
    for view_id, cam in enumerate(cameras):
        buffers = render(surfels, cam)
        mask = (buffers.silhouette > silhouette_threshold).ravel()
        normals = (buffers.normal.reshape(-1, 3) @ cam.rotation)[mask]
        length = np.linalg.norm(normals, axis=1)
        ok = length > 1e-12
        pixels = cam.pixel_grid()[mask][ok]
        points = cam.unproject(pixels, buffers.depth.ravel()[mask][ok])
        parts.append(OrientedSamples(points, normals[ok] / length[ok, None], np.full(len(points), view_id)))
        logger.debug("view %d: %d oriented samples", view_id, len(points))
    samples = OrientedSamples.concat(parts)
    logger.info("sampled %d oriented points from %d views", len(samples), len(cameras))
    return samples


_NEIGHBOURS = np.array(list(product((-1, 0, 1), repeat=3)), dtype=np.int64)


@dataclass
class OccupancyMap:
    voxel_size: float
    keys: set = field(default_factory=set)

    def __len__(self):
        return len(self.keys)

    def contains(self, points):
        """Boolean mask of points whose voxel is occupied."""
        k = voxel_keys(np.asarray(points, dtype=np.float64).reshape(-1, 3), self.voxel_size)
        return np.fromiter((tuple(row) in self.keys for row in k.tolist()), dtype=bool, count=len(k))


def build_occupancy(points, voxel_size, min_points=3, dilate=True):
    """Voxels holding at least `min_points` LiDAR points, grown by one voxel when `dilate`."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    occ = OccupancyMap(voxel_size)
    if len(points) == 0:
        return occ
    keys, counts = np.unique(voxel_keys(points, voxel_size), axis=0, return_counts=True)
    core = keys[counts >= min_points]
    if dilate and len(core):
        core = np.unique((core[:, None, :] + _NEIGHBOURS[None]).reshape(-1, 3), axis=0)
    occ.keys = {tuple(k) for k in core.tolist()}
    return occ


@dataclass
class FilterReport:
    mode: str
    input: int = 0
    coarse_removed: int = 0
    fine_removed: int = 0
    kept: int = 0

    def as_dict(self):
        return {'mode': self.mode, 'input': self.input, 'coarse_removed': self.coarse_removed,
                'fine_removed': self.fine_removed, 'kept': self.kept}


def filter_samples(samples, occupancy=None, gmm_map=None, fine_threshold=0.05, mode='coarse_to_fine',
                   params=None):
    """Coarse occupancy pass, then fine pass on the weighted distance to the GMM.

    The fine distance blends point-to-plane distances of the sample's K
    nearest components with normalized kernel weights anchored at the
    sample; samples with no component in reach are removed.

    Returns
    -------
    kept : OrientedSamples
    report : FilterReport
    """
    if mode not in FILTER_MODES:
        raise ValueError(f"unknown filter mode '{mode}', expected one of {FILTER_MODES}")
    report = FilterReport(mode, input=len(samples))
    keep = np.ones(len(samples), dtype=bool)
    if mode in ('coarse', 'coarse_to_fine') and len(samples):
        if occupancy is None:
            raise ValueError("coarse filtering needs an occupancy map")
        keep = occupancy.contains(samples.positions)
        report.coarse_removed = int((~keep).sum())
    if mode == 'coarse_to_fine' and keep.any():
        if gmm_map is None:
            raise ValueError("fine filtering needs a GMM map")
        params = params or LossParams()
        rows = np.nonzero(keep)[0]
        probes = samples.positions[rows]
        query = query_neighbors(gmm_map, probes, params.K, params.sigma, params.max_rings)
        d = weighted_distances(gmm_map, query, probes, normalize=True)
        far = ~(d <= fine_threshold)
        keep[rows[far]] = False
        report.fine_removed = int(far.sum())
    report.kept = int(keep.sum())
    logger.info("filter (%s): %d samples, %d removed coarse, %d removed fine, %d kept", mode, report.input,
                report.coarse_removed, report.fine_removed, report.kept)
    return samples.select(np.nonzero(keep)[0]), report


_ORIENTED_NAMES = ('x', 'y', 'z', 'nx', 'ny', 'nz')


def export_poisson_input(samples, file_path):
    """Binary little-endian PLY with ``x y z nx ny nz`` (and the source view)."""
    if len(samples) == 0:
        raise EmptyInputError("refusing to export an empty sample set")
    vertex = np.empty(len(samples), dtype=[(n, '<f8') for n in _ORIENTED_NAMES] + [('view', '<i4')])
    columns = np.column_stack([samples.positions, samples.normals])
    for j, name in enumerate(_ORIENTED_NAMES):
        vertex[name] = columns[:, j]
    vertex['view'] = samples.view
    write_vertex_ply(vertex, file_path)
    logger.info("wrote %d oriented samples to %s", len(samples), file_path)


def load_oriented_ply(file_path):
    data = PlyData.read(str(file_path))['vertex'].data
    missing = [n for n in _ORIENTED_NAMES if n not in data.dtype.names]
    if missing:
        raise PlySchemaError(f"{file_path}: missing properties {missing}")
    cols = np.column_stack([data[n] for n in _ORIENTED_NAMES]).astype(np.float64) if len(data) else \
        np.zeros((0, 6))
    view = np.asarray(data['view']) if 'view' in data.dtype.names else None
    return OrientedSamples(cols[:, :3], cols[:, 3:], view)


@dataclass
class MeshMetrics:
    """Distances in meters, ratios in [0, 1]."""
    accuracy: float
    completeness: float
    chamfer_l1: float
    precision: float
    recall: float
    f1: float
    threshold: float

    def report(self):
        """The metrics as reported: distances in cm, ratios in percent."""
        return {'accuracy_cm': 100.0 * self.accuracy, 'completeness_cm': 100.0 * self.completeness,
                'chamfer_l1_cm': 100.0 * self.chamfer_l1, 'precision': 100.0 * self.precision,
                'recall': 100.0 * self.recall, 'f1': 100.0 * self.f1, 'threshold_cm': 100.0 * self.threshold}


def eval_mesh_metrics(result, reference, threshold=0.2):
    """Accuracy, completeness, Chamfer-L1 and F-score between two point sets.

    Parameters
    ----------
    result, reference : array_like, shape (N, 3)
        Reconstructed points (or mesh vertices) and ground-truth points.
    threshold : float
        A point counts as matched when its nearest neighbour is strictly
        closer than this (meters).
    """
    result = np.asarray(result, dtype=np.float64).reshape(-1, 3)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if len(result) == 0 or len(reference) == 0:
        raise EmptyInputError("mesh metrics need two non-empty point sets")
    to_ref, _ = cKDTree(reference).query(result)
    to_res, _ = cKDTree(result).query(reference)
    precision = float(np.mean(to_ref < threshold))
    recall = float(np.mean(to_res < threshold))
    f1 = 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)
    acc, comp = float(np.mean(to_ref)), float(np.mean(to_res))
    return MeshMetrics(acc, comp, 0.5 * (acc + comp), precision, recall, f1, threshold)


def write_metrics(metrics, json_path=None, csv_path=None):
    """Write a flat metrics dict as JSON and/or a one-row CSV with sorted columns."""
    row = dict(metrics)
    if json_path is not None:
        with open(json_path, 'w') as fh:
            json.dump(row, fh, indent=2, sort_keys=True)
            fh.write('\n')
    if csv_path is not None:
        names = sorted(row)
        with open(csv_path, 'w', newline='') as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            writer.writerow([f'{row[n]:.6f}' if isinstance(row[n], float) else row[n] for n in names])
