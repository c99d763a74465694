"""Analytic test scenes built from axis-aligned textured rectangles.

A scene yields a LiDAR-like cloud, a ring of pinhole cameras, ray-traced
ground-truth images with sky masks, and a dense noise-free reference
sample of the surfaces. Images are traced against the analytic planes, not
through the surfel renderer.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .pointcloud_io import CameraModel, PointCloud, save_cameras, save_image, save_mask, save_ply, \
    write_vertex_ply
from .renderer import render
from .surfel import SurfelSet, rgb_to_sh, sh_coeff_count

logger = logging.getLogger(__name__)

SCENE_KINDS = ('room', 'corner', 'street')


@dataclass
class Plane:
    """Rectangle ``x[axis] = offset`` spanning `lo`..`hi` on the other two axes (ascending order)."""
    axis: int
    offset: float
    lo: Tuple[float, float]
    hi: Tuple[float, float]
    period: float = 0.5
    level1: Tuple[float, float, float] = (0.25, 0.25, 0.25)
    level2: Tuple[float, float, float] = (0.75, 0.75, 0.75)
    name: str = ''

    @property
    def tangent_axes(self):
        return tuple(a for a in range(3) if a != self.axis)

    @property
    def area(self):
        return float((self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1]))

    @property
    def normal(self):
        n = np.zeros(3)
        n[self.axis] = 1.0
        return n

    def texture(self, points):
        """Checker color at points lying on the plane."""
        a, b = self.tangent_axes
        cell = (np.floor(points[:, a] / self.period) + np.floor(points[:, b] / self.period)).astype(np.int64)
        return np.where((cell % 2 == 0)[:, None], np.array(self.level1), np.array(self.level2))

    def embed(self, uv):
        """Map (M, 2) in-plane coordinates to world points."""
        a, b = self.tangent_axes
        pts = np.empty((len(uv), 3))
        pts[:, self.axis] = self.offset
        pts[:, a], pts[:, b] = uv[:, 0], uv[:, 1]
        return pts


@dataclass
class SceneSpec:
    planes: List[Plane]
    camera_count: int = 8
    ring_center: Tuple[float, float, float] = (0.0, 0.0, 1.5)
    ring_radius: float = 0.5
    look: str = 'outward'
    look_at: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    pitch: float = -0.15
    width: int = 192
    height: int = 192
    fov_degrees: float = 70.0
    density: float = 400.0
    noise: float = 0.0
    reference_spacing: float = 0.025
    seed: int = 0

    def __post_init__(self):
        if self.density <= 0 or self.reference_spacing <= 0:
            raise ValueError("sampling densities must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.look not in ('outward', 'inward'):
            raise ValueError("look must be 'outward' or 'inward'")


_GRAY = ((0.2, 0.2, 0.2), (0.7, 0.7, 0.7))
_ACCENT = ((0.7, 0.25, 0.2), (0.9, 0.8, 0.55))


def room_spec(size=4.0, **kw):
    """Closed box room ``[0, size]^2 x [0, 0.75 size]`` seen by an outward-looking ring."""
    h = 0.75 * size
    planes = [Plane(2, 0.0, (0, 0), (size, size), 0.5, (0.3, 0.3, 0.3), (0.6, 0.6, 0.6), 'floor'),
              Plane(2, h, (0, 0), (size, size), 0.8, (0.8, 0.8, 0.8), (0.9, 0.9, 0.9), 'ceiling'),
              Plane(0, 0.0, (0, 0), (size, h), 0.4, *_ACCENT, 'wall_x0'),
              Plane(0, size, (0, 0), (size, h), 0.4, *_GRAY, 'wall_x1'),
              Plane(1, 0.0, (0, 0), (size, h), 0.5, *_GRAY, 'wall_y0'),
              Plane(1, size, (0, 0), (size, h), 0.6, (0.15, 0.15, 0.15), (0.55, 0.55, 0.55), 'wall_y1')]
    kw.setdefault('ring_center', (size / 2, size / 2, h / 2))
    kw.setdefault('ring_radius', 0.2 * size)
    return SceneSpec(planes, look='outward', **kw)


def corner_spec(size=4.0, **kw):
    """Floor and two walls meeting at the origin; open to the sky."""
    h = 0.75 * size
    planes = [Plane(2, 0.0, (0, 0), (size, size), 0.5, (0.3, 0.3, 0.3), (0.6, 0.6, 0.6), 'floor'),
              Plane(0, 0.0, (0, 0), (size, h), 0.4, *_ACCENT, 'wall_x0'),
              Plane(1, 0.0, (0, 0), (size, h), 0.5, *_GRAY, 'wall_y0')]
    kw.setdefault('ring_center', (0.6 * size, 0.6 * size, 0.4 * h))
    kw.setdefault('ring_radius', 0.15 * size)
    kw.setdefault('look_at', (0.2 * size, 0.2 * size, 0.3 * h))
    return SceneSpec(planes, look='inward', **kw)


def street_spec(size=4.0, **kw):
    """Street canyon: ground, two facades and an end wall, sky above."""
    h = 0.75 * size
    w = size / 2
    planes = [Plane(2, 0.0, (-size, -w), (size, w), 0.5, (0.25, 0.25, 0.25), (0.45, 0.45, 0.45), 'ground'),
              Plane(1, -w, (-size, 0), (size, h), 0.6, *_GRAY, 'facade_left'),
              Plane(1, w, (-size, 0), (size, h), 0.4, *_ACCENT, 'facade_right'),
              Plane(0, size, (-w, 0), (w, h), 0.5, (0.1, 0.1, 0.1), (0.8, 0.8, 0.8), 'end_wall')]
    kw.setdefault('ring_center', (0.0, 0.0, 1.5))
    kw.setdefault('ring_radius', 0.2 * size)
    return SceneSpec(planes, look='outward', **kw)


_BUILDERS = {'room': room_spec, 'corner': corner_spec, 'street': street_spec}


def scene_spec(kind='room', size=4.0, **kw):
    if kind not in _BUILDERS:
        raise ValueError(f"unknown scene kind '{kind}', expected one of {SCENE_KINDS}")
    return _BUILDERS[kind](size, **kw)


def spec_from_config(cfg):
    return scene_spec(cfg['scene_kind'], cfg['scene_size'], camera_count=cfg['scene_cameras'],
                      width=cfg['image_width'], height=cfg['image_height'], fov_degrees=cfg['fov_degrees'],
                      density=cfg['scene_density'], noise=cfg['scene_noise'], seed=cfg['seed'])


def look_at_camera(center, target, width, height, fov_degrees, name=''):
    """Pinhole camera at `center` looking at `target` with world +z up (image y points down)."""
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, [0.0, 0.0, 1.0])
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    f = 0.5 * width / np.tan(np.radians(fov_degrees) / 2.0)
    return CameraModel.from_rotation(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height,
                                     rot, -rot @ center, name)


def camera_ring(spec):
    cams = []
    c = np.asarray(spec.ring_center, dtype=np.float64)
    for i in range(spec.camera_count):
        theta = 2.0 * np.pi * i / spec.camera_count
        radial = np.array([np.cos(theta), np.sin(theta), 0.0])
        pos = c + spec.ring_radius * radial
        if spec.look == 'outward':
            target = pos + radial + np.array([0.0, 0.0, spec.pitch])
        else:
            target = np.asarray(spec.look_at, dtype=np.float64)
        cams.append(look_at_camera(pos, target, spec.width, spec.height, spec.fov_degrees, f'{i:04d}.png'))
    return cams


@dataclass
class TracedView:
    image: np.ndarray
    sky_mask: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    plane: np.ndarray


def trace_view(planes, camera):
    """Analytic ray casting; `sky_mask` is True where a ray hits geometry.

    Depth is camera-frame z and normals are camera-frame, facing the camera.
    """
    h, w = camera.height, camera.width
    dirs_c = camera.ray_directions(camera.pixel_grid())
    dirs = dirs_c @ camera.rotation
    origin = camera.center
    best = np.full(len(dirs), np.inf)
    which = np.full(len(dirs), -1, dtype=np.int64)
    for k, plane in enumerate(planes):
        da = dirs[:, plane.axis]
        ok = np.abs(da) > 1e-12
        t = np.zeros(len(dirs))
        t[ok] = (plane.offset - origin[plane.axis]) / da[ok]
        hit = origin + t[:, None] * dirs
        a, b = plane.tangent_axes
        inside = ok & (t > 1e-9) & (hit[:, a] >= plane.lo[0]) & (hit[:, a] <= plane.hi[0]) \
            & (hit[:, b] >= plane.lo[1]) & (hit[:, b] <= plane.hi[1])
        closer = inside & (t < best)
        best[closer] = t[closer]
        which[closer] = k
    image = np.zeros((len(dirs), 3))
    normal = np.zeros((len(dirs), 3))
    for k, plane in enumerate(planes):
        sel = which == k
        if not sel.any():
            continue
        image[sel] = plane.texture(origin + best[sel, None] * dirs[sel])
        n = camera.rotation @ plane.normal
        normal[sel] = np.where((dirs_c[sel] @ n < 0)[:, None], n, -n)
    sky = which >= 0
    depth = np.where(sky, best, 0.0)
    return TracedView(image.reshape(h, w, 3), sky.reshape(h, w), depth.reshape(h, w),
                      normal.reshape(h, w, 3), which.reshape(h, w))


def trace_images(spec, cameras, threads=1):
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(lambda cam: trace_view(spec.planes, cam), cameras))


def sample_cloud(spec, rng):
    """Uniform area sampling with isotropic Gaussian noise; colors from the noise-free points."""
    positions, colors = [], []
    for plane in spec.planes:
        n = int(round(spec.density * plane.area))
        uv = rng.uniform(plane.lo, plane.hi, size=(n, 2))
        pts = plane.embed(uv)
        colors.append(plane.texture(pts))
        positions.append(pts + rng.normal(0.0, spec.noise, size=pts.shape) if spec.noise > 0 else pts)
    return PointCloud(np.concatenate(positions), np.concatenate(colors))


def reference_points(spec):
    """Dense regular grid on every plane, cell centers at `reference_spacing`."""
    parts = []
    step = spec.reference_spacing
    for plane in spec.planes:
        ua = np.arange(plane.lo[0] + step / 2, plane.hi[0], step)
        ub = np.arange(plane.lo[1] + step / 2, plane.hi[1], step)
        grid = np.stack(np.meshgrid(ua, ub, indexing='ij'), axis=-1).reshape(-1, 2)
        parts.append(plane.embed(grid))
    return np.concatenate(parts)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    cloud: PointCloud
    cameras: list
    views: List[TracedView] = field(default_factory=list)
    reference: np.ndarray = None

    @property
    def images(self):
        return [v.image for v in self.views]

    @property
    def sky_masks(self):
        return [v.sky_mask for v in self.views]


def generate(spec, threads=1):
    """Cloud, cameras, traced views and reference samples of `spec`; deterministic per ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    cloud = sample_cloud(spec, rng)
    cameras = camera_ring(spec)
    views = trace_images(spec, cameras, threads)
    reference = reference_points(spec)
    logger.info("generated scene: %d planes, %d LiDAR points, %d cameras, %d reference points",
                len(spec.planes), len(cloud), len(cameras), len(reference))
    return SyntheticScene(spec, cloud, cameras, views, reference)


def write_scene(scene, workdir, encoding='binary'):
    """Write the scene in the pipeline's on-disk layout under `workdir`."""
    workdir = Path(workdir)
    (workdir / 'images').mkdir(parents=True, exist_ok=True)
    (workdir / 'sky').mkdir(parents=True, exist_ok=True)
    save_ply(scene.cloud, workdir / 'cloud.ply', encoding)
    save_cameras(scene.cameras, workdir / 'cameras.txt', workdir / 'intrinsics.txt')
    for i, view in enumerate(scene.views):
        save_image(workdir / 'images' / f'{i:04d}.png', view.image)
        save_mask(workdir / 'sky' / f'{i:04d}.png', view.sky_mask)
    ref = np.empty(len(scene.reference), dtype=[('x', '<f8'), ('y', '<f8'), ('z', '<f8')])
    ref['x'], ref['y'], ref['z'] = scene.reference.T
    write_vertex_ply(ref, workdir / 'reference.ply')
    logger.info("wrote scene to %s", workdir)


def surfels_from_planes(planes, scale=1000.0, sh_degree=0):
    """One opaque surfel per uniformly colored plane, far larger than the plane.

    Renders of these surfels match `trace_view` wherever the nearest plane
    hit is also the nearest surfel hit (closed scenes).
    """
    n = len(planes)
    tu, tv = np.zeros((n, 3)), np.zeros((n, 3))
    centers = np.zeros((n, 3))
    for i, plane in enumerate(planes):
        a, b = plane.tangent_axes
        tu[i, a] = 1.0
        tv[i] = np.cross(plane.normal, tu[i])
        mid = np.array([(plane.lo[0] + plane.hi[0]) / 2, (plane.lo[1] + plane.hi[1]) / 2])
        centers[i] = plane.embed(mid[None])[0]
    extent = max(max(p.hi[0] - p.lo[0], p.hi[1] - p.lo[1]) for p in planes)
    sh = np.zeros((n, sh_coeff_count(sh_degree), 3))
    sh[:, 0] = rgb_to_sh(np.array([p.level1 for p in planes]))
    return SurfelSet(centers, tu, tv, np.full((n, 2), scale * extent), np.ones(n), sh)


def mean_normal_residual(surfels, cameras, views):
    """Mean angle (radians) between rendered and traced normals over covered, non-sky pixels."""
    angles = []
    for cam, view in zip(cameras, views):
        buffers = render(surfels, cam)
        ok = view.sky_mask & (buffers.silhouette > 0.5)
        if not ok.any():
            continue
        rendered = buffers.normal[ok]
        rendered = rendered / np.maximum(np.linalg.norm(rendered, axis=1, keepdims=True), 1e-12)
        cos = np.clip(np.sum(rendered * view.normal[ok], axis=1), -1.0, 1.0)
        angles.append(np.arccos(cos))
    if not angles:
        return float('nan')
    return float(np.mean(np.concatenate(angles)))
