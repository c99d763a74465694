"""Point clouds, cameras and images on disk, plus per-image colorized frames.

Clouds are PLY files handled through ``plyfile``; cameras are whitespace
separated text files; images are 8-bit PNG read and written with Pillow.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement, PlyParseError
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .errors import CameraFormatError, EmptyInputError, PlyFormatError, PlySchemaError

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def luma(rgb):
    """Gray scale of RGB values in [0, 1]; works on a single triple or an (N, 3) array."""
    return np.asarray(rgb, dtype=np.float64) @ LUMA_WEIGHTS


@dataclass(frozen=True)
class ColorizedPoint:
    p: np.ndarray
    rgb: np.ndarray
    g: float


@dataclass
class PointCloud:
    """Structure-of-arrays storage for a list of colorized points.

    `positions` is (N, 3) in meters (world frame), `rgb` is (N, 3) in [0, 1]
    and `gray` is derived from `rgb` on construction.
    """
    positions: np.ndarray
    rgb: np.ndarray
    gray: np.ndarray = field(init=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.rgb = np.asarray(self.rgb, dtype=np.float64).reshape(-1, 3)
        if len(self.positions) != len(self.rgb):
            raise ValueError(f"{len(self.positions)} positions but {len(self.rgb)} colors")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point coordinates must be finite")
        self.gray = luma(self.rgb) if len(self.rgb) else np.zeros(0)

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    @classmethod
    def from_points(cls, points):
        points = list(points)
        if not points:
            return cls.empty()
        return cls(np.array([pt.p for pt in points]), np.array([pt.rgb for pt in points]))

    def point(self, i):
        return ColorizedPoint(self.positions[i].copy(), self.rgb[i].copy(), float(self.gray[i]))

    def subset(self, index):
        return PointCloud(self.positions[index], self.rgb[index])


def load_ply(file_path):
    """Read a colorized point cloud.

    Accepts ``red, green, blue`` as 8-bit integers or ``r, g, b`` as floats
    in [0, 1]. Vertex order is preserved.

    Raises
    ------
    PlyFormatError
        The header or body could not be parsed; the message names the line.
    PlySchemaError
        Coordinates or colors are missing.
    """
    data = _read_vertices(file_path)
    names = data.dtype.names
    if 'red' in names and 'green' in names and 'blue' in names:
        rgb = np.stack([data['red'], data['green'], data['blue']], axis=1).astype(np.float64)
        if np.issubdtype(data['red'].dtype, np.integer):
            rgb /= 255.0
    elif 'r' in names and 'g' in names and 'b' in names:
        rgb = np.stack([data['r'], data['g'], data['b']], axis=1).astype(np.float64)
    else:
        raise PlySchemaError(f"{file_path}: vertex element has no red/green/blue or r/g/b properties")
    return PointCloud(_xyz(data, file_path), rgb)


def load_xyz(file_path):
    """Vertex positions of any PLY file (point cloud or mesh) as an (N, 3) array."""
    return _xyz(_read_vertices(file_path), file_path)


def _read_vertices(file_path):
    try:
        ply = PlyData.read(str(file_path))
    except PlyParseError as e:
        line = getattr(e, 'line', None)
        where = f" header line {line}:" if line is not None else ''
        raise PlyFormatError(f"{file_path}:{where} {getattr(e, 'message', e)}") from e
    if 'vertex' not in ply:
        raise PlySchemaError(f"{file_path}: no 'vertex' element")
    return ply['vertex'].data


def _xyz(data, file_path):
    names = data.dtype.names or ()
    missing = [c for c in ('x', 'y', 'z') if c not in names]
    if missing:
        raise PlySchemaError(f"{file_path}: vertex element lacks {', '.join(missing)}")
    return np.stack([data['x'], data['y'], data['z']], axis=1).astype(np.float64)


def save_ply(points, file_path, encoding='binary', double=None):
    """Write a `PointCloud` as PLY with x, y, z, red, green, blue and gray.

    `encoding` is ``'ascii'`` or ``'binary'`` (little endian). Coordinates are
    written as ``double`` when `double` is set and as ``float`` (32 bit) when it
    is False; by default ``float`` is used only if every coordinate is exactly
    representable in 32 bits, so binary files always read back bit-exactly.
    Colors are quantized to 8 bits.
    """
    if encoding not in ('ascii', 'binary'):
        raise ValueError(f"encoding must be 'ascii' or 'binary', not '{encoding}'")
    if double is None:
        double = not np.array_equal(points.positions.astype(np.float32), points.positions)
    coord = '<f8' if double else '<f4'
    vertex = np.empty(len(points), dtype=[('x', coord), ('y', coord), ('z', coord),
                                          ('red', 'u1'), ('green', 'u1'), ('blue', 'u1'),
                                          ('gray', '<f4')])
    if len(points):
        vertex['x'], vertex['y'], vertex['z'] = points.positions.T
        rgb8 = np.clip(np.rint(points.rgb * 255.0), 0, 255).astype(np.uint8)
        vertex['red'], vertex['green'], vertex['blue'] = rgb8.T
        vertex['gray'] = points.gray
    write_vertex_ply(vertex, file_path, text=(encoding == 'ascii'))


def write_vertex_ply(vertex, file_path, text=False, comments=()):
    """Write a structured vertex array as a single-element PLY file."""
    ply = PlyData([PlyElement.describe(vertex, 'vertex')], text=text, byte_order='<',
                  comments=list(comments))
    try:
        ply.write(str(file_path))
    except OSError as e:
        raise OSError(f"cannot write PLY '{file_path}': {e}") from e


@dataclass
class CameraModel:
    """Pinhole camera with a camera-from-world pose.

    `quaternion` is stored scalar-last ``(qx, qy, qz, qw)`` as in the camera
    file. Pixel centers sit at integer coordinates with ``x`` along columns.
    """
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    quaternion: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    name: str = ''

    def __post_init__(self):
        self.quaternion = np.asarray(self.quaternion, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if abs(np.linalg.norm(self.quaternion) - 1.0) > 1e-9:
            raise ValueError(f"camera '{self.name}': quaternion is not unit length")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"camera '{self.name}': focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"camera '{self.name}': image size must be at least 1x1")
        self.width, self.height = int(self.width), int(self.height)
        self._rotation = Rotation.from_quat(self.quaternion).as_matrix()

    @classmethod
    def from_rotation(cls, fx, fy, cx, cy, width, height, rotation, translation, name=''):
        quat = Rotation.from_matrix(rotation).as_quat()
        return cls(fx, fy, cx, cy, width, height, quat / np.linalg.norm(quat), translation, name)

    @property
    def rotation(self):
        """3x3 camera-from-world rotation matrix."""
        return self._rotation

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self._rotation.T @ self.translation

    def to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self._rotation.T + self.translation

    def to_world(self, points_cam):
        return (np.asarray(points_cam, dtype=np.float64) - self.translation) @ self._rotation

    def project(self, points_cam):
        """Camera-frame points -> continuous pixel coordinates (x, y)."""
        pc = np.asarray(points_cam, dtype=np.float64)
        return np.stack([self.fx * pc[..., 0] / pc[..., 2] + self.cx,
                         self.fy * pc[..., 1] / pc[..., 2] + self.cy], axis=-1)

    def ray_directions(self, pixels):
        """Camera-frame ray directions with unit z, so the ray parameter equals depth."""
        px = np.asarray(pixels, dtype=np.float64)
        return np.stack([(px[..., 0] - self.cx) / self.fx,
                         (px[..., 1] - self.cy) / self.fy,
                         np.ones(px.shape[:-1])], axis=-1)

    def unproject(self, pixels, depth):
        """Pixels with camera-frame z depth -> world points."""
        return self.to_world(self.ray_directions(pixels) * np.asarray(depth)[..., None])

    def pixel_grid(self):
        """(H*W, 2) pixel centers in row-major order."""
        rows, cols = np.mgrid[0:self.height, 0:self.width]
        return np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64)


def load_cameras(camera_path, intrinsics_path):
    """Read ``image_name tx ty tz qx qy qz qw`` lines plus a shared intrinsics line.

    Raises `CameraFormatError` naming the file (and line) of any malformed entry.
    """
    with open(intrinsics_path, 'r') as fh:
        tokens = [ln.split() for ln in fh if ln.strip() and not ln.lstrip().startswith('#')]
    if not tokens or len(tokens[0]) != 6:
        raise CameraFormatError(f"{intrinsics_path}: expected 'fx fy cx cy width height'")
    try:
        fx, fy, cx, cy = (float(v) for v in tokens[0][:4])
        width, height = int(tokens[0][4]), int(tokens[0][5])
    except ValueError as e:
        raise CameraFormatError(f"{intrinsics_path}: {e}") from e

    cameras = []
    with open(camera_path, 'r') as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith('#'):
                continue
            if len(parts) != 8:
                raise CameraFormatError(f"{camera_path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                values = np.array([float(v) for v in parts[1:]])
                norm = np.linalg.norm(values[3:])
                if not (np.all(np.isfinite(values)) and norm > 0):
                    raise ValueError("pose must be finite with a non-zero quaternion")
                cameras.append(CameraModel(fx, fy, cx, cy, width, height, values[3:] / norm, values[:3],
                                           parts[0]))
            except ValueError as e:
                raise CameraFormatError(f"{camera_path}:{lineno}: {e}") from e
    logger.info("loaded %d cameras from %s", len(cameras), camera_path)
    return cameras


def save_cameras(cameras, camera_path, intrinsics_path):
    if not cameras:
        raise EmptyInputError("no cameras to write")
    c0 = cameras[0]
    with open(intrinsics_path, 'w') as fh:
        fh.write(f"{float(c0.fx)!r} {float(c0.fy)!r} {float(c0.cx)!r} {float(c0.cy)!r} {c0.width} {c0.height}\n")
    with open(camera_path, 'w') as fh:
        for i, cam in enumerate(cameras):
            name = cam.name or f"{i:04d}.png"
            fields = list(cam.translation) + list(cam.quaternion)
            fh.write(name + ' ' + ' '.join(repr(float(v)) for v in fields) + '\n')


def load_image(file_path):
    """8-bit PNG -> (H, W, 3) float array in [0, 1]."""
    with Image.open(file_path) as im:
        return np.asarray(im.convert('RGB'), dtype=np.float64) / 255.0


def save_image(file_path, rgb):
    arr = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(file_path)


def load_mask(file_path):
    """Gray PNG -> boolean mask, True where the stored value is at least 128."""
    with Image.open(file_path) as im:
        return np.asarray(im.convert('L')) >= 128


def save_mask(file_path, mask):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(file_path)


@dataclass
class FrameCloud:
    frame_id: int
    points: PointCloud
    camera: CameraModel
    point_indices: np.ndarray
    empty_warning: bool = False


def colorize_frames(global_cloud, cameras, images, tolerance=0.01, threads=1):
    """Project the global cloud into every image and sample colors.

    Parameters
    ----------
    global_cloud : ndarray (N, 3)
        World-frame LiDAR points.
    cameras : list of CameraModel
    images : list of ndarray (H, W, 3)
        One RGB raster in [0, 1] per camera.
    tolerance : float
        Relative depth band behind the front-most point of a pixel inside
        which points still count as visible.
    threads : int
        Worker count; frames are independent.

    Returns
    -------
    list of FrameCloud
        Points kept in each frame are in ascending global index order.
    """
    cloud = np.asarray(global_cloud, dtype=np.float64).reshape(-1, 3)
    if len(cameras) != len(images):
        raise ValueError(f"{len(cameras)} cameras but {len(images)} images")
    jobs = [(i, cam, img) for i, (cam, img) in enumerate(zip(cameras, images))]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        frames = list(pool.map(lambda job: _colorize_one(cloud, *job, tolerance), jobs))
    logger.info("colorized %d frames, %d points total", len(frames), sum(len(f.points) for f in frames))
    return frames


def _visible_pixels(cloud, camera, tolerance):
    """Indices of z-buffer-visible points with their pixel rows, cols and depths."""
    pc = camera.to_camera(cloud)
    idx = np.nonzero(pc[:, 2] > 0)[0]
    xy = camera.project(pc[idx])
    col = np.rint(xy[:, 0]).astype(np.int64)
    row = np.rint(xy[:, 1]).astype(np.int64)
    inside = (col >= 0) & (col < camera.width) & (row >= 0) & (row < camera.height)
    idx, col, row = idx[inside], col[inside], row[inside]
    z = pc[idx, 2]
    pix = row * camera.width + col
    zmin = np.full(camera.width * camera.height, np.inf)
    np.minimum.at(zmin, pix, z)
    keep = z <= zmin[pix] * (1.0 + tolerance)
    return idx[keep], row[keep], col[keep], z[keep]


def _colorize_one(cloud, frame_id, camera, image, tolerance):
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != (camera.height, camera.width):
        raise ValueError(f"frame {frame_id}: image is {image.shape[1]}x{image.shape[0]}, "
                         f"camera expects {camera.width}x{camera.height}")
    idx, row, col, _ = _visible_pixels(cloud, camera, tolerance)
    points = PointCloud(cloud[idx], image[row, col, :3])
    empty = len(idx) == 0
    if empty:
        logger.warning("frame %d (%s): no visible points", frame_id, camera.name)
    return FrameCloud(frame_id, points, camera, idx, empty_warning=empty)


class LidarImages(NamedTuple):
    depth: np.ndarray
    normal: np.ndarray
    mask: np.ndarray


def lidar_depth_normal_images(frame, k=16):
    """Depth and normal supervision rasters from a colorized frame.

    Returns
    -------
    LidarImages
        ``depth`` (H, W) camera-frame z of the nearest point per pixel, 0 where
        empty; ``normal`` (H, W, 3) unit camera-frame normals facing the camera;
        ``mask`` (H, W, 2) with channel 0 marking depth validity and channel 1
        normal validity.
    """
    if len(frame.points) == 0:
        raise EmptyInputError(f"frame {frame.frame_id} has no points")
    cam = frame.camera
    h, w = cam.height, cam.width
    positions = frame.points.positions
    pc = cam.to_camera(positions)
    xy = cam.project(pc)
    col = np.rint(xy[:, 0]).astype(np.int64)
    row = np.rint(xy[:, 1]).astype(np.int64)
    ok = (pc[:, 2] > 0) & (col >= 0) & (col < w) & (row >= 0) & (row < h)
    members = np.nonzero(ok)[0]
    pix = row[members] * w + col[members]
    # nearest point per pixel, ties to the lower index
    order = np.lexsort((members, pc[members, 2], pix))
    upix, first = np.unique(pix[order], return_index=True)
    nearest = members[order[first]]

    depth = np.zeros(h * w)
    normal = np.zeros((h * w, 3))
    mask = np.zeros((h * w, 2), dtype=bool)
    depth[upix] = pc[nearest, 2]
    mask[upix, 0] = True

    if len(positions) >= k:
        normals_w, valid = estimate_normals(positions, positions[nearest], k)
        normals_c = normals_w @ cam.rotation.T
        flip = np.einsum('ij,ij->i', normals_c, pc[nearest]) > 0
        normals_c[flip] *= -1.0
        normal[upix[valid]] = normals_c[valid]
        mask[upix[valid], 1] = True
    else:
        logger.debug("frame %d: %d points, fewer than k=%d; normals invalid",
                     frame.frame_id, len(positions), k)
    return LidarImages(depth.reshape(h, w), normal.reshape(h, w, 3), mask.reshape(h, w, 2))


def estimate_normals(cloud, queries, k=16):
    """PCA normals at `queries` from their `k` nearest neighbours in `cloud`.

    Returns unit normals (unoriented) and a validity flag that is False where
    the neighbourhood is rank deficient (collinear or coincident).
    """
    tree = cKDTree(cloud)
    _, nn = tree.query(queries, k=k)
    nbrs = cloud[nn]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum('nki,nkj->nij', centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    valid = evals[:, 1] > 1e-12 * np.maximum(evals[:, 2], 1e-300)
    return evecs[:, :, 0], valid
