"""Default parameters and the flat ``key = value`` configuration format."""
import logging

from .errors import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    # general
    'seed': 0,
    'threads': 1,
    'workdir': '.',
    'log_every': 100,
    # pointcloud-io
    'ply_encoding': 'binary',
    'zbuffer_tolerance': 0.01,
    'normal_k': 16,
    # gmm-model
    'voxel_size': 1.0,
    'ransac_threshold': 0.02,
    'ransac_iterations': 200,
    'min_inliers': 30,
    'max_planes': 4,
    'bandwidth_spatial': 0.15,
    'bandwidth_gray': 0.15,
    'em_tol': 1e-6,
    'max_em_iters': 100,
    'cov_eps': 1e-8,
    'rho': -6.0,
    'fit_residual': True,
    'plane_constraint': True,
    # surfel
    'sh_degree': 0,
    'r_min': 1e-6,
    'init_method': 'gmm',
    'init_subset': 0,
    # supervision
    'lambda_GMM': 1.0,
    'lambda_d': 0.1,
    'lambda_n': 0.1,
    'K': 4,
    'sigma': 0.1,
    'alpha': 0.5,
    'phi': 0.05,
    'max_rings': 3,
    'refresh_every': 100,
    # density-control
    'tau': 0.01,
    'omega_growth': 0.4,
    'omega_scale': 0.0002,
    'omega_pruning': 0.003,
    'growth_threshold': 0.0002,
    'prune_threshold': 0.005,
    'split_size_threshold': 0.05,
    'densify_interval': 100,
    'densify_start': 500,
    'densify_stop': 15000,
    'density_control': True,
    'geometry_aware_density': True,
    # trainer
    'iterations': 30000,
    'lr_position': 1.6e-4,
    'lr_position_final': 1.6e-6,
    'lr_opacity': 0.05,
    'lr_radii': 0.005,
    'lr_rotation': 0.001,
    'lr_appearance': 0.0025,
    'test_stride': 8,
    'checkpoint_iterations': '',
    'lambda_dssim': 0.2,
    # mesh-filter
    'occupancy_voxel': 0.3,
    'occ_min_points': 3,
    'fine_threshold': 0.05,
    'filter_mode': 'coarse_to_fine',
    'silhouette_threshold': 0.5,
    'metric_threshold': 0.2,
    # synthetic-scene
    'scene_kind': 'room',
    'scene_size': 4.0,
    'scene_density': 400.0,
    'scene_noise': 0.0,
    'scene_cameras': 8,
    'image_width': 192,
    'image_height': 192,
    'fov_degrees': 70.0,
}

_TRUE = {'true', '1', 'yes', 'on'}
_FALSE = {'false', '0', 'no', 'off'}


def parse_value(key, text):
    """Coerce `text` to the type of the default registered for `key`."""
    if key not in DEFAULT_CONFIG:
        raise ConfigError(f"unknown configuration key '{key}'", key=key)
    default = DEFAULT_CONFIG[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value '{text}' for key '{key}' "
                          f"(expected {type(default).__name__})", key=key) from None
    return text


def check_keys(overrides):
    """Raise `ConfigError` for the first key that has no default."""
    for key in overrides:
        if key not in DEFAULT_CONFIG:
            raise ConfigError(f"unknown configuration key '{key}'", key=key)


def read_config_file(file_path):
    """Parse a flat configuration file into a dict of typed values.

    Lines are ``key = value``; blank lines and lines starting with ``#`` are
    ignored, as is anything after a ``#`` on a value line.
    """
    values = {}
    with open(file_path, 'r') as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ConfigError(f"{file_path}:{lineno}: expected 'key = value', got '{raw.rstrip()}'")
            key, value = (part.strip() for part in line.split('=', 1))
            values[key] = parse_value(key, value)
    logger.debug("read %d configuration entries from %s", len(values), file_path)
    return values


def parse_overrides(pairs):
    """Turn ``["key=value", ...]`` command line overrides into typed values."""
    values = {}
    for pair in pairs or []:
        if '=' not in pair:
            raise ConfigError(f"override '{pair}' is not of the form key=value")
        key, value = (part.strip() for part in pair.split('=', 1))
        values[key] = parse_value(key, value)
    return values


def parse_int_list(text):
    """``"100, 500"`` -> ``[100, 500]``; empty text gives an empty list."""
    return [int(tok) for tok in str(text).replace(',', ' ').split()]
