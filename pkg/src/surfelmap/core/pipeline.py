""" This module contains the main class, Reconstruction, which runs the reconstruction stages on a work directory
"""
import json
import logging
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from surfelmap.core import config as config_mod
from surfelmap.core import gmm_model, mesh_filter, pointcloud_io, renderer, surfel, synthetic_scene, trainer
from surfelmap.core.supervision import LossParams

logger = logging.getLogger(__name__)


class Reconstruction:
    """Orchestrates the LiDAR-to-surfel reconstruction of one scene.

    Every stage reads its inputs from, and writes its outputs to, a work
    directory using the documented file layout, so each stage can be rerun
    on its own. Results of the last run of a stage are also kept as
    attributes.

    Parameters
    ----------
    workdir : str or Path, optional
        The work directory. Defaults to the ``workdir`` configuration key.
    **config
        Configuration overrides, as accepted by `set_config`.

    Attributes
    ----------
    config : dict
        Parameters used by the stages; see `surfelmap.core.config.DEFAULT_CONFIG`.
    scene : SyntheticScene or None
        Set by `gen_scene`.
    frames : list of FrameCloud or None
        Set by `colorize` (or loaded by `gmm_build`).
    gmm_map : GmmMap or None
        Set by `gmm_build`.
    surfels : SurfelSet or None
        Initial surfels after `init_surfels`, trained surfels after `train`.
    train_result : TrainResult or None
    samples : OrientedSamples or None
        Kept samples after `filter_samples`.
    filter_report : FilterReport or None
    metrics : dict or None
        Geometric metrics from `eval_mesh`.
    nvs_metrics : dict or None
        Novel-view metrics from `eval_nvs`.
    summary : dict
        Timings and counts collected across stages; written by `pipeline`.

    Examples
    --------
    >>> from surfelmap.core.pipeline import Reconstruction
    >>> rec = Reconstruction('runs/room', iterations=2000)
    >>> rec.gen_scene()
    >>> rec.pipeline(generate=False)
    >>> rec.metrics['f1']
    """

    def __init__(self, workdir=None, **config):
        self.config = dict(config_mod.DEFAULT_CONFIG)
        self.set_config(**config)
        if workdir is not None:
            self.config['workdir'] = str(workdir)
        self.scene = None
        self.frames = None
        self.gmm_map = None
        self.surfels = None
        self.train_result = None
        self.samples = None
        self.filter_report = None
        self.metrics = None
        self.nvs_metrics = None
        self.summary = {}

    @property
    def workdir(self):
        return Path(self.config['workdir'])

    def _path(self, *parts):
        return self.workdir.joinpath(*parts)

    def _require(self, *parts):
        path = self._path(*parts)
        if not path.exists():
            raise FileNotFoundError(f"missing input file: {path}")
        return path

    def set_config(self, **kwargs):
        """Update the configuration used by subsequent stage calls.

        Parameters
        ----------
        **kwargs
            Configuration keys and values. Strings are coerced to the type of
            the key's default.

        Returns
        -------
        Reconstruction
            The instance, allowing for method chaining.

        Raises
        ------
        ConfigError
            For a key without a default.
        """
        config_mod.check_keys(kwargs)
        for key, value in kwargs.items():
            self.config[key] = config_mod.parse_value(key, value) if isinstance(value, str) else value
        return self

    def get_config(self, key=None):
        """Return one configuration value, or a copy of the whole dictionary when `key` is None."""
        if key is None:
            return self.config.copy()
        return self.config.get(key)

    def load_config_file(self, file_path):
        """Apply a flat ``key = value`` configuration file; returns the instance."""
        self.config.update(config_mod.read_config_file(file_path))
        return self

    # ------------------------------------------------------------------ inputs

    def load_cameras(self):
        return pointcloud_io.load_cameras(self._require('cameras.txt'), self._require('intrinsics.txt'))

    def _image_name(self, cam, i):
        return cam.name or f'{i:04d}.png'

    def load_images(self, cameras):
        return [pointcloud_io.load_image(self._require('images', self._image_name(c, i)))
                for i, c in enumerate(cameras)]

    def load_views(self, with_lidar=True):
        """All posed views in camera-file order, with sky masks and LiDAR rasters when present."""
        cameras = self.load_cameras()
        views = []
        for i, cam in enumerate(cameras):
            name = self._image_name(cam, i)
            image = pointcloud_io.load_image(self._require('images', name))
            sky_path = self._path('sky', name)
            sky = pointcloud_io.load_mask(sky_path) if sky_path.exists() else np.ones(image.shape[:2], dtype=bool)
            lidar = None
            lidar_path = self._path('lidar', f'{i:04d}.npz')
            if with_lidar and lidar_path.exists():
                with np.load(lidar_path) as npz:
                    lidar = pointcloud_io.LidarImages(npz['depth'], npz['normal'], npz['mask'])
            views.append(trainer.TrainView(i, cam, image, sky, lidar))
        return views

    def load_frames(self):
        cameras = self.load_cameras()
        frames = []
        for i, cam in enumerate(cameras):
            cloud = pointcloud_io.load_ply(self._require('frames', f'{i:04d}.ply'))
            frames.append(pointcloud_io.FrameCloud(i, cloud, cam, np.arange(len(cloud)), len(cloud) == 0))
        return frames

    def load_map(self):
        return gmm_model.load_map(self._require('gmm.bin')).freeze()

    # ------------------------------------------------------------------ stages

    def gen_scene(self, scene_kind=None, scene_size=None, seed=None, threads=None):
        """Generate a synthetic scene and write it to the work directory."""
        p = SimpleNamespace(**{
            k: v if v is not None else self.config[k]
            for k, v in locals().items() if k in self.config
        })
        cfg = {**self.config, **vars(p)}
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.scene = synthetic_scene.generate(synthetic_scene.spec_from_config(cfg), threads=p.threads)
        synthetic_scene.write_scene(self.scene, self.workdir, self.config['ply_encoding'])
        return self.scene

    def colorize(self, zbuffer_tolerance=None, normal_k=None, threads=None):
        """Split the global cloud into colorized per-image frames and LiDAR depth/normal rasters."""
        p = SimpleNamespace(**{
            k: v if v is not None else self.config[k]
            for k, v in locals().items() if k in self.config
        })
        cloud = pointcloud_io.load_ply(self._require('cloud.ply'))
        cameras = self.load_cameras()
        images = self.load_images(cameras)
        self.frames = pointcloud_io.colorize_frames(cloud.positions, cameras, images, p.zbuffer_tolerance,
                                                    p.threads)
        self._path('frames').mkdir(parents=True, exist_ok=True)
        self._path('lidar').mkdir(parents=True, exist_ok=True)
        for frame in self.frames:
            pointcloud_io.save_ply(frame.points, self._path('frames', f'{frame.frame_id:04d}.ply'),
                                   self.config['ply_encoding'])
            if len(frame.points) == 0:
                continue
            lidar = pointcloud_io.lidar_depth_normal_images(frame, p.normal_k)
            np.savez(self._path('lidar', f'{frame.frame_id:04d}.npz'), depth=lidar.depth, normal=lidar.normal,
                     mask=lidar.mask)
        return self.frames

    def gmm_build(self, voxel_size=None, rho=None, plane_constraint=None, seed=None, threads=None):
        """Integrate every colorized frame, in order, into a new GMM map and freeze it."""
        p = SimpleNamespace(**{
            k: v if v is not None else self.config[k]
            for k, v in locals().items() if k in self.config
        })
        cfg = {**self.config, **vars(p)}
        frames = self.frames if self.frames is not None else self.load_frames()
        params = gmm_model.GmmParams.from_config(cfg)
        start = time.perf_counter()
        gmm_map = gmm_model.GmmMap(p.voxel_size)
        for frame in frames:
            gmm_model.integrate_frame(gmm_map, frame, params)
        gmm_map.freeze()
        seconds = time.perf_counter() - start
        gmm_model.save_map(gmm_map, self._path('gmm.bin'))
        self.gmm_map = gmm_map
        self.summary['gmm'] = {'components': len(gmm_map), 'frames': gmm_map.frame_count, 'seconds': seconds}
        logger.info("built GMM map: %d components from %d frames in %.1f s", len(gmm_map), len(frames), seconds)
        return gmm_map

    def init_surfels(self, init_method=None, sh_degree=None, init_subset=None, seed=None):
        """Initial surfels from the GMM map (``gmm``) or from the colorized cloud (``points``)."""
        p = SimpleNamespace(**{
            k: v if v is not None else self.config[k]
            for k, v in locals().items() if k in self.config
        })
        if p.init_method == 'gmm':
            gmm_map = self.gmm_map if self.gmm_map is not None else self.load_map()
            surfels = surfel.init_from_gmm(gmm_map, p.sh_degree, self.config['r_min'])
        elif p.init_method == 'points':
            frames = self.frames if self.frames is not None else self.load_frames()
            clouds = [f.points for f in frames if len(f.points)]
            cloud = pointcloud_io.PointCloud(np.concatenate([c.positions for c in clouds]),
                                             np.concatenate([c.rgb for c in clouds])) if clouds else \
                pointcloud_io.PointCloud.empty()
            surfels = surfel.init_from_points(cloud, p.sh_degree, p.seed, p.init_subset, r_min=self.config['r_min'])
        else:
            raise config_mod.ConfigError(f"unknown init_method '{p.init_method}' (expected gmm or points)",
                                         key='init_method')
        surfel.save_surfels(surfels, self._path('surfels_init.ply'))
        self.surfels = surfels
        self.summary['init'] = {'method': p.init_method, 'surfels': len(surfels)}
        return surfels

    def train(self, iterations=None, lambda_GMM=None, density_control=None, geometry_aware_density=None,
              seed=None):
        """Optimize the initial surfels on the training split and write ``surfels.ply``."""
        p = SimpleNamespace(**{
            k: v if v is not None else self.config[k]
            for k, v in locals().items() if k in self.config
        })
        cfg = trainer.TrainConfig.from_config({**self.config, **vars(p)})
        initial, _ = surfel.load_surfels(self._require('surfels_init.ply'))
        needs_map = p.lambda_GMM > 0 or (p.density_control and p.geometry_aware_density)
        gmm_map = (self.gmm_map if self.gmm_map is not None else self.load_map()) if needs_map else None
        train_views, test_views = trainer.split_views(self.load_views(), cfg.test_stride)
        logger.info("training on %d views (%d held out) for %d iterations", len(train_views), len(test_views),
                    cfg.iterations)
        result = trainer.train(initial, train_views, gmm_map, cfg, checkpoint_dir=self._path('checkpoints'))
        surfel.save_surfels(result.surfels, self._path('surfels.ply'), cfg.iterations)
        trainer.write_log_csv(result.log, self._path('train_log.csv'))
        self.train_result = result
        self.surfels = result.surfels
        self.summary['train'] = {'iterations': cfg.iterations, 'seconds': result.seconds,
                                 'initial_surfels': len(initial), 'final_surfels': len(result.surfels),
                                 'initial_metrics': result.initial_metrics,
                                 'density_reports': [dict(iteration=i, **r.as_dict())
                                                     for i, r in result.density_reports]}
        logger.info("training done in %.1f s: %d -> %d surfels", result.seconds, len(initial), len(result.surfels))
        return result

    def _trained(self):
        if self.surfels is not None and self.train_result is not None:
            return self.surfels
        surfels, _ = surfel.load_surfels(self._require('surfels.ply'))
        return surfels

    def render(self):
        """Write color, normal and depth renders of every view under ``renders/``."""
        surfels = self._trained()
        out = self._path('renders')
        out.mkdir(parents=True, exist_ok=True)
        cameras = self.load_cameras()
        for i, cam in enumerate(cameras):
            buffers = renderer.render(surfels, cam)
            pointcloud_io.save_image(out / f'{i:04d}_color.png', buffers.color)
            pointcloud_io.save_image(out / f'{i:04d}_normal.png',
                                     renderer.normal_to_rgb(buffers.normal, buffers.silhouette))
            renderer.save_depth(out / f'{i:04d}_depth.bin', buffers.depth)
        logger.info("rendered %d views to %s", len(cameras), out)
        return out

    def filter_samples(self, filter_mode=None, fine_threshold=None, occupancy_voxel=None, occ_min_points=None,
                       silhouette_threshold=None):
        """Sample oriented points from the training renders, filter them and export ``samples.ply``."""
        p = SimpleNamespace(**{
            k: v if v is not None else self.config[k]
            for k, v in locals().items() if k in self.config
        })
        surfels = self._trained()
        cameras = self.load_cameras()
        train_cams, _ = trainer.split_views(cameras, self.config['test_stride'])
        samples = mesh_filter.sample_oriented_points(surfels, train_cams, p.silhouette_threshold)
        occupancy, gmm_map = None, None
        if p.filter_mode != 'none':
            cloud = pointcloud_io.load_xyz(self._require('cloud.ply'))
            occupancy = mesh_filter.build_occupancy(cloud, p.occupancy_voxel, p.occ_min_points)
        if p.filter_mode == 'coarse_to_fine':
            gmm_map = self.gmm_map if self.gmm_map is not None else self.load_map()
        kept, report = mesh_filter.filter_samples(samples, occupancy, gmm_map, p.fine_threshold, p.filter_mode,
                                                  LossParams.from_config(self.config))
        mesh_filter.export_poisson_input(kept, self._path('samples.ply'))
        with open(self._path('filter_report.json'), 'w') as fh:
            json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
            fh.write('\n')
        self.samples, self.filter_report = kept, report
        self.summary['filter'] = report.as_dict()
        return kept, report

    def eval_mesh(self, metric_threshold=None, result_file='samples.ply'):
        """Compare result points (samples or mesh vertices) with ``reference.ply``."""
        p = SimpleNamespace(**{
            k: v if v is not None else self.config[k]
            for k, v in locals().items() if k in self.config
        })
        result = pointcloud_io.load_xyz(self._require(result_file))
        reference = pointcloud_io.load_xyz(self._require('reference.ply'))
        metrics = mesh_filter.eval_mesh_metrics(result, reference, p.metric_threshold).report()
        mesh_filter.write_metrics(metrics, self._path('metrics.json'), self._path('metrics.csv'))
        self.metrics = metrics
        logger.info("mesh metrics: accuracy %.2f cm, completeness %.2f cm, Chamfer-L1 %.2f cm, F1 %.2f%%",
                    metrics['accuracy_cm'], metrics['completeness_cm'], metrics['chamfer_l1_cm'], metrics['f1'])
        return metrics

    def eval_nvs(self):
        """PSNR/SSIM/L1 of the trained surfels on the train and test splits."""
        surfels = self._trained()
        train_views, test_views = trainer.split_views(self.load_views(with_lidar=False), self.config['test_stride'])
        metrics = {}
        for split, views in (('train', train_views), ('test', test_views)):
            if not views:
                continue
            for name, value in trainer.evaluate_views(surfels, views).items():
                metrics[f'{split}_{name}'] = value
        mesh_filter.write_metrics(metrics, self._path('nvs_metrics.json'), self._path('nvs_metrics.csv'))
        self.nvs_metrics = metrics
        logger.info("novel views: %s", ', '.join(f'{k} {v:.4g}' for k, v in sorted(metrics.items())))
        return metrics

    def pipeline(self, generate=True):
        """Run every stage in order and write ``run_summary.json``."""
        if generate:
            self.gen_scene()
        self.colorize()
        self.gmm_build()
        self.init_surfels()
        self.train()
        self.render()
        self.filter_samples()
        self.eval_mesh()
        self.eval_nvs()
        summary = {**self.summary, 'metrics': self.metrics, 'nvs_metrics': self.nvs_metrics,
                   'config': {k: v for k, v in sorted(self.config.items())}}
        with open(self._path('run_summary.json'), 'w') as fh:
            json.dump(summary, fh, indent=2, sort_keys=True, default=float)
            fh.write('\n')
        return summary
