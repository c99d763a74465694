"""
The surfelmap package turns colorized LiDAR point clouds and posed photos into optimized 2D Gaussian
surfels, guided by a plane-constrained Gaussian mixture map of the LiDAR data, and produces filtered
oriented samples for screened Poisson meshing. The stages are found within the core modules. We
suggest using the package in the following way:

    >>> import surfelmap
    >>> rec = surfelmap.Reconstruction(workdir="runs/room")

From here, every stage is a method of `rec` that reads its inputs from the work directory and writes
its outputs back to it, so stages can also be rerun one at a time.

CONFIGURATION SYSTEM
====================

The Reconstruction class holds one flat configuration dictionary with defaults for all stages,
including the loss weights and density-control constants.

To set configuration values:

    >>> rec.set_config(iterations=5000, lambda_GMM=1.0, voxel_size=0.5)

To get configuration values:

    >>> all_config = rec.get_config()  # Returns a copy of the full config dictionary
    >>> K = rec.get_config('K')  # Returns a specific value

Configuration can also be read from a flat text file with one `key = value` per line (`#` starts a
comment):

    >>> rec.load_config_file('room.cfg')

Unknown keys raise `ConfigError`. When calling stage methods, explicitly passed parameters override
config values, which override built-in defaults.

WORK DIRECTORY
==============

    cloud.ply, cameras.txt, intrinsics.txt, images/NNNN.png, sky/NNNN.png   inputs (or gen_scene)
    reference.ply                                                           ground truth (gen_scene)
    frames/NNNN.ply, lidar/NNNN.npz                                         colorize
    gmm.bin                                                                 gmm_build
    surfels_init.ply                                                        init_surfels
    surfels.ply, checkpoints/, train_log.csv                                train
    renders/NNNN_color.png, NNNN_normal.png, NNNN_depth.bin                 render
    samples.ply, filter_report.json                                         filter_samples
    metrics.json, metrics.csv                                               eval_mesh
    nvs_metrics.json, nvs_metrics.csv                                       eval_nvs
    run_summary.json                                                        pipeline

EXAMPLE WORKFLOW
================

    >>> import surfelmap
    >>>
    >>> # 1. Point the reconstruction at a work directory and configure it
    >>> rec = surfelmap.Reconstruction(workdir="runs/room")
    >>> rec.set_config(scene_kind='room', iterations=3000, seed=1)
    >>>
    >>> # 2. Create a synthetic scene (skip when cloud, cameras and images already exist)
    >>> rec.gen_scene()
    >>>
    >>> # 3. Colorize per-image frames and build the frozen GMM map
    >>> rec.colorize()
    >>> rec.gmm_build()
    >>>
    >>> # 4. Initialize and train surfels
    >>> rec.init_surfels()
    >>> rec.train()
    >>>
    >>> # 5. Export filtered oriented samples and evaluate
    >>> rec.filter_samples()
    >>> rec.eval_mesh()
    >>> rec.eval_nvs()

The same stages are available from the command line:

    $ surfelmap pipeline -w runs/room --set iterations=3000 --seed 1

"""

__version__ = "0.1.0"

from .core.pipeline import Reconstruction

__all__ = [
    "Reconstruction",
]
