"""Command line front end: one subcommand per pipeline stage.

Exit status is 0 on success, 2 for configuration errors, 3 for a missing
input file and 1 for any other library error.
"""
import argparse
import logging
import os
import sys

from surfelmap.core.config import parse_overrides
from surfelmap.core.errors import ConfigError, SurfelMapError
from surfelmap.core.pipeline import Reconstruction

logger = logging.getLogger(__name__)

THREADS_ENV = 'LIGS_THREADS'

_STAGES = {
    'gen-scene': ('gen_scene', "generate a synthetic scene (cloud, cameras, images, sky masks, reference)"),
    'colorize': ('colorize', "split the cloud into colorized frames and LiDAR depth/normal rasters"),
    'gmm-build': ('gmm_build', "build and freeze the GMM map from the colorized frames"),
    'init-surfels': ('init_surfels', "initialize surfels from the GMM map or the colorized cloud"),
    'train': ('train', "optimize the surfels on the training views"),
    'render': ('render', "render color, normal and depth for every view"),
    'filter-samples': ('filter_samples', "sample, filter and export oriented points for Poisson meshing"),
    'eval-mesh': ('eval_mesh', "accuracy, completeness, Chamfer-L1 and F-score against reference.ply"),
    'eval-nvs': ('eval_nvs', "PSNR and SSIM on the train and test views"),
    'pipeline': ('pipeline', "run every stage in order"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-w', '--workdir', help="work directory holding the stage inputs and outputs")
    common.add_argument('-c', '--config', help="flat 'key = value' configuration file")
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help="override one configuration key (repeatable)")
    common.add_argument('--seed', type=int, help="random seed for every stage")
    common.add_argument('--threads', type=int, help=f"worker threads (falls back to ${THREADS_ENV})")
    common.add_argument('-v', '--verbose', action='store_true', help="debug logging")

    parser = argparse.ArgumentParser(prog='surfelmap', description="LiDAR-guided Gaussian surfel reconstruction")
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True
    for name, (_, text) in _STAGES.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={env!r} is not an integer", key='threads') from None
    return None


def configure(args):
    """Build a `Reconstruction` from parsed arguments: file, then overrides, then dedicated flags."""
    rec = Reconstruction()
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(f"missing input file: {args.config}")
        rec.load_config_file(args.config)
    rec.set_config(**parse_overrides(args.overrides))
    if args.workdir:
        rec.set_config(workdir=args.workdir)
    if args.seed is not None:
        rec.set_config(seed=args.seed)
    threads = _threads(args)
    if threads is not None:
        rec.set_config(threads=threads)
    return rec


def run(argv=None):
    """Parse `argv`, run the requested stage and return the exit status."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        rec = configure(args)
        getattr(rec, _STAGES[args.command][0])()
    except ConfigError as e:
        logger.error("configuration error (key %s): %s", e.key, e)
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (SurfelMapError, OSError, ValueError) as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == '__main__':
    main()
