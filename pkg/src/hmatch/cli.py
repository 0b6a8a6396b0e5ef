""" Command-line entry point: `hmatch <subcommand> [flags]`.

Results go to stdout as compact JSON; CSV and per-run files go under --out. Exit
codes: 0 success, 1 domain error, 2 usage or input-format error.
"""
import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from hmatch import __version__
from hmatch.analysis import decomposition_trials, fig1_witness
from hmatch.decoding import Decoder, decode_pose
from hmatch.encoders import (DemanderMode, GaussianSpec, PeakConvention, build_demanders, build_dot_heatmap,
                             build_gaussian_heatmap)
from hmatch.errors import HMatchError
from hmatch.experiments import AblationAxis, RunConfig, run, run_ablation, write_run
from hmatch.grid import GridGeometry, Keypoint, PoseInstance
from hmatch.losses import GradientMode, TargetKind, gradient_suite, matching_loss, mse_loss
from hmatch.parser import ParseError, dump_heatmap, load_heatmap, load_keypoints
from hmatch.transport import SinkhornConfig, compare_with_exact

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2


def emit(obj):
    print(json.dumps(obj, separators=(',', ':')))


def _geometry(args):
    return GridGeometry(width=args.W, height=args.H, pixel_size=args.g)


def _gaussian(args):
    return GaussianSpec(sigma=args.sigma, peak_convention=args.convention)


def _seed(args, default=0):
    return default if args.seed is None else args.seed


def cmd_encode(args):
    geometry = _geometry(args)
    keypoints = load_keypoints(args.keypoints)
    if args.mode in ('subpixel', 'naive'):
        encoded = []
        for k, kp in enumerate(keypoints):
            demanders = build_demanders(kp, geometry, DemanderMode(args.mode), joint=k)
            encoded.append({'masses': demanders.masses.tolist(), 'locations': demanders.locations.tolist()})
        emit({'demanders': encoded})
        return
    heatmaps = [build_gaussian_heatmap(kp, geometry, _gaussian(args), joint=k) if args.mode == 'gaussian'
                else build_dot_heatmap(kp, geometry, joint=k) for k, kp in enumerate(keypoints)]
    if args.out is None:
        emit({'heatmaps': [h.values.tolist() for h in heatmaps]})
        return
    os.makedirs(args.out, exist_ok=True)
    files = []
    for k, heatmap in enumerate(heatmaps):
        files.append(os.path.join(args.out, f'heatmap_{k}.txt'))
        dump_heatmap(heatmap, files[-1])
    emit({'files': files})


def cmd_decode(args):
    pose = decode_pose([load_heatmap(args.heatmap, image_scale=args.r)], Decoder(args.decoder))
    (x, y), (u, v) = pose.coords[0].tolist(), pose.image_coords[0].tolist()
    emit({'x': x, 'y': y, 'image_x': u, 'image_y': v})


def cmd_loss(args):
    heatmaps = [load_heatmap(f) for f in args.heatmap]
    keypoints = load_keypoints(args.keypoints)
    instance = PoseInstance(joints=keypoints, heatmaps=heatmaps)
    if args.loss == 'matching':
        cfg = SinkhornConfig(lam=args.lam, iterations=args.iterations)
        report = matching_loss(instance, DemanderMode(args.demander), cfg, GradientMode(args.gradient))
    else:
        target = TargetKind.DOT if args.loss == 'mse-dot' else TargetKind.GAUSSIAN
        report = mse_loss(instance, target, _gaussian(args))
    emit(report.to_dict())
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        for k, grad in enumerate(report.gradients):
            dump_heatmap(dataclasses.replace(heatmaps[k], values=grad), os.path.join(args.out, f'gradient_{k}.txt'))


def cmd_sinkhorn_check(args):
    cfg = SinkhornConfig(lam=args.lam, iterations=args.iterations, tol=args.tol)
    emit(compare_with_exact(args.n, args.m, args.trials, cfg, seed=_seed(args)).to_dict())


def cmd_theorem1(args):
    geometry = GridGeometry(width=args.W, height=args.H)
    reports = decomposition_trials(geometry, args.K, args.batch, args.trials, _gaussian(args), seed=_seed(args))
    summary = {
        'trials': len(reports),
        'convention': args.convention,
        'max_residual': max(r.residual for r in reports),
        'mean_lhs': float(np.mean([r.lhs for r in reports])),
        'mean_constant_C': float(np.mean([r.constant_C for r in reports])),
    }
    emit(summary)
    if args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, 'theorem1.json'), mode='w', encoding='utf-8') as f:
            json.dump([r.to_dict() for r in reports], f, indent=2)


def cmd_fig1(args):
    geometry = GridGeometry(width=args.W, height=args.H)
    x = (geometry.max_x / 2 + 0.3) if args.x is None else args.x
    y = (geometry.max_y / 2 + 0.2) if args.y is None else args.y
    result = fig1_witness(geometry, Keypoint(x=x, y=y), GaussianSpec(sigma=args.sigma))
    emit(result.to_dict())
    if result.found and args.out is not None:
        os.makedirs(args.out, exist_ok=True)
        for i, heatmap in enumerate(result.heatmaps, start=1):
            dump_heatmap(heatmap, os.path.join(args.out, f'heatmap_{i}.txt'))
    if not result.found:
        logger.warning('no witness for sigma=%g on a %dx%d grid', args.sigma, args.H, args.W)


def _run_config(args):
    config = RunConfig.from_file(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def cmd_train(args):
    result = run(_run_config(args))
    emit(result.metrics_dict())
    if args.out is not None:
        write_run(result, args.out)


def _axis_values(axis, values):
    if values is None:
        return None
    if axis is AblationAxis.SINKHORN_ITERATIONS:
        return [int(v) for v in values]
    return [DemanderMode(v) for v in values]


def cmd_ablate(args):
    axis = AblationAxis(args.axis)
    results = run_ablation(axis, _run_config(args), values=_axis_values(axis, args.values), directory=args.out)
    emit([{'value': r.config_echo['demander' if axis is AblationAxis.DEMANDER_MODE else 'iterations'],
           'mean_error': r.final_metrics.mean_error, 'final_loss': r.final_loss,
           'inconsistency_rate': r.trace.inconsistency_rate} for r in results])


def cmd_gradcheck(args):
    geometry = GridGeometry(width=args.W, height=args.H)
    cfg = SinkhornConfig(lam=args.lam, iterations=args.iterations)
    checks = gradient_suite(geometry, args.trials, DemanderMode(args.demander), cfg, args.against, args.step,
                            seed=_seed(args))
    emit({'trials': len(checks), 'against': args.against,
          'max_relative_error': max(c.relative_error for c in checks),
          'max_abs_error': max(c.max_abs_error for c in checks)})


def _add_grid(parser, height=8, width=8):
    parser.add_argument('--H', type=int, default=height, help='heatmap height in pixels')
    parser.add_argument('--W', type=int, default=width, help='heatmap width in pixels')


def _add_gaussian(parser):
    parser.add_argument('--sigma', type=float, default=2.0, help='Gaussian standard deviation in pixels')
    parser.add_argument('--convention', choices=[c.value for c in PeakConvention], default='peak-one',
                        help='Gaussian center: the dot pixel (peak-one) or the sub-pixel dot')


def _add_sinkhorn(parser, lam=1.0):
    parser.add_argument('--lambda', dest='lam', type=float, default=lam, help='entropic regularization weight')
    parser.add_argument('--iterations', type=int, default=1000, help='Sinkhorn iterations')


def _seed_int(text):
    return int(text, 0)


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f'expected a positive integer, got {text}')
    return value


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=_seed_int, default=None, help='64-bit seed for every random draw')
    common.add_argument('--out', default=None, help='directory for CSV/JSON/heatmap outputs')
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='log solver diagnostics')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='log warnings and errors only')

    parser = argparse.ArgumentParser(prog='hmatch',
                                     description='Heatmap keypoint localization as supplier/demander matching.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    sub = parser.add_subparsers(dest='command', required=True, metavar='subcommand')

    p = sub.add_parser('encode', parents=[common], help='encode keypoints as demanders or target heatmaps')
    p.add_argument('--keypoints', required=True, help='keypoint JSON file')
    _add_grid(p)
    p.add_argument('--g', type=float, default=1.0, help='pixel size')
    p.add_argument('--mode', choices=['subpixel', 'naive', 'gaussian', 'dot'], default='subpixel')
    _add_gaussian(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser('decode', parents=[common], help='decode coordinates from a heatmap file')
    p.add_argument('--heatmap', required=True, help='heatmap text file')
    p.add_argument('--decoder', choices=[d.value for d in Decoder], default='expectation')
    p.add_argument('--r', type=float, default=1.0, help='input-image to heatmap resolution ratio')
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser('loss', parents=[common], help='loss and gradients of heatmaps against keypoints')
    p.add_argument('--heatmap', required=True, nargs='+', help='one heatmap text file per joint')
    p.add_argument('--keypoints', required=True, help='keypoint JSON file')
    p.add_argument('--loss', choices=['matching', 'mse-gaussian', 'mse-dot'], default='matching')
    p.add_argument('--demander', choices=[m.value for m in DemanderMode], default='subpixel')
    _add_sinkhorn(p)
    _add_gaussian(p)
    p.add_argument('--gradient', choices=[m.value for m in GradientMode], default='unrolled')
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser('sinkhorn-check', parents=[common], help='compare Sinkhorn with exact EMD')
    p.add_argument('--n', type=_positive_int, default=6, help='suppliers per problem')
    p.add_argument('--m', type=_positive_int, default=4, help='demanders per problem')
    p.add_argument('--trials', type=_positive_int, default=50)
    _add_sinkhorn(p, lam=100.0)
    p.add_argument('--tol', type=float, default=None, help='stop early below this marginal residual')
    p.set_defaults(func=cmd_sinkhorn_check)

    p = sub.add_parser('theorem1', parents=[common], help='check the dot/Gaussian MSE risk decomposition')
    p.add_argument('--trials', type=_positive_int, default=100)
    p.add_argument('--batch', type=_positive_int, default=16, help='samples per batch')
    p.add_argument('--K', type=_positive_int, default=1, help='joints per sample')
    _add_grid(p, height=16, width=16)
    _add_gaussian(p)
    p.set_defaults(func=cmd_theorem1)

    p = sub.add_parser('fig1', parents=[common], help='find predictions where MSE and localization disagree')
    p.add_argument('--sigma', type=float, default=2.0)
    _add_grid(p, height=32, width=32)
    p.add_argument('--x', type=float, default=None, help='dot x (default: near the grid center)')
    p.add_argument('--y', type=float, default=None, help='dot y (default: near the grid center)')
    p.set_defaults(func=cmd_fig1)

    p = sub.add_parser('train', parents=[common], help='train on synthetic data from a run config')
    p.add_argument('--config', required=True, help='key = value run configuration file')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('ablate', parents=[common], help='repeat a training run along one ablation axis')
    p.add_argument('--config', required=True, help='key = value run configuration file')
    p.add_argument('--axis', required=True, choices=[a.value for a in AblationAxis])
    p.add_argument('--values', nargs='+', default=None, help='axis values (default: the standard ones)')
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser('gradcheck', parents=[common], help='check matching-loss gradients')
    _add_grid(p)
    p.add_argument('--trials', type=_positive_int, default=10)
    p.add_argument('--step', type=float, default=1e-5, help='central-difference step')
    p.add_argument('--demander', choices=[m.value for m in DemanderMode], default='subpixel')
    _add_sinkhorn(p)
    p.add_argument('--against', choices=['finite-difference', 'implicit'], default='finite-difference')
    p.set_defaults(func=cmd_gradcheck)
    return parser


def configure_logging(args):
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s', stream=sys.stderr)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args)
    try:
        code = args.func(args)
    except HMatchError as e:
        logger.error('%s', e)
        return EXIT_DOMAIN
    except (ParseError, ValueError, OSError) as e:
        logger.error('%s', e)
        return EXIT_USAGE
    return EXIT_OK if code is None else code


if __name__ == '__main__':
    sys.exit(main())
