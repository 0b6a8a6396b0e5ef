""" Coordinate decoders and localization metrics.

The expectation decoder picks the 2x2 window of pixels with the largest relu-sum
(ties: smallest row, then smallest column), normalizes its four values to one and
returns the mass-weighted mean of the four pixel centers. It is the inverse of the
sub-pixel demander construction.
"""
import csv
import dataclasses
import enum
import logging

import numpy as np

from hmatch.errors import DegenerateDecodeError, EmptyEvaluationError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.1, 0.25, 0.5, 1.0)
CSV_FIELDS = ('instance_id', 'joint', 'err', 'decoder')


class Decoder(enum.Enum):
    EXPECTATION = 'expectation'
    ARGMAX = 'argmax'


@dataclasses.dataclass(frozen=True, eq=False)
class DecodedPose:
    coords: np.ndarray
    image_coords: np.ndarray
    window_origin: np.ndarray

    def __len__(self):
        return len(self.coords)


@dataclasses.dataclass(frozen=True, eq=False)
class LocalizationMetrics:
    per_joint_error: np.ndarray
    mean_error: float
    pck_at: dict
    errors: np.ndarray = None

    def to_dict(self):
        return {
            'per_joint_error': [None if np.isnan(e) else float(e) for e in self.per_joint_error],
            'mean_error': float(self.mean_error),
            'pck_at': {format(t, 'g'): float(v) for t, v in self.pck_at.items()},
        }


def window_sums(values):
    """ relu-sums of all 2x2 windows of a (..., H, W) stack, shape (..., H-1, W-1)."""
    positive = np.maximum(values, 0.0)
    return positive[..., :-1, :-1] + positive[..., :-1, 1:] + positive[..., 1:, :-1] + positive[..., 1:, 1:]


def decode_expectation_batch(values, pixel_size=1.0):
    """ Vectorized expectation decoding of a (B, H, W) stack.

    Returns (coords (B, 2), origins (B, 2) as (col, row), degenerate (B,)). Degenerate
    rows, whose best window has no positive mass, get NaN coordinates.
    """
    values = np.asarray(values, dtype=np.float64)
    batch, height, width = values.shape
    sums = window_sums(values).reshape(batch, -1)
    best = np.argmax(sums, axis=1)
    degenerate = sums[np.arange(batch), best] <= 0
    row, col = np.divmod(best, width - 1)
    positive = np.maximum(values, 0.0)
    idx = np.arange(batch)
    window = np.stack([positive[idx, row, col], positive[idx, row, col + 1],
                       positive[idx, row + 1, col], positive[idx, row + 1, col + 1]], axis=1)
    total = window.sum(axis=1, keepdims=True)
    with np.errstate(invalid='ignore', divide='ignore'):
        weights = window / total
    x = (weights[:, 0] * col + weights[:, 1] * (col + 1) + weights[:, 2] * col + weights[:, 3] * (col + 1))
    y = (weights[:, 0] * row + weights[:, 1] * row + weights[:, 2] * (row + 1) + weights[:, 3] * (row + 1))
    coords = np.stack([x, y], axis=1) * pixel_size
    coords[degenerate] = np.nan
    return coords, np.stack([col, row], axis=1), degenerate


def decode_argmax_batch(values, pixel_size=1.0):
    """ Center of the max-value pixel for each grid of a (B, H, W) stack (ties: row-major first)."""
    values = np.asarray(values, dtype=np.float64)
    batch, height, width = values.shape
    row, col = np.divmod(np.argmax(values.reshape(batch, -1), axis=1), width)
    return np.stack([col, row], axis=1) * pixel_size, np.stack([col, row], axis=1)


def decode_expectation(heatmap):
    """ Return ((x, y), (col, row) of the chosen window)."""
    coords, origins, degenerate = decode_expectation_batch(heatmap.values[None], heatmap.geometry.pixel_size)
    if degenerate[0]:
        raise DegenerateDecodeError('heatmap has no positive 2x2 window to decode')
    return (float(coords[0, 0]), float(coords[0, 1])), (int(origins[0, 0]), int(origins[0, 1]))


def decode_argmax(heatmap):
    coords, _ = decode_argmax_batch(heatmap.values[None], heatmap.geometry.pixel_size)
    return float(coords[0, 0]), float(coords[0, 1])


def decode_values(values, geometry, decoder=Decoder.EXPECTATION, strict=True):
    """ Decode a (B, H, W) stack; returns (coords (B, 2), origins (B, 2)).

    With strict=False, degenerate grids fall back to argmax instead of raising.
    """
    if Decoder(decoder) is Decoder.ARGMAX:
        return decode_argmax_batch(values, geometry.pixel_size)
    coords, origins, degenerate = decode_expectation_batch(values, geometry.pixel_size)
    if np.any(degenerate):
        if strict:
            raise DegenerateDecodeError(f'{int(degenerate.sum())} heatmaps have no positive 2x2 window')
        logger.warning('%d degenerate heatmaps decoded by argmax instead', int(degenerate.sum()))
        fallback, fallback_origins = decode_argmax_batch(values[degenerate], geometry.pixel_size)
        coords[degenerate] = fallback
        origins[degenerate] = fallback_origins
    return coords, origins


def decode_pose(heatmaps, decoder=Decoder.EXPECTATION):
    """ Decode a sequence of K heatmaps sharing one geometry into a DecodedPose."""
    geometry = heatmaps[0].geometry
    values = np.stack([h.values for h in heatmaps])
    coords, origins = decode_values(values, geometry, decoder)
    scale = geometry.image_scale / geometry.pixel_size
    return DecodedPose(coords=coords, image_coords=coords * scale, window_origin=origins)


def joint_errors(coords, keypoints):
    """ Euclidean errors, NaN where the ground-truth joint is invisible."""
    gt = np.array([[kp.x, kp.y] for kp in keypoints], dtype=np.float64).reshape(-1, 2)
    visible = np.array([kp.visible for kp in keypoints], dtype=bool)
    errors = np.hypot(coords[:, 0] - gt[:, 0], coords[:, 1] - gt[:, 1])
    return np.where(visible, errors, np.nan)


def _metrics(errors, thresholds):
    flat = errors[~np.isnan(errors)]
    if flat.size == 0:
        raise EmptyEvaluationError('no visible ground-truth joints to evaluate')
    with np.errstate(invalid='ignore'):
        per_joint = np.nanmean(errors, axis=0) if errors.ndim == 2 else errors
    pck = {float(t): float(np.mean(flat <= t)) for t in sorted(thresholds)}
    return LocalizationMetrics(per_joint_error=per_joint, mean_error=float(flat.mean()), pck_at=pck,
                               errors=errors)


def evaluate(decoded, gt, thresholds=DEFAULT_THRESHOLDS):
    if len(decoded) != len(gt):
        raise ValueError(f'{len(decoded)} decoded joints but {len(gt)} ground-truth joints')
    return _metrics(joint_errors(decoded.coords, gt), thresholds)


def evaluate_dataset(decoded, gts, thresholds=DEFAULT_THRESHOLDS):
    """ Metrics over many instances; `errors` is the (n, K) error matrix."""
    if len(decoded) != len(gts):
        raise ValueError(f'{len(decoded)} decoded poses but {len(gts)} ground-truth poses')
    errors = np.stack([joint_errors(d.coords, gt) for d, gt in zip(decoded, gts)])
    return _metrics(errors, thresholds)


def error_rows(errors, decoder):
    """ One CSV row per instance per joint from an (n, K) error matrix; invisible joints are skipped."""
    decoder = Decoder(decoder).value
    for i, row in enumerate(np.atleast_2d(errors)):
        for k, err in enumerate(row):
            if not np.isnan(err):
                yield {'instance_id': i, 'joint': k, 'err': repr(float(err)), 'decoder': decoder}


def write_error_csv(rows, file):
    with open(file, mode='w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def mean_decode_error(values, keypoints, geometry, decoder=Decoder.EXPECTATION):
    """ Mean error over visible joints of a (..., H, W) prediction stack against a flat keypoint list.

    Degenerate grids are decoded by argmax rather than raising.
    """
    values = np.asarray(values, dtype=np.float64).reshape((-1,) + geometry.shape)
    coords, _ = decode_values(values, geometry, decoder, strict=False)
    errors = joint_errors(coords, keypoints)
    if np.all(np.isnan(errors)):
        raise EmptyEvaluationError('no visible ground-truth joints to evaluate')
    return float(np.nanmean(errors))
