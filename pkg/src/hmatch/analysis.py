""" Risk decomposition between dot and Gaussian MSE targets, and loss/error consistency.

For predicted, Gaussian and dot heatmaps P, G, D of every joint,

    E||P - D||^2 = E||P - G||^2 + 2 E<P, G> - 2 E<P, D> - E||G - D||^2

holds exactly when <G, D> = ||D||^2 = 1, i.e. when the Gaussian peaks at 1 on the dot
pixel. `verify_decomposition` evaluates both sides and reports the residual.
"""
import csv
import dataclasses
import logging
import math

import numpy as np

from hmatch.decoding import Decoder, decode_argmax, mean_decode_error
from hmatch.encoders import GaussianSpec, PeakConvention, dot_values, gaussian_values
from hmatch.errors import ConventionError, WitnessNotFound
from hmatch.grid import Heatmap, Keypoint, PoseInstance, containing_pixel, make_rng, spawn_seeds
from hmatch.losses import TargetKind, mse_loss

logger = logging.getLogger(__name__)

PEAK_TOL = 1e-12
WITNESS_WIDTHS = (1.5, 2.0, 3.0, 4.0, 6.0)
WITNESS_OFFSETS = 3


@dataclasses.dataclass(frozen=True)
class DecompositionReport:
    lhs: float
    rhs: float
    residual: float
    constant_C: float
    inner_gau: float
    inner_dot: float
    risk_gau: float
    convention: PeakConvention

    def to_dict(self):
        d = dataclasses.asdict(self)
        d['convention'] = self.convention.value
        return d


def _stack(heatmaps):
    if isinstance(heatmaps, Heatmap):
        return heatmaps.values[None]
    if isinstance(heatmaps, np.ndarray):
        return heatmaps.reshape((-1,) + heatmaps.shape[-2:])
    return np.stack([h.values if isinstance(h, Heatmap) else np.asarray(h) for h in heatmaps])


def _inner(a, b):
    return float(np.sum(a * b))


def detect_convention(gaussian, dot):
    """ Peak convention of a (K, H, W) Gaussian stack judged at the dot pixels."""
    peaks = np.sum(gaussian * dot, axis=(-2, -1))
    if np.all(np.abs(peaks - 1.0) <= PEAK_TOL):
        return PeakConvention.PEAK_ONE
    return PeakConvention.SUBPIXEL


def verify_decomposition(batch):
    """ Evaluate both sides of the decomposition over (predicted, gaussian, dot) triples.

    Each element of a triple is a Heatmap, a sequence of Heatmaps or an array of shape
    (K, H, W). All Gaussians in the batch must follow one peak convention.
    """
    triples = [tuple(_stack(h) for h in triple) for triple in batch]
    if not triples:
        raise ValueError('decomposition needs a nonempty batch')
    shapes = {t.shape[-2:] for triple in triples for t in triple}
    if len(shapes) != 1:
        raise ValueError(f'heatmaps in the batch have different grid shapes: {sorted(shapes)}')
    conventions = {detect_convention(gau, dot) for _, gau, dot in triples}
    if len(conventions) != 1:
        raise ConventionError('batch mixes peak-one and sub-pixel Gaussian conventions')
    convention = conventions.pop()

    n = len(triples)
    lhs = sum(_inner(pred - dot, pred - dot) for pred, _, dot in triples) / n
    risk_gau = sum(_inner(pred - gau, pred - gau) for pred, gau, _ in triples) / n
    inner_gau = sum(_inner(pred, gau) for pred, gau, _ in triples) / n
    inner_dot = sum(_inner(pred, dot) for pred, _, dot in triples) / n
    constant = sum(_inner(gau - dot, gau - dot) for _, gau, dot in triples) / n
    rhs = risk_gau + 2 * inner_gau - 2 * inner_dot - constant
    residual = abs(lhs - rhs)
    logger.debug('decomposition over %d samples (%s): residual %.3g', n, convention.value, residual)
    return DecompositionReport(lhs=lhs, rhs=rhs, residual=residual, constant_C=constant, inner_gau=inner_gau,
                               inner_dot=inner_dot, risk_gau=risk_gau, convention=convention)


def make_decomposition_batch(geometry, n_joints, size, spec=GaussianSpec(), seed=0):
    """ Random predicted heatmaps paired with Gaussian and dot targets at uniform random keypoints."""
    rng = make_rng(seed)
    batch = []
    for _ in range(size):
        pred = rng.normal(size=(n_joints,) + geometry.shape)
        kps = [Keypoint(x=float(rng.uniform(0, geometry.max_x)), y=float(rng.uniform(0, geometry.max_y)))
               for _ in range(n_joints)]
        gau = np.stack([gaussian_values(kp, geometry, spec) for kp in kps])
        dot = np.stack([dot_values(kp, geometry) for kp in kps])
        batch.append((pred, gau, dot))
    return batch


def decomposition_trials(geometry, n_joints, batch_size, trials, spec=GaussianSpec(), seed=0):
    """ One DecompositionReport per independently seeded random batch."""
    return [verify_decomposition(make_decomposition_batch(geometry, n_joints, batch_size, spec, child))
            for child in spawn_seeds(seed, trials)]


@dataclasses.dataclass(frozen=True, eq=False)
class ConsistencyTrace:
    """ Recorded (step, loss, error) series of a training run.

    `alt_errors` holds the errors of a secondary decoder when one was recorded.
    """
    steps: np.ndarray
    losses: np.ndarray
    errors: np.ndarray
    inconsistency_rate: float
    decoder: str = 'expectation'
    alt_errors: np.ndarray = None
    alt_decoder: str = None

    @classmethod
    def from_series(cls, steps, losses, errors, decoder='expectation', alt_errors=None, alt_decoder=None):
        steps = np.asarray(steps, dtype=np.int64)
        losses = np.asarray(losses, dtype=np.float64)
        errors = np.asarray(errors, dtype=np.float64)
        if not len(steps) == len(losses) == len(errors):
            raise ValueError('steps, losses and errors must have equal lengths')
        if len(steps) < 2:
            raise ValueError('a consistency trace needs at least 2 recorded steps')
        if np.any(np.diff(steps) <= 0):
            raise ValueError('steps must be strictly increasing')
        if alt_errors is not None:
            alt_errors = np.asarray(alt_errors, dtype=np.float64)
        return cls(steps=steps, losses=losses, errors=errors, inconsistency_rate=inconsistency_rate(losses, errors),
                   decoder=decoder, alt_errors=alt_errors, alt_decoder=alt_decoder)

    def __len__(self):
        return len(self.steps)

    def rows(self):
        for i, step in enumerate(self.steps):
            row = {'step': int(step), 'loss': repr(float(self.losses[i])), 'error': repr(float(self.errors[i]))}
            if self.alt_errors is not None:
                row[f'error_{self.alt_decoder}'] = repr(float(self.alt_errors[i]))
            yield row

    def alt_inconsistency_rate(self):
        if self.alt_errors is None:
            return None
        return inconsistency_rate(self.losses, self.alt_errors)


def inconsistency_rate(losses, errors):
    """ Fraction of consecutive pairs where the loss strictly fell while the error strictly rose."""
    losses, errors = np.asarray(losses), np.asarray(errors)
    if len(losses) < 2:
        return 0.0
    inconsistent = (np.diff(losses) < 0) & (np.diff(errors) > 0)
    return float(np.mean(inconsistent))


def trace_consistency(records, geometry, decoder=Decoder.EXPECTATION, alt_decoder=None):
    """ Build a ConsistencyTrace from (step, heatmaps, loss, gt) records.

    heatmaps is a (..., H, W) stack and gt the matching flat keypoint list. MSE runs
    pass alt_decoder to record a second error series.
    """
    decoder = Decoder(decoder)
    alt_decoder = None if alt_decoder is None else Decoder(alt_decoder)
    steps, losses, errors, alt = [], [], [], []
    for step, heatmaps, loss, gt in records:
        steps.append(step)
        losses.append(loss)
        errors.append(mean_decode_error(heatmaps, gt, geometry, decoder))
        if alt_decoder is not None:
            alt.append(mean_decode_error(heatmaps, gt, geometry, alt_decoder))
    if alt_decoder is None:
        return ConsistencyTrace.from_series(steps, losses, errors, decoder=decoder.value)
    return ConsistencyTrace.from_series(steps, losses, errors, decoder=decoder.value, alt_errors=alt,
                                        alt_decoder=alt_decoder.value)


def write_trace_csv(trace, file):
    rows = list(trace.rows())
    with open(file, mode='w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


@dataclasses.dataclass(frozen=True, eq=False)
class WitnessResult:
    """ Two predictions where the one closer to the Gaussian target in MSE decodes further from the dot.

    Index 0 is the correctly located but poorly shaped blob, index 1 the well shaped
    but displaced one.
    """
    found: bool
    attempts: int
    heatmaps: tuple = ()
    mse: tuple = ()
    errors: tuple = ()
    width_factor: float = None
    offset: int = None

    def to_dict(self):
        return {
            'found': self.found,
            'attempts': self.attempts,
            'mse': [float(v) for v in self.mse],
            'errors': [float(v) for v in self.errors],
            'width_factor': self.width_factor,
            'offset': self.offset,
        }


def _blob(geometry, col, row, sigma):
    g = geometry.pixel_size
    spec = GaussianSpec(sigma=sigma, peak_convention=PeakConvention.PEAK_ONE)
    return Heatmap(geometry=geometry, values=gaussian_values(Keypoint(x=col * g, y=row * g), geometry, spec))


def _mse_to_target(heatmap, kp, spec):
    return mse_loss(PoseInstance(joints=(kp,), heatmaps=(heatmap,)), TargetKind.GAUSSIAN, spec).total


def _argmax_error(heatmap, kp):
    x, y = decode_argmax(heatmap)
    return math.hypot(x - kp.x, y - kp.y)


def _offset_direction(geometry, col, row):
    """ Unit pixel step along the axis with the most room, and that room in pixels."""
    room = {(1, 0): geometry.width - 1 - col, (-1, 0): col, (0, 1): geometry.height - 1 - row, (0, -1): row}
    direction = max(room, key=room.get)
    return direction, room[direction]


def fig1_witness(geometry, kp, spec=GaussianSpec(), strict=False):
    """ Search a pair of predictions on which MSE-to-Gaussian and argmax localization disagree.

    Heatmap #1 is a Gaussian wider than the target centered on the dot pixel; heatmap #2
    is a target-width Gaussian moved by at least 2 sigma. Returns the first pair with
    MSE #2 < MSE #1 and error #2 > error #1; with strict=True a failed search raises
    WitnessNotFound.
    """
    col, row = containing_pixel(kp, geometry)
    (dx, dy), room = _offset_direction(geometry, col, row)
    first_offset = max(1, math.ceil(2 * spec.sigma))
    attempts = 0
    for offset in range(first_offset, first_offset + WITNESS_OFFSETS):
        if offset > room:
            attempts += len(WITNESS_WIDTHS)
            continue
        shifted = _blob(geometry, col + dx * offset, row + dy * offset, spec.sigma)
        mse2, err2 = _mse_to_target(shifted, kp, spec), _argmax_error(shifted, kp)
        for width in WITNESS_WIDTHS:
            attempts += 1
            wide = _blob(geometry, col, row, spec.sigma * width)
            mse1, err1 = _mse_to_target(wide, kp, spec), _argmax_error(wide, kp)
            if mse2 < mse1 and err2 > err1:
                logger.info('witness after %d attempts: MSE %.6g < %.6g, error %.6g > %.6g',
                            attempts, mse2, mse1, err2, err1)
                return WitnessResult(found=True, attempts=attempts, heatmaps=(wide, shifted), mse=(mse1, mse2),
                                     errors=(err1, err2), width_factor=width, offset=offset)
    logger.warning('no witness pair found after %d attempts (sigma=%g)', attempts, spec.sigma)
    if strict:
        raise WitnessNotFound(attempts)
    return WitnessResult(found=False, attempts=attempts)
