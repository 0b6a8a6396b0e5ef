""" Synthetic keypoint data, trainable heatmap predictors, training loops and ablations.

Every run is a pure function of its RunConfig: data comes from SeedSequence children
of the run seed, model initialization from a seeded torch.Generator, and updates are
plain (optionally safeguarded) gradient descent with torch.optim.SGD.
"""
import csv
import dataclasses
import enum
import json
import logging
import math
import os
import time

import numpy as np
import torch

from hmatch.analysis import ConsistencyTrace, write_trace_csv
from hmatch.decoding import (Decoder, DecodedPose, decode_values, error_rows, evaluate_dataset, mean_decode_error,
                             write_error_csv)
from hmatch.encoders import DemanderMode, GaussianSpec, PeakConvention
from hmatch.errors import DivergenceError
from hmatch.grid import GridGeometry, Keypoint, make_generator, make_rng, spawn_seeds
from hmatch.losses import (GradientMode, TargetKind, demander_tensors, matching_loss_tensor, mse_loss_tensor,
                           target_values)
from hmatch.transport import DTYPE, SinkhornConfig
from hmatch.views import ConfigView

logger = logging.getLogger(__name__)

DISC_RADIUS = 1.5
NOISE_STD = 0.05
LR_FLOOR_FACTOR = 2.0 ** -20
ABLATION_FIELDS = ('axis', 'value', 'mean_error', 'final_loss', 'inconsistency_rate')


class PredictorMode(enum.Enum):
    DIRECT_LOGITS = 'direct_logits'
    SMALL_MODEL = 'small_model'


class LossKind(enum.Enum):
    MATCHING = 'matching'
    MSE_GAUSSIAN = 'mse_gaussian'
    MSE_DOT = 'mse_dot'


class AblationAxis(enum.Enum):
    DEMANDER_MODE = 'demander_mode'
    SINKHORN_ITERATIONS = 'sinkhorn_iterations'


ABLATION_DEFAULTS = {
    AblationAxis.DEMANDER_MODE: (DemanderMode.SUBPIXEL, DemanderMode.NAIVE),
    AblationAxis.SINKHORN_ITERATIONS: (500, 1000, 1500),
}


def _enum_value(enum_cls, text):
    if isinstance(text, enum_cls):
        return text
    return enum_cls(str(text).replace('-', '_'))


@dataclasses.dataclass(frozen=True)
class PredictorSpec:
    mode: PredictorMode = PredictorMode.DIRECT_LOGITS
    model_width: int = 32
    init_scale: float = 1.0
    learning_rate: float = 0.5
    steps: int = 500
    safeguarded: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'mode', _enum_value(PredictorMode, self.mode))
        if self.model_width < 1:
            raise ValueError(f'model_width must be >= 1, got {self.model_width}')
        if not self.init_scale > 0:
            raise ValueError(f'init_scale must be positive, got {self.init_scale}')
        if not self.learning_rate >= 0:
            raise ValueError(f'learning_rate must be >= 0, got {self.learning_rate}')
        if self.steps < 1:
            raise ValueError(f'steps must be >= 1, got {self.steps}')


@dataclasses.dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.MATCHING
    demander_mode: DemanderMode = DemanderMode.SUBPIXEL
    sinkhorn: SinkhornConfig = SinkhornConfig()
    gaussian: GaussianSpec = GaussianSpec()
    gradient: GradientMode = GradientMode.UNROLLED

    def __post_init__(self):
        object.__setattr__(self, 'kind', _enum_value(LossKind, self.kind))
        object.__setattr__(self, 'demander_mode', DemanderMode(self.demander_mode))
        object.__setattr__(self, 'gradient', GradientMode(self.gradient))

    @property
    def decoders(self):
        """ Primary evaluation decoder and, for MSE runs, the secondary one."""
        if self.kind is LossKind.MATCHING:
            return Decoder.EXPECTATION, None
        return Decoder.ARGMAX, Decoder.EXPECTATION


@dataclasses.dataclass(frozen=True)
class RunConfig:
    geometry: GridGeometry = GridGeometry(width=8, height=8, image_scale=4.0)
    n: int = 1
    n_joints: int = 1
    seed: int = 0
    predictor: PredictorSpec = PredictorSpec()
    loss: LossSpec = LossSpec()
    record_every: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f'n must be >= 1, got {self.n}')
        if self.n_joints < 1:
            raise ValueError(f'K must be >= 1, got {self.n_joints}')
        if self.record_every < 1:
            raise ValueError(f'record_every must be >= 1, got {self.record_every}')

    @classmethod
    def from_view(cls, view):
        """ Resolve a ConfigView, filling absent keys with defaults."""
        d = cls()
        geometry = GridGeometry(width=view.get('W', d.geometry.width), height=view.get('H', d.geometry.height),
                                pixel_size=view.get('g', d.geometry.pixel_size),
                                image_scale=view.get('r', d.geometry.image_scale))
        predictor = PredictorSpec(mode=view.get('mode', d.predictor.mode),
                                  model_width=view.get('width', d.predictor.model_width),
                                  init_scale=view.get('init_scale', d.predictor.init_scale),
                                  learning_rate=view.get('lr', d.predictor.learning_rate),
                                  steps=view.get('steps', d.predictor.steps),
                                  safeguarded=view.get('safeguard', d.predictor.safeguarded))
        sinkhorn = SinkhornConfig(lam=view.get('lambda', d.loss.sinkhorn.lam),
                                  iterations=view.get('iterations', d.loss.sinkhorn.iterations),
                                  tol=view.get('tol', d.loss.sinkhorn.tol))
        gaussian = GaussianSpec(sigma=view.get('sigma', d.loss.gaussian.sigma),
                                peak_convention=view.get('convention', d.loss.gaussian.peak_convention.value))
        loss = LossSpec(kind=view.get('loss', d.loss.kind), demander_mode=view.get('demander', d.loss.demander_mode),
                        sinkhorn=sinkhorn, gaussian=gaussian, gradient=view.get('gradient', d.loss.gradient))
        return cls(geometry=geometry, n=view.get('n', d.n), n_joints=view.get('K', d.n_joints),
                   seed=view.get('seed', d.seed), predictor=predictor, loss=loss,
                   record_every=view.get('record_every', d.record_every))

    @classmethod
    def from_file(cls, file):
        return cls.from_view(ConfigView.from_file(file))

    def with_axis(self, axis, value):
        axis = AblationAxis(axis)
        if axis is AblationAxis.DEMANDER_MODE:
            loss = dataclasses.replace(self.loss, demander_mode=DemanderMode(value))
        else:
            loss = dataclasses.replace(self.loss, sinkhorn=dataclasses.replace(self.loss.sinkhorn,
                                                                                iterations=int(value)))
        return dataclasses.replace(self, loss=loss)

    def to_dict(self):
        """ The fully resolved configuration under its config-file keys."""
        return {
            'mode': self.predictor.mode.value,
            'loss': self.loss.kind.value,
            'lambda': self.loss.sinkhorn.lam,
            'iterations': self.loss.sinkhorn.iterations,
            'tol': self.loss.sinkhorn.tol,
            'sigma': self.loss.gaussian.sigma,
            'convention': self.loss.gaussian.peak_convention.value,
            'demander': self.loss.demander_mode.value,
            'gradient': self.loss.gradient.value,
            'lr': self.predictor.learning_rate,
            'steps': self.predictor.steps,
            'width': self.predictor.model_width,
            'init_scale': self.predictor.init_scale,
            'safeguard': self.predictor.safeguarded,
            'seed': self.seed,
            'n': self.n,
            'K': self.n_joints,
            'H': self.geometry.height,
            'W': self.geometry.width,
            'g': self.geometry.pixel_size,
            'r': self.geometry.image_scale,
            'record_every': self.record_every,
        }


@dataclasses.dataclass(frozen=True, eq=False)
class SyntheticSample:
    rendered_input: np.ndarray
    gt_joints: tuple
    seed: int
    geometry: GridGeometry


@dataclasses.dataclass(frozen=True, eq=False)
class RunResult:
    final_metrics: object
    trace: ConsistencyTrace
    config_echo: dict
    wall_time: float
    final_loss: float

    def metrics_dict(self):
        d = self.final_metrics.to_dict()
        d['final_loss'] = self.final_loss
        d['inconsistency_rate'] = self.trace.inconsistency_rate
        if self.trace.alt_errors is not None:
            d[f'inconsistency_rate_{self.trace.alt_decoder}'] = self.trace.alt_inconsistency_rate()
        d['wall_time'] = self.wall_time
        return d


def render_input(joints, geometry, rng):
    """ One noisy disc channel per joint at input resolution (K, r*H, r*W)."""
    r = geometry.image_scale
    height, width = round(r * geometry.height), round(r * geometry.width)
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    channels = []
    for kp in joints:
        cu, cv = geometry.to_image_coords(kp.x, kp.y)
        channels.append((np.hypot(u - cu, v - cv) <= DISC_RADIUS * r).astype(np.float64))
    image = np.stack(channels)
    return image + rng.normal(0.0, NOISE_STD, size=image.shape)


def generate_dataset(n, geometry, n_joints, seed):
    if n < 1:
        raise ValueError(f'dataset size must be >= 1, got {n}')
    samples = []
    for child in spawn_seeds(seed, n):
        rng = make_rng(child)
        joints = tuple(Keypoint(x=float(rng.uniform(0.0, geometry.max_x)), y=float(rng.uniform(0.0, geometry.max_y)))
                       for _ in range(n_joints))
        samples.append(SyntheticSample(rendered_input=render_input(joints, geometry, rng), gt_joints=joints,
                                       seed=child, geometry=geometry))
    return samples


class DirectLogits(torch.nn.Module):
    """ One free logit grid per sample and joint; the input is ignored."""

    def __init__(self, n, n_joints, geometry, init_scale, generator):
        super().__init__()
        init = torch.rand((n, n_joints) + geometry.shape, generator=generator, dtype=DTYPE)
        self.logits = torch.nn.Parameter(init * init_scale)

    def forward(self, inputs):
        return self.logits


class HeatmapMLP(torch.nn.Module):
    """ Rendered input -> tanh hidden layer -> K heatmaps."""

    def __init__(self, in_features, n_joints, geometry, width, init_scale, generator):
        super().__init__()
        self.out_shape = (n_joints,) + geometry.shape
        self.hidden = torch.nn.utils.skip_init(torch.nn.Linear, in_features, width, dtype=DTYPE)
        self.output = torch.nn.utils.skip_init(torch.nn.Linear, width, math.prod(self.out_shape), dtype=DTYPE)
        with torch.no_grad():
            for layer in (self.hidden, self.output):
                bound = init_scale / math.sqrt(layer.in_features)
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.uniform_(-bound, bound, generator=generator)

    def forward(self, inputs):
        hidden = torch.tanh(self.hidden(inputs.flatten(1)))
        return self.output(hidden).view((-1,) + self.out_shape)


def build_predictor(spec, dataset, generator):
    geometry = dataset[0].geometry
    n_joints = len(dataset[0].gt_joints)
    if spec.mode is PredictorMode.DIRECT_LOGITS:
        return DirectLogits(len(dataset), n_joints, geometry, spec.init_scale, generator)
    return HeatmapMLP(dataset[0].rendered_input.size, n_joints, geometry, spec.model_width, spec.init_scale,
                      generator)


def build_objective(loss, keypoints, geometry, n_joints):
    """ Map (n, K, H, W) predictions to per-sample losses (n,), summed over joints."""
    shape = geometry.shape
    if loss.kind is LossKind.MATCHING:
        masses, cost = demander_tensors(keypoints, geometry, loss.demander_mode)

        def objective(heatmaps):
            losses, degenerate = matching_loss_tensor(heatmaps.reshape((-1,) + shape), masses, cost,
                                                      loss.sinkhorn, loss.gradient)
            losses = torch.where(degenerate, torch.zeros_like(losses), losses)
            return losses.view(-1, n_joints).sum(dim=1)
        return objective

    target = TargetKind.DOT if loss.kind is LossKind.MSE_DOT else TargetKind.GAUSSIAN
    targets = np.stack([target_values(kp, geometry, target, loss.gaussian) for kp in keypoints])
    targets = torch.as_tensor(targets, dtype=DTYPE).view((-1, n_joints) + shape)

    def objective(heatmaps):
        return mse_loss_tensor(heatmaps, targets).sum(dim=1)
    return objective


def _decode(heatmaps, geometry, decoder):
    values = heatmaps.detach().numpy().reshape((-1,) + geometry.shape)
    return decode_values(values, geometry, decoder, strict=False)


def _safeguarded_step(optimizer, params, closure, current, floor):
    """ Take the SGD step, halving the learning rate and retrying while the loss rises."""
    snapshot = [p.detach().clone() for p in params]
    while True:
        optimizer.step()
        with torch.no_grad():
            trial = float(closure())
        if trial <= current:
            return
        with torch.no_grad():
            for p, saved in zip(params, snapshot):
                p.copy_(saved)
        for group in optimizer.param_groups:
            group['lr'] /= 2
        lr = optimizer.param_groups[0]['lr']
        logger.warning('loss rose to %.6g from %.6g; step undone, lr halved to %.3g', trial, current, lr)
        if lr < floor:
            return


def train(dataset, predictor=PredictorSpec(), loss=LossSpec(), seed=0, record_every=1, config_echo=None):
    if not dataset:
        raise ValueError('training needs a nonempty dataset')
    start = time.perf_counter()
    geometry = dataset[0].geometry
    n_joints = len(dataset[0].gt_joints)
    keypoints = [kp for sample in dataset for kp in sample.gt_joints]
    inputs = torch.as_tensor(np.stack([s.rendered_input for s in dataset]), dtype=DTYPE)

    model = build_predictor(predictor, dataset, make_generator(seed))
    params = list(model.parameters())
    objective = build_objective(loss, keypoints, geometry, n_joints)
    optimizer = torch.optim.SGD(params, lr=predictor.learning_rate)
    # direct logits are independent per sample, so their step is taken on the summed loss
    reduce = torch.sum if predictor.mode is PredictorMode.DIRECT_LOGITS else torch.mean
    decoder, alt_decoder = loss.decoders
    floor = predictor.learning_rate * LR_FLOOR_FACTOR

    steps, losses, errors, alt_errors = [], [], [], []
    for step in range(predictor.steps + 1):
        optimizer.zero_grad()
        heatmaps = model(inputs)
        per_sample = objective(heatmaps)
        value = float(per_sample.mean())
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        if step % record_every == 0 or step == predictor.steps:
            steps.append(step)
            losses.append(value)
            errors.append(mean_decode_error(heatmaps.detach().numpy(), keypoints, geometry, decoder))
            if alt_decoder is not None:
                alt_errors.append(mean_decode_error(heatmaps.detach().numpy(), keypoints, geometry, alt_decoder))
            logger.info('step %d: loss %.6g, %s error %.4g', step, value, decoder.value, errors[-1])
        if step == predictor.steps:
            break
        reduce(per_sample).backward()
        if predictor.safeguarded:
            _safeguarded_step(optimizer, params, lambda: objective(model(inputs)).mean(), value, floor)
        else:
            optimizer.step()

    coords, origins = _decode(heatmaps, geometry, decoder)
    scale = geometry.image_scale / geometry.pixel_size
    decoded = [DecodedPose(coords=c, image_coords=c * scale, window_origin=o)
               for c, o in zip(np.split(coords, len(dataset)), np.split(origins, len(dataset)))]
    metrics = evaluate_dataset(decoded, [s.gt_joints for s in dataset])
    trace = ConsistencyTrace.from_series(steps, losses, errors, decoder=decoder.value,
                                         alt_errors=alt_errors if alt_decoder is not None else None,
                                         alt_decoder=alt_decoder.value if alt_decoder is not None else None)
    return RunResult(final_metrics=metrics, trace=trace, config_echo=config_echo or {},
                     wall_time=time.perf_counter() - start, final_loss=losses[-1])


def run(config, dataset=None):
    """ Train under a RunConfig, generating its dataset unless one is given."""
    if dataset is None:
        dataset = generate_dataset(config.n, config.geometry, config.n_joints, config.seed)
    return train(dataset, config.predictor, config.loss, seed=config.seed, record_every=config.record_every,
                 config_echo=config.to_dict())


def write_run(result, directory):
    os.makedirs(directory, exist_ok=True)
    write_trace_csv(result.trace, os.path.join(directory, 'trace.csv'))
    rows = error_rows(result.final_metrics.errors, result.trace.decoder)
    write_error_csv(rows, os.path.join(directory, 'errors.csv'))
    with open(os.path.join(directory, 'metrics.json'), mode='w', encoding='utf-8') as f:
        json.dump(result.metrics_dict(), f, indent=2, sort_keys=True)
    with open(os.path.join(directory, 'config_echo.json'), mode='w', encoding='utf-8') as f:
        json.dump(result.config_echo, f, indent=2, sort_keys=True)
    logger.info('wrote run outputs to %s', directory)


def _axis_label(value):
    return value.value if isinstance(value, enum.Enum) else str(value)


def run_ablation(axis, base, values=None, dataset=None, directory=None):
    """ One run per axis value on shared data and seed; returns RunResults in value order."""
    axis = AblationAxis(axis)
    if base.loss.kind is not LossKind.MATCHING:
        raise ValueError(f'ablation axis {axis.value} only applies to the matching loss')
    values = ABLATION_DEFAULTS[axis] if values is None else values
    if dataset is None:
        dataset = generate_dataset(base.n, base.geometry, base.n_joints, base.seed)
    results, rows = [], []
    for value in values:
        label = _axis_label(value)
        logger.info('ablation run %s=%s', axis.value, label)
        result = run(base.with_axis(axis, value), dataset)
        results.append(result)
        rows.append({'axis': axis.value, 'value': label, 'mean_error': repr(result.final_metrics.mean_error),
                     'final_loss': repr(result.final_loss),
                     'inconsistency_rate': repr(result.trace.inconsistency_rate)})
        if directory is not None:
            write_run(result, os.path.join(directory, f'{axis.value}-{label}'))
    if directory is not None:
        with open(os.path.join(directory, 'ablation.csv'), mode='w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=ABLATION_FIELDS)
            writer.writeheader()
            writer.writerows(rows)
    return results


def standard_suite(seed=0, n=200, n_joints=3, steps=200):
    """ Matching and MSE-Gaussian configs sharing data and seed, for comparing consistency."""
    geometry = GridGeometry(width=8, height=8, image_scale=4.0)
    gaussian = GaussianSpec(sigma=2.0, peak_convention=PeakConvention.PEAK_ONE)
    matching = RunConfig(geometry=geometry, n=n, n_joints=n_joints, seed=seed,
                         predictor=PredictorSpec(learning_rate=0.5, steps=steps),
                         loss=LossSpec(kind=LossKind.MATCHING, gaussian=gaussian))
    mse = dataclasses.replace(matching, predictor=PredictorSpec(learning_rate=0.05, steps=steps),
                              loss=LossSpec(kind=LossKind.MSE_GAUSSIAN, gaussian=gaussian))
    return {'matching': matching, 'mse_gaussian': mse}


def run_suite(configs, directory=None):
    """ Run every config of a suite on the dataset of the first one."""
    first = next(iter(configs.values()))
    dataset = generate_dataset(first.n, first.geometry, first.n_joints, first.seed)
    results = {}
    for name, config in configs.items():
        results[name] = run(config, dataset)
        if directory is not None:
            write_run(results[name], os.path.join(directory, name))
    return results
