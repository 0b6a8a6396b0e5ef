""" Per-joint losses over pose instances and their gradients with respect to heatmap values.

The matching loss sums, over visible joints, the cost <C, p_reg> of the regularized
transport plan between the joint's suppliers and demanders. Gradients come from
reverse-mode differentiation through the unrolled Sinkhorn iterations, the L1
normalization and the relu, or (as an oracle) from the implicit function theorem
applied to the converged plan.
"""
import dataclasses
import enum
import logging

import numpy as np
import torch

from hmatch.encoders import (DEGENERATE_MASS, DemanderMode, GaussianSpec, build_demanders, dot_values,
                             gaussian_values)
from hmatch.errors import EmptyLossError
from hmatch.grid import Heatmap, Keypoint, PoseInstance, make_rng, spawn_seeds
from hmatch.transport import DTYPE, SinkhornConfig, pairwise_distances, solve_plan

logger = logging.getLogger(__name__)

NEGLIGIBLE_MASS = 1e-150


class GradientMode(enum.Enum):
    UNROLLED = 'unrolled'
    IMPLICIT = 'implicit'


class TargetKind(enum.Enum):
    GAUSSIAN = 'gaussian'
    DOT = 'dot'


@dataclasses.dataclass(frozen=True, eq=False)
class LossReport:
    per_joint: np.ndarray
    total: float
    gradients: list
    masked: np.ndarray

    def to_dict(self):
        return {
            'per_joint': [float(v) for v in self.per_joint],
            'total': float(self.total),
            'masked': [bool(m) for m in self.masked],
        }


@dataclasses.dataclass(frozen=True)
class GradientCheck:
    relative_error: float
    max_abs_error: float
    against: str


def supplier_masses(heatmaps):
    """ relu + L1 normalization over the trailing (H, W) axes.

    Returns (masses (..., H*W), degenerate (...)). Degenerate grids get uniform masses
    and no gradient.
    """
    positive = torch.relu(heatmaps.flatten(-2))
    total = positive.sum(dim=-1, keepdim=True)
    degenerate = total < DEGENERATE_MASS
    safe_total = torch.where(degenerate, torch.ones_like(total), total)
    uniform = torch.full_like(positive, 1.0 / positive.shape[-1])
    masses = torch.where(degenerate, uniform, positive / safe_total)
    return masses, degenerate.squeeze(-1)


def demander_tensors(keypoints, geometry, mode):
    """ Stack demanders of visible keypoints into (B, M) masses and (B, N, M) costs."""
    demanders = [build_demanders(kp, geometry, mode) for kp in keypoints]
    masses = np.stack([d.masses for d in demanders])
    cost = pairwise_distances(geometry.centers(), np.stack([d.locations for d in demanders]))
    return torch.as_tensor(masses, dtype=DTYPE), torch.as_tensor(cost, dtype=DTYPE)


def matching_loss_tensor(heatmaps, demander_masses, cost, cfg=SinkhornConfig(), gradient=GradientMode.UNROLLED):
    """ Differentiable per-item loss for a (B, H, W) stack; returns (losses (B,), degenerate (B,))."""
    if GradientMode(gradient) is GradientMode.IMPLICIT:
        return ImplicitMatchingLoss.apply(heatmaps, demander_masses, cost, cfg)
    masses, degenerate = supplier_masses(heatmaps)
    plan, _ = solve_plan(masses, demander_masses, cost, cfg)
    return (plan * cost).sum(dim=(-2, -1)), degenerate


def mse_loss_tensor(heatmaps, targets):
    return ((heatmaps - targets) ** 2).sum(dim=(-2, -1))


def implicit_gradient(values, plan, cost):
    """ d<C, P>/dH at a converged plan P, by the implicit function theorem.

    The marginal conditions P1 = a, P^T 1 = b are differentiated with respect to the
    log-domain potentials (f, g); the gauge direction (1, -1) is resolved by a
    minimum-norm least-squares solve and drops out after the normalization Jacobian.
    """
    flat = values.reshape(-1)
    positive = np.maximum(flat, 0.0)
    total = positive.sum()
    if total < DEGENERATE_MASS:
        return np.zeros(values.shape)
    a = positive / total
    rows = np.flatnonzero(a > 0)
    # zero-mass demanders still carry ~LOG_FLOOR columns
    cols = np.flatnonzero(plan.sum(axis=0) > NEGLIGIBLE_MASS)
    p = plan[np.ix_(rows, cols)]
    c = cost[np.ix_(rows, cols)]
    n = len(rows)
    jac = np.block([[np.diag(p.sum(axis=1)), p], [p.T, np.diag(p.sum(axis=0))]])
    rhs = np.concatenate([(c * p).sum(axis=1), (c * p).sum(axis=0)])
    mu = np.linalg.lstsq(jac, rhs, rcond=None)[0]
    dl_da = np.zeros_like(flat)
    dl_da[rows] = mu[:n]
    grad = np.where(flat > 0, (dl_da - a @ dl_da) / total, 0.0)
    return grad.reshape(values.shape)


class ImplicitMatchingLoss(torch.autograd.Function):
    """ Matching loss whose backward pass is the implicit gradient at the returned plan."""

    @staticmethod
    def forward(ctx, heatmaps, demander_masses, cost, cfg):
        masses, degenerate = supplier_masses(heatmaps)
        plan, _ = solve_plan(masses, demander_masses, cost, cfg)
        cost = cost.expand_as(plan).contiguous()
        ctx.save_for_backward(heatmaps, plan, cost)
        ctx.mark_non_differentiable(degenerate)
        return (plan * cost).sum(dim=(-2, -1)), degenerate

    @staticmethod
    def backward(ctx, grad_losses, _grad_degenerate):
        heatmaps, plan, cost = ctx.saved_tensors
        grads = [implicit_gradient(v, p, c) for v, p, c in
                 zip(heatmaps.detach().numpy(), plan.numpy(), cost.numpy())]
        grad = torch.as_tensor(np.stack(grads), dtype=heatmaps.dtype)
        return grad * grad_losses[:, None, None], None, None, None


def _visible(instance):
    return [k for k, kp in enumerate(instance.joints) if kp.visible]


def matching_loss(instance, demander_mode=DemanderMode.SUBPIXEL, cfg=SinkhornConfig(),
                  gradient=GradientMode.UNROLLED):
    geometry = instance.geometry
    n_joints = instance.n_joints
    visible = _visible(instance)
    per_joint = np.zeros(n_joints)
    masked = np.ones(n_joints, dtype=bool)
    gradients = [np.zeros(geometry.shape) for _ in range(n_joints)]
    if not visible:
        raise EmptyLossError('every joint is invisible')

    demander_masses, cost = demander_tensors([instance.joints[k] for k in visible], geometry, demander_mode)
    heatmaps = torch.tensor(instance.stacked()[visible], dtype=DTYPE, requires_grad=True)
    losses, degenerate = matching_loss_tensor(heatmaps, demander_masses, cost, cfg, gradient)
    active = ~degenerate
    if not torch.any(active):
        raise EmptyLossError('every visible joint has a degenerate (all nonpositive) heatmap')
    for k, is_degenerate in zip(visible, degenerate.tolist()):
        if is_degenerate:
            logger.warning('joint %d has a degenerate heatmap and is masked', k)
    total = losses[active].sum()
    total.backward()
    joint_grads = heatmaps.grad.numpy()
    values = losses.detach().numpy()

    for i, k in enumerate(visible):
        per_joint[k] = float(values[i])
        if active[i]:
            masked[k] = False
            gradients[k] = joint_grads[i].copy()
    return LossReport(per_joint=per_joint, total=float(total.detach()), gradients=gradients, masked=masked)


def target_values(kp, geometry, target=TargetKind.GAUSSIAN, spec=GaussianSpec()):
    if TargetKind(target) is TargetKind.DOT:
        return dot_values(kp, geometry)
    return gaussian_values(kp, geometry, spec)


def mse_loss(instance, target=TargetKind.GAUSSIAN, spec=GaussianSpec()):
    geometry = instance.geometry
    n_joints = instance.n_joints
    visible = _visible(instance)
    if not visible:
        raise EmptyLossError('every joint is invisible')
    per_joint = np.zeros(n_joints)
    masked = np.ones(n_joints, dtype=bool)
    gradients = [np.zeros(geometry.shape) for _ in range(n_joints)]
    for k in visible:
        residual = instance.heatmaps[k].values - target_values(instance.joints[k], geometry, target, spec)
        per_joint[k] = float(np.sum(residual ** 2))
        gradients[k] = 2.0 * residual
        masked[k] = False
    return LossReport(per_joint=per_joint, total=float(per_joint[~masked].sum()), gradients=gradients,
                      masked=masked)


def central_differences(batch_loss, values, step=1e-5):
    """ Central-difference gradient of a scalar loss of one (H, W) grid.

    batch_loss maps a (B, H, W) numpy stack to B loss values; all 2*H*W perturbed
    grids are evaluated in one call.
    """
    size = values.size
    offsets = np.eye(size).reshape((size,) + values.shape) * step
    stack = np.concatenate([values + offsets, values - offsets])
    losses = np.asarray(batch_loss(stack))
    return ((losses[:size] - losses[size:]) / (2 * step)).reshape(values.shape)


def finite_difference_gradients(instance, loss='matching', demander_mode=DemanderMode.SUBPIXEL,
                                cfg=SinkhornConfig(), target=TargetKind.GAUSSIAN, spec=GaussianSpec(),
                                step=1e-5):
    """ Central differences of the total loss with respect to every heatmap entry."""
    geometry = instance.geometry
    gradients = [np.zeros(geometry.shape) for _ in range(instance.n_joints)]
    for k in _visible(instance):
        kp = instance.joints[k]
        if loss == 'matching':
            demander_masses, cost = demander_tensors([kp], geometry, demander_mode)

            def batch_loss(stack):
                with torch.no_grad():
                    losses, degenerate = matching_loss_tensor(torch.as_tensor(stack, dtype=DTYPE),
                                                              demander_masses, cost, cfg)
                return torch.where(degenerate, torch.zeros_like(losses), losses).numpy()
        else:
            targets = target_values(kp, geometry, target, spec)

            def batch_loss(stack):
                return np.sum((stack - targets) ** 2, axis=(-2, -1))
        gradients[k] = central_differences(batch_loss, instance.heatmaps[k].values, step=step)
    return gradients


def relative_error(analytic, reference):
    a = np.concatenate([g.reshape(-1) for g in analytic])
    r = np.concatenate([g.reshape(-1) for g in reference])
    scale = max(np.linalg.norm(a), np.linalg.norm(r), np.finfo(float).tiny)
    return float(np.linalg.norm(a - r) / scale), float(np.max(np.abs(a - r)))


def check_gradients(instance, demander_mode=DemanderMode.SUBPIXEL, cfg=SinkhornConfig(),
                    against='finite-difference', step=1e-5):
    """ Compare unrolled matching-loss gradients with finite differences or the implicit oracle."""
    report = matching_loss(instance, demander_mode, cfg, GradientMode.UNROLLED)
    if against == 'implicit':
        reference = matching_loss(instance, demander_mode, cfg, GradientMode.IMPLICIT).gradients
    elif against == 'finite-difference':
        reference = finite_difference_gradients(instance, 'matching', demander_mode, cfg, step=step)
    else:
        raise ValueError(f'unknown gradient reference {against!r}')
    rel, max_abs = relative_error(report.gradients, reference)
    logger.debug('gradient check against %s: relative error %.3g', against, rel)
    return GradientCheck(relative_error=rel, max_abs_error=max_abs, against=against)


def random_instance(geometry, n_joints=1, seed=0, margin=0.1):
    """ Random pose instance whose heatmap entries stay at least `margin` away from the relu kink."""
    rng = make_rng(seed)
    heatmaps, joints = [], []
    for _ in range(n_joints):
        magnitude = rng.uniform(margin, 1.0, size=geometry.shape)
        sign = np.where(rng.random(geometry.shape) < 0.8, 1.0, -1.0)
        heatmaps.append(Heatmap(geometry=geometry, values=magnitude * sign))
        joints.append(Keypoint(x=float(rng.uniform(0, geometry.max_x)), y=float(rng.uniform(0, geometry.max_y))))
    return PoseInstance(joints=joints, heatmaps=heatmaps)


def gradient_suite(geometry, trials, demander_mode=DemanderMode.SUBPIXEL, cfg=SinkhornConfig(),
                   against='finite-difference', step=1e-5, seed=0):
    """ check_gradients over `trials` random single-joint instances; returns the checks."""
    return [check_gradients(random_instance(geometry, seed=child), demander_mode, cfg, against, step)
            for child in spawn_seeds(seed, trials)]
