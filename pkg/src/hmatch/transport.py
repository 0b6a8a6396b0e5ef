""" Optimal transport between supplier and demander distributions.

Exact EMD is solved with the network simplex from POT. The regularized EMD is
solved by Sinkhorn scaling on the dual potentials in the log domain, with kernel
exp(-lambda * C); every update is a torch operation, so gradients flow through the
unrolled iterations.
"""
import dataclasses
import logging

import numpy as np
import ot
import torch

from hmatch.encoders import DemanderSet, SupplierSet
from hmatch.errors import BalanceError, NumericError
from hmatch.grid import make_rng

logger = logging.getLogger(__name__)

BALANCE_TOL = 1e-9
# smallest mass fed to log(); zero-mass rows and columns end up carrying ~1e-300
LOG_FLOOR = 1e-300
DTYPE = torch.float64


@dataclasses.dataclass(frozen=True)
class SinkhornConfig:
    lam: float = 1.0
    iterations: int = 1000
    log_domain: bool = True
    tol: float = None
    check_every: int = 10

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f'lambda must be positive, got {self.lam}')
        if self.iterations < 1:
            raise ValueError(f'iterations must be >= 1, got {self.iterations}')
        if self.tol is not None and not self.tol > 0:
            raise ValueError(f'tol must be positive, got {self.tol}')
        if self.check_every < 1:
            raise ValueError(f'check_every must be >= 1, got {self.check_every}')


@dataclasses.dataclass(frozen=True, eq=False)
class CostMatrix:
    entries: np.ndarray

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.float64)
        if entries.ndim != 2:
            raise ValueError(f'cost matrix must be 2-D, got shape {entries.shape}')
        if not np.all(np.isfinite(entries)) or np.any(entries < 0):
            raise ValueError('cost entries must be finite and nonnegative')
        object.__setattr__(self, 'entries', entries)

    @property
    def shape(self):
        return self.entries.shape


@dataclasses.dataclass(frozen=True, eq=False)
class TransportPlan:
    coupling: np.ndarray
    objective: float
    marginal_residual: float
    iterations: int = 0


def pairwise_distances(a, b):
    """ Euclidean distances between (..., N, 2) and (..., M, 2) point sets."""
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.hypot(diff[..., 0], diff[..., 1])


def build_cost(suppliers, demanders):
    if not len(suppliers) or not len(demanders):
        raise ValueError('cost needs nonempty supplier and demander sets')
    return CostMatrix(entries=pairwise_distances(suppliers.locations, demanders.locations))


def marginal_residual(coupling, a, b):
    rows = np.abs(coupling.sum(axis=1) - a).max()
    cols = np.abs(coupling.sum(axis=0) - b).max()
    return float(max(rows, cols))


def assert_conserved(coupling, a, b, residual):
    """ Row and column sums reproduce a and b within the reported residual (skipped under python -O)."""
    assert np.all(coupling >= 0), 'coupling has negative entries'
    assert np.all(np.abs(coupling.sum(axis=-1) - a) <= residual + 1e-15), 'row sums drift past the residual'
    assert np.all(np.abs(coupling.sum(axis=-2) - b) <= residual + 1e-15), 'column sums drift past the residual'


def check_balance(a, b, tol=BALANCE_TOL):
    supply, demand = float(np.sum(a)), float(np.sum(b))
    if abs(supply - demand) > tol:
        raise BalanceError(supply, demand)


def _as_arrays(suppliers, demanders, cost):
    a = np.asarray(suppliers.masses, dtype=np.float64)
    b = np.asarray(demanders.masses, dtype=np.float64)
    if cost.shape != (len(a), len(b)):
        raise ValueError(f'cost shape {cost.shape} does not match {len(a)} suppliers x {len(b)} demanders')
    check_balance(a, b)
    return a, b


def emd_exact(suppliers, demanders, cost):
    """ Exact EMD: an optimal vertex of the transportation polytope."""
    a, b = _as_arrays(suppliers, demanders, cost)
    # POT wants identical totals; absorb sub-tolerance drift into b
    b = b * (a.sum() / b.sum())
    coupling = ot.emd(a, b, cost.entries, numItermax=1_000_000)
    objective = float(np.sum(coupling * cost.entries))
    residual = marginal_residual(coupling, a, b)
    assert_conserved(coupling, a, b, residual)
    logger.debug('exact EMD %dx%d: objective=%.12g residual=%.3g', len(a), len(b), objective, residual)
    return TransportPlan(coupling=coupling, objective=objective, marginal_residual=residual)


def safe_log(masses):
    return torch.log(torch.clamp(masses, min=LOG_FLOOR))


def sinkhorn_log_plan(log_a, log_b, cost, lam, iterations, tol=None, check_every=10):
    """ Log-domain Sinkhorn over any leading batch shape.

    log_a: (..., N), log_b: (..., M), cost: (..., N, M). Runs `iterations` alternating
    updates of the dual potentials f (rows) then g (columns), starting from g = 0, and
    returns (plan, iterations_run). After the final column update the column marginals
    hold exactly; the residual is in the rows. With `tol`, stops early once every row
    residual in the batch is below it (checked every `check_every` iterations).
    """
    log_kernel = -lam * cost
    g = torch.zeros_like(log_b)
    for it in range(1, iterations + 1):
        f = log_a - torch.logsumexp(log_kernel + g.unsqueeze(-2), dim=-1)
        g = log_b - torch.logsumexp(log_kernel + f.unsqueeze(-1), dim=-2)
        if tol is not None and it % check_every == 0:
            with torch.no_grad():
                rows = torch.exp(log_kernel + f.unsqueeze(-1) + g.unsqueeze(-2)).sum(dim=-1)
                if torch.max(torch.abs(rows - torch.exp(log_a))) < tol:
                    break
    plan = torch.exp(log_kernel + f.unsqueeze(-1) + g.unsqueeze(-2))
    return plan, it


def sinkhorn_kernel_plan(a, b, cost, lam, iterations, tol=None, check_every=10):
    """ Plain matrix scaling u = a / Kv, v = b / K^T u. Fails loudly when exp(-lambda C) under/overflows."""
    kernel = torch.exp(-lam * cost)
    if torch.any(kernel.sum(dim=-1) == 0) or torch.any(kernel.sum(dim=-2) == 0):
        raise NumericError(f'kernel exp(-lambda*C) underflows at lambda={lam}; use log_domain=True')
    v = torch.ones_like(b)
    for it in range(1, iterations + 1):
        u = a / (kernel @ v.unsqueeze(-1)).squeeze(-1)
        v = b / (kernel.transpose(-1, -2) @ u.unsqueeze(-1)).squeeze(-1)
        if not (torch.all(torch.isfinite(u)) and torch.all(torch.isfinite(v))):
            raise NumericError(f'scaling vectors overflowed at iteration {it} (lambda={lam}); use log_domain=True')
        if tol is not None and it % check_every == 0:
            with torch.no_grad():
                rows = (u.unsqueeze(-1) * kernel * v.unsqueeze(-2)).sum(dim=-1)
                if torch.max(torch.abs(rows - a)) < tol:
                    break
    return u.unsqueeze(-1) * kernel * v.unsqueeze(-2), it


def solve_plan(a, b, cost, cfg):
    """ Differentiable Sinkhorn plan for torch marginals a (..., N), b (..., M) and cost (..., N, M)."""
    if cfg.log_domain:
        return sinkhorn_log_plan(safe_log(a), safe_log(b), cost, cfg.lam, cfg.iterations,
                                 tol=cfg.tol, check_every=cfg.check_every)
    return sinkhorn_kernel_plan(a, b, cost, cfg.lam, cfg.iterations, tol=cfg.tol, check_every=cfg.check_every)


def sinkhorn(suppliers, demanders, cost, cfg=SinkhornConfig()):
    """ Regularized EMD plan; the objective is <C, p_reg> without the entropy term."""
    a, b = _as_arrays(suppliers, demanders, cost)
    with torch.no_grad():
        plan, iterations = solve_plan(torch.from_numpy(a), torch.from_numpy(b),
                                      torch.from_numpy(cost.entries), cfg)
    coupling = plan.numpy()
    objective = float(np.sum(coupling * cost.entries))
    residual = marginal_residual(coupling, a, b)
    assert_conserved(coupling, a, b, residual)
    if cfg.tol is not None and residual > cfg.tol:
        logger.warning('Sinkhorn stopped at %d iterations with residual %.3g above tol %.3g',
                       iterations, residual, cfg.tol)
    logger.debug('Sinkhorn %dx%d lambda=%g: %d iterations, objective=%.12g residual=%.3g',
                 len(a), len(b), cfg.lam, iterations, objective, residual)
    return TransportPlan(coupling=coupling, objective=objective, marginal_residual=residual,
                         iterations=iterations)


def sinkhorn_batch(a, b, cost, cfg=SinkhornConfig()):
    """ Solve a stack of problems at once; a (B, N), b (B, M), cost (B, N, M) numpy arrays.

    Returns (objectives, residuals, couplings). Padding suppliers with zero mass lets
    problems of different sizes share one solve.
    """
    for i in range(len(a)):
        check_balance(a[i], b[i])
    with torch.no_grad():
        plan, _ = solve_plan(torch.as_tensor(a, dtype=DTYPE), torch.as_tensor(b, dtype=DTYPE),
                             torch.as_tensor(cost, dtype=DTYPE), cfg)
    couplings = plan.numpy()
    objectives = np.sum(couplings * cost, axis=(-2, -1))
    residuals = np.array([marginal_residual(p, ai, bi) for p, ai, bi in zip(couplings, a, b)])
    for p, ai, bi, res in zip(couplings, a, b, residuals):
        assert_conserved(p, ai, bi, res)
    return objectives, residuals, couplings


@dataclasses.dataclass(frozen=True)
class OracleComparison:
    trials: int
    max_gap: float
    max_residual: float
    mean_gap: float

    def to_dict(self):
        return dataclasses.asdict(self)


def random_problem(n, m, rng):
    """ Balanced problem with Dirichlet masses on uniform points of the unit square."""
    suppliers = SupplierSet(masses=rng.dirichlet(np.ones(n)), locations=rng.uniform(size=(n, 2)))
    demanders = DemanderSet(masses=rng.dirichlet(np.ones(m)), locations=rng.uniform(size=(m, 2)))
    return suppliers, demanders, build_cost(suppliers, demanders)


def compare_with_exact(n, m, trials, cfg=SinkhornConfig(), seed=0):
    """ Sinkhorn objectives against exact EMD over random problems."""
    if trials < 1:
        raise ValueError(f'trials must be >= 1, got {trials}')
    rng = make_rng(seed)
    problems = [random_problem(n, m, rng) for _ in range(trials)]
    objectives, residuals, _ = sinkhorn_batch(np.stack([s.masses for s, _, _ in problems]),
                                              np.stack([d.masses for _, d, _ in problems]),
                                              np.stack([c.entries for _, _, c in problems]), cfg)
    exact = np.array([emd_exact(*problem).objective for problem in problems])
    gaps = np.abs(objectives - exact)
    return OracleComparison(trials=trials, max_gap=float(max(gaps)), max_residual=float(max(residuals)),
                            mean_gap=float(np.mean(gaps)))
