#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""Convex solver for the small structured problems emitted by both control layers.

Problems have the canonical form

    minimize    0.5 x'Px + q'x + r
    subject to  A_eq x  = b_eq
                A_in x <= b_in
                lower <= x <= upper
                x_i^2 + x_j^2 <= radius^2      (one per disk)

The solver stacks every constraint as rows of one matrix, ``A x ∈ C``, where C
is a product of intervals and disks, and runs an operator-splitting iteration
(a cached sparse factorization of the quasi-definite KKT matrix for the
quadratic part, closed-form projections onto C). Equality rows get a stiffer
step parameter. The step parameter is rebalanced from the residual ratio,
and candidate iterates are polished on their detected active set, with active
disks replaced by their tangent line and re-linearized until the tangent
point settles.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.optimize import lsq_linear
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from feederdispatch.errors import DataError

logger = logging.getLogger(__name__)

RHO_MIN = 1e-6
RHO_MAX = 1e6
EQUALITY_RHO_SCALE = 1e3
POLISH_DELTA = 1e-7
POLISH_PASSES = 5
PSD_BLOCK_LIMIT = 3000


class SolverStatus(Enum):
    OPTIMAL = 'optimal'
    MAX_ITER = 'max-iter'
    INFEASIBLE = 'infeasible-certificate'


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and iteration settings of ``solve``."""

    eps: float = 1e-7
    max_iter: int = 20000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adaptive_rho: bool = True
    polish: bool = True
    check_every: int = 25
    infeasibility_window: int = 20
    infeasibility_min_iter: int = 2000

    def __post_init__(self):
        if not self.eps > 0:
            raise DataError("solver.eps must be positive, got {0}".format(self.eps))
        if self.max_iter < 1:
            raise DataError("solver.max_iter must be at least 1, got {0}".format(self.max_iter))
        if not 0 < self.alpha < 2:
            raise DataError("solver.alpha must lie in (0, 2), got {0}".format(self.alpha))
        if not (self.rho > 0 and self.sigma > 0):
            raise DataError("solver.rho and solver.sigma must be positive")
        if self.check_every < 1:
            raise DataError("solver.check_every must be at least 1")


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    primal: float
    complementarity: float

    def within(self, limits):
        return (
            self.stationarity <= limits.stationarity
            and self.primal <= limits.primal
            and self.complementarity <= limits.complementarity
        )

    def to_dict(self):
        return {
            'stationarity': float(self.stationarity),
            'primal': float(self.primal),
            'complementarity': float(self.complementarity),
        }


@dataclass(frozen=True, eq=False)
class StackedConstraints:
    """All constraints as rows of one matrix: interval rows first, then disk pairs."""

    a: sp.csr_matrix
    lower: np.ndarray
    upper: np.ndarray
    n_interval: int
    radii: np.ndarray

    @property
    def m(self):
        return self.a.shape[0]

    @property
    def equality_mask(self):
        mask = np.zeros(self.m, dtype=bool)
        mask[:self.n_interval] = self.lower == self.upper
        return mask

    def project(self, w):
        out = np.empty_like(w)
        k = self.n_interval
        out[:k] = np.clip(w[:k], self.lower, self.upper)
        if self.radii.size:
            out[k:] = project_disks(w[k:].reshape(-1, 2), self.radii).reshape(-1)
        return out


@dataclass(frozen=True, eq=False)
class ConvexProblem:
    """Quadratic cost, linear equalities/inequalities, box bounds and disks.

    ``blocks`` maps names to variable index arrays for callers that assembled
    the problem with ``ProblemBuilder``.
    """

    p: sp.spmatrix
    q: np.ndarray
    r: float = 0.0
    a_eq: sp.spmatrix = None
    b_eq: np.ndarray = None
    a_in: sp.spmatrix = None
    b_in: np.ndarray = None
    disks: np.ndarray = None
    radii: np.ndarray = None
    lower: np.ndarray = None
    upper: np.ndarray = None
    blocks: dict = field(default_factory=dict)
    check_psd: bool = True

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(-1)
        n = q.size
        p = sp.csc_matrix(self.p, dtype=float)
        if p.shape != (n, n):
            raise DataError("quadratic term has shape {0}, expected {1}".format(p.shape, (n, n)))
        a_eq, b_eq = _linear_block(self.a_eq, self.b_eq, n, 'equality')
        a_in, b_in = _linear_block(self.a_in, self.b_in, n, 'inequality')

        disks = np.zeros((0, 2), dtype=int) if self.disks is None else np.array(self.disks, dtype=int).reshape(-1, 2)
        radii = np.zeros(0) if self.radii is None else np.array(self.radii, dtype=float).reshape(-1)
        if radii.size != disks.shape[0]:
            raise DataError("{0} disks but {1} radii".format(disks.shape[0], radii.size))
        if radii.size and not np.all(radii > 0):
            raise DataError("disk radii must be positive")
        if disks.size and (disks.min() < 0 or disks.max() >= n):
            raise DataError("disk variable index out of range for {0} variables".format(n))
        if disks.size and np.any(disks[:, 0] == disks[:, 1]):
            raise DataError("disk constraints need two distinct variables")

        lower = np.full(n, -np.inf) if self.lower is None else np.array(self.lower, dtype=float).reshape(-1)
        upper = np.full(n, np.inf) if self.upper is None else np.array(self.upper, dtype=float).reshape(-1)
        if lower.size != n or upper.size != n:
            raise DataError("box bounds must have one entry per variable ({0})".format(n))
        if np.any(lower > upper):
            bad = int(np.flatnonzero(lower > upper)[0])
            raise DataError("inverted bounds on variable {0}: {1} > {2}".format(bad, lower[bad], upper[bad]))

        asym = abs(p - p.T)
        if asym.nnz and asym.max() > 1e-10 * max(1.0, abs(p).max()):
            raise DataError("quadratic term must be symmetric")

        for key, value in (('p', p), ('q', q), ('a_eq', a_eq), ('b_eq', b_eq), ('a_in', a_in), ('b_in', b_in),
                           ('disks', disks), ('radii', radii), ('lower', lower), ('upper', upper)):
            object.__setattr__(self, key, value)
        object.__setattr__(self, 'r', float(self.r))
        if self.check_psd:
            _check_psd(p)

    @property
    def n(self):
        return self.q.size

    def objective(self, x):
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.p @ x) + self.q @ x + self.r)

    def block(self, x, name):
        return np.asarray(x)[self.blocks[name]]

    @cached_property
    def stacked(self):
        boxed = np.flatnonzero(np.isfinite(self.lower) | np.isfinite(self.upper))
        n = self.n
        box_rows = sp.csr_matrix((np.ones(boxed.size), (np.arange(boxed.size), boxed)), shape=(boxed.size, n))
        k = self.radii.size
        disk_rows = sp.csr_matrix(
            (np.ones(2 * k), (np.arange(2 * k), self.disks.reshape(-1))), shape=(2 * k, n)
        )
        a = sp.vstack([self.a_eq, self.a_in, box_rows, disk_rows], format='csr')
        lower = np.concatenate([self.b_eq, np.full(self.b_in.size, -np.inf), self.lower[boxed]])
        upper = np.concatenate([self.b_eq, self.b_in, self.upper[boxed]])
        return StackedConstraints(a=a, lower=lower, upper=upper, n_interval=lower.size, radii=self.radii)


@dataclass(frozen=True, eq=False)
class SolverSolution:
    x: np.ndarray
    objective: float
    residuals: KktResiduals
    tolerances: KktResiduals
    status: SolverStatus
    iterations: int
    duals: np.ndarray = None
    polished: bool = False
    rho: float = None

    @property
    def optimal(self):
        return self.status is SolverStatus.OPTIMAL


def _linear_block(matrix, rhs, n, label):
    if matrix is None:
        return sp.csr_matrix((0, n)), np.zeros(0)
    matrix = sp.csr_matrix(matrix, dtype=float)
    rhs = np.array(rhs, dtype=float).reshape(-1)
    if matrix.shape[1] != n:
        raise DataError("{0} block has {1} columns, expected {2}".format(label, matrix.shape[1], n))
    if matrix.shape[0] != rhs.size:
        raise DataError("{0} block has {1} rows but {2} right-hand sides".format(label, matrix.shape[0], rhs.size))
    if not np.all(np.isfinite(rhs)):
        raise DataError("{0} right-hand side must be finite".format(label))
    return matrix, rhs


def _check_psd(p):
    """Attempt a Cholesky factorization of every coupled block of P."""
    n = p.shape[0]
    if p.nnz == 0:
        return
    n_components, labels = connected_components(abs(p) > 0, directed=False)
    order = np.argsort(labels, kind='stable')
    bounds = np.searchsorted(labels[order], np.arange(n_components + 1))
    dense_cache = None
    for c in range(n_components):
        members = order[bounds[c]:bounds[c + 1]]
        if members.size > PSD_BLOCK_LIMIT:
            logger.debug("psd check skipped block size=%d", members.size)
            continue
        if members.size == 1:
            if p[members[0], members[0]] < -1e-12:
                raise DataError("quadratic term is not positive semidefinite")
            continue
        if dense_cache is None:
            dense_cache = p.tocsr()
        block = dense_cache[members][:, members].toarray()
        shift = 1e-9 * (1.0 + np.abs(np.diag(block)).max())
        try:
            scipy.linalg.cholesky(block + shift * np.eye(members.size), lower=True)
        except np.linalg.LinAlgError:
            raise DataError("quadratic term is not positive semidefinite")


def project_disk(point, radius):
    """Euclidean projection of a 2-D point onto the closed disk of given radius."""
    if not radius > 0:
        raise DataError("disk radius must be positive, got {0}".format(radius))
    a, b = float(point[0]), float(point[1])
    norm = math.hypot(a, b)
    if norm <= radius:
        return a, b
    scale = radius / norm
    return a * scale, b * scale


def project_disks(points, radii):
    """Row-wise disk projection of a (k, 2) array."""
    points = np.asarray(points, dtype=float)
    norms = np.hypot(points[:, 0], points[:, 1])
    with np.errstate(divide='ignore', invalid='ignore'):
        scale = np.where(norms > radii, radii / norms, 1.0)
    return points * scale[:, None]


def project_box(point, lower, upper):
    """Elementwise clamp into [lower, upper]."""
    lower_arr = np.asarray(lower, dtype=float)
    upper_arr = np.asarray(upper, dtype=float)
    if np.any(lower_arr > upper_arr):
        raise DataError("inverted bounds: lower exceeds upper")
    clipped = np.clip(np.asarray(point, dtype=float), lower_arr, upper_arr)
    if np.ndim(clipped) == 0:
        return float(clipped)
    return clipped


def _clip_duals(stack, y):
    y = np.array(y, dtype=float).reshape(-1)
    k = stack.n_interval
    yl = y[:k]
    yl[(yl > 0) & ~np.isfinite(stack.upper)] = 0.0
    yl[(yl < 0) & ~np.isfinite(stack.lower)] = 0.0
    y[:k] = yl
    return y


def _estimate_duals(problem, x, ax, grad, active_tol):
    """Bounded least-squares multipliers on the constraints active at x."""
    stack = problem.stacked
    k = stack.n_interval
    lin = ax[:k]
    columns = []
    lo = []
    hi = []
    placements = []
    a_csr = stack.a
    for row in range(k):
        lower, upper = stack.lower[row], stack.upper[row]
        if lower == upper:
            sign_lo, sign_hi = -np.inf, np.inf
        elif np.isfinite(upper) and abs(upper - lin[row]) <= active_tol * (1.0 + abs(upper)):
            sign_lo, sign_hi = 0.0, np.inf
        elif np.isfinite(lower) and abs(lin[row] - lower) <= active_tol * (1.0 + abs(lower)):
            sign_lo, sign_hi = -np.inf, 0.0
        else:
            continue
        columns.append(a_csr[row].toarray().reshape(-1))
        lo.append(sign_lo)
        hi.append(sign_hi)
        placements.append((row, None))
    pairs = ax[k:].reshape(-1, 2)
    for d, radius in enumerate(stack.radii):
        norm = math.hypot(pairs[d, 0], pairs[d, 1])
        if norm > 0 and norm >= radius - active_tol * (1.0 + radius):
            normal = pairs[d] / norm
            rows = a_csr[k + 2 * d:k + 2 * d + 2].toarray()
            columns.append(normal @ rows)
            lo.append(0.0)
            hi.append(np.inf)
            placements.append((k + 2 * d, normal))

    y = np.zeros(stack.m)
    if not columns:
        return y
    g = np.column_stack(columns)
    result = lsq_linear(g, -grad, bounds=(np.array(lo), np.array(hi)), method='bvls', tol=1e-14)
    for value, (row, normal) in zip(result.x, placements):
        if normal is None:
            y[row] = value
        else:
            y[row:row + 2] = value * normal
    return y


def kkt_residual(problem, candidate, duals=None, active_tol=1e-6):
    """Stationarity, primal-feasibility and complementarity norms at a candidate.

    Without ``duals`` the multipliers are fitted by bounded least squares on
    the constraints active at the candidate (inactive ones get zero).

    Returns:
        KktResiduals (Euclidean norms).
    """
    x = np.asarray(candidate, dtype=float).reshape(-1)
    if x.size != problem.n:
        raise DataError("candidate has {0} entries, problem has {1} variables".format(x.size, problem.n))
    stack = problem.stacked
    ax = stack.a @ x
    k = stack.n_interval
    lin = ax[:k]
    viol_lin = np.maximum(stack.lower - lin, 0.0) + np.maximum(lin - stack.upper, 0.0)
    pairs = ax[k:].reshape(-1, 2)
    norms = np.hypot(pairs[:, 0], pairs[:, 1]) if pairs.size else np.zeros(0)
    viol_disk = np.maximum(norms - stack.radii, 0.0)
    primal = math.sqrt(float(viol_lin @ viol_lin + viol_disk @ viol_disk))

    grad = problem.p @ x + problem.q
    if duals is None:
        y = _estimate_duals(problem, x, ax, grad, active_tol)
    else:
        if np.size(duals) != stack.m:
            raise DataError("duals have {0} entries, problem has {1} constraint rows".format(np.size(duals), stack.m))
        y = _clip_duals(stack, duals)
    stationarity = float(np.linalg.norm(grad + stack.a.T @ y))

    yl = y[:k]
    comp = 0.0
    upper_side = yl > 0
    lower_side = yl < 0
    if np.any(upper_side):
        comp += float(np.sum(np.abs(yl[upper_side] * (stack.upper[upper_side] - lin[upper_side]))))
    if np.any(lower_side):
        comp += float(np.sum(np.abs(yl[lower_side] * (stack.lower[lower_side] - lin[lower_side]))))
    if pairs.size:
        yd = y[k:].reshape(-1, 2)
        comp += float(np.sum(np.abs(stack.radii * np.hypot(yd[:, 0], yd[:, 1]) - np.sum(yd * pairs, axis=1))))
    return KktResiduals(stationarity=stationarity, primal=primal, complementarity=comp)


class _OperatorSplitting:
    """One solve: iterates, residual bookkeeping, polishing and certificates."""

    def __init__(self, problem, config):
        self.problem = problem
        self.config = config
        self.stack = problem.stacked
        self.a = self.stack.a.tocsc()
        self.at = self.a.T.tocsr()
        self.eq_mask = self.stack.equality_mask
        self.n = problem.n
        self.m = self.stack.m

    def _rho_vector(self, rho):
        return np.where(self.eq_mask, rho * EQUALITY_RHO_SCALE, rho)

    def _factor(self, rho_vec):
        regularized = self.problem.p + self.config.sigma * sp.identity(self.n)
        if not self.m:
            return splu(sp.csc_matrix(regularized))
        kkt = sp.vstack([
            sp.hstack([regularized, self.at]),
            sp.hstack([self.a, -sp.diags(1.0 / rho_vec)]),
        ])
        return splu(sp.csc_matrix(kkt))

    def thresholds(self, x, y):
        eps = self.config.eps
        ax = self.a @ x
        aty = self.at @ y
        px = self.problem.p @ x
        scale_p = max(np.linalg.norm(ax), np.linalg.norm(self.stack.project(ax)))
        return KktResiduals(
            stationarity=eps * (1.0 + max(np.linalg.norm(px), np.linalg.norm(self.problem.q), np.linalg.norm(aty))),
            primal=eps * (1.0 + scale_p),
            complementarity=eps * (1.0 + np.linalg.norm(y)) * (1.0 + scale_p),
        )

    def accept(self, x, y):
        residuals = kkt_residual(self.problem, x, y)
        limits = self.thresholds(x, y)
        return residuals.within(limits), residuals, limits

    def certificate(self, dy):
        """Primal infeasibility certificate from the dual increment."""
        scale = np.max(np.abs(dy)) if dy.size else 0.0
        if scale <= 1e-12:
            return False
        tol = 1e-5 * scale
        if np.max(np.abs(self.at @ dy)) > tol:
            return False
        k = self.stack.n_interval
        dyl = dy[:k]
        if np.any((dyl > tol) & ~np.isfinite(self.stack.upper)) or np.any((dyl < -tol) & ~np.isfinite(self.stack.lower)):
            return False
        upper = np.where(np.isfinite(self.stack.upper), self.stack.upper, 0.0)
        lower = np.where(np.isfinite(self.stack.lower), self.stack.lower, 0.0)
        support = float(upper @ np.maximum(dyl, 0.0) + lower @ np.minimum(dyl, 0.0))
        if self.stack.radii.size:
            pairs = dy[k:].reshape(-1, 2)
            support += float(self.stack.radii @ np.hypot(pairs[:, 0], pairs[:, 1]))
        return support < -tol

    def polish(self, x, z, y):
        """Solve the equality-constrained QP on the active set of (z, y)."""
        stack = self.stack
        k = stack.n_interval
        zl, yl = z[:k], y[:k]
        eq = stack.lower == stack.upper
        with np.errstate(invalid='ignore'):
            low = ~eq & np.isfinite(stack.lower) & (zl - stack.lower < -yl)
            high = ~eq & np.isfinite(stack.upper) & (stack.upper - zl < yl)
        rows = np.flatnonzero(eq | low | high)
        rhs_lin = np.where(high[rows], stack.upper[rows], stack.lower[rows])
        lin_rows = stack.a[rows]

        zp = z[k:].reshape(-1, 2)
        yp = y[k:].reshape(-1, 2)
        z_norm = np.hypot(zp[:, 0], zp[:, 1]) if zp.size else np.zeros(0)
        y_norm = np.hypot(yp[:, 0], yp[:, 1]) if yp.size else np.zeros(0)
        active_disks = np.flatnonzero((stack.radii - z_norm < y_norm) & ((z_norm > 1e-12) | (y_norm > 1e-12)))
        normals = np.zeros((active_disks.size, 2))
        for j, d in enumerate(active_disks):
            normals[j] = zp[d] / z_norm[d] if z_norm[d] > 1e-12 else yp[d] / y_norm[d]

        disk_vars = self.problem.disks[active_disks]
        x_pol = None
        mult = None
        for _ in range(POLISH_PASSES):
            disk_rows = sp.csr_matrix(
                (normals.reshape(-1), (np.repeat(np.arange(active_disks.size), 2), disk_vars.reshape(-1))),
                shape=(active_disks.size, self.n),
            )
            a_act = sp.vstack([lin_rows, disk_rows], format='csc')
            b_act = np.concatenate([rhs_lin, self.problem.radii[active_disks]])
            solved = self._reduced_kkt(a_act, b_act)
            if solved is None:
                return None
            x_pol, mult = solved
            if not active_disks.size:
                break
            points = x_pol[disk_vars]
            norms = np.hypot(points[:, 0], points[:, 1])
            if np.any(norms <= 1e-12):
                break
            new_normals = points / norms[:, None]
            moved = np.max(np.abs(new_normals - normals))
            normals = new_normals if moved > 1e-13 else normals
            if moved <= 1e-13:
                break

        y_pol = np.zeros(self.m)
        y_pol[rows] = mult[:rows.size]
        for j, d in enumerate(active_disks):
            y_pol[k + 2 * d:k + 2 * d + 2] = mult[rows.size + j] * normals[j]
        return x_pol, y_pol

    def _reduced_kkt(self, a_act, b_act):
        n = self.n
        n_act = a_act.shape[0]
        p = self.problem.p
        if n_act:
            k0 = sp.vstack([sp.hstack([p, a_act.T]), sp.hstack([a_act, sp.csc_matrix((n_act, n_act))])], format='csc')
            k_reg = k0 + sp.diags(np.concatenate([np.full(n, POLISH_DELTA), np.full(n_act, -POLISH_DELTA)]))
        else:
            k0 = sp.csc_matrix(p)
            k_reg = k0 + POLISH_DELTA * sp.identity(n)
        rhs = np.concatenate([-self.problem.q, b_act])
        try:
            factor = splu(sp.csc_matrix(k_reg))
        except RuntimeError:
            return None
        sol = factor.solve(rhs)
        scale = 1.0 + np.max(np.abs(rhs)) if rhs.size else 1.0
        for _ in range(25):
            res = rhs - k0 @ sol
            if np.max(np.abs(res)) <= 1e-14 * scale:
                break
            sol = sol + factor.solve(res)
        if not np.all(np.isfinite(sol)):
            return None
        return sol[:n], sol[n:]

    def run(self, x0=None, y0=None):
        cfg = self.config
        problem = self.problem
        stack = self.stack
        n, m = self.n, self.m
        x = np.zeros(n) if x0 is None else np.array(x0, dtype=float).reshape(-1)
        y = np.zeros(m) if y0 is None else np.array(y0, dtype=float).reshape(-1)
        if x.size != n or y.size != m:
            raise DataError("warm start has the wrong size ({0}, {1}) for ({2}, {3})".format(x.size, y.size, n, m))
        z = stack.project(self.a @ x)
        rho = cfg.rho
        rho_vec = self._rho_vector(rho)
        factor = self._factor(rho_vec)

        best = (np.inf, x, y)
        last_polish = np.inf
        history = []
        status = SolverStatus.MAX_ITER
        result = None
        iteration = 0
        for iteration in range(1, cfg.max_iter + 1):
            rhs = np.concatenate([cfg.sigma * x - problem.q, z - y / rho_vec])
            sol = factor.solve(rhs)
            x_tilde = sol[:n]
            z_tilde = z + (sol[n:] - y) / rho_vec
            x_next = cfg.alpha * x_tilde + (1.0 - cfg.alpha) * x
            w = cfg.alpha * z_tilde + (1.0 - cfg.alpha) * z
            z_next = stack.project(w + y / rho_vec)
            y_next = y + rho_vec * (w - z_next)
            dy = y_next - y
            x, z, y = x_next, z_next, y_next

            if iteration % cfg.check_every and iteration != cfg.max_iter:
                continue

            ax = self.a @ x
            px = problem.p @ x
            aty = self.at @ y
            r_p = np.linalg.norm(ax - z)
            r_d = np.linalg.norm(px + problem.q + aty)
            norm_p = max(np.linalg.norm(ax), np.linalg.norm(z))
            norm_d = max(np.linalg.norm(px), np.linalg.norm(aty), np.linalg.norm(problem.q))
            merit = max(r_p / (cfg.eps * (1.0 + norm_p)), r_d / (cfg.eps * (1.0 + norm_d)))
            if not np.isfinite(merit):
                break
            if merit < best[0]:
                best = (merit, x.copy(), y.copy())

            if merit <= 1.0:
                ok, residuals, limits = self.accept(x, y)
                if ok:
                    status = SolverStatus.OPTIMAL
                    result = (x, y, residuals, limits, False)
                    if cfg.polish:
                        polished = self.polish(x, z, y)
                        if polished is not None:
                            ok_pol, res_pol, lim_pol = self.accept(*polished)
                            if ok_pol:
                                result = (polished[0], polished[1], res_pol, lim_pol, True)
                    break

            if cfg.polish and merit <= 1e4 and merit <= last_polish / 10.0:
                last_polish = merit
                polished = self.polish(x, z, y)
                if polished is not None:
                    ok_pol, res_pol, lim_pol = self.accept(*polished)
                    if ok_pol:
                        status = SolverStatus.OPTIMAL
                        result = (polished[0], polished[1], res_pol, lim_pol, True)
                        break

            history.append((r_p, np.linalg.norm(y), r_p / (cfg.eps * (1.0 + norm_p))))
            if self.certificate(dy) or self._stalled(history, iteration):
                status = SolverStatus.INFEASIBLE
                break

            if cfg.adaptive_rho and m:
                ratio_p = r_p / max(norm_p, 1e-30)
                ratio_d = r_d / max(norm_d, 1e-30)
                if ratio_p > 0 and ratio_d > 0:
                    new_rho = float(np.clip(rho * math.sqrt(ratio_p / ratio_d), RHO_MIN, RHO_MAX))
                    if new_rho > 5.0 * rho or new_rho < rho / 5.0:
                        rho = new_rho
                        rho_vec = self._rho_vector(rho)
                        factor = self._factor(rho_vec)

        if result is None:
            _, x_best, y_best = best
            if status is SolverStatus.MAX_ITER and cfg.polish and np.isfinite(best[0]):
                polished = self.polish(x_best, stack.project(self.a @ x_best), y_best)
                if polished is not None:
                    ok_pol, res_pol, lim_pol = self.accept(*polished)
                    if ok_pol:
                        status = SolverStatus.OPTIMAL
                        result = (polished[0], polished[1], res_pol, lim_pol, True)
            if result is None:
                residuals = kkt_residual(problem, x_best, y_best)
                result = (x_best, y_best, residuals, self.thresholds(x_best, y_best), False)

        x_out, y_out, residuals, limits, polished_flag = result
        logger.debug(
            "solve status=%s iterations=%d n=%d m=%d polished=%s rho=%.3g",
            status.value, iteration, n, m, polished_flag, rho,
        )
        return SolverSolution(
            x=x_out,
            objective=problem.objective(x_out),
            residuals=residuals,
            tolerances=limits,
            status=status,
            iterations=iteration,
            duals=y_out,
            polished=polished_flag,
            rho=rho,
        )

    def _stalled(self, history, iteration):
        window = self.config.infeasibility_window
        if iteration < self.config.infeasibility_min_iter or len(history) < 2 * window:
            return False
        previous = history[-2 * window:-window]
        recent = history[-window:]
        best_previous = min(item[0] for item in previous)
        best_recent = min(item[0] for item in recent)
        if recent[-1][2] < 1e3:
            return False
        if best_recent < 0.99 * best_previous:
            return False
        return recent[-1][1] >= 1.5 * max(recent[0][1], 1e-12)


def solve(problem, config=None, x0=None, y0=None):
    """Solve a ConvexProblem.

    Args:
        problem: ConvexProblem.
        config: SolverConfig; defaults to eps 1e-7 and 20 000 iterations.
        x0, y0: Optional primal / stacked-dual starting point.

    Returns:
        SolverSolution. ``status`` is OPTIMAL only when every KKT residual is
        below its tolerance; otherwise the best iterate is returned with
        MAX_ITER, or INFEASIBLE when the iterates certify or stall on an
        empty intersection.
    """
    config = config or SolverConfig()
    return _OperatorSplitting(problem, config).run(x0=x0, y0=y0)


class ProblemBuilder:
    """Incremental assembly of a ConvexProblem from named variable blocks.

    Cost terms use ``weight * (coef . x[idx] + constant)^2``; linear rows are
    given as index/coefficient arrays with one row per leading index.
    """

    def __init__(self):
        self.n = 0
        self.blocks = {}
        self._lower = []
        self._upper = []
        self._p = ([], [], [])
        self._q = ([], [])
        self._r = 0.0
        self._eq = []
        self._in = []
        self._disks = []
        self._radii = []

    def add_variables(self, name, size, lower=-np.inf, upper=np.inf):
        if name in self.blocks:
            raise DataError("variable block {0} already exists".format(name))
        size = int(size)
        idx = np.arange(self.n, self.n + size)
        self.n += size
        self.blocks[name] = idx
        self._lower.append(np.broadcast_to(np.asarray(lower, dtype=float), (size,)).copy())
        self._upper.append(np.broadcast_to(np.asarray(upper, dtype=float), (size,)).copy())
        return idx

    def variables(self, name):
        return self.blocks[name]

    def _bounds_arrays(self):
        lower = np.concatenate(self._lower) if self._lower else np.zeros(0)
        upper = np.concatenate(self._upper) if self._upper else np.zeros(0)
        return lower, upper

    def bound(self, idx, lower=None, upper=None):
        """Tighten box bounds of existing variables."""
        all_lower, all_upper = self._bounds_arrays()
        idx = np.asarray(idx, dtype=int).reshape(-1)
        if lower is not None:
            all_lower[idx] = np.maximum(all_lower[idx], np.broadcast_to(lower, idx.shape))
        if upper is not None:
            all_upper[idx] = np.minimum(all_upper[idx], np.broadcast_to(upper, idx.shape))
        self._lower = [all_lower]
        self._upper = [all_upper]

    @staticmethod
    def _rows(idx, coef):
        idx = np.atleast_2d(np.asarray(idx, dtype=int))
        coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape)
        return idx, np.array(coef, dtype=float)

    def add_squares(self, idx, coef, constant=0.0, weight=1.0):
        idx, coef = self._rows(idx, coef)
        rows = idx.shape[0]
        constant = np.broadcast_to(np.asarray(constant, dtype=float), (rows,))
        weight = np.broadcast_to(np.asarray(weight, dtype=float), (rows,))
        if np.any(weight < 0):
            raise DataError("square-term weights must be non-negative")
        self._p[0].append(np.repeat(idx, idx.shape[1], axis=1).reshape(-1))
        self._p[1].append(np.tile(idx, (1, idx.shape[1])).reshape(-1))
        self._p[2].append((2.0 * weight[:, None, None] * coef[:, :, None] * coef[:, None, :]).reshape(-1))
        self._q[0].append(idx.reshape(-1))
        self._q[1].append((2.0 * (weight * constant)[:, None] * coef).reshape(-1))
        self._r += float(np.sum(weight * constant ** 2))

    def add_square(self, idx, coef, constant=0.0, weight=1.0):
        self.add_squares(np.asarray(idx).reshape(1, -1), np.asarray(coef, dtype=float).reshape(1, -1),
                         constant, weight)

    def add_linear(self, idx, coef):
        idx = np.asarray(idx, dtype=int).reshape(-1)
        self._q[0].append(idx)
        self._q[1].append(np.broadcast_to(np.asarray(coef, dtype=float), idx.shape).copy())

    def add_constant(self, value):
        self._r += float(value)

    def add_equalities(self, idx, coef, rhs):
        idx, coef = self._rows(idx, coef)
        self._eq.append((idx, coef, np.broadcast_to(np.asarray(rhs, dtype=float), (idx.shape[0],)).copy()))

    def add_inequalities(self, idx, coef, rhs):
        """Rows ``coef . x[idx] <= rhs``."""
        idx, coef = self._rows(idx, coef)
        self._in.append((idx, coef, np.broadcast_to(np.asarray(rhs, dtype=float), (idx.shape[0],)).copy()))

    def add_equality(self, idx, coef, rhs):
        self.add_equalities(np.asarray(idx).reshape(1, -1), np.asarray(coef, dtype=float).reshape(1, -1), [rhs])

    def add_inequality(self, idx, coef, rhs):
        self.add_inequalities(np.asarray(idx).reshape(1, -1), np.asarray(coef, dtype=float).reshape(1, -1), [rhs])

    def add_disks(self, first, second, radius):
        first = np.asarray(first, dtype=int).reshape(-1)
        second = np.asarray(second, dtype=int).reshape(-1)
        self._disks.append(np.column_stack([first, second]))
        self._radii.append(np.broadcast_to(np.asarray(radius, dtype=float), first.shape).copy())

    def _matrix(self, rows, normalize):
        if not rows:
            return None, None
        blocks_i, blocks_j, blocks_v, rhs = [], [], [], []
        offset = 0
        for idx, coef, b in rows:
            count = idx.shape[0]
            blocks_i.append(np.repeat(np.arange(offset, offset + count), idx.shape[1]))
            blocks_j.append(idx.reshape(-1))
            blocks_v.append(coef.reshape(-1))
            rhs.append(b)
            offset += count
        matrix = sp.csr_matrix(
            (np.concatenate(blocks_v), (np.concatenate(blocks_i), np.concatenate(blocks_j))), shape=(offset, self.n)
        )
        rhs = np.concatenate(rhs)
        if normalize and offset:
            scale = np.asarray(abs(matrix).max(axis=1).todense()).reshape(-1)
            scale[scale == 0] = 1.0
            matrix = sp.diags(1.0 / scale) @ matrix
            rhs = rhs / scale
        return sp.csr_matrix(matrix), rhs

    def build(self, normalize_rows=True, check_psd=True):
        n = self.n
        if self._p[0]:
            p = sp.csc_matrix(
                (np.concatenate(self._p[2]), (np.concatenate(self._p[0]), np.concatenate(self._p[1]))), shape=(n, n)
            )
        else:
            p = sp.csc_matrix((n, n))
        q = np.zeros(n)
        if self._q[0]:
            np.add.at(q, np.concatenate(self._q[0]), np.concatenate(self._q[1]))
        a_eq, b_eq = self._matrix(self._eq, normalize_rows)
        a_in, b_in = self._matrix(self._in, normalize_rows)
        lower, upper = self._bounds_arrays()
        disks = np.concatenate(self._disks) if self._disks else None
        radii = np.concatenate(self._radii) if self._radii else None
        return ConvexProblem(
            p=p, q=q, r=self._r,
            a_eq=a_eq, b_eq=b_eq, a_in=a_in, b_in=b_in,
            disks=disks, radii=radii, lower=lower, upper=upper,
            blocks=dict(self.blocks), check_psd=check_psd,
        )
