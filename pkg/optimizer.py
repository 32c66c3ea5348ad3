#!/usr/bin/env python3
"""
Constrained NLP Machinery
=========================

Gauss-Newton SQP shared by trajectory optimization and MPC.

    minimize    ½‖r(x)‖² + f(x)
    subject to  c_E(x) = 0,  c_I(x) ≤ 0,  lb ≤ x ≤ ub

Each iteration solves a convex QP with a primal-dual interior point method on a
sparse KKT system (scipy.sparse + SuperLU), so the block-banded structure of
collocation and multiple-shooting problems is exploited by the factorization.
Box bounds stay exact inside every QP. Steps are globalized with an ℓ1 merit
function, Armijo backtracking, one second-order correction and Levenberg
damping on rejected steps. When the linearized constraints admit no point an
elastic QP with ℓ1-penalized slacks is tried before the feasibility restoration.

Multiplier convention (QP and NLP alike):
    ∇f + J_Eᵀ y + J_Iᵀ z - z_lower + z_upper = 0,   z, z_lower, z_upper ≥ 0
"""

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from errors import DomainError, GapFlightError, NumericalBreakdown, QpInfeasible
from utils import setup_logging

logger = setup_logging(__name__)

Matrix = Any  # dense ndarray or scipy.sparse matrix


class SolveStatus(Enum):
    CONVERGED = "Converged"
    MAX_ITER = "MaxIter"
    INFEASIBLE = "Infeasible"


@dataclass
class NlpSettings:
    """All solver tolerances and knobs in one place."""
    max_iter: int = 100
    tol_stationarity: float = 1e-6
    tol_feasibility: float = 1e-6
    tol_complementarity: float = 1e-6
    levenberg_init: float = 1e-6
    levenberg_min: float = 1e-10
    levenberg_max: float = 1e8
    levenberg_factor: float = 10.0
    armijo: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-4
    merit_margin: float = 1.1
    second_order_correction: bool = True
    restoration: bool = True
    elastic: bool = True
    elastic_weight: float = 1e4
    qp_tol: float = 1e-10
    qp_max_iter: int = 150


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    z_lower: np.ndarray
    z_upper: np.ndarray
    iterations: int
    converged: bool = True

    @property
    def bound_dual(self) -> np.ndarray:
        """Net bound multiplier z_lower - z_upper (positive on an active lower bound)."""
        return self.z_lower - self.z_upper


@dataclass
class NlpProblem:
    """Smooth NLP. Any of the function pairs may be omitted."""
    n: int
    x0: np.ndarray
    residuals: Optional[Callable[[np.ndarray], np.ndarray]] = None
    residual_jacobian: Optional[Callable[[np.ndarray], Matrix]] = None
    objective: Optional[Callable[[np.ndarray], float]] = None
    gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hessian: Optional[Callable[[np.ndarray], Matrix]] = None
    eq: Optional[Callable[[np.ndarray], np.ndarray]] = None
    eq_jacobian: Optional[Callable[[np.ndarray], Matrix]] = None
    ineq: Optional[Callable[[np.ndarray], np.ndarray]] = None
    ineq_jacobian: Optional[Callable[[np.ndarray], Matrix]] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    name: str = "nlp"
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).copy()
        if self.x0.shape != (self.n,):
            raise DomainError(f"{self.name}: x0 has shape {self.x0.shape}, expected ({self.n},)")
        self.lower = np.full(self.n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(self.n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if self.lower.shape != (self.n,) or self.upper.shape != (self.n,):
            raise DomainError(f"{self.name}: bounds must have shape ({self.n},)")
        if np.any(self.lower > self.upper):
            bad = int(np.argmax(self.lower > self.upper))
            raise DomainError(f"{self.name}: lower > upper at index {bad}")
        for fun, jac, label in ((self.residuals, self.residual_jacobian, "residuals"),
                                (self.eq, self.eq_jacobian, "eq"),
                                (self.ineq, self.ineq_jacobian, "ineq"),
                                (self.objective, self.gradient, "objective")):
            if (fun is None) != (jac is None):
                raise DomainError(f"{self.name}: {label} needs both function and derivative")

    # -- evaluation helpers ----------------------------------------------------

    def cost(self, x: np.ndarray) -> float:
        value = 0.0
        if self.residuals is not None:
            r = self.residuals(x)
            value += 0.5 * float(r @ r)
        if self.objective is not None:
            value += float(self.objective(x))
        return value

    def eq_values(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.eq(x), dtype=float) if self.eq is not None else np.zeros(0)

    def ineq_values(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.ineq(x), dtype=float) if self.ineq is not None else np.zeros(0)

    def violation(self, x: np.ndarray) -> Tuple[float, float]:
        """(ℓ1, ℓ∞) norms of the general-constraint violation."""
        c_e = self.eq_values(x)
        c_i = np.maximum(self.ineq_values(x), 0.0)
        l1 = float(np.abs(c_e).sum() + c_i.sum())
        linf = max(float(np.abs(c_e).max(initial=0.0)), float(c_i.max(initial=0.0)))
        return l1, linf


@dataclass
class NlpSolution:
    x: np.ndarray
    objective: float
    stationarity: float
    feasibility: float
    complementarity: float
    iterations: int
    status: SolveStatus
    y_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    z_ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    z_lower: np.ndarray = field(default_factory=lambda: np.zeros(0))
    z_upper: np.ndarray = field(default_factory=lambda: np.zeros(0))
    merit_history: List[Tuple[float, float]] = field(default_factory=list)
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status is SolveStatus.CONVERGED


# ==============================================================================
# --- Matrix Helpers ---
# ==============================================================================

def _csr(matrix: Optional[Matrix], rows: int, cols: int) -> sp.csr_matrix:
    if matrix is None:
        return sp.csr_matrix((rows, cols))
    result = sp.csr_matrix(matrix)
    if result.shape != (rows, cols):
        raise DomainError(f"matrix shape {result.shape} != ({rows}, {cols})")
    return result


def finite_difference_jacobian(fun: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                               eps: float = 1e-7) -> np.ndarray:
    """Dense central-difference Jacobian with steps eps·(1 + |x_i|)."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(fun(x))
    jac = np.empty((f0.size, x.size))
    for i in range(x.size):
        h = eps * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.atleast_1d(fun(xp)) - np.atleast_1d(fun(xm))) / (2.0 * h)
    return jac


# ==============================================================================
# --- Interior-Point QP ---
# ==============================================================================

def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def solve_qp(H: Matrix, g: np.ndarray,
             A: Optional[Matrix] = None, b: Optional[np.ndarray] = None,
             G: Optional[Matrix] = None, h: Optional[np.ndarray] = None,
             lb: Optional[np.ndarray] = None, ub: Optional[np.ndarray] = None,
             tol: float = 1e-10, max_iter: int = 80) -> QpSolution:
    """Convex QP  min ½xᵀHx + gᵀx  s.t.  Ax = b, Gx ≤ h, lb ≤ x ≤ ub.

    Mehrotra predictor-corrector on the reduced sparse KKT system. Bounds with
    lb == ub are imposed as equalities.
    """
    g = np.asarray(g, dtype=float)
    n = g.size
    H = _csr(H, n, n)
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float)
    h = np.zeros(0) if h is None else np.asarray(h, dtype=float)
    A = _csr(A, b.size, n)
    G = _csr(G, h.size, n)
    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
    if np.any(lb > ub + 1e-12):
        raise QpInfeasible("bound lower > upper")

    fixed = np.flatnonzero(np.isfinite(lb) & np.isfinite(ub) & (ub - lb <= 1e-12))
    free_lo = np.flatnonzero(np.isfinite(lb) & ~np.isin(np.arange(n), fixed))
    free_hi = np.flatnonzero(np.isfinite(ub) & ~np.isin(np.arange(n), fixed))

    A_all = sp.vstack([A, sp.csr_matrix((np.ones(fixed.size), (np.arange(fixed.size), fixed)),
                                        shape=(fixed.size, n))]).tocsr()
    b_all = np.concatenate([b, lb[fixed]])
    G_all = sp.vstack([
        G,
        sp.csr_matrix((-np.ones(free_lo.size), (np.arange(free_lo.size), free_lo)), shape=(free_lo.size, n)),
        sp.csr_matrix((np.ones(free_hi.size), (np.arange(free_hi.size), free_hi)), shape=(free_hi.size, n)),
    ]).tocsr()
    h_all = np.concatenate([h, -lb[free_lo], ub[free_hi]])
    m_e, m_i = b_all.size, h_all.size

    x = np.zeros(n)
    y = np.zeros(m_e)
    s = np.maximum(h_all - G_all @ x, 1.0)
    z = np.ones(m_i)
    Gt, At = G_all.T.tocsr(), A_all.T.tocsr()
    reg_p, reg_d = 1e-9, 1e-9
    scale_d = 1.0 + np.abs(g).max(initial=0.0)
    scale_p = 1.0 + max(np.abs(b_all).max(initial=0.0), np.abs(h_all).max(initial=0.0))

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        r_d = H @ x + g + At @ y + Gt @ z
        r_p = A_all @ x - b_all
        r_i = G_all @ x + s - h_all
        mu = float(s @ z) / m_i if m_i else 0.0
        res_d = np.abs(r_d).max(initial=0.0)
        res_p = max(np.abs(r_p).max(initial=0.0), np.abs(r_i).max(initial=0.0))
        if res_d <= tol * scale_d and res_p <= tol * scale_p and mu <= tol:
            converged = True
            break
        if np.abs(z).max(initial=0.0) > 1e13 or np.abs(y).max(initial=0.0) > 1e13:
            raise QpInfeasible(f"dual variables diverged after {it} iterations (primal residual {res_p:.2e})")

        d = z / s if m_i else np.zeros(0)
        K11 = H + Gt @ sp.diags(d) @ G_all + reg_p * sp.identity(n)
        K = sp.bmat([[K11, At], [A_all, -reg_d * sp.identity(m_e)]], format='csc') if m_e else K11.tocsc()
        try:
            lu = spla.splu(K)
        except RuntimeError as e:
            raise NumericalBreakdown(f"KKT factorization failed: {e}") from e

        def newton(r_c: np.ndarray):
            rhs1 = -r_d + (Gt @ ((r_c - z * r_i) / s) if m_i else 0.0)
            sol = lu.solve(np.concatenate([rhs1, -r_p]))
            if not np.all(np.isfinite(sol)):
                raise NumericalBreakdown("non-finite Newton direction")
            dx, dy = sol[:n], sol[n:]
            dz = (-r_c + z * r_i + z * (G_all @ dx)) / s if m_i else np.zeros(0)
            ds = -r_i - G_all @ dx
            return dx, dy, dz, ds

        # predictor
        dx, dy, dz, ds = newton(s * z)
        if m_i:
            a_aff = min(_max_step(s, ds), _max_step(z, dz))
            mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m_i
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            # corrector
            dx, dy, dz, ds = newton(s * z + ds * dz - sigma * mu)
            alpha = min(1.0, 0.995 * min(_max_step(s, ds), _max_step(z, dz)))
        else:
            alpha = 1.0
        x += alpha * dx
        y += alpha * dy
        if m_i:
            s = np.maximum(s + alpha * ds, 1e-300)
            z = np.maximum(z + alpha * dz, 1e-300)

    if not converged:
        r_p = A_all @ x - b_all
        r_i = np.maximum(G_all @ x - h_all, 0.0)
        res_p = max(np.abs(r_p).max(initial=0.0), r_i.max(initial=0.0))
        if res_p > 1e-6 * scale_p:
            raise QpInfeasible(f"no feasible point after {max_iter} iterations (residual {res_p:.2e})")

    z_lower = np.zeros(n)
    z_upper = np.zeros(n)
    k = h.size
    z_lower[free_lo] = z[k:k + free_lo.size]
    z_upper[free_hi] = z[k + free_lo.size:]
    y_fixed = y[b.size:]
    z_upper[fixed] = np.maximum(y_fixed, 0.0)
    z_lower[fixed] = np.maximum(-y_fixed, 0.0)
    return QpSolution(x=x, y=y[:b.size], z=z[:k], z_lower=z_lower, z_upper=z_upper,
                      iterations=it, converged=converged)


def solve_qp_active_set(H: np.ndarray, g: np.ndarray,
                        A: Optional[np.ndarray] = None, b: Optional[np.ndarray] = None,
                        G: Optional[np.ndarray] = None, h: Optional[np.ndarray] = None,
                        lb: Optional[np.ndarray] = None, ub: Optional[np.ndarray] = None,
                        tol: float = 1e-9, max_rows: int = 12) -> QpSolution:
    """Dense reference QP solver enumerating every active set (small problems only)."""
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.size
    A = np.zeros((0, n)) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float)
    rows, rhs, kinds = [], [], []
    if G is not None:
        for i, row in enumerate(np.atleast_2d(np.asarray(G, dtype=float))):
            rows.append(row); rhs.append(float(np.asarray(h)[i])); kinds.append(('g', i))
    for i in range(n):
        if lb is not None and np.isfinite(lb[i]):
            e = np.zeros(n); e[i] = -1.0
            rows.append(e); rhs.append(-float(lb[i])); kinds.append(('lo', i))
        if ub is not None and np.isfinite(ub[i]):
            e = np.zeros(n); e[i] = 1.0
            rows.append(e); rhs.append(float(ub[i])); kinds.append(('hi', i))
    if len(rows) > max_rows:
        raise DomainError(f"active-set enumeration limited to {max_rows} inequalities, got {len(rows)}")
    Gm = np.array(rows).reshape(len(rows), n)
    hv = np.array(rhs)

    best = None
    for size in range(len(rows) + 1):
        for active in itertools.combinations(range(len(rows)), size):
            act = list(active)
            C = np.vstack([A, Gm[act]])
            d = np.concatenate([b, hv[act]])
            m = C.shape[0]
            K = np.block([[H, C.T], [C, np.zeros((m, m))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-g, d]))
            except np.linalg.LinAlgError:
                continue
            x, lam = sol[:n], sol[n:]
            mult = lam[A.shape[0]:]
            if np.any(Gm @ x > hv + tol) or np.any(mult < -tol):
                continue
            value = 0.5 * x @ H @ x + g @ x
            if best is None or value < best[0] - 1e-12:
                z = np.zeros(len(rows))
                z[act] = mult
                best = (value, x, lam[:A.shape[0]], z)
    if best is None:
        raise QpInfeasible("no active set satisfies the KKT conditions")

    _, x, y, z_all = best
    z_lower, z_upper = np.zeros(n), np.zeros(n)
    z_g = []
    for (kind, i), zi in zip(kinds, z_all):
        if kind == 'g':
            z_g.append(zi)
        elif kind == 'lo':
            z_lower[i] = zi
        else:
            z_upper[i] = zi
    return QpSolution(x=x, y=y, z=np.array(z_g), z_lower=z_lower, z_upper=z_upper, iterations=0)


# ==============================================================================
# --- SQP ---
# ==============================================================================

class _Evaluation:
    """Function values and derivatives of an NlpProblem at one point."""

    def __init__(self, problem: NlpProblem, x: np.ndarray):
        n = problem.n
        self.x = x
        self.r = problem.residuals(x) if problem.residuals is not None else np.zeros(0)
        self.J = _csr(problem.residual_jacobian(x), self.r.size, n) if problem.residuals is not None else None
        self.cost = 0.5 * float(self.r @ self.r)
        self.grad = self.J.T @ self.r if self.J is not None else np.zeros(n)
        if problem.objective is not None:
            self.cost += float(problem.objective(x))
            self.grad = self.grad + np.asarray(problem.gradient(x), dtype=float)
        self.c_e = problem.eq_values(x)
        self.J_e = _csr(problem.eq_jacobian(x), self.c_e.size, n) if problem.eq is not None else _csr(None, 0, n)
        self.c_i = problem.ineq_values(x)
        self.J_i = _csr(problem.ineq_jacobian(x), self.c_i.size, n) if problem.ineq is not None else _csr(None, 0, n)
        hess = self.J.T @ self.J if self.J is not None else sp.csr_matrix((n, n))
        if problem.hessian is not None:
            hess = hess + _csr(problem.hessian(x), n, n)
        self.H = sp.csr_matrix(hess)

    def violation_l1(self) -> float:
        return float(np.abs(self.c_e).sum() + np.maximum(self.c_i, 0.0).sum())


def _kkt_norms(problem: NlpProblem, ev: _Evaluation, y, z, z_lo, z_hi) -> Tuple[float, float, float]:
    x = ev.x
    stat = ev.grad + ev.J_e.T @ y + ev.J_i.T @ z - z_lo + z_hi
    bound_viol = max(np.max(problem.lower - x, initial=0.0), np.max(x - problem.upper, initial=0.0))
    feas = max(float(np.abs(ev.c_e).max(initial=0.0)), float(np.maximum(ev.c_i, 0.0).max(initial=0.0)),
               float(bound_viol))
    gap_lo = np.where(np.isfinite(problem.lower), x - problem.lower, 0.0)
    gap_hi = np.where(np.isfinite(problem.upper), problem.upper - x, 0.0)
    comp = max(float(np.abs(z * ev.c_i).max(initial=0.0)),
               float(np.abs(z_lo * gap_lo).max(initial=0.0)),
               float(np.abs(z_hi * gap_hi).max(initial=0.0)))
    return float(np.abs(stat).max(initial=0.0)), feas, comp


def _safe_merit(problem: NlpProblem, x: np.ndarray, nu: float) -> float:
    try:
        with np.errstate(all='ignore'):
            value = problem.cost(x) + nu * problem.violation(x)[0]
    except (GapFlightError, FloatingPointError, ValueError):
        return np.inf
    return value if np.isfinite(value) else np.inf


@dataclass
class _ElasticStep:
    qp: QpSolution
    linear_violation: float


def _elastic_qp(H: sp.csr_matrix, ev: _Evaluation, lower: np.ndarray, upper: np.ndarray, weight: float,
                settings: NlpSettings) -> _ElasticStep:
    """QP with slacks on every linearized constraint, always feasible inside the box.

        min ½dᵀHd + gᵀd + ρ·Σ(p + q + t)
        s.t. J_E d - p + q = -c_E,  J_I d - t ≤ -c_I,  p, q, t ≥ 0
    """
    n, m_e, m_i = ev.x.size, ev.c_e.size, ev.c_i.size
    k = n + 2 * m_e + m_i
    H_el = sp.block_diag([H, sp.csr_matrix((k - n, k - n))], format='csr')
    g_el = np.concatenate([ev.grad, np.full(k - n, weight)])
    eye_e = sp.identity(m_e, format='csr')
    A = sp.hstack([ev.J_e, -eye_e, eye_e, sp.csr_matrix((m_e, m_i))]).tocsr()
    G = sp.hstack([ev.J_i, sp.csr_matrix((m_i, 2 * m_e)), -sp.identity(m_i, format='csr')]).tocsr()
    lb = np.concatenate([lower - ev.x, np.zeros(k - n)])
    ub = np.concatenate([upper - ev.x, np.full(k - n, np.inf)])
    qp = solve_qp(H_el, g_el, A, -ev.c_e, G, -ev.c_i, lb, ub, tol=settings.qp_tol, max_iter=settings.qp_max_iter)
    slacks = np.maximum(qp.x[n:], 0.0)
    step = QpSolution(x=qp.x[:n], y=qp.y, z=qp.z, z_lower=qp.z_lower[:n], z_upper=qp.z_upper[:n],
                      iterations=qp.iterations, converged=qp.converged)
    return _ElasticStep(qp=step, linear_violation=float(slacks.sum()))


def _restoration(problem: NlpProblem, x: np.ndarray, settings: NlpSettings) -> Optional[np.ndarray]:
    """Least-squares feasibility phase; returns a feasible point or None."""
    n_e = problem.eq_values(x).size

    def residuals(v):
        return np.concatenate([problem.eq_values(v), np.maximum(problem.ineq_values(v), 0.0)])

    def jacobian(v):
        blocks = []
        if problem.eq is not None:
            blocks.append(_csr(problem.eq_jacobian(v), n_e, problem.n))
        if problem.ineq is not None:
            c_i = problem.ineq_values(v)
            active = sp.diags((c_i > 0).astype(float))
            blocks.append(active @ _csr(problem.ineq_jacobian(v), c_i.size, problem.n))
        return sp.vstack(blocks).tocsr()

    feas = NlpProblem(n=problem.n, x0=x, residuals=residuals, residual_jacobian=jacobian,
                      lower=problem.lower, upper=problem.upper, name=f"{problem.name}-restoration")
    inner = NlpSettings(**{**settings.__dict__, 'restoration': False, 'max_iter': settings.max_iter})
    result = solve_nlp(feas, inner)
    if problem.violation(result.x)[1] <= settings.tol_feasibility:
        return result.x
    return None


def solve_nlp(problem: NlpProblem, settings: Optional[NlpSettings] = None) -> NlpSolution:
    """Gauss-Newton SQP with ℓ1-merit line search."""
    settings = settings or NlpSettings()
    n = problem.n
    lower, upper = problem.lower, problem.upper
    x = np.clip(problem.x0, lower, upper)
    ev = _Evaluation(problem, x)
    y = np.zeros(ev.c_e.size)
    z = np.zeros(ev.c_i.size)
    z_lo = np.zeros(n)
    z_hi = np.zeros(n)
    lam = settings.levenberg_init
    nu = 1.0
    history: List[Tuple[float, float]] = []
    restored = False

    def finish(status: SolveStatus, iterations: int, message: str = "") -> NlpSolution:
        stat, feas, comp = _kkt_norms(problem, ev, y, z, z_lo, z_hi)
        return NlpSolution(x=ev.x.copy(), objective=ev.cost, stationarity=stat, feasibility=feas,
                           complementarity=comp, iterations=iterations, status=status,
                           y_eq=y.copy(), z_ineq=z.copy(), z_lower=z_lo.copy(), z_upper=z_hi.copy(),
                           merit_history=history, message=message)

    for it in range(1, settings.max_iter + 1):
        H = ev.H + lam * sp.identity(n, format='csr')
        linear_violation = 0.0
        try:
            qp = solve_qp(H, ev.grad, ev.J_e, -ev.c_e, ev.J_i, -ev.c_i,
                          lower - ev.x, upper - ev.x, tol=settings.qp_tol, max_iter=settings.qp_max_iter)
        except QpInfeasible as e:
            elastic = None
            if settings.elastic:
                try:
                    elastic = _elastic_qp(H, ev, lower, upper, max(settings.elastic_weight, nu), settings)
                except (QpInfeasible, NumericalBreakdown) as inner:
                    logger.debug(f"{problem.name}: elastic QP failed at iteration {it}: {inner}")
            if elastic is not None:
                logger.debug(f"{problem.name}: QP infeasible at iteration {it}, elastic step leaves "
                             f"{elastic.linear_violation:.2e} linearized violation")
                qp, linear_violation = elastic.qp, elastic.linear_violation
            elif not settings.restoration or restored:
                return finish(SolveStatus.INFEASIBLE, it, f"QP infeasible: {e}")
            else:
                logger.debug(f"{problem.name}: QP infeasible at iteration {it}, entering restoration")
                point = _restoration(problem, ev.x, settings)
                restored = True
                if point is None:
                    return finish(SolveStatus.INFEASIBLE, it, "restoration failed")
                ev = _Evaluation(problem, point)
                continue
        except NumericalBreakdown:
            lam *= settings.levenberg_factor
            if lam > settings.levenberg_max:
                return finish(SolveStatus.MAX_ITER, it, "KKT factorization keeps failing")
            continue

        d = qp.x
        y_qp, z_qp, zl_qp, zu_qp = qp.y, qp.z, qp.z_lower, qp.z_upper
        stat = float(np.abs(H @ d).max(initial=0.0))
        _, feas, _ = _kkt_norms(problem, ev, y_qp, z_qp, zl_qp, zu_qp)
        comp = max(float(np.abs(z_qp * ev.c_i).max(initial=0.0)),
                   float(np.abs(zl_qp * np.where(np.isfinite(lower), ev.x - lower, 0.0)).max(initial=0.0)),
                   float(np.abs(zu_qp * np.where(np.isfinite(upper), upper - ev.x, 0.0)).max(initial=0.0)))
        if (stat <= settings.tol_stationarity and feas <= settings.tol_feasibility
                and comp <= settings.tol_complementarity):
            y, z, z_lo, z_hi = y_qp, z_qp, zl_qp, zu_qp
            return finish(SolveStatus.CONVERGED, it)

        dual_max = max(np.abs(y_qp).max(initial=0.0), np.abs(z_qp).max(initial=0.0))
        nu = max(nu, settings.merit_margin * dual_max)
        merit0 = ev.cost + nu * ev.violation_l1()
        # ℓ1 directional derivative bound; elastic steps only remove part of the violation
        slope = min(float(ev.grad @ d) - nu * (ev.violation_l1() - linear_violation), 0.0)

        accepted = None
        alpha = 1.0
        while alpha >= settings.min_step:
            trial = np.clip(ev.x + alpha * d, lower, upper)
            merit = _safe_merit(problem, trial, nu)
            if merit <= merit0 + settings.armijo * alpha * slope:
                accepted = (trial, alpha, merit)
                break
            if alpha == 1.0 and settings.second_order_correction and np.isfinite(merit):
                corrected = _second_order_step(problem, ev, H, d, settings)
                if corrected is not None:
                    merit_soc = _safe_merit(problem, corrected, nu)
                    if merit_soc <= merit0 + settings.armijo * slope:
                        accepted = (corrected, 1.0, merit_soc)
                        break
            alpha *= settings.backtrack

        if accepted is None:
            lam *= settings.levenberg_factor
            if lam > settings.levenberg_max:
                return finish(SolveStatus.MAX_ITER, it, "line search stalled")
            continue

        trial, alpha, merit = accepted
        history.append((merit0, merit))
        ev = _Evaluation(problem, trial)
        y = y + alpha * (y_qp - y)
        z = z + alpha * (z_qp - z)
        z_lo = z_lo + alpha * (zl_qp - z_lo)
        z_hi = z_hi + alpha * (zu_qp - z_hi)
        lam = max(lam / settings.levenberg_factor, settings.levenberg_min)

    return finish(SolveStatus.MAX_ITER, settings.max_iter, "iteration limit")


def _second_order_step(problem: NlpProblem, ev: _Evaluation, H: sp.csr_matrix, d: np.ndarray,
                       settings: NlpSettings) -> Optional[np.ndarray]:
    """Re-solve the QP with constraints re-linearized at x + d."""
    x_full = np.clip(ev.x + d, problem.lower, problem.upper)
    try:
        c_e = problem.eq_values(x_full)
        c_i = problem.ineq_values(x_full)
        qp = solve_qp(H, ev.grad, ev.J_e, -c_e + ev.J_e @ d, ev.J_i, -c_i + ev.J_i @ d,
                      problem.lower - ev.x, problem.upper - ev.x,
                      tol=settings.qp_tol, max_iter=settings.qp_max_iter)
    except (GapFlightError, FloatingPointError, ValueError):
        return None
    return np.clip(ev.x + qp.x, problem.lower, problem.upper)
