"""Dense linear algebra, fixed-step integration and a small exact QP solver.

Every other module of esorqp computes through the three operations defined
here: :func:`linear_solve`, :func:`rk4_step` and :func:`solve_qp`.
"""
from collections import namedtuple
from itertools import combinations
import logging
import warnings

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from .utils import EsorError, as_matrix, as_vector

logger = logging.getLogger(__name__)

PIVOT_TOLERANCE = 1e-12
FEASIBILITY_TOLERANCE = 1e-8
SYMMETRY_TOLERANCE = 1e-12
MAX_VARIABLES = 4
MAX_CONSTRAINTS = 8


class SingularMatrix(EsorError):
    """Exception raised when elimination meets a pivot below the threshold.

    Attributes:
        message -- explanation of the error
    """

    def __init__(self, pivot):
        self.pivot = pivot
        super().__init__(f"Matrix is numerically singular (pivot {pivot:.3e} < {PIVOT_TOLERANCE})")


class NonFiniteDerivative(EsorError):
    """Exception raised when a vector field returns NaN or Inf.

    Attributes:
        message -- explanation of the error
    """

    def __init__(self, t, value):
        self.t = t
        super().__init__(f"Non-finite derivative at t = {t}: {value}")


class Infeasible(EsorError):
    """Exception raised when no point satisfies every QP constraint.

    Attributes:
        message -- explanation of the error
    """

    def __init__(self, n_constraints):
        super().__init__(f"No candidate active set satisfies all {n_constraints} constraints")


QpProblem = namedtuple("QpProblem", ["H", "q", "G", "w", "lo", "hi"],
                       defaults=[None, None, None, None])
QpProblem.__doc__ = """A strictly convex quadratic program.

    minimise 0.5 v'Hv + q'v  subject to  G v >= w  and  lo <= v <= hi.

    Missing constraints are given as None; infinite box entries mean the
    variable is unbounded on that side.
"""


class QpSolution(namedtuple("QpSolution",
                            ["x", "objective", "active", "status", "multipliers",
                             "n_constraints"], defaults=[0])):
    """The result of :func:`solve_qp`.

    ``active`` holds the labels of the active constraints (``"g:i"`` for the
    i-th general row, ``"lo:j"``/``"hi:j"`` for box bounds) and
    ``multipliers`` the matching Lagrange multipliers. ``n_constraints``
    counts every row, box bounds included.
    """

    @property
    def optimal(self):
        return self.status == "optimal"

    def raise_for_status(self):
        """Raise :class:`Infeasible` unless the solution is optimal."""
        if not self.optimal:
            raise Infeasible(self.n_constraints)
        return self


def linear_solve(a, b):
    """Solve the square system A x = b by LU factorisation with partial pivoting.

    Parameters:
        a: array_like
            A square matrix.
        b: array_like
            The right hand side.

    Returns:
        The solution vector.

    Exceptions:
        SingularMatrix: If a pivot has magnitude below 1e-12.

    Examples:
        >>> linear_solve([[2, 0], [0, 4]], [2, 8]).tolist()
        [1.0, 2.0]
    """
    a = as_matrix(a, "matrix")
    b = as_vector(b, "right hand side")
    if a.shape[0] != a.shape[1] or a.shape[0] != b.size:
        raise ValueError(f"Cannot solve a {a.shape} system with a right hand side of size {b.size}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(a, check_finite=False)
    pivot = float(np.min(np.abs(np.diag(lu))))
    if pivot < PIVOT_TOLERANCE:
        raise SingularMatrix(pivot)
    return lu_solve((lu, piv), b, check_finite=False)


def _stage(f, t, x):
    k = np.asarray(f(t, x), dtype=float)
    if not np.all(np.isfinite(k)):
        raise NonFiniteDerivative(t, k)
    return k


def rk4_step(f, x, t, dt):
    """Advance ``x' = f(t, x)`` by one classical fourth-order Runge-Kutta step.

    Parameters:
        f: callable
            The vector field, called as ``f(t, x)``. ``x`` may be a vector or
            a matrix whose columns are propagated together.
        x: array_like
            The state at time ``t``.
        t: float
            The current time.
        dt: float
            The step, strictly positive.

    Exceptions:
        NonFiniteDerivative: If a stage evaluation is not finite.

    Examples:
        >>> round(float(rk4_step(lambda t, x: x, 1.0, 0.0, 0.1)), 9)
        1.105170833
    """
    if not dt > 0:
        raise ValueError(f"Step must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    half = 0.5 * dt
    k1 = _stage(f, t, x)
    k2 = _stage(f, t + half, x + half * k1)
    k3 = _stage(f, t + half, x + half * k2)
    k4 = _stage(f, t + dt, x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _validate(problem):
    h = as_matrix(problem.H, "cost matrix")
    n = h.shape[0]
    if h.shape != (n, n):
        raise ValueError(f"Cost matrix must be square, got {h.shape}")
    if n > MAX_VARIABLES:
        raise ValueError(f"At most {MAX_VARIABLES} decision variables are supported, got {n}")
    if np.max(np.abs(h - h.T)) > SYMMETRY_TOLERANCE * max(1.0, np.max(np.abs(h))):
        raise ValueError("Cost matrix is not symmetric")
    try:
        np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        raise ValueError("Cost matrix is not positive definite")
    q = np.zeros(n) if problem.q is None else as_vector(problem.q, "linear cost")
    if problem.G is None or len(problem.G) == 0:
        g = np.zeros((0, n))
        w = np.zeros(0)
    else:
        g = as_matrix(problem.G, "constraint matrix")
        w = as_vector(problem.w, "constraint bounds")
    if g.shape[1] != n or w.size != g.shape[0] or q.size != n:
        raise ValueError("Constraint dimensions do not match the cost")
    if g.shape[0] > MAX_CONSTRAINTS:
        raise ValueError(f"At most {MAX_CONSTRAINTS} constraint rows are supported, got {g.shape[0]}")
    lo = np.full(n, -np.inf) if problem.lo is None else np.asarray(problem.lo, dtype=float)
    hi = np.full(n, np.inf) if problem.hi is None else np.asarray(problem.hi, dtype=float)
    if lo.shape != (n,) or hi.shape != (n,) or np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
        raise ValueError("Box bounds must have one entry per variable")
    return h, q, g, w, lo, hi


def _stack_constraints(g, w, lo, hi):
    n = g.shape[1]
    rows = [g]
    rhs = [w]
    labels = [f"g:{i}" for i in range(g.shape[0])]
    eye = np.eye(n)
    for j in range(n):
        if np.isfinite(lo[j]):
            rows.append(eye[j:j + 1])
            rhs.append(lo[j:j + 1])
            labels.append(f"lo:{j}")
    for j in range(n):
        if np.isfinite(hi[j]):
            rows.append(-eye[j:j + 1])
            rhs.append(-hi[j:j + 1])
            labels.append(f"hi:{j}")
    return np.vstack(rows), np.concatenate(rhs), labels


def _solve_kkt(h, q, a, b):
    n = q.size
    k = b.size
    if k == 0:
        return linear_solve(h, -q), np.zeros(0)
    kkt = np.block([[h, -a.T], [a, np.zeros((k, k))]])
    sol = linear_solve(kkt, np.concatenate([-q, b]))
    return sol[:n], sol[n:]


def solve_qp(problem, raise_on_infeasible=False):
    """Solve a small convex QP exactly by enumerating active sets.

    Subsets of at most n constraints are treated as sets of equalities in
    order of size and their KKT systems solved. The first subset whose
    point is feasible with non-negative multipliers is the optimum, since
    the problem is strictly convex. Should rounding leave no such subset,
    the feasible point with the lowest objective wins.

    Parameters:
        problem: QpProblem
            The program to solve.
        raise_on_infeasible: bool
            Raise :class:`Infeasible` instead of returning an infeasible
            solution.

    Returns:
        A QpSolution.

    Examples:
        >>> sol = solve_qp(QpProblem(H=[[2.0]], q=[-2.0], hi=[0.0]))
        >>> sol.active
        ('hi:0',)
        >>> round(float(sol.x[0]), 12) + 0.0
        0.0
    """
    h, q, g, w, lo, hi = _validate(problem)
    rows, rhs, labels = _stack_constraints(g, w, lo, hi)
    n = q.size
    tolerance = FEASIBILITY_TOLERANCE * (1.0 + np.abs(rhs))
    best = None
    for size in range(min(n, len(labels)) + 1):
        for subset in combinations(range(len(labels)), size):
            idx = list(subset)
            try:
                v, lam = _solve_kkt(h, q, rows[idx], rhs[idx])
            except SingularMatrix:
                continue
            if np.any(rows @ v - rhs < -tolerance):
                continue
            objective = float(0.5 * v @ h @ v + q @ v)
            if np.all(lam >= -1e-10):
                return QpSolution(v, objective, tuple(labels[i] for i in subset), "optimal",
                                  tuple(lam), len(labels))
            if best is None or objective < best[0]:
                best = (objective, v, subset, lam)
    if best is None:
        logger.debug("QP infeasible over %d constraints", len(labels))
        solution = QpSolution(None, np.inf, (), "infeasible", (), len(labels))
        if raise_on_infeasible:
            raise Infeasible(len(labels))
        return solution
    objective, v, subset, lam = best
    return QpSolution(v, objective, tuple(labels[i] for i in subset), "optimal", tuple(lam),
                      len(labels))


def constraint_rows(problem):
    """Return the stacked rows, right hand sides and labels of a problem.

    The rows include box bounds, in the same order :func:`solve_qp` uses for
    its ``active`` labels.
    """
    _, _, g, w, lo, hi = _validate(problem)
    return _stack_constraints(g, w, lo, hi)


def kkt_residual(problem, solution):
    """Return the stationarity residual ‖Hv + q − A_S'λ‖∞ of a solution."""
    h, q, _, _, _, _ = _validate(problem)
    rows, _, labels = constraint_rows(problem)
    index = [labels.index(label) for label in solution.active]
    grad = h @ solution.x + q
    if index:
        grad = grad - rows[index].T @ np.asarray(solution.multipliers)
    return float(np.max(np.abs(grad)))
