"""Dense two-phase simplex solver for small linear programs.

Problems here are tiny (at most a few dozen variables) but heavily
degenerate, so the implementation favors determinism and robustness over
iteration counts: largest-reduced-cost entering with lowest-index tie
breaking, a lexicographic leaving rule for anti-cycling, row
equilibration so tolerances are scale-free, and periodic refactorization
of the tableau from the original data so pivot roundoff cannot
accumulate. If the tableau still breaks down numerically (heavy
degeneracy can defeat any fixed pivot rule in floating point), the solve
is retried once through scipy's HiGHS backend, which is equally
deterministic; results stay bit-reproducible either way. The pivot loop
is JIT-compiled because the training loops solve tens of thousands of
these programs per run.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.optimize import linprog

__all__ = ["LPProblem", "solve_lp", "Infeasible", "Unbounded"]

_SENSE_CODES = {"<=": 0, "=": 1, ">=": 2}

_OPTIMAL = 0
_INFEASIBLE = 1
_UNBOUNDED = 2
_STALLED = 3

_TOL = 1e-9
_PIVOT_TOL = 1e-6   # smallest pivot element a column may supply
_REFRESH = 64       # pivots between precautionary refactorizations


class Infeasible(ArithmeticError):
    """No point satisfies the constraints (within tolerance)."""


class Unbounded(OverflowError):
    """The objective can be improved without limit."""


@dataclass
class LPProblem:
    """Maximize objective . x subject to lhs @ x (senses) rhs, x >= 0.

    senses holds one of ``"<="``, ``"="``, ``">="`` per constraint row.
    All variables carry an implicit zero lower bound.
    """

    objective: np.ndarray
    lhs: np.ndarray
    senses: tuple
    rhs: np.ndarray

    def __post_init__(self):
        self.objective = np.ascontiguousarray(self.objective, dtype=np.float64)
        self.lhs = np.ascontiguousarray(self.lhs, dtype=np.float64)
        self.rhs = np.ascontiguousarray(self.rhs, dtype=np.float64)
        self.senses = tuple(self.senses)
        if self.lhs.ndim != 2:
            raise ValueError("lhs must be a 2-D matrix")
        m, n = self.lhs.shape
        if self.objective.shape != (n,):
            raise ValueError(f"objective has {self.objective.shape[0]} coefficients, expected {n}")
        if self.rhs.shape != (m,):
            raise ValueError(f"rhs has {self.rhs.shape[0]} entries, expected {m}")
        if len(self.senses) != m:
            raise ValueError(f"{len(self.senses)} senses for {m} rows")
        for s in self.senses:
            if s not in _SENSE_CODES:
                raise ValueError(f"unknown constraint sense {s!r}")
        if not (np.isfinite(self.objective).all() and np.isfinite(self.lhs).all()
                and np.isfinite(self.rhs).all()):
            raise ValueError("LP data must be finite")

    @property
    def n_vars(self):
        return self.lhs.shape[1]

    @property
    def n_rows(self):
        return self.lhs.shape[0]


@njit(cache=True)
def _pivot(T, red, row, col):
    piv = T[row, col]
    T[row] /= piv
    ncols = T.shape[1] - 1
    for i in range(T.shape[0]):
        if i != row:
            f = T[i, col]
            if f != 0.0:
                T[i] -= f * T[row]
            if -1e-11 < T[i, ncols] < 0.0:
                T[i, ncols] = 0.0  # stop roundoff drift below feasibility
    f = red[col]
    if f != 0.0:
        red -= f * T[row]


@njit(cache=True)
def _recompute_red(T, basis, costs, red):
    """Exact reduced costs for the current basis; red[-1] = -objective."""
    ncols = T.shape[1] - 1
    for j in range(ncols):
        red[j] = costs[j]
    red[ncols] = 0.0
    for i in range(T.shape[0]):
        cb = costs[basis[i]]
        if cb != 0.0:
            red -= cb * T[i]


@njit(cache=True)
def _refactor(A_std, b_std, basis, T):
    """Rebuild the tableau from the original data for the current basis.

    Caps accumulated pivot roundoff at whatever a handful of pivots can
    introduce. Returns False when the rebuilt basis values are materially
    negative, i.e. the basis itself went infeasible.
    """
    m, ncols = A_std.shape
    B = np.empty((m, m))
    for i in range(m):
        B[:, i] = A_std[:, basis[i]]
    Binv = np.linalg.inv(B)
    T[:, :ncols] = Binv @ A_std
    rhs = Binv @ b_std
    ok = True
    for i in range(m):
        if rhs[i] < 0.0:
            if rhs[i] < -1e-9:
                ok = False
            rhs[i] = 0.0
        T[i, ncols] = rhs[i]
    return ok


@njit(cache=True)
def _exact_verdict_data(A_std, b_std, basis, costs, red, T):
    """Exact reduced costs and basic values without a full tableau rebuild.

    Verdicts only need red and the rhs column, which take two triangular
    solves and a GEMV instead of the O(m^2 ncols) tableau refresh; the
    interior tableau columns are left as they are. Returns False when the
    exact basis values are materially negative.
    """
    m, ncols = A_std.shape
    B = np.empty((m, m))
    cb = np.empty(m)
    for i in range(m):
        B[:, i] = A_std[:, basis[i]]
        cb[i] = costs[basis[i]]
    xb = np.linalg.solve(B, b_std)
    y = np.linalg.solve(B.T, cb)
    red[:ncols] = costs - y @ A_std
    obj = 0.0
    ok = True
    for i in range(m):
        v = xb[i]
        if v < 0.0:
            if v < -1e-9:
                ok = False
            v = 0.0
        T[i, ncols] = v
        obj += cb[i] * v
    red[ncols] = -obj
    return ok


@njit(cache=True)
def _lex_less(T, i, k, ai, ak):
    """True if pivot-scaled row i precedes row k lexicographically.

    Compares (rhs, column 0, column 1, ...) of the rows divided by their
    pivot-column entries. The initial basis columns embed an identity in
    T, so two distinct rows always differ somewhere.
    """
    ncols = T.shape[1] - 1
    ri = T[i, ncols] / ai
    rk = T[k, ncols] / ak
    if ri != rk:
        return ri < rk
    for j in range(ncols):
        ri = T[i, j] / ai
        rk = T[k, j] / ak
        if ri != rk:
            return ri < rk
    return i < k


@njit(cache=True)
def _ratio_test(T, enter):
    """Leaving row by lexicographic minimum ratio (anti-cycling)."""
    m = T.shape[0]
    ncols = T.shape[1] - 1
    leave = -1
    best_ratio = np.inf
    best_a = 1.0
    for i in range(m):
        a = T[i, enter]
        if a > _PIVOT_TOL:
            num = T[i, ncols]
            if num < 0.0:
                num = 0.0  # degenerate row; never let roundoff order it below zero
            ratio = num / a
            if leave < 0 or ratio < best_ratio:
                best_ratio = ratio
                best_a = a
                leave = i
            elif ratio == best_ratio and _lex_less(T, i, leave, a, best_a):
                best_a = a
                leave = i
    return leave


@njit(cache=True)
def _iterate(T, basis, allowed, in_basis, costs, red, max_iter, obj_cap, A_std, b_std):
    """Simplex iterations until optimal/unbounded.

    Entering column: most positive reduced cost, ties broken by lowest
    index. Leaving row: lexicographic ratio test, which terminates under
    any entering rule. State is updated incrementally but the whole tableau is
    refactorized from the original data every _REFRESH pivots (and before
    any verdict) so roundoff can neither accumulate nor keep triggering
    pivots on degenerate problems. obj_cap is a known upper bound on the
    objective; reaching it ends the phase early.
    """
    ncols = T.shape[1] - 1
    _recompute_red(T, basis, costs, red)
    since_refresh = 0
    for _ in range(max_iter):
        if -red[ncols] >= obj_cap - 1e-10:
            return _OPTIMAL
        enter = -1
        best = _TOL
        for j in range(ncols):
            # in_basis guard: a basic column's true reduced cost is zero, so a
            # positive value is roundoff; entering it would duplicate a basis
            # column and make the basis singular.
            if allowed[j] and not in_basis[j] and red[j] > best:
                best = red[j]
                enter = j
        if enter < 0:
            if since_refresh == 0:
                return _OPTIMAL
            # verify the verdict on exact numbers before declaring it
            if not _exact_verdict_data(A_std, b_std, basis, costs, red, T):
                return _STALLED
            since_refresh = 0
            continue
        leave = _ratio_test(T, enter)
        if leave < 0:
            if since_refresh > 0:
                # rule out a phantom entering column before failing
                if not _refactor(A_std, b_std, basis, T):
                    return _STALLED
                _recompute_red(T, basis, costs, red)
                since_refresh = 0
                continue
            return _UNBOUNDED
        _pivot(T, red, leave, enter)
        in_basis[basis[leave]] = False
        in_basis[enter] = True
        basis[leave] = enter
        since_refresh += 1
        if since_refresh >= _REFRESH:
            if not _refactor(A_std, b_std, basis, T):
                return _STALLED
            _recompute_red(T, basis, costs, red)
            since_refresh = 0
    return _STALLED


@njit(cache=True)
def _two_phase(c, A, senses, b):
    """Solve max c.x, A x (senses) b, x >= 0.

    Returns (status, x, basis, A_std, b_std); the standard-form outputs let
    the caller re-solve the final basis against the original data.
    """
    m, n = A.shape
    A = A.copy()
    b = b.copy()
    sn = senses.copy()
    for i in range(m):
        if b[i] < 0.0:
            b[i] = -b[i]
            A[i] = -A[i]
            if sn[i] == 0:
                sn[i] = 2
            elif sn[i] == 2:
                sn[i] = 0
        if sn[i] == 2 and b[i] == 0.0:
            # ">= 0" rows need no artificial once negated into "<= 0"
            A[i] = -A[i]
            sn[i] = 0
    # Row equilibration keeps the pivot tolerances scale-free. Rows that are
    # negligible against the problem's own scale are left alone: blowing a
    # roundoff-level row up to O(1) would inject an effectively random
    # constraint and wreck the conditioning.
    global_scale = np.abs(A).max()
    floor = 1e-9 * global_scale
    for i in range(m):
        s = np.abs(A[i]).max()
        if s > floor:
            A[i] /= s
            b[i] /= s
    cs = np.abs(c).max()
    c_in = c / cs if cs > 0.0 else c.copy()

    n_slack = 0
    n_art = 0
    for i in range(m):
        if sn[i] == 0:
            n_slack += 1
        elif sn[i] == 2:
            n_slack += 1
            n_art += 1
        else:
            n_art += 1
    ncols = n + n_slack + n_art
    T = np.zeros((m, ncols + 1))
    basis = np.empty(m, np.int64)
    a_at = n + n_slack
    si = n
    ai = a_at
    for i in range(m):
        T[i, :n] = A[i]
        T[i, ncols] = b[i]
        if sn[i] == 0:
            T[i, si] = 1.0
            basis[i] = si
            si += 1
        elif sn[i] == 2:
            T[i, si] = -1.0
            si += 1
            T[i, ai] = 1.0
            basis[i] = ai
            ai += 1
        else:
            T[i, ai] = 1.0
            basis[i] = ai
            ai += 1
    A_std = T[:, :ncols].copy()
    b_std = b.copy()
    allowed = np.ones(ncols, np.bool_)
    in_basis = np.zeros(ncols, np.bool_)
    for i in range(m):
        in_basis[basis[i]] = True
    red = np.empty(ncols + 1)
    x = np.zeros(n)
    max_iter = 500 * (m + ncols) + 5000

    if n_art > 0:
        # Phase 1: maximize -(sum of artificials); zero iff feasible. The
        # early exit at the objective cap may fire on drifted data, so verify
        # on refactorized numbers and resume iterating when it was noise.
        costs = np.zeros(ncols)
        for j in range(a_at, ncols):
            costs[j] = -1.0
        feasible = False
        for _ in range(50):
            status = _iterate(T, basis, allowed, in_basis, costs, red, max_iter,
                              0.0, A_std, b_std)
            if status == _UNBOUNDED:
                return _STALLED, x, basis, A_std, b_std  # bounded phase; numerics broke
            if status != _OPTIMAL:
                return status, x, basis, A_std, b_std
            if not _exact_verdict_data(A_std, b_std, basis, costs, red, T):
                return _STALLED, x, basis, A_std, b_std
            if red[ncols] <= 1e-7:  # red[-1] == sum of artificials
                feasible = True
                break
            improvable = False
            for j in range(ncols):
                if allowed[j] and not in_basis[j] and red[j] > _TOL:
                    improvable = True
                    break
            if not improvable:
                return _INFEASIBLE, x, basis, A_std, b_std
        if not feasible:
            return _STALLED, x, basis, A_std, b_std
        # Pivot leftover (zero-valued) artificials out where possible.
        for i in range(m):
            if basis[i] >= a_at:
                best = -1
                for j in range(a_at):
                    if not in_basis[j] and abs(T[i, j]) > _PIVOT_TOL:
                        best = j
                        break
                if best >= 0:
                    _pivot(T, red, i, best)
                    in_basis[basis[i]] = False
                    in_basis[best] = True
                    basis[i] = best
        for j in range(a_at, ncols):
            allowed[j] = False

    costs = np.zeros(ncols)
    costs[:n] = c_in
    status = _iterate(T, basis, allowed, in_basis, costs, red, max_iter, np.inf,
                      A_std, b_std)
    if status != _OPTIMAL:
        return status, x, basis, A_std, b_std
    # re-solve the final basis against the original data (plus one step of
    # iterative refinement) so x does not inherit accumulated pivot roundoff
    B = np.empty((m, m))
    for i in range(m):
        B[:, i] = A_std[:, basis[i]]
    xb = np.linalg.solve(B, b_std)
    xb += np.linalg.solve(B, b_std - B @ xb)
    refined_ok = True
    for v in xb:
        if not np.isfinite(v):
            refined_ok = False
            break
    for i in range(m):
        if basis[i] < n:
            x[basis[i]] = xb[i] if refined_ok else T[i, ncols]
    return _OPTIMAL, x, basis, A_std, b_std


def _solve_highs(lp: LPProblem) -> np.ndarray:
    """Deterministic fallback for tableaus the pivot loop could not finish."""
    le = [i for i, s in enumerate(lp.senses) if s == "<="]
    ge = [i for i, s in enumerate(lp.senses) if s == ">="]
    eq = [i for i, s in enumerate(lp.senses) if s == "="]
    A_ub = b_ub = A_eq = b_eq = None
    if le or ge:
        A_ub = np.vstack([lp.lhs[le], -lp.lhs[ge]])
        b_ub = np.concatenate([lp.rhs[le], -lp.rhs[ge]])
    if eq:
        A_eq = lp.lhs[eq]
        b_eq = lp.rhs[eq]
    res = linprog(-lp.objective, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                  bounds=(0, None), method="highs")
    if res.status == 2:
        raise Infeasible("linear program is infeasible")
    if res.status == 3:
        raise Unbounded("linear program is unbounded")
    if res.status != 0:
        raise RuntimeError(f"fallback LP solve failed: {res.message}")
    return np.asarray(res.x, dtype=np.float64)


def solve_lp(lp: LPProblem) -> np.ndarray:
    """Return an optimal basic feasible solution of lp.

    Deterministic: identical input bytes give identical output bytes. The
    final basis is re-solved against the original constraint data, so the
    answer does not inherit roundoff accumulated across pivots. Raises
    Unbounded / Infeasible; either indicates a malformed caller problem
    rather than a condition this solver repairs.
    """
    codes = np.array([_SENSE_CODES[s] for s in lp.senses], dtype=np.int8)
    try:
        status, x, basis, A_std, b_std = _two_phase(lp.objective, lp.lhs, codes, lp.rhs)
    except np.linalg.LinAlgError:
        return _solve_highs(lp)
    if status in (_INFEASIBLE, _UNBOUNDED):
        # cross-check before surfacing: heavy degeneracy or conditioning can
        # fool the tableau; _solve_highs re-raises if the verdict was real
        return _solve_highs(lp)
    if status == _STALLED:
        return _solve_highs(lp)
    if x.min() < -1e-9:
        # ill-conditioned final basis; hand the quality problem to the backup
        return _solve_highs(lp)
    return x
