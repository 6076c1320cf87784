"""Compact deterministic QP: block assembly, interior-point solve, KKT checks.

The program is ``min 1/2 x'Qx + c'x  s.t.  A x <= b`` with strictly convex Q.
Row layout (region-major inside each block, matching the constraint stacking
of the compact formulation):

    [capacity upper | capacity lower | ramp upper | ramp lower |
     supply-demand (T rows) | monitored states (T*|S| rows, time-major)]

``x`` is region-major and time-major within each region.  The solver is
cvxopt's interior-point method behind row equilibration, followed by a
deterministic active-set polish that re-solves the KKT system on the
identified active set; the polished point is kept only when it improves the
measured residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "CompactQp", "QpSolution", "KktReport", "QpError", "InfeasibleError",
    "SolverError", "assemble_p0", "solve_qp", "check_kkt", "export_triplets",
    "RowLayout",
]


class QpError(Exception):
    pass


class InfeasibleError(QpError):
    """No point satisfies A x <= b within tolerance (certificate attached)."""


class SolverError(QpError):
    """Numerical failure with diagnostics."""


@dataclass(frozen=True)
class RowLayout:
    """Row-block slices of the stacked constraint matrix."""
    cap_upper: slice
    cap_lower: slice
    ramp_upper: slice
    ramp_lower: slice
    balance: slice
    states: slice

    @property
    def n_rows(self) -> int:
        return self.states.stop


@dataclass(frozen=True)
class CompactQp:
    Q: np.ndarray
    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    region_slices: tuple[slice, ...]   # x column block per region
    rows: RowLayout | None = None
    T: int = 1

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class QpSolution:
    x: np.ndarray
    lam: np.ndarray
    objective: float
    kkt: "KktReport"


@dataclass(frozen=True)
class KktReport:
    stationarity: float      # inf-norm of Qx + c + A' lam
    primal: float            # inf-norm of max(Ax - b, 0)
    complementarity: float   # |lam . (Ax - b)|
    dual_min: float          # min lam entry (negative => dual infeasible)

    @property
    def dual_feasible(self) -> bool:
        return self.dual_min >= -1e-12

    def scaled(self, qp: CompactQp, x: np.ndarray) -> tuple[float, float, float]:
        s = 1.0 + max(np.abs(qp.c).max(initial=0.0), np.abs(qp.Q @ x).max(initial=0.0))
        r = 1.0 + np.abs(qp.b).max(initial=0.0)
        return self.stationarity / s, self.primal / r, self.complementarity / (s * r)


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def _region_dims(case):
    counts = case.gen_counts()
    T = case.T
    offsets, pos = [], 0
    for cnt in counts:
        offsets.append(slice(pos, pos + cnt * T))
        pos += cnt * T
    return counts, offsets, pos


def ramp_matrix(n_gen: int, T: int) -> np.ndarray:
    """Difference operator: row (t, g) reads g_{t+1} - g_t."""
    E = np.zeros(((T - 1) * n_gen, T * n_gen))
    for t in range(T - 1):
        r = slice(t * n_gen, (t + 1) * n_gen)
        E[r, t * n_gen:(t + 1) * n_gen] = -np.eye(n_gen)
        E[r, (t + 1) * n_gen:(t + 2) * n_gen] = np.eye(n_gen)
    return E


def balance_matrix(n_gen: int, T: int) -> np.ndarray:
    """Row t carries -1 over the generators of time block t."""
    K = np.zeros((T, T * n_gen))
    for t in range(T):
        K[t, t * n_gen:(t + 1) * n_gen] = -1.0
    return K


def state_matrix(phi_n: np.ndarray, T: int) -> np.ndarray:
    """Block-diagonal repetition of the per-region state coefficients."""
    S, g = phi_n.shape
    U = np.zeros((T * S, T * g))
    for t in range(T):
        U[t * S:(t + 1) * S, t * g:(t + 1) * g] = phi_n
    return U


def assemble_p0(case, maps, upsilon: np.ndarray, delta: np.ndarray) -> CompactQp:
    """Assemble the deterministic compact QP for a case.

    ``upsilon`` has length T; ``delta`` has length T*|S| ordered time-major
    then registry order.
    """
    counts, region_slices, H = _region_dims(case)
    T = case.T
    S = len(maps.registry)
    upsilon = np.asarray(upsilon, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if upsilon.shape != (T,):
        raise ValueError(f"upsilon must have shape ({T},)")
    if delta.shape != (T * S,):
        raise ValueError(f"delta must have shape ({T * S},)")

    Q = np.zeros((H, H))
    c = np.zeros(H)
    for n, sl in enumerate(region_slices, start=1):
        gens = case.generators_in(n)
        quad = np.array([g.quad_cost for g in gens])
        if np.any(quad <= 0):
            raise ValueError(f"region {n}: non-positive quadratic cost")
        lin = np.array([g.lin_cost for g in gens])
        Q[sl, sl] = np.diag(np.tile(quad, T))
        c[sl] = np.tile(lin, T)

    n_ramp = sum((T - 1) * cnt for cnt in counts)
    rows = RowLayout(
        cap_upper=slice(0, H),
        cap_lower=slice(H, 2 * H),
        ramp_upper=slice(2 * H, 2 * H + n_ramp),
        ramp_lower=slice(2 * H + n_ramp, 2 * H + 2 * n_ramp),
        balance=slice(2 * H + 2 * n_ramp, 2 * H + 2 * n_ramp + T),
        states=slice(2 * H + 2 * n_ramp + T, 2 * H + 2 * n_ramp + T + T * S),
    )
    A = np.zeros((rows.n_rows, H))
    b = np.zeros(rows.n_rows)

    ramp_pos = 0
    for n, sl in enumerate(region_slices, start=1):
        gens = case.generators_in(n)
        cnt = len(gens)
        Hn = cnt * T
        gp = np.tile([g.p_max for g in gens], T)
        gm = np.tile([g.p_min for g in gens], T)
        # capacity rows reuse the region's own column offsets
        A[sl.start:sl.stop, sl] = np.eye(Hn)
        b[sl.start:sl.stop] = gp
        A[H + sl.start:H + sl.stop, sl] = -np.eye(Hn)
        b[H + sl.start:H + sl.stop] = -gm
        if T > 1 and cnt:
            E = ramp_matrix(cnt, T)
            nr = E.shape[0]
            ru = slice(rows.ramp_upper.start + ramp_pos, rows.ramp_upper.start + ramp_pos + nr)
            rl = slice(rows.ramp_lower.start + ramp_pos, rows.ramp_lower.start + ramp_pos + nr)
            A[ru, sl] = E
            b[ru] = np.tile([g.ramp_max for g in gens], T - 1)
            A[rl, sl] = -E
            b[rl] = -np.tile([g.ramp_min for g in gens], T - 1)
            ramp_pos += nr
        A[rows.balance, sl] = balance_matrix(cnt, T)
        if S:
            A[rows.states, sl] = state_matrix(maps.phi(case, n), T)
    b[rows.balance] = upsilon
    b[rows.states] = delta

    return CompactQp(Q, c, A, b, tuple(region_slices), rows, T)


# ---------------------------------------------------------------------------
# Solving
# ---------------------------------------------------------------------------

def check_kkt(qp: CompactQp, x: np.ndarray, lam: np.ndarray) -> KktReport:
    """Raw KKT residuals of a primal/dual pair (pure function)."""
    if x.shape != (qp.n,) or lam.shape != (qp.m,):
        raise ValueError("solution dimensions do not match the program")
    grad = qp.Q @ x + qp.c + qp.A.T @ lam
    resid = qp.A @ x - qp.b
    return KktReport(
        stationarity=float(np.abs(grad).max(initial=0.0)),
        primal=float(np.maximum(resid, 0.0).max(initial=0.0)),
        complementarity=float(abs(lam @ resid)),
        dual_min=float(lam.min(initial=0.0)),
    )


def _ipm(qp: CompactQp, tol: float):
    from cvxopt import matrix, solvers
    options = {
        "show_progress": False,
        "abstol": min(tol, 1e-9),
        "reltol": min(tol, 1e-9),
        "feastol": min(tol * 10, 1e-8),
        "maxiters": 200,
        "refinement": 2,
    }
    # row equilibration leaves the feasible set untouched (positive scaling)
    row_scale = np.maximum(np.abs(qp.A).max(axis=1), 1e-12)
    A = qp.A / row_scale[:, None]
    b = qp.b / row_scale
    obj_scale = max(np.abs(qp.Q).max(), np.abs(qp.c).max(initial=0.0), 1.0)
    sol = solvers.qp(matrix(qp.Q / obj_scale), matrix(qp.c / obj_scale),
                     matrix(A), matrix(b), options=options)
    status = sol["status"]
    x = np.array(sol["x"]).ravel() if sol["x"] is not None else None
    lam = np.array(sol["z"]).ravel() if sol["z"] is not None else None
    if lam is not None:
        lam = np.maximum(lam * obj_scale / row_scale, 0.0)
    return status, x, lam


def _polish(qp: CompactQp, x: np.ndarray, lam: np.ndarray, tol: float):
    """Re-solve the KKT system on the active set identified by the IPM."""
    slack = qp.b - qp.A @ x
    b_scale = 1.0 + np.abs(qp.b)
    lam_max = max(lam.max(initial=0.0), 1.0)
    active = np.where((slack <= 1e-6 * b_scale) | (lam >= 1e-7 * lam_max))[0]
    active = set(active.tolist())
    for _ in range(40):
        idx = np.array(sorted(active), dtype=int)
        Aa = qp.A[idx] if idx.size else np.zeros((0, qp.n))
        ka = idx.size
        K = np.zeros((qp.n + ka, qp.n + ka))
        K[:qp.n, :qp.n] = qp.Q
        if ka:
            K[:qp.n, qp.n:] = Aa.T
            K[qp.n:, :qp.n] = Aa
        rhs = np.concatenate([-qp.c, qp.b[idx]])
        sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
        xp, mu = sol[:qp.n], sol[qp.n:]
        # drop constraints with clearly negative multipliers
        neg = idx[mu < -1e-9] if ka else np.array([], dtype=int)
        if neg.size:
            active -= set(neg.tolist())
            continue
        resid = qp.A @ xp - qp.b
        viol = np.where(resid > 1e-10 * b_scale)[0]
        new = [i for i in viol.tolist() if i not in active]
        if new:
            active |= set(new)
            continue
        lam_p = np.zeros(qp.m)
        if ka:
            lam_p[idx] = np.maximum(mu, 0.0)
        return xp, lam_p
    return None, None


def solve_qp(qp: CompactQp, tol: float = 1e-8) -> QpSolution:
    """Solve the strictly convex QP to relative KKT residuals <= ``tol``."""
    if qp.n == 0:
        raise ValueError("empty program")
    eig_min = np.linalg.eigvalsh(qp.Q).min() if qp.n <= 2000 else None
    if eig_min is not None and eig_min <= 0:
        raise ValueError("Q must be positive definite")

    if qp.m == 0:
        x = np.linalg.solve(qp.Q, -qp.c)
        lam = np.zeros(0)
        rep = check_kkt(qp, x, lam)
        return QpSolution(x, lam, _objective(qp, x), rep)

    try:
        status, x, lam = _ipm(qp, tol)
    except Exception as exc:   # cvxopt raises bare ValueError on rank issues
        raise SolverError(f"interior-point solver failed: {exc}") from exc

    if status == "primal infeasible" or x is None:
        raise InfeasibleError(
            "no point satisfies A x <= b within tolerance "
            f"(solver status: {status})")
    if status not in ("optimal", "unknown"):
        raise SolverError(f"solver returned status {status!r}")

    best_x, best_lam = x, lam
    best = _scaled_max(qp, x, lam)
    xp, lp = _polish(qp, x, lam, tol)
    if xp is not None:
        cand = _scaled_max(qp, xp, lp)
        if cand < best:
            best_x, best_lam, best = xp, lp, cand
    if best > tol:
        if status == "unknown":
            raise SolverError(
                f"solver did not converge: scaled KKT residual {best:.3e} > {tol:.1e}")
        raise SolverError(f"KKT residuals {best:.3e} exceed tolerance {tol:.1e}")
    rep = check_kkt(qp, best_x, best_lam)
    return QpSolution(best_x, best_lam, _objective(qp, best_x), rep)


def _objective(qp: CompactQp, x: np.ndarray) -> float:
    return float(0.5 * x @ qp.Q @ x + qp.c @ x)


def _scaled_max(qp: CompactQp, x: np.ndarray, lam: np.ndarray) -> float:
    rep = check_kkt(qp, x, lam)
    return max(rep.scaled(qp, x))


def export_triplets(qp: CompactQp, path) -> None:
    """Plain-text sparse triplet dump for cross-checking with other solvers."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# qp n={qp.n} m={qp.m}\n")
        for name, mat in (("Q", qp.Q), ("A", qp.A)):
            r, ccol = np.nonzero(mat)
            for i, j in zip(r, ccol):
                fh.write(f"{name} {i} {j} {mat[i, j]!r}\n")
        for i, v in enumerate(qp.c):
            if v:
                fh.write(f"c {i} {v!r}\n")
        for i, v in enumerate(qp.b):
            fh.write(f"b {i} {v!r}\n")
