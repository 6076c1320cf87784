"""Transformation-based encryption: key material, masking, and decryption.

Each region owns a private invertible matrix ``M`` over its stacked decision
vector, strictly positive diagonal row masks (one per bounded RHS block), and
two private invertible matrices ``W_Q``/``W_P`` used by the distributed
linear-system solve.  Keys never leave their owning agent and are never
serialized into message payloads.

The encrypted problem carries ``M' Lambda M`` and ``c' M`` in the objective
and right-multiplies every constraint column block by ``M``; bounded RHS
blocks and their rows are additionally row-scaled, which leaves the feasible
set untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qp import CompactQp, RowLayout

__all__ = [
    "KeyGenError", "TeDims", "TeKeys", "RegionBlocks", "EncryptedShare",
    "EncryptedQp", "random_invertible", "conditioned_invertible", "gen_keys",
    "encrypt_local", "assemble_p1", "decrypt_solution", "mask_flow_expression",
]


class KeyGenError(Exception):
    """Could not draw an invertible matrix under the condition cap."""


@dataclass(frozen=True)
class TeDims:
    """Region dimensions the key material must match."""
    gen_count: int
    T: int
    nq_rows: int     # reactive DLPF rows owned by the region
    np_rows: int     # active DLPF rows owned by the region

    @property
    def H(self) -> int:
        return self.gen_count * self.T

    @property
    def n_ramp(self) -> int:
        return self.gen_count * (self.T - 1)


@dataclass(frozen=True)
class TeKeys:
    region: int
    M: np.ndarray              # (H, H) invertible
    phi_g_plus: np.ndarray     # (H,) strictly positive diagonal
    phi_g_minus: np.ndarray    # (H,)
    phi_r_plus: np.ndarray     # (n_ramp,)
    phi_r_minus: np.ndarray    # (n_ramp,)
    W_Q: np.ndarray            # (nq, nq) invertible
    W_P: np.ndarray            # (np, np) invertible
    rng_seed: int


def random_invertible(rng: np.random.Generator, n: int,
                      kappa_max: float = 1e4, attempts: int = 64) -> np.ndarray:
    """i.i.d. U[-1, 1] entries, resampled until the condition estimate fits."""
    if n == 0:
        return np.zeros((0, 0))
    for _ in range(attempts):
        A = rng.uniform(-1.0, 1.0, size=(n, n))
        if n == 1:
            if abs(A[0, 0]) >= 1e-3:
                return A
            continue
        if np.linalg.cond(A) <= kappa_max:
            return A
    raise KeyGenError(
        f"exhausted {attempts} draws for an invertible {n}x{n} matrix "
        f"under condition cap {kappa_max:g}")


def conditioned_invertible(rng: np.random.Generator, n: int,
                           kappa: float = 10.0) -> np.ndarray:
    """Random matrix with singular values shaped to condition ~ ``kappa``."""
    if n == 0:
        return np.zeros((0, 0))
    U, _ = np.linalg.qr(rng.standard_normal((n, n)))
    V, _ = np.linalg.qr(rng.standard_normal((n, n)))
    log_s = rng.uniform(-0.5 * np.log(kappa), 0.5 * np.log(kappa), size=n)
    return (U * np.exp(log_s)) @ V.T


def gen_keys(dims: TeDims, seed: int, kappa_max: float = 1e4,
             region: int = -1) -> TeKeys:
    """Deterministic key material for one region."""
    rng = np.random.default_rng(seed)
    M = random_invertible(rng, dims.H, kappa_max)
    phi = lambda size: rng.uniform(0.5, 2.0, size=size)
    keys = TeKeys(
        region=region,
        M=M,
        phi_g_plus=phi(dims.H),
        phi_g_minus=phi(dims.H),
        phi_r_plus=phi(dims.n_ramp),
        phi_r_minus=phi(dims.n_ramp),
        W_Q=random_invertible(rng, dims.nq_rows, kappa_max),
        W_P=random_invertible(rng, dims.np_rows, kappa_max),
        rng_seed=seed,
    )
    return keys


def identity_keys(dims: TeDims, region: int = -1) -> TeKeys:
    """Identity masks: deliberately leaks everything (audit negative control)."""
    return TeKeys(
        region=region,
        M=np.eye(dims.H),
        phi_g_plus=np.ones(dims.H),
        phi_g_minus=np.ones(dims.H),
        phi_r_plus=np.ones(dims.n_ramp),
        phi_r_minus=np.ones(dims.n_ramp),
        W_Q=np.eye(dims.nq_rows),
        W_P=np.eye(dims.np_rows),
        rng_seed=0,
    )


@dataclass(frozen=True)
class RegionBlocks:
    """Raw per-region pieces of the compact program (owner's eyes only)."""
    region: int
    lambda_diag: np.ndarray    # (H,) tiled quadratic costs
    c: np.ndarray              # (H,) tiled linear costs
    E: np.ndarray              # (n_ramp, H) ramp difference operator
    K: np.ndarray              # (T, H) balance rows
    U_expr: np.ndarray         # (T*|expr|, H) expression-state rows
    g_plus: np.ndarray
    g_minus: np.ndarray
    r_plus: np.ndarray
    r_minus: np.ndarray


@dataclass(frozen=True)
class EncryptedShare:
    """Everything a region may freely publish about its local problem."""
    region: int
    cM: np.ndarray             # (H,)
    QM: np.ndarray             # (H, H) symmetric PD
    cap_upper_M: np.ndarray    # (H, H)  phi+ . J . M
    cap_lower_M: np.ndarray    # (H, H)  phi- . J . M
    ramp_upper_M: np.ndarray   # (n_ramp, H)
    ramp_lower_M: np.ndarray
    K_M: np.ndarray            # (T, H)
    U_expr_M: np.ndarray       # (T*|expr|, H)
    g_plus_bar: np.ndarray
    g_minus_bar: np.ndarray
    r_plus_bar: np.ndarray
    r_minus_bar: np.ndarray

    @property
    def H(self) -> int:
        return self.cM.shape[0]

    def fields(self):
        """(name, array) pairs in wire order."""
        return [
            ("cM", self.cM), ("QM", self.QM),
            ("cap_upper_M", self.cap_upper_M), ("cap_lower_M", self.cap_lower_M),
            ("ramp_upper_M", self.ramp_upper_M), ("ramp_lower_M", self.ramp_lower_M),
            ("K_M", self.K_M), ("U_expr_M", self.U_expr_M),
            ("g_plus_bar", self.g_plus_bar), ("g_minus_bar", self.g_minus_bar),
            ("r_plus_bar", self.r_plus_bar), ("r_minus_bar", self.r_minus_bar),
        ]


class EncryptedQp(CompactQp):
    """Marker subclass: a compact program assembled in encrypted coordinates."""


def encrypt_local(blocks: RegionBlocks, keys: TeKeys) -> EncryptedShare:
    """Apply the full transformation to one region's raw blocks."""
    H = blocks.c.shape[0]
    if keys.M.shape != (H, H):
        raise ValueError(f"encryption matrix must be {H}x{H}, got {keys.M.shape}")
    M = keys.M
    Lam = np.diag(blocks.lambda_diag)
    QM = M.T @ Lam @ M
    QM = 0.5 * (QM + QM.T)   # kill roundoff asymmetry; stays PD
    return EncryptedShare(
        region=blocks.region,
        cM=blocks.c @ M,
        QM=QM,
        cap_upper_M=keys.phi_g_plus[:, None] * M,
        cap_lower_M=keys.phi_g_minus[:, None] * M,
        ramp_upper_M=keys.phi_r_plus[:, None] * (blocks.E @ M),
        ramp_lower_M=keys.phi_r_minus[:, None] * (blocks.E @ M),
        K_M=blocks.K @ M,
        U_expr_M=blocks.U_expr @ M,
        g_plus_bar=keys.phi_g_plus * blocks.g_plus,
        g_minus_bar=keys.phi_g_minus * blocks.g_minus,
        r_plus_bar=keys.phi_r_plus * blocks.r_plus,
        r_minus_bar=keys.phi_r_minus * blocks.r_minus,
    )


def assemble_p1(shares, upsilon: np.ndarray, delta: np.ndarray,
                state_kinds=(), flow_rows=None) -> EncryptedQp:
    """Stack all regions' encrypted shares into the encrypted program.

    ``state_kinds`` lists, per monitored state in registry order, either
    ``("expr", expr_index)`` for a voltage state carried in the shares or
    ``("flow",)`` for a line-flow state whose masked rows arrive separately in
    ``flow_rows`` as ``{registry_pos: (rows, rhs)}`` with ``rows`` of shape
    (T, H) over the full encrypted vector and ``rhs`` of length T.

    Share arrival order does not matter; stacking is by region id.
    """
    shares = sorted(shares, key=lambda s: s.region)
    if [s.region for s in shares] != list(range(1, len(shares) + 1)):
        missing = set(range(1, len(shares) + 1)) - {s.region for s in shares}
        raise ValueError(f"missing shares for regions {sorted(missing)}")
    T = upsilon.shape[0]
    dims = [s.H for s in shares]
    H = sum(dims)
    col_slices, pos = [], 0
    for h in dims:
        col_slices.append(slice(pos, pos + h))
        pos += h

    n_ramp = sum(s.ramp_upper_M.shape[0] for s in shares)
    S = len(state_kinds)
    rows = RowLayout(
        cap_upper=slice(0, H),
        cap_lower=slice(H, 2 * H),
        ramp_upper=slice(2 * H, 2 * H + n_ramp),
        ramp_lower=slice(2 * H + n_ramp, 2 * H + 2 * n_ramp),
        balance=slice(2 * H + 2 * n_ramp, 2 * H + 2 * n_ramp + T),
        states=slice(2 * H + 2 * n_ramp + T, 2 * H + 2 * n_ramp + T + T * S),
    )
    Q = np.zeros((H, H))
    c = np.zeros(H)
    A = np.zeros((rows.n_rows, H))
    b = np.zeros(rows.n_rows)

    ramp_pos = 0
    for share, sl in zip(shares, col_slices):
        Q[sl, sl] = share.QM
        c[sl] = share.cM
        A[sl.start:sl.stop, sl] = share.cap_upper_M
        b[sl.start:sl.stop] = share.g_plus_bar
        A[H + sl.start:H + sl.stop, sl] = -share.cap_lower_M
        b[H + sl.start:H + sl.stop] = -share.g_minus_bar
        nr = share.ramp_upper_M.shape[0]
        if nr:
            ru = slice(rows.ramp_upper.start + ramp_pos, rows.ramp_upper.start + ramp_pos + nr)
            rl = slice(rows.ramp_lower.start + ramp_pos, rows.ramp_lower.start + ramp_pos + nr)
            A[ru, sl] = share.ramp_upper_M
            b[ru] = share.r_plus_bar
            A[rl, sl] = -share.ramp_lower_M
            b[rl] = -share.r_minus_bar
            ramp_pos += nr
        A[rows.balance, sl] = share.K_M
    b[rows.balance] = upsilon

    n_expr = shares[0].U_expr_M.shape[0] // T if T and shares[0].U_expr_M.size else 0
    for s_pos, kind in enumerate(state_kinds):
        for t in range(T):
            row = rows.states.start + t * S + s_pos
            if kind[0] == "expr":
                expr_idx = kind[1]
                for share, sl in zip(shares, col_slices):
                    A[row, sl] = share.U_expr_M[t * n_expr + expr_idx, :]
                b[row] = delta[t * S + s_pos]
            elif kind[0] == "flow":
                frows, frhs = flow_rows[s_pos]
                A[row, :] = frows[t]
                b[row] = frhs[t]
            else:
                raise ValueError(f"unknown state kind {kind!r}")

    return EncryptedQp(Q, c, A, b, tuple(col_slices), rows, T)


def decrypt_solution(x_bar: np.ndarray, keys: TeKeys,
                     region_slices, region: int) -> np.ndarray:
    """Recover region ``region``'s decision block from the encrypted optimum."""
    sl = region_slices[region - 1]
    x_bar_n = x_bar[sl]
    if keys.M.shape[0] != x_bar_n.shape[0]:
        raise ValueError("key dimensions do not match the region's block")
    return keys.M @ x_bar_n


def mask_flow_expression(rows: np.ndarray, rhs: np.ndarray,
                         rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float]:
    """Scale a flow constraint (rows and bound) by one random positive scalar."""
    for _ in range(16):
        scalar = float(rng.uniform(0.5, 2.0))
        if scalar > 0.0:
            return scalar * rows, scalar * rhs, scalar
    raise RuntimeError("unreachable: positive draw failed repeatedly")
