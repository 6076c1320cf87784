"""Joint wind uncertainty as a Gaussian mixture and quantile-based RHS terms.

The joint GMM lives over all wind farms' active power (case order).  Reactive
wind output is a fixed linear image of active output, ``w_hat = tan(pfa) * w``,
so the reactive contribution of every constraint folds into the projection
weights and only one joint model is ever stored.

Scalar mixtures may carry zero-variance (degenerate) components; their CDF
contribution is a unit step, which keeps exact constructions like delta
forecasts usable in tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

__all__ = [
    "JointGmm", "ScalarGmm", "project", "cdf", "quantile",
    "joint_from_case", "total_wind_weights", "rhs_supply_demand", "rhs_state",
]


@dataclass(frozen=True)
class JointGmm:
    """Gaussian mixture over the stacked wind vector; dimension = total farms."""
    weights: np.ndarray       # (K,)
    means: np.ndarray         # (K, D)
    covariances: np.ndarray   # (K, D, D)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.covariances, dtype=float)
        if cov.ndim == 2:
            cov = cov[None, :, :]
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)
        if w.ndim != 1 or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        K, D = mu.shape
        if cov.shape != (K, D, D):
            raise ValueError("covariance stack must be (K, D, D)")
        for k in range(K):
            if not np.allclose(cov[k], cov[k].T, atol=1e-12):
                raise ValueError(f"covariance {k} is not symmetric")
            eig = np.linalg.eigvalsh(cov[k])
            if eig.min() < -1e-10 * max(1.0, abs(eig).max()):
                raise ValueError(f"covariance {k} is not PSD")

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class ScalarGmm:
    """Univariate mixture; components are (weight, mean, variance >= 0)."""
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.asarray(self.means, dtype=float)
        var = np.asarray(self.variances, dtype=float)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)
        if abs(w.sum() - 1.0) > 1e-12 or np.any(w <= 0):
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(var < -1e-15):
            raise ValueError("variances must be >= 0")
        if not (w.shape == mu.shape == var.shape):
            raise ValueError("component arrays must share a shape")


def project(gmm: JointGmm, weights, offset: float = 0.0) -> ScalarGmm:
    """Scalar law of ``weights . w + offset`` for ``w`` drawn from the joint GMM."""
    a = np.asarray(weights, dtype=float)
    if a.shape != (gmm.dim,):
        raise ValueError(f"projection weights must have shape ({gmm.dim},), got {a.shape}")
    means = gmm.means @ a + offset
    variances = np.einsum("i,kij,j->k", a, gmm.covariances, a)
    # tiny negative values from roundoff clip to the degenerate case
    variances = np.maximum(variances, 0.0)
    return ScalarGmm(gmm.weights.copy(), means, variances)


def cdf(g: ScalarGmm, x) -> np.ndarray | float:
    """Mixture CDF; degenerate components contribute unit steps at their mean."""
    xv = np.asarray(x, dtype=float)
    scalar = xv.ndim == 0
    xv = np.atleast_1d(xv)
    sig = np.sqrt(g.variances)
    out = np.zeros_like(xv)
    for w, mu, s in zip(g.weights, g.means, sig):
        if s == 0.0:
            out += w * (xv >= mu)
        else:
            out += w * ndtr((xv - mu) / s)
    return float(out[0]) if scalar else out


def quantile(g: ScalarGmm, p: float) -> float:
    """Smallest ``x`` with ``cdf(x) >= p``, found by bracketing and bisection.

    Brackets at component means +/- 10 sigma (widened adaptively), then
    bisects to below 1e-13 absolute on x.  On strictly increasing regions
    this pins |cdf(x) - p| <= 1e-10; across a step it returns the jump point.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {p}")
    sig = np.sqrt(g.variances)
    lo = float(np.min(g.means - 10.0 * sig))
    hi = float(np.max(g.means + 10.0 * sig))
    if lo == hi:
        return lo  # fully degenerate at one point
    span = hi - lo
    while cdf(g, lo) >= p:
        lo -= span
    while cdf(g, hi) < p:
        hi += span
    tol = 1e-13 * max(1.0, abs(lo), abs(hi))
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if cdf(g, mid) >= p:
            hi = mid
        else:
            lo = mid
    return hi


# ---------------------------------------------------------------------------
# Case-level helpers
# ---------------------------------------------------------------------------

def joint_from_case(case) -> JointGmm:
    """Build the joint GMM from the case's wind model (farm order = case order)."""
    wm = case.wind_model
    if wm is None:
        raise ValueError("case has no wind model")
    return JointGmm(np.array(wm.weights), np.array(wm.means), np.array(wm.covariances))


def joint_from_case_view(view) -> JointGmm | None:
    """Joint GMM from anything carrying a ``wind_model`` spec; None without one."""
    wm = getattr(view, "wind_model", None)
    if wm is None:
        return None
    return JointGmm(np.array(wm.weights), np.array(wm.means), np.array(wm.covariances))


def total_wind_weights(case) -> np.ndarray:
    """All-ones projection: total active wind output."""
    return np.ones(len(case.wind_farms))


def rhs_supply_demand(case, gmm: JointGmm | None, t: int, eps_b: float) -> float:
    """Deterministic RHS of the supply-demand chance constraint at time ``t``.

    The converted constraint reads ``-sum(g_t) <= rhs``; the RHS is the low
    eps_b-quantile of total wind minus the total load at ``t``.
    """
    if not 1 <= t <= case.T:
        raise ValueError(f"t must be in 1..{case.T}")
    total_load = sum(d.active_profile[t - 1] for d in case.loads)
    if gmm is None or gmm.dim == 0:
        q = 0.0
    else:
        q = quantile(project(gmm, total_wind_weights(case)), eps_b)
    return q - total_load


def rhs_state(case, maps, gmm: JointGmm | None, region: int, index: int, t: int,
              alpha_s: float) -> float:
    """Deterministic RHS for monitored state ``index`` of ``region`` at ``t``.

    Combines the load terms, the constant term, the state bound and the
    (1 - alpha_s)-quantile of the state's wind-driven part.  ``maps`` is the
    :class:`~ccopf.dlpf.StateMaps` for the case.
    """
    s = maps.state(region, index)
    load_term = maps.load_term(s, case, t)
    xi = maps.xi(s)
    wind_w = maps.wind_weights(s, case)
    if gmm is None or gmm.dim == 0:
        q = 0.0
    else:
        q = quantile(project(gmm, wind_w), 1.0 - alpha_s)
    return -load_term - xi + s.bound - q
