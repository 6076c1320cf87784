"""Accelerated average consensus and its privacy-preserving variant.

Synchronous-round simulation over an undirected connected topology: every
agent reads its one-hop neighbors' round-k values and writes round k+1.  The
update is

    y_w(k+1) = W y(k)
    y_p(k+1) = eta1 * y_w(k+1) + eta2 * y(k)
    y(k+1)   = beta * y_p(k+1) + (1 - beta) * y_w(k+1)

with Metropolis weights W.  With eta1 + eta2 = 1 this is the linear iteration
((1+beta) W - beta I); beta defaults to the balanced-spectrum optimum
computed from the (public) topology, which is what makes the predictor an
acceleration instead of a divergence on negative-spectrum graphs.

The privacy-preserving variant adds geometrically decaying noise:
``y_n(0) = z_n(0) + delta_n(0)`` and after every update
``y_n(k) += delta_n(k) - delta_n(k-1)`` with ``delta_n(k)`` uniform on
``[-(sigma/2) gamma^{k+1}, +(sigma/2) gamma^{k+1}]``, so the injected bias
telescopes away while early iterates never expose ``z_n(0)``.

Stopping: every agent's successive max-norm deviation must fall below
``stop_tol`` (scaled by a spectrum-derived safety margin so the distance to
the true mean is itself below ``stop_tol``), detected by a simulator-provided
all-reduce flag.  ``polish=True`` keeps iterating to the floating-point
plateau; accuracy-critical gathers use it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ConsensusError", "ConsensusConfig", "ConsensusResult",
    "metropolis_weights", "aac_run", "ppaac_run", "mean_to_sum", "write_trace",
]


class ConsensusError(Exception):
    pass


@dataclass(frozen=True)
class ConsensusConfig:
    beta: float | None = None      # None: balanced-spectrum optimum
    eta1: float = 2.0
    eta2: float = -1.0
    stop_tol: float = 1e-10
    max_iters: int = 200_000
    sigma: float = 0.0             # PP noise magnitude
    gamma: float = 0.4             # PP noise decay, in [0, 1)
    polish: bool = False           # iterate to the floating-point plateau

    def __post_init__(self):
        if abs(self.eta1 + self.eta2 - 1.0) > 1e-12:
            raise ValueError("predictor weights must satisfy eta1 + eta2 = 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.sigma < 0.0:
            raise ValueError("sigma must be >= 0")
        if self.stop_tol <= 0.0:
            raise ValueError("stop_tol must be > 0")


@dataclass
class ConsensusResult:
    values: list[np.ndarray]       # per-agent converged vectors
    iterations: int
    beta: float
    rho: float                     # contraction factor of the iteration
    trace: list[tuple[int, int, float]] = field(default_factory=list)


def metropolis_weights(topology, n_agents: int) -> np.ndarray:
    """Doubly stochastic Metropolis weights for 1-based agents 1..n.

    ``w[i, j] = 1 / (1 + max(deg_i, deg_j))`` on edges; self-weights absorb
    the remainder.
    """
    W = np.zeros((n_agents, n_agents))
    deg = np.zeros(n_agents, dtype=int)
    edges = set()
    for a, b in topology:
        if not (1 <= a <= n_agents and 1 <= b <= n_agents) or a == b:
            raise ConsensusError(f"bad topology edge ({a}, {b})")
        e = (min(a, b) - 1, max(a, b) - 1)
        if e not in edges:
            edges.add(e)
            deg[e[0]] += 1
            deg[e[1]] += 1
    for i, j in edges:
        w = 1.0 / (1.0 + max(deg[i], deg[j]))
        W[i, j] = W[j, i] = w
    np.fill_diagonal(W, 1.0 - W.sum(axis=1))
    if not _connected(n_agents, edges):
        raise ConsensusError("topology is disconnected")
    return W


def _connected(n, edges) -> bool:
    if n == 1:
        return True
    adj = {i: set() for i in range(n)}
    for i, j in edges:
        adj[i].add(j)
        adj[j].add(i)
    seen, stack = {0}, [0]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == n


def _mixing_params(W: np.ndarray, cfg: ConsensusConfig) -> tuple[float, float]:
    lam = np.linalg.eigvalsh(W)
    lam2, lam_n = lam[-2], lam[0]
    if cfg.beta is None:
        beta = (lam2 + lam_n) / (2.0 - lam2 - lam_n)
        beta = float(np.clip(beta, 0.0, 0.999))
    else:
        beta = cfg.beta
    rho = max(abs((1.0 + beta) * lam2 - beta), abs((1.0 + beta) * lam_n - beta))
    if rho >= 1.0:
        raise ConsensusError(
            f"parameters do not contract on this topology (rho = {rho:.4f}); "
            "lower beta or leave it unset")
    return beta, rho


def aac_run(initials, topology, cfg: ConsensusConfig | None = None,
            recorder=None) -> ConsensusResult:
    """Run plain accelerated consensus; converges to the mean of ``initials``."""
    cfg = cfg or ConsensusConfig()
    return _run(initials, topology, cfg, rngs=None, recorder=recorder)


def ppaac_run(initials, topology, cfg: ConsensusConfig, rngs,
              recorder=None) -> ConsensusResult:
    """Privacy-preserving consensus; ``rngs`` is one Generator per agent."""
    if cfg.sigma > 0 and rngs is None:
        raise ValueError("noisy runs need per-agent RNGs")
    return _run(initials, topology, cfg, rngs=rngs, recorder=recorder)


def mean_to_sum(value, n_agents: int):
    """Consensus converges to the mean; the aggregate of interest is the sum."""
    return value * n_agents


def _run(initials, topology, cfg, rngs, recorder) -> ConsensusResult:
    n = len(initials)
    Y = np.array([np.asarray(v, dtype=float).ravel() for v in initials])
    if n == 1:
        # degenerate topology: nothing to average, noise disabled by design
        return ConsensusResult([Y[0].copy()], 0, 0.0, 0.0)
    d = Y.shape[1]
    W = metropolis_weights(topology, n)
    beta, rho = _mixing_params(W, cfg)
    margin = min(1.0, (1.0 - rho) / max(rho, 1e-12))
    threshold = cfg.stop_tol * margin

    neighbor_idx = [np.nonzero(W[i])[0] for i in range(n)]
    noisy = rngs is not None and cfg.sigma > 0.0
    if noisy:
        half = 0.5 * cfg.sigma * cfg.gamma
        delta_prev = np.array([rngs[i].uniform(-half, half, size=d) for i in range(n)])
        Y = Y + delta_prev

    trace: list[tuple[int, int, float]] = []
    converged_round = None
    best_dev = np.inf
    stall = 0
    k = 0
    while k < cfg.max_iters:
        k += 1
        if recorder is not None:
            for i in range(n):
                for j in neighbor_idx[i]:
                    if j != i:
                        recorder(k, i + 1, j + 1, Y[i],
                                 "consensus.ppaac" if noisy else "consensus.aac")
        Yw = W @ Y
        Ynew = beta * (cfg.eta1 * Yw + cfg.eta2 * Y) + (1.0 - beta) * Yw
        if noisy:
            half = 0.5 * cfg.sigma * cfg.gamma ** (k + 1)
            delta = np.array([rngs[i].uniform(-half, half, size=d) for i in range(n)])
            Ynew += delta - delta_prev
            delta_prev = delta
        devs = np.abs(Ynew - Y).max(axis=1) if d else np.zeros(n)
        dev_max = float(devs.max())
        Y = Ynew
        trace.extend((k, i + 1, float(devs[i])) for i in range(n))
        if recorder is not None:
            # all-reduce convergence flag (1 bit), one per directed edge
            for i in range(n):
                for j in neighbor_idx[i]:
                    if j != i:
                        recorder(k, i + 1, j + 1,
                                 np.array([float(devs[i] <= threshold)]),
                                 "consensus.flag")
        if np.all(devs <= threshold):
            if converged_round is None:
                converged_round = k
            if not cfg.polish:
                break
            # keep going until the deviation stops improving (fp floor)
            if dev_max >= 0.9 * best_dev:
                stall += 1
                if stall >= 3:
                    break
            else:
                stall = 0
            if k - converged_round > 2000:
                break
        best_dev = min(best_dev, dev_max)
    else:
        raise ConsensusError(
            f"no convergence after {cfg.max_iters} iterations "
            f"(last deviation {dev_max:.3e}, threshold {threshold:.3e})")
    if converged_round is None:
        raise ConsensusError(
            f"no convergence after {k} iterations "
            f"(last deviation {dev_max:.3e}, threshold {threshold:.3e})")
    return ConsensusResult([Y[i].copy() for i in range(n)], k, beta, rho, trace)


def write_trace(result: ConsensusResult, path) -> None:
    """Per-round disagreement trace as CSV (agent -1 = network maximum)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "agent", "deviation"])
        for row in result.trace:
            w.writerow(row)
