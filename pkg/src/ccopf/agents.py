"""Per-region ISO agents, the simulated message bus, and the privacy audit.

The protocol runs five phases in strict order: formulating, encrypting,
sharing, solving, decrypting.  Agents interact only through the synchronous
round-based :class:`MessageBus`; every delivered payload lands in both the
sender's and the receiver's append-only ledger as (round, sender, receiver,
class, fingerprint).

Transport comes in two flavors:

* numeric averaging (AAC for the masked DLPF gather, PP-AAC for the
  confidential aggregates), where the averaging itself is the mechanism, and
* deterministic flood relay for exact payloads (encrypted shares, masked flow
  rows, and the canonical copy of converged aggregates), which keeps every
  agent's assembled encrypted program bit-identical.

The audit replays the ledgers against the case's confidential registry:
no payload may be bit-equal to any confidential array (or its transpose), no
payload may equal key material, and every payload class must be whitelisted.
"""

from __future__ import annotations

import hashlib
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import wind_uncertainty as wu
from .consensus import ConsensusConfig, mean_to_sum, ppaac_run
from .dist_inverse import mask_blocks, gather_masked, solve_masked, recover_blocks
from .dlpf import (assemble_dlpf, build_layout, expression_registry,
                   flow_expression, invert_oracle, mapping_coefficients,
                   region_rows)
from .grid_case import GridCase, confidential_arrays, region_view
from .qp import CompactQp, assemble_p0, ramp_matrix, balance_matrix, solve_qp
from .te_crypto import (EncryptedShare, RegionBlocks, TeDims, encrypt_local,
                        gen_keys, identity_keys, decrypt_solution,
                        mask_flow_expression, assemble_p1)

__all__ = [
    "Phase", "LedgerRecord", "AgentLedger", "MessageBus", "ProtocolConfig",
    "ProtocolError", "ProtocolResult", "CentralizedResult", "AuditFinding",
    "AuditReport", "run_protocol", "run_centralized", "privacy_audit",
    "fingerprint", "ALLOWED_PAYLOAD_CLASSES",
]


class ProtocolError(Exception):
    """Any phase failure aborts the whole run with diagnostics."""


class Phase(Enum):
    FORMULATING = 1
    ENCRYPTING = 2
    SHARING = 3
    SOLVING = 4
    DECRYPTING = 5
    DONE = 6


def fingerprint(arr: np.ndarray) -> str:
    """Order-preserving hash of the numeric content (shape-insensitive)."""
    data = np.ascontiguousarray(np.asarray(arr, dtype=np.float64)).ravel()
    return hashlib.sha256(data.tobytes()).hexdigest()


@dataclass(frozen=True)
class LedgerRecord:
    round: int
    sender: int
    receiver: int
    kind: str
    fingerprint: str
    shape: tuple


class AgentLedger:
    """Append-only record of every payload an agent sent or received."""

    def __init__(self, region: int):
        self.region = region
        self.records: list[LedgerRecord] = []

    def append(self, rec: LedgerRecord) -> None:
        self.records.append(rec)

    def __len__(self):
        return len(self.records)


SHARE_FIELD_CLASSES = tuple(
    "share." + name for name in (
        "cM", "QM", "cap_upper_M", "cap_lower_M", "ramp_upper_M",
        "ramp_lower_M", "K_M", "U_expr_M", "g_plus_bar", "g_minus_bar",
        "r_plus_bar", "r_minus_bar"))

ALLOWED_PAYLOAD_CLASSES = frozenset(
    ("consensus.aac", "consensus.ppaac", "consensus.flag",
     "aggregate.reference", "flow.masked_row") + SHARE_FIELD_CLASSES)


@dataclass
class Message:
    origin: int
    kind: str
    payload: np.ndarray
    meta: dict


class MessageBus:
    """Synchronous-round bus over the communication topology.

    Messages travel only along topology edges; every delivery is recorded in
    both endpoint ledgers.  ``flood`` relays items hop by hop until every
    agent holds every item (payloads forwarded verbatim).
    """

    def __init__(self, topology, n_agents: int):
        self.n_agents = n_agents
        self.neighbors: dict[int, list[int]] = {i: [] for i in range(1, n_agents + 1)}
        for a, b in topology:
            if b not in self.neighbors[a]:
                self.neighbors[a].append(b)
            if a not in self.neighbors[b]:
                self.neighbors[b].append(a)
        for lst in self.neighbors.values():
            lst.sort()
        self.ledgers = {i: AgentLedger(i) for i in range(1, n_agents + 1)}
        self.round = 0

    def record(self, rnd: int, sender: int, receiver: int, kind: str,
               payload: np.ndarray) -> None:
        if receiver not in self.neighbors[sender]:
            raise ProtocolError(
                f"message {sender}->{receiver} violates the topology")
        rec = LedgerRecord(rnd, sender, receiver, kind,
                           fingerprint(payload), tuple(np.shape(payload)))
        self.ledgers[sender].append(rec)
        self.ledgers[receiver].append(rec)

    def consensus_recorder(self):
        """Adapter passing bus rounds to the consensus engine."""
        offset = self.round

        def rec(k, sender, receiver, payload, kind):
            self.record(offset + k, sender, receiver, kind, payload)
            self.round = max(self.round, offset + k)
        return rec

    def flood(self, items: list[Message]) -> dict[int, list[Message]]:
        """Relay every item to every agent; returns each agent's full set."""
        have: dict[int, dict[int, Message]] = {i: {} for i in self.neighbors}
        new: dict[int, list[int]] = {i: [] for i in self.neighbors}
        for uid, msg in enumerate(items):
            have[msg.origin][uid] = msg
            new[msg.origin].append(uid)
        while any(new.values()):
            self.round += 1
            nxt: dict[int, list[int]] = {i: [] for i in self.neighbors}
            for i in sorted(self.neighbors):
                for uid in new[i]:
                    msg = items[uid]
                    for j in self.neighbors[i]:
                        if uid not in have[j]:
                            self.record(self.round, i, j, msg.kind, msg.payload)
                            have[j][uid] = msg
                            nxt[j].append(uid)
            new = nxt
        return {i: [have[i][uid] for uid in sorted(have[i])] for i in self.neighbors}


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProtocolConfig:
    seed: int = 0
    eps_b: float = 1e-4
    alpha_s: float = 0.05        # state SCCs hold with probability 1 - alpha_s
    sigma: float = 2.0           # PP-AAC noise magnitude
    gamma: float = 0.4           # PP-AAC noise decay
    stop_tol: float = 1e-10
    beta: float | None = None
    kappa_max: float = 1e4
    qp_tol: float = 1e-8
    max_iters: int = 200_000
    workers: int = 0             # 0: take CCOPF_THREADS, else 1
    use_identity_keys: bool = False   # audit negative control

    def __post_init__(self):
        if not 0.0 < self.eps_b < 1.0:
            raise ValueError("eps_b must lie in (0, 1)")
        if not 0.0 < self.alpha_s < 1.0:
            raise ValueError("alpha_s must lie in (0, 1)")

    def effective_workers(self) -> int:
        if self.workers > 0:
            return self.workers
        env = os.environ.get("CCOPF_THREADS", "")
        try:
            return max(1, int(env))
        except ValueError:
            return 1


@dataclass
class AuditInputs:
    """Driver-side material the audit matches payloads against."""
    confidential: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    keys: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)


@dataclass
class ProtocolResult:
    x: np.ndarray                       # concatenated decrypted solution
    per_region: dict[int, np.ndarray]
    x_bar: np.ndarray
    objectives: dict[int, float]        # per-agent reported objective
    kkt_scaled: tuple[float, float, float]
    upsilon: np.ndarray
    delta: np.ndarray                   # RHS of the state block in (P1)
    p1_hashes: dict[int, str]
    ledgers: dict[int, AgentLedger]
    audit_inputs: AuditInputs
    timings: dict[str, float]
    consensus_rounds: dict[str, int]
    p0_row_scales: np.ndarray           # driver-side: (P1 row i) = scale_i * (P0 row i) * M
    lam_p1: np.ndarray
    region_slices: tuple

    @property
    def objective(self) -> float:
        return self.objectives[min(self.objectives)]

    def report(self) -> dict:
        return {
            "objective": self.objective,
            "objectives": {str(k): v for k, v in self.objectives.items()},
            "kkt_scaled": list(self.kkt_scaled),
            "timings": self.timings,
            "consensus_rounds": self.consensus_rounds,
            "p1_hash": self.p1_hashes[min(self.p1_hashes)],
            "agents": len(self.per_region),
        }


@dataclass
class CentralizedResult:
    qp: CompactQp
    x: np.ndarray
    lam: np.ndarray
    objective: float
    upsilon: np.ndarray
    delta: np.ndarray
    maps: object
    timings: dict[str, float]


# ---------------------------------------------------------------------------
# Aggregate vector packing (public layout of the PP-AAC payload)
# ---------------------------------------------------------------------------

class AggregateLayout:
    """Slices of the stacked PP-AAC summand vector.

    ``[total-load (T)] ++ per expression state [load (T), xi (1), wind (Dw)]
    ++ [state bounds (S)]``; summed over agents it yields every aggregate the
    protocol needs.
    """

    def __init__(self, T: int, n_expr: int, n_wind: int, n_states: int):
        self.T, self.n_expr, self.n_wind, self.n_states = T, n_expr, n_wind, n_states
        self.upsilon_load = slice(0, T)
        self._expr_base = T
        self._expr_len = T + 1 + n_wind
        base = T + n_expr * self._expr_len
        self.bounds = slice(base, base + n_states)
        self.dim = base + n_states

    def expr_load(self, e: int) -> slice:
        s = self._expr_base + e * self._expr_len
        return slice(s, s + self.T)

    def expr_xi(self, e: int) -> int:
        return self._expr_base + e * self._expr_len + self.T

    def expr_wind(self, e: int) -> slice:
        s = self._expr_base + e * self._expr_len + self.T + 1
        return slice(s, s + self.n_wind)


# ---------------------------------------------------------------------------
# The per-region agent
# ---------------------------------------------------------------------------

class IsoAgent:
    """State machine for one regional ISO."""

    def __init__(self, case_view, config: ProtocolConfig, layout, expr_states,
                 agg_layout: AggregateLayout, key_seed):
        self.view = case_view
        self.n = case_view.region
        self.config = config
        self.layout = layout
        self.expr_states = expr_states
        self.agg = agg_layout
        self.phase = Phase.FORMULATING

        q_rows = layout.region_rows(self.n, "Q")
        p_rows = layout.region_rows(self.n, "P")
        self.q_offset = q_rows[0] if q_rows else 0
        self.p_offset = p_rows[0] if p_rows else 0
        self.nq, self.np_rows = len(q_rows), len(p_rows)
        self.own_q_bus = {layout.rows[i][2]: r for r, i in enumerate(q_rows)}
        self.own_p_bus = {layout.rows[i][2]: r for r, i in enumerate(p_rows)}

        dims = TeDims(len(case_view.generators), case_view.case_T,
                      self.nq, self.np_rows)
        if config.use_identity_keys:
            self.keys = identity_keys(dims, region=self.n)
        else:
            self.keys = gen_keys(dims, key_seed, config.kappa_max, region=self.n)

        self.G_Q = self.G_P = self.k_Q = self.k_P = None
        self.B_Q = self.B_P = None
        self.summand = None
        self.aggregate = None
        self.share = None
        self.shares: dict[int, EncryptedShare] = {}
        self.flow_rows: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.flow_scalars: dict[int, float] = {}
        self.upsilon = None
        self.delta = None
        self.p1 = None
        self.solution = None
        self.x_bar = None
        self.x_n = None

    def advance(self, phase: Phase) -> None:
        if phase.value != self.phase.value + 1:
            raise ProtocolError(
                f"agent {self.n}: illegal transition {self.phase} -> {phase}")
        self.phase = phase

    # -- formulating ---------------------------------------------------------

    def build_masked_block(self):
        self.G_Q, self.G_P, self.k_Q, self.k_P = region_rows(self.view)
        return mask_blocks(self.G_Q, self.G_P, self.keys,
                           self.q_offset, self.p_offset)

    def recover_sensitivities(self, gathered_stack: np.ndarray) -> None:
        b_bar = solve_masked(gathered_stack)
        self.B_Q, self.B_P = recover_blocks(
            b_bar, self.keys, self.q_offset, self.nq, self.p_offset, self.np_rows)

    def _sigma_own(self, col: int) -> tuple[np.ndarray, np.ndarray]:
        """This region's entries of a state's sensitivity row (Q rows, P rows)."""
        return self.B_Q[:, col], self.B_P[:, col]

    def build_summand(self) -> np.ndarray:
        """Confidential additive contribution to every protocol aggregate."""
        T = self.view.case_T
        z = np.zeros(self.agg.dim)
        for d in self.view.loads:
            z[self.agg.upsilon_load] += np.asarray(d.active_profile)
        col_index = self.layout.col_index
        for e, (kind, bus) in enumerate(self.expr_states):
            col = col_index[(kind, bus)]
            sig_q, sig_p = self._sigma_own(col)
            load = np.zeros(T)
            for d in self.view.loads:
                pr = self.own_p_bus.get(d.bus)
                if pr is not None:
                    load -= sig_p[pr] * np.asarray(d.active_profile)
                qr = self.own_q_bus.get(d.bus)
                if qr is not None:
                    load -= sig_q[qr] * np.asarray(d.reactive_profile)
            z[self.agg.expr_load(e)] = load
            z[self.agg.expr_xi(e)] = -(sig_q @ self.k_Q + sig_p @ self.k_P)
            wind = np.zeros(self.agg.n_wind)
            for pos, (fid, fbus, freg) in enumerate(self.view.wind_registry):
                if freg != self.n:
                    continue
                farm = next(w for w in self.view.wind_farms if w.id == fid)
                val = 0.0
                pr = self.own_p_bus.get(fbus)
                if pr is not None:
                    val += sig_p[pr]
                qr = self.own_q_bus.get(fbus)
                if qr is not None:
                    val += np.tan(farm.power_factor_angle) * sig_q[qr]
                wind[pos] = val
            z[self.agg.expr_wind(e)] = wind
        for s_pos, s in enumerate(self.view.monitored):
            if s.kind == "voltage" and s.region == self.n:
                z[self.agg.bounds.start + s_pos] = s.bound
        self.summand = z
        return z

    def accept_aggregate(self, canonical: np.ndarray) -> None:
        self.aggregate = canonical
        T = self.view.case_T
        gmm = wu.joint_from_case_view(self.view)
        if gmm is None:
            q_total = 0.0
        else:
            total = wu.project(gmm, np.ones(self.agg.n_wind))
            q_total = wu.quantile(total, self.config.eps_b)
        self.upsilon = q_total - canonical[self.agg.upsilon_load]

        S = len(self.view.monitored)
        self.delta = np.zeros(T * S)
        volt_expr = {}
        n_volt = 0
        for s_pos, s in enumerate(self.view.monitored):
            if s.kind == "voltage":
                volt_expr[s_pos] = n_volt
                n_volt += 1
        for s_pos, s in enumerate(self.view.monitored):
            if s.kind != "voltage":
                continue
            e = volt_expr[s_pos]
            load = canonical[self.agg.expr_load(e)]
            xi = canonical[self.agg.expr_xi(e)]
            wind_w = canonical[self.agg.expr_wind(e)]
            bound = canonical[self.agg.bounds.start + s_pos]
            q = wu.quantile(wu.project(gmm, wind_w), 1.0 - self.config.alpha_s) \
                if gmm is not None else 0.0
            for t in range(T):
                self.delta[t * S + s_pos] = -load[t] - xi + bound - q

    # -- encrypting ----------------------------------------------------------

    def encrypt(self) -> EncryptedShare:
        T = self.view.case_T
        gens = self.view.generators
        cnt = len(gens)
        quad = np.array([g.quad_cost for g in gens])
        lin = np.array([g.lin_cost for g in gens])
        # expression-state rows of this region: response of each public
        # voltage component to own generations, repeated per time block
        n_expr = len(self.expr_states)
        phi_expr = np.zeros((n_expr, cnt))
        for e, (kind, bus) in enumerate(self.expr_states):
            col = self.layout.col_index[(kind, bus)]
            for gi, g in enumerate(gens):
                pr = self.own_p_bus.get(g.bus)
                if pr is not None:
                    phi_expr[e, gi] = self.B_P[pr, col]
        U_expr = np.zeros((T * n_expr, T * cnt))
        for t in range(T):
            U_expr[t * n_expr:(t + 1) * n_expr, t * cnt:(t + 1) * cnt] = phi_expr

        blocks = RegionBlocks(
            region=self.n,
            lambda_diag=np.tile(quad, T),
            c=np.tile(lin, T),
            E=ramp_matrix(cnt, T) if T > 1 else np.zeros((0, cnt * T)),
            K=balance_matrix(cnt, T),
            U_expr=U_expr,
            g_plus=np.tile([g.p_max for g in gens], T),
            g_minus=np.tile([g.p_min for g in gens], T),
            r_plus=np.tile([g.ramp_max for g in gens], max(T - 1, 0)),
            r_minus=np.tile([g.ramp_min for g in gens], max(T - 1, 0)),
        )
        self.share = encrypt_local(blocks, self.keys)
        return self.share

    # -- sharing -------------------------------------------------------------

    def accept_share_field(self, origin: int, name: str, payload: np.ndarray):
        self.shares.setdefault(origin, {})
        self.shares[origin][name] = payload

    def finalize_shares(self) -> None:
        rebuilt = {}
        for region, fields in sorted(self.shares.items()):
            rebuilt[region] = EncryptedShare(region=region, **fields)
        rebuilt[self.n] = self.share
        self.shares = rebuilt

    def expr_row(self, t: int, e: int) -> np.ndarray:
        """Encrypted coefficient row of expression state ``e`` at time ``t``."""
        n_expr = len(self.expr_states)
        parts = [self.shares[m].U_expr_M[t * n_expr + e, :]
                 for m in sorted(self.shares)]
        return np.concatenate(parts)

    def build_flow_rows(self, rng: np.random.Generator):
        """Masked flow constraints for monitored lines this agent owns."""
        T = self.view.case_T
        S = len(self.view.monitored)
        gmm = wu.joint_from_case_view(self.view)
        bus_map = {b.id: b for b in self.view.bus_registry}
        own_lines = {l.id: l for l in self.view.lines}
        out = []
        H = sum(s.H for s in self.shares.values())
        for s_pos, s in enumerate(self.view.monitored):
            if s.kind != "line" or s.region != self.n:
                continue
            line = own_lines.get(s.element)
            if line is None:
                raise ProtocolError(
                    f"agent {self.n}: monitored line {s.element} is not owned here")
            terms, const_l = flow_expression(line, bus_map, self.layout.col_index)
            combo = []
            for col, coeff in terms:
                kind_bus = self.layout.cols[col][1], self.layout.cols[col][2]
                combo.append((self.expr_states.index(kind_bus), coeff))
            rows = np.zeros((T, H))
            for t in range(T):
                for e, coeff in combo:
                    rows[t] += coeff * self.expr_row(t, e)
            load = np.zeros(T)
            xi = const_l
            wind_w = np.zeros(self.agg.n_wind)
            for e, coeff in combo:
                load += coeff * self.aggregate[self.agg.expr_load(e)]
                xi += coeff * self.aggregate[self.agg.expr_xi(e)]
                wind_w += coeff * self.aggregate[self.agg.expr_wind(e)]
            q = wu.quantile(wu.project(gmm, wind_w), 1.0 - self.config.alpha_s) \
                if gmm is not None else 0.0
            rhs = -load - xi + s.bound - q
            m_rows, m_rhs, scalar = mask_flow_expression(rows, rhs, rng)
            self.flow_scalars[s_pos] = scalar
            out.append((s_pos, m_rows, m_rhs))
        return out

    # -- solving / decrypting -------------------------------------------------

    def assemble_encrypted(self) -> None:
        S = len(self.view.monitored)
        T = self.view.case_T
        state_kinds = []
        n_volt = 0
        for s in self.view.monitored:
            if s.kind == "voltage":
                state_kinds.append(("expr", n_volt))
                n_volt += 1
            else:
                state_kinds.append(("flow",))
        delta = self.delta.copy()
        for s_pos, (rows, rhs) in self.flow_rows.items():
            for t in range(T):
                delta[t * S + s_pos] = rhs[t]
        shares = [self.shares[m] for m in sorted(self.shares)]
        self.p1 = assemble_p1(shares, self.upsilon, delta, state_kinds,
                              self.flow_rows)
        self.delta = delta

    def solve(self) -> None:
        self.solution = solve_qp(self.p1, self.config.qp_tol)
        self.x_bar = self.solution.x

    def decrypt(self) -> np.ndarray:
        self.x_n = decrypt_solution(self.x_bar, self.keys,
                                    self.p1.region_slices, self.n)
        return self.x_n

    def p1_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.p1.Q, self.p1.c, self.p1.A, self.p1.b):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Protocol driver
# ---------------------------------------------------------------------------

def run_protocol(case: GridCase, config: ProtocolConfig | None = None) -> ProtocolResult:
    """Execute the five-step protocol on the simulated bus.

    Fail-fast: any phase error aborts every agent.  Identical seeds, case and
    config yield bit-identical ledgers and solutions.
    """
    config = config or ProtocolConfig()
    n = case.n_regions
    layout = build_layout(case.buses)
    expr_states = expression_registry(case)
    n_wind = len(case.wind_farms)
    agg_layout = AggregateLayout(case.T, len(expr_states), n_wind, len(case.monitored))

    seeds = np.random.SeedSequence(config.seed)
    children = seeds.spawn(3 * n)
    key_seeds = children[:n]
    ppaac_rngs = [np.random.default_rng(children[n + i]) for i in range(n)]
    flow_rngs = [np.random.default_rng(children[2 * n + i]) for i in range(n)]

    bus = MessageBus(case.topology, n)
    views = [region_view(case, i) for i in range(1, n + 1)]
    agents = [IsoAgent(views[i], config, layout, expr_states, agg_layout,
                       key_seeds[i]) for i in range(n)]

    timings: dict[str, float] = {}
    rounds: dict[str, int] = {}
    cons_cfg = ConsensusConfig(beta=config.beta, stop_tol=config.stop_tol,
                               max_iters=config.max_iters, polish=True)

    t0 = time.perf_counter()
    # ---- formulating: masked gather + aggregate consensus -------------------
    blocks = [a.build_masked_block() for a in agents]
    gathered, gather_res = gather_masked(blocks, layout.dim, case.topology,
                                         cons_cfg, bus.consensus_recorder())
    rounds["gather"] = gather_res.iterations if gather_res else 0
    for a, stack in zip(agents, gathered):
        a.recover_sensitivities(stack)

    summands = [a.build_summand() for a in agents]
    if n == 1:
        canonical = summands[0].copy()
        rounds["aggregate"] = 0
    else:
        pp_cfg = ConsensusConfig(beta=config.beta, stop_tol=config.stop_tol,
                                 max_iters=config.max_iters, polish=True,
                                 sigma=config.sigma, gamma=config.gamma)
        agg_res = ppaac_run(summands, case.topology, pp_cfg, ppaac_rngs,
                            bus.consensus_recorder())
        rounds["aggregate"] = agg_res.iterations
        sums = [mean_to_sum(v, n) for v in agg_res.values]
        # canonical reference copy: agent 1's converged aggregate, relayed
        canon_msgs = bus.flood([Message(1, "aggregate.reference", sums[0], {})])
        canonical = canon_msgs[1][0].payload
    for a in agents:
        a.accept_aggregate(canonical)

    # ---- encrypting ----------------------------------------------------------
    for a in agents:
        a.advance(Phase.ENCRYPTING)
        a.encrypt()
    timings["formulating_and_encrypting"] = time.perf_counter() - t0

    # ---- sharing --------------------------------------------------------------
    t1 = time.perf_counter()
    for a in agents:
        a.advance(Phase.SHARING)
    share_msgs = []
    for a in agents:
        for name, arr in a.share.fields():
            share_msgs.append(Message(a.n, "share." + name, arr,
                                      {"field": name, "region": a.n}))
    delivered = bus.flood(share_msgs)
    for a in agents:
        for msg in delivered[a.n]:
            if msg.meta["region"] != a.n:
                a.accept_share_field(msg.meta["region"], msg.meta["field"], msg.payload)
        a.finalize_shares()

    flow_msgs = []
    for a in agents:
        for s_pos, rows, rhs in a.build_flow_rows(flow_rngs[a.n - 1]):
            payload = np.hstack([rows, rhs[:, None]])
            flow_msgs.append(Message(a.n, "flow.masked_row", payload,
                                     {"pos": s_pos, "region": a.n}))
    delivered_flow = bus.flood(flow_msgs)
    for a in agents:
        for msg in delivered_flow[a.n]:
            rows, rhs = msg.payload[:, :-1], msg.payload[:, -1]
            a.flow_rows[msg.meta["pos"]] = (rows, rhs)
    timings["sharing"] = time.perf_counter() - t1

    # ---- solving + decrypting --------------------------------------------------
    t2 = time.perf_counter()
    for a in agents:
        a.advance(Phase.SOLVING)
        a.assemble_encrypted()
    workers = config.effective_workers()
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(lambda ag: ag.solve(), agents))
        else:
            for a in agents:
                a.solve()
    except Exception as exc:
        raise ProtocolError(f"solving step failed: {exc}") from exc
    for a in agents:
        a.advance(Phase.DECRYPTING)
        a.decrypt()
        a.advance(Phase.DONE)
    timings["solving_and_decrypting"] = time.perf_counter() - t2
    timings["total"] = time.perf_counter() - t0

    # ---- collect ---------------------------------------------------------------
    hashes = {a.n: a.p1_hash() for a in agents}
    if len(set(hashes.values())) != 1:
        raise ProtocolError("agents assembled different encrypted programs")
    x = np.concatenate([a.x_n for a in agents])
    objectives = {a.n: a.solution.objective for a in agents}
    ref = agents[0]
    kkt = ref.solution.kkt.scaled(ref.p1, ref.x_bar)

    audit_inputs = _collect_audit_inputs(case, agents)
    scales = _p0_row_scales(case, agents)

    return ProtocolResult(
        x=x,
        per_region={a.n: a.x_n for a in agents},
        x_bar=ref.x_bar,
        objectives=objectives,
        kkt_scaled=kkt,
        upsilon=ref.upsilon,
        delta=ref.delta,
        p1_hashes=hashes,
        ledgers=bus.ledgers,
        audit_inputs=audit_inputs,
        timings=timings,
        consensus_rounds=rounds,
        p0_row_scales=scales,
        lam_p1=ref.solution.lam,
        region_slices=ref.p1.region_slices,
    )


def _collect_audit_inputs(case: GridCase, agents) -> AuditInputs:
    inputs = AuditInputs()
    inputs.confidential.update(confidential_arrays(case))
    T = case.T
    for a in agents:
        n = a.n
        gens = case.generators_in(n)
        if gens:
            inputs.confidential[(n, "G_plus_tiled")] = np.tile([g.p_max for g in gens], T)
            inputs.confidential[(n, "G_minus_tiled")] = np.tile([g.p_min for g in gens], T)
            if T > 1:
                inputs.confidential[(n, "R_plus_tiled")] = np.tile(
                    [g.ramp_max for g in gens], T - 1)
                inputs.confidential[(n, "R_minus_tiled")] = np.tile(
                    [g.ramp_min for g in gens], T - 1)
            inputs.confidential[(n, "lambda_tiled")] = np.tile(
                [g.quad_cost for g in gens], T)
            inputs.confidential[(n, "c_tiled")] = np.tile([g.lin_cost for g in gens], T)
            inputs.confidential[(n, "lambda_matrix")] = np.diag(
                np.tile([g.quad_cost for g in gens], T))
        if a.G_Q is not None and a.G_Q.size:
            inputs.confidential[(n, "dlpf_q_rows")] = a.G_Q
        if a.G_P is not None and a.G_P.size:
            inputs.confidential[(n, "dlpf_p_rows")] = a.G_P
        if a.summand is not None:
            inputs.confidential[(n, "aggregate_summand")] = a.summand
        inputs.keys[(n, "M")] = a.keys.M
        inputs.keys[(n, "W_Q")] = a.keys.W_Q
        inputs.keys[(n, "W_P")] = a.keys.W_P
        inputs.keys[(n, "phi_g_plus")] = a.keys.phi_g_plus
        inputs.keys[(n, "phi_g_minus")] = a.keys.phi_g_minus
        inputs.keys[(n, "phi_r_plus")] = a.keys.phi_r_plus
        inputs.keys[(n, "phi_r_minus")] = a.keys.phi_r_minus
    return inputs


def _p0_row_scales(case: GridCase, agents) -> np.ndarray:
    """Positive factors relating (P1) rows to (P0) rows (driver-side only)."""
    T = case.T
    S = len(case.monitored)
    parts = [np.concatenate([a.keys.phi_g_plus for a in agents]),
             np.concatenate([a.keys.phi_g_minus for a in agents])]
    if T > 1:
        parts.append(np.concatenate([a.keys.phi_r_plus for a in agents]))
        parts.append(np.concatenate([a.keys.phi_r_minus for a in agents]))
    parts.append(np.ones(T))
    state_scale = np.ones(T * S)
    for a in agents:
        for s_pos, scalar in a.flow_scalars.items():
            for t in range(T):
                state_scale[t * S + s_pos] = scalar
    parts.append(state_scale)
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Centralized oracle
# ---------------------------------------------------------------------------

def run_centralized(case: GridCase, config: ProtocolConfig | None = None) -> CentralizedResult:
    """Solve (P0) with full information; benchmark for the protocol."""
    config = config or ProtocolConfig()
    t0 = time.perf_counter()
    sys = assemble_dlpf(case)
    blocks = invert_oracle(sys)
    maps = mapping_coefficients(blocks, case)
    gmm = wu.joint_from_case(case) if case.wind_farms else None
    upsilon = np.array([wu.rhs_supply_demand(case, gmm, t, config.eps_b)
                        for t in range(1, case.T + 1)])
    S = len(maps.registry)
    delta = np.zeros(case.T * S)
    per_region_counter: dict[int, int] = {}
    for s_pos, s in enumerate(maps.registry):
        per_region_counter[s.region] = per_region_counter.get(s.region, 0) + 1
        idx = per_region_counter[s.region]
        for t in range(1, case.T + 1):
            delta[(t - 1) * S + s_pos] = wu.rhs_state(
                case, maps, gmm, s.region, idx, t, config.alpha_s)
    t_form = time.perf_counter() - t0
    qp = assemble_p0(case, maps, upsilon, delta)
    t1 = time.perf_counter()
    sol = solve_qp(qp, config.qp_tol)
    t_solve = time.perf_counter() - t1
    return CentralizedResult(
        qp=qp, x=sol.x, lam=sol.lam, objective=sol.objective,
        upsilon=upsilon, delta=delta, maps=maps,
        timings={"formulating": t_form, "solving": t_solve,
                 "total": time.perf_counter() - t0},
    )


# ---------------------------------------------------------------------------
# Privacy audit
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AuditFinding:
    category: str        # "raw-equality" | "unknown-class" | "key-leak"
    description: str
    record: LedgerRecord


@dataclass
class AuditReport:
    findings: list[AuditFinding]
    payloads_checked: int

    @property
    def clean(self) -> bool:
        return not self.findings


def _fingerprint_variants(arr: np.ndarray) -> list[str]:
    fps = [fingerprint(arr)]
    a = np.asarray(arr)
    if a.ndim == 2 and a.shape[0] != a.shape[1]:
        fps.append(fingerprint(a.T))
    elif a.ndim == 2:
        fps.append(fingerprint(a.T))
    return fps


def privacy_audit(ledgers: dict[int, AgentLedger], case: GridCase,
                  inputs: AuditInputs | None = None) -> AuditReport:
    """Replay the ledgers against the confidential registry.

    Findings: (a) payload bit-equal to a confidential array (either
    orientation), (b) payload class outside the masked whitelist, (c) payload
    bit-equal to key material.  Convergence flags are 1-bit control values
    whose domain {0, 1} collides with constant data by construction; they are
    exempt from equality matching but still class-checked.
    """
    if inputs is None:
        inputs = AuditInputs(confidential=dict(confidential_arrays(case)))
    conf_index: dict[str, str] = {}
    for (region, name), arr in inputs.confidential.items():
        for fp in _fingerprint_variants(arr):
            conf_index.setdefault(fp, f"region {region} {name}")
    key_index: dict[str, str] = {}
    for (region, name), arr in inputs.keys.items():
        for fp in _fingerprint_variants(arr):
            key_index.setdefault(fp, f"region {region} key {name}")

    findings: list[AuditFinding] = []
    seen: set[tuple] = set()
    checked = 0
    for ledger in ledgers.values():
        for rec in ledger.records:
            key = (rec.round, rec.sender, rec.receiver, rec.kind, rec.fingerprint)
            if key in seen:
                continue
            seen.add(key)
            checked += 1
            if rec.kind not in ALLOWED_PAYLOAD_CLASSES:
                findings.append(AuditFinding(
                    "unknown-class",
                    f"payload class {rec.kind!r} is not whitelisted", rec))
            if rec.kind == "consensus.flag":
                continue
            hit = conf_index.get(rec.fingerprint)
            if hit is not None:
                findings.append(AuditFinding(
                    "raw-equality",
                    f"payload {rec.kind} equals confidential data ({hit})", rec))
            leak = key_index.get(rec.fingerprint)
            if leak is not None:
                findings.append(AuditFinding(
                    "key-leak", f"payload {rec.kind} equals {leak}", rec))
    return AuditReport(findings, checked)
