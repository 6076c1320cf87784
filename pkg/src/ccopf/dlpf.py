"""Decoupled linearized power flow: system assembly, inverse blocks, state maps.

Convention (isolated here so it can be swapped): with the bus admittance
matrix ``Y = G_bus + j*B_bus`` built from series line admittances,

* active rows (one per PQ and PV bus):    ``P~ = -B_bus * theta + G_bus * V``
* reactive rows (one per PQ bus):         ``Q~ = -G_bus * theta - B_bus * V``

Unknowns are V at PQ buses and theta at PQ/PV buses; fixed slack/PV voltage
magnitudes and the slack angle move into a constant vector ``k`` so that the
square system reads ``G u = y - k`` for injections ``y``.

Row/column ordering is region-major: ``[Q_1; P_1; ...; Q_Na; P_Na]`` against
``[V_1; theta_1; ...]``, with buses sorted by id inside each block.  The
ordering is public layout information; the matrix entries are not.

Line flows are linearized as ``b*(theta_i - theta_j) + g*(V_i - V_j)`` with
the same constant folding for fixed endpoint components.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_case import BusKind, GridCase, Line, MonitoredState, RegionView

__all__ = [
    "SingularSystemError", "DlpfLayout", "DlpfSystem", "SensitivityBlocks",
    "StateMaps", "build_layout", "assemble_dlpf", "region_rows",
    "invert_oracle", "mapping_coefficients", "flow_expression",
    "injection_vector", "solve_direct", "dump_debug",
    "COND_LIMIT",
]

COND_LIMIT = 1e8


class SingularSystemError(Exception):
    """The DLPF coefficient matrix is singular or too ill-conditioned."""

    def __init__(self, message, cond=None):
        self.cond = cond
        super().__init__(message if cond is None else f"{message} (cond ~ {cond:.3e})")


@dataclass(frozen=True)
class DlpfLayout:
    """Public row/column bookkeeping of the stacked DLPF system."""
    rows: tuple[tuple[int, str, int], ...]   # (region, 'Q'|'P', bus id)
    cols: tuple[tuple[int, str, int], ...]   # (region, 'V'|'theta', bus id)

    @property
    def dim(self) -> int:
        return len(self.rows)

    @property
    def row_index(self) -> dict:
        d = object.__getattribute__(self, "__dict__")
        if "_ri" not in d:
            d["_ri"] = {(kind, bus): i for i, (_, kind, bus) in enumerate(self.rows)}
        return d["_ri"]

    @property
    def col_index(self) -> dict:
        d = object.__getattribute__(self, "__dict__")
        if "_ci" not in d:
            d["_ci"] = {(kind, bus): i for i, (_, kind, bus) in enumerate(self.cols)}
        return d["_ci"]

    def region_rows(self, region: int, kind: str) -> list[int]:
        return [i for i, (r, k, _) in enumerate(self.rows) if r == region and k == kind]

    def a_row(self, bus: int) -> int | None:
        """Active-injection row of a bus (None at the slack bus)."""
        return self.row_index.get(("P", bus))

    def q_row(self, bus: int) -> int | None:
        """Reactive-injection row of a bus (None unless PQ)."""
        return self.row_index.get(("Q", bus))


def build_layout(buses) -> DlpfLayout:
    """Layout from the (public) bus registry: kinds and regions only."""
    rows, cols = [], []
    regions = sorted({b.region for b in buses})
    for n in regions:
        own = sorted((b for b in buses if b.region == n), key=lambda b: b.id)
        pq = [b for b in own if b.kind is BusKind.PQ]
        pv = [b for b in own if b.kind is BusKind.PV]
        for b in pq:
            rows.append((n, "Q", b.id))
        for b in sorted(pq + pv, key=lambda b: b.id):
            rows.append((n, "P", b.id))
        for b in pq:
            cols.append((n, "V", b.id))
        for b in sorted(pq + pv, key=lambda b: b.id):
            cols.append((n, "theta", b.id))
    return DlpfLayout(tuple(rows), tuple(cols))


@dataclass(frozen=True)
class DlpfSystem:
    layout: DlpfLayout
    G: np.ndarray            # (N, N) coefficient matrix
    known_const: np.ndarray  # (N,) constant vector k; G u = y - k

    @property
    def dim(self) -> int:
        return self.layout.dim


@dataclass(frozen=True)
class SensitivityBlocks:
    """Per-region blocks of the inverse.

    ``stack`` is ``inv(G).T``; block ``B_Q[n]`` holds the rows aligned with
    region n's reactive rows, i.e. ``B_Q[n][r, :]`` is the response of every
    unknown to a unit injection at region n's r-th reactive row.
    """
    layout: DlpfLayout
    stack: np.ndarray

    def block(self, region: int, kind: str) -> np.ndarray:
        return self.stack[self.layout.region_rows(region, kind), :]

    def b_q(self, region: int) -> np.ndarray:
        return self.block(region, "Q")

    def b_p(self, region: int) -> np.ndarray:
        return self.block(region, "P")


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def _admittance(lines) -> dict[tuple[int, int], complex]:
    """Sparse bus admittance entries from series line admittances."""
    Y: dict[tuple[int, int], complex] = {}
    for l in lines:
        y = complex(l.g, l.b)
        for i, j in ((l.from_bus, l.from_bus), (l.to_bus, l.to_bus)):
            Y[(i, j)] = Y.get((i, j), 0j) + y
        for i, j in ((l.from_bus, l.to_bus), (l.to_bus, l.from_bus)):
            Y[(i, j)] = Y.get((i, j), 0j) - y
    return Y


def _fixed_values(buses):
    v_fix = {b.id: b.fixed_voltage for b in buses
             if b.kind in (BusKind.SLACK, BusKind.PV)}
    th_fix = {b.id: b.fixed_angle for b in buses if b.kind is BusKind.SLACK}
    return v_fix, th_fix


def _build_rows(row_specs, Y, layout, v_fix, th_fix):
    """Rows of the DLPF matrix plus their constant entries.

    ``row_specs`` is a list of (kind, bus).  For each admittance entry at
    (bus, j): unknown components go into the matrix, fixed ones into k.
    """
    col_index = layout.col_index
    mat = np.zeros((len(row_specs), layout.dim))
    k = np.zeros(len(row_specs))
    neighbors: dict[int, list[int]] = {}
    for (i, j) in Y:
        neighbors.setdefault(i, []).append(j)
    for r, (kind, bus) in enumerate(row_specs):
        for j in neighbors.get(bus, ()):
            y = Y[(bus, j)]
            if kind == "Q":
                cv, cth = -y.imag, -y.real   # Q~ = -G th - B V
            else:
                cv, cth = y.real, -y.imag    # P~ = -B th + G V
            vcol = col_index.get(("V", j))
            if vcol is not None:
                mat[r, vcol] += cv
            elif j in v_fix:
                k[r] += cv * v_fix[j]
            tcol = col_index.get(("theta", j))
            if tcol is not None:
                mat[r, tcol] += cth
            elif j in th_fix:
                k[r] += cth * th_fix[j]
    return mat, k


def assemble_dlpf(case: GridCase) -> DlpfSystem:
    """Assemble the whole-grid DLPF system (centralized/oracle path)."""
    layout = build_layout(case.buses)
    if layout.dim == 0:
        raise SingularSystemError("no unknown states (every bus is slack?)")
    Y = _admittance(case.lines)
    v_fix, th_fix = _fixed_values(case.buses)
    specs = [(kind, bus) for (_, kind, bus) in layout.rows]
    G, k = _build_rows(specs, Y, layout, v_fix, th_fix)
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularSystemError("singular or ill-conditioned DLPF matrix", cond=cond)
    return DlpfSystem(layout, G, k)


def region_rows(view: RegionView):
    """Region-owned DLPF row blocks built from the view's lines only.

    Returns ``(G_Q, G_P, k_Q, k_P)``; rows match the central assembly exactly
    because every admittance entry on an own-bus row involves only inner or
    incident tie lines, all visible in the view.
    """
    layout = build_layout(view.bus_registry)
    Y = _admittance(view.lines)
    v_fix, th_fix = _fixed_values(view.bus_registry)
    q_specs = [(k, b) for (r, k, b) in layout.rows if r == view.region and k == "Q"]
    p_specs = [(k, b) for (r, k, b) in layout.rows if r == view.region and k == "P"]
    G_Q, k_Q = _build_rows(q_specs, Y, layout, v_fix, th_fix)
    G_P, k_P = _build_rows(p_specs, Y, layout, v_fix, th_fix)
    return G_Q, G_P, k_Q, k_P


def invert_oracle(sys: DlpfSystem) -> SensitivityBlocks:
    """Directly invert the DLPF matrix (benchmark path, never used by agents)."""
    cond = np.linalg.cond(sys.G)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularSystemError("matrix numerically singular", cond=cond)
    inv = np.linalg.inv(sys.G)
    return SensitivityBlocks(sys.layout, np.ascontiguousarray(inv.T))


# ---------------------------------------------------------------------------
# State maps
# ---------------------------------------------------------------------------

def flow_expression(line: Line, bus_map, col_index):
    """Linear expression of a line flow over the unknown vector.

    Returns ``(terms, const)`` with ``terms`` a list of (column, coefficient);
    fixed endpoint components are folded into ``const``.
    """
    terms: list[tuple[int, float]] = []
    const = 0.0
    for bus, sign in ((line.from_bus, 1.0), (line.to_bus, -1.0)):
        b = bus_map[bus]
        tcol = col_index.get(("theta", bus))
        if tcol is not None:
            terms.append((tcol, sign * line.b))
        else:
            const += sign * line.b * (b.fixed_angle or 0.0)
        vcol = col_index.get(("V", bus))
        if vcol is not None:
            terms.append((vcol, sign * line.g))
        else:
            const += sign * line.g * (b.fixed_voltage or 0.0)
    return terms, const


@dataclass(frozen=True)
class StateMaps:
    """Sensitivities of every monitored state to all power injections.

    ``sigma[s]`` is the state's row over injection indices (layout rows);
    ``xi[s]`` the constant term, so that a state evaluates to
    ``sigma . y + xi`` for an injection vector ``y``.  Expression states
    (endpoint voltages/angles used by the line-flow machinery, plus the
    explicitly monitored voltages) get the same treatment.
    """
    layout: DlpfLayout
    registry: tuple[MonitoredState, ...]
    sigma: np.ndarray           # (|S|, N)
    xi_vec: np.ndarray          # (|S|,)
    expr_states: tuple[tuple[str, int], ...]   # ('V'|'theta', bus)
    expr_sigma: np.ndarray      # (|expr|, N)
    expr_xi: np.ndarray         # (|expr|,)

    @property
    def n_states(self) -> int:
        return len(self.registry)

    def state(self, region: int, index: int) -> MonitoredState:
        """The ``index``-th (1-based) monitored state of ``region``."""
        own = [s for s in self.registry if s.region == region]
        if not 1 <= index <= len(own):
            raise KeyError(f"region {region} has no monitored state #{index}")
        return own[index - 1]

    def position(self, s: MonitoredState) -> int:
        return self.registry.index(s)

    def expr_index(self, kind: str, bus: int) -> int:
        return self.expr_states.index((kind, bus))

    # -- coefficient views --------------------------------------------------

    def u_coeffs(self, s: MonitoredState, case: GridCase, region: int) -> np.ndarray:
        """Mapping of region ``region``'s generations onto state ``s``."""
        sig = self.sigma[self.position(s)]
        out = np.zeros(len(case.generators_in(region)))
        for i, g in enumerate(case.generators_in(region)):
            row = self.layout.a_row(g.bus)
            if row is not None:
                out[i] = sig[row]
        return out

    def phi(self, case: GridCase, region: int) -> np.ndarray:
        """All-states-by-own-generators coefficient matrix of ``region``."""
        return np.vstack([self.u_coeffs(s, case, region) for s in self.registry]) \
            if self.registry else np.zeros((0, len(case.generators_in(region))))

    def wind_weights(self, s: MonitoredState, case: GridCase) -> np.ndarray:
        """Projection weights of the joint wind vector for state ``s``.

        Reactive wind is folded through each farm's power-factor map.
        """
        sig = self.sigma[self.position(s)]
        out = np.zeros(len(case.wind_farms))
        for i, w in enumerate(case.wind_farms):
            arow = self.layout.a_row(w.bus)
            qrow = self.layout.q_row(w.bus)
            val = sig[arow] if arow is not None else 0.0
            if qrow is not None:
                val += np.tan(w.power_factor_angle) * sig[qrow]
            out[i] = val
        return out

    def load_term(self, s: MonitoredState, case: GridCase, t: int) -> float:
        """Value of the load contribution to state ``s`` at time ``t``."""
        sig = self.sigma[self.position(s)]
        total = 0.0
        for d in case.loads:
            arow = self.layout.a_row(d.bus)
            qrow = self.layout.q_row(d.bus)
            if arow is not None:
                total -= sig[arow] * d.active_profile[t - 1]
            if qrow is not None:
                total -= sig[qrow] * d.reactive_profile[t - 1]
        return total

    def xi(self, s: MonitoredState) -> float:
        return float(self.xi_vec[self.position(s)])

    def value(self, s: MonitoredState, injections: np.ndarray) -> float:
        """State value for a full injection vector (two-path test hook)."""
        return float(self.sigma[self.position(s)] @ injections + self.xi(s))


def expression_registry(case: GridCase) -> tuple[tuple[str, int], ...]:
    """Public registry of voltage components carried as encrypted expressions.

    Explicitly monitored voltages first (aligned with the state registry),
    then the endpoint components of monitored lines.
    """
    layout_cols = build_layout(case.buses).col_index
    expr: list[tuple[str, int]] = []
    for s in case.monitored:
        if s.kind == "voltage":
            expr.append(("V", s.element))
    for s in case.monitored:
        if s.kind != "line":
            continue
        line = case.line(s.element)
        for bus in (line.from_bus, line.to_bus):
            for kind in ("theta", "V"):
                if (kind, bus) in layout_cols and (kind, bus) not in expr:
                    expr.append((kind, bus))
    return tuple(expr)


def mapping_coefficients(blocks: SensitivityBlocks, case: GridCase,
                         monitored=None) -> StateMaps:
    """Build :class:`StateMaps` for ``monitored`` (default: the case registry)."""
    layout = blocks.layout
    registry = tuple(case.monitored if monitored is None else monitored)
    inv_t = blocks.stack                     # inv(G).T
    sysk = _known_const(case, layout)

    bus_map = {b.id: b for b in case.buses}
    line_ids = {l.id for l in case.lines}

    def rho_const(kind: str, element) -> tuple[np.ndarray, float]:
        rho = np.zeros(layout.dim)
        if kind == "voltage":
            col = layout.col_index.get(("V", element))
            if col is None:
                raise KeyError(f"monitored voltage bus {element} has no unknown V")
            rho[col] = 1.0
            return rho, 0.0
        if kind == "line":
            if element not in line_ids:
                raise KeyError(f"monitored state references unknown line {element}")
            terms, const = flow_expression(case.line(element), bus_map, layout.col_index)
            for col, coeff in terms:
                rho[col] += coeff
            return rho, const
        # expression states use ('V'|'theta', bus) directly
        col = layout.col_index[(kind, element)]
        rho[col] = 1.0
        return rho, 0.0

    def sigma_xi(specs):
        if not specs:
            return np.zeros((0, layout.dim)), np.zeros(0)
        rows, consts = zip(*(rho_const(k, e) for k, e in specs))
        P = np.vstack(rows)
        sig = P @ inv_t.T          # sigma = rho^T G^{-1}
        xi = np.array(consts) - sig @ sysk
        return sig, xi

    sig, xi = sigma_xi([(s.kind, s.element) for s in registry])
    expr = expression_registry(case)
    esig, exi = sigma_xi(list(expr))
    return StateMaps(layout, registry, sig, xi, expr, esig, exi)


def _known_const(case: GridCase, layout: DlpfLayout) -> np.ndarray:
    Y = _admittance(case.lines)
    v_fix, th_fix = _fixed_values(case.buses)
    specs = [(kind, bus) for (_, kind, bus) in layout.rows]
    _, k = _build_rows(specs, Y, layout, v_fix, th_fix)
    return k


# ---------------------------------------------------------------------------
# Direct evaluation helpers (oracles and tests)
# ---------------------------------------------------------------------------

def injection_vector(case: GridCase, layout: DlpfLayout, gen_output: dict,
                     wind_output: dict, t: int) -> np.ndarray:
    """Injection vector from generator/wind outputs and the loads at time ``t``.

    ``gen_output`` maps generator id to p.u. output, ``wind_output`` maps farm
    id to active p.u. output; reactive wind follows the power-factor map.
    """
    y = np.zeros(layout.dim)
    for g in case.generators:
        row = layout.a_row(g.bus)
        if row is not None:
            y[row] += gen_output.get(g.id, 0.0)
    for w in case.wind_farms:
        val = wind_output.get(w.id, 0.0)
        row = layout.a_row(w.bus)
        if row is not None:
            y[row] += val
        qrow = layout.q_row(w.bus)
        if qrow is not None:
            y[qrow] += np.tan(w.power_factor_angle) * val
    for d in case.loads:
        row = layout.a_row(d.bus)
        if row is not None:
            y[row] -= d.active_profile[t - 1]
        qrow = layout.q_row(d.bus)
        if qrow is not None:
            y[qrow] -= d.reactive_profile[t - 1]
    return y


def solve_direct(sys: DlpfSystem, injections: np.ndarray) -> np.ndarray:
    """Solve the DLPF system for the unknown state vector."""
    return np.linalg.solve(sys.G, injections - sys.known_const)


def dump_debug(sys: DlpfSystem, blocks: SensitivityBlocks | None,
               maps: StateMaps | None, path) -> None:
    """Matrix-archive dump of G, the inverse blocks, and the state maps."""
    payload = {
        "G": sys.G,
        "known_const": sys.known_const,
        "rows": np.array([f"{r}:{k}:{b}" for r, k, b in sys.layout.rows]),
        "cols": np.array([f"{r}:{k}:{b}" for r, k, b in sys.layout.cols]),
    }
    if blocks is not None:
        payload["inverse_stack"] = blocks.stack
    if maps is not None:
        payload["sigma"] = maps.sigma
        payload["xi"] = maps.xi_vec
    np.savez(path, **payload)
