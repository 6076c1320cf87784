"""Multi-region grid cases: loading, validation, partitioning, confidentiality tags.

A :class:`GridCase` is the immutable physical/economic description of an
interconnected grid operated by several regional ISOs.  Two input formats are
supported:

* the native JSON schema (``ccopf-case/1``, documented in ``docs/case_format.md``),
* a restricted MATPOWER-style ``.m`` importer (bus/branch/gen/gencost tables)
  plus a JSON sidecar that supplies the region map and everything MATPOWER
  cannot express (horizon, wind farms, joint wind model, monitored states).

Every quantity is in per-unit.  Region ids run 1..n_regions.  A line belongs
to the region of its ``from_bus``; tie lines are visible to both incident
regions through :func:`region_view`.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BusKind", "Bus", "Line", "Generator", "Load", "WindFarm",
    "WindModelSpec", "MonitoredState", "GridCase", "RegionView",
    "CaseError", "CaseFormatError", "CaseValidationError",
    "parse_case", "load_case", "serialize_case", "region_view",
    "confidential_arrays", "default_monitored_lines",
]


class CaseError(Exception):
    """Base class for case loading problems."""


class CaseFormatError(CaseError):
    """Malformed input text; carries ``line``/``column`` when known."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class CaseValidationError(CaseError):
    """Structurally well-formed input that violates a case invariant."""


class BusKind(enum.Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


@dataclass(frozen=True)
class Bus:
    id: int
    kind: BusKind
    region: int
    # fixed_voltage present for SLACK and PV buses, fixed_angle for SLACK only
    fixed_voltage: float | None = None
    fixed_angle: float | None = None


@dataclass(frozen=True)
class Line:
    id: int
    from_bus: int
    to_bus: int
    g: float            # series conductance, p.u.
    b: float            # series susceptance, p.u. (negative for inductive lines)
    flow_limit: float
    owner_region: int


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    region: int
    quad_cost: float    # $/p.u.^2 h, diagonal entry of the quadratic cost block
    lin_cost: float     # $/p.u. h
    p_min: float
    p_max: float
    ramp_min: float     # <= 0
    ramp_max: float     # >= 0


@dataclass(frozen=True)
class Load:
    id: int
    bus: int
    region: int
    active_profile: tuple[float, ...]
    reactive_profile: tuple[float, ...]


@dataclass(frozen=True)
class WindFarm:
    id: int
    bus: int
    region: int
    power_factor_angle: float   # reactive output = tan(angle) * active output


@dataclass(frozen=True)
class WindModelSpec:
    """Joint GMM over all wind farms' active power (farm order = case order)."""
    weights: tuple[float, ...]
    means: tuple[tuple[float, ...], ...]
    covariances: tuple[tuple[tuple[float, ...], ...], ...]


@dataclass(frozen=True)
class MonitoredState:
    """One chance-constrained system state: a line flow or a PQ-bus voltage."""
    region: int
    kind: str           # "line" | "voltage"
    element: int        # line id or bus id
    bound: float        # upper bound s+


@dataclass(frozen=True)
class GridCase:
    name: str
    T: int
    n_regions: int
    topology: tuple[tuple[int, int], ...]   # undirected communication edges
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    wind_farms: tuple[WindFarm, ...]
    wind_model: WindModelSpec | None
    monitored: tuple[MonitoredState, ...]

    def bus(self, bus_id: int) -> Bus:
        return self._bus_map[bus_id]

    def line(self, line_id: int) -> Line:
        return self._line_map[line_id]

    @property
    def _bus_map(self):
        d = object.__getattribute__(self, "__dict__")
        if "_bus_map_cache" not in d:
            d["_bus_map_cache"] = {b.id: b for b in self.buses}
        return d["_bus_map_cache"]

    @property
    def _line_map(self):
        d = object.__getattribute__(self, "__dict__")
        if "_line_map_cache" not in d:
            d["_line_map_cache"] = {l.id: l for l in self.lines}
        return d["_line_map_cache"]

    def generators_in(self, region: int) -> tuple[Generator, ...]:
        return tuple(g for g in self.generators if g.region == region)

    def loads_in(self, region: int) -> tuple[Load, ...]:
        return tuple(d for d in self.loads if d.region == region)

    def wind_in(self, region: int) -> tuple[WindFarm, ...]:
        return tuple(w for w in self.wind_farms if w.region == region)

    def gen_counts(self) -> tuple[int, ...]:
        return tuple(len(self.generators_in(n)) for n in range(1, self.n_regions + 1))

    @property
    def H(self) -> int:
        return len(self.generators) * self.T

    def H_n(self, region: int) -> int:
        return len(self.generators_in(region)) * self.T


@dataclass(frozen=True)
class RegionView:
    """Exactly the data ISO ``region`` is entitled to know.

    Own devices and lines plus the public layout (bus registry without
    foreign line data, communication topology, monitored-state registry and
    the shared wind model).
    """
    region: int
    buses: tuple[Bus, ...]              # own buses
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    wind_farms: tuple[WindFarm, ...]
    inner_lines: tuple[Line, ...]
    tie_lines: tuple[Line, ...]         # incident to this region, either end
    case_T: int
    n_regions: int
    topology: tuple[tuple[int, int], ...]
    bus_registry: tuple[Bus, ...]       # public: ids, kinds, regions, setpoints
    gen_counts: tuple[int, ...]         # public: |G_m| per region
    wind_registry: tuple[tuple[int, int, int], ...]  # public: (farm id, bus, region)
    wind_model: WindModelSpec | None    # globally known distribution
    monitored: tuple[MonitoredState, ...]

    @property
    def lines(self) -> tuple[Line, ...]:
        return self.inner_lines + self.tie_lines


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

NATIVE_SCHEMA = "ccopf-case/1"
SIDECAR_SCHEMA = "ccopf-regions/1"


def load_case(path, fmt: str = "auto", sidecar_path=None) -> GridCase:
    """Load a case from disk.  ``fmt`` is ``native``, ``matpower`` or ``auto``."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if fmt == "auto":
        fmt = "matpower" if str(path).endswith(".m") else "native"
    if fmt == "matpower":
        if sidecar_path is None:
            raise CaseValidationError("matpower import requires a region-map sidecar file")
        with open(sidecar_path, "r", encoding="utf-8") as fh:
            sidecar = fh.read()
        return parse_case(text, "matpower", sidecar=sidecar)
    return parse_case(text, "native")


def parse_case(text: str, fmt: str = "native", sidecar: str | None = None) -> GridCase:
    """Parse case text in the declared format and validate it."""
    if fmt == "native":
        return _parse_native(text)
    if fmt == "matpower":
        if sidecar is None:
            raise CaseValidationError("matpower import requires a sidecar region map")
        return _parse_matpower(text, sidecar)
    raise CaseValidationError(f"unknown case format: {fmt!r}")


def _json_loads(text, what):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseFormatError(f"invalid JSON in {what}: {exc.msg}",
                              line=exc.lineno, column=exc.colno) from exc


def _req(obj, key, what):
    if key not in obj:
        raise CaseValidationError(f"{what}: missing required field {key!r}")
    return obj[key]


def _parse_native(text: str) -> GridCase:
    data = _json_loads(text, "case file")
    if data.get("schema") != NATIVE_SCHEMA:
        raise CaseValidationError(
            f"unsupported schema {data.get('schema')!r}; expected {NATIVE_SCHEMA!r}")

    T = int(_req(data, "T", "case"))
    n_regions = int(_req(data, "regions", "case"))

    buses = []
    for raw in _req(data, "buses", "case"):
        kind = BusKind(_req(raw, "kind", "bus"))
        buses.append(Bus(
            id=int(_req(raw, "id", "bus")),
            kind=kind,
            region=int(_req(raw, "region", "bus")),
            fixed_voltage=float(raw["v"]) if "v" in raw else None,
            fixed_angle=float(raw["angle"]) if "angle" in raw else None,
        ))
    bus_region = {b.id: b.region for b in buses}

    lines = []
    for raw in _req(data, "lines", "case"):
        fb = int(_req(raw, "from", "line"))
        lines.append(Line(
            id=int(_req(raw, "id", "line")),
            from_bus=fb,
            to_bus=int(_req(raw, "to", "line")),
            g=float(_req(raw, "g", "line")),
            b=float(_req(raw, "b", "line")),
            flow_limit=float(_req(raw, "flow_limit", "line")),
            owner_region=int(raw.get("owner_region", bus_region.get(fb, -1))),
        ))

    gens = []
    for raw in _req(data, "generators", "case"):
        bus = int(_req(raw, "bus", "generator"))
        gens.append(Generator(
            id=int(_req(raw, "id", "generator")),
            bus=bus,
            region=int(raw.get("region", bus_region.get(bus, -1))),
            quad_cost=float(_req(raw, "quad_cost", "generator")),
            lin_cost=float(_req(raw, "lin_cost", "generator")),
            p_min=float(_req(raw, "p_min", "generator")),
            p_max=float(_req(raw, "p_max", "generator")),
            ramp_min=float(_req(raw, "ramp_min", "generator")),
            ramp_max=float(_req(raw, "ramp_max", "generator")),
        ))

    loads = []
    for raw in _req(data, "loads", "case"):
        bus = int(_req(raw, "bus", "load"))
        loads.append(Load(
            id=int(_req(raw, "id", "load")),
            bus=bus,
            region=int(raw.get("region", bus_region.get(bus, -1))),
            active_profile=tuple(float(v) for v in _req(raw, "active", "load")),
            reactive_profile=tuple(float(v) for v in _req(raw, "reactive", "load")),
        ))

    farms = []
    for raw in data.get("wind_farms", []):
        bus = int(_req(raw, "bus", "wind farm"))
        farms.append(WindFarm(
            id=int(_req(raw, "id", "wind farm")),
            bus=bus,
            region=int(raw.get("region", bus_region.get(bus, -1))),
            power_factor_angle=float(raw.get("power_factor_angle", 0.0)),
        ))

    wind_model = None
    if "wind_model" in data:
        wm = data["wind_model"]
        wind_model = WindModelSpec(
            weights=tuple(float(w) for w in _req(wm, "weights", "wind model")),
            means=tuple(tuple(float(v) for v in row) for row in _req(wm, "means", "wind model")),
            covariances=tuple(
                tuple(tuple(float(v) for v in row) for row in comp)
                for comp in _req(wm, "covariances", "wind model")),
        )

    monitored = _parse_monitored(data.get("monitored"), buses, lines, farms, bus_region)

    topology = data.get("topology")
    if topology is None:
        topology = _ring_topology(n_regions)
    else:
        topology = tuple(tuple(int(v) for v in e) for e in topology)

    case = GridCase(
        name=str(data.get("name", "unnamed")),
        T=T, n_regions=n_regions, topology=tuple(topology),
        buses=tuple(buses), lines=tuple(lines), generators=tuple(gens),
        loads=tuple(loads), wind_farms=tuple(farms),
        wind_model=wind_model, monitored=monitored,
    )
    _validate(case)
    return case


def _parse_monitored(raw, buses, lines, farms, bus_region):
    if raw is None:
        return default_monitored_lines(lines, farms)
    states = []
    line_map = {l.id: l for l in lines}
    bus_map = {b.id: b for b in buses}
    for item in raw.get("lines", []):
        lid = int(item["id"]) if isinstance(item, dict) else int(item)
        if lid not in line_map:
            raise CaseValidationError(f"monitored state references unknown line {lid}")
        line = line_map[lid]
        bound = float(item["bound"]) if isinstance(item, dict) and "bound" in item \
            else line.flow_limit
        states.append(MonitoredState(line.owner_region, "line", lid, bound))
    for item in raw.get("voltages", []):
        bid = int(item["bus"])
        if bid not in bus_map:
            raise CaseValidationError(f"monitored state references unknown bus {bid}")
        if bus_map[bid].kind is not BusKind.PQ:
            raise CaseValidationError(
                f"monitored voltage must be at a PQ bus (bus {bid} is {bus_map[bid].kind.value})")
        states.append(MonitoredState(bus_region[bid], "voltage", bid, float(item["bound"])))
    states.sort(key=lambda s: (s.region, 0 if s.kind == "line" else 1, s.element))
    return tuple(states)


def default_monitored_lines(lines, farms) -> tuple[MonitoredState, ...]:
    """Default registry: flow states on every line directly linked to a wind farm."""
    wind_buses = {w.bus for w in farms}
    states = [MonitoredState(l.owner_region, "line", l.id, l.flow_limit)
              for l in lines if l.from_bus in wind_buses or l.to_bus in wind_buses]
    states.sort(key=lambda s: (s.region, s.element))
    return tuple(states)


def _ring_topology(n: int) -> tuple[tuple[int, int], ...]:
    if n == 1:
        return ()
    if n == 2:
        return ((1, 2),)
    return tuple((i, i % n + 1) for i in range(1, n + 1))


# ---------------------------------------------------------------------------
# MATPOWER-subset importer
# ---------------------------------------------------------------------------

_MPC_TABLE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.S)
_MPC_SCALAR = re.compile(r"mpc\.(\w+)\s*=\s*([0-9.eE+-]+)\s*;")


def _parse_matpower(text: str, sidecar: str) -> GridCase:
    side = _json_loads(sidecar, "sidecar")
    if side.get("schema") != SIDECAR_SCHEMA:
        raise CaseValidationError(
            f"unsupported sidecar schema {side.get('schema')!r}; expected {SIDECAR_SCHEMA!r}")

    tables = {}
    for m in _MPC_TABLE.finditer(text):
        rows = []
        for ln in m.group(2).strip().splitlines():
            ln = ln.split("%")[0].strip().rstrip(";")
            if not ln:
                continue
            try:
                rows.append([float(v) for v in ln.replace(",", " ").split()])
            except ValueError as exc:
                lineno = text[:m.start(2)].count("\n") + 1
                raise CaseFormatError(f"bad numeric row in mpc.{m.group(1)}: {ln!r}",
                                      line=lineno, column=1) from exc
        tables[m.group(1)] = rows
    base = 100.0
    for m in _MPC_SCALAR.finditer(text):
        if m.group(1) == "baseMVA":
            base = float(m.group(2))

    for need in ("bus", "gen", "branch"):
        if need not in tables:
            raise CaseValidationError(f"matpower file lacks mpc.{need} table")

    bus_regions = {int(k): int(v) for k, v in _req(side, "bus_regions", "sidecar").items()}
    T = int(side.get("T", 24))
    profile = side.get("load_profile", [1.0] * T)
    if len(profile) != T:
        raise CaseValidationError("sidecar load_profile length must equal T")

    kind_map = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}
    buses, loads = [], []
    for row in tables["bus"]:
        bid, btype = int(row[0]), int(row[1])
        if btype not in kind_map:
            raise CaseValidationError(f"bus {bid}: unsupported bus type {btype}")
        if bid not in bus_regions:
            raise CaseValidationError(f"sidecar has no region for bus {bid}")
        kind = kind_map[btype]
        vm = float(row[7]) if len(row) > 7 else 1.0
        buses.append(Bus(
            id=bid, kind=kind, region=bus_regions[bid],
            fixed_voltage=vm if kind in (BusKind.SLACK, BusKind.PV) else None,
            fixed_angle=0.0 if kind is BusKind.SLACK else None,
        ))
        pd, qd = float(row[2]) / base, float(row[3]) / base
        if pd != 0.0 or qd != 0.0:
            loads.append(Load(
                id=len(loads) + 1, bus=bid, region=bus_regions[bid],
                active_profile=tuple(pd * f for f in profile),
                reactive_profile=tuple(qd * f for f in profile),
            ))

    lines = []
    for i, row in enumerate(tables["branch"], start=1):
        fb, tb, r, x = int(row[0]), int(row[1]), float(row[2]), float(row[3])
        denom = r * r + x * x
        if denom == 0.0:
            raise CaseValidationError(f"branch {fb}-{tb} has zero impedance")
        rate = float(row[5]) / base if len(row) > 5 and row[5] > 0 else 10.0
        lines.append(Line(
            id=i, from_bus=fb, to_bus=tb,
            g=r / denom, b=-x / denom, flow_limit=rate,
            owner_region=bus_regions.get(fb, -1),
        ))

    ramp_default = side.get("ramp_limit", None)
    gencost = tables.get("gencost", [])
    gens = []
    for i, row in enumerate(tables["gen"], start=1):
        bid = int(row[0])
        pmax, pmin = float(row[8]) / base, float(row[9]) / base
        if gencost:
            gc = gencost[i - 1]
            if int(gc[0]) != 2 or int(gc[3]) < 2:
                raise CaseValidationError("importer supports polynomial gencost (model 2) only")
            coeffs = gc[4:4 + int(gc[3])]
            # polynomial coefficients are listed highest order first
            quad = float(coeffs[0]) * base * base if int(gc[3]) >= 3 else 0.01
            lin = float(coeffs[-2]) * base if int(gc[3]) >= 2 else 1.0
        else:
            quad, lin = 10.0, 30.0
        ramp = float(ramp_default) if ramp_default is not None else max(pmax - pmin, 1e-3)
        gens.append(Generator(
            id=i, bus=bid, region=bus_regions.get(bid, -1),
            quad_cost=quad, lin_cost=lin, p_min=pmin, p_max=pmax,
            ramp_min=-ramp, ramp_max=ramp,
        ))

    farms = []
    for raw in side.get("wind_farms", []):
        bid = int(raw["bus"])
        farms.append(WindFarm(
            id=int(raw["id"]), bus=bid, region=bus_regions.get(bid, -1),
            power_factor_angle=float(raw.get("power_factor_angle", 0.0)),
        ))

    wind_model = None
    if "wind_model" in side:
        wm = side["wind_model"]
        wind_model = WindModelSpec(
            weights=tuple(float(w) for w in wm["weights"]),
            means=tuple(tuple(float(v) for v in row) for row in wm["means"]),
            covariances=tuple(tuple(tuple(float(v) for v in r) for r in c)
                              for c in wm["covariances"]),
        )

    n_regions = int(_req(side, "regions", "sidecar"))
    topology = side.get("topology")
    topology = _ring_topology(n_regions) if topology is None else \
        tuple(tuple(int(v) for v in e) for e in topology)

    monitored = _parse_monitored(side.get("monitored"), buses, lines, farms,
                                 {b.id: b.region for b in buses})

    case = GridCase(
        name=str(side.get("name", "matpower-import")),
        T=T, n_regions=n_regions, topology=topology,
        buses=tuple(buses), lines=tuple(lines), generators=tuple(gens),
        loads=tuple(loads), wind_farms=tuple(farms),
        wind_model=wind_model, monitored=monitored,
    )
    _validate(case)
    return case


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _validate(case: GridCase) -> None:
    if case.T < 1:
        raise CaseValidationError("T must be >= 1")
    if case.n_regions < 1:
        raise CaseValidationError("region count must be >= 1")

    bus_ids = {b.id for b in case.buses}
    if len(bus_ids) != len(case.buses):
        raise CaseValidationError("duplicate bus ids")

    slack = [b for b in case.buses if b.kind is BusKind.SLACK]
    if len(slack) != 1:
        raise CaseValidationError(f"exactly one slack bus required, found {len(slack)}")

    valid_regions = set(range(1, case.n_regions + 1))
    for b in case.buses:
        if b.region not in valid_regions:
            raise CaseValidationError(f"bus {b.id}: region {b.region} out of range")
        if b.kind in (BusKind.SLACK, BusKind.PV) and b.fixed_voltage is None:
            raise CaseValidationError(f"bus {b.id}: {b.kind.value} bus needs a fixed voltage")
        if b.kind is BusKind.SLACK and b.fixed_angle is None:
            raise CaseValidationError(f"bus {b.id}: slack bus needs a fixed angle")
        if b.kind is BusKind.PQ and (b.fixed_voltage is not None or b.fixed_angle is not None):
            raise CaseValidationError(f"bus {b.id}: PQ bus must not carry fixed values")
        if b.kind is BusKind.PV and b.fixed_angle is not None:
            raise CaseValidationError(f"bus {b.id}: PV bus must not carry a fixed angle")
    used_regions = {b.region for b in case.buses}
    if used_regions != valid_regions:
        raise CaseValidationError(
            f"regions {sorted(valid_regions - used_regions)} have no buses")

    for l in case.lines:
        for end in (l.from_bus, l.to_bus):
            if end not in bus_ids:
                raise CaseValidationError(f"line {l.id}: dangling bus reference {end}")
        if l.from_bus == l.to_bus:
            raise CaseValidationError(f"line {l.id}: from_bus == to_bus")
        if l.g < 0:
            raise CaseValidationError(f"line {l.id}: conductance must be >= 0")
        if l.owner_region != case.bus(l.from_bus).region:
            raise CaseValidationError(
                f"line {l.id}: owner_region must equal the from_bus region")
    if len({l.id for l in case.lines}) != len(case.lines):
        raise CaseValidationError("duplicate line ids")

    for g in case.generators:
        if g.bus not in bus_ids:
            raise CaseValidationError(f"generator {g.id}: dangling bus reference {g.bus}")
        if g.quad_cost <= 0:
            raise CaseValidationError(f"generator {g.id}: quad_cost must be > 0")
        if g.p_min > g.p_max:
            raise CaseValidationError(f"generator {g.id}: p_min > p_max")
        if not (g.ramp_min <= 0.0 <= g.ramp_max):
            raise CaseValidationError(f"generator {g.id}: need ramp_min <= 0 <= ramp_max")

    for d in case.loads:
        if d.bus not in bus_ids:
            raise CaseValidationError(f"load {d.id}: dangling bus reference {d.bus}")
        if len(d.active_profile) != case.T or len(d.reactive_profile) != case.T:
            raise CaseValidationError(f"load {d.id}: profiles must have length T={case.T}")

    for w in case.wind_farms:
        if w.bus not in bus_ids:
            raise CaseValidationError(f"wind farm {w.id}: dangling bus reference {w.bus}")
        if not (-math.pi / 2 < w.power_factor_angle < math.pi / 2):
            raise CaseValidationError(f"wind farm {w.id}: power factor angle out of range")

    if case.wind_farms:
        if case.wind_model is None:
            raise CaseValidationError("wind farms present but no wind model given")
        dim = len(case.wind_farms)
        wm = case.wind_model
        if any(len(mu) != dim for mu in wm.means) or \
           any(len(c) != dim or any(len(r) != dim for r in c) for c in wm.covariances):
            raise CaseValidationError("wind model dimension must equal the farm count")
        if len(wm.weights) != len(wm.means) or len(wm.weights) != len(wm.covariances):
            raise CaseValidationError("wind model component counts disagree")
        if abs(sum(wm.weights) - 1.0) > 1e-12 or any(w <= 0 for w in wm.weights):
            raise CaseValidationError("wind model weights must be positive and sum to 1")

    # communication topology must connect all regions
    for a, b in case.topology:
        if a not in valid_regions or b not in valid_regions or a == b:
            raise CaseValidationError(f"bad topology edge ({a}, {b})")
    if not _connected(case.n_regions, case.topology):
        raise CaseValidationError("communication topology is disconnected")

    for s in case.monitored:
        if s.kind == "line":
            if s.element not in {l.id for l in case.lines}:
                raise CaseValidationError(f"monitored state references unknown line {s.element}")
        elif s.kind == "voltage":
            if s.element not in bus_ids:
                raise CaseValidationError(f"monitored state references unknown bus {s.element}")
            if case.bus(s.element).kind is not BusKind.PQ:
                raise CaseValidationError(
                    f"monitored voltage at bus {s.element} must be a PQ bus")
        else:
            raise CaseValidationError(f"unknown monitored state kind {s.kind!r}")


def _connected(n: int, edges) -> bool:
    if n == 1:
        return True
    adj = {i: set() for i in range(1, n + 1)}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    seen, stack = {1}, [1]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == n


# ---------------------------------------------------------------------------
# Serialization (native format round trip)
# ---------------------------------------------------------------------------

def serialize_case(case: GridCase) -> str:
    """Render a case back to the native JSON schema (lossless round trip)."""
    data = {
        "schema": NATIVE_SCHEMA,
        "name": case.name,
        "T": case.T,
        "regions": case.n_regions,
        "topology": [list(e) for e in case.topology],
        "buses": [_bus_json(b) for b in case.buses],
        "lines": [{
            "id": l.id, "from": l.from_bus, "to": l.to_bus,
            "g": l.g, "b": l.b, "flow_limit": l.flow_limit,
            "owner_region": l.owner_region,
        } for l in case.lines],
        "generators": [{
            "id": g.id, "bus": g.bus, "region": g.region,
            "quad_cost": g.quad_cost, "lin_cost": g.lin_cost,
            "p_min": g.p_min, "p_max": g.p_max,
            "ramp_min": g.ramp_min, "ramp_max": g.ramp_max,
        } for g in case.generators],
        "loads": [{
            "id": d.id, "bus": d.bus, "region": d.region,
            "active": list(d.active_profile), "reactive": list(d.reactive_profile),
        } for d in case.loads],
        "wind_farms": [{
            "id": w.id, "bus": w.bus, "region": w.region,
            "power_factor_angle": w.power_factor_angle,
        } for w in case.wind_farms],
        "monitored": {
            "lines": [{"id": s.element, "bound": s.bound}
                      for s in case.monitored if s.kind == "line"],
            "voltages": [{"bus": s.element, "bound": s.bound}
                         for s in case.monitored if s.kind == "voltage"],
        },
    }
    if case.wind_model is not None:
        data["wind_model"] = {
            "weights": list(case.wind_model.weights),
            "means": [list(m) for m in case.wind_model.means],
            "covariances": [[list(r) for r in c] for c in case.wind_model.covariances],
        }
    return json.dumps(data, indent=1, sort_keys=True)


def _bus_json(b: Bus):
    out = {"id": b.id, "kind": b.kind.value, "region": b.region}
    if b.fixed_voltage is not None:
        out["v"] = b.fixed_voltage
    if b.fixed_angle is not None:
        out["angle"] = b.fixed_angle
    return out


# ---------------------------------------------------------------------------
# Region views and confidentiality tags
# ---------------------------------------------------------------------------

def region_view(case: GridCase, n: int) -> RegionView:
    """Project the case onto what ISO ``n`` may legitimately see."""
    if not 1 <= n <= case.n_regions:
        raise CaseValidationError(f"unknown region id {n}")
    inner, ties = [], []
    for l in case.lines:
        fr = case.bus(l.from_bus).region
        to = case.bus(l.to_bus).region
        if fr == n and to == n:
            inner.append(l)
        elif fr == n or to == n:
            ties.append(l)
    return RegionView(
        region=n,
        buses=tuple(b for b in case.buses if b.region == n),
        generators=case.generators_in(n),
        loads=case.loads_in(n),
        wind_farms=case.wind_in(n),
        inner_lines=tuple(inner),
        tie_lines=tuple(ties),
        case_T=case.T,
        n_regions=case.n_regions,
        topology=case.topology,
        bus_registry=tuple(case.buses),
        gen_counts=case.gen_counts(),
        wind_registry=tuple((w.id, w.bus, w.region) for w in case.wind_farms),
        wind_model=case.wind_model,
        monitored=case.monitored,
    )


def confidential_arrays(case: GridCase) -> dict[tuple[int, str], np.ndarray]:
    """Every confidential field, tagged ``(region, name) -> array``.

    The privacy audit matches message payloads against these arrays; anything
    here must never appear unmasked on the wire.  Classes follow the
    ISO data-barrier table: generation costs, capacities/ramps, load data,
    and line parameters/topology.
    """
    out: dict[tuple[int, str], np.ndarray] = {}
    for n in range(1, case.n_regions + 1):
        gens = case.generators_in(n)
        if gens:
            out[(n, "quad_cost")] = np.array([g.quad_cost for g in gens])
            out[(n, "lin_cost")] = np.array([g.lin_cost for g in gens])
            out[(n, "p_min")] = np.array([g.p_min for g in gens])
            out[(n, "p_max")] = np.array([g.p_max for g in gens])
            out[(n, "ramp_min")] = np.array([g.ramp_min for g in gens])
            out[(n, "ramp_max")] = np.array([g.ramp_max for g in gens])
        loads = case.loads_in(n)
        if loads:
            out[(n, "load_active")] = np.array([d.active_profile for d in loads])
            out[(n, "load_reactive")] = np.array([d.reactive_profile for d in loads])
            for d in loads:
                out[(n, f"load_{d.id}_active")] = np.array(d.active_profile)
                out[(n, f"load_{d.id}_reactive")] = np.array(d.reactive_profile)
        owned = [l for l in case.lines if l.owner_region == n]
        if owned:
            out[(n, "line_params")] = np.array(
                [[l.from_bus, l.to_bus, l.g, l.b, l.flow_limit] for l in owned])
            out[(n, "line_admittances")] = np.array([[l.g, l.b] for l in owned])
            out[(n, "line_limits")] = np.array([l.flow_limit for l in owned])
    return out
