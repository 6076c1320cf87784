#!/usr/bin/env python3
"""Construct the bundled 5-region 39-bus case.

Topology follows the standard New England 39-bus system (46 branches,
generators at buses 30-39, slack at 31); parameters, the region partition,
wind farms and the joint wind model are synthetic.  Flow limits and voltage
bounds are calibrated against a loose-bound optimal solve so the final case
is feasible with a few near-active monitored states, then the result is
verified by a full centralized solve before writing JSON.

Run from the repo root:  python3 tools/build_case39.py
"""

import json
import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

import ccopf  # noqa: E402
from ccopf import wind_uncertainty as wu  # noqa: E402
from ccopf.agents import ProtocolConfig, run_centralized  # noqa: E402
from ccopf.dlpf import (assemble_dlpf, injection_vector, invert_oracle,  # noqa: E402
                        mapping_coefficients, solve_direct, flow_expression)

OUT = pathlib.Path(__file__).resolve().parent.parent / "src/ccopf/cases/case39.json"

BRANCHES = [
    (1, 2), (1, 39), (2, 3), (2, 25), (2, 30), (3, 4), (3, 18), (4, 5),
    (4, 14), (5, 6), (5, 8), (6, 7), (6, 11), (6, 31), (7, 8), (8, 9),
    (9, 39), (10, 11), (10, 13), (10, 32), (12, 11), (12, 13), (13, 14),
    (14, 15), (15, 16), (16, 17), (16, 19), (16, 21), (16, 24), (17, 18),
    (17, 27), (19, 20), (19, 33), (20, 34), (21, 22), (22, 23), (22, 35),
    (23, 24), (23, 36), (25, 26), (25, 37), (26, 27), (26, 28), (26, 29),
    (28, 29), (29, 38),
]

REGIONS = {
    1: [1, 2, 3, 25, 30, 37, 39],
    2: [4, 5, 6, 7, 8, 9, 31],
    3: [10, 11, 12, 13, 14, 32],
    4: [15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 33, 34, 35, 36],
    5: [26, 27, 28, 29, 38],
}

GEN_BUSES = [30, 31, 32, 33, 34, 35, 36, 37, 38, 39]
GEN_PMAX = [8.0, 7.0, 7.5, 6.5, 5.5, 7.0, 6.0, 5.5, 8.5, 11.0]
GEN_QUAD = [12.0, 9.5, 14.0, 18.0, 22.0, 11.0, 16.0, 20.0, 8.5, 13.5]
GEN_LIN = [22.0, 30.0, 18.0, 26.0, 34.0, 24.0, 28.0, 32.0, 20.0, 16.0]

LOADS = {
    3: 3.22, 4: 5.0, 7: 2.34, 8: 5.22, 12: 0.09, 15: 3.2, 16: 3.29,
    18: 1.58, 20: 6.8, 21: 2.74, 23: 2.48, 24: 3.09, 25: 2.24, 26: 1.39,
    27: 2.81, 28: 2.06, 29: 2.84, 31: 0.09, 39: 11.04,
}

PROFILE = [0.72, 0.70, 0.68, 0.67, 0.68, 0.72, 0.78, 0.85, 0.92, 0.96,
           0.98, 1.00, 0.99, 0.97, 0.96, 0.95, 0.94, 0.95, 0.97, 0.99,
           0.96, 0.90, 0.82, 0.76]

WIND = [
    {"id": 1, "bus": 5, "power_factor_angle": 0.15},
    {"id": 2, "bus": 14, "power_factor_angle": 0.20},
    {"id": 3, "bus": 21, "power_factor_angle": 0.12},
    {"id": 4, "bus": 27, "power_factor_angle": 0.25},
]

WIND_MEANS = [[1.8, 1.5, 1.2, 0.9], [2.5, 2.2, 1.6, 1.3], [1.0, 0.8, 0.9, 0.5]]
WIND_WEIGHTS = [0.5, 0.3, 0.2]
CORR = np.array([
    [1.0, 0.3, 0.3, 0.2],
    [0.3, 1.0, 0.3, 0.2],
    [0.3, 0.3, 1.0, 0.2],
    [0.2, 0.2, 0.2, 1.0],
])

MONITORED_VOLTAGES = [8, 16]


def build(flow_limits, v_bounds):
    rng = np.random.default_rng(39)
    bus_region = {b: r for r, buses in REGIONS.items() for b in buses}
    buses = []
    for b in range(1, 40):
        if b == 31:
            buses.append({"id": b, "kind": "slack", "region": bus_region[b],
                          "v": 1.0, "angle": 0.0})
        elif b in GEN_BUSES:
            buses.append({"id": b, "kind": "pv", "region": bus_region[b],
                          "v": round(float(1.0 + 0.02 * rng.uniform(-1, 1)), 4)})
        else:
            buses.append({"id": b, "kind": "pq", "region": bus_region[b]})

    lines = []
    for i, (f, t) in enumerate(BRANCHES, start=1):
        x = float(rng.uniform(0.010, 0.035))
        r = x / 15.0
        denom = r * r + x * x
        lines.append({
            "id": i, "from": f, "to": t,
            "g": round(r / denom, 6), "b": round(-x / denom, 6),
            "flow_limit": flow_limits.get(i, 99.0),
        })

    gens = []
    for i, (b, pmax, quad, lin) in enumerate(
            zip(GEN_BUSES, GEN_PMAX, GEN_QUAD, GEN_LIN), start=1):
        gens.append({
            "id": i, "bus": b, "quad_cost": quad, "lin_cost": lin,
            "p_min": round(0.12 * pmax, 4), "p_max": pmax,
            "ramp_min": round(-0.27 * pmax, 4), "ramp_max": round(0.27 * pmax, 4),
        })

    loads = []
    for i, (b, peak) in enumerate(sorted(LOADS.items()), start=1):
        loads.append({
            "id": i, "bus": b,
            "active": [round(peak * f, 6) for f in PROFILE],
            "reactive": [round(0.24 * peak * f, 6) for f in PROFILE],
        })

    covs = []
    for k, mu in enumerate(WIND_MEANS):
        d = np.array(mu) * 0.15 + 0.05
        covs.append((np.outer(d, d) * CORR).round(8).tolist())

    wind_buses = {w["bus"] for w in WIND}
    monitored_lines = [l["id"] for l in lines
                       if l["from"] in wind_buses or l["to"] in wind_buses]

    return {
        "schema": "ccopf-case/1",
        "name": "case39",
        "T": 24,
        "regions": 5,
        "topology": [[1, 2], [2, 3], [3, 4], [4, 5], [5, 1]],
        "buses": buses,
        "lines": lines,
        "generators": gens,
        "loads": loads,
        "wind_farms": WIND,
        "wind_model": {"weights": WIND_WEIGHTS, "means": WIND_MEANS,
                       "covariances": covs},
        "monitored": {
            "lines": [{"id": i, "bound": flow_limits.get(i, 99.0)}
                      for i in monitored_lines],
            "voltages": [{"bus": b, "bound": v_bounds.get(b, 2.0)}
                         for b in MONITORED_VOLTAGES],
        },
    }


def calibrate():
    cfg = ProtocolConfig()
    # pass 1: loose bounds, find the unconstrained-optimal state levels
    case = ccopf.parse_case(json.dumps(build({}, {})))
    cent = run_centralized(case, cfg)
    maps = cent.maps
    S = len(maps.registry)
    T = case.T
    gmm = wu.joint_from_case(case)

    # required bound per state: the bound that would make the converted
    # constraint exactly active at the loose optimum
    required = {}
    for s_pos, s in enumerate(maps.registry):
        lhs = np.array([
            sum(maps.phi(case, n)[s_pos] @
                cent.x[cent.qp.region_slices[n - 1]][t * len(case.generators_in(n)):
                                                     (t + 1) * len(case.generators_in(n))]
                for n in range(1, 6))
            for t in range(T)])
        q = wu.quantile(wu.project(gmm, maps.wind_weights(s, case)), 1 - cfg.alpha_s)
        need = np.array([
            lhs[t] + maps.load_term(s, case, t + 1) + maps.xi(s) + q
            for t in range(T)])
        required[(s.kind, s.element)] = float(need.max())

    flow_limits, v_bounds = {}, {}
    tighten = {("line", 24), ("line", 28)}   # force mild redispatch: binding states
    for (kind, element), need in required.items():
        slack_factor = 0.995 if (kind, element) in tighten else 1.10
        margin = 0.0 if (kind, element) in tighten else 0.3
        value = round(need * slack_factor + margin, 4)
        if kind == "line":
            flow_limits[element] = value
        else:
            v_bounds[element] = value

    # plausible limits for unmonitored lines from the loose-optimum flows
    sys = assemble_dlpf(case)
    gen_out = {g.id: cent.x[cent.qp.region_slices[g.region - 1]]
               [0 * len(case.generators_in(g.region)) +
                [x.id for x in case.generators_in(g.region)].index(g.id)]
               for g in case.generators}
    wind_mean = np.array(WIND_WEIGHTS) @ np.array(WIND_MEANS)
    bus_map = {b.id: b for b in case.buses}
    for t in (1, 12):
        y = injection_vector(case, sys.layout,
                             gen_out,
                             {w["id"]: float(wind_mean[i]) for i, w in enumerate(WIND)},
                             t)
        u = solve_direct(sys, y)
        for line in case.lines:
            terms, const = flow_expression(line, bus_map, sys.layout.col_index)
            flow = const + sum(coeff * u[col] for col, coeff in terms)
            cur = flow_limits.get(line.id)
            cand = round(abs(flow) * 1.4 + 0.8, 4)
            if cur is None or (line.id not in {s.element for s in case.monitored
                                               if s.kind == "line"} and cand > 0):
                if line.id not in flow_limits:
                    flow_limits[line.id] = cand
                elif line.id not in {s.element for s in case.monitored if s.kind == "line"}:
                    flow_limits[line.id] = max(flow_limits[line.id], cand)

    # pass 2: final case, verify feasibility and report activity
    final = build(flow_limits, v_bounds)
    case2 = ccopf.parse_case(json.dumps(final))
    cent2 = run_centralized(case2, cfg)
    resid = cent2.qp.A @ cent2.x - cent2.qp.b
    state_rows = cent2.qp.rows.states
    active = int((resid[state_rows] > -1e-6).sum())
    cap_active = int((resid[cent2.qp.rows.cap_upper] > -1e-8).sum())
    print(f"objective: {cent2.objective:.4f}")
    print(f"near-active state rows: {active} / {state_rows.stop - state_rows.start}")
    print(f"active capacity rows: {cap_active}")
    assert cent2.objective > 0
    return final


def main():
    data = calibrate()
    OUT.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
