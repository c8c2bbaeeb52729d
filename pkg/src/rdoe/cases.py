"""Generators for the bundled network corpus and synthetic test feeders.

The bundled documents under ``rdoe/data`` are produced by :func:`write_bundled`;
rerun it after changing a generator (``python -m rdoe.cases``).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .network import Network, loads_document

DATA_DIR = Path(__file__).parent / "data"


def conductor(r_self, x_self, r_mut, x_mut) -> dict:
    """Kron-reduced 4-wire conductor (ohm/km) with uniform mutual coupling."""
    r = np.full((3, 3), r_mut)
    x = np.full((3, 3), x_mut)
    np.fill_diagonal(r, r_self)
    np.fill_diagonal(x, x_self)
    return {"r_ohm_per_km": r.round(6).tolist(), "x_ohm_per_km": x.round(6).tolist()}


def _doc(name, buses, lines, customers, conductors, source_pu=1.0, power_kva=10.0):
    return {
        "format_version": 1,
        "name": name,
        "bases": {"power_kva": power_kva, "voltage_v": 230.0},
        "limits": {"v_min": 0.94, "v_max": 1.10},
        "source": {"bus": buses[0]["id"], "voltage_pu": source_pu, "angle_deg": 0.0},
        "conductors": conductors,
        "buses": buses,
        "lines": lines,
        "customers": customers,
    }


def _doe(cid, bus, phases, flags=(1, 1), controllable=True):
    return {"id": cid, "bus": bus, "phases": phases, "kind": "doe", "flags": list(flags),
            "p_box_kw": [-7.0, 7.0], "q_box_kvar": [-3.0, 3.0], "q_controllable": controllable}


def _load(cid, bus, phases, p, q):
    return {"id": cid, "bus": bus, "phases": phases, "kind": "non-doe", "p_kw": p, "q_kvar": q}


def five_network() -> dict:
    """Five-bus stand-in: one conductor, five single-phase customers, cus_02 and cus_05 DOE (export)."""
    buses = [{"id": f"b{i}", "phases": "abc"} for i in range(1, 6)]
    lengths = [210.0, 140.0, 140.0, 168.0]
    lines = [{"id": f"l{i}", "from": f"b{i}", "to": f"b{i + 1}", "conductor": "c1", "length_m": L}
             for i, L in enumerate(lengths, start=1)]
    customers = [
        _load("cus_01", "b2", "c", 1.5, 0.4),
        _doe("cus_02", "b3", "a", flags=(1, 0)),
        _load("cus_03", "b3", "c", 1.0, 0.2),
        _load("cus_04", "b4", "a", 0.8, 0.2),
        _doe("cus_05", "b5", "b", flags=(1, 0)),
    ]
    return _doc("five_network", buses, lines, customers, {"c1": conductor(0.85, 0.40, 0.20, 0.30)},
                source_pu=1.07)


def desk_k4() -> dict:
    """Small three-phase tree with four DOE customers of mixed flags."""
    buses = [{"id": f"n{i}", "phases": "abc"} for i in range(6)]
    tree = [("n0", "n1", 260.0), ("n1", "n2", 200.0), ("n2", "n3", 240.0), ("n1", "n4", 220.0), ("n4", "n5", 180.0)]
    lines = [{"id": f"l{i}", "from": a, "to": b, "conductor": "c1", "length_m": L}
             for i, (a, b, L) in enumerate(tree, start=1)]
    customers = [
        _doe("d1", "n3", "a", flags=(1, 1)),
        _doe("d2", "n2", "b", flags=(1, 0)),
        _doe("d3", "n5", "c", flags=(1, 1)),
        _doe("d4", "n4", "a", flags=(0, 1)),
        _load("u1", "n2", "a", 1.2, 0.3),
        _load("u2", "n3", "c", 0.9, 0.2),
        _load("u3", "n5", "b", 1.5, 0.4),
    ]
    return _doc("desk_k4", buses, lines, customers, {"c1": conductor(0.85, 0.40, 0.20, 0.30)}, source_pu=1.045)


def desk_k8() -> dict:
    """Three-phase tree with eight DOE customers and a single-phase lateral."""
    buses = [{"id": f"n{i}", "phases": "abc"} for i in range(6)] + [{"id": "n6", "phases": "b"}]
    tree = [("n0", "n1", 220.0), ("n1", "n2", 180.0), ("n2", "n3", 200.0), ("n1", "n4", 240.0),
            ("n4", "n5", 150.0), ("n5", "n6", 130.0)]
    lines = [{"id": f"l{i}", "from": a, "to": b, "conductor": "c1", "length_m": L}
             for i, (a, b, L) in enumerate(tree, start=1)]
    customers = [
        _doe("d1", "n2", "a", flags=(1, 1)),
        _doe("d2", "n3", "b", flags=(1, 0)),
        _doe("d3", "n3", "c", flags=(1, 1)),
        _doe("d4", "n4", "a", flags=(1, 0)),
        _doe("d5", "n5", "c", flags=(0, 1)),
        _doe("d6", "n6", "b", flags=(1, 1)),
        _doe("d7", "n2", "c", flags=(1, 0)),
        _doe("d8", "n5", "a", flags=(1, 1)),
        _load("u1", "n3", "a", 1.0, 0.25),
        _load("u2", "n4", "b", 1.4, 0.3),
    ]
    return _doc("desk_k8", buses, lines, customers, {"c1": conductor(0.80, 0.38, 0.20, 0.30)}, source_pu=1.02)


def random_feeder(name: str, n_buses: int, n_conductors: int, n_single: int, n_doe: int,
                  n_two_phase: int = 0, seed: int = 0, source_pu: float = 1.03,
                  span_m: tuple[float, float] = (25.0, 60.0), load_kw: tuple[float, float] = (0.3, 2.0),
                  window: int = 4) -> dict:
    """Random radial three-phase LV feeder.

    Conductors are scaled copies of one Kron-reduced template so that the
    mutual-coupling geometry is shared across the feeder.
    """
    rng = np.random.default_rng(seed)
    scales = np.linspace(0.6, 1.6, n_conductors) if n_conductors > 1 else np.array([1.0])
    conductors = {f"c{j + 1}": conductor(0.55 * s, 0.28 * s, 0.14 * s, 0.21 * s) for j, s in enumerate(scales)}
    conductors["tx"] = conductor(0.012, 0.040, 0.0, 0.0)
    buses = [{"id": "src", "phases": "abc"}, {"id": "b1", "phases": "abc"}]
    # distribution transformer as a short series impedance (wye/wye)
    lines = [{"id": "tx", "from": "src", "to": "b1", "conductor": "tx", "length_m": 1000.0}]
    depth = {0: 0, 1: 0}
    for i in range(2, n_buses):
        # a small window gives long chains, so voltage constraints bind at the feeder ends
        lo = max(1, i - window)
        parent = int(rng.integers(lo, i))
        depth[i] = depth[parent] + 1
        buses.append({"id": f"b{i}", "phases": "abc"})
        code = f"c{1 + min(n_conductors - 1, depth[i] * n_conductors // max(1, n_buses // 3))}"
        lines.append({"id": f"l{i}", "from": buses[parent]["id"], "to": f"b{i}", "conductor": code,
                      "length_m": float(round(rng.uniform(*span_m), 1))})
    candidates = [b["id"] for b in buses[1:]]
    customers = []
    doe_slots = set(rng.choice(n_single + n_two_phase, size=n_doe, replace=False).tolist())
    flag_choices = [(1, 1), (1, 0), (0, 1)]
    for j in range(n_single + n_two_phase):
        bus = str(rng.choice(candidates))
        phases = "abc"[j % 3] if j < n_single else ["ab", "bc", "ca"][j % 3]
        cid = f"cus_{j + 1:03d}"
        if j in doe_slots:
            customers.append(_doe(cid, bus, phases, flags=flag_choices[int(rng.integers(0, 3))]))
        else:
            customers.append(_load(cid, bus, phases, float(round(rng.uniform(*load_kw), 2)),
                                   float(round(rng.uniform(0.05, 0.4), 2))))
    return _doc(name, buses, lines, customers, conductors, source_pu=source_pu)


def ausnet_like() -> dict:
    """32 buses, 5 conductor codes, 87 single-phase customers of which 30 are DOE."""
    return random_feeder("ausnet_like", n_buses=32, n_conductors=5, n_single=87, n_doe=30, seed=7,
                         span_m=(20.0, 45.0), load_kw=(0.2, 1.2))


def network_r_like(seed: int = 11) -> dict:
    """Larger feeder mirroring a 219-bus network with 50 of 144 customers as DOE customers."""
    return random_feeder("network_r_like", n_buses=219, n_conductors=12, n_single=141, n_two_phase=3,
                         n_doe=50, seed=seed, span_m=(10.0, 25.0), load_kw=(0.2, 1.0), window=20)


def single_phase_two_bus(z_pu: complex = 0.1 + 0.1j, power_kva: float = 10.0, doe: bool = False,
                         load_kw: float = 0.0, load_kvar: float = 0.0, flags=(1, 0),
                         source_pu: float = 1.0) -> dict:
    """Source plus one single-phase bus; ``z_pu`` is the phase-a series impedance."""
    zbase = 230.0**2 / (1000.0 * power_kva)
    r = np.zeros((3, 3))
    x = np.zeros((3, 3))
    r[0, 0], x[0, 0] = z_pu.real * zbase, z_pu.imag * zbase
    cond = {"z": {"r_ohm_per_km": r.tolist(), "x_ohm_per_km": x.tolist()}}
    buses = [{"id": "src", "phases": "abc"}, {"id": "b2", "phases": "a"}]
    lines = [{"id": "l1", "from": "src", "to": "b2", "conductor": "z", "length_m": 1000.0}]
    customers = [_doe("c1", "b2", "a", flags=flags)] if doe else [_load("c1", "b2", "a", load_kw, load_kvar)]
    return _doc("two_bus", buses, lines, customers, cond, source_pu=source_pu, power_kva=power_kva)


def network_from(doc: dict) -> Network:
    return loads_document(json.dumps(doc))


BUNDLED = {
    "five_network": five_network,
    "desk_k4": desk_k4,
    "desk_k8": desk_k8,
    "ausnet_like": ausnet_like,
}


def write_bundled(directory: Path = DATA_DIR) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for name, make in BUNDLED.items():
        path = directory / f"{name}.json"
        path.write_text(json.dumps(make(), indent=1) + "\n")
        out.append(path)
    return out


if __name__ == "__main__":
    for p in write_bundled():
        print(p)
