"""Network data model, document format, parsing and validation.

A network document is a JSON object::

    {
      "format_version": 1,
      "name": "five_network",
      "bases": {"power_kva": 10.0, "voltage_v": 230.0},
      "limits": {"v_min": 0.94, "v_max": 1.10},
      "source": {"bus": "b1", "voltage_pu": 1.0, "angle_deg": 0.0},
      "conductors": {"code3": {"r_ohm_per_km": [[...]], "x_ohm_per_km": [[...]]}},
      "buses": [{"id": "b1", "phases": "abc"}],
      "lines": [{"id": "l1", "from": "b1", "to": "b2", "conductor": "code3", "length_m": 120.0}],
      "customers": [
        {"id": "cus_01", "bus": "b2", "phases": "a", "kind": "non-doe", "p_kw": 1.5, "q_kvar": 0.3},
        {"id": "cus_02", "bus": "b2", "phases": "b", "kind": "doe", "flags": [1, 0],
         "p_box_kw": [-7, 7], "q_box_kvar": [-3, 3], "q_controllable": true}
      ]
    }

The power base is per phase and the voltage base is line-to-neutral, so the
impedance base is ``voltage_v**2 / (1000 * power_kva)`` ohms. Customer powers
are totals over the connected phases and are split equally between them.
Everything held by :class:`Network` is in per-unit.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .exceptions import NetworkError

FORMAT_VERSION = 1
PHASES = ("a", "b", "c")
ADMISSIBLE_FLAGS = ((1, 0), (0, 1), (1, 1))

DEFAULT_V_MIN = 0.94
DEFAULT_V_MAX = 1.10
DEFAULT_P_BOX_KW = (-7.0, 7.0)
DEFAULT_Q_BOX_KVAR = (-3.0, 3.0)

Matrix3 = tuple[tuple[complex, ...], ...]


@dataclass(frozen=True)
class Bases:
    power_kva: float
    voltage_v: float

    @property
    def impedance_ohm(self) -> float:
        return self.voltage_v**2 / (1000.0 * self.power_kva)


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[str, ...]
    base_voltage: float


@dataclass(frozen=True)
class Conductor:
    code: str
    z_per_km: Matrix3  # p.u. per km, 3x3

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.z_per_km, dtype=complex)


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    conductor: str
    length_m: float
    impedance: Matrix3  # p.u., 3x3

    @property
    def z(self) -> np.ndarray:
        return np.array(self.impedance, dtype=complex)


@dataclass(frozen=True)
class Customer:
    """A customer connection. Powers are p.u. totals over ``phases``.

    DOE customers carry ``flags`` and the active/reactive search boxes;
    non-DOE customers carry fixed consumption instead.
    """

    id: str
    bus: str
    phases: tuple[str, ...]
    kind: str
    fixed_p: float = 0.0
    fixed_q: float = 0.0
    p_box: tuple[float, float] | None = None
    q_box: tuple[float, float] | None = None
    q_controllable: bool = False
    flags: tuple[int, int] | None = None

    @property
    def is_doe(self) -> bool:
        return self.kind == "doe"


@dataclass(frozen=True)
class Network:
    name: str
    bases: Bases
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    customers: tuple[Customer, ...]
    conductors: tuple[Conductor, ...]
    source_bus: str
    source_voltage: float = 1.0
    source_angle_deg: float = 0.0
    v_min: float = DEFAULT_V_MIN
    v_max: float = DEFAULT_V_MAX
    _bus_index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_bus_index", {b.id: i for i, b in enumerate(self.buses)})

    def bus(self, bus_id: str) -> Bus:
        return self.buses[self._bus_index[bus_id]]

    def has_bus(self, bus_id: str) -> bool:
        return bus_id in self._bus_index

    def bus_position(self, bus_id: str) -> int:
        return self._bus_index[bus_id]

    @property
    def doe_customers(self) -> tuple[Customer, ...]:
        return tuple(c for c in self.customers if c.is_doe)

    def customer(self, customer_id: str) -> Customer:
        for c in self.customers:
            if c.id == customer_id:
                return c
        raise KeyError(customer_id)

    def kw_to_pu(self, value):
        return value / self.bases.power_kva

    def pu_to_kw(self, value):
        return value * self.bases.power_kva


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def __str__(self) -> str:
        lines = [f"error: {e}" for e in self.errors] + [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines) if lines else "ok"


def validate(net: Network) -> ValidationReport:
    """Check every structural invariant of ``net``; problems are returned, not raised."""
    rep = ValidationReport()
    err = rep.errors.append

    for kind, items in (("bus", net.buses), ("line", net.lines), ("customer", net.customers)):
        seen = set()
        for item in items:
            if item.id in seen:
                err(f"duplicate {kind} id '{item.id}'")
            seen.add(item.id)

    for b in net.buses:
        if not b.phases or any(p not in PHASES for p in b.phases) or len(set(b.phases)) != len(b.phases):
            err(f"bus '{b.id}': bad phase set {b.phases!r}")
        if not b.base_voltage > 0:
            err(f"bus '{b.id}': base voltage must be positive")

    if not net.has_bus(net.source_bus):
        err(f"source bus '{net.source_bus}' does not exist")
    elif set(net.bus(net.source_bus).phases) != set(PHASES):
        err(f"source bus '{net.source_bus}' must have phases a, b and c")

    if not (0.0 < net.v_min < 1.0 < net.v_max):
        err(f"voltage limits must satisfy 0 < v_min < 1 < v_max, got ({net.v_min}, {net.v_max})")
    if not (net.v_min <= net.source_voltage <= net.v_max):
        err(f"source voltage {net.source_voltage} outside [{net.v_min}, {net.v_max}]")
    if not (net.bases.power_kva > 0 and net.bases.voltage_v > 0):
        err("bases must be positive")

    codes = {c.code for c in net.conductors}
    for c in net.conductors:
        _check_impedance(c.matrix, f"conductor '{c.code}'", err)

    for ln in net.lines:
        for end in (ln.from_bus, ln.to_bus):
            if not net.has_bus(end):
                err(f"line '{ln.id}': dangling bus id '{end}'")
        if ln.from_bus == ln.to_bus:
            err(f"line '{ln.id}': self loop at '{ln.from_bus}'")
        if ln.conductor and ln.conductor not in codes:
            err(f"line '{ln.id}': unknown conductor '{ln.conductor}'")
        if not ln.length_m >= 0:
            err(f"line '{ln.id}': negative length")
        _check_impedance(ln.z, f"line '{ln.id}'", err)
        if net.has_bus(ln.from_bus) and net.has_bus(ln.to_bus):
            if not math.isclose(net.bus(ln.from_bus).base_voltage, net.bus(ln.to_bus).base_voltage):
                err(f"line '{ln.id}': connects buses with different base voltages")

    if not rep.errors:
        _check_radial(net, err)

    for c in net.customers:
        if not net.has_bus(c.bus):
            err(f"customer '{c.id}': dangling bus id '{c.bus}'")
            continue
        if not c.phases or len(set(c.phases)) != len(c.phases) or any(p not in PHASES for p in c.phases):
            err(f"customer '{c.id}': bad phase set {c.phases!r}")
            continue
        missing = [p for p in c.phases if p not in net.bus(c.bus).phases]
        if missing:
            err(f"customer '{c.id}': phase(s) {''.join(missing)} not present at bus '{c.bus}'")
        if c.kind == "doe":
            if c.flags not in ADMISSIBLE_FLAGS:
                err(f"customer '{c.id}': bad flag pair {c.flags}")
            if c.p_box is None or not (c.p_box[0] <= 0.0 <= c.p_box[1]):
                err(f"customer '{c.id}': active box must satisfy -b <= 0 <= a, got {c.p_box}")
            if c.q_box is None or not (c.q_box[0] <= c.q_box[1]):
                err(f"customer '{c.id}': bad reactive box {c.q_box}")
            elif c.q_controllable and not (c.q_box[0] <= 0.0 <= c.q_box[1]):
                err(f"customer '{c.id}': reactive box must contain 0")
        elif c.kind == "non-doe":
            if c.flags is not None or c.p_box is not None or c.q_box is not None or c.q_controllable:
                err(f"customer '{c.id}': non-DOE customers take no flags or boxes")
        else:
            err(f"customer '{c.id}': unknown kind '{c.kind}'")
    if not net.doe_customers and net.customers:
        rep.warnings.append("network has no DOE customers")
    return rep


def _check_impedance(z: np.ndarray, what: str, err) -> None:
    if z.shape != (3, 3) or not np.all(np.isfinite(z)):
        err(f"{what}: impedance must be a finite 3x3 matrix")
        return
    if not np.allclose(z, z.T, rtol=1e-9, atol=1e-12):
        err(f"{what}: impedance matrix not symmetric")
    if np.any(np.diag(z).real < 0):
        err(f"{what}: negative self resistance")


def _check_radial(net: Network, err) -> None:
    adj: dict[str, list[Line]] = {b.id: [] for b in net.buses}
    for ln in net.lines:
        adj[ln.from_bus].append(ln)
        adj[ln.to_bus].append(ln)
    if len(net.lines) != len(net.buses) - 1:
        kind = "non-radial" if len(net.lines) >= len(net.buses) else "disconnected"
        err(f"{kind}: {len(net.lines)} lines for {len(net.buses)} buses")
    parent = {net.source_bus: None}
    stack = [net.source_bus]
    while stack:
        u = stack.pop()
        for ln in adj[u]:
            if ln is parent[u]:
                continue
            v = ln.to_bus if ln.from_bus == u else ln.from_bus
            if v in parent:
                err(f"non-radial: loop closed by line '{ln.id}'")
                return
            parent[v] = ln
            if not set(net.bus(v).phases) <= set(net.bus(u).phases):
                err(f"bus '{v}': phases {''.join(net.bus(v).phases)} not fed by parent bus '{u}'")
            stack.append(v)
    for b in net.buses:
        if b.id not in parent:
            err(f"disconnected: bus '{b.id}' not reachable from source")


# ---------------------------------------------------------------------------
# Document parsing / serialisation
# ---------------------------------------------------------------------------


def _line_of(text: str, ident: str | None) -> int | None:
    if ident is None:
        return None
    m = re.search(r'"id"\s*:\s*"' + re.escape(str(ident)) + '"', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


class _Reader:
    """Field access with schema errors that name the field and document line."""

    def __init__(self, text: str):
        self.text = text

    def fail(self, msg: str, ident: str | None = None):
        line = _line_of(self.text, ident)
        where = f" (line {line})" if line else ""
        raise NetworkError(f"schema violation: {msg}{where}", element=ident, line=line)

    def get(self, obj: dict, key: str, typ, ctx: str, ident=None, default=...):
        if key not in obj:
            if default is not ...:
                return default
            self.fail(f"{ctx}: missing field '{key}'", ident)
        val = obj[key]
        if typ is float:
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                self.fail(f"{ctx}: field '{key}' must be a number", ident)
            return float(val)
        if not isinstance(val, typ):
            self.fail(f"{ctx}: field '{key}' has wrong type", ident)
        return val

    def pair(self, obj, key, ctx, ident, default):
        val = obj.get(key, default)
        if val is None:
            return None
        if not (isinstance(val, (list, tuple)) and len(val) == 2 and all(isinstance(v, (int, float)) for v in val)):
            self.fail(f"{ctx}: field '{key}' must be a pair of numbers", ident)
        return (float(val[0]), float(val[1]))

    def matrix(self, obj, key, ctx, ident):
        val = self.get(obj, key, list, ctx, ident)
        try:
            arr = np.array(val, dtype=float)
        except (TypeError, ValueError):
            self.fail(f"{ctx}: field '{key}' must be a numeric 3x3 matrix", ident)
        if arr.shape != (3, 3):
            self.fail(f"{ctx}: field '{key}' must be 3x3", ident)
        return arr


def _phases(s: Any) -> tuple[str, ...]:
    if isinstance(s, str):
        return tuple(s)
    return tuple(s)


def _freeze(m: np.ndarray) -> Matrix3:
    return tuple(tuple(complex(v) for v in row) for row in m)


def loads_document(text: str, check: bool = True) -> Network:
    """Build a :class:`Network` from document text; ``check`` runs :func:`validate`."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkError(f"malformed document: {exc.msg} (line {exc.lineno})", line=exc.lineno) from exc
    r = _Reader(text)
    if not isinstance(doc, dict):
        r.fail("top level must be an object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        r.fail(f"unsupported format_version {version!r}")

    bases_doc = r.get(doc, "bases", dict, "document")
    bases = Bases(r.get(bases_doc, "power_kva", float, "bases"), r.get(bases_doc, "voltage_v", float, "bases"))
    if bases.power_kva <= 0 or bases.voltage_v <= 0:
        r.fail("bases: values must be positive")
    limits = r.get(doc, "limits", dict, "document", default={})
    source = r.get(doc, "source", dict, "document")

    buses = []
    for b in r.get(doc, "buses", list, "document"):
        if not isinstance(b, dict):
            r.fail("buses: entries must be objects")
        bid = r.get(b, "id", str, "bus")
        buses.append(Bus(bid, _phases(r.get(b, "phases", (str, list), "bus", bid)),
                         r.get(b, "base_voltage_v", float, "bus", bid, default=bases.voltage_v)))

    zbase = bases.impedance_ohm
    conductors = []
    cond_docs = r.get(doc, "conductors", dict, "document", default={})
    for code, c in cond_docs.items():
        if not isinstance(c, dict):
            r.fail(f"conductor '{code}' must be an object")
        rm = r.matrix(c, "r_ohm_per_km", f"conductor '{code}'", None)
        xm = r.matrix(c, "x_ohm_per_km", f"conductor '{code}'", None)
        conductors.append(Conductor(code, _freeze((rm + 1j * xm) / zbase)))
    by_code = {c.code: c for c in conductors}

    lines = []
    for ln in r.get(doc, "lines", list, "document"):
        if not isinstance(ln, dict):
            r.fail("lines: entries must be objects")
        lid = r.get(ln, "id", str, "line")
        code = r.get(ln, "conductor", str, "line", lid)
        length = r.get(ln, "length_m", float, "line", lid)
        if code not in by_code:
            raise NetworkError(f"line '{lid}': unknown conductor '{code}' (line {_line_of(text, lid)})",
                               element=lid, line=_line_of(text, lid))
        z = by_code[code].matrix * (length / 1000.0)
        lines.append(Line(lid, r.get(ln, "from", str, "line", lid), r.get(ln, "to", str, "line", lid),
                          code, length, _freeze(z)))

    customers = []
    for c in r.get(doc, "customers", list, "document", default=[]):
        if not isinstance(c, dict):
            r.fail("customers: entries must be objects")
        cid = r.get(c, "id", str, "customer")
        kind = r.get(c, "kind", str, "customer", cid)
        phases = _phases(r.get(c, "phases", (str, list), "customer", cid))
        bus = r.get(c, "bus", str, "customer", cid)
        if kind == "doe":
            flags = c.get("flags", [1, 1])
            if not (isinstance(flags, list) and len(flags) == 2):
                r.fail("customer: 'flags' must be a pair", cid)
            p_box = r.pair(c, "p_box_kw", "customer", cid, list(DEFAULT_P_BOX_KW))
            q_box = r.pair(c, "q_box_kvar", "customer", cid, list(DEFAULT_Q_BOX_KVAR))
            customers.append(Customer(
                cid, bus, phases, kind,
                p_box=(p_box[0] / bases.power_kva, p_box[1] / bases.power_kva),
                q_box=(q_box[0] / bases.power_kva, q_box[1] / bases.power_kva),
                q_controllable=bool(c.get("q_controllable", True)),
                flags=(int(flags[0]), int(flags[1])),
            ))
        else:
            for forbidden in ("flags", "p_box_kw", "q_box_kvar", "q_controllable"):
                if forbidden in c:
                    raise NetworkError(f"customer '{cid}': non-DOE customers take no '{forbidden}'",
                                       element=cid, line=_line_of(text, cid))
            customers.append(Customer(
                cid, bus, phases, kind,
                fixed_p=r.get(c, "p_kw", float, "customer", cid, default=0.0) / bases.power_kva,
                fixed_q=r.get(c, "q_kvar", float, "customer", cid, default=0.0) / bases.power_kva,
            ))

    net = Network(
        name=str(doc.get("name", "network")),
        bases=bases,
        buses=tuple(buses),
        lines=tuple(lines),
        customers=tuple(customers),
        conductors=tuple(conductors),
        source_bus=r.get(source, "bus", str, "source"),
        source_voltage=r.get(source, "voltage_pu", float, "source", default=1.0),
        source_angle_deg=r.get(source, "angle_deg", float, "source", default=0.0),
        v_min=r.get(limits, "v_min", float, "limits", default=DEFAULT_V_MIN),
        v_max=r.get(limits, "v_max", float, "limits", default=DEFAULT_V_MAX),
    )
    if check:
        rep = validate(net)
        if rep.errors:
            first = rep.errors[0]
            m = re.search(r"'([^']+)'", first)
            ident = m.group(1) if m else None
            line = _line_of(text, ident)
            where = f" (line {line})" if line else ""
            raise NetworkError("invalid network: " + "; ".join(rep.errors) + where, element=ident, line=line)
    return net


def parse_network(path: str | Path) -> Network:
    """Read, convert to per-unit and validate a network document."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise NetworkError(f"cannot read network document {path}: {exc.strerror}") from exc
    return loads_document(text)


def to_document(net: Network) -> dict:
    """Canonical document for ``net`` in physical units."""
    sb, zb = net.bases.power_kva, net.bases.impedance_ohm

    def pair(v):
        return [v[0] * sb, v[1] * sb]

    customers = []
    for c in net.customers:
        d = {"id": c.id, "bus": c.bus, "phases": "".join(c.phases), "kind": c.kind}
        if c.is_doe:
            d.update(flags=list(c.flags), p_box_kw=pair(c.p_box), q_box_kvar=pair(c.q_box),
                     q_controllable=c.q_controllable)
        else:
            d.update(p_kw=c.fixed_p * sb, q_kvar=c.fixed_q * sb)
        customers.append(d)
    return {
        "format_version": FORMAT_VERSION,
        "name": net.name,
        "bases": {"power_kva": net.bases.power_kva, "voltage_v": net.bases.voltage_v},
        "limits": {"v_min": net.v_min, "v_max": net.v_max},
        "source": {"bus": net.source_bus, "voltage_pu": net.source_voltage, "angle_deg": net.source_angle_deg},
        "conductors": {
            c.code: {"r_ohm_per_km": (c.matrix.real * zb).tolist(), "x_ohm_per_km": (c.matrix.imag * zb).tolist()}
            for c in net.conductors
        },
        "buses": [{"id": b.id, "phases": "".join(b.phases), "base_voltage_v": b.base_voltage} for b in net.buses],
        "lines": [{"id": ln.id, "from": ln.from_bus, "to": ln.to_bus, "conductor": ln.conductor,
                   "length_m": ln.length_m} for ln in net.lines],
        "customers": customers,
    }


def dumps_document(net: Network) -> str:
    return json.dumps(to_document(net), indent=1)


def write_network(net: Network, path: str | Path) -> None:
    Path(path).write_text(dumps_document(net) + "\n")


def bundled_networks() -> dict[str, Path]:
    """Network documents shipped with the package, keyed by name."""
    data = Path(__file__).parent / "data"
    return {p.stem: p for p in sorted(data.glob("*.json"))}


def load_bundled(name: str) -> Network:
    paths = bundled_networks()
    if name not in paths:
        raise NetworkError(f"no bundled network '{name}' (have: {', '.join(paths)})")
    return parse_network(paths[name])
