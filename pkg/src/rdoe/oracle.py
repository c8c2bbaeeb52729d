"""Brute-force references used to validate the filter and the solver.

Everything here works from plain power flows at explicit injection points:
full vertex enumeration, scalar bisection of single-customer limits and
grid tracing of two-customer feasible regions.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import NonConvergence, PowerFlowError, RDOEError
from .network import Network
from .powerflow import InjectionVector, PowerFlowSystem

MAX_ENUMERATION = 20
MAX_BRUTE_FORCE = 8
FEASIBLE, INFEASIBLE, DIVERGED = 1, 0, -1


def enumerate_vertices(K: int, limit: int = MAX_ENUMERATION) -> list[tuple[int, ...]]:
    """All sign vectors in {-1, +1}^K in lexicographic order."""
    if K < 0:
        raise ValueError("K must be non-negative")
    if K > limit:
        raise RDOEError(f"refusing to enumerate 2^{K} vertices (limit K <= {limit})")
    return list(itertools.product((-1, 1), repeat=K))


class _Evaluator:
    """Voltage magnitudes for batches of DOE active-power vectors (kW)."""

    def __init__(self, net: Network, system: PowerFlowSystem | None = None, q_kvar=None):
        self.net = net
        self.pf = system or PowerFlowSystem(net)
        self.doe = net.doe_customers
        pos = {c.id: j for j, c in enumerate(net.customers)}
        self.C = self.pf.C.tocsc()[:, [pos[c.id] for c in self.doe]]
        sb = net.bases.power_kva
        self.s0 = self.pf.loads(InjectionVector.fixed(net))
        if q_kvar is not None:
            self.s0 = self.s0 + 1j * (self.C @ (np.asarray(q_kvar, float) / sb))
        self.sb = sb

    def magnitudes(self, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(u, converged)`` for each row of ``P`` (kW); rows that fail get NaN."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        S = self.s0[None, :] + (self.C @ (P.T / self.sb)).T
        V, ok = self.pf.solve_batch(S)
        u = np.abs(V)
        for i in np.flatnonzero(~ok):
            try:
                u[i] = np.abs(self.pf.solve(S[i]).v[3:])
                ok[i] = True
            except PowerFlowError:
                u[i] = np.nan
        return u, ok

    def feasible(self, P: np.ndarray, tol: float = 0.0) -> np.ndarray:
        u, ok = self.magnitudes(P)
        with np.errstate(invalid="ignore"):
            inside = np.all((u >= self.net.v_min - tol) & (u <= self.net.v_max + tol), axis=1)
        return np.where(ok, np.where(inside, FEASIBLE, INFEASIBLE), DIVERGED)


@dataclass
class Extremes:
    labels: tuple[tuple[str, str], ...]
    u_min: np.ndarray
    u_max: np.ndarray
    argmin: list[tuple[int, ...]]
    argmax: list[tuple[int, ...]]


def brute_force_extremes(net: Network, p_minus, p_plus, system: PowerFlowSystem | None = None,
                         limit: int = MAX_BRUTE_FORCE) -> Extremes:
    """Exact voltage extremes over all 2^K envelope vertices with q = 0."""
    lo, hi = np.asarray(p_minus, float), np.asarray(p_plus, float)
    K = lo.size
    if K > limit:
        raise RDOEError(f"brute force limited to K <= {limit}, got {K}")
    verts = np.array(enumerate_vertices(K), dtype=int).reshape(-1, K)
    P = np.where(verts > 0, hi, lo)
    ev = _Evaluator(net, system)
    u, ok = ev.magnitudes(P)
    if not np.all(ok):
        bad = tuple(int(v) for v in verts[np.flatnonzero(~ok)[0]])
        raise NonConvergence(f"power flow failed at vertex {bad}")
    imin, imax = u.argmin(axis=0), u.argmax(axis=0)
    return Extremes(ev.pf.labels, u.min(axis=0), u.max(axis=0),
                    [tuple(int(v) for v in verts[i]) for i in imin],
                    [tuple(int(v) for v in verts[i]) for i in imax])


def bisection_limit(net: Network, customer: str, direction: str = "export", tol: float = 1e-3,
                    others_kw=None, system: PowerFlowSystem | None = None) -> float:
    """Largest magnitude (kW) customer ``customer`` can export (or import) alone.

    Other DOE customers stay at ``others_kw`` (zero by default). Assumes the
    feasible set along the ray is an interval starting at zero.
    """
    if direction not in ("export", "import"):
        raise ValueError("direction must be 'export' or 'import'")
    ev = _Evaluator(net, system)
    ids = [c.id for c in ev.doe]
    k = ids.index(customer)
    base = np.zeros(len(ids)) if others_kw is None else np.array(others_kw, dtype=float)
    c = ev.doe[k]
    sb = net.bases.power_kva
    reach = -c.p_box[0] * sb if direction == "export" else c.p_box[1] * sb
    sign = -1.0 if direction == "export" else 1.0

    def ok(x):
        p = base.copy()
        p[k] = sign * x
        return ev.feasible(p)[0] == FEASIBLE

    if not ok(0.0):
        return 0.0
    if ok(reach):
        return float(reach)
    a, b = 0.0, float(reach)
    while b - a > tol:
        mid = 0.5 * (a + b)
        a, b = (mid, b) if ok(mid) else (a, mid)
    return a


@dataclass
class FRTrace:
    customers: tuple[str, str]
    p1: np.ndarray  # kW grid along the first customer
    p2: np.ndarray
    status: np.ndarray  # (len(p1), len(p2)) of FEASIBLE / INFEASIBLE / DIVERGED
    resolution: float

    def boundary(self) -> np.ndarray:
        """Feasible grid points with at least one non-feasible 4-neighbour or on the grid edge."""
        f = self.status == FEASIBLE
        pad = np.pad(f, 1, constant_values=False)
        inner = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
        i, j = np.nonzero(f & ~inner)
        return np.column_stack([self.p1[i], self.p2[j]])

    def _snap(self, grid, value, toward):
        # nearest grid node that does not leave the rectangle
        idx = np.searchsorted(grid, value - 1e-9 if toward > 0 else value + 1e-9)
        idx = idx if toward > 0 else idx - 1
        return int(np.clip(idx, 0, grid.size - 1))

    def contains_rectangle(self, lo, hi) -> bool:
        """True when all four corners of [lo, hi] land on feasible grid points.

        Corners are snapped to the nearest grid node inside the rectangle.
        """
        for c1, d1 in ((lo[0], +1), (hi[0], -1)):
            for c2, d2 in ((lo[1], +1), (hi[1], -1)):
                i = self._snap(self.p1, c1, d1)
                j = self._snap(self.p2, c2, d2)
                if self.status[i, j] != FEASIBLE:
                    return False
        return True

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"{self.customers[0]}_kw", f"{self.customers[1]}_kw", "status"])
            names = {FEASIBLE: "feasible", INFEASIBLE: "infeasible", DIVERGED: "diverged"}
            for i, a in enumerate(self.p1):
                for j, b in enumerate(self.p2):
                    w.writerow([f"{a:.6g}", f"{b:.6g}", names[int(self.status[i, j])]])


def trace_feasible_region(net: Network, customers: tuple[str, str], resolution: float = 0.1, others_kw=None,
                          box=None, system: PowerFlowSystem | None = None, q_kvar=None) -> FRTrace:
    """Label a (p1, p2) grid feasible/infeasible by power flow and voltage check.

    ``box`` is ``((lo1, hi1), (lo2, hi2))`` in kW and defaults to the
    customers' p boxes. Other DOE customers are held at ``others_kw``.
    """
    if len(customers) != 2 or customers[0] == customers[1]:
        raise ValueError("exactly two distinct DOE customers are required")
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    ev = _Evaluator(net, system, q_kvar)
    ids = [c.id for c in ev.doe]
    try:
        k1, k2 = ids.index(customers[0]), ids.index(customers[1])
    except ValueError as exc:
        raise RDOEError(f"not a DOE customer: {exc}") from exc
    sb = net.bases.power_kva
    if box is None:
        box = tuple((ev.doe[k].p_box[0] * sb, ev.doe[k].p_box[1] * sb) for k in (k1, k2))
    grids = [np.round(np.arange(np.ceil(lo / resolution - 1e-9), np.floor(hi / resolution + 1e-9) + 1) * resolution, 10)
             for lo, hi in box]
    g1, g2 = np.meshgrid(grids[0], grids[1], indexing="ij")
    base = np.zeros(len(ids)) if others_kw is None else np.array(others_kw, dtype=float)
    P = np.tile(base, (g1.size, 1))
    P[:, k1] = g1.ravel()
    P[:, k2] = g2.ravel()
    status = ev.feasible(P).reshape(g1.shape)
    return FRTrace((customers[0], customers[1]), grids[0], grids[1], status, float(resolution))
