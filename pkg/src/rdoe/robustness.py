"""Monte Carlo certification of an envelope.

Utilisations are drawn uniformly inside the envelope hyperrectangle and each
one is checked with a power flow against the voltage limits.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import PowerFlowError, RDOEError
from .network import Network
from .nlp import Envelope
from .powerflow import InjectionVector, PowerFlowSystem

REPORT_FORMAT = 1
CHUNK = 1024  # samples per random stream; part of the reproducibility contract
DEFAULT_TOL = 1e-6


@dataclass
class SampleSet:
    """``n`` utilisation samples for the DOE customers of one network."""

    customers: tuple[str, ...]
    p_kw: np.ndarray  # (n, K)
    q_kvar: np.ndarray  # (n, K)
    seed: int = 0

    def __len__(self) -> int:
        return self.p_kw.shape[0]

    def injection(self, net: Network, i: int) -> InjectionVector:
        inj = InjectionVector.fixed(net)
        for k, cid in enumerate(self.customers):
            inj = inj.with_values(cid, p=float(self.p_kw[i, k]), q=float(self.q_kvar[i, k]))
        return inj

    def injections(self, net: Network) -> list[InjectionVector]:
        return [self.injection(net, i) for i in range(len(self))]


def _stream(seed: int, chunk: int) -> np.random.Generator:
    # Philox is counter based: the chunk index selects a disjoint block of counters
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1), counter=[0, 0, chunk, 0]))


def sample_utilisations(env: Envelope, n: int, seed: int, net: Network | None = None,
                        q_mode: str = "setpoint") -> SampleSet:
    """Uniform samples inside the envelope.

    ``q_mode="setpoint"`` holds each customer at the envelope's reactive
    setpoint; ``q_mode="box"`` draws q uniformly from the customer's q box
    when it is controllable (requires ``net``).
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if q_mode not in ("setpoint", "box"):
        raise ValueError("q_mode must be 'setpoint' or 'box'")
    lo, hi = np.asarray(env.p_minus_kw, float), np.asarray(env.p_plus_kw, float)
    K = lo.size
    if q_mode == "box":
        if net is None:
            raise ValueError("q_mode='box' needs the network")
        custs = [net.customer(c) for c in env.customers]
        qlo = np.array([c.q_box[0] * net.bases.power_kva if c.q_controllable else 0.0 for c in custs])
        qhi = np.array([c.q_box[1] * net.bases.power_kva if c.q_controllable else 0.0 for c in custs])
    p = np.empty((n, K))
    q = np.empty((n, K))
    for c0 in range(0, n, CHUNK):
        m = min(CHUNK, n - c0)
        rng = _stream(seed, c0 // CHUNK)
        u = rng.random((m, 2 * K))
        p[c0:c0 + m] = lo + u[:, :K] * (hi - lo)
        if q_mode == "box":
            q[c0:c0 + m] = qlo + u[:, K:] * (qhi - qlo)
        else:
            q[c0:c0 + m] = env.q_kvar
    return SampleSet(tuple(env.customers), p, q, int(seed))


def _finite_or_none(v: float):
    return float(v) if np.isfinite(v) else None


@dataclass
class Violation:
    sample: int
    bus: str
    phase: str
    magnitude: float
    kind: str  # "over", "under" or "diverged"


@dataclass
class ViolationReport:
    samples: int
    violations: int
    worst_overvoltage: float
    worst_undervoltage: float
    seed: int | None = None
    tol: float = DEFAULT_TOL
    records: list[Violation] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "format_version": REPORT_FORMAT,
            "kind": "violation_report",
            "samples": self.samples,
            "violations": self.violations,
            "worst_overvoltage": _finite_or_none(self.worst_overvoltage),
            "worst_undervoltage": _finite_or_none(self.worst_undervoltage),
            "seed": self.seed,
            "tol": self.tol,
            "records": [{**vars(r), "magnitude": _finite_or_none(r.magnitude)} for r in self.records],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "bus", "phase", "magnitude_pu", "kind"])
            for r in self.records:
                w.writerow([r.sample, r.bus, r.phase, repr(r.magnitude), r.kind])


def _loads_matrix(net: Network, pf: PowerFlowSystem, samples: SampleSet) -> np.ndarray:
    # DOE customers sit at zero in the fixed injections, so samples add on top
    s0 = pf.loads(InjectionVector.fixed(net))
    pos = {c.id: j for j, c in enumerate(net.customers)}
    C = pf.C.tocsc()[:, [pos[c] for c in samples.customers]]
    sb = net.bases.power_kva
    return s0[None, :] + (C @ (samples.p_kw.T / sb) + 1j * (C @ (samples.q_kvar.T / sb))).T


def evaluate(net: Network, samples: SampleSet | list, tol: float = DEFAULT_TOL,
             system: PowerFlowSystem | None = None, threads: int | None = None, seed: int | None = None,
             batch: int = 2048) -> ViolationReport:
    """Power flow at every sample; report voltage-limit violations."""
    pf = system or PowerFlowSystem(net)
    if isinstance(samples, list):
        if not samples:
            return ViolationReport(0, 0, float("nan"), float("nan"), seed, tol)
        S = np.stack([pf.loads(inj) for inj in samples])
    else:
        seed = samples.seed if seed is None else seed
        if len(samples) == 0:
            return ViolationReport(0, 0, float("nan"), float("nan"), seed, tol)
        S = _loads_matrix(net, pf, samples)
    total = S.shape[0]

    def run(start):
        Sb = S[start:start + batch]
        V, ok = pf.solve_batch(Sb)
        u = np.abs(V)
        for i in np.flatnonzero(~ok):
            try:
                u[i] = np.abs(pf.solve(Sb[i]).v[3:])
            except PowerFlowError:
                u[i] = np.nan
        return start, u

    workers = threads or os.cpu_count() or 1
    starts = range(0, total, batch)
    if workers > 1 and total > batch:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    U = np.concatenate([u for _, u in sorted(parts, key=lambda t: t[0])])

    diverged = ~np.all(np.isfinite(U), axis=1)
    hi_lim, lo_lim = net.v_max + tol, net.v_min - tol
    with np.errstate(invalid="ignore"):
        over = U > hi_lim
        under = U < lo_lim
    records = []
    for i in np.flatnonzero(diverged):
        records.append(Violation(int(i), "", "", float("nan"), "diverged"))
    for kind, mask in (("over", over), ("under", under)):
        for i, r in zip(*np.nonzero(mask)):
            bus, ph = pf.labels[r]
            records.append(Violation(int(i), bus, ph, float(U[i, r]), kind))
    records.sort(key=lambda v: (v.sample, v.bus, v.phase, v.kind))
    bad = diverged | over.any(axis=1) | under.any(axis=1)
    good = U[~diverged]
    return ViolationReport(
        samples=total,
        violations=int(bad.sum()),
        worst_overvoltage=float(good.max()) if good.size else float("nan"),
        worst_undervoltage=float(good.min()) if good.size else float("nan"),
        seed=seed,
        tol=tol,
        records=records,
    )


def certify(net: Network, env: Envelope, n: int = 30000, seeds=(0, 1, 2, 3, 4), tol: float = DEFAULT_TOL,
            threads: int | None = None) -> list[ViolationReport]:
    """One report per seed with ``n`` samples each."""
    if tuple(env.customers) != tuple(c.id for c in net.doe_customers):
        raise RDOEError("envelope customers do not match the network's DOE customers")
    pf = PowerFlowSystem(net)
    return [evaluate(net, sample_utilisations(env, n, s), tol=tol, system=pf, threads=threads) for s in seeds]
