"""Worst-case utilisation scenarios from voltage-sensitivity filtering.

Pipeline: perturbation sensitivities -> sign matrix over (bus, phase, side)
rows -> row merging to a fixed point -> scenario vectors built from the
merged rows and the envelope bounds.
"""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .exceptions import NonConvergence
from .network import Network
from .powerflow import InjectionVector, PowerFlowSystem

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-5
DEFAULT_DELTA_W = 20.0


@dataclass(frozen=True)
class SensitivityTensor:
    """``beta[r, k]``: change of |V| (p.u.) per kW at node-phase ``labels[r]`` for DOE customer ``k``."""

    labels: tuple[tuple[str, str], ...]
    customers: tuple[str, ...]
    beta: np.ndarray
    base: InjectionVector
    delta_w: float


@dataclass(frozen=True)
class SignMatrix:
    rows: tuple[tuple[str, str, str], ...]  # (bus, phase, "upper"|"lower")
    customers: tuple[str, ...]
    H: np.ndarray
    eps: float


@dataclass(frozen=True)
class ScenarioMatrix:
    customers: tuple[str, ...]
    H: np.ndarray

    @property
    def plus(self) -> np.ndarray:
        return np.maximum(self.H, 0)

    @property
    def minus(self) -> np.ndarray:
        return np.minimum(self.H, 0)

    @property
    def count(self) -> int:
        return self.H.shape[0]

    @classmethod
    def full_enumeration(cls, customers) -> "ScenarioMatrix":
        from .oracle import enumerate_vertices

        return cls(tuple(customers), np.array(enumerate_vertices(len(customers)), dtype=int).reshape(-1, len(customers)))


def compute_sensitivities(net: Network, base: InjectionVector | None = None, delta_w: float = DEFAULT_DELTA_W,
                          system: PowerFlowSystem | None = None, threads: int | None = None) -> SensitivityTensor:
    """Forward-difference voltage sensitivities to each DOE customer's demand.

    Each DOE customer's demand is raised by ``delta_w`` kW on every connected
    phase while all other injections stay at ``base`` (no-load by default).
    """
    if delta_w <= 0:
        raise ValueError("delta_w must be positive")
    sys = system or PowerFlowSystem(net)
    base = base or InjectionVector.noload(net)
    sol0 = sys.solve(base)
    u0 = np.abs(sol0.v[3:])
    doe = [c for c in net.customers if c.is_doe]

    def column(c):
        inj = base.with_values(c.id, p=base.p[base.customer_ids.index(c.id)] + delta_w * len(c.phases))
        try:
            sol = sys.solve(inj, start=sol0)
        except NonConvergence as exc:
            raise NonConvergence(f"power flow diverged with customer '{c.id}' perturbed: {exc}",
                                 exc.residual_norm, exc.iterations) from exc
        return (np.abs(sol.v[3:]) - u0) / delta_w

    workers = threads or os.cpu_count() or 1
    if workers > 1 and len(doe) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cols = list(pool.map(column, doe))
    else:
        cols = [column(c) for c in doe]
    beta = np.column_stack(cols) if cols else np.zeros((sys.n, 0))
    return SensitivityTensor(sys.labels, tuple(c.id for c in doe), beta, base, float(delta_w))


def build_sign_matrix(sens: SensitivityTensor, eps: float = DEFAULT_EPS) -> SignMatrix:
    """Threshold sensitivities into {-1, 0, +1}; one upper and one (negated) lower row per node-phase.

    An entry is non-zero only when the voltage change produced by the
    perturbation, ``beta * delta_w``, exceeds ``eps`` p.u. in magnitude.
    All-zero rows are dropped.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    du = sens.beta * sens.delta_w
    theta = np.where(du > eps, 1, np.where(du < -eps, -1, 0)).astype(int)
    rows, mats = [], []
    for r, (bus, ph) in enumerate(sens.labels):
        if not theta[r].any():
            continue
        rows.append((bus, ph, "upper"))
        mats.append(theta[r])
        rows.append((bus, ph, "lower"))
        mats.append(-theta[r])
    H = np.array(mats, dtype=int).reshape(len(mats), len(sens.customers))
    return SignMatrix(tuple(rows), sens.customers, H, eps)


def mergeable(a: np.ndarray, b: np.ndarray) -> bool:
    eq = a == b
    return bool(eq.any() and np.all(np.abs(a - b) <= 1))


def merge_rows(H: SignMatrix | np.ndarray) -> ScenarioMatrix:
    """Merge rows to a fixed point.

    Two rows merge when they agree on at least one column and differ by at
    most one everywhere else; the merged row keeps the agreed entries and
    takes the sum elsewhere. Rows are visited in order with first-fit
    pairing, so the result is deterministic.
    """
    customers = H.customers if isinstance(H, SignMatrix) else tuple(str(k) for k in range(np.shape(H)[1]))
    mat = np.asarray(H.H if isinstance(H, SignMatrix) else H, dtype=int)
    K = mat.shape[1] if mat.ndim == 2 else 0
    rows = [r.copy() for r in mat if r.any()]
    # drop exact duplicates, keeping first occurrences
    seen, uniq = set(), []
    for r in rows:
        key = r.tobytes()
        if key not in seen:
            seen.add(key)
            uniq.append(r)
    rows = uniq
    changed = True
    while changed:
        changed = False
        i = 0
        while i < len(rows):
            if len(rows) - i > 1:
                rest = np.array(rows[i + 1:])
                eq = rest == rows[i]
                ok = eq.any(axis=1) & np.all(np.abs(rest - rows[i]) <= 1, axis=1)
                hits = np.flatnonzero(ok)
                if hits.size:
                    j = i + 1 + int(hits[0])
                    rows[i] = np.where(rows[i] == rows[j], rows[i], rows[i] + rows[j])
                    del rows[j]
                    changed = True
                    continue
            i += 1
    out = np.array(rows, dtype=int).reshape(len(rows), K)
    return ScenarioMatrix(customers, out)


def scenario_vectors(hbar: ScenarioMatrix, p_plus, p_minus) -> list[np.ndarray]:
    """Utilisation vectors: ``p_plus`` where a row is +1, ``p_minus`` where -1, zero elsewhere."""
    p_plus = np.asarray(p_plus)
    p_minus = np.asarray(p_minus)
    K = hbar.H.shape[1]
    if p_plus.shape[-1:] != (K,) or p_minus.shape[-1:] != (K,):
        raise ValueError(f"bounds must have {K} entries, got {p_plus.shape} and {p_minus.shape}")
    return [np.where(row > 0, p_plus, np.where(row < 0, p_minus, np.zeros_like(p_plus))) for row in hbar.H]


def filter_scenarios(net: Network, eps: float = DEFAULT_EPS, delta_w: float = DEFAULT_DELTA_W,
                     base: InjectionVector | None = None, system: PowerFlowSystem | None = None,
                     threads: int | None = None):
    """Run the full filter; returns ``(sensitivities, sign_matrix, scenario_matrix)``."""
    sens = compute_sensitivities(net, base=base, delta_w=delta_w, system=system, threads=threads)
    H = build_sign_matrix(sens, eps)
    hbar = merge_rows(H)
    log.info("sensitivity filter: %d sign rows -> %d scenarios for %d DOE customers",
             H.H.shape[0], hbar.count, len(sens.customers))
    return sens, H, hbar


def write_beta_csv(sens: SensitivityTensor, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", "phase", *sens.customers])
        for (bus, ph), row in zip(sens.labels, sens.beta):
            w.writerow([bus, ph, *(f"{v:.9e}" for v in row)])


def write_matrix_csv(customers, rows, H: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", *customers])
        for label, r in zip(rows, H):
            w.writerow([label, *(int(v) for v in r)])


def with_base(sens: SensitivityTensor, base: InjectionVector) -> SensitivityTensor:
    return replace(sens, base=base)
