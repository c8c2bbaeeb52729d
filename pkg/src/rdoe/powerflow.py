"""Unbalanced three-phase power flow in current-voltage form.

Unknowns are rectangular nodal voltages and line currents. Because the
network is radial, every non-source node-phase ``k`` has exactly one feeding
line-phase, which shares the index ``k``. The real unknown vector is::

    x = [Vr (n), Vi (n), Ir (n), Ii (n)]

and the residual stacks, for every node-phase ``k``::

    drop_k  = V_parent(k) - V_k - sum_j Z_kj I_j           (complex, 2 rows)
    bal_k   = V_k * conj(J_k) - S_k                        (complex, 2 rows)

where ``J = (I - P^T) I`` is the current drawn by the loads at each node and
``S`` the consumed complex power (positive = import).
"""

from __future__ import annotations

import csv
import logging
import warnings
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import NonConvergence, PowerFlowError, SingularJacobian
from .network import PHASES, Network

log = logging.getLogger(__name__)

DENSE_LIMIT = 200


@dataclass(frozen=True)
class InjectionVector:
    """Per-customer total active (kW) and reactive (kvar) consumption.

    Entries are aligned with ``Network.customers``; negative active power is
    export. Power is shared equally between a customer's phases.
    """

    customer_ids: tuple[str, ...]
    p: np.ndarray
    q: np.ndarray

    @classmethod
    def fixed(cls, net: Network) -> "InjectionVector":
        """Non-DOE customers at their document values, DOE customers idle."""
        sb = net.bases.power_kva
        p = np.array([0.0 if c.is_doe else c.fixed_p * sb for c in net.customers])
        q = np.array([0.0 if c.is_doe else c.fixed_q * sb for c in net.customers])
        return cls(tuple(c.id for c in net.customers), p, q)

    @classmethod
    def noload(cls, net: Network) -> "InjectionVector":
        n = len(net.customers)
        return cls(tuple(c.id for c in net.customers), np.zeros(n), np.zeros(n))

    def with_values(self, customer_id: str, p: float | None = None, q: float | None = None) -> "InjectionVector":
        k = self.customer_ids.index(customer_id)
        pv, qv = self.p.copy(), self.q.copy()
        if p is not None:
            pv[k] = p
        if q is not None:
            qv[k] = q
        return replace(self, p=pv, q=qv)

    def to_dict(self) -> dict:
        return {cid: {"p_kw": float(p), "q_kvar": float(q)} for cid, p, q in zip(self.customer_ids, self.p, self.q)}

    @classmethod
    def from_dict(cls, net: Network, data: dict) -> "InjectionVector":
        base = cls.fixed(net)
        p, q = base.p.copy(), base.q.copy()
        for cid, vals in data.items():
            k = base.customer_ids.index(cid)
            p[k] = float(vals.get("p_kw", p[k]))
            q[k] = float(vals.get("q_kvar", q[k]))
        return replace(base, p=p, q=q)


@dataclass
class PFSolution:
    """Converged state. ``v`` covers every node-phase, source first; ``l`` every line-phase."""

    labels: tuple[tuple[str, str], ...]
    v: np.ndarray
    l: np.ndarray
    iterations: int
    residual_norm: float
    x: np.ndarray = field(repr=False, default=None)


class PowerFlowSystem:
    """Residual/Jacobian assembly for one network, reusable across injections."""

    def __init__(self, net: Network):
        self.net = net
        src = net.bus(net.source_bus)
        if set(src.phases) != set(PHASES):
            raise PowerFlowError(f"source bus '{src.id}' must have three phases")

        order, parent_line, parent_bus = self._orient(net)
        self.source_labels = tuple((src.id, ph) for ph in PHASES)
        labels, line_ids, parent_idx, parent_phase = [], [], [], []
        index: dict[tuple[str, str], int] = {}
        for bid in order[1:]:
            bus = net.bus(bid)
            for ph in PHASES:
                if ph in bus.phases:
                    index[(bid, ph)] = len(labels)
                    labels.append((bid, ph))
                    line_ids.append(parent_line[bid].id)
        n = len(labels)
        self.n = n
        self.labels = tuple(labels)
        self.all_labels = self.source_labels + self.labels
        self.index = index
        self.line_ids = tuple(line_ids)
        ang = np.deg2rad(net.source_angle_deg)
        self.v_slack = net.source_voltage * np.exp(1j * (ang + np.deg2rad([0.0, -120.0, 120.0])))

        for bid, ph in labels:
            pb = parent_bus[bid]
            if pb == net.source_bus:
                parent_idx.append(-1)
            else:
                if (pb, ph) not in index:
                    raise PowerFlowError(f"bus '{bid}': phase {ph} not present at parent '{pb}'")
                parent_idx.append(index[(pb, ph)])
            parent_phase.append(PHASES.index(ph))
        self.parent = np.array(parent_idx, dtype=int)
        self.phase = np.array(parent_phase, dtype=int)

        has_parent = self.parent >= 0
        rows = np.flatnonzero(has_parent)
        self.P = sp.csr_matrix((np.ones(len(rows)), (rows, self.parent[has_parent])), shape=(n, n))
        self.vs = np.where(has_parent, 0.0, self.v_slack[self.phase])
        eye = sp.identity(n, format="csr")
        self.A = (self.P - eye).tocsr()  # drop: A V + vs - Z I
        self.N = (eye - self.P.T).tocsr()  # net load current J = N I

        zr, zc, zv = [], [], []
        by_line: dict[str, list[int]] = {}
        for k, lid in enumerate(line_ids):
            by_line.setdefault(lid, []).append(k)
        lines = {ln.id: ln for ln in net.lines}
        for lid, ks in by_line.items():
            z = lines[lid].z
            for a in ks:
                for b in ks:
                    zr.append(a)
                    zc.append(b)
                    zv.append(z[self.phase[a], self.phase[b]])
        Z = sp.csr_matrix((np.array(zv, dtype=complex), (zr, zc)), shape=(n, n))
        Z.sort_indices()
        self.Z = Z
        self._zr, self._zi = Z.real.tocsr(), Z.imag.tocsr()
        self._z_pattern = (np.array(zr), np.array(zc), np.array(zv, dtype=complex))

        crow, ccol, cval = [], [], []
        for j, c in enumerate(net.customers):
            for ph in c.phases:
                if (c.bus, ph) in index:
                    crow.append(index[(c.bus, ph)])
                    ccol.append(j)
                    cval.append(1.0 / len(c.phases))
        # customer totals (p.u.) -> per node-phase
        self.C = sp.csr_matrix((cval, (crow, ccol)), shape=(n, len(net.customers)))
        self._build_pattern()

    @staticmethod
    def _orient(net: Network):
        adj: dict[str, list] = {b.id: [] for b in net.buses}
        for ln in net.lines:
            adj[ln.from_bus].append(ln)
            adj[ln.to_bus].append(ln)
        parent_line, parent_bus = {}, {net.source_bus: None}
        order = [net.source_bus]
        queue = deque([net.source_bus])
        while queue:
            u = queue.popleft()
            for ln in adj[u]:
                v = ln.to_bus if ln.from_bus == u else ln.from_bus
                if v in parent_bus:
                    if parent_line.get(u) is not ln:
                        raise PowerFlowError(f"non-radial network: loop through line '{ln.id}'")
                    continue
                parent_bus[v] = u
                parent_line[v] = ln
                order.append(v)
                queue.append(v)
        missing = [b.id for b in net.buses if b.id not in parent_bus]
        if missing:
            raise PowerFlowError(f"disconnected bus '{missing[0]}': singular structural pattern")
        # keep document order among non-source buses for deterministic labelling
        pos = {b.id: i for i, b in enumerate(net.buses)}
        order = [net.source_bus] + sorted(order[1:], key=pos.__getitem__)
        return order, parent_line, parent_bus

    # ------------------------------------------------------------------
    # residual / Jacobian
    # ------------------------------------------------------------------

    @property
    def size(self) -> int:
        return 4 * self.n

    def loads(self, inj: InjectionVector) -> np.ndarray:
        """Consumed complex power (p.u.) per non-source node-phase."""
        sb = self.net.bases.power_kva
        return self.C @ (np.asarray(inj.p) / sb) + 1j * (self.C @ (np.asarray(inj.q) / sb))

    def flat_start(self) -> np.ndarray:
        v = self.v_slack[self.phase]
        return np.concatenate([v.real, v.imag, np.zeros(2 * self.n)])

    def split(self, x: np.ndarray):
        n = self.n
        return x[..., :n], x[..., n:2 * n], x[..., 2 * n:3 * n], x[..., 3 * n:]

    def residual(self, x: np.ndarray, s: np.ndarray) -> np.ndarray:
        """Residual of one state ``(4n,)`` or of a stack of states ``(M, 4n)`` row by row."""
        x, s = np.asarray(x), np.asarray(s)
        if x.ndim == 2:
            return self._residual_t(x.T, s.T).T
        return self._residual_t(x, s)

    def _residual_t(self, x, s):
        # x is (4n,) or (4n, M); matrix products act on the leading axis
        n = self.n
        vr, vi, ir, ii = x[:n], x[n:2 * n], x[2 * n:3 * n], x[3 * n:]
        R, X = self._zr, self._zi
        vs = self.vs if x.ndim == 1 else self.vs[:, None]
        jr, ji = self.N @ ir, self.N @ ii
        return np.concatenate([
            self.A @ vr + vs.real - (R @ ir - X @ ii),
            self.A @ vi + vs.imag - (R @ ii + X @ ir),
            vr * jr + vi * ji - s.real,
            vi * jr - vr * ji - s.imag,
        ])

    def _build_pattern(self):
        n = self.n
        a = self.A.tocoo()
        zr, zc, zv = self._z_pattern
        nn = self.N.tocoo()
        k = np.arange(n)
        const_rows = [a.row, n + a.row, zr, zr, n + zr, n + zr]
        const_cols = [a.col, n + a.col, 2 * n + zc, 3 * n + zc, 2 * n + zc, 3 * n + zc]
        const_vals = [a.data, a.data, -zv.real, zv.imag, -zv.imag, -zv.real]
        var_rows = [2 * n + k, 2 * n + k, 3 * n + k, 3 * n + k,
                    2 * n + nn.row, 2 * n + nn.row, 3 * n + nn.row, 3 * n + nn.row]
        var_cols = [k, n + k, k, n + k, 2 * n + nn.col, 3 * n + nn.col, 2 * n + nn.col, 3 * n + nn.col]
        self.jac_rows = np.concatenate(const_rows + var_rows)
        self.jac_cols = np.concatenate(const_cols + var_cols)
        self._jac_const = np.concatenate(const_vals)
        self._nn = nn
        self.jac_nnz = len(self.jac_rows)

    def jacobian_values(self, X: np.ndarray) -> np.ndarray:
        """Jacobian entries aligned with ``jac_rows``/``jac_cols``; ``X`` may be batched (M, 4n)."""
        X = np.atleast_2d(X)
        vr, vi, ir, ii = self.split(X)
        nn = self._nn
        jr = ir @ self.N.T
        ji = ii @ self.N.T
        vrn = vr[:, nn.row] * nn.data
        vin = vi[:, nn.row] * nn.data
        var = np.concatenate([jr, ji, -ji, jr, vrn, vin, vin, -vrn], axis=1)
        const = np.broadcast_to(self._jac_const, (X.shape[0], len(self._jac_const)))
        return np.concatenate([const, var], axis=1)

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        vals = self.jacobian_values(x)[0]
        return sp.csr_matrix((vals, (self.jac_rows, self.jac_cols)), shape=(self.size, self.size))

    def hessian_terms(self, lam_p: np.ndarray, lam_q: np.ndarray):
        """Lower+upper Hessian triplets of ``lam_p . balP + lam_q . balQ`` (batched multipliers (M, n))."""
        n = self.n
        nn = self._nn
        lp = np.atleast_2d(lam_p)[:, nn.row] * nn.data
        lq = np.atleast_2d(lam_q)[:, nn.row] * nn.data
        r = np.concatenate([nn.row, n + nn.row, n + nn.row, nn.row])
        c = np.concatenate([2 * n + nn.col, 3 * n + nn.col, 2 * n + nn.col, 3 * n + nn.col])
        v = np.concatenate([lp, lp, lq, -lq], axis=1)
        return np.concatenate([r, c]), np.concatenate([c, r]), np.concatenate([v, v], axis=1)

    # ------------------------------------------------------------------
    # solvers
    # ------------------------------------------------------------------

    def solve(self, inj: InjectionVector | np.ndarray, start: PFSolution | np.ndarray | None = None,
              tol: float = 1e-10, max_iter: int = 50) -> PFSolution:
        s = self.loads(inj) if isinstance(inj, InjectionVector) else np.asarray(inj, dtype=complex)
        if start is None:
            x = self.flat_start()
        else:
            x = np.array(start.x if isinstance(start, PFSolution) else start, dtype=float)
            if x.shape != (self.size,):
                raise PowerFlowError(f"warm start has {x.size} entries, expected {self.size}")
        res = np.inf
        for it in range(1, max_iter + 1):
            r = self.residual(x, s)
            res = float(np.max(np.abs(r))) if r.size else 0.0
            if not np.isfinite(res):
                break
            if res <= tol:
                return self._solution(x, it, res)
            J = self.jacobian(x)
            try:
                if self.size < DENSE_LIMIT:
                    with warnings.catch_warnings():
                        # an ill-conditioned step surfaces as non-convergence instead
                        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                        dx = scipy.linalg.solve(J.toarray(), -r)
                else:
                    dx = spla.spsolve(J.tocsc(), -r)
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
                raise SingularJacobian(f"singular power-flow Jacobian at iteration {it}") from exc
            if not np.all(np.isfinite(dx)):
                raise SingularJacobian(f"singular power-flow Jacobian at iteration {it}")
            x = x + dx
        raise NonConvergence(f"power flow did not converge in {max_iter} iterations (residual {res:.3e})",
                             residual_norm=res, iterations=max_iter)

    def _solution(self, x, iterations, res) -> PFSolution:
        vr, vi, ir, ii = self.split(x)
        v = np.concatenate([self.v_slack, vr + 1j * vi])
        return PFSolution(self.all_labels, v, ir + 1j * ii, iterations, res, x.copy())

    def transfer_matrices(self):
        """Dense ``(T, W)``: line currents ``T @ i_load`` and voltage drops ``W @ i_load``."""
        if getattr(self, "_transfer", None) is None:
            T = np.linalg.inv(self.N.toarray()) if self.n else np.zeros((0, 0))
            W = T.T @ self.Z.toarray() @ T
            self._transfer = (T, W)
        return self._transfer

    def solve_batch(self, S: np.ndarray, tol: float = 1e-11, max_iter: int = 100):
        """Fixed-point (Z-bus) power flow for many load vectors at once.

        ``S`` has shape (B, n). Returns ``(V, converged)`` with ``V`` (B, n)
        complex non-source voltages.
        """
        S = np.atleast_2d(np.asarray(S, dtype=complex))
        _, W = self.transfer_matrices()
        v0 = self.v_slack[self.phase]
        V = np.broadcast_to(v0, S.shape).copy()
        Wt = W.T
        active = np.ones(S.shape[0], dtype=bool)
        with np.errstate(all="ignore"):
            for _ in range(max_iter):
                idx = np.flatnonzero(active)
                if idx.size == 0:
                    break
                Vn = v0 - np.conj(S[idx] / V[idx]) @ Wt
                step = np.max(np.abs(Vn - V[idx]), axis=1) if self.n else np.zeros(idx.size)
                V[idx] = Vn
                done = step <= tol
                bad = ~np.isfinite(step) | (np.max(np.abs(Vn), axis=1, initial=0.0) > 10.0)
                active[idx[done | bad]] = False
                V[idx[bad]] = np.nan
        converged = np.all(np.isfinite(V), axis=1) & ~active
        return V, converged

    def state_from_voltages(self, V: np.ndarray, s: np.ndarray) -> np.ndarray:
        """Rebuild the full unknown vector from non-source voltages and loads."""
        T, _ = self.transfer_matrices()
        i_line = T @ np.conj(s / V)
        return np.concatenate([V.real, V.imag, i_line.real, i_line.imag])


def solve_power_flow(sys: PowerFlowSystem, inj: InjectionVector, start: PFSolution | None = None,
                     tol: float = 1e-10, max_iter: int = 50) -> PFSolution:
    return sys.solve(inj, start=start, tol=tol, max_iter=max_iter)


def assemble_system(net: Network) -> PowerFlowSystem:
    return PowerFlowSystem(net)


def voltage_magnitudes(sol: PFSolution) -> dict[tuple[str, str], float]:
    return {lab: float(u) for lab, u in zip(sol.labels, np.abs(sol.v))}


def write_solution_csv(sol: PFSolution, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bus", "phase", "v_pu", "angle_deg"])
        for (bus, ph), v in zip(sol.labels, sol.v):
            w.writerow([bus, ph, f"{abs(v):.10f}", f"{np.degrees(np.angle(v)):.6f}"])
