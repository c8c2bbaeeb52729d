"""Multi-scenario robust envelope NLP.

Decision vector (all powers in p.u. of the per-phase power base)::

    x = [p_plus (K), p_minus (K), q (nq), X^0 (4n), ..., X^(M-1) (4n)]

where ``X^m`` is the power-flow state of worst-case scenario ``m`` whose DOE
injections are ``p_plus`` where the scenario row is +1 and ``p_minus`` where
it is -1. ``q`` is one reactive setpoint per controllable DOE customer,
shared by every scenario.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.optimize
import scipy.sparse as sp

from . import objectives
from .exceptions import DomainError, RDOEError
from .ipm import InteriorPointSolver, SolverOptions
from .network import Network
from .objectives import DP_FLOOR, ObjectiveSpec
from .powerflow import InjectionVector, PowerFlowSystem
from .sensitivity import DEFAULT_DELTA_W, DEFAULT_EPS, ScenarioMatrix, filter_scenarios

log = logging.getLogger(__name__)

ENVELOPE_FORMAT = 1
TIER_RESOLVE_RATIO = 1e-3
TIER_MARGIN_KW = 1e-7


@dataclass
class Envelope:
    """Per-customer active-power ranges (kW) and reactive setpoints (kvar)."""

    network: str
    customers: tuple[str, ...]
    p_minus_kw: np.ndarray
    p_plus_kw: np.ndarray
    q_kvar: np.ndarray
    objective: str = ""
    optimize_q: bool = False
    stats: dict = field(default_factory=dict)
    states: np.ndarray | None = field(default=None, repr=False)

    @property
    def widths_kw(self) -> np.ndarray:
        return self.p_plus_kw - self.p_minus_kw

    @property
    def aggregate_kw(self) -> float:
        return float(np.sum(self.widths_kw))

    def to_dict(self, timestamp: bool = True) -> dict:
        d = {
            "format_version": ENVELOPE_FORMAT,
            "kind": "envelope",
            "network": self.network,
            "objective": self.objective,
            "optimize_q": self.optimize_q,
            "aggregate_kw": self.aggregate_kw,
            "customers": [
                {"id": cid, "p_minus_kw": float(lo), "p_plus_kw": float(hi), "q_kvar": float(q)}
                for cid, lo, hi, q in zip(self.customers, self.p_minus_kw, self.p_plus_kw, self.q_kvar)
            ],
            "stats": {k: v for k, v in self.stats.items() if timestamp or k not in ("seconds",)},
        }
        if timestamp:
            d["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Envelope":
        if d.get("kind") != "envelope" or d.get("format_version") != ENVELOPE_FORMAT:
            raise RDOEError("not an envelope document (format_version 1)")
        cs = d["customers"]
        return cls(
            network=d.get("network", ""),
            customers=tuple(c["id"] for c in cs),
            p_minus_kw=np.array([c["p_minus_kw"] for c in cs], dtype=float),
            p_plus_kw=np.array([c["p_plus_kw"] for c in cs], dtype=float),
            q_kvar=np.array([c.get("q_kvar", 0.0) for c in cs], dtype=float),
            objective=d.get("objective", ""),
            optimize_q=bool(d.get("optimize_q", False)),
            stats=dict(d.get("stats", {})),
        )

    def save(self, path: str | Path, timestamp: bool = True) -> None:
        Path(path).write_text(json.dumps(self.to_dict(timestamp), indent=1) + "\n")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["customer", "p_minus_kw", "p_plus_kw", "width_kw", "q_kvar"])
            for cid, lo, hi, q in zip(self.customers, self.p_minus_kw, self.p_plus_kw, self.q_kvar):
                w.writerow([cid, repr(float(lo)), repr(float(hi)), repr(float(hi - lo)), repr(float(q))])

    @classmethod
    def load(cls, path: str | Path) -> "Envelope":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise RDOEError(f"cannot read envelope {path}: {exc.strerror}") from exc
        except (KeyError, json.JSONDecodeError) as exc:
            raise RDOEError(f"malformed envelope {path}: {exc}") from exc

    def scaled(self, factor: float) -> "Envelope":
        """Envelope with every range stretched about its midpoint by ``factor``."""
        mid = 0.5 * (self.p_plus_kw + self.p_minus_kw)
        half = 0.5 * self.widths_kw * factor
        return Envelope(self.network, self.customers, mid - half, mid + half, self.q_kvar.copy(),
                        self.objective, self.optimize_q, dict(self.stats))


def flag_snap(flags, p_plus, p_minus):
    """Project bounds onto the flag equalities (exact zeros / exact symmetry)."""
    pp, pm = np.array(p_plus, dtype=float), np.array(p_minus, dtype=float)
    for k, fl in enumerate(flags):
        if fl == (1, 0):
            pp[k] = 0.0
        elif fl == (0, 1):
            pm[k] = 0.0
        else:
            half = 0.5 * (pp[k] - pm[k])
            pp[k], pm[k] = half, -half
    return pp, pm


class NLPProblem:
    """Robust envelope NLP in the callback form used by :class:`InteriorPointSolver`."""

    def __init__(self, net: Network, hbar: ScenarioMatrix, spec: ObjectiveSpec, optimize_q: bool = False,
                 system: PowerFlowSystem | None = None, min_widths_kw=None):
        doe = net.doe_customers
        if not doe:
            raise RDOEError("network has no DOE customers")
        if hbar.H.ndim != 2 or hbar.H.shape[1] != len(doe) or tuple(hbar.customers) != tuple(c.id for c in doe):
            raise RDOEError(f"scenario matrix columns {hbar.customers} do not match DOE customers")
        if hbar.count == 0:
            raise RDOEError("empty scenario matrix")
        self.net = net
        self.hbar = hbar
        self.pf = system or PowerFlowSystem(net)
        self.doe = doe
        self.K = K = len(doe)
        self.M = M = hbar.count
        self.optimize_q = optimize_q
        self.sb = sb = net.bases.power_kva
        self.flags = [c.flags for c in doe]
        self.q_owner = [k for k, c in enumerate(doe) if optimize_q and c.q_controllable]
        self.nq = nq = len(self.q_owner)
        n = self.n = self.pf.n
        self.ns = 4 * n
        self.so = 2 * K + nq
        self.nx = self.so + M * self.ns

        lo = np.array([c.p_box[0] for c in doe])
        hi = np.array([c.p_box[1] for c in doe])
        self.p_lo, self.p_hi = lo, hi
        self.q_lo = np.array([doe[k].q_box[0] for k in self.q_owner])
        self.q_hi = np.array([doe[k].q_box[1] for k in self.q_owner])
        self.spec = spec.resolved((hi - lo) * sb)
        # per-customer lower bound on p_plus - p_minus (p.u.)
        self.floor = np.full(K, (DP_FLOOR if self.spec.needs_log else 0.0) / sb)
        if min_widths_kw is not None:
            self.floor = np.maximum(self.floor, np.asarray(min_widths_kw, dtype=float) / sb)

        cust_pos = {c.id: j for j, c in enumerate(net.customers)}
        Cfull = self.pf.C.tocsc()
        self.C_doe = Cfull[:, [cust_pos[c.id] for c in doe]].tocoo()
        self._Cd = self.C_doe.tocsr()
        Cq = Cfull[:, [cust_pos[doe[k].id] for k in self.q_owner]].tocoo() if nq else sp.coo_matrix((n, 0))
        fixed = InjectionVector.fixed(net)
        self.s_fixed = self.pf.loads(fixed)
        self.Hp = (hbar.H > 0).astype(float)
        self.Hm = (hbar.H < 0).astype(float)

        # constant equality-Jacobian entries (power injections and flag rows)
        ci, ck, cv = self.C_doe.row, self.C_doe.col, self.C_doe.data
        rows, cols, vals = [], [], []
        for m in range(M):
            r0 = m * self.ns
            rows += [r0 + 2 * n + ci, r0 + 2 * n + ci]
            cols += [ck, K + ck]
            vals += [-cv * self.Hp[m, ck], -cv * self.Hm[m, ck]]
            if nq:
                rows.append(r0 + 3 * n + Cq.row)
                cols.append(2 * K + Cq.col)
                vals.append(-Cq.data)
        fr, fc, fv = [], [], []
        for k, fl in enumerate(self.flags):
            r = M * self.ns + k
            if fl[0]:
                fr.append(r), fc.append(k), fv.append(1.0)
            if fl[1]:
                fr.append(r), fc.append(K + k), fv.append(1.0)
        self.mc = M * self.ns + K
        self._jc_const = (np.concatenate(rows + [np.array(fr, dtype=int)]),
                          np.concatenate(cols + [np.array(fc, dtype=int)]),
                          np.concatenate(vals + [np.array(fv)]))
        st = self.so + np.arange(M)[:, None] * self.ns
        self._jc_state_rows = (np.arange(M)[:, None] * self.ns + self.pf.jac_rows).ravel()
        self._jc_state_cols = (st + self.pf.jac_cols).ravel()

        # inequality layout: [u2 - vmin2 (M n), vmax2 - u2 (M n), linear rows]
        self.v2min, self.v2max = net.v_min**2, net.v_max**2
        lin_r, lin_c, lin_v, lin_b = [], [], [], []
        row = 0

        def add(col, coef, bound):
            nonlocal row
            lin_r.append(row), lin_c.append(col), lin_v.append(coef), lin_b.append(bound)
            row += 1

        for k in range(K):
            add(k, 1.0, lo[k]), add(k, -1.0, -hi[k])
        for k in range(K):
            add(K + k, 1.0, lo[k]), add(K + k, -1.0, -hi[k])
        for j in range(nq):
            add(2 * K + j, 1.0, self.q_lo[j]), add(2 * K + j, -1.0, -self.q_hi[j])
        width_rows = []
        for k in range(K):
            lin_r += [row, row]
            lin_c += [k, K + k]
            lin_v += [1.0, -1.0]
            lin_b.append(self.floor[k])
            width_rows.append(row)
            row += 1
        self.n_lin = row
        self._lin = sp.csr_matrix((lin_v, (lin_r, lin_c)), shape=(row, self.nx))
        self._lin_b = np.array(lin_b)
        self.mg = 2 * M * n + row
        vidx = self.so + np.arange(M)[:, None] * self.ns + np.arange(n)
        self._v_r = vidx.ravel()
        self._v_i = (vidx + n).ravel()

        # Hessian pattern of the bilinear balance terms
        hr, hc, _ = self.pf.hessian_terms(np.zeros((1, n)), np.zeros((1, n)))
        self._h_rows = (st + hr).ravel()
        self._h_cols = (st + hc).ravel()

        self.x0 = self.initial_point()

    # -- layout helpers --------------------------------------------------

    def unpack(self, x):
        K, nq = self.K, self.nq
        return x[:K], x[K:2 * K], x[2 * K:2 * K + nq], x[self.so:].reshape(self.M, self.ns)

    def scenario_loads(self, pp, pm, q) -> np.ndarray:
        """(M, n) complex consumed power per scenario."""
        pm_s = self.Hp * pp + self.Hm * pm  # (M, K) per-customer totals
        Cd = self._Cd
        s = self.s_fixed[None, :] + (Cd @ pm_s.T).T
        if self.nq:
            qfull = np.zeros(self.K)
            qfull[self.q_owner] = q
            s = s + 1j * (Cd @ qfull)[None, :]
        return s

    def initial_point(self) -> np.ndarray:
        K = self.K
        pp = np.minimum(1.0 / self.sb, self.p_hi)
        pm = -np.minimum(1.0 / self.sb, -self.p_lo)
        for k, fl in enumerate(self.flags):
            if fl == (1, 0):
                pp[k] = 0.0
            elif fl == (0, 1):
                pm[k] = 0.0
            else:
                w = min(pp[k], -pm[k])
                pp[k], pm[k] = w, -w
        sol = self.pf.solve(self.s_fixed)
        x = np.zeros(self.nx)
        x[:K], x[K:2 * K] = pp, pm
        x[self.so:] = np.tile(sol.x, self.M)
        return x

    # -- callbacks -------------------------------------------------------

    def dp_kw(self, x):
        return self.sb * (x[:self.K] - x[self.K:2 * self.K])

    def objective(self, x) -> float:
        dp = self.dp_kw(x)
        if self.spec.needs_log and np.any(dp <= 0):
            raise DomainError("non-positive width inside a log objective")
        return objectives.solver_form(self.spec, dp)[0]

    def gradient(self, x) -> np.ndarray:
        _, g, _ = objectives.solver_form(self.spec, self.dp_kw(x))
        out = np.zeros(self.nx)
        out[:self.K] = self.sb * g
        out[self.K:2 * self.K] = -self.sb * g
        return out

    def constraints(self, x) -> np.ndarray:
        pp, pm, q, X = self.unpack(x)
        S = self.scenario_loads(pp, pm, q)
        flag = np.array([fl[0] * pp[k] + fl[1] * pm[k] for k, fl in enumerate(self.flags)])
        return np.concatenate([self.pf.residual(X, S).ravel(), flag])

    def jacobian(self, x) -> sp.csr_matrix:
        _, _, _, X = self.unpack(x)
        vals = self.pf.jacobian_values(X).ravel()
        r, c, v = self._jc_const
        return sp.csr_matrix((np.concatenate([v, vals]),
                              (np.concatenate([r, self._jc_state_rows]), np.concatenate([c, self._jc_state_cols]))),
                             shape=(self.mc, self.nx))

    def voltage_squares(self, x) -> np.ndarray:
        vr, vi = x[self._v_r], x[self._v_i]
        return vr * vr + vi * vi

    def inequalities(self, x) -> np.ndarray:
        u2 = self.voltage_squares(x)
        return np.concatenate([u2 - self.v2min, self.v2max - u2, self._lin @ x - self._lin_b])

    def ineq_jacobian(self, x) -> sp.csr_matrix:
        vr, vi = x[self._v_r], x[self._v_i]
        mn = len(vr)
        r = np.arange(mn)
        rows = np.concatenate([r, r, mn + r, mn + r])
        cols = np.concatenate([self._v_r, self._v_i, self._v_r, self._v_i])
        vals = np.concatenate([2 * vr, 2 * vi, -2 * vr, -2 * vi])
        volt = sp.csr_matrix((vals, (rows, cols)), shape=(2 * mn, self.nx))
        return sp.vstack([volt, self._lin], format="csr")

    def hessian(self, x, obj_factor, y, z) -> sp.csr_matrix:
        K, n, M = self.K, self.n, self.M
        _, _, Hd = objectives.solver_form(self.spec, self.dp_kw(x))
        Ho = obj_factor * self.sb**2 * np.block([[Hd, -Hd], [-Hd, Hd]])
        oi, oj = np.meshgrid(np.arange(2 * K), np.arange(2 * K), indexing="ij")
        lam = y[:M * self.ns].reshape(M, self.ns)
        _, _, hv = self.pf.hessian_terms(lam[:, 2 * n:3 * n], lam[:, 3 * n:])
        mn = M * n
        zd = 2.0 * (z[mn:2 * mn] - z[:mn])
        rows = np.concatenate([oi.ravel(), self._h_rows, self._v_r, self._v_i])
        cols = np.concatenate([oj.ravel(), self._h_cols, self._v_r, self._v_i])
        vals = np.concatenate([Ho.ravel(), hv.ravel(), zd, zd])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.nx, self.nx))

    # -- results ---------------------------------------------------------

    def envelope(self, x, stats=None) -> Envelope:
        pp, pm, q, X = self.unpack(x)
        pp_kw, pm_kw = flag_snap(self.flags, pp * self.sb, pm * self.sb)
        qk = np.zeros(self.K)
        qk[self.q_owner] = q * self.sb
        return Envelope(self.net.name, tuple(c.id for c in self.doe), pm_kw, pp_kw, qk,
                        objective=self.spec.strategy, optimize_q=self.optimize_q,
                        stats=dict(stats or {}), states=X.copy())


def build_nlp(net: Network, hbar: ScenarioMatrix, spec: ObjectiveSpec, optimize_q: bool = False,
              system: PowerFlowSystem | None = None) -> NLPProblem:
    return NLPProblem(net, hbar, spec, optimize_q, system)


def solve_nlp(prob: NLPProblem, opts: SolverOptions | None = None) -> Envelope:
    """Interior-point solve; returns the envelope at the KKT point found."""
    t0 = time.perf_counter()
    res = InteriorPointSolver(prob, opts).solve()
    stats = {
        "status": res.status,
        "iterations": res.iterations,
        "kkt_error": res.kkt["scaled"],
        "primal_infeasibility": res.kkt["primal"],
        "scenarios": prob.M,
        "seconds": time.perf_counter() - t0,
    }
    env = prob.envelope(res.x, stats)
    env.stats["aggregate_kw"] = env.aggregate_kw
    prob.last_result = res
    return env


def alpha_fair_tiers(net: Network, hbar: ScenarioMatrix, spec: ObjectiveSpec, optimize_q: bool = False,
                     system: PowerFlowSystem | None = None, opts: SolverOptions | None = None,
                     resolve_ratio: float = TIER_RESOLVE_RATIO, margin_kw: float = TIER_MARGIN_KW) -> Envelope:
    """Solve alpha_fair in tiers of comparable objective weight.

    With a large alpha the gradient weight of a customer far from the
    bottleneck falls below double precision relative to the bottleneck, so a
    single interior-point solve leaves such widths wherever the barrier put
    them. The weights of the exact optimum separate into tiers, and the
    optimum is reached lexicographically: customers whose weight is within
    ``resolve_ratio`` of the largest are settled first and kept at least at
    their widths, then the alpha_fair sum over the remaining customers is
    maximised, and so on.
    """
    prob = NLPProblem(net, hbar, spec, optimize_q, system)
    env = solve_nlp(prob, opts)
    spec = prob.spec  # gamma resolved
    K = prob.K
    floors = np.zeros(K)
    pending = np.arange(K)
    iterations, stages = env.stats["iterations"], 1
    while True:
        _, g, _ = objectives.solver_form(replace(spec, members=tuple(pending.tolist())), env.widths_kw)
        w = np.abs(g[pending])
        settled = pending[w >= resolve_ratio * w.max()]
        floors[settled] = np.maximum(env.widths_kw[settled] - margin_kw, 0.0)
        pending = np.setdiff1d(pending, settled)
        if pending.size == 0:
            break
        tier = replace(spec, members=tuple(pending.tolist()))
        env = solve_nlp(NLPProblem(net, hbar, tier, optimize_q, system, min_widths_kw=floors), opts)
        iterations += env.stats["iterations"]
        stages += 1
    env.objective = "alpha_fair"
    env.stats["iterations"] = iterations
    env.stats["tiers"] = stages
    return env


class RDOEEngine:
    """Filter once, then solve the envelope NLP for any objective."""

    def __init__(self, net: Network, hbar: ScenarioMatrix | None = None, optimize_q: bool = False,
                 options: SolverOptions | None = None, eps: float = DEFAULT_EPS,
                 delta_w: float = DEFAULT_DELTA_W, base: InjectionVector | None = None, threads: int | None = None,
                 tiered: bool = True):
        self.net = net
        self.pf = PowerFlowSystem(net)
        if hbar is None:
            _, _, hbar = filter_scenarios(net, eps=eps, delta_w=delta_w, base=base, system=self.pf, threads=threads)
        self.hbar = hbar
        self.optimize_q = optimize_q
        self.options = options or SolverOptions()
        self.threads = threads
        self.tiered = tiered
        self._dp_ind = None

    @property
    def customers(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.net.doe_customers)

    def customer_index(self, cid: str) -> int:
        return self.customers.index(cid)

    def problem(self, spec: ObjectiveSpec) -> NLPProblem:
        return NLPProblem(self.net, self.hbar, spec, self.optimize_q, self.pf)

    def solve(self, spec: ObjectiveSpec | str) -> Envelope:
        if isinstance(spec, str):
            spec = ObjectiveSpec(spec)
        if spec.strategy == "permax_fair" and spec.dp_ind is None:
            spec = ObjectiveSpec("permax_fair", dp_ind=tuple(self.individual_maxima()))
        if spec.strategy == "alpha_fair" and self.tiered and spec.members is None:
            return alpha_fair_tiers(self.net, self.hbar, spec, self.optimize_q, self.pf, self.options)
        return solve_nlp(self.problem(spec), self.options)

    def individual_maxima(self) -> np.ndarray:
        """maxPRDOE of every DOE customer (cached)."""
        if self._dp_ind is None:
            K = len(self.customers)
            workers = min(K, self.threads or os.cpu_count() or 1)
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    vals = list(pool.map(lambda k: objectives.max_individual_rdoe(self, k), range(K)))
            else:
                vals = [objectives.max_individual_rdoe(self, k) for k in range(K)]
            self._dp_ind = np.array(vals)
        return self._dp_ind


# ---------------------------------------------------------------------------
# KKT verification (reduced space, finite differences of power flows)
# ---------------------------------------------------------------------------


@dataclass
class KKTReport:
    stationarity: float
    primal_infeasibility: float
    dual_infeasibility: float
    complementarity: float
    active: list = field(default_factory=list)
    multipliers: dict = field(default_factory=dict)

    @property
    def max_violation(self) -> float:
        return max(self.stationarity, self.primal_infeasibility, self.dual_infeasibility, self.complementarity)

    def ok(self, tol: float = 1e-6) -> bool:
        return self.max_violation <= tol


def verify_kkt(prob: NLPProblem, env: Envelope, active_tol: float = 1e-5, fd_step_kw: float = 1e-3) -> KKTReport:
    """Check first-order optimality of ``env`` without using solver internals.

    States are recomputed by fresh power flows at every scenario vertex and
    constraint gradients by central differences of those power flows. The
    decision vector is ``(p_plus, p_minus[, q])`` in kW/kvar; multipliers
    for the active constraints come from a non-negative least-squares fit of
    the stationarity condition.
    """
    K, sb = prob.K, prob.sb
    qidx = prob.q_owner
    d0 = np.concatenate([env.p_plus_kw, env.p_minus_kw, env.q_kvar[qidx]])
    nd = d0.size
    spec = prob.spec

    def voltages2(ds):
        ds = np.atleast_2d(ds)
        S = np.stack([prob.scenario_loads(d[:K] / sb, d[K:2 * K] / sb, d[2 * K:] / sb) for d in ds])
        flat = S.reshape(-1, prob.n)
        V, ok = prob.pf.solve_batch(flat, tol=1e-14, max_iter=400)
        if not np.all(ok):
            for i in np.flatnonzero(~ok):
                sol = prob.pf.solve(flat[i], tol=1e-13)
                V[i] = sol.v[3:]
        return (np.abs(V) ** 2).reshape(len(ds), -1)

    u2 = voltages2(d0)[0]
    lo_v = u2 - prob.v2min
    hi_v = prob.v2max - u2
    lin_vals, lin_grads, lin_names = [], [], []
    for k in range(K):
        for off, name in ((0, "p_plus"), (K, "p_minus")):
            e = np.zeros(nd)
            e[off + k] = 1.0
            lin_vals += [d0[off + k] - prob.p_lo[k] * sb, prob.p_hi[k] * sb - d0[off + k]]
            lin_grads += [e, -e]
            lin_names += [(name, k, "lower"), (name, k, "upper")]
    for j in range(len(qidx)):
        e = np.zeros(nd)
        e[2 * K + j] = 1.0
        lin_vals += [d0[2 * K + j] - prob.q_lo[j] * sb, prob.q_hi[j] * sb - d0[2 * K + j]]
        lin_grads += [e, -e]
        lin_names += [("q", j, "lower"), ("q", j, "upper")]
    for k in range(K):
        e = np.zeros(nd)
        e[k], e[K + k] = 1.0, -1.0
        lin_vals.append(d0[k] - d0[K + k] - prob.floor[k] * sb)
        lin_grads.append(e)
        lin_names.append(("width", k, "lower"))
    lin_vals = np.array(lin_vals)

    eq_vals, eq_grads = [], []
    for k, fl in enumerate(prob.flags):
        e = np.zeros(nd)
        e[k], e[K + k] = fl[0], fl[1]
        eq_vals.append(e @ d0)
        eq_grads.append(e)
    eq_vals = np.array(eq_vals)

    primal = max(0.0, -lo_v.min(initial=np.inf), -hi_v.min(initial=np.inf), -lin_vals.min(initial=np.inf),
                 float(np.max(np.abs(eq_vals), initial=0.0)))

    act_v_lo = np.flatnonzero(lo_v <= active_tol)
    act_v_hi = np.flatnonzero(hi_v <= active_tol)
    act_lin = np.flatnonzero(lin_vals <= active_tol * max(1.0, sb))

    grads = []
    if act_v_lo.size or act_v_hi.size:
        h = fd_step_kw
        pts = np.concatenate([d0 + h * np.eye(nd), d0 - h * np.eye(nd)])
        U = voltages2(pts)
        dU = (U[:nd] - U[nd:]) / (2 * h)  # (nd, M n)
        grads += [dU[:, i] for i in act_v_lo] + [-dU[:, i] for i in act_v_hi]
    grads += [lin_grads[i] for i in act_lin]
    G = np.array(grads).T if grads else np.zeros((nd, 0))
    A = np.array(eq_grads).T

    dp = d0[:K] - d0[K:2 * K]
    try:
        _, gF, _ = objectives.solver_form(spec, dp)
    except DomainError:
        return KKTReport(np.inf, primal, 0.0, 0.0)
    gradF = np.concatenate([gF, -gF, np.zeros(nd - 2 * K)])
    # stationarity: gradF - G z - A y = 0 with z >= 0, y free
    B = np.hstack([G, A, -A])
    if B.shape[1]:
        coef, _ = scipy.optimize.nnls(B, gradF, maxiter=50 * B.shape[1])
        resid = gradF - B @ coef
    else:
        coef, resid = np.zeros(0), gradF
    scale = max(1.0, float(np.max(np.abs(gradF), initial=0.0)))
    zact = coef[:G.shape[1]]
    act_vals = np.concatenate([lo_v[act_v_lo], hi_v[act_v_hi], lin_vals[act_lin]])
    compl = float(np.max(np.abs(zact * act_vals), initial=0.0))
    M, n = prob.M, prob.n
    labels = [("v_min", divmod(int(i), n)) for i in act_v_lo] + [("v_max", divmod(int(i), n)) for i in act_v_hi] \
        + [lin_names[i] for i in act_lin]
    return KKTReport(
        stationarity=float(np.max(np.abs(resid), initial=0.0)) / scale,
        primal_infeasibility=float(primal),
        dual_infeasibility=float(max(0.0, -zact.min(initial=0.0))),
        complementarity=compl,
        active=labels,
        multipliers={"inequality": zact, "equality": coef[G.shape[1]:G.shape[1] + A.shape[1]]
                     - coef[G.shape[1] + A.shape[1]:]},
    )

