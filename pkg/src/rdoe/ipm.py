"""Primal-dual interior-point method for sparse nonlinear programs.

Solves::

    min f(x)   s.t.   c(x) = 0,   g(x) >= 0

by introducing slacks ``g(x) - s = 0, s > 0`` and following the central path
of the log-barrier subproblems. Each iteration solves the condensed Newton
system::

    [ W + Jg' S^-1 Z Jg + dw I    Jc' ] [dx]   [ -(grad f + Jc' y) - Jg'(S^-1 Z (g - s) - mu/s) ]
    [ Jc                        -dc I ] [dy] = [ -c                                                ]

with ``W`` the Hessian of ``f + y'c - z'g``. Steps are limited by the
fraction-to-boundary rule and accepted by backtracking on an l1 merit
function, with one second-order correction per iteration.

Problems implement ``x0``, ``objective``, ``gradient``, ``constraints``,
``jacobian``, ``inequalities``, ``ineq_jacobian`` and
``hessian(x, obj_factor, y, z)``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import DomainError, MaxIterations, RestorationFailure

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-6  # scaled KKT error
    constr_tol: float = 1e-8  # primal feasibility, problem units
    max_iter: int = 300
    mu0: float = 0.1
    tau: float = 0.995
    kappa_mu: float = 0.2
    theta_mu: float = 1.5
    kappa_eps: float = 10.0
    merit_rho: float = 0.1
    armijo: float = 1e-4
    slack_push: float = 1e-2
    verbose: bool = False


@dataclass
class IPMResult:
    x: np.ndarray
    s: np.ndarray
    y: np.ndarray
    z: np.ndarray
    iterations: int
    status: str
    kkt: dict = field(default_factory=dict)
    mu: float = 0.0
    seconds: float = 0.0
    obj_scale: float = 1.0


def _norm_inf(v) -> float:
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


class InteriorPointSolver:
    S_MAX = 100.0

    def __init__(self, problem, options: SolverOptions | None = None):
        self.p = problem
        self.o = options or SolverOptions()
        self._dw_last = 0.0

    # -- helpers ---------------------------------------------------------

    def _f(self, x):
        return self.sf * self.p.objective(x)

    def _merit(self, x, s, mu, nu):
        if np.any(s <= 0):
            return np.inf
        try:
            f = self._f(x)
        except DomainError:
            return np.inf
        if not np.isfinite(f):
            return np.inf
        c = self.p.constraints(x)
        g = self.p.inequalities(x)
        return f - mu * np.sum(np.log(s)) + nu * (np.sum(np.abs(c)) + np.sum(np.abs(g - s)))

    def errors(self, x, s, y, z, mu, grad=None, c=None, g=None, Jc=None, Jg=None):
        p = self.p
        grad = self.sf * p.gradient(x) if grad is None else grad
        c = p.constraints(x) if c is None else c
        g = p.inequalities(x) if g is None else g
        Jc = p.jacobian(x) if Jc is None else Jc
        Jg = p.ineq_jacobian(x) if Jg is None else Jg
        mc, mg = len(c), len(g)
        sd = max(self.S_MAX, (np.sum(np.abs(y)) + np.sum(np.abs(z))) / max(1, mc + mg)) / self.S_MAX
        sc = max(self.S_MAX, np.sum(np.abs(z)) / max(1, mg)) / self.S_MAX
        dual = _norm_inf(grad + Jc.T @ y - Jg.T @ z)
        primal = max(_norm_inf(c), _norm_inf(g - s))
        compl = _norm_inf(s * z - mu)
        return {
            "stationarity": dual,
            "primal": primal,
            "complementarity": compl,
            "scaled": max(dual / sd, primal, compl / sc),
            "equality_violation": _norm_inf(c),
            "inequality_violation": float(max(0.0, -np.min(g))) if mg else 0.0,
        }

    def _factor(self, H, Jc, dw, dc):
        n, mc = H.shape[0], Jc.shape[0]
        K = sp.bmat([[H + dw * sp.identity(n), Jc.T], [Jc, -dc * sp.identity(mc) if mc else None]],
                    format="csc")
        return spla.splu(K, permc_spec="COLAMD", options={"SymmetricMode": False})

    def _solve_newton(self, W, Jc, Jg, sigma, rhs_x, rhs_y, mu):
        """Factor with inertia-free curvature regularisation; returns (lu, dx, dy, dw, dc)."""
        H = (W + Jg.T @ sp.diags(sigma) @ Jg).tocsr()
        n = H.shape[0]
        dw, dc = 0.0, 0.0
        for attempt in range(60):
            try:
                lu = self._factor(H, Jc, dw, dc)
                sol = lu.solve(np.concatenate([rhs_x, rhs_y]))
            except RuntimeError:
                lu, sol = None, None
            if sol is None or not np.all(np.isfinite(sol)):
                if dc == 0.0:
                    dc = 1e-8 * mu**0.25
                dw = max(1e-4, self._dw_last / 3) if dw == 0.0 else dw * 8
                continue
            dx, dy = sol[:n], sol[n:]
            curv = dx @ (H @ dx) + dw * (dx @ dx)
            if curv >= 1e-12 * (dx @ dx) or _norm_inf(dx) < 1e-14:
                if dw > 0:
                    self._dw_last = dw
                return lu, dx, dy, dw, dc, H
            dw = max(1e-4, self._dw_last / 3) if dw == 0.0 else (dw * 100 if self._dw_last == 0 else dw * 8)
        raise RestorationFailure("could not regularise the KKT matrix")

    # -- main loop -------------------------------------------------------

    def solve(self) -> IPMResult:
        t0 = time.perf_counter()
        p, o = self.p, self.o
        x = np.array(p.x0, dtype=float)
        g0 = p.inequalities(x)
        grad0 = p.gradient(x)
        self.sf = min(1.0, 100.0 / max(1.0, _norm_inf(grad0)))
        s = np.maximum(g0, o.slack_push * np.maximum(1.0, np.abs(g0)))
        mu = o.mu0
        z = mu / s
        y = np.zeros(len(p.constraints(x)))
        nu = 1.0
        status = "max_iter"
        it = 0
        errs = {}
        for it in range(o.max_iter + 1):
            grad = self.sf * p.gradient(x)
            c = p.constraints(x)
            g = p.inequalities(x)
            Jc = p.jacobian(x)
            Jg = p.ineq_jacobian(x)
            errs = self.errors(x, s, y, z, 0.0, grad, c, g, Jc, Jg)
            if o.verbose:
                log.info("it %3d  f=% .8e  dual=%.2e  primal=%.2e  compl=%.2e  mu=%.1e",
                         it, self._f(x), errs["stationarity"], errs["primal"], errs["complementarity"], mu)
            if (errs["scaled"] <= o.tol and errs["equality_violation"] <= o.constr_tol
                    and errs["primal"] <= o.constr_tol):
                status = "optimal"
                break
            if it == o.max_iter:
                break
            # barrier update
            while True:
                e_mu = self.errors(x, s, y, z, mu, grad, c, g, Jc, Jg)["scaled"]
                if e_mu > o.kappa_eps * mu or mu <= o.tol / 10:
                    break
                mu = max(o.tol / 10, min(o.kappa_mu * mu, mu**o.theta_mu))

            sigma = z / s
            W = p.hessian(x, self.sf, y, z)
            rhs_x = -(grad + Jc.T @ y) - Jg.T @ (sigma * (g - s) - mu / s)
            lu, dx, dy, dw, dc, H = self._solve_newton(W, Jc, Jg, sigma, rhs_x, -c, mu)
            ds = Jg @ dx + (g - s)
            dz = -sigma * (Jg @ dx) - sigma * (g - s) + mu / s - z

            a_p = self._max_step(s, ds)
            a_z = self._max_step(z, dz)

            infeas = np.sum(np.abs(c)) + np.sum(np.abs(g - s))
            dphi = grad @ dx - mu * np.sum(ds / s)
            if infeas > 0:
                curv = max(0.0, dx @ (H @ dx) + dw * (dx @ dx))
                nu_req = (dphi + 0.5 * curv) / ((1 - o.merit_rho) * infeas)
                # raise nu when the step needs it; let it relax slowly otherwise so that an
                # early spike does not lock the line search into tiny steps
                nu = nu_req + 1.0 if nu < nu_req else max(nu_req + 1.0, 0.5 * nu)
            D = dphi - nu * infeas
            phi0 = self._merit(x, s, mu, nu)

            alpha = a_p
            accepted = False
            soc_tried = False
            while alpha > 1e-14:
                xt, st = x + alpha * dx, s + alpha * ds
                phit = self._merit(xt, st, mu, nu)
                if phit <= phi0 + o.armijo * alpha * min(D, 0.0) or (D >= 0 and phit < phi0):
                    accepted = True
                    break
                if not soc_tried and alpha == a_p and np.isfinite(phit):
                    soc_tried = True
                    trial = self._soc(lu, x, s, dx, ds, alpha, Jg, sigma, H.shape[0])
                    if trial is not None:
                        xs, ss = trial
                        if self._merit(xs, ss, mu, nu) <= phi0 + o.armijo * alpha * min(D, 0.0):
                            xt, st = xs, ss
                            accepted = True
                            break
                alpha *= 0.5
            if not accepted:
                raise RestorationFailure(
                    f"line search failed at iteration {it}",
                    best=IPMResult(x, s, y, z, it, "line_search_failed", errs, mu, time.perf_counter() - t0, self.sf),
                    residuals=errs,
                )
            if o.verbose:
                log.info("      step %.3e (max %.3e, dual %.3e)  nu=%.2e", alpha, a_p, a_z, nu)
            x, s = xt, st
            y = y + alpha * dy
            z = z + a_z * dz
            # keep duals within a bounded distance of the central path
            z = np.clip(z, mu / (1e10 * s), 1e10 * mu / s)

        res = IPMResult(x, s, y, z, it, status, errs, mu, time.perf_counter() - t0, self.sf)
        if status != "optimal":
            raise MaxIterations(f"no KKT point after {o.max_iter} iterations (scaled error {errs['scaled']:.2e})",
                                best=res, residuals=errs)
        return res

    def _max_step(self, v, dv):
        neg = dv < 0
        if not np.any(neg):
            return 1.0
        return float(min(1.0, np.min(-self.o.tau * v[neg] / dv[neg])))

    def _soc(self, lu, x, s, dx, ds, alpha, Jg, sigma, n):
        p = self.p
        xt, st = x + alpha * dx, s + alpha * ds
        try:
            rc = p.constraints(xt)
            rg = p.inequalities(xt) - st
        except DomainError:
            return None
        rhs_x = -(Jg.T @ (sigma * rg))
        sol = lu.solve(np.concatenate([rhs_x, -rc]))
        px = sol[:n]
        ps = Jg @ px + rg
        if not np.all(st + ps >= (1 - self.o.tau) * st):
            return None
        return xt + px, st + ps
