"""Allocation objectives over envelope widths ``dp = p_plus - p_minus`` (kW).

``evaluate`` returns the objective being maximised. The NLP minimises
``solver_form`` instead, which for ``alpha_fair`` is the monotone transform
``||L||_alpha`` with ``L_k = -log(gamma*dp_k + eta)``: same maximisers, but
finite and well scaled at alpha = 100 where the raw sum spans ~1e47.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import DomainError

STRATEGIES = ("max_effcy", "ppn_fair", "alpha_fair", "permax_fair")
DEFAULT_ALPHA = 100.0
DEFAULT_ETA = 0.05
DP_FLOOR = 1e-6  # kW, lower bound on widths when a log is involved


@dataclass(frozen=True)
class ObjectiveSpec:
    strategy: str = "ppn_fair"
    alpha: float = DEFAULT_ALPHA
    gamma: float | None = None
    eta: float = DEFAULT_ETA
    dp_ind: tuple[float, ...] | None = None
    target: int | None = None  # single-customer objective used for maxPRDOE
    members: tuple[int, ...] | None = None  # customers in the alpha_fair sum of the solver form (default all)

    def __post_init__(self):
        if self.strategy not in STRATEGIES + ("individual",):
            raise ValueError(f"unknown strategy '{self.strategy}' (choose from {', '.join(STRATEGIES)})")
        if self.strategy == "alpha_fair":
            if self.alpha < 1:
                raise ValueError("alpha must be >= 1")
            if self.gamma is not None and self.gamma <= 0:
                raise ValueError("gamma must be positive")
        if self.strategy == "permax_fair" and self.dp_ind is not None and min(self.dp_ind, default=1.0) <= 0:
            raise ValueError("maxPRDOE values must be strictly positive")
        if self.strategy == "individual" and self.target is None:
            raise ValueError("individual objective needs a target customer")

    @property
    def needs_log(self) -> bool:
        return self.strategy in ("ppn_fair", "alpha_fair")

    def resolved(self, max_widths_kw) -> "ObjectiveSpec":
        """Fill ``gamma`` so that ``gamma*dp + eta`` stays inside (eta, 0.9 + eta)."""
        if self.strategy != "alpha_fair" or self.gamma is not None:
            return self
        widest = float(np.max(max_widths_kw)) if np.size(max_widths_kw) else 1.0
        return replace(self, gamma=0.9 / max(widest, DP_FLOOR))


def _weights(spec: ObjectiveSpec, K: int) -> np.ndarray:
    if spec.strategy == "max_effcy":
        return np.ones(K)
    if spec.strategy == "permax_fair":
        if spec.dp_ind is None or len(spec.dp_ind) != K:
            raise ValueError("permax_fair needs one maxPRDOE per customer")
        return 1.0 / np.asarray(spec.dp_ind, dtype=float)
    w = np.zeros(K)
    w[spec.target] = 1.0
    return w


def _alpha_terms(spec: ObjectiveSpec, dp: np.ndarray):
    if spec.gamma is None:
        raise ValueError("alpha_fair needs gamma; call ObjectiveSpec.resolved first")
    arg = spec.gamma * dp + spec.eta
    if np.any(arg <= 0) or np.any(arg >= 1):
        raise DomainError(f"alpha_fair: gamma*dp + eta must lie in (0, 1), got range [{arg.min()}, {arg.max()}]")
    return arg, -np.log(arg)


def evaluate(spec: ObjectiveSpec, dp) -> tuple[float, np.ndarray]:
    """Objective value and gradient with respect to ``dp`` (kW)."""
    dp = np.asarray(dp, dtype=float)
    K = dp.size
    if spec.strategy == "ppn_fair":
        if np.any(dp <= 0):
            raise DomainError("ppn_fair: widths must be positive")
        return float(np.sum(np.log(dp))), 1.0 / dp
    if spec.strategy == "alpha_fair":
        arg, L = _alpha_terms(spec, dp)
        a = spec.alpha
        return float(-np.sum(L**a)), a * L ** (a - 1) * spec.gamma / arg
    w = _weights(spec, K)
    return float(w @ dp), w


def hessian(spec: ObjectiveSpec, dp) -> np.ndarray:
    dp = np.asarray(dp, dtype=float)
    K = dp.size
    if spec.strategy == "ppn_fair":
        if np.any(dp <= 0):
            raise DomainError("ppn_fair: widths must be positive")
        return np.diag(-1.0 / dp**2)
    if spec.strategy == "alpha_fair":
        arg, L = _alpha_terms(spec, dp)
        a, g = spec.alpha, spec.gamma
        # d/ddp [a L^(a-1) g/arg] with dL/ddp = -g/arg
        return np.diag(-a * (a - 1) * L ** (a - 2) * g**2 / arg**2 - a * L ** (a - 1) * g**2 / arg**2)
    return np.zeros((K, K))


def solver_form(spec: ObjectiveSpec, dp) -> tuple[float, np.ndarray, np.ndarray]:
    """``(value, gradient, hessian)`` of the function the NLP minimises."""
    dp = np.asarray(dp, dtype=float)
    if spec.strategy != "alpha_fair":
        v, g = evaluate(spec, dp)
        return -v, -g, -hessian(spec, dp)
    if spec.members is not None:
        idx = np.asarray(spec.members, dtype=int)
        F, g_sub, H_sub = solver_form(replace(spec, members=None), dp[idx])
        grad = np.zeros(dp.size)
        grad[idx] = g_sub
        H = np.zeros((dp.size, dp.size))
        H[np.ix_(idx, idx)] = H_sub
        return F, grad, H
    arg, L = _alpha_terms(spec, dp)
    a, gam = spec.alpha, spec.gamma
    top = L.max()
    F = top * np.sum((L / top) ** a) ** (1.0 / a)
    w = (L / F) ** (a - 1)
    dL = -gam / arg
    d2L = gam**2 / arg**2
    grad = w * dL
    # Hessian of ||L||_a in L-space, then chain rule to dp
    HL = (a - 1) / F * (np.diag((L / F) ** (a - 2)) - np.outer(w, w))
    H = HL * np.outer(dL, dL) + np.diag(w * d2L)
    return float(F), grad, H


def max_individual_rdoe(engine, k) -> float:
    """Largest width (kW) customer ``k`` can get when the objective is its own width alone."""
    idx = engine.customer_index(k) if not isinstance(k, (int, np.integer)) else int(k)
    env = engine.solve(ObjectiveSpec("individual", target=idx))
    return float(env.widths_kw[idx])
