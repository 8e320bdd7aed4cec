"""Canonical composite finite-sum problem and its exact-evaluation machinery.

The objective is

    Psi(x) = r(x) + (1/m) sum_i h_i(x) + f((1/m) sum_i g_i(x)),

with r a simple convex term (see proxlib), h_i scalar maps, g_i vector
maps into R^p, and f an outer scalar map on R^p.  All solvers consume
problems in this form; the reductions module compiles the robust
objectives into it.

Oracles are pure functions of (index, point), so a problem instance is
safely shareable read-only across threads.  Oracle-call accounting is
explicit: every evaluation helper takes an optional OracleCounter and
increments it once per single-component evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .proxlib import SimpleTerm, ZeroTerm


@dataclass
class OracleCounter:
    """Running tally of single-component oracle evaluations."""

    g_value_calls: int = 0
    g_jacobian_calls: int = 0
    h_gradient_calls: int = 0
    f_outer_calls: int = 0
    prox_calls: int = 0
    projection_calls: int = 0

    def copy(self):
        return OracleCounter(
            self.g_value_calls,
            self.g_jacobian_calls,
            self.h_gradient_calls,
            self.f_outer_calls,
            self.prox_calls,
            self.projection_calls,
        )

    def as_dict(self):
        return {
            "g_value_calls": self.g_value_calls,
            "g_jacobian_calls": self.g_jacobian_calls,
            "h_gradient_calls": self.h_gradient_calls,
            "f_outer_calls": self.f_outer_calls,
            "prox_calls": self.prox_calls,
            "projection_calls": self.projection_calls,
        }


@dataclass
class CompositeProblem:
    """Composite finite-sum objective in canonical form.

    g_oracle(i, x) -> (value in R^p, jacobian in R^{p x d})
    h_oracle(i, x) -> (value, gradient in R^d)
    f_outer(u)     -> (value, derivative in R^p)
    r_term         -- simple term with value and prox oracles
    """

    dim_x: int
    dim_g: int
    m: int
    g_oracle: Callable
    h_oracle: Callable
    f_outer: Callable
    r_term: SimpleTerm = field(default_factory=ZeroTerm)
    name: str = "composite"

    def __post_init__(self):
        if self.dim_x < 1 or self.dim_g < 1 or self.m < 1:
            raise ValueError("dim_x, dim_g and m must be positive")

    def g(self, i, x, counter: Optional[OracleCounter] = None):
        val, jac = self.g_oracle(i, x)
        if counter is not None:
            counter.g_value_calls += 1
            counter.g_jacobian_calls += 1
        val = np.atleast_1d(np.asarray(val, dtype=float))
        jac = np.asarray(jac, dtype=float).reshape(self.dim_g, self.dim_x)
        return val, jac

    def h(self, i, x, counter: Optional[OracleCounter] = None):
        val, grad = self.h_oracle(i, x)
        if counter is not None:
            counter.h_gradient_calls += 1
        return float(val), np.asarray(grad, dtype=float)

    def f(self, u, counter: Optional[OracleCounter] = None):
        val, deriv = self.f_outer(np.atleast_1d(np.asarray(u, dtype=float)))
        if counter is not None:
            counter.f_outer_calls += 1
        return float(val), np.atleast_1d(np.asarray(deriv, dtype=float))


@dataclass
class SmoothnessSpec:
    """User-supplied Lipschitz and growth constants of the composite parts.

    l_* bound values, L_* bound gradients; mu is the optimal strong
    convexity (quadratic growth) modulus of Psi; G_r the smoothness of
    the plain objective in constrained runs; rho the lower bound on the
    active-constraint gradient norm at the boundary.
    """

    l_f: float = 0.0
    L_f: float = 0.0
    l_g: float = 0.0
    L_g: float = 0.0
    l_h: float = 0.0
    L_h: float = 0.0
    mu: float = 0.0
    G_r: float = 0.0
    rho: float = 0.0

    def __post_init__(self):
        for name in ("l_f", "L_f", "l_g", "L_g", "l_h", "L_h", "mu", "G_r", "rho"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def L_phi(self):
        return (self.l_g**2 * self.L_f + self.l_f * self.L_g) + self.L_h

    @property
    def G0(self):
        return 3.0 * (self.l_g**4 * self.L_f**2 + self.l_f**2 * self.L_g**2 + self.l_h**2)

    @property
    def kappa(self):
        if self.mu <= 0:
            raise ValueError("kappa undefined: mu must be positive")
        return self.L_phi / self.mu


@dataclass
class EpochState:
    """Live solver state: iterate plus the three running estimators."""

    x: np.ndarray
    est_g_value: np.ndarray   # estimate of (1/m) sum g_i(x), shape (p,)
    est_g_jac: np.ndarray     # estimate of (1/m) sum Dg_i(x), shape (p, d)
    est_h_grad: np.ndarray    # estimate of (1/m) sum grad h_i(x), shape (d,)
    x_prev: np.ndarray


def batch_estimates(problem, indices, x, counter=None):
    """Means of g values, g jacobians and h gradients over the index batch.

    Summation runs in the given index order so full passes are
    reproducible bit for bit.
    """
    p, d = problem.dim_g, problem.dim_x
    y = np.zeros(p)
    z = np.zeros((p, d))
    w = np.zeros(d)
    n = 0
    for i in indices:
        gv, gj = problem.g(i, x, counter)
        _, hg = problem.h(i, x, counter)
        y += gv
        z += gj
        w += hg
        n += 1
    if n == 0:
        raise ValueError("empty index batch")
    return y / n, z / n, w / n


def delta_update(problem, indices, x_new, x_old, y, z, w, counter=None):
    """One incremental correction of the three estimators.

    Returns (y', z', w') with, e.g.,
        y' = y + (1/|S|) sum_{i in S} [g_i(x_new) - g_i(x_old)],
    evaluating both points for every sampled index.
    """
    p, d = problem.dim_g, problem.dim_x
    dy = np.zeros(p)
    dz = np.zeros((p, d))
    dw = np.zeros(d)
    n = 0
    for i in indices:
        gv_new, gj_new = problem.g(i, x_new, counter)
        gv_old, gj_old = problem.g(i, x_old, counter)
        _, hg_new = problem.h(i, x_new, counter)
        _, hg_old = problem.h(i, x_old, counter)
        dy += gv_new - gv_old
        dz += gj_new - gj_old
        dw += hg_new - hg_old
        n += 1
    if n == 0:
        raise ValueError("empty index batch")
    return y + dy / n, z + dz / n, w + dw / n


def evaluate_psi(problem, x, counter=None):
    """Exact objective value Psi(x), averaging all m components."""
    y = np.zeros(problem.dim_g)
    h_mean = 0.0
    for i in range(problem.m):
        gv, _ = problem.g(i, x, counter)
        hv, _ = problem.h(i, x, counter)
        y += gv
        h_mean += hv
    f_val, _ = problem.f(y / problem.m, counter)
    return problem.r_term.value(x) + h_mean / problem.m + f_val


def full_phi_gradient(problem, x, counter=None):
    """Exact gradient of Phi = (1/m) sum h_i + f((1/m) sum g_i).

    Chain rule with the exact batch means:  Dg(x)^T f'(g(x)) + grad h(x).
    Increments the counters by m per family when given one.
    """
    y, z, w = batch_estimates(problem, range(problem.m), x, counter)
    _, fprime = problem.f(y, counter)
    return z.T @ fprime + w


def gradient_mapping(problem, eta, x, counter=None):
    """Proximal gradient mapping of Psi with the exact full gradient.

    G_eta(x) = (1/eta) * [x - prox_r(x - eta * grad Phi(x), eta)].
    Returns (vector, squared norm).  With r = 0 the vector is grad Phi(x).
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    x = np.asarray(x, dtype=float)
    grad = full_phi_gradient(problem, x, counter)
    stepped = problem.r_term.prox(x - eta * grad, eta)
    if counter is not None:
        counter.prox_calls += 1
    vec = (x - stepped) / eta
    return vec, float(vec @ vec)


@dataclass
class JacobianReport:
    """Worst relative finite-difference errors found by check_jacobians."""

    max_rel_error_g: float
    max_rel_error_h: float
    max_rel_error_f: float
    probes: int

    @property
    def max_rel_error(self):
        return max(self.max_rel_error_g, self.max_rel_error_h, self.max_rel_error_f)


def check_jacobians(problem, num_probes=20, seed=0, scale=1.0):
    """Compare analytic jacobians/gradients against central differences.

    Probes random (i, x) pairs; relative error is ||analytic - fd|| over
    max(1, ||fd||).  Reports the worst error per oracle family and never
    aborts.
    """
    rng = np.random.default_rng(seed)
    d, p, m = problem.dim_x, problem.dim_g, problem.m
    worst_g = worst_h = worst_f = 0.0
    for _ in range(num_probes):
        x = scale * rng.standard_normal(d)
        i = int(rng.integers(0, m))
        step = 1e-6 * (1.0 + float(np.max(np.abs(x))))

        _, jac = problem.g(i, x)
        fd = np.zeros((p, d))
        for k in range(d):
            e = np.zeros(d)
            e[k] = step
            vp, _ = problem.g(i, x + e)
            vm, _ = problem.g(i, x - e)
            fd[:, k] = (vp - vm) / (2 * step)
        worst_g = max(worst_g, _rel_err(jac, fd))

        _, grad = problem.h(i, x)
        fdh = np.zeros(d)
        for k in range(d):
            e = np.zeros(d)
            e[k] = step
            vp, _ = problem.h(i, x + e)
            vm, _ = problem.h(i, x - e)
            fdh[k] = (vp - vm) / (2 * step)
        worst_h = max(worst_h, _rel_err(grad, fdh))

        # probe the outer map at the inner value actually produced; skip
        # probes that step outside its domain (e.g. log of a nonpositive
        # argument) so the checker reports instead of aborting
        u, _ = problem.g(i, x)
        ustep = 1e-6 * (1.0 + float(np.max(np.abs(u))))
        try:
            _, fprime = problem.f(u)
            fdf = np.zeros(p)
            for k in range(p):
                e = np.zeros(p)
                e[k] = ustep
                vp, _ = problem.f(u + e)
                vm, _ = problem.f(u - e)
                fdf[k] = (vp - vm) / (2 * ustep)
            worst_f = max(worst_f, _rel_err(fprime, fdf))
        except (ArithmeticError, ValueError):
            pass
    return JacobianReport(worst_g, worst_h, worst_f, num_probes)


def _rel_err(a, b):
    diff = np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    return float(diff / max(1.0, np.linalg.norm(np.asarray(b, dtype=float))))
