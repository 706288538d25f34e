"""Concave objectives, their smoothness constants and reference optima.

``regularized_opt`` solves ``max f(x) - lam/2 |x - mu|^2_{S^+}`` where ``S^+``
is the pseudo-inverse of the data covariance; directions outside the range of
``S`` are held at ``mu`` rather than penalised infinitely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy import optimize

from .dataset import GaussianDist, SubspaceBasis

__all__ = [
    "Objective",
    "Linear",
    "QuadScalar",
    "DistNorm",
    "smoothness",
    "adapted_smoothness",
    "regularized_opt",
    "span_opt",
    "make_theta",
    "objective_from_dict",
]

_EIG_RTOL = 1e-12


class Objective:
    kind = "abstract"

    def value(self, x) -> float | np.ndarray:
        raise NotImplementedError

    def grad(self, x) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


def _vec(v) -> np.ndarray:
    v = np.array(v, dtype=float).reshape(-1)
    v.setflags(write=False)
    return v


@dataclass(frozen=True, eq=False)
class Linear(Objective):
    """``f(x) = g^T x``."""

    g: np.ndarray
    kind = "linear"

    def __post_init__(self):
        object.__setattr__(self, "g", _vec(self.g))

    def value(self, x):
        return np.asarray(x, dtype=float) @ self.g

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.g, x.shape).copy()

    def to_dict(self):
        return {"kind": self.kind, "g": self.g.tolist()}


@dataclass(frozen=True, eq=False)
class QuadScalar(Objective):
    """``f(x) = c - (theta^T x - a)^2``."""

    theta: np.ndarray
    a: float = 3.0
    c: float = 10.0
    kind = "quad_scalar"

    def __post_init__(self):
        object.__setattr__(self, "theta", _vec(self.theta))

    def value(self, x):
        r = np.asarray(x, dtype=float) @ self.theta - self.a
        return self.c - r * r

    def grad(self, x):
        r = np.asarray(x, dtype=float) @ self.theta - self.a
        return -2.0 * np.multiply.outer(r, self.theta)

    def to_dict(self):
        return {"kind": self.kind, "theta": self.theta.tolist(), "a": self.a, "c": self.c}


@dataclass(frozen=True, eq=False)
class DistNorm(Objective):
    """``f(x) = c0 - w |x - b|``; not differentiable at ``b``."""

    b: np.ndarray
    c0: float = 5.0
    w: float = 0.5
    kind = "dist_norm"

    def __post_init__(self):
        object.__setattr__(self, "b", _vec(self.b))
        if not self.w > 0:
            raise ValueError("w must be positive")

    def value(self, x):
        return self.c0 - self.w * np.linalg.norm(np.asarray(x, dtype=float) - self.b, axis=-1)

    def grad(self, x):
        d = np.asarray(x, dtype=float) - self.b
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        if np.any(n == 0):
            raise ValueError("DistNorm gradient is undefined at x = b")
        return -self.w * d / n

    def to_dict(self):
        return {"kind": self.kind, "b": self.b.tolist(), "c0": self.c0, "w": self.w}


def objective_from_dict(d: dict[str, Any]) -> Objective:
    kind = d["kind"]
    if kind == "linear":
        return Linear(d["g"])
    if kind == "quad_scalar":
        return QuadScalar(d["theta"], float(d.get("a", 3.0)), float(d.get("c", 10.0)))
    if kind == "dist_norm":
        return DistNorm(d["b"], float(d.get("c0", 5.0)), float(d.get("w", 0.5)))
    raise ValueError(f"unknown objective kind {kind!r}")


def smoothness(obj: Objective) -> float:
    """Euclidean gradient-Lipschitz constant; ``inf`` when not smooth."""
    if isinstance(obj, Linear):
        return 0.0
    if isinstance(obj, QuadScalar):
        return float(2.0 * obj.theta @ obj.theta)
    return float("inf")


def adapted_smoothness(obj: Objective, stats: GaussianDist) -> float:
    """Smoothness measured in the ``S^{-1}`` semi-norm: the largest eigenvalue of ``S^{1/2} (-Hess f) S^{1/2}``."""
    if isinstance(obj, Linear):
        return 0.0
    if isinstance(obj, QuadScalar):
        return float(2.0 * obj.theta @ stats.cov @ obj.theta)
    return float("inf")


def _restrict(stats: GaussianDist, basis: SubspaceBasis | None) -> tuple[np.ndarray, np.ndarray]:
    if basis is None:
        return np.array(stats.mean), np.array(stats.cov)
    P = basis.projector()
    return P @ stats.mean, P @ stats.cov @ P


def regularized_opt(obj: Objective, stats: GaussianDist, lam: float,
                    basis: SubspaceBasis | None = None) -> np.ndarray:
    """Maximiser of ``f(x) - lam/2 |x - mu|^2_{S^+}`` over ``mu + range(S)``.

    With a basis, ``mu`` and ``S`` are first projected onto the span.
    """
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    mu, S = _restrict(stats, basis)
    if isinstance(obj, Linear):
        return mu + S @ obj.g / lam
    if isinstance(obj, QuadScalar):
        st = S @ obj.theta
        tau = 2.0 * (obj.a - obj.theta @ mu) / (lam + 2.0 * obj.theta @ st)
        return mu + tau * st
    return _ascend(obj, mu, S, lam)


def _ascend(obj: Objective, mu: np.ndarray, S: np.ndarray, lam: float) -> np.ndarray:
    # x = mu + R z with R R^T = S; the penalty becomes lam/2 |z|^2
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    keep = w > _EIG_RTOL * max(float(w.max()), 0.0) if w.size else w > 0
    R = V[:, keep] * np.sqrt(w[keep])
    if R.shape[1] == 0:
        return mu

    def neg(z):
        x = mu + R @ z
        return -(obj.value(x) - 0.5 * lam * z @ z), -(R.T @ obj.grad(x) - lam * z)

    z0 = np.zeros(R.shape[1])
    if isinstance(obj, DistNorm) and np.allclose(mu, obj.b):
        return mu
    res = optimize.minimize(neg, z0, jac=True, method="BFGS", options={"gtol": 1e-10, "maxiter": 10_000})
    return mu + R @ _newton_polish(lambda z: -neg(z)[1], res.x)


def _newton_polish(grad, z: np.ndarray, steps: int = 20, eps: float = 1e-6) -> np.ndarray:
    # BFGS stalls near 1e-10 in z; a few Newton steps on a difference Hessian of
    # the analytic gradient remove the ill-conditioning amplification in x
    gz = grad(z)
    for _ in range(steps):
        n0 = np.linalg.norm(gz)
        if n0 < 1e-15:
            break
        H = np.empty((z.size, z.size))
        for j in range(z.size):
            e = np.zeros(z.size)
            e[j] = eps
            H[:, j] = (grad(z + e) - grad(z - e)) / (2 * eps)
        try:
            step = np.linalg.solve(0.5 * (H + H.T), gz)
        except np.linalg.LinAlgError:
            break
        z_new = z - step
        g_new = grad(z_new)
        if not np.linalg.norm(g_new) < n0:
            break
        z, gz = z_new, g_new
    return z


def span_opt(obj: Objective, basis: SubspaceBasis) -> tuple[np.ndarray, float]:
    """Minimum-norm maximiser of ``f`` over ``Span(A)`` and the maximum value."""
    P = basis.projector()
    if isinstance(obj, QuadScalar):
        tp = P @ obj.theta
        nn = tp @ tp
        # roundoff leaves |P theta|^2 ~ 1e-32 for theta orthogonal to the span
        if nn > 1e-24 * max(1.0, obj.theta @ obj.theta):
            x = obj.a * tp / nn
            return x, float(obj.c)
        x = np.zeros(basis.D)
        return x, float(obj.value(x))
    if isinstance(obj, Linear):
        gp = P @ obj.g
        if np.linalg.norm(gp) > 1e-12 * max(1.0, np.linalg.norm(obj.g)):
            raise ValueError("linear objective is unbounded above on the span")
        return np.zeros(basis.D), 0.0
    if isinstance(obj, DistNorm):
        x = P @ obj.b
        return x, float(obj.value(x))
    raise TypeError(f"no span optimum for {type(obj).__name__}")


def make_theta(basis: SubspaceBasis, ratio: float, seed: int) -> np.ndarray:
    """Direction with ``|theta_on| = 1`` and ``|theta_off| / |theta_on| = ratio``."""
    if ratio < 0:
        raise ValueError("ratio must be non-negative")
    rng = np.random.default_rng(seed)
    on = basis.A @ rng.standard_normal(basis.d)
    on /= np.linalg.norm(on)
    if ratio == 0 or basis.d == basis.D:
        return on
    off = basis.orthogonal(rng.standard_normal(basis.D))
    off /= np.linalg.norm(off)
    return on + ratio * off
