"""Gradient guidance terms added to the score during backward sampling.

Two guidance vectors are provided for a linear objective direction ``g``:

* look-ahead loss guidance ``2 beta (y - g^T E) J^T g``, the gradient of
  ``-beta (y - g^T E[x0|xt])^2`` through the Tweedie estimate ``E``;
* naive guidance ``beta (y - g^T E) g``, which skips the Jacobian.

``beta(t)`` follows one of the theory schedules or is a constant.  Inputs may be
a single point ``(D,)`` or a batch ``(n, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .schedule import NoiseSchedule
from .score import LinearScoreModel, Subspace, _CovarianceScore, _Spectrum

__all__ = [
    "BetaRule",
    "GuidanceSpec",
    "beta",
    "g_loss",
    "g_naive",
    "guidance_term",
    "guided_score",
    "target_y",
    "posterior_variance_along",
]

KINDS = ("loss", "naive", "none")


@dataclass(frozen=True)
class BetaRule:
    """``gaussian_theory``, ``subspace_theory`` or ``constant`` with value ``c``."""

    kind: str = "gaussian_theory"
    c: float | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian_theory", "subspace_theory", "constant"):
            raise ValueError(f"unknown beta rule {self.kind!r}")
        if self.kind == "constant" and not (self.c is not None and self.c > 0):
            raise ValueError("constant beta needs c > 0")

    @classmethod
    def constant(cls, c: float) -> "BetaRule":
        return cls("constant", float(c))

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind} if self.c is None else {"kind": self.kind, "c": self.c}

    @classmethod
    def from_dict(cls, d) -> "BetaRule":
        if isinstance(d, str):
            return cls(d)
        return cls(d["kind"], d.get("c"))


@dataclass(frozen=True)
class GuidanceSpec:
    kind: str = "loss"
    g: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y: float = 0.0
    sigma: float = 1.0
    beta_rule: BetaRule = field(default_factory=BetaRule)
    # temperature on the score term; 1 recovers plain guided sampling
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"guidance kind must be one of {KINDS}, got {self.kind!r}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        g = np.array(self.g, dtype=float).reshape(-1)
        if not np.all(np.isfinite(g)):
            raise ValueError("g has non-finite entries")
        g.setflags(write=False)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "y", float(self.y))
        if isinstance(self.beta_rule, (str, dict)):
            object.__setattr__(self, "beta_rule", BetaRule.from_dict(self.beta_rule))

    @classmethod
    def unguided(cls) -> "GuidanceSpec":
        return cls(kind="none")

    def with_target(self, g, y: float) -> "GuidanceSpec":
        return GuidanceSpec(self.kind, g, y, self.sigma, self.beta_rule, self.gamma)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "g": self.g.tolist(),
            "y": self.y,
            "sigma": self.sigma,
            "beta_rule": self.beta_rule.to_dict(),
            "gamma": self.gamma,
        }


def posterior_variance_along(model: LinearScoreModel, g: np.ndarray, alpha: float, h: float) -> float:
    """``Var(g^T x0 | x_t)`` under the model's implied Gaussian.

    Equals ``h g^T S (alpha^2 S + h I)^+ g``; for the subspace class this is
    ``h |A^T g|^2``.
    """
    if isinstance(model, Subspace):
        v = g @ model.A
        return float(h * (v @ v))
    if isinstance(model, _CovarianceScore):
        spec = model._spec
    else:
        spec = _Spectrum.of(model.implied_gaussian().cov)
    gv = g @ spec.vectors
    # h w / (alpha^2 w + h) per eigenvalue, zero on the null space
    den = alpha * alpha * spec.values + h
    fac = np.zeros_like(den)
    np.divide(h * spec.values, den, out=fac, where=den > 0)
    return float(np.sum(fac * gv * gv))


def beta(spec: GuidanceSpec, model: LinearScoreModel, t: float, schedule: NoiseSchedule) -> float:
    rule = spec.beta_rule
    if rule.kind == "constant":
        return float(rule.c)
    alpha, h = schedule.alpha_h(t)
    s2 = spec.sigma ** 2
    if rule.kind == "subspace_theory":
        if model.basis is None:
            raise ValueError("subspace beta rule needs a model with a basis")
        v = spec.g @ model.basis.A
        return 0.5 / (s2 + h * (v @ v))
    return 0.5 / (s2 + posterior_variance_along(model, spec.g, alpha, h))


def _check_dim(spec: GuidanceSpec, model: LinearScoreModel):
    if spec.g.size != model.dim:
        raise ValueError(f"guidance gradient has length {spec.g.size}, model dimension is {model.dim}")


def _residual(spec, model, x_t, t, schedule):
    e = model.tweedie_mean(x_t, t, schedule)
    return spec.y - e @ spec.g


def g_loss(spec: GuidanceSpec, model: LinearScoreModel, x_t, t: float,
           schedule: NoiseSchedule) -> np.ndarray:
    _check_dim(spec, model)
    r = _residual(spec, model, x_t, t, schedule)
    jtg = model.tweedie_jacobian(t, schedule).T @ spec.g
    return 2.0 * beta(spec, model, t, schedule) * np.multiply.outer(r, jtg)


def g_naive(spec: GuidanceSpec, model: LinearScoreModel, x_t, t: float,
            schedule: NoiseSchedule) -> np.ndarray:
    _check_dim(spec, model)
    r = _residual(spec, model, x_t, t, schedule)
    return beta(spec, model, t, schedule) * np.multiply.outer(r, spec.g)


def guidance_term(spec: GuidanceSpec, model: LinearScoreModel, x_t, t: float,
                  schedule: NoiseSchedule) -> np.ndarray:
    if spec.kind == "loss":
        return g_loss(spec, model, x_t, t, schedule)
    if spec.kind == "naive":
        return g_naive(spec, model, x_t, t, schedule)
    return np.zeros_like(np.asarray(x_t, dtype=float))


def guided_score(spec: GuidanceSpec, model: LinearScoreModel, x_t, t: float,
                 schedule: NoiseSchedule) -> np.ndarray:
    s = model.evaluate(x_t, t, schedule)
    if spec.gamma != 1.0:
        s = spec.gamma * s
    if spec.kind == "none":
        return s
    return s + guidance_term(spec, model, x_t, t, schedule)


def target_y(model: LinearScoreModel, g, sigma: float, eta: float) -> float:
    """Target that moves the guided posterior mean by ``eta * S g``.

    ``S`` and the reference mean are those of the model's implied Gaussian.
    """
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    g = np.asarray(g, dtype=float)
    dist = model.implied_gaussian()
    return float(eta * (sigma ** 2 + g @ dist.cov @ g) + g @ dist.mean)
