"""Closed-form linear score models ``s(x, t) = C_t x + b_t``.

Four parameterisations are provided, each the exact minimiser of the
score-matching loss over its class:

* :class:`MeanOnly`   ``s = -x + alpha x_bar``
* :class:`FullLinear` ``s = -(alpha^2 Sigma + h I)^+ (x - alpha mu)``
* :class:`Subspace`   ``s = AA^T(-x + alpha x_bar) + (AA^T x - x) / h``
* :class:`FrozenCov`  covariance term fixed at pre-training, mean refitted

Every model also exposes the Gaussian it implicitly represents
(:meth:`LinearScoreModel.implied_gaussian`); guidance rules and the analytic
posterior are written against that Gaussian.

Batches are row-major: ``x`` of shape ``(n, D)`` gives scores of shape ``(n, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from .dataset import Dataset, GaussianDist, SubspaceBasis, empirical_stats
from .schedule import NoiseSchedule

__all__ = [
    "LinearScoreModel",
    "MeanOnly",
    "FullLinear",
    "Subspace",
    "FrozenCov",
    "ScoreDecomposition",
    "fit_mean_only",
    "fit_full_linear",
    "fit_subspace",
    "freeze",
    "refit_bias_frozen",
    "evaluate",
    "tweedie_mean",
    "tweedie_jacobian",
    "decompose",
    "recover_basis",
    "score_matching_loss",
    "model_to_dict",
    "model_from_dict",
]

# eigenvalues below this fraction of the largest are treated as exact zeros
_EIG_RTOL = 1e-12
# singular values below this fraction of the largest mark a rank deficiency
_SVD_RTOL = 1e-8
_ALPHA_MIN = 1e-12


class LinearScoreModel:
    """Common interface; subclasses supply ``h * C_t`` and ``h * b_t``.

    Working with ``h``-scaled coefficients keeps the look-ahead estimator
    finite at ``t = 0`` even for classes whose score blows up there.
    """

    kind: str = "abstract"

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def implied_gaussian(self) -> GaussianDist:
        raise NotImplementedError

    def scaled_coefficients(self, alpha: float, h: float) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(h C_t, h b_t)`` as dense arrays."""
        raise NotImplementedError

    def coefficients(self, t: float, schedule: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(C_t, b_t)``."""
        alpha, h = schedule.alpha_h(t)
        if h > 0:
            hC, hb = self.scaled_coefficients(alpha, h)
            return hC / h, hb / h
        return self._coefficients_at_zero()

    def _coefficients_at_zero(self) -> tuple[np.ndarray, np.ndarray]:
        raise ValueError(f"{self.kind} score is undefined at t=0 (h(0)=0); evaluate at t > 0")

    def evaluate(self, x, t: float, schedule: NoiseSchedule) -> np.ndarray:
        alpha, h = schedule.alpha_h(t)
        x = np.asarray(x, dtype=float)
        if h > 0:
            return self._hscore(x, alpha, h) / h
        C, b = self._coefficients_at_zero()
        return x @ C.T + b

    def _hscore(self, x: np.ndarray, alpha: float, h: float) -> np.ndarray:
        hC, hb = self.scaled_coefficients(alpha, h)
        return x @ hC.T + hb

    def tweedie_mean(self, x, t: float, schedule: NoiseSchedule) -> np.ndarray:
        """Look-ahead estimate ``(x + h s(x, t)) / alpha``."""
        alpha, h = schedule.alpha_h(t)
        if alpha < _ALPHA_MIN:
            raise ValueError(f"alpha(t)={alpha:.3g} is numerically zero; look-ahead undefined")
        x = np.asarray(x, dtype=float)
        return (x + self._hscore(x, alpha, h)) / alpha

    def tweedie_jacobian(self, t: float, schedule: NoiseSchedule) -> np.ndarray:
        """``(I + h C_t) / alpha``; state independent for linear scores."""
        alpha, h = schedule.alpha_h(t)
        if alpha < _ALPHA_MIN:
            raise ValueError(f"alpha(t)={alpha:.3g} is numerically zero; look-ahead undefined")
        hC, _ = self.scaled_coefficients(alpha, h)
        return (np.eye(self.dim) + hC) / alpha

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


@dataclass(frozen=True)
class _Spectrum:
    """Cached eigendecomposition of a PSD covariance."""

    values: np.ndarray
    vectors: np.ndarray

    @classmethod
    def of(cls, cov: np.ndarray) -> "_Spectrum":
        w, V = np.linalg.eigh(cov)
        top = max(float(np.max(np.abs(w))), 0.0) if w.size else 0.0
        w = np.where(w < _EIG_RTOL * top, 0.0, w)
        return cls(w, V)

    def shrink(self, alpha: float, h: float) -> np.ndarray:
        """``h / (alpha^2 w + h)`` per eigenvalue, with the 0/0 limit taken as 1."""
        den = alpha * alpha * self.values + h
        out = np.ones_like(self.values)
        np.divide(h, den, out=out, where=den > 0)
        return out

    def apply(self, x: np.ndarray, diag: np.ndarray) -> np.ndarray:
        """``V diag V^T`` applied to the rows of ``x``."""
        return ((x @ self.vectors) * diag) @ self.vectors.T

    def matrix(self, diag: np.ndarray) -> np.ndarray:
        return (self.vectors * diag) @ self.vectors.T


@dataclass(frozen=True)
class MeanOnly(LinearScoreModel):
    xbar: np.ndarray
    kind: str = field(default="mean_only", init=False)
    basis: SubspaceBasis | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "xbar", _frozen_vector(self.xbar))

    @property
    def dim(self) -> int:
        return self.xbar.size

    def implied_gaussian(self) -> GaussianDist:
        return GaussianDist(self.xbar, np.eye(self.dim))

    def scaled_coefficients(self, alpha, h):
        return -h * np.eye(self.dim), h * alpha * self.xbar

    def _coefficients_at_zero(self):
        return -np.eye(self.dim), self.xbar.copy()

    def _hscore(self, x, alpha, h):
        return h * (alpha * self.xbar - x)

    def to_dict(self):
        return {"kind": self.kind, "xbar": self.xbar.tolist()}


class _CovarianceScore(LinearScoreModel):
    """Shared algebra for ``s = -(alpha^2 Sigma + h I)^+ (x - alpha m)``."""

    _spec: _Spectrum

    def _center(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def dim(self) -> int:
        return self._center().size

    def scaled_coefficients(self, alpha, h):
        hC = -self._spec.matrix(self._spec.shrink(alpha, h))
        return hC, -alpha * (hC @ self._center())

    def _coefficients_at_zero(self):
        if np.any(self._spec.values == 0):
            raise ValueError(
                "covariance is singular, so the score is undefined at t=0; evaluate at t > 0"
            )
        C = -self._spec.matrix(1.0 / self._spec.values)
        return C, -(C @ self._center())

    def _hscore(self, x, alpha, h):
        return -self._spec.apply(x - alpha * self._center(), self._spec.shrink(alpha, h))


@dataclass(frozen=True)
class FullLinear(_CovarianceScore):
    mu: np.ndarray
    sigma: np.ndarray
    kind: str = field(default="full_linear", init=False)
    basis: SubspaceBasis | None = field(default=None, init=False, repr=False)
    _spec: _Spectrum = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        dist = GaussianDist(self.mu, self.sigma)
        object.__setattr__(self, "mu", dist.mean)
        object.__setattr__(self, "sigma", dist.cov)
        object.__setattr__(self, "_spec", _Spectrum.of(dist.cov))

    def _center(self):
        return self.mu

    def implied_gaussian(self) -> GaussianDist:
        return GaussianDist(self.mu, self.sigma)

    def to_dict(self):
        return {"kind": self.kind, "mu": self.mu.tolist(), "sigma": self.sigma.tolist()}


@dataclass(frozen=True)
class FrozenCov(_CovarianceScore):
    """Pre-training covariance term held fixed; only the mean (bias) moves."""

    mu_stats: GaussianDist
    xbar_w: np.ndarray
    basis: SubspaceBasis | None = None
    kind: str = field(default="frozen_cov", init=False)
    _spec: _Spectrum = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "xbar_w", _frozen_vector(self.xbar_w))
        if self.xbar_w.size != self.mu_stats.dim:
            raise ValueError("weighted mean and pre-training statistics disagree on dimension")
        object.__setattr__(self, "_spec", _Spectrum.of(self.mu_stats.cov))

    def _center(self):
        return self.xbar_w

    def implied_gaussian(self) -> GaussianDist:
        return GaussianDist(self.xbar_w, self.mu_stats.cov)

    def to_dict(self):
        d = {
            "kind": self.kind,
            "mu": self.mu_stats.mean.tolist(),
            "sigma": self.mu_stats.cov.tolist(),
            "xbar_w": self.xbar_w.tolist(),
        }
        if self.basis is not None:
            d["basis"] = self.basis.A.tolist()
        return d


@dataclass(frozen=True)
class Subspace(LinearScoreModel):
    basis: SubspaceBasis
    xbar: np.ndarray
    kind: str = field(default="subspace", init=False)

    def __post_init__(self):
        object.__setattr__(self, "xbar", _frozen_vector(self.xbar))
        if self.xbar.size != self.basis.D:
            raise ValueError("mean and basis disagree on dimension")

    @property
    def dim(self) -> int:
        return self.basis.D

    @property
    def A(self) -> np.ndarray:
        return self.basis.A

    def implied_gaussian(self) -> GaussianDist:
        P = self.basis.projector()
        return GaussianDist(P @ self.xbar, P)

    def scaled_coefficients(self, alpha, h):
        P = self.basis.projector()
        hC = -h * P - (np.eye(self.dim) - P)
        return hC, h * alpha * (P @ self.xbar)

    def _hscore(self, x, alpha, h):
        on = self.basis.project(x)
        return h * (alpha * self.basis.project(self.xbar) - on) - (x - on)

    def to_dict(self):
        return {"kind": self.kind, "basis": self.basis.A.tolist(), "xbar": self.xbar.tolist()}


@dataclass(frozen=True)
class ScoreDecomposition:
    on_support: np.ndarray
    orthogonal: np.ndarray


def _frozen_vector(v) -> np.ndarray:
    v = np.array(v, dtype=float).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    v.setflags(write=False)
    return v


def fit_mean_only(data: Dataset) -> MeanOnly:
    return MeanOnly(data.samples.mean(axis=0))


def fit_full_linear(data: Dataset, weights=None) -> FullLinear:
    if data.n < 2:
        raise ValueError("full-linear fit needs at least two samples")
    stats = empirical_stats(data, weights)
    return FullLinear(stats.mean, stats.cov)


def recover_basis(samples: np.ndarray, d: int | None = None) -> SubspaceBasis:
    """Column space of the centred samples via a truncated SVD."""
    xc = samples - samples.mean(axis=0)
    _, s, Vt = np.linalg.svd(xc, full_matrices=False)
    rank = int(np.sum(s > _SVD_RTOL * s[0])) if s.size and s[0] > 0 else 0
    d = rank if d is None else d
    if rank < d or d == 0:
        raise ValueError(
            f"centred samples have rank {rank} < d={d}: latent covariance is not full rank"
        )
    return SubspaceBasis(Vt[:d].T)


def fit_subspace(data: Dataset, weights=None, d: int | None = None) -> Subspace:
    """Weighted score matching over the subspace class.

    Uses ``data.basis`` when present, otherwise recovers a rank-``d`` basis.
    Raises when the latent empirical covariance is rank deficient.
    """
    x = data.samples
    if data.basis is not None:
        basis = data.basis
        lat = x @ basis.A
        s = np.linalg.svd(lat - lat.mean(axis=0), compute_uv=False)
        if s.size < basis.d or s[0] == 0 or np.sum(s > _SVD_RTOL * s[0]) < basis.d:
            raise ValueError("latent empirical covariance is rank deficient")
    else:
        basis = recover_basis(x, d)
    if weights is None:
        xbar = x.mean(axis=0)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (data.n,) or np.any(w <= 0):
            raise ValueError("weights must be positive, one per sample")
        xbar = w @ x / w.sum()
    return Subspace(basis, xbar)


def freeze(model: FullLinear, basis: SubspaceBasis | None = None) -> FrozenCov:
    return FrozenCov(model.implied_gaussian(), model.mu, basis=basis)


def refit_bias_frozen(model: LinearScoreModel, weighted_mean) -> LinearScoreModel:
    """Swap the mean entering ``b_t``; ``C_t`` is untouched.

    A :class:`FullLinear` model is frozen first.
    """
    if isinstance(model, FullLinear):
        model = freeze(model)
    if isinstance(model, FrozenCov):
        return replace(model, xbar_w=weighted_mean)
    if isinstance(model, Subspace):
        return replace(model, xbar=weighted_mean)
    raise TypeError(f"{type(model).__name__} does not support a frozen-covariance refit")


def evaluate(model: LinearScoreModel, x, t: float, schedule: NoiseSchedule) -> np.ndarray:
    return model.evaluate(x, t, schedule)


def tweedie_mean(model: LinearScoreModel, x_t, t: float, schedule: NoiseSchedule) -> np.ndarray:
    return model.tweedie_mean(x_t, t, schedule)


def tweedie_jacobian(model: LinearScoreModel, t: float, schedule: NoiseSchedule) -> np.ndarray:
    return model.tweedie_jacobian(t, schedule)


def decompose(model: Subspace, x, t: float, schedule: NoiseSchedule) -> ScoreDecomposition:
    if not isinstance(model, Subspace):
        raise TypeError("score decomposition needs a Subspace model")
    _, h = schedule.alpha_h(t)
    if h <= 0:
        raise ValueError("decomposition is undefined at t=0")
    x = np.asarray(x, dtype=float)
    s = model.evaluate(x, t, schedule)
    orth = -model.basis.orthogonal(x) / h
    return ScoreDecomposition(on_support=s - orth, orthogonal=orth)


def score_matching_loss(C, b, data: Dataset | np.ndarray, t: float, schedule: NoiseSchedule,
                        weights=None) -> float:
    """Exact expected denoising score-matching loss at a single time ``t > 0``.

    With ``x_t = alpha x_0 + sqrt(h) z`` the expectation over ``z`` is taken in
    closed form: ``h |C + I/h|_F^2 + E_data |alpha C x_0 + b|^2``.
    """
    alpha, h = schedule.alpha_h(t)
    if h <= 0:
        raise ValueError("loss is undefined at t=0")
    x = data.samples if isinstance(data, Dataset) else np.atleast_2d(data)
    C = np.asarray(C, dtype=float)
    M = C + np.eye(C.shape[0]) / h
    resid = alpha * x @ C.T + b
    sq = np.sum(resid * resid, axis=1)
    if weights is None:
        data_term = sq.mean()
    else:
        w = np.asarray(weights, dtype=float)
        data_term = w @ sq / w.sum()
    return float(h * np.sum(M * M) + data_term)


def model_to_dict(model: LinearScoreModel) -> dict[str, Any]:
    return model.to_dict()


def model_from_dict(d: dict[str, Any]) -> LinearScoreModel:
    kind = d["kind"]
    if kind == "mean_only":
        return MeanOnly(np.array(d["xbar"]))
    if kind == "full_linear":
        return FullLinear(np.array(d["mu"]), np.array(d["sigma"]))
    if kind == "subspace":
        return Subspace(SubspaceBasis(np.array(d["basis"])), np.array(d["xbar"]))
    if kind == "frozen_cov":
        basis = SubspaceBasis(np.array(d["basis"])) if "basis" in d else None
        return FrozenCov(GaussianDist(np.array(d["mu"]), np.array(d["sigma"])),
                         np.array(d["xbar_w"]), basis=basis)
    raise ValueError(f"unknown score model kind {kind!r}")
