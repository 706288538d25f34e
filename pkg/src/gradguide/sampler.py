"""Guided backward sampling and its exact Gaussian counterpart.

The backward SDE ``dX = [X/2 + s(X, T - t) + G(X, T - t)] dt + dW`` is
integrated by Euler-Maruyama on a uniform grid from ``X ~ N(0, I)``.  Forward
times visited are ``T, T - dt, ..., dt``; the score is never evaluated at
``t = 0``.

Each trajectory owns an RNG stream derived from ``(seed, index)`` and draws all
of its noise up front, so the output does not depend on how trajectories are
split across threads.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import integrate

from .dataset import Dataset, GaussianDist, psd_sqrt, save_dataset
from .guidance import GuidanceSpec, guided_score
from .io import atomic_write_text
from .schedule import NoiseSchedule, h_sqrt_schedule
from .score import LinearScoreModel

__all__ = [
    "SamplerConfig",
    "SampleBatch",
    "backward_sample",
    "analytic_posterior",
    "guided_posterior",
    "oracle_sample",
    "sample",
    "naive_offsupport_expectation",
    "save_batch",
]

# trajectories integrated together; fixed so results never depend on threading
CHUNK = 512
_PSD_TOL = 1e-10


@dataclass(frozen=True)
class SamplerConfig:
    T: float = 10.0
    n_steps: int = 200
    batch: int = 512
    seed: int = 0
    mode: str = "sde"
    # the last Euler step is deterministic by default (no noise injected at t -> 0)
    final_noise: bool = False
    threads: int = 1

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.mode not in ("sde", "analytic_oracle"):
            raise ValueError(f"mode must be 'sde' or 'analytic_oracle', got {self.mode!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class SampleBatch:
    samples: np.ndarray
    config: SamplerConfig
    stream_ids: np.ndarray = field(repr=False)

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def cov(self) -> np.ndarray:
        xc = self.samples - self.mean
        return xc.T @ xc / self.samples.shape[0]


def _trajectory_draws(seed: int, indices: range, n_steps: int, D: int) -> np.ndarray:
    """Row 0 of each stream seeds the initial state, rows 1.. drive the increments."""
    out = np.empty((len(indices), n_steps + 1, D))
    for j, i in enumerate(indices):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        out[j] = rng.standard_normal((n_steps + 1, D))
    return out


def _integrate_chunk(model, spec, cfg, schedule, indices: range) -> np.ndarray:
    draws = _trajectory_draws(cfg.seed, indices, cfg.n_steps, model.dim)
    x = draws[:, 0, :]
    noise = draws[:, 1:, :]
    dt = cfg.dt
    sq = np.sqrt(dt)
    for i in range(cfg.n_steps):
        t_fwd = cfg.T - i * dt
        try:
            drift = 0.5 * x + guided_score(spec, model, x, t_fwd, schedule)
        except ValueError as exc:
            raise ValueError(f"step {i} (t={t_fwd:.6g}): {exc}") from exc
        x = x + dt * drift
        if i < cfg.n_steps - 1 or cfg.final_noise:
            x = x + sq * noise[:, i, :]
    return x


def backward_sample(model: LinearScoreModel, spec: GuidanceSpec, cfg: SamplerConfig,
                    schedule: NoiseSchedule) -> SampleBatch:
    if cfg.T > schedule.horizon:
        raise ValueError(f"sampler horizon {cfg.T} exceeds schedule horizon {schedule.horizon}")
    chunks = [range(s, min(s + CHUNK, cfg.batch)) for s in range(0, cfg.batch, CHUNK)]
    if cfg.threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            parts = list(pool.map(lambda r: _integrate_chunk(model, spec, cfg, schedule, r), chunks))
    else:
        parts = [_integrate_chunk(model, spec, cfg, schedule, r) for r in chunks]
    samples = np.concatenate(parts, axis=0)
    samples.setflags(write=False)
    return SampleBatch(samples, cfg, np.arange(cfg.batch))


def analytic_posterior(stats: GaussianDist, g, y: float, sigma: float) -> GaussianDist:
    """Gaussian ``stats`` conditioned on ``y = g^T x + N(0, sigma^2)``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    g = np.asarray(g, dtype=float)
    sg = stats.cov @ g
    denom = sigma ** 2 + g @ sg
    mean = stats.mean + (y - g @ stats.mean) / denom * sg
    cov = stats.cov - np.outer(sg, sg) / denom
    return GaussianDist(mean, 0.5 * (cov + cov.T))


def guided_posterior(model: LinearScoreModel, spec: GuidanceSpec) -> GaussianDist:
    """Limit law of the guided backward process for a linear model."""
    dist = model.implied_gaussian()
    if spec.kind == "none":
        return dist
    if spec.kind != "loss" or spec.beta_rule.kind == "constant" or spec.gamma != 1.0:
        raise ValueError("an analytic posterior exists only for look-ahead guidance with a theory beta")
    return analytic_posterior(dist, spec.g, spec.y, spec.sigma)


def oracle_sample(posterior: GaussianDist, batch: int, seed: int,
                  config: SamplerConfig | None = None) -> SampleBatch:
    w = np.linalg.eigvalsh(posterior.cov)
    scale = max(1.0, float(np.max(np.abs(w)))) if w.size else 1.0
    if w.size and w[0] < -_PSD_TOL * scale:
        raise ValueError(f"covariance has eigenvalue {w[0]:.3g} < 0")
    root = psd_sqrt(posterior.cov)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    samples = posterior.mean + rng.standard_normal((batch, posterior.dim)) @ root.T
    samples.setflags(write=False)
    if config is None:
        config = SamplerConfig(batch=batch, seed=seed, mode="analytic_oracle")
    return SampleBatch(samples, config, np.arange(batch))


def sample(model: LinearScoreModel, spec: GuidanceSpec, cfg: SamplerConfig,
           schedule: NoiseSchedule) -> SampleBatch:
    """Dispatch on ``cfg.mode``."""
    if cfg.mode == "analytic_oracle":
        return oracle_sample(guided_posterior(model, spec), cfg.batch, cfg.seed, cfg)
    return backward_sample(model, spec, cfg, schedule)


def save_batch(path: str | Path, batch: SampleBatch, extra: dict[str, Any] | None = None,
               meta: dict[str, Any] | None = None) -> None:
    """Samples in the dataset format plus a ``<path>.json`` run sidecar."""
    path = Path(path)
    save_dataset(path, Dataset(batch.samples, seed=batch.config.seed), meta)
    meta = {"sampler": batch.config.to_dict(), **(extra or {})}
    atomic_write_text(path.with_name(path.name + ".json"), json.dumps(meta, indent=2, sort_keys=True) + "\n")


# -- off-support drift of naive guidance -------------------------------------

def _inner_integrand(u):
    # 2u / h(u^2), continuous at u = 0 with value 2
    u = np.asarray(u, dtype=float)
    h = h_sqrt_schedule(u * u)
    return np.where(u > 0, 2.0 * u / np.where(u > 0, h, 1.0), 2.0)


def _gauss_legendre(f, a, b, nodes: int):
    x, w = np.polynomial.legendre.leggauss(nodes)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    mid = 0.5 * (a + b)
    half = 0.5 * (b - a)
    pts = mid[..., None] + half[..., None] * x
    return half * np.sum(w * f(pts), axis=-1)


def naive_offsupport_expectation(b0: float, T: float, nodes: int | None = None) -> float:
    """Coefficient ``C`` of ``g`` in the expected off-support drift of naive guidance.

    ``C = b0 * int_0^T exp(-int_0^t ds / h(s) + t/2) dt`` with
    ``h(s) = 1 - exp(-sqrt(s))``.  Both integrals are rewritten with
    ``s = u^2`` and ``t = v^2`` to remove the square-root singularity at zero.
    ``nodes=None`` uses adaptive quadrature; an integer uses a fixed
    Gauss-Legendre rule with that many nodes for both levels.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if b0 == 0:
        return 0.0
    rv = np.sqrt(T)
    if nodes is None:
        def inner(v):
            return integrate.quad(_inner_integrand, 0.0, v, epsabs=1e-14, epsrel=1e-13)[0]

        def outer(v):
            return np.exp(-inner(v) + 0.5 * v * v) * 2.0 * v

        val = integrate.quad(outer, 0.0, rv, epsabs=1e-14, epsrel=1e-12, limit=200)[0]
    else:
        def outer_vec(v):
            inner = _gauss_legendre(_inner_integrand, np.zeros_like(v), v, nodes)
            return np.exp(-inner + 0.5 * v * v) * 2.0 * v

        val = float(_gauss_legendre(outer_vec, 0.0, rv, nodes))
    return float(b0 * val)
