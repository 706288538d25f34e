"""Generative optimisation loops driven by gradient guidance.

``run_alg1`` keeps the pre-trained score fixed and only re-targets the
guidance each round.  ``run_alg2`` additionally refits the score bias on a
two-component mix of the pre-training mean and the latest batch mean, holding
the covariance term fixed.

In exact-mean mode a round's batch mean is replaced by the analytic mean of
the guided output distribution, which isolates the deterministic dynamics.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from .dataset import mean_off_support_ratio, off_support_ratio
from .guidance import BetaRule, GuidanceSpec, target_y
from .objective import Objective, adapted_smoothness, regularized_opt, span_opt
from .sampler import SamplerConfig, guided_posterior, sample
from .schedule import NoiseSchedule
from .score import FrozenCov, FullLinear, LinearScoreModel, Subspace, freeze, refit_bias_frozen

__all__ = [
    "BatchSchedule",
    "Alg2Rules",
    "OptConfig",
    "RoundRecord",
    "OptRunState",
    "run_alg1",
    "run_alg2",
    "exact_mean_recursion",
    "lambda_rule",
    "eta_rule",
    "round_seed",
    "CSV_COLUMNS",
    "csv_rows",
]

BATCH_CAP = 65536
CSV_COLUMNS = ("k", "f", "gap_to_x_star", "off_support_ratio", "y_k", "g_norm", "batch_size")


@dataclass(frozen=True)
class BatchSchedule:
    """``constant`` uses ``B`` every round; ``geometric`` uses ``B0 * ratio**k`` capped."""

    kind: str = "constant"
    B: int = 512
    B0: int = 256
    ratio: float = 4.0
    cap: int = BATCH_CAP

    def __post_init__(self):
        if self.kind not in ("constant", "geometric"):
            raise ValueError(f"unknown batch schedule {self.kind!r}")
        if min(self.B, self.B0, self.cap) < 1 or self.ratio < 1:
            raise ValueError("batch sizes must be >= 1 and ratio >= 1")

    def size(self, k: int) -> int:
        if self.kind == "constant":
            return self.B
        # exponent clipped so the float never overflows before the cap applies
        e = min(k, 64)
        return int(min(self.cap, self.B0 * self.ratio ** e))


@dataclass(frozen=True)
class Alg2Rules:
    eta_rule: str = "two_over_L_plus_2lambda"
    eta: float | None = None
    lambda_rule: str = "L_logK_over_4K"
    lam: float | None = None

    def __post_init__(self):
        if self.eta_rule not in ("two_over_L_plus_2lambda", "explicit"):
            raise ValueError(f"unknown eta rule {self.eta_rule!r}")
        if self.lambda_rule not in ("L_logK_over_4K", "explicit"):
            raise ValueError(f"unknown lambda rule {self.lambda_rule!r}")
        if self.eta_rule == "explicit" and not (self.eta and self.eta > 0):
            raise ValueError("explicit eta rule needs eta > 0")
        if self.lambda_rule == "explicit" and not (self.lam and self.lam > 0):
            raise ValueError("explicit lambda rule needs lam > 0")


@dataclass(frozen=True)
class OptConfig:
    K: int = 20
    lam: float = 1.0
    batch_schedule: BatchSchedule = field(default_factory=BatchSchedule)
    sigma: float = 1.0
    beta_rule: BetaRule = field(default_factory=BetaRule)
    exact_mean: bool = False
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    alg2: Alg2Rules | None = None
    # "naive" swaps in the Jacobian-free guidance; only meaningful with SDE sampling
    guidance: str = "loss"
    # when set, y_k = delta + g_k^T z_{k-1} instead of the one-step target
    delta: float | None = None

    def __post_init__(self):
        if self.guidance not in ("loss", "naive"):
            raise ValueError(f"guidance must be 'loss' or 'naive', got {self.guidance!r}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class RoundRecord:
    k: int
    z: np.ndarray
    g: np.ndarray
    y: float
    f: float
    gap: float
    off_support_ratio: float | None
    batch_size: int
    weighted_mean: np.ndarray | None = None
    # mean of per-sample off/on-support ratios; None in exact-mean mode
    sample_ratio: float | None = None


@dataclass
class OptRunState:
    k: int
    model: LinearScoreModel
    x_star: np.ndarray
    f_star: float
    history: list[RoundRecord] = field(default_factory=list)
    lam: float = 0.0
    eta: float = 0.0
    # state before the first round (z_0 = pre-training mean); not part of history
    initial: RoundRecord | None = None

    @property
    def means(self) -> list[np.ndarray]:
        return [r.z for r in self.history]

    @property
    def gaps(self) -> np.ndarray:
        return np.array([r.gap for r in self.history])


def lambda_rule(L: float, K: int) -> float:
    """``L log K / (4K)``."""
    if K < 2:
        raise ValueError("the lambda rule needs K >= 2")
    return L * math.log(K) / (4.0 * K)


def eta_rule(L: float, lam: float) -> float:
    """``2 / (L + 2 lam)``."""
    return 2.0 / (L + 2.0 * lam)


def round_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1, np.uint64)[0])


def _ratio(z, model) -> float | None:
    basis = model.basis
    if basis is None:
        return None
    if not np.any(z):
        return 0.0
    return float(off_support_ratio(z, basis))


def _initial_record(obj, z, f_star, model) -> RoundRecord:
    f = float(obj.value(z))
    return RoundRecord(0, z.copy(), np.zeros_like(z), float("nan"), f, f_star - f, _ratio(z, model), 0)


def _target(cfg: OptConfig, model, g, z, eta: float) -> float:
    if cfg.delta is None:
        return target_y(model, g, cfg.sigma, eta)
    return float(cfg.delta + g @ z)


def _draw_mean(model, spec, cfg: OptConfig, schedule, seed: int, k: int):
    if cfg.exact_mean:
        return np.array(guided_posterior(model, spec).mean), 0, None
    B = cfg.batch_schedule.size(k)
    scfg = SamplerConfig(
        T=cfg.sampler.T, n_steps=cfg.sampler.n_steps, batch=B, seed=round_seed(seed, k),
        mode=cfg.sampler.mode, final_noise=cfg.sampler.final_noise, threads=cfg.sampler.threads,
    )
    try:
        batch = sample(model, spec, scfg, schedule)
    except ValueError as exc:
        raise ValueError(f"round {k}: {exc}") from exc
    ratio = None if model.basis is None else mean_off_support_ratio(batch.samples, model.basis)
    return batch.mean, B, ratio


def _grad(obj: Objective, z: np.ndarray, k: int) -> np.ndarray:
    try:
        return np.asarray(obj.grad(z), dtype=float)
    except ValueError as exc:
        raise ValueError(f"round {k}: objective gradient failed at z: {exc}") from exc


def run_alg1(model: LinearScoreModel, obj: Objective, cfg: OptConfig, schedule: NoiseSchedule,
             seed: int = 0) -> OptRunState:
    """Guidance-only optimisation; the score model is never changed."""
    stats = model.implied_gaussian()
    L = adapted_smoothness(obj, stats)
    if math.isfinite(L) and cfg.lam <= L:
        warnings.warn(f"lambda={cfg.lam:.4g} does not exceed the smoothness L={L:.4g}", stacklevel=2)
    x_star = regularized_opt(obj, stats, cfg.lam, model.basis)
    f_star = float(obj.value(x_star))
    eta = 1.0 / cfg.lam
    state = OptRunState(0, model, x_star, f_star, lam=cfg.lam, eta=eta)
    z = np.array(stats.mean)
    state.initial = _initial_record(obj, z, f_star, model)
    for k in range(1, cfg.K + 1):
        g = _grad(obj, z, k)
        y = _target(cfg, model, g, z, eta)
        spec = GuidanceSpec(cfg.guidance, g, y, cfg.sigma, cfg.beta_rule)
        z, B, sr = _draw_mean(model, spec, cfg, schedule, seed, k)
        f = float(obj.value(z))
        state.history.append(RoundRecord(k, z, g, y, f, f_star - f, _ratio(z, model), B, None, sr))
        state.k = k
    return state


def _alg2_params(obj: Objective, stats, cfg: OptConfig) -> tuple[float, float]:
    rules = cfg.alg2 or Alg2Rules()
    L = adapted_smoothness(obj, stats)
    if rules.lambda_rule == "explicit":
        lam = rules.lam
    else:
        if not math.isfinite(L):
            raise ValueError("the lambda rule needs a smooth objective")
        lam = lambda_rule(L, cfg.K)
        if not lam > 0:
            raise ValueError(f"the lambda rule gives lambda = {lam:.6g} (L = {L:.6g}); set an explicit lambda")
    eta = rules.eta if rules.eta_rule == "explicit" else eta_rule(L, lam)
    return lam, eta


def run_alg2(model: LinearScoreModel, obj: Objective, cfg: OptConfig, schedule: NoiseSchedule,
             seed: int = 0) -> OptRunState:
    """Adaptive fine-tuning: each round refits the score bias to
    ``(1 - w) mu_bar + w z_k`` with ``w = 1 - eta * lam``."""
    if isinstance(model, FullLinear):
        model = freeze(model)
    if not isinstance(model, (FrozenCov, Subspace)):
        raise TypeError("adaptive fine-tuning needs a FrozenCov or Subspace model")
    stats = model.implied_gaussian()
    lam, eta = _alg2_params(obj, stats, cfg)
    w = 1.0 - eta * lam
    if not 0.0 < w < 1.0:
        raise ValueError(f"mixing weight w = 1 - eta*lambda = {w:.6g} must lie in (0, 1)")
    if model.basis is not None:
        x_star, f_star = span_opt(obj, model.basis)
    else:
        x_star = regularized_opt(obj, stats, lam)
        f_star = float(obj.value(x_star))
    mu_bar = np.array(stats.mean)
    state = OptRunState(0, model, x_star, f_star, lam=lam, eta=eta)
    z = mu_bar.copy()
    state.initial = _initial_record(obj, z, f_star, model)
    current = model
    for k in range(1, cfg.K + 1):
        g = _grad(obj, z, k)
        xw = (1.0 - w) * mu_bar + w * z
        current = refit_bias_frozen(model, xw)
        y = _target(cfg, current, g, z, eta)
        spec = GuidanceSpec(cfg.guidance, g, y, cfg.sigma, cfg.beta_rule)
        z, B, sr = _draw_mean(current, spec, cfg, schedule, seed, k)
        f = float(obj.value(z))
        state.history.append(RoundRecord(k, z, g, y, f, f_star - f, _ratio(z, model), B, xw, sr))
        state.k = k
    state.model = current
    return state


def exact_mean_recursion(model: LinearScoreModel, obj: Objective, cfg: OptConfig,
                         alg: int = 1) -> list[np.ndarray]:
    """Mean iterates with sampling noise removed; shares the run loop's code path."""
    cfg = replace(cfg, exact_mean=True)
    schedule = NoiseSchedule.constant(horizon=max(cfg.sampler.T, 1.0))
    run = run_alg1 if alg == 1 else run_alg2
    return run(model, obj, cfg, schedule).means


def csv_rows(state: OptRunState) -> list[tuple]:
    return [
        (r.k, r.f, r.gap, r.off_support_ratio, r.y, float(np.linalg.norm(r.g)), r.batch_size)
        for r in state.history
    ]
