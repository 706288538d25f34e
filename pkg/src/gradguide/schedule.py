"""Forward-process noise schedule.

The forward Ornstein-Uhlenbeck process ``dX = -q(t)/2 X dt + sqrt(q(t)) dW``
shrinks the data by ``alpha(t) = exp(-1/2 int_0^t q)`` and adds Gaussian noise
of variance ``h(t) = 1 - alpha(t)**2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

__all__ = [
    "NoiseSchedule",
    "alpha_h",
    "h_sqrt_schedule",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Rate ``q(t)`` on ``[0, horizon]``: constant or piecewise-linear in time.

    Build with :meth:`constant` or :meth:`tabulated`.
    """

    kind: str = "constant"
    rate: float = 1.0
    knots: tuple[tuple[float, float], ...] = ()
    horizon: float = 10.0
    _cum: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        if self.kind == "constant":
            if not self.rate > 0:
                raise ValueError(f"rate must be positive, got {self.rate}")
        elif self.kind == "tabulated":
            t, q = self._knot_arrays()
            if t.size < 2:
                raise ValueError("a tabulated rate needs at least two knots")
            if t[0] != 0.0:
                raise ValueError("the first knot must sit at t=0")
            if np.any(np.diff(t) <= 0):
                raise ValueError("knot times must be strictly increasing")
            if t[-1] < self.horizon:
                raise ValueError(f"knots end at {t[-1]} before the horizon {self.horizon}")
            if np.any(q <= 0):
                raise ValueError("rate q(t) must be positive at every knot")
            # exact cumulative integral of the piecewise-linear rate at each knot
            cum = np.concatenate([[0.0], np.cumsum(0.5 * (q[1:] + q[:-1]) * np.diff(t))])
            object.__setattr__(self, "_cum", cum)
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def constant(cls, rate: float = 1.0, horizon: float = 10.0) -> "NoiseSchedule":
        return cls(kind="constant", rate=float(rate), horizon=float(horizon))

    @classmethod
    def tabulated(cls, knots: Sequence[Sequence[float]], horizon: float) -> "NoiseSchedule":
        knots = tuple((float(t), float(q)) for t, q in knots)
        return cls(kind="tabulated", knots=knots, horizon=float(horizon))

    def _knot_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        arr = np.asarray(self.knots, dtype=float).reshape(-1, 2)
        return arr[:, 0], arr[:, 1]

    def rate_at(self, t):
        t = self._check(t)
        if self.kind == "constant":
            return np.full_like(t, self.rate)
        kt, kq = self._knot_arrays()
        return np.interp(t, kt, kq)

    def integrated_rate(self, t):
        """``int_0^t q(s) ds``, exact for both kinds."""
        t = self._check(t)
        if self.kind == "constant":
            return self.rate * t
        kt, kq = self._knot_arrays()
        i = np.clip(np.searchsorted(kt, t, side="right") - 1, 0, kt.size - 2)
        dt = t - kt[i]
        slope = (kq[i + 1] - kq[i]) / (kt[i + 1] - kt[i])
        return self._cum[i] + kq[i] * dt + 0.5 * slope * dt * dt

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.horizon) or np.any(np.isnan(t)):
            raise ValueError(f"time outside [0, {self.horizon}]: {t}")
        return t

    def alpha_h(self, t):
        """Return ``(alpha(t), h(t))``; scalars in, scalars out."""
        alpha = np.exp(-0.5 * self.integrated_rate(t))
        h = -np.expm1(-self.integrated_rate(t))
        if alpha.ndim == 0:
            return float(alpha), float(h)
        return alpha, h

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "constant":
            return {"kind": "constant", "rate": self.rate, "horizon": self.horizon}
        return {"kind": "tabulated", "knots": [list(k) for k in self.knots], "horizon": self.horizon}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NoiseSchedule":
        kind = d.get("kind", "constant")
        horizon = float(d.get("horizon", 10.0))
        if kind == "constant":
            return cls.constant(float(d.get("rate", 1.0)), horizon)
        if kind == "tabulated":
            return cls.tabulated(d["knots"], horizon)
        raise ValueError(f"unknown schedule kind {kind!r}")


def alpha_h(schedule: NoiseSchedule, t):
    return schedule.alpha_h(t)


def h_sqrt_schedule(t):
    """``h(t) = 1 - exp(-sqrt(t))``, the schedule used by the naive-guidance bound.

    Not generated by any rate ``q``; only the off-support quadrature uses it.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be non-negative")
    out = -np.expm1(-np.sqrt(t))
    return float(out) if out.ndim == 0 else out
