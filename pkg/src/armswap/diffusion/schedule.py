"""Noise schedules, the closed-form forward marginal and the ancestral reverse step."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import InvalidArgument

log = logging.getLogger(__name__)

SIGMA_MODES = ("beta", "beta_tilde")


@dataclass
class NoiseSchedule:
    """Tables indexed by timestep ``t`` in ``1..T`` (index ``t - 1`` in the arrays)."""

    T: int
    betas: np.ndarray
    sigma_mode: str = "beta_tilde"

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        """``alpha_bar_t`` with the convention ``alpha_bar_0 = 1``."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def check(self, t):
        tt = np.asarray(t)
        if (tt < 1).any() or (tt > self.T).any():
            raise InvalidArgument(f"timestep {t} outside [1, {self.T}]")

    def step_coefficients(self, t: int, t_prev: int | None = None):
        """(alpha, beta, sigma^2) for the jump t -> t_prev (default t - 1)."""
        t_prev = t - 1 if t_prev is None else t_prev
        ab_t, ab_prev = self.alpha_bar(t), self.alpha_bar(t_prev)
        alpha = ab_t / ab_prev
        beta = 1.0 - alpha
        if self.sigma_mode == "beta":
            var = beta
        else:
            var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
        return alpha, beta, var

    def to_dict(self):
        return {"T": self.T, "betas": self.betas.tolist(), "sigma_mode": self.sigma_mode}

    @classmethod
    def from_dict(cls, d):
        return cls(d["T"], np.asarray(d["betas"]), d["sigma_mode"])


def make_schedule(T=1000, beta_start=1e-4, beta_end=0.02, kind="linear",
                  sigma_mode="beta_tilde") -> NoiseSchedule:
    if T < 2:
        raise InvalidArgument("T must be >= 2")
    if not 0 < beta_start <= beta_end < 1:
        raise InvalidArgument("need 0 < beta_start <= beta_end < 1")
    if sigma_mode not in SIGMA_MODES:
        raise InvalidArgument(f"unknown sigma_mode {sigma_mode!r}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = np.clip(1 - ab[1:] / ab[:-1], beta_start, 0.999)
        betas = np.maximum.accumulate(betas)
    else:
        raise InvalidArgument(f"unknown schedule kind {kind!r}")
    sched = NoiseSchedule(T, betas, sigma_mode)
    if sched.alpha_bars[-1] >= 0.05:
        log.warning("schedule keeps alpha_bar_T = %.3g >= 0.05 of the signal", sched.alpha_bars[-1])
    return sched


def _bcast(values, like: torch.Tensor):
    v = torch.as_tensor(values, dtype=like.dtype)
    if v.ndim == 0:
        return v
    return v.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(z0, t, eps, sched: NoiseSchedule):
    """``z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``; ``t`` is an int or per-batch tensor."""
    sched.check(t)
    z0 = torch.as_tensor(z0)
    eps = torch.as_tensor(eps, dtype=z0.dtype)
    idx = np.asarray(t.cpu() if torch.is_tensor(t) else t) - 1
    ab = sched.alpha_bars[idx]
    return _bcast(np.sqrt(ab), z0) * z0 + _bcast(np.sqrt(1.0 - ab), z0) * eps


def ddpm_step(z_t, eps_hat, t: int, sched: NoiseSchedule, noise=None, t_prev: int | None = None):
    """One ancestral step: mean from the predicted noise plus ``sigma_t * noise``.

    ``t_prev`` allows strided sampling; the effective alpha/beta of the jump
    are derived from the alpha-bar table.  No noise is added on the final jump.
    """
    sched.check(t)
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise InvalidArgument(f"t_prev {t_prev} must be in [0, {t})")
    alpha, beta, var = sched.step_coefficients(t, t_prev)
    ab_t = sched.alpha_bar(t)
    mean = (z_t - (beta / math.sqrt(1.0 - ab_t)) * eps_hat) / math.sqrt(alpha)
    if t_prev == 0 or noise is None:
        return mean
    return mean + math.sqrt(var) * noise


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """Descending subset of ``1..T`` with ``steps`` entries (all of them if steps >= T)."""
    steps = max(1, min(steps, T))
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return [int(v) for v in ts[::-1]]
