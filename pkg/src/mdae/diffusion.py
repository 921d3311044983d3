"""Noise schedules, forward noising, DDIM reverse steps and deterministic inversion.

Functions here only use arithmetic on their tensor arguments, so numpy arrays
and torch tensors both work. A denoiser is any callable ``(x_t, t, z) -> x0_hat``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

Denoiser = Callable[[object, int, object], object]

KINDS = ("cosine", "linear")


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """``alpha_bar[t]`` for t = 0..T with ``alpha_bar[0] == 1``."""

    kind: str
    T: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.array(self.alpha_bar, dtype=np.float64)
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    def ab(self, t: int) -> float:
        return float(self.alpha_bar[t])

    def timesteps(self, steps: int) -> list[int]:
        """Evenly strided grid 0 = t_0 < t_1 < ... < t_steps = T."""
        if not 1 <= steps <= self.T:
            raise ValueError(f"steps must be in 1..{self.T}, got {steps}")
        grid = [int(round(i * self.T / steps)) for i in range(steps + 1)]
        if len(set(grid)) != len(grid):
            raise ValueError(f"{steps} steps do not evenly subsample T={self.T}")
        return grid

    def to_json(self) -> dict:
        return {"kind": self.kind, "T": self.T}


def make_schedule(kind: str = "cosine", T: int = 1000, s: float = 0.008) -> NoiseSchedule:
    """Cosine (squared-cosine profile with offset ``s``) or linear-variance schedule."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    t = np.arange(T + 1)
    if kind == "cosine":
        f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        # Per-step beta is capped at 0.999, which keeps alpha_bar[T] > 0.
        betas = np.clip(1 - ab[1:] / ab[:-1], 0.0, 0.999)
    elif kind == "linear":
        betas = np.linspace(1e-4 * 1000 / T, 0.02 * 1000 / T, T)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; choose from {KINDS}")
    ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(kind, T, ab)


def _same_shape(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _coef(sched: NoiseSchedule, t, like):
    """sqrt(alpha_bar) and sqrt(1 - alpha_bar) for scalar t, or per-sample t broadcast over ``like``."""
    ab = sched.alpha_bar[np.asarray(t)]
    if np.ndim(ab) == 0:
        return math.sqrt(ab), math.sqrt(1.0 - ab)
    shape = (-1,) + (1,) * (like.ndim - 1)
    a, b = np.sqrt(ab).reshape(shape), np.sqrt(1.0 - ab).reshape(shape)
    if hasattr(like, "new_tensor"):
        a, b = like.new_tensor(a), like.new_tensor(b)
    return a, b


def q_sample(x0, t, eps, sched: NoiseSchedule):
    _same_shape(x0, eps, "q_sample")
    a, b = _coef(sched, t, x0)
    return a * x0 + b * eps


def eps_from_x0(x_t, x0_hat, t, sched: NoiseSchedule):
    _same_shape(x_t, x0_hat, "eps_from_x0")
    if np.any(sched.alpha_bar[np.asarray(t)] >= 1.0):
        raise ValueError(f"alpha_bar at t={t} is 1; noise is undefined")
    a, b = _coef(sched, t, x_t)
    return (x_t - a * x0_hat) / b


def _check_t(sched: NoiseSchedule, t: int):
    if not 1 <= t <= sched.T:
        raise ValueError(f"t must be in 1..{sched.T}, got {t}")


def _randn_like(x, rng):
    if hasattr(x, "new_tensor"):
        import torch

        gen = rng if isinstance(rng, torch.Generator) else None
        return torch.randn(x.shape, generator=gen, dtype=x.dtype, device=x.device)
    rng = rng if rng is not None else np.random.default_rng()
    return rng.standard_normal(x.shape)


def reverse_step(x_t, t: int, z, denoiser: Denoiser, sched: NoiseSchedule, mode: str = "deterministic",
                 rng=None, t_prev: int | None = None):
    """Predict x0 and diffuse it back to ``t_prev`` (default t - 1).

    ``deterministic`` reuses the implied noise (DDIM, eta = 0); ``stochastic``
    draws fresh Gaussian noise from ``rng``.
    """
    _check_t(sched, t)
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev must be in 0..{t - 1}, got {t_prev}")
    x0_hat = denoiser(x_t, t, z)
    _same_shape(x0_hat, x_t, "denoiser output")
    if mode == "deterministic":
        eps = eps_from_x0(x_t, x0_hat, t, sched)
    elif mode == "stochastic":
        eps = _randn_like(x_t, rng)
    else:
        raise ValueError(f"mode must be 'deterministic' or 'stochastic', got {mode!r}")
    a, b = _coef(sched, t_prev, x_t)
    return a * x0_hat + b * eps


def inversion_step(x_prev, t_prev: int, t: int, z, denoiser: Denoiser, sched: NoiseSchedule):
    """Deterministically diffuse x at ``t_prev`` up to ``t``.

    From ``t_prev = 0`` the implied noise is undefined (alpha_bar = 1), so the
    clean sample is taken as the state at the first grid level: x_t = x_prev.
    """
    if t_prev == 0:
        return x_prev
    x0_hat = denoiser(x_prev, t_prev, z)
    _same_shape(x0_hat, x_prev, "denoiser output")
    eps = eps_from_x0(x_prev, x0_hat, t_prev, sched)
    a, b = _coef(sched, t, x_prev)
    return a * x0_hat + b * eps


@dataclass
class StochasticCode:
    """Terminal state x_T from inversion, tagged with the step grid that produced it."""

    x_T: object
    steps: int


def decode(x_T, z, denoiser: Denoiser, sched: NoiseSchedule, steps: int | None = None,
           mode: str = "deterministic", rng=None):
    """Run the reverse chain from T down to 0 on an evenly strided grid; return x0_hat."""
    if isinstance(x_T, StochasticCode):
        if steps is not None and steps != x_T.steps:
            raise ValueError(f"code was inverted with {x_T.steps} steps; decoding with {steps} is unsupported")
        steps, x_T = x_T.steps, x_T.x_T
    steps = steps or sched.T
    grid = sched.timesteps(steps)
    x = x_T
    for t, t_prev in zip(grid[:0:-1], grid[-2::-1]):
        x = reverse_step(x, t, z, denoiser, sched, mode, rng, t_prev=t_prev)
    return x


def stochastic_encode(x0, z, denoiser: Denoiser, sched: NoiseSchedule, steps: int | None = None) -> StochasticCode:
    """Deterministic inversion x_0 -> x_T along the same grid ``decode`` uses."""
    steps = steps or sched.T
    grid = sched.timesteps(steps)
    x = x0
    for t_prev, t in zip(grid[:-1], grid[1:]):
        x = inversion_step(x, t_prev, t, z, denoiser, sched)
    return StochasticCode(x, steps)


def sample(shape, z, denoiser: Denoiser, sched: NoiseSchedule, steps: int | None = None, rng=None, like=None):
    """Unconditional-prior draw x_T ~ N(0, I) decoded stochastically."""
    x_T = _randn_like(like.new_zeros(shape) if like is not None else np.zeros(shape), rng)
    return decode(x_T, z, denoiser, sched, steps, mode="stochastic", rng=rng)
