"""Discrete variance schedule and the closed-form diffusion updates.

All functions are pure and accept either numpy arrays or torch tensors for the
latent arguments; coefficients are computed in float64 and applied as Python
scalars so autograd flows through torch inputs untouched.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch

TERMINAL = -1  # t_prev value marking the final reverse step

SCHEDULE_KINDS = ("linear", "scaled_linear")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    kind: str = "scaled_linear"
    betas: np.ndarray = field(init=False, repr=False, compare=False)
    alphas: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bars: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ValueError(
                f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}"
            )
        if self.kind == "linear":
            betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        elif self.kind == "scaled_linear":
            betas = np.linspace(
                math.sqrt(self.beta_start), math.sqrt(self.beta_end), self.T, dtype=np.float64
            ) ** 2
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        for name, arr in (("betas", betas), ("alphas", alphas), ("alpha_bars", alpha_bars)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def check_timestep(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T})")
        return t

    def to_dict(self) -> dict[str, Any]:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end, "kind": self.kind}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NoiseSchedule":
        return cls(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]), str(d["kind"]))

    @classmethod
    def from_json(cls, s: str) -> "NoiseSchedule":
        return cls.from_dict(json.loads(s))


def build_schedule(
    T: int = 1000,
    beta_start: float = 8.5e-4,
    beta_end: float = 0.012,
    kind: str = "scaled_linear",
) -> NoiseSchedule:
    return NoiseSchedule(T, beta_start, beta_end, kind)


def _check_shapes(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _alpha_bar(sched: NoiseSchedule, t, like):
    """abar_t as a Python float, or as a broadcastable per-sample column when
    ``t`` is an integer array (batched training)."""
    if np.ndim(t) == 0:
        return float(sched.alpha_bars[sched.check_timestep(t)])
    t = np.asarray(t, dtype=np.int64)
    if t.min() < 0 or t.max() >= sched.T:
        raise IndexError(f"timestep outside [0, {sched.T})")
    ab = sched.alpha_bars[t].reshape((-1,) + (1,) * (like.ndim - 1))
    if isinstance(like, np.ndarray):
        return ab
    return torch.as_tensor(ab, dtype=like.dtype)


def _sqrt(v):
    return math.sqrt(v) if isinstance(v, float) else v ** 0.5


def add_noise(z0, t, eps, sched: NoiseSchedule):
    """Jump straight to timestep ``t``: sqrt(abar)*z0 + sqrt(1-abar)*eps.

    The noise coefficient is the square root of ``1 - abar`` so that this and
    :func:`estimate_z0` are exact inverses.
    """
    _check_shapes(z0, eps)
    ab = _alpha_bar(sched, t, z0)
    return _sqrt(ab) * z0 + _sqrt(1.0 - ab) * eps


def estimate_z0(zt, t, eps_pred, sched: NoiseSchedule):
    _check_shapes(zt, eps_pred)
    ab = _alpha_bar(sched, t, zt)
    return (zt - _sqrt(1.0 - ab) * eps_pred) / _sqrt(ab)


def ddim_sigma(sched: NoiseSchedule, t_cur: int, t_prev: int, eta: float) -> float:
    ab_t = float(sched.alpha_bars[t_cur])
    ab_p = float(sched.alpha_bars[t_prev])
    return eta * math.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_p)


def reverse_step(zt, t_cur: int, t_prev: int, eps_pred, sched: NoiseSchedule,
                 eta: float = 0.0, noise=None):
    """One DDIM-family update from ``t_cur`` to ``t_prev``.

    Pass ``t_prev=TERMINAL`` for the last step; the denoised estimate is
    returned directly. With ``eta == 0`` the ``noise`` argument is never read.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    t_cur = sched.check_timestep(t_cur)
    z0_hat = estimate_z0(zt, t_cur, eps_pred, sched)
    if t_prev == TERMINAL:
        return z0_hat
    t_prev = sched.check_timestep(t_prev)
    if t_prev >= t_cur:
        raise ValueError(f"t_prev ({t_prev}) must be below t_cur ({t_cur})")
    ab_p = float(sched.alpha_bars[t_prev])
    sigma = ddim_sigma(sched, t_cur, t_prev, eta) if eta > 0 else 0.0
    out = math.sqrt(ab_p) * z0_hat + math.sqrt(max(1.0 - ab_p - sigma**2, 0.0)) * eps_pred
    if sigma > 0:
        if noise is None:
            raise ValueError("stochastic step (eta > 0) needs a noise tensor")
        _check_shapes(zt, noise)
        out = out + sigma * noise
    return out


def select_inference_timesteps(T: int, steps: int) -> np.ndarray:
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    stride = T // steps
    return (T - 1 - stride * np.arange(steps)).astype(np.int64)
