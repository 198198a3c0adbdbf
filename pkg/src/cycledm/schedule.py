"""Linear variance schedule and the derived per-step tables.

All tables are float64 arrays of length ``T + 1`` indexed directly by the
timestep ``t`` (index 0 is the noise-free convention: ``alpha_bars[0] == 1``,
``betas[0] == 0``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta/alpha tables for a T-step diffusion process."""

    T: int
    betas: np.ndarray        # beta_t, betas[0] == 0 (unused)
    alphas: np.ndarray       # alpha_t = 1 - beta_t
    alpha_bars: np.ndarray   # cumulative product of alphas, alpha_bars[0] == 1
    sigmas: np.ndarray       # sigma_t = sqrt(beta_t)

    def __post_init__(self):
        for name in ("betas", "alphas", "alpha_bars", "sigmas"):
            arr = getattr(self, name)
            if arr.shape != (self.T + 1,):
                raise ValueError(f"{name} must have shape ({self.T + 1},), got {arr.shape}")

    def check_t(self, t: int, low: int = 1) -> int:
        t = int(t)
        if not low <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{low}, {self.T}]")
        return t


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build the linear beta schedule from ``beta_start`` to ``beta_end``.

    The T betas are linearly interpolated inclusive of both endpoints
    (for T == 1 the single beta is ``beta_start``, which must then equal
    ``beta_end``).
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be an integer >= 1, got {T!r}")
    T = int(T)
    for name, v in (("beta_start", beta_start), ("beta_end", beta_end)):
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if T == 1 and beta_start != beta_end:
        raise ValueError("T == 1 requires beta_start == beta_end")

    betas = np.zeros(T + 1, dtype=np.float64)
    betas[1:] = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)  # alphas[0] == 1, so alpha_bars[0] == 1
    sigmas = np.sqrt(betas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars, sigmas=sigmas)
