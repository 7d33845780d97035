"""Forward-process noise schedule and the closed-form marginal noising map.

Steps are 1-based: ``betas[0]`` in storage is the step-1 value. The
variance-preserving convention is used throughout: the signal coefficient is
sqrt(alpha_bar_t), the noise coefficient sqrt(1 - alpha_bar_t), so their
squares sum to one at every step.
"""

from __future__ import annotations

import numpy as np


class NoiseSchedule:
    """Immutable container for one noise schedule.

    Attributes
    ----------
    T : int
        Number of steps.
    betas, alphas, alpha_bars : ndarray, shape (T,)
        Per-step noise rates, their complements, and the running product
        of the complements.
    signal_coeffs, noise_coeffs : ndarray, shape (T,)
        sqrt(alpha_bars) and sqrt(1 - alpha_bars).
    """

    def __init__(self, betas: np.ndarray, meta: dict | None = None):
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("every beta must lie strictly inside (0, 1)")
        self.T = int(betas.size)
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.signal_coeffs = np.sqrt(self.alpha_bars)
        self.noise_coeffs = np.sqrt(1.0 - self.alpha_bars)
        self._meta = dict(meta) if meta else {}
        for a in (self.betas, self.alphas, self.alpha_bars,
                  self.signal_coeffs, self.noise_coeffs):
            a.setflags(write=False)

    # -- 1-based step accessors ------------------------------------------

    def _check_step(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_step(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check_step(t) - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal retention; t=0 is the no-noise endpoint (1.0)."""
        t = self._check_step(t, lo=0)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def signal_coeff(self, t: int) -> float:
        t = self._check_step(t, lo=0)
        return 1.0 if t == 0 else float(self.signal_coeffs[t - 1])

    def noise_coeff(self, t: int) -> float:
        t = self._check_step(t, lo=0)
        return 0.0 if t == 0 else float(self.noise_coeffs[t - 1])

    # -- serialization -----------------------------------------------------

    def to_config(self) -> dict:
        if not self._meta:
            raise ValueError("only factory-built schedules serialize to config")
        return dict(self._meta)

    @staticmethod
    def from_config(cfg: dict) -> "NoiseSchedule":
        kind = cfg.get("kind", "linear")
        if kind != "linear":
            raise ValueError(f"unknown schedule kind {kind!r}")
        return make_linear_schedule(int(cfg["T"]), float(cfg["beta_start"]),
                                    float(cfg["beta_end"]))

    def __repr__(self):
        return f"NoiseSchedule(T={self.T}, beta1={self.betas[0]}, betaT={self.betas[-1]})"


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly interpolated betas from ``beta_start`` (step 1) to
    ``beta_end`` (step T); endpoints are hit exactly."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T)
    return NoiseSchedule(betas, meta={"kind": "linear", "T": T,
                                      "beta_start": beta_start,
                                      "beta_end": beta_end})


def forward_noise(s: NoiseSchedule, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """Marginal noising: signal_coeff(t) * x0 + noise_coeff(t) * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    t = s._check_step(t)
    return s.signal_coeff(t) * x0 + s.noise_coeff(t) * eps
