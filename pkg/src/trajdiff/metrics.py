"""Evaluation metrics and diagnostics: Fréchet distance between Gaussian
fits, unbiased RBF MMD, conditional mode alignment, the closed-form
information-leakage KL, and the training-sampling gap probe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trajdiff.sampling import ancestral_step, sample_baseline
from trajdiff.schedule import NoiseSchedule, forward_noise


@dataclass
class MetricReport:
    frechet: float
    mmd: float
    alignment: float
    n_samples: int
    nfe: int
    seed: int

    def __post_init__(self):
        self.frechet = float(self.frechet)
        self.mmd = float(self.mmd)
        self.alignment = float(self.alignment)
        if self.frechet < -1e-9 or self.mmd < -1e-9:
            raise ValueError("distance fell below the numerical floor")
        if not 0.0 <= self.alignment <= 1.0:
            raise ValueError("alignment must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"frechet": self.frechet, "mmd": self.mmd,
                "alignment": self.alignment, "n_samples": self.n_samples,
                "nfe": self.nfe, "seed": self.seed}


@dataclass
class GapReport:
    """Teacher-forced per-step errors against same-noise ground truth,
    full-rollout Fréchet distance, and their difference. The probe reports
    the gap; nothing here asserts its sign."""

    per_step: list  # [{"t": int, "error": float}, ...]
    rollout: float
    gap: float
    steps: tuple

    def to_dict(self) -> dict:
        return {"per_step": self.per_step, "rollout": self.rollout,
                "gap": self.gap, "steps": list(self.steps)}


# ---------------------------------------------------------------------------
# Fréchet distance


def _fit_gaussian(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must form an n x d matrix")
    n, d = x.shape
    if n <= d:
        raise ValueError(f"need more samples than dimensions (n={n}, d={d})")
    mu = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return mu, cov


def _sqrtm_psd(c: np.ndarray) -> np.ndarray:
    c = (c + c.T) / 2.0
    w, v = np.linalg.eigh(c)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """||mu_a - mu_b||^2 + tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)),
    the matrix root taken through a symmetric eigendecomposition."""
    mu_a = np.asarray(mu_a, dtype=np.float64).reshape(-1)
    mu_b = np.asarray(mu_b, dtype=np.float64).reshape(-1)
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    s = _sqrtm_psd(cov_a)
    inner = _sqrtm_psd(s @ cov_b @ s)
    val = (float(np.sum((mu_a - mu_b) ** 2))
           + float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(inner)))
    return max(val, 0.0)


def frechet_distance(samples_a, samples_b, featnet=None) -> float:
    """Fréchet distance between Gaussian fits of two sample sets; with a
    feature net both sets are lifted to feature space first."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if featnet is not None:
        a = featnet.features(a).data
        b = featnet.features(b).data
    mu_a, cov_a = _fit_gaussian(a)
    mu_b, cov_b = _fit_gaussian(b)
    return frechet_from_moments(mu_a, cov_a, mu_b, cov_b)


# ---------------------------------------------------------------------------
# MMD


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = np.sum(a * a, axis=1)[:, None]
    bb = np.sum(b * b, axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * (a @ b.T), 0.0)


def mmd_rbf(samples_a, samples_b, bandwidth: float) -> float:
    """Unbiased MMD^2 with kernel exp(-||x-y||^2 / (2 bandwidth^2))."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("samples must form n x d matrices")
    n, m = a.shape[0], b.shape[0]
    if n < 2 or m < 2:
        raise ValueError("the unbiased estimator needs at least 2 samples per set")
    g = 2.0 * bandwidth * bandwidth
    kaa = np.exp(-_sq_dists(a, a) / g)
    kbb = np.exp(-_sq_dists(b, b) / g)
    kab = np.exp(-_sq_dists(a, b) / g)
    np.fill_diagonal(kaa, 0.0)
    np.fill_diagonal(kbb, 0.0)
    return float(kaa.sum() / (n * (n - 1)) + kbb.sum() / (m * (m - 1))
                 - 2.0 * kab.mean())


def mmd_bootstrap_se(samples_a, samples_b, bandwidth: float,
                     n_boot: int = 200,
                     rng: np.random.Generator | None = None) -> float:
    """Bootstrap standard error of the unbiased MMD^2 estimate (independent
    with-replacement resampling of each set)."""
    rng = np.random.default_rng(0) if rng is None else rng
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    vals = np.empty(n_boot)
    for i in range(n_boot):
        ia = rng.integers(0, a.shape[0], a.shape[0])
        ib = rng.integers(0, b.shape[0], b.shape[0])
        vals[i] = mmd_rbf(a[ia], b[ib], bandwidth)
    return float(vals.std(ddof=1))


# ---------------------------------------------------------------------------
# conditional alignment


def mode_alignment(samples, conds, means) -> float:
    """Fraction of samples whose nearest component mean is the one they
    were conditioned on. ``means`` is a (K, d) matrix or any object with a
    ``means`` attribute."""
    m = np.asarray(getattr(means, "means", means), dtype=np.float64)
    x = np.asarray(samples, dtype=np.float64)
    c = np.asarray(conds).reshape(-1)
    if x.shape[0] != c.shape[0]:
        raise ValueError("one conditioning label per sample required")
    k = m.shape[0]
    if np.any((c < 0) | (c >= k)):
        bad = c[(c < 0) | (c >= k)][0]
        raise ValueError(f"label {bad} outside [0, {k})")
    d2 = _sq_dists(x, m)
    nearest = np.argmin(d2, axis=1)
    return float(np.mean(nearest == c))


# ---------------------------------------------------------------------------
# information leakage


def leakage_kl(s: NoiseSchedule, data_mean, data_cov, t: int) -> float:
    """KL divergence between the analytically noised Gaussian data at step t
    and the standard normal.

    With data N(mu, Sigma), the step-t marginal is
    N(sqrt(ab)*mu, ab*Sigma + (1-ab)*I) for ab = alpha_bar_t, and

        KL = 1/2 (tr(C) + m^T m - d - ln det C).
    """
    mu = np.asarray(data_mean, dtype=np.float64).reshape(-1)
    cov = np.atleast_2d(np.asarray(data_cov, dtype=np.float64))
    d = mu.size
    if cov.shape != (d, d):
        raise ValueError(f"covariance shape {cov.shape} does not match dim {d}")
    cov = (cov + cov.T) / 2.0
    w = np.linalg.eigvalsh(cov)
    if w.min() < -1e-10 * max(1.0, w.max()):
        raise ValueError("covariance is not positive semi-definite")
    ab = s.alpha_bar(t)
    m = np.sqrt(ab) * mu
    c = ab * cov + (1.0 - ab) * np.eye(d)
    sign, logdet = np.linalg.slogdet(c)
    if sign <= 0:
        raise ValueError("noised covariance lost positive definiteness")
    return 0.5 * (float(np.trace(c)) + float(m @ m) - d - float(logdet))


# ---------------------------------------------------------------------------
# training-sampling gap probe


def gap_probe(net, s: NoiseSchedule, data, step_list,
              rng: np.random.Generator, e_c=None) -> GapReport:
    """Teacher-forced vs rollout comparison for an epsilon-mode model.

    Teacher forcing: real data is noised to each step t, the model takes
    one deterministic posterior-mean step toward the next step in the list,
    and the result is scored (mean squared error) against the same-noise
    closed-form latent at that destination. Rollout: a full few-step
    generation from pure noise, scored by Fréchet distance against the
    data. The gap is rollout minus the mean teacher-forced error.
    """
    if getattr(net, "prediction_mode", None) != "epsilon":
        raise ValueError("the gap probe needs an epsilon-predicting model")
    x0 = np.asarray(data, dtype=np.float64)
    steps = tuple(int(t) for t in step_list)
    per_step = []
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        eps = rng.standard_normal(x0.shape)
        x_t = forward_noise(s, x0, t, eps)
        pred = ancestral_step(net, x_t, t, s, rng, e_c=e_c, t_prev=t_prev,
                              xi=np.zeros_like(x0))
        gt = forward_noise(s, x0, t_prev, eps) if t_prev >= 1 else x0
        per_step.append({"t": t, "error": float(np.mean((pred - gt) ** 2))})
    traj = sample_baseline(net, s, steps, e_c=e_c, rng=rng, n=x0.shape[0])
    rollout = frechet_distance(traj.final, x0)
    mean_tf = float(np.mean([r["error"] for r in per_step]))
    return GapReport(per_step=per_step, rollout=rollout,
                     gap=rollout - mean_tf, steps=steps)
