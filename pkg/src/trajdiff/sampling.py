"""Sampling procedures: the multi-step ancestral baseline and the
end-to-end differentiable trajectory with its re-noising step.

The trajectory sampler records every latent on a live tape so a loss on the
final sample backpropagates through all unrolled steps. Noise is drawn from
the supplied generator in a fixed order (initial latent first, then one draw
per step) so a reseeded replay reproduces the chain bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trajdiff import autodiff as ad
from trajdiff.autodiff import Tape, Tensor
from trajdiff.schedule import NoiseSchedule

RENOISE_MODES = ("literal", "convex")

NFE_CAP = 8


@dataclass
class StepRecord:
    """One sampling step: state entering the step, re-noised latent fed to
    the model, and the raw model output."""
    t: int
    pre: object
    z_hat: object
    output: object


@dataclass
class Trajectory:
    entries: list
    final: object
    differentiable: bool

    @property
    def steps(self) -> tuple:
        return tuple(e.t for e in self.entries)

    def to_records(self, include_vectors: bool | None = None) -> list:
        """JSON-ready dicts, one per step: t, latent norms, and the full
        vectors for small dimensions."""
        recs = []
        for e in self.entries:
            z_hat = _as_array(e.z_hat)
            out = _as_array(e.output)
            if include_vectors is None:
                include_vectors = z_hat.shape[-1] <= 8
            rec = {"t": int(e.t),
                   "z_hat_norm": float(np.linalg.norm(z_hat)),
                   "output_norm": float(np.linalg.norm(out))}
            if include_vectors:
                rec["z_hat"] = z_hat.tolist()
                rec["output"] = out.tolist()
            recs.append(rec)
        return recs


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def renoise(z_prev, t: int, s: NoiseSchedule, noise, mode: str = "convex"):
    """Push a state back to noise level t.

    literal: z_prev + sqrt(max(alpha_t^2 - sigma_t^2, 0)) * noise; the
    radicand goes negative once alpha_bar < 1/2 and is clamped there.
    convex: alpha_t * z_prev + sigma_t * noise, the variance-preserving form
    (identical to the forward noising map applied to z_prev).
    """
    if mode not in RENOISE_MODES:
        raise ValueError(f"renoise mode must be one of {RENOISE_MODES}")
    a = s.signal_coeff(t)
    sig = s.noise_coeff(t)
    zt = ad.as_tensor(z_prev)
    nt = ad.as_tensor(noise)
    if zt.shape != nt.shape:
        raise ValueError(f"noise shape {nt.shape} != state shape {zt.shape}")
    if mode == "literal":
        coeff = float(np.sqrt(max(a * a - sig * sig, 0.0)))
        return ad.add(zt, ad.smul(coeff, nt))
    return ad.add(ad.smul(a, zt), ad.smul(sig, nt))


def _check_steps(s: NoiseSchedule, steps) -> tuple:
    steps = tuple(int(t) for t in steps)
    if not steps:
        raise ValueError("empty step list")
    if any(not 1 <= t <= s.T for t in steps):
        raise ValueError(f"steps {steps} leave [1, {s.T}]")
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise ValueError(f"steps {steps} are not strictly decreasing")
    return steps


def strided_steps(T: int, nfe: int) -> tuple:
    """Map nfe positions uniformly onto 1..T, descending: round(T*k/nfe)
    for k = nfe..1. NFE=4, T=1000 gives (1000, 750, 500, 250)."""
    if not 1 <= nfe <= T:
        raise ValueError(f"nfe {nfe} outside [1, {T}]")
    steps = tuple(max(1, round(T * k / nfe)) for k in range(nfe, 0, -1))
    if len(set(steps)) != nfe:
        raise ValueError(f"nfe {nfe} too dense for T={T}")
    return steps


def ancestral_step(net, z_t: np.ndarray, t: int, s: NoiseSchedule,
                   rng: np.random.Generator, e_c=None, t_prev: int | None = None,
                   xi: np.ndarray | None = None,
                   eps_hat: np.ndarray | None = None) -> np.ndarray:
    """One reverse posterior step from t to t_prev (default t-1) for an
    epsilon-predicting model.

    Uses the skipped-step generalization: with a_eff = alpha_bar_t /
    alpha_bar_prev and b_eff = 1 - a_eff,

        z_prev = (z_t - b_eff / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(a_eff)
                 + sqrt(var) * xi,
        var    = (1 - alpha_bar_prev) / (1 - alpha_bar_t) * b_eff.

    At t_prev = t-1 this is the textbook posterior-mean step; the variance
    vanishes at t_prev = 0, so the last transition is deterministic.
    """
    if getattr(net, "prediction_mode", None) != "epsilon":
        raise ValueError("ancestral stepping needs an epsilon-predicting model")
    t = int(t)
    if t < 1:
        raise ValueError("t must be >= 1")
    t_prev = t - 1 if t_prev is None else int(t_prev)
    if not 0 <= t_prev < t:
        raise ValueError(f"t_prev {t_prev} must lie in [0, {t})")
    z_t = np.asarray(z_t, dtype=np.float64)
    ab_t = s.alpha_bar(t)
    ab_p = s.alpha_bar(t_prev)
    a_eff = ab_t / ab_p
    b_eff = 1.0 - a_eff
    if eps_hat is None:
        eps_hat = _as_array(net.forward(z_t, t, e_c))
    mean = (z_t - (b_eff / np.sqrt(1.0 - ab_t)) * eps_hat) / np.sqrt(a_eff)
    var = (1.0 - ab_p) / (1.0 - ab_t) * b_eff
    if var == 0.0:
        return mean
    if xi is None:
        xi = rng.standard_normal(z_t.shape)
    return mean + np.sqrt(var) * xi


def sample_baseline(net, s: NoiseSchedule, steps, e_c=None,
                    rng: np.random.Generator | None = None,
                    n: int | None = None) -> Trajectory:
    """Non-differentiable ancestral sampling along ``steps`` (descending,
    within 1..T); the final transition targets step 0 and injects no noise.
    ``n`` batches the chain over n independent draws."""
    steps = _check_steps(s, steps)
    rng = np.random.default_rng() if rng is None else rng
    shape = (s_dim(net),) if n is None else (n, s_dim(net))
    z = rng.standard_normal(shape)
    entries = []
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        pre = z
        eps_hat = _as_array(net.forward(z, t, e_c))
        z = ancestral_step(net, z, t, s, rng, e_c=e_c, t_prev=t_prev,
                           eps_hat=eps_hat)
        entries.append(StepRecord(t=t, pre=pre, z_hat=pre, output=eps_hat))
    return Trajectory(entries=entries, final=z, differentiable=False)


def s_dim(net) -> int:
    return int(net.data_dim)


def _interpret_output(out: Tensor, z_hat: Tensor, t: int, s: NoiseSchedule,
                      prediction_mode: str) -> Tensor:
    """Turn the raw model output into the next trajectory state: direct-next
    and x0 already are the state; epsilon implies the clean estimate
    (z_hat - sigma_t * eps_hat) / alpha_t."""
    if prediction_mode in ("direct-next", "x0"):
        return out
    a = s.signal_coeff(t)
    sig = s.noise_coeff(t)
    return ad.smul(1.0 / a, ad.sub(z_hat, ad.smul(sig, out)))


def e2e_trajectory(net, s: NoiseSchedule, step_list, e_c,
                   rng: np.random.Generator, mode: str = "convex",
                   tape: Tape | None = None, params: dict | None = None,
                   n: int | None = None, init: np.ndarray | None = None) -> Trajectory:
    """Differentiable unrolled sampling chain.

    Starts from z ~ N(0, I) (or ``init``), then for each t in ``step_list``
    draws fresh noise, re-noises the running state to level t, and applies
    the model. Every step is recorded on ``tape``; gradients flow from the
    final state into each parameter use, all |step_list| of them when
    parameters are shared.
    """
    if tape is None:
        raise ValueError("e2e trajectory needs a live tape")
    steps = _check_steps(s, step_list)
    if len(steps) > NFE_CAP:
        raise ValueError(f"step list of length {len(steps)} exceeds the cap of {NFE_CAP}")
    shape = (s_dim(net),) if n is None else (n, s_dim(net))
    state = ad.as_tensor(init if init is not None else rng.standard_normal(shape))
    if state.shape != shape:
        raise ValueError(f"init shape {state.shape} != expected {shape}")
    entries = []
    for t in steps:
        noise = rng.standard_normal(shape)
        pre = state
        z_hat = renoise(state, t, s, noise, mode)
        out = net.forward(z_hat, t, e_c, tape=tape, params=params)
        state = _interpret_output(out, z_hat, t, s, net.prediction_mode)
        entries.append(StepRecord(t=t, pre=pre, z_hat=z_hat, output=out))
    return Trajectory(entries=entries, final=state, differentiable=True)
