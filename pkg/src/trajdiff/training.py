"""Training loops: the single-step noise-prediction baseline and the
end-to-end trajectory trainer, plus the optimizer, EMA tracking, and the
discriminator/generator round protocol.

The exponential moving average is maintained in plain arrays and never
enters any tape; gradients cannot reach it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from trajdiff import autodiff as ad
from trajdiff.autodiff import Tape, backward
from trajdiff.losses import (
    LossWeights,
    combine_components,
    gan_generator_loss,
    gan_discriminator_loss,
    hybrid_components,
    total_loss,
)
from trajdiff.nets import CondEmbedding, Denoiser, Discriminator, FeatureNet
from trajdiff.sampling import NFE_CAP, e2e_trajectory, strided_steps
from trajdiff.schedule import NoiseSchedule


@dataclass
class OptConfig:
    """Decoupled-weight-decay adaptive-moment hyperparameters."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")


class AdamW:
    """Bias-corrected adaptive moments with decoupled weight decay."""

    def __init__(self, cfg: OptConfig):
        self.cfg = cfg
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> dict:
        """One update; returns the new parameter arrays."""
        c = self.cfg
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise ValueError(
                    f"non-finite gradient for {k!r} at optimizer step "
                    f"{self.step_count + 1}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self._m.get(k)
            if m is None:
                m = np.zeros_like(p)
                self._v[k] = np.zeros_like(p)
            v = self._v[k]
            m = c.beta1 * m + (1.0 - c.beta1) * g
            v = c.beta2 * v + (1.0 - c.beta2) * g * g
            self._m[k], self._v[k] = m, v
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            out[k] = p - c.lr * update - c.lr * c.weight_decay * p
        return out


def ema_update(ema: dict, live: dict, tau: float) -> dict:
    """Elementwise tau*ema + (1-tau)*live on plain arrays; the result
    carries no tape history."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if set(ema) != set(live):
        raise ValueError("parameter name sets differ")
    out = {}
    for k, e in ema.items():
        l = np.asarray(live[k])
        if e.shape != l.shape:
            raise ValueError(f"shape mismatch for {k!r}: {e.shape} vs {l.shape}")
        out[k] = tau * e + (1.0 - tau) * l
    return out


@dataclass
class TrainConfig:
    mode: str = "e2e"  # stepwise | e2e
    nfe: int = 4
    step_list: tuple | None = None  # default: strided over the schedule
    loss: LossWeights = field(default_factory=lambda: LossWeights(l2=1.0))
    renoise_mode: str = "convex"
    opt: OptConfig = field(default_factory=OptConfig)
    tau: float = 0.95
    steps: int = 1000
    batch_size: int = 64
    disc_updates_per_gen: int = 5

    def __post_init__(self):
        if self.mode not in ("stepwise", "e2e"):
            raise ValueError("mode must be 'stepwise' or 'e2e'")
        if self.nfe < 1:
            raise ValueError("nfe must be at least 1")
        if self.mode == "e2e" and self.nfe > NFE_CAP:
            raise ValueError(f"nfe {self.nfe} exceeds the cap of {NFE_CAP}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.loss.gan > 0 and self.disc_updates_per_gen < 1:
            raise ValueError("need at least one discriminator update per "
                             "generator update when the adversarial term is on")
        if self.mode == "e2e" and not self.loss.has_recon:
            raise ValueError("the trajectory trainer needs a reconstruction term")


def _grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def _param_norm(params: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(p * p)) for p in params.values())))


class Trainer:
    """Owns one denoiser plus its optimizer state, EMA copy, and (when the
    adversarial term is active) the discriminator and its optimizer."""

    def __init__(self, net: Denoiser, schedule: NoiseSchedule, cfg: TrainConfig,
                 cond: CondEmbedding | None = None,
                 featnet: FeatureNet | None = None,
                 disc: Discriminator | None = None, seed: int = 0):
        if cfg.loss.lpips > 0 and featnet is None:
            raise ValueError("perceptual weight set but no feature net given")
        if cfg.loss.gan > 0 and disc is None:
            raise ValueError("adversarial weight set but no discriminator given")
        self.net = net
        self.schedule = schedule
        self.cfg = cfg
        self.cond = cond
        self.featnet = featnet
        self.disc = disc
        self.rng = np.random.default_rng(seed)
        self.opt = AdamW(cfg.opt)
        self.disc_opt = AdamW(cfg.opt) if disc is not None else None
        self.ema = {k: v.copy() for k, v in net.params.items()}
        self.step = 0
        self.last_tape: Tape | None = None
        if cfg.step_list is not None:
            self.step_list = tuple(int(t) for t in cfg.step_list)
        elif cfg.mode == "e2e" or cfg.loss.gan > 0:
            self.step_list = strided_steps(schedule.T, cfg.nfe)
        else:
            self.step_list = None

    # -- helpers -----------------------------------------------------------

    def _cond_rows(self, labels, n: int):
        if self.net.cond_dim == 0:
            return None
        if self.cond is None:
            raise ValueError("conditional net without an embedding table")
        if labels is None:
            labels = [None] * n
        return self.cond.rows(labels)

    def ema_denoiser(self) -> Denoiser:
        """A denoiser carrying the EMA weights (for evaluation/sampling)."""
        clone = Denoiser.from_state(self.net.to_state())
        clone.assign({k: v.copy() for k, v in self.ema.items()})
        return clone

    def _finish_gen_update(self, tape, lifted, loss_t):
        grads = backward(tape, loss_t)
        named = {k: grads[lifted[k].nid] for k in self.net.params}
        new_params = self.opt.step(self.net.params, named)
        self.net.assign(new_params)
        self.ema = ema_update(self.ema, self.net.params, self.cfg.tau)
        self.step += 1
        self.last_tape = tape
        return named

    # -- single-step baseline ----------------------------------------------

    def train_step_stepwise(self, batch: np.ndarray, labels=None) -> dict:
        """Per-row uniform t, noise the batch in closed form, regress the
        injected noise, one optimizer step, then the EMA update."""
        if self.net.prediction_mode != "epsilon":
            raise ValueError("the stepwise trainer needs an epsilon-mode net")
        if self.net.sharing_mode != "shared":
            raise ValueError("the stepwise trainer needs shared parameters")
        t0 = time.perf_counter()
        x0 = np.asarray(batch, dtype=np.float64)
        n = x0.shape[0]
        s = self.schedule
        ts = self.rng.integers(1, s.T + 1, size=n)
        eps = self.rng.standard_normal(x0.shape)
        a = s.signal_coeffs[ts - 1][:, None]
        sig = s.noise_coeffs[ts - 1][:, None]
        x_t = a * x0 + sig * eps

        tape = Tape()
        lifted = self.net.lift(tape)
        eps_hat = self.net.forward(x_t, ts, self._cond_rows(labels, n),
                                   tape=tape, params=lifted)
        loss_t = ad.tmean(ad.square(ad.sub(ad.as_tensor(eps), eps_hat)))
        named = self._finish_gen_update(tape, lifted, loss_t)
        return {"step": self.step, "mode": "stepwise",
                "loss": loss_t.item(),
                "grad_norm": _grad_norm(named),
                "param_norm": _param_norm(self.net.params),
                "wall_time": time.perf_counter() - t0}

    # -- end-to-end trajectory ----------------------------------------------

    def train_step_e2e(self, batch: np.ndarray, labels=None,
                       include_gan: bool | None = None) -> dict:
        """Unroll the sampling trajectory on a tape, score the final sample
        against the batch, backpropagate through every step, update, EMA."""
        t0 = time.perf_counter()
        w = self.cfg.loss
        if include_gan is None:
            include_gan = w.gan > 0 and self.disc is not None
        z0 = np.asarray(batch, dtype=np.float64)
        n = z0.shape[0]
        e_c = self._cond_rows(labels, n)

        tape = Tape()
        lifted = self.net.lift(tape)
        traj = e2e_trajectory(self.net, self.schedule, self.step_list, e_c,
                              self.rng, mode=self.cfg.renoise_mode, tape=tape,
                              params=lifted, n=n)
        comp = hybrid_components(w, self.featnet, ad.as_tensor(z0), traj.final)
        recon = combine_components(w, comp)
        gan_g = None
        if include_gan:
            logits_fake = self.disc.forward(traj.final, tape=tape)
            gan_g = gan_generator_loss(logits_fake)
        loss_t = total_loss(w, recon, gan_g) if include_gan else recon
        named = self._finish_gen_update(tape, lifted, loss_t)

        rec = {"step": self.step, "mode": "e2e",
               "loss": loss_t.item(), "recon": recon.item(),
               "grad_norm": _grad_norm(named),
               "param_norm": _param_norm(self.net.params),
               "wall_time": time.perf_counter() - t0}
        for name in ("l1", "l2", "lpips"):
            if comp[name] is not None:
                rec[name] = comp[name].item()
        if gan_g is not None:
            rec["gan_g"] = gan_g.item()
        return rec

    # -- adversarial protocol ------------------------------------------------

    def _fresh_fakes(self, n: int, labels=None) -> np.ndarray:
        """E2e samples with no generator gradient (plain arrays)."""
        e_c = self._cond_rows(labels, n)
        traj = e2e_trajectory(self.net, self.schedule, self.step_list, e_c,
                              self.rng, mode=self.cfg.renoise_mode,
                              tape=Tape(), n=n)
        final = traj.final
        return final.data if hasattr(final, "data") else np.asarray(final)

    def train_step_disc(self, real: np.ndarray, labels=None) -> dict:
        """One discriminator update on the real batch vs fresh fakes."""
        if self.disc is None:
            raise ValueError("no discriminator attached")
        real = np.asarray(real, dtype=np.float64)
        fake = self._fresh_fakes(real.shape[0], labels)
        tape = Tape()
        lifted = self.disc.lift(tape)
        logits_real = self.disc.forward(real, tape=tape, params=lifted)
        logits_fake = self.disc.forward(fake, tape=tape, params=lifted)
        dloss = gan_discriminator_loss(logits_real, logits_fake)
        grads = backward(tape, dloss)
        named = {k: grads[lifted[k].nid] for k in self.disc.params}
        self.disc.assign(self.disc_opt.step(self.disc.params, named))
        return {"disc_loss": dloss.item(),
                "real_logit_mean": float(np.mean(logits_real.data)),
                "fake_logit_mean": float(np.mean(logits_fake.data))}

    def adversarial_round(self, batch: np.ndarray, labels=None) -> dict:
        """cfg.disc_updates_per_gen discriminator updates, then exactly one
        generator update with the adversarial term included."""
        if self.cfg.loss.gan <= 0:
            raise ValueError("adversarial round with a zero gan weight")
        if self.disc is None:
            raise ValueError("no discriminator attached")
        disc_metrics = [self.train_step_disc(batch, labels)
                        for _ in range(self.cfg.disc_updates_per_gen)]
        gen_metrics = self.train_step_e2e(batch, labels, include_gan=True)
        return {"disc": disc_metrics, "gen": gen_metrics}
