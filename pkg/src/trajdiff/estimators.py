"""Estimator-style front end: fit a diffusion model on a sample matrix,
then draw new samples.

Two estimators share the plumbing: StepwiseDiffusion trains the
conventional single-step noise-prediction objective; TrajectoryDiffusion
backpropagates a reconstruction loss through the whole unrolled few-step
sampling trajectory (optionally warm-started by a stepwise phase). Both
follow the scikit-learn parameter conventions, so get_params, set_params,
and clone work.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from trajdiff.losses import LossWeights
from trajdiff.nets import CondEmbedding, Denoiser, Discriminator, FeatureNet
from trajdiff.metrics import frechet_distance
from trajdiff.runner import FEAT_DIM, generate_samples
from trajdiff.schedule import make_linear_schedule
from trajdiff.training import OptConfig, TrainConfig, Trainer


class _DiffusionBase(BaseEstimator):
    def _validate(self, X, y):
        if y is None:
            X = check_array(X, dtype=np.float64)
            return X, None
        X, y = check_X_y(X, y, dtype=np.float64)
        y = np.asarray(y)
        if not np.issubdtype(y.dtype, np.integer):
            yi = y.astype(np.int64)
            if not np.array_equal(yi, y):
                raise ValueError("labels must be integers")
            y = yi
        if y.min() < 0:
            raise ValueError("labels must be non-negative")
        return X, y

    def _rng_seed(self) -> int:
        return 0 if self.random_state is None else int(self.random_state)

    def _build(self, X, y, mode: str, loss: LossWeights, nfe: int,
               renoise_mode: str, pretrain_steps: int):
        seed = self._rng_seed()
        self.n_features_in_ = X.shape[1]
        self.schedule_ = make_linear_schedule(self.schedule_steps,
                                              self.beta_start, self.beta_end)
        cond_dim = self.cond_dim if y is not None else 0
        net = Denoiser(self.n_features_in_, T=self.schedule_steps,
                       hidden=tuple(self.hidden), time_dim=self.time_dim,
                       cond_dim=cond_dim, prediction_mode="epsilon",
                       sharing_mode="shared", seed=seed + 1)
        self.classes_ = np.unique(y) if y is not None else None
        self.cond_ = (CondEmbedding(int(y.max()) + 1, cond_dim, seed=seed + 2)
                      if y is not None else None)
        featnet = (FeatureNet(self.n_features_in_, FEAT_DIM, seed=seed + 3)
                   if loss.lpips > 0 else None)
        disc = (Discriminator(self.n_features_in_, seed=seed + 4)
                if loss.gan > 0 else None)
        opt = OptConfig(lr=self.lr, weight_decay=self.weight_decay)
        cfg = TrainConfig(mode=mode, nfe=nfe, loss=loss,
                          renoise_mode=renoise_mode, opt=opt, tau=self.tau,
                          steps=self.n_train_steps,
                          batch_size=self.batch_size)
        trainer = Trainer(net, self.schedule_, cfg, cond=self.cond_,
                          featnet=featnet, disc=disc, seed=seed + 5)
        self.trainer_ = trainer
        self.history_ = []
        data_rng = np.random.default_rng(seed + 6)

        def phases():
            if pretrain_steps > 0 and mode == "e2e":
                pre_cfg = TrainConfig(mode="stepwise", opt=opt, tau=self.tau,
                                      steps=pretrain_steps,
                                      batch_size=self.batch_size)
                yield (Trainer(net, self.schedule_, pre_cfg, cond=self.cond_,
                               seed=seed + 5), pretrain_steps)
            yield trainer, self.n_train_steps

        for phase_trainer, n_steps in phases():
            for _ in range(n_steps):
                idx = data_rng.integers(0, X.shape[0], self.batch_size)
                labels = y[idx] if y is not None else None
                if phase_trainer.cfg.mode == "stepwise":
                    m = phase_trainer.train_step_stepwise(X[idx], labels)
                elif phase_trainer.cfg.loss.gan > 0:
                    m = phase_trainer.adversarial_round(X[idx], labels)["gen"]
                else:
                    m = phase_trainer.train_step_e2e(X[idx], labels)
                self.history_.append(m["loss"])
        self.net_ = trainer.ema_denoiser()
        return self

    def sample(self, n_samples: int = 100, y=None, seed: int | None = None,
               use_ema: bool = True) -> np.ndarray:
        """Draw n_samples new points; ``y`` conditions each draw (scalar or
        length n_samples). A conditional model with ``y`` omitted draws the
        class of each sample uniformly from the classes seen in fit."""
        check_is_fitted(self, "net_")
        rng = np.random.default_rng(self._rng_seed() if seed is None else seed)
        net = self.net_ if use_ema else self.trainer_.net
        e_c = None
        if self.cond_ is not None:
            if y is None:
                labels = rng.choice(self.classes_, size=n_samples)
            else:
                labels = np.broadcast_to(np.asarray(y).reshape(-1),
                                         (n_samples,))
            e_c = self.cond_.rows(labels)
        return generate_samples(net, self.schedule_, self._sampling_nfe(),
                                n_samples, rng, e_c=e_c,
                                renoise_mode=self._renoise())

    def score(self, X, y=None) -> float:
        """Negative Fréchet distance between fresh samples and X (higher is
        better)."""
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        samples = self.sample(n_samples=X.shape[0], seed=self._rng_seed())
        return -frechet_distance(samples, X)

    def _renoise(self) -> str:
        return getattr(self, "renoise_mode", "convex")


class StepwiseDiffusion(_DiffusionBase):
    """Single-step denoising trainer: each update noises a batch to a random
    step and regresses the injected noise (the conventional objective)."""

    def __init__(self, hidden=(128, 128, 128), schedule_steps=1000,
                 beta_start=1e-4, beta_end=0.02, n_train_steps=1000,
                 batch_size=64, lr=1e-3, weight_decay=1e-8, tau=0.95,
                 time_dim=16, cond_dim=16, nfe=4, random_state=None):
        self.hidden = hidden
        self.schedule_steps = schedule_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.n_train_steps = n_train_steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.tau = tau
        self.time_dim = time_dim
        self.cond_dim = cond_dim
        self.nfe = nfe
        self.random_state = random_state

    def fit(self, X, y=None):
        X, y = self._validate(X, y)
        return self._build(X, y, mode="stepwise", loss=LossWeights(l2=1.0),
                           nfe=self.nfe, renoise_mode="convex",
                           pretrain_steps=0)

    def _sampling_nfe(self) -> int:
        return self.nfe


class TrajectoryDiffusion(_DiffusionBase):
    """Unrolled-trajectory trainer: samples are generated with NFE model
    calls and the reconstruction loss on the final sample is backpropagated
    through every step. ``pretrain_steps`` runs a stepwise warm start
    first."""

    def __init__(self, hidden=(128, 128, 128), schedule_steps=1000,
                 beta_start=1e-4, beta_end=0.02, n_train_steps=1000,
                 pretrain_steps=0, batch_size=64, lr=3e-4, weight_decay=1e-8,
                 tau=0.95, time_dim=16, cond_dim=16, nfe=4, loss="l2+lpips",
                 renoise_mode="convex", random_state=None):
        self.hidden = hidden
        self.schedule_steps = schedule_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.n_train_steps = n_train_steps
        self.pretrain_steps = pretrain_steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.tau = tau
        self.time_dim = time_dim
        self.cond_dim = cond_dim
        self.nfe = nfe
        self.loss = loss
        self.renoise_mode = renoise_mode
        self.random_state = random_state

    def fit(self, X, y=None):
        X, y = self._validate(X, y)
        weights = (self.loss if isinstance(self.loss, LossWeights)
                   else LossWeights.from_preset(self.loss))
        return self._build(X, y, mode="e2e", loss=weights, nfe=self.nfe,
                           renoise_mode=self.renoise_mode,
                           pretrain_steps=self.pretrain_steps)

    def _sampling_nfe(self) -> int:
        return self.nfe
