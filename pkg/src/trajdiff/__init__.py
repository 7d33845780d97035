"""Desk-scale lab for end-to-end trajectory diffusion training on toy data.

The estimators are the front door: StepwiseDiffusion trains the usual
single-step noise-prediction objective, TrajectoryDiffusion backpropagates
through the whole unrolled few-step sampler. Everything underneath (tape
autodiff, schedules, samplers, losses, trainers, metrics, run harness) is
importable from its own module.
"""

from trajdiff.autodiff import (
    DomainError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    finite_diff_grad,
)
from trajdiff.datasets import Dataset, MixtureSpec, gen_dataset
from trajdiff.estimators import StepwiseDiffusion, TrajectoryDiffusion
from trajdiff.losses import LossWeights
from trajdiff.metrics import (
    GapReport,
    MetricReport,
    frechet_distance,
    gap_probe,
    leakage_kl,
    mmd_rbf,
    mode_alignment,
)
from trajdiff.nets import CondEmbedding, Denoiser, Discriminator, FeatureNet
from trajdiff.sampling import (
    Trajectory,
    ancestral_step,
    e2e_trajectory,
    renoise,
    sample_baseline,
    strided_steps,
)
from trajdiff.schedule import NoiseSchedule, forward_noise, make_linear_schedule
from trajdiff.training import OptConfig, TrainConfig, Trainer, ema_update

__version__ = "0.1.0"

__all__ = [
    "CondEmbedding",
    "Dataset",
    "Denoiser",
    "Discriminator",
    "DomainError",
    "FeatureNet",
    "GapReport",
    "LossWeights",
    "MetricReport",
    "MixtureSpec",
    "NoiseSchedule",
    "OptConfig",
    "ShapeError",
    "StepwiseDiffusion",
    "Tape",
    "TapeError",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "Trajectory",
    "TrajectoryDiffusion",
    "ancestral_step",
    "backward",
    "e2e_trajectory",
    "ema_update",
    "finite_diff_grad",
    "forward_noise",
    "frechet_distance",
    "gap_probe",
    "gen_dataset",
    "leakage_kl",
    "make_linear_schedule",
    "mmd_rbf",
    "mode_alignment",
    "renoise",
    "sample_baseline",
    "strided_steps",
    "__version__",
]
