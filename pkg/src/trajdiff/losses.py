"""Reconstruction distances, the adversarial pair, and the combined
objective. Every loss maps tensors to a scalar and differentiates through
the tape when its inputs live on one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from trajdiff import autodiff as ad
from trajdiff.autodiff import Tensor
from trajdiff.nets import FeatureNet

PRESETS = {
    "l1": {"l1": 1.0, "l2": 0.0, "lpips": 0.0, "gan": 0.0},
    "l2": {"l1": 0.0, "l2": 1.0, "lpips": 0.0, "gan": 0.0},
    "lpips": {"l1": 0.0, "l2": 0.0, "lpips": 1.0, "gan": 0.0},
    "l2+lpips": {"l1": 0.0, "l2": 1.0, "lpips": 1.0, "gan": 0.0},
    "l2+lpips+gan": {"l1": 0.0, "l2": 1.0, "lpips": 1.0, "gan": 0.01},
}


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights for the hybrid objective; ``lpips`` weights the
    feature-space proxy distance and ``gan`` the adversarial term."""

    l1: float = 0.0
    l2: float = 1.0
    lpips: float = 0.0
    gan: float = 0.0

    def __post_init__(self):
        for name in ("l1", "l2", "lpips", "gan"):
            if getattr(self, name) < 0:
                raise ValueError(f"weight {name} must be non-negative")

    @property
    def has_recon(self) -> bool:
        return (self.l1 > 0) or (self.l2 > 0) or (self.lpips > 0)

    @staticmethod
    def from_preset(name: str) -> "LossWeights":
        if name not in PRESETS:
            raise ValueError(f"unknown loss preset {name!r}; "
                             f"choose from {sorted(PRESETS)}")
        return LossWeights(**PRESETS[name])

    @staticmethod
    def from_dict(d: dict) -> "LossWeights":
        extra = set(d) - {"l1", "l2", "lpips", "gan"}
        if extra:
            raise ValueError(f"unknown loss weight keys {sorted(extra)}")
        return LossWeights(**{k: float(v) for k, v in d.items()})

    def to_dict(self) -> dict:
        return {"l1": self.l1, "l2": self.l2, "lpips": self.lpips,
                "gan": self.gan}


def _check_pair(z0, z0_hat):
    a, b = ad.as_tensor(z0), ad.as_tensor(z0_hat)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def recon_l1(z0, z0_hat) -> Tensor:
    """Mean absolute difference over all elements."""
    a, b = _check_pair(z0, z0_hat)
    return ad.tmean(ad.tabs(ad.sub(a, b)))


def recon_l2(z0, z0_hat) -> Tensor:
    """Mean squared difference over all elements."""
    a, b = _check_pair(z0, z0_hat)
    return ad.tmean(ad.square(ad.sub(a, b)))


def recon_perceptual(featnet: FeatureNet, z0, z0_hat) -> Tensor:
    """Mean squared distance between frozen-feature-net embeddings of the
    two inputs."""
    a, b = _check_pair(z0, z0_hat)
    return ad.tmean(ad.square(ad.sub(featnet.features(a), featnet.features(b))))


def hybrid_components(w: LossWeights, featnet: FeatureNet | None,
                      z0, z0_hat) -> dict:
    """The three reconstruction components, computed only when their weight
    is nonzero (absent components map to None)."""
    comp = {"l1": None, "l2": None, "lpips": None}
    if w.l1 > 0:
        comp["l1"] = recon_l1(z0, z0_hat)
    if w.l2 > 0:
        comp["l2"] = recon_l2(z0, z0_hat)
    if w.lpips > 0:
        if featnet is None:
            raise ValueError("lpips weight set but no feature net given")
        comp["lpips"] = recon_perceptual(featnet, z0, z0_hat)
    return comp


def combine_components(w: LossWeights, comp: dict) -> Tensor:
    """Weighted sum lambda_l1*l1 + lambda_l2*l2 + lambda_lpips*lpips, always
    accumulated in that order so a recomposition from separately reported
    components is bit-identical."""
    total = None
    for name in ("l1", "l2", "lpips"):
        lam = getattr(w, name)
        term = comp.get(name)
        if lam > 0:
            if term is None:
                raise ValueError(f"missing component {name!r}")
            scaled = ad.smul(lam, ad.as_tensor(term))
            total = scaled if total is None else ad.add(total, scaled)
    if total is None:
        raise ValueError("all reconstruction weights are zero")
    return total


def recon_hybrid(w: LossWeights, featnet: FeatureNet | None, z0, z0_hat) -> Tensor:
    """Weighted reconstruction distance per the active weights."""
    if not w.has_recon:
        raise ValueError("all reconstruction weights are zero")
    return combine_components(w, hybrid_components(w, featnet, z0, z0_hat))


def gan_generator_loss(logit_fake) -> Tensor:
    """Non-saturating generator loss: mean softplus(-logit_fake)."""
    lf = ad.as_tensor(logit_fake)
    return ad.tmean(ad.softplus(ad.smul(-1.0, lf)))


def gan_discriminator_loss(logits_real, logits_fake) -> Tensor:
    """mean softplus(-logit_real) + mean softplus(logit_fake)."""
    lr = ad.as_tensor(logits_real)
    lf = ad.as_tensor(logits_fake)
    return ad.add(ad.tmean(ad.softplus(ad.smul(-1.0, lr))),
                  ad.tmean(ad.softplus(lf)))


def total_loss(w: LossWeights, recon, gan_g=None) -> Tensor:
    """recon + lambda_gan * generator loss; with a zero weight the recon
    term is returned untouched."""
    r = ad.as_tensor(recon)
    if w.gan == 0 or gan_g is None:
        if w.gan > 0 and gan_g is None:
            raise ValueError("gan weight set but no generator loss given")
        return r
    return ad.add(r, ad.smul(w.gan, ad.as_tensor(gan_g)))
