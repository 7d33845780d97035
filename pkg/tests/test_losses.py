import numpy as np
import pytest

from trajdiff import autodiff as ad
from trajdiff.autodiff import Tape, backward, finite_diff_grad
from trajdiff.losses import (
    PRESETS,
    LossWeights,
    combine_components,
    gan_discriminator_loss,
    gan_generator_loss,
    hybrid_components,
    recon_hybrid,
    recon_l1,
    recon_l2,
    recon_perceptual,
    total_loss,
)
from trajdiff.nets import FeatureNet

LN2 = 0.6931471805599453


@pytest.fixture(scope="module")
def featnet():
    return FeatureNet(2, feat_dim=8, seed=0)


# ---------------------------------------------------------------------------
# reconstruction distances


def test_l1_hand_values():
    assert recon_l1(np.zeros(3), np.zeros(3)).item() == 0.0
    assert recon_l1(np.array([1.0, 2.0]), np.array([1.5, 1.0])).item() == 0.75


def test_l1_absolute_homogeneity():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 6))
    base = recon_l1(a, b).item()
    for c in (2.0, -3.0):
        assert recon_l1(c * a, c * b).item() == pytest.approx(abs(c) * base,
                                                              rel=1e-12)


def test_l2_hand_values():
    assert recon_l2(np.ones(4), np.ones(4)).item() == 0.0
    assert recon_l2(np.array([1.0, 2.0]), np.array([1.5, 1.0])).item() == 0.625


def test_l2_gradient_analytic_and_fd():
    rng = np.random.default_rng(1)
    z0 = rng.normal(size=(3, 2))
    zh = rng.normal(size=(3, 2))

    tape = Tape()
    zh_leaf = tape.leaf(zh)
    g = backward(tape, recon_l2(ad.as_tensor(z0), zh_leaf))[zh_leaf.nid]
    np.testing.assert_allclose(g, 2.0 * (zh - z0) / z0.size, rtol=0, atol=1e-12)

    fd = finite_diff_grad(lambda a: recon_l2(z0, a).item(), zh)
    assert np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-6) < 1e-4


def test_perceptual_zero_and_symmetry(featnet):
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, 4, 2))
    assert recon_perceptual(featnet, a, a).item() == 0.0
    d_ab = recon_perceptual(featnet, a, b).item()
    d_ba = recon_perceptual(featnet, b, a).item()
    assert d_ab == d_ba  # exact: squaring makes sign of the diff irrelevant
    assert d_ab > 0


def test_perceptual_zero_weight_net_degenerate():
    f = FeatureNet(2, feat_dim=4, seed=0)
    zero = {k: np.zeros_like(v) for k, v in f.params.items()}
    f2 = FeatureNet(2, feat_dim=4, seed=0)
    f2.params = zero  # degenerate probe: all features collapse to 0
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 5, 2))
    assert recon_perceptual(f2, a, b).item() == 0.0


def test_perceptual_gradient_fd(featnet):
    rng = np.random.default_rng(4)
    z0 = rng.normal(size=(3, 2))
    zh = rng.normal(size=(3, 2))
    tape = Tape()
    leaf = tape.leaf(zh)
    g = backward(tape, recon_perceptual(featnet, ad.as_tensor(z0), leaf))[leaf.nid]
    fd = finite_diff_grad(lambda a: recon_perceptual(featnet, z0, a).item(), zh)
    assert np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-6) < 1e-4


def test_shape_mismatch_rejected(featnet):
    with pytest.raises(ValueError):
        recon_l1(np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        recon_l2(np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        recon_perceptual(featnet, np.zeros((1, 2)), np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# hybrid


def test_hybrid_single_weight_reproduces_base_bitwise(featnet):
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(2, 6, 2))
    pairs = [
        (LossWeights(l1=1.0, l2=0.0), recon_l1(a, b).item()),
        (LossWeights(l1=0.0, l2=1.0), recon_l2(a, b).item()),
        (LossWeights(l1=0.0, l2=0.0, lpips=1.0),
         recon_perceptual(featnet, a, b).item()),
    ]
    for w, expect in pairs:
        got = recon_hybrid(w, featnet, a, b).item()
        assert got == expect  # bit-exact


def test_hybrid_hand_sum(featnet):
    a = np.array([1.0, 2.0])
    b = np.array([1.5, 1.0])
    w = LossWeights(l1=0.0, l2=1.0, lpips=1.0)
    lp = recon_perceptual(featnet, a, b).item()
    assert recon_hybrid(w, featnet, a, b).item() == pytest.approx(
        0.625 + lp, abs=1e-15)


def test_hybrid_linear_in_weights(featnet):
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(2, 4, 2))
    w1 = LossWeights(l1=0.3, l2=0.5, lpips=0.2)
    w2 = LossWeights(l1=0.6, l2=1.0, lpips=0.4)
    assert recon_hybrid(w2, featnet, a, b).item() == pytest.approx(
        2.0 * recon_hybrid(w1, featnet, a, b).item(), rel=1e-12)


def test_hybrid_decomposition_bit_exact(featnet):
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(2, 5, 2))
    w = LossWeights(l1=0.25, l2=1.0, lpips=0.5)
    comp = hybrid_components(w, featnet, a, b)
    total = combine_components(w, comp)
    assert recon_hybrid(w, featnet, a, b).item() == total.item()
    manual = None
    for name in ("l1", "l2", "lpips"):
        term = getattr(w, name) * comp[name].item()
        manual = term if manual is None else manual + term
    assert total.item() == manual


def test_hybrid_rejects_no_weights(featnet):
    with pytest.raises(ValueError):
        recon_hybrid(LossWeights(l1=0.0, l2=0.0), featnet,
                     np.zeros(2), np.zeros(2))
    with pytest.raises(ValueError):
        LossWeights(l1=-0.1)


def test_hybrid_lpips_needs_featnet():
    with pytest.raises(ValueError):
        recon_hybrid(LossWeights(l2=1.0, lpips=1.0), None,
                     np.zeros(2), np.zeros(2))


# ---------------------------------------------------------------------------
# adversarial


def test_gan_losses_at_zero_logits():
    assert gan_generator_loss(np.zeros(4)).item() == pytest.approx(LN2, abs=1e-15)
    assert gan_discriminator_loss(np.zeros(3), np.zeros(5)).item() == \
        pytest.approx(2 * LN2, abs=1e-15)


def test_gan_generator_vanishes_for_confident_fakes():
    assert gan_generator_loss(np.full(3, 25.0)).item() < 1e-10


def test_gan_discriminator_at_perfect_separation():
    val = gan_discriminator_loss(np.array([10.0]), np.array([-10.0])).item()
    assert val == pytest.approx(9.07977984337293e-05, rel=1e-10)
    assert val < 1e-4


def test_gan_gradients_fd():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=6)

    tape = Tape()
    leaf = tape.leaf(logits)
    g = backward(tape, gan_generator_loss(leaf))[leaf.nid]
    fd = finite_diff_grad(lambda a: gan_generator_loss(a).item(), logits)
    assert np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-6) < 1e-4

    tape = Tape()
    leaf = tape.leaf(logits)
    g = backward(tape, gan_discriminator_loss(np.ones(6), leaf))[leaf.nid]
    fd = finite_diff_grad(
        lambda a: gan_discriminator_loss(np.ones(6), a).item(), logits)
    assert np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-6) < 1e-4


# ---------------------------------------------------------------------------
# total objective


def test_total_loss_zero_gan_weight_is_recon():
    r = ad.as_tensor(0.42)
    out = total_loss(LossWeights(l2=1.0, gan=0.0), r, gan_g=ad.as_tensor(9.0))
    assert out.item() == 0.42


def test_total_loss_hand_value():
    w = LossWeights(l2=1.0, gan=0.01)
    assert total_loss(w, 0.5, 0.7).item() == pytest.approx(0.507, abs=1e-15)


def test_total_loss_requires_gan_term_when_weighted():
    with pytest.raises(ValueError):
        total_loss(LossWeights(l2=1.0, gan=0.01), 0.5, None)


def test_total_loss_gradient_splits_linearly():
    rng = np.random.default_rng(9)
    x0 = rng.normal(size=4)
    w = LossWeights(l2=1.0, gan=0.01)

    def grads(include_gan, lam=None):
        ww = w if lam is None else LossWeights(l2=1.0, gan=lam)
        tape = Tape()
        x = tape.leaf(x0)
        recon = ad.tmean(ad.square(x))
        gan_g = gan_generator_loss(x)
        out = total_loss(ww, recon, gan_g) if include_gan else recon
        return backward(tape, out)[x.nid]

    g_total = grads(True)
    g_recon = grads(False)
    tape = Tape()
    x = tape.leaf(x0)
    g_gan = backward(tape, gan_generator_loss(x))[x.nid]
    np.testing.assert_allclose(g_total, g_recon + 0.01 * g_gan,
                               rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# presets and config round trip


def test_presets_cover_ablation_rows():
    assert set(PRESETS) == {"l1", "l2", "lpips", "l2+lpips", "l2+lpips+gan"}
    w = LossWeights.from_preset("l2+lpips+gan")
    assert (w.l1, w.l2, w.lpips, w.gan) == (0.0, 1.0, 1.0, 0.01)
    with pytest.raises(ValueError):
        LossWeights.from_preset("huber")


def test_weights_dict_round_trip():
    w = LossWeights(l1=0.2, l2=1.0, lpips=0.3, gan=0.01)
    assert LossWeights.from_dict(w.to_dict()) == w
    with pytest.raises(ValueError):
        LossWeights.from_dict({"l3": 1.0})
