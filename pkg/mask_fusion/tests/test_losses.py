"""
Tests for the segmentation, similarity and cross-view consistency losses
"""

import math

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

from mask_fusion.core import volcore as vc
from mask_fusion.core.errors import ConfigError
from mask_fusion.core.geometry import warp_tensor
from mask_fusion.core.losses import (
    CC_EPS,
    LossWeights,
    align_loss_sup,
    align_loss_unsup,
    cons1_loss,
    cons2_loss,
    dice_loss,
    identity_loss,
    local_cc,
)
from mask_fusion.core.nets import AlignNet, Segmentor


def _cc_oracle(a: np.ndarray, b: np.ndarray, window: int) -> float:
    """Direct per-voxel Pearson over truncated windows."""
    r = window // 2
    d, h, w = a.shape
    total = 0.0
    for z in range(d):
        for y in range(h):
            for x in range(w):
                sl = (
                    slice(max(z - r, 0), z + r + 1),
                    slice(max(y - r, 0), y + r + 1),
                    slice(max(x - r, 0), x + r + 1),
                )
                ca = a[sl] - a[sl].mean()
                cb = b[sl] - b[sl].mean()
                cross = (ca * cb).sum()
                var_a, var_b = (ca**2).sum(), (cb**2).sum()
                total += (cross + CC_EPS) ** 2 / ((var_a + CC_EPS) * (var_b + CC_EPS))
    return 1.0 - total / a.size


def _fixed_params(*values):
    theta = torch.tensor([values], dtype=torch.float32)
    return lambda moving, fixed: theta.expand(moving.shape[0], 6)


def test_dice_closed_form():
    pred = torch.tensor([1.0, 1.0]).view(1, 1, 1, 1, 2)
    gt = torch.tensor([1.0, 0.0]).view(1, 1, 1, 1, 2)
    assert abs(float(dice_loss(pred, gt)) - 1.0 / 3.0) < 1e-5


def test_dice_extremes():
    m = (torch.rand(1, 1, 4, 4, 4) > 0.5).float()
    assert float(dice_loss(m, m)) < 1e-5
    assert float(dice_loss(m, 1.0 - m)) > 0.999


def test_local_cc_matches_window_oracle(rng):
    a = rng.normal(size=(5, 5, 5))
    b = rng.normal(size=(5, 5, 5))
    with vc.float64_mode():
        loss = local_cc(vc.from_volume_array(a), vc.from_volume_array(b), window=3)
    assert abs(float(loss) - _cc_oracle(a, b, 3)) < 1e-4


def test_local_cc_is_intensity_affine_invariant(rng):
    a = rng.normal(size=(6, 6, 6))
    with vc.float64_mode():
        ta = vc.from_volume_array(a)
        assert float(local_cc(ta, ta, window=3)) < 1e-4
        assert float(local_cc(ta, vc.from_volume_array(2.0 * a + 3.0), window=3)) < 1e-4


def test_local_cc_scores_flat_windows_by_agreement(rng):
    flat = torch.full((1, 1, 6, 6, 6), 0.3)
    textured = torch.from_numpy(rng.normal(size=(1, 1, 6, 6, 6)).astype(np.float32))
    assert float(local_cc(flat, flat, window=3)) < 1e-6
    assert float(local_cc(flat, textured, window=3)) > 0.99


def test_local_cc_rejects_even_window():
    x = torch.rand(1, 1, 4, 4, 4)
    with pytest.raises(ConfigError):
        local_cc(x, x, window=4)


def test_identity_loss_at_zero_init():
    G = AlignNet(size=8, base_channels=2, hidden=4)
    a, b = torch.rand(1, 1, 8, 8, 8), torch.rand(1, 1, 8, 8, 8)
    assert float(identity_loss(G, a, b)) < 1e-10


def test_identity_loss_penalizes_rotation(phantom):
    image = vc.from_volume_array(phantom[0].data)
    G = _fixed_params(0.0, 0.0, math.radians(10.0), 0.0, 0.0, 0.0)
    assert float(identity_loss(G, image, image)) > 1e-4


def test_unsupervised_loss_vanishes_on_identical_pair():
    x = torch.rand(1, 1, 8, 8, 8)
    G = AlignNet(size=8, base_channels=2, hidden=4)
    assert float(align_loss_unsup(x, x, G, lambda1=0.1, window=3)) < 1e-4


def test_unsupervised_loss_without_identity_term_is_similarity():
    moving, fixed = torch.rand(1, 1, 8, 8, 8), torch.rand(1, 1, 8, 8, 8)
    G = _fixed_params(0.1, 0.0, -0.1, 0.05, 0.0, 0.0)
    expected = local_cc(fixed, warp_tensor(moving, G(moving, fixed)), window=3)
    terms = {}
    loss = align_loss_unsup(moving, fixed, G, lambda1=0.0, window=3, terms=terms)
    assert float(loss) == float(expected)
    assert set(terms) == {"sim"}


def test_supervised_loss_reduces_to_unsupervised():
    moving, fixed = torch.rand(1, 1, 8, 8, 8), torch.rand(1, 1, 8, 8, 8)
    mm, fm = torch.rand(1, 1, 8, 8, 8), torch.rand(1, 1, 8, 8, 8)
    G = _fixed_params(0.0, 0.2, 0.0, 0.0, 0.1, 0.0)
    sup = align_loss_sup(moving, fixed, mm, fm, G, 0.1, 0.0, window=3)
    unsup = align_loss_unsup(moving, fixed, G, 0.1, window=3)
    assert float(sup) == float(unsup)


def test_supervised_mask_term_vanishes_when_aligned(phantom):
    image = vc.from_volume_array(phantom[0].data)
    mask = vc.from_volume_array(phantom[1].data)
    terms = {}
    align_loss_sup(image, image, mask, mask, _fixed_params(0, 0, 0, 0, 0, 0), 0.1, 0.05, 9, terms)
    assert terms["mask_sim"] < 1e-4
    assert terms["sim"] < 1e-4
    assert set(terms) == {"sim", "identity", "mask_sim"}


def test_supervised_mask_term_grows_with_misalignment(phantom):
    image = vc.from_volume_array(phantom[0].data)
    mask = vc.from_volume_array(phantom[1].data)
    shift = 2.0 * 2.0 / 31.0
    terms = {}
    align_loss_sup(image, image, mask, mask, _fixed_params(0, 0, 0, shift, 0, 0), 0.0, 1.0, 9, terms)
    assert terms["mask_sim"] > 1e-3


def test_cons1_constant_segmentor_is_a_fixed_point():
    S = lambda x: torch.full_like(x, 0.5)  # noqa: E731
    a, b = torch.rand(1, 1, 8, 8, 8), torch.rand(1, 1, 8, 8, 8)
    assert float(cons1_loss(S, a, b, S(b), S(a))) == 0.0


def test_cons1_recomposes_from_mse_terms():
    S = Segmentor(base_channels=2)
    f_ji, f_ij = torch.rand(1, 1, 8, 8, 8), torch.rand(1, 1, 8, 8, 8)
    M_i, M_j = torch.rand(1, 1, 8, 8, 8), torch.rand(1, 1, 8, 8, 8)
    expected = float(((S(f_ji) - M_i) ** 2).mean() + ((S(f_ij) - M_j) ** 2).mean())
    assert abs(float(cons1_loss(S, f_ji, f_ij, M_i, M_j)) - expected) < 1e-6


@pytest.mark.parametrize("target", ["as-written", "pose-consistent"])
def test_cons2_vanishes_for_same_view(target):
    S = Segmentor(base_channels=2)
    G = AlignNet(size=8, base_channels=2, hidden=4)
    x = torch.rand(1, 1, 8, 8, 8)
    assert float(cons2_loss(S, G, x, x, target)) < 1e-10


def _soft_threshold(x):
    return torch.sigmoid(20.0 * (x - 0.5))


def test_cons2_targets_differ_across_views(rng):
    a = torch.from_numpy(rng.random((1, 1, 8, 8, 8)).astype(np.float32))
    b = torch.from_numpy(rng.random((1, 1, 8, 8, 8)).astype(np.float32))
    G = _fixed_params(0, 0, 0, 0, 0, 0)
    expected = 2.0 * float(((_soft_threshold(a) - _soft_threshold(b)) ** 2).mean())
    assert float(cons2_loss(_soft_threshold, G, a, b, "as-written")) < 1e-10
    pose = float(cons2_loss(_soft_threshold, G, a, b, "pose-consistent"))
    assert expected > 0.01
    assert abs(pose - expected) < 1e-6


@pytest.mark.parametrize("target", ["as-written", "pose-consistent"])
def test_cons2_recomposes_from_warped_masks(target, rng):
    a = torch.from_numpy(rng.random((1, 1, 8, 8, 8)).astype(np.float32))
    b = torch.from_numpy(rng.random((1, 1, 8, 8, 8)).astype(np.float32))
    theta = torch.tensor([[0.0, 0.0, math.radians(15.0), 0.1, 0.0, 0.0]])
    G = _fixed_params(*theta[0].tolist())
    M_a, M_b = _soft_threshold(a), _soft_threshold(b)
    F_a, F_b = warp_tensor(M_a, theta), warp_tensor(M_b, theta)
    if target == "as-written":
        expected = ((F_a - M_a) ** 2).mean() + ((F_b - M_b) ** 2).mean()
    else:
        expected = ((F_a - M_b) ** 2).mean() + ((F_b - M_a) ** 2).mean()
    assert abs(float(cons2_loss(_soft_threshold, G, a, b, target)) - float(expected)) < 1e-6


def _rotation_aligner(a: torch.Tensor, angle_deg: float):
    """Rotates about z by angle when registering a, by -angle otherwise."""
    forward = torch.tensor([[0.0, 0.0, math.radians(angle_deg), 0.0, 0.0, 0.0]])

    def G(moving, fixed):
        return forward if torch.equal(moving, a) else -forward

    return G


def test_cons2_angle_sweep_finds_the_true_rotation(phantom):
    """Pose-consistent cons2 is smallest at the true angle, the as-written target at zero"""
    a = vc.from_volume_array(phantom[0].data)
    true = torch.tensor([[0.0, 0.0, math.radians(10.0), 0.0, 0.0, 0.0]])
    b = warp_tensor(a, true)
    angles = list(range(-10, 32, 2))
    pose = [float(cons2_loss(_soft_threshold, _rotation_aligner(a, t), a, b)) for t in angles]
    written = [
        float(cons2_loss(_soft_threshold, _rotation_aligner(a, t), a, b, "as-written")) for t in angles
    ]
    assert abs(angles[int(np.argmin(pose))] - 10) <= 2
    assert abs(angles[int(np.argmin(written))]) <= 2


def test_cons2_only_updates_the_aligner():
    S = Segmentor(base_channels=2)
    G = AlignNet(size=8, base_channels=2, hidden=4)
    a, b = torch.rand(1, 1, 8, 8, 8), torch.rand(1, 1, 8, 8, 8)
    vc.backward(cons2_loss(S, G, a, b))
    assert all(p.grad is None for p in S.parameters())
    assert G.fc2.bias.grad is not None and G.fc2.bias.grad.abs().sum() > 0


def test_cons2_rejects_unknown_target():
    x = torch.rand(1, 1, 8, 8, 8)
    with pytest.raises(ConfigError):
        cons2_loss(Segmentor(2), _fixed_params(0, 0, 0, 0, 0, 0), x, x, "bogus")


def test_loss_weights_must_be_non_negative():
    LossWeights().validate()
    with pytest.raises(ConfigError):
        LossWeights(alpha2=-0.1).validate()


# 64-bit central-difference checks on small random instances


def _instance(seed: int, *shapes):
    g = torch.Generator().manual_seed(seed)
    return [vc.tensor(torch.rand(*s, generator=g, dtype=torch.float64)) for s in shapes]


@pytest.mark.parametrize("seed", range(20))
def test_dice_gradcheck(seed):
    with vc.float64_mode():
        pred, gt = _instance(seed, (1, 1, 4, 4, 4), (1, 1, 4, 4, 4))
        pred.requires_grad_(True)
        assert gradcheck(lambda p: dice_loss(p, (gt > 0.5).to(p.dtype)), (pred,))


@pytest.mark.parametrize("seed", range(20))
def test_local_cc_gradcheck(seed):
    with vc.float64_mode():
        a, b = _instance(seed, (1, 1, 4, 4, 4), (1, 1, 4, 4, 4))
        a.requires_grad_(True)
        b.requires_grad_(True)
        assert gradcheck(lambda a, b: local_cc(a, b, window=3), (a, b))


@pytest.mark.parametrize("seed", range(20))
def test_identity_loss_gradcheck(seed):
    with vc.float64_mode():
        a, b, raw = _instance(seed, (1, 1, 4, 4, 4), (1, 1, 4, 4, 4), (1, 6))
        theta = vc.tensor(0.2 * (raw - 0.5), requires_grad=True)
        a.requires_grad_(True)
        assert gradcheck(lambda a, t: identity_loss(lambda m, f: t, a, b), (a, theta))


@pytest.mark.parametrize("seed", range(20))
def test_cons1_gradcheck(seed):
    with vc.float64_mode():
        f_ji, f_ij, M_i, M_j = _instance(seed, *[(1, 1, 4, 4, 4)] * 4)
        w = vc.tensor(torch.tensor([3.0]), requires_grad=True)
        f_ji.requires_grad_(True)

        def loss(w, f_ji):
            return cons1_loss(lambda x: torch.sigmoid(w * (x - 0.5)), f_ji, f_ij, M_i, M_j)

        assert gradcheck(loss, (w, f_ji))


@pytest.mark.parametrize("seed", range(20))
def test_cons2_gradcheck(seed):
    with vc.float64_mode():
        a, b, r1, r2 = _instance(seed, (1, 1, 4, 4, 4), (1, 1, 4, 4, 4), (1, 6), (1, 6))
        t1 = vc.tensor(0.2 * (r1 - 0.5), requires_grad=True)
        t2 = vc.tensor(0.2 * (r2 - 0.5), requires_grad=True)

        def loss(t1, t2):
            return cons2_loss(_soft_threshold, lambda m, f: t1 if m is a else t2, a, b)

        assert gradcheck(loss, (t1, t2))
