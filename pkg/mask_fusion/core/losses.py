"""
Segmentation, registration and cross-view consistency losses.

Segmentors map [N, 1, D, H, W] images to soft masks; aligners map a (moving, fixed)
pair to [N, 6] rigid parameters. Both are plain callables here so losses can be
evaluated with trained networks, frozen copies or hand-built transforms alike.
"""

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import torch

from . import volcore as vc
from .errors import ConfigError
from .geometry import warp_tensor

Tensor = torch.Tensor
SegmentorFn = Callable[[Tensor], Tensor]
AlignerFn = Callable[[Tensor, Tensor], Tensor]

DICE_EPS = 1e-5
CC_EPS = 1e-5


@dataclass
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 0.05
    alpha1: float = 0.05
    alpha2: float = 0.05

    def validate(self) -> None:
        for name in ("lambda1", "lambda2", "alpha1", "alpha2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")


def _record(terms: Optional[Dict[str, float]], name: str, value: Tensor) -> None:
    if terms is not None:
        terms[name] = float(value.detach())


def dice_loss(pred: Tensor, gt: Tensor, eps: float = DICE_EPS) -> Tensor:
    inter = vc.sum(vc.mul(pred, gt))
    denom = vc.add(vc.add(vc.sum(pred), vc.sum(gt)), eps)
    return 1.0 - vc.div(vc.add(vc.scalar_mul(inter, 2.0), eps), denom)


def local_cc(a: Tensor, b: Tensor, window: int = 9, eps: float = CC_EPS) -> Tensor:
    """
    1 - mean squared local Pearson correlation over window^3 neighbourhoods.

    Windows are truncated at the border: statistics use in-bounds voxels only.
    eps enters the covariance and both variances, so a window that is flat in both
    inputs correlates fully and a window flat in only one input does not.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError("correlation window must be a positive odd integer", {"window": window})
    vc._same_shape(a, b, "local_cc")
    n, c = a.shape[:2]
    a = a.reshape(n * c, 1, *a.shape[2:])
    b = b.reshape(n * c, 1, *b.shape[2:])
    kernel = torch.ones((1, 1, window, window, window), dtype=a.dtype)
    pad = window // 2

    def box(x: Tensor) -> Tensor:
        return vc.conv3d(x, kernel, padding=pad)

    with torch.no_grad():
        count = box(torch.ones_like(a))
    sum_a, sum_b = box(a), box(b)
    sum_aa = box(vc.square(a))
    sum_bb = box(vc.square(b))
    sum_ab = box(vc.mul(a, b))
    cross = vc.sub(sum_ab, vc.div(vc.mul(sum_a, sum_b), count))
    var_a = vc.sub(sum_aa, vc.div(vc.square(sum_a), count))
    var_b = vc.sub(sum_bb, vc.div(vc.square(sum_b), count))
    cc = vc.div(
        vc.square(vc.add(cross, eps)), vc.mul(vc.add(var_a, eps), vc.add(var_b, eps))
    )
    return 1.0 - vc.mean(cc)


def identity_loss(G: AlignerFn, a: Tensor, b: Tensor) -> Tensor:
    """Each input registered to itself should come back unchanged."""
    loss_a = vc.mse(a, warp_tensor(a, G(a, a)))
    loss_b = vc.mse(b, warp_tensor(b, G(b, b)))
    return vc.add(loss_a, loss_b)


def _align_loss(
    moving: Tensor,
    fixed: Tensor,
    G: AlignerFn,
    lambda1: float,
    window: int,
    masks: Optional[tuple] = None,
    lambda2: float = 0.0,
    terms: Optional[Dict[str, float]] = None,
) -> Tensor:
    theta = G(moving, fixed)
    sim = local_cc(fixed, warp_tensor(moving, theta), window)
    _record(terms, "sim", sim)
    loss = sim
    if lambda1:
        ident = identity_loss(G, moving, fixed)
        _record(terms, "identity", ident)
        loss = vc.add(loss, vc.scalar_mul(ident, lambda1))
    if masks is not None and lambda2:
        moving_mask, fixed_mask = masks
        mask_sim = local_cc(fixed_mask, warp_tensor(moving_mask, theta), window)
        _record(terms, "mask_sim", mask_sim)
        loss = vc.add(loss, vc.scalar_mul(mask_sim, lambda2))
    return loss


def align_loss_unsup(
    moving: Tensor,
    fixed: Tensor,
    G: AlignerFn,
    lambda1: float,
    window: int = 9,
    terms: Optional[Dict[str, float]] = None,
) -> Tensor:
    """Similarity of fixed and warped moving, plus lambda1 times the identity loss."""
    return _align_loss(moving, fixed, G, lambda1, window, terms=terms)


def align_loss_sup(
    moving: Tensor,
    fixed: Tensor,
    moving_mask: Tensor,
    fixed_mask: Tensor,
    G: AlignerFn,
    lambda1: float,
    lambda2: float,
    window: int = 9,
    terms: Optional[Dict[str, float]] = None,
) -> Tensor:
    """Unsupervised loss plus lambda2 times the similarity of the softly warped masks."""
    return _align_loss(
        moving, fixed, G, lambda1, window, (moving_mask, fixed_mask), lambda2, terms
    )


def cons1_loss(
    S: SegmentorFn,
    f_j_to_i: Tensor,
    f_i_to_j: Tensor,
    M_i: Tensor,
    M_j: Tensor,
) -> Tensor:
    """Masks segmented after alignment should match the single-view masks (held constant)."""
    return vc.add(
        vc.mse(S(f_j_to_i), M_i.detach()),
        vc.mse(S(f_i_to_j), M_j.detach()),
    )


def cons2_loss(
    S: SegmentorFn,
    G: AlignerFn,
    I_i: Tensor,
    I_j: Tensor,
    target: str = "pose-consistent",
) -> Tensor:
    """
    Segment first, then register: warped single-view masks compared with a mask target.

    "as-written" compares S(I_i) warped into pose j against S(I_i) itself;
    "pose-consistent" compares it against S(I_j). Only G receives gradients.
    """
    if target not in ("as-written", "pose-consistent"):
        raise ConfigError("unknown cons2 target", {"target": target})
    with torch.no_grad():
        M_i = S(I_i)
        M_j = S(I_j)
    F_Mi = warp_tensor(M_i, G(I_i, I_j))
    F_Mj = warp_tensor(M_j, G(I_j, I_i))
    if target == "as-written":
        return vc.add(vc.mse(F_Mi, M_i), vc.mse(F_Mj, M_j))
    return vc.add(vc.mse(F_Mi, M_j), vc.mse(F_Mj, M_i))
