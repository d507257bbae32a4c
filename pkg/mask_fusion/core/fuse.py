"""
Inference path: align the non-axial views into the axial frame, segment, and fuse.

Gaussian fusion weights every view by a through-plane confidence that is 1 on the
acquired slices and decays with distance to them; voting and nearest-slice fusion
are the baselines. Weights are always accumulated in axial, coronal, sagittal order.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np
import torch
from scipy import ndimage

from .error_trace import logger
from .errors import ShapeError
from .geometry import (
    AffineParams,
    relative_transform,
    rotation_error_deg,
    translation_error_vox,
    warp_tensor,
)
from .losses import AlignerFn, SegmentorFn
from .metrics import cross_view_report, dsc
from .synth import PreparedStudy
from .volume import ViewAxis, Volume, slice_anchor, write_volume

Tensor = torch.Tensor
MaskLike = Union[Volume, np.ndarray]

WEIGHT_EPS = 1e-8
ORDERS = ("align-then-segment", "segment-then-align")


@dataclass
class FusionResult:
    soft: Volume
    binary: Volume
    aligned_masks: Dict[ViewAxis, Volume]
    confidences: Dict[ViewAxis, Volume] = field(default_factory=dict)
    transforms: Dict[ViewAxis, AffineParams] = field(default_factory=dict)
    method: str = "gaussian"


def _canonical(views: Mapping[ViewAxis, object]) -> list:
    return [axis for axis in ViewAxis.ordered() if axis in views]


def _array(v: MaskLike) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v)


def _to_tensor(v: Volume) -> Tensor:
    return torch.from_numpy(np.array(v.data, dtype=np.float32))[None, None]


def _check_grid(axis: ViewAxis, n: int, d: int) -> None:
    if d < 1 or n < 1 or n % d:
        raise ShapeError(
            "grid extent must be a positive multiple of the slice distance",
            {"axis": axis.value, "n": n, "d": d},
        )


def _broadcast(profile: np.ndarray, axis: ViewAxis, n: int) -> np.ndarray:
    shape = [1, 1, 1]
    shape[axis.array_axis] = n
    return np.broadcast_to(profile.reshape(shape), (n, n, n)).copy()


def sampled_planes(n: int, d: int) -> np.ndarray:
    return np.array([slice_anchor(s, d) for s in range(n // d)])


def through_plane_distance(axis: ViewAxis, n: int, d: int) -> np.ndarray:
    """Voxel distance along the sparse axis to the nearest acquired slice, as an (n,) profile."""
    _check_grid(axis, n, d)
    idx = np.arange(n)
    return np.abs(idx[:, None] - sampled_planes(n, d)[None, :]).min(axis=1).astype(np.float64)


def sampling_matrix(axis: ViewAxis, n: int, d: int) -> Volume:
    """1 on voxels copied from an acquired slice, 0 on replicated ones."""
    _check_grid(axis, n, d)
    profile = np.zeros(n, dtype=np.float32)
    profile[sampled_planes(n, d)] = 1.0
    return Volume(_broadcast(profile, axis, n), kind="mask")


def gaussian_confidence(
    axis: ViewAxis, n: int, d: int, sigma: Optional[float] = None
) -> Volume:
    """P = exp(-delta^2 / (2 sigma^2)) with sigma = d / 2 voxels unless given."""
    sigma = float(sigma) if sigma is not None else d / 2.0
    delta = through_plane_distance(axis, n, d)
    if d == 1:
        profile = np.ones(n)
    else:
        profile = np.exp(-(delta**2) / (2.0 * sigma**2))
    return Volume(_broadcast(profile.astype(np.float32), axis, n), kind="image")


@torch.no_grad()
def align_and_segment(
    images: Mapping[ViewAxis, Volume],
    S: SegmentorFn,
    aligner: AlignerFn,
    order: str = "align-then-segment",
) -> tuple:
    """
    Soft masks of every view in the axial frame and the transforms that put them there.

    align-then-segment warps each image onto the axial image and segments the result;
    segment-then-align segments each view first and registers the masks.
    """
    if ViewAxis.AXIAL not in images:
        raise ShapeError("the axial view is the reference and must be present")
    if order not in ORDERS:
        raise ShapeError("unknown alignment order", {"order": order})
    ref = images[ViewAxis.AXIAL]
    shapes = {v.data.shape for v in images.values()}
    if len(shapes) != 1:
        raise ShapeError("views differ in shape", {"shapes": sorted(shapes)})
    fixed = _to_tensor(ref)
    fixed_mask = S(fixed)
    masks: Dict[ViewAxis, Volume] = {}
    transforms: Dict[ViewAxis, AffineParams] = {}
    for axis in _canonical(images):
        if axis is ViewAxis.AXIAL:
            masks[axis] = ref.with_data(fixed_mask[0, 0].numpy(), kind="image")
            transforms[axis] = AffineParams.identity()
            continue
        moving = _to_tensor(images[axis])
        if order == "align-then-segment":
            theta = aligner(moving, fixed)
            aligned = S(warp_tensor(moving, theta))
        else:
            moving_mask = S(moving)
            theta = aligner(moving_mask, fixed_mask)
            aligned = warp_tensor(moving_mask, theta)
        masks[axis] = ref.with_data(aligned[0, 0].numpy(), kind="image")
        transforms[axis] = AffineParams.from_vector(theta[0])
    return masks, transforms


def warp_confidence(conf: Volume, params: AffineParams, mode: str = "bilinear") -> Volume:
    """Confidence carried into the axial frame; voxels the view never covers get zero."""
    with torch.no_grad():
        out = warp_tensor(_to_tensor(conf), params, mode=mode, padding="zeros")
    return conf.with_data(out[0, 0].numpy())


def fuse_weighted(
    masks: Mapping[ViewAxis, MaskLike], confidences: Mapping[ViewAxis, MaskLike]
) -> np.ndarray:
    """Voxelwise sum(P_i M_i) / sum(P_i); zero where the total weight is below WEIGHT_EPS."""
    axes = _canonical(masks)
    if set(axes) != set(_canonical(confidences)):
        raise ShapeError("every fused mask needs a confidence map")
    num = np.zeros(_array(masks[axes[0]]).shape, dtype=np.float64)
    den = np.zeros_like(num)
    for axis in axes:
        p = _array(confidences[axis]).astype(np.float64)
        num += p * _array(masks[axis])
        den += p
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > WEIGHT_EPS)
    return out.astype(np.float32)


def fuse_vote(masks: Sequence[MaskLike]) -> Volume:
    """Strict majority of the binarized masks (2 of 3)."""
    if not masks:
        raise ShapeError("voting needs at least one mask")
    stacked = np.stack([_array(m) >= 0.5 for m in masks])
    label = stacked.sum(axis=0) * 2 > len(masks)
    return Volume(label.astype(np.float32), kind="mask")


def fuse_nearest(
    masks: Mapping[ViewAxis, MaskLike], sampling: Mapping[ViewAxis, MaskLike]
) -> Volume:
    """Each voxel takes the view whose nearest acquired voxel is closest; ties favour axial."""
    axes = _canonical(masks)
    distances = []
    for axis in axes:
        acquired = _array(sampling[axis]) >= 0.5
        if acquired.any():
            distances.append(ndimage.distance_transform_edt(~acquired))
        else:
            distances.append(np.full(acquired.shape, np.inf))
    choice = np.argmin(np.stack(distances), axis=0)
    labels = np.stack([_array(masks[axis]) >= 0.5 for axis in axes])
    fused = np.take_along_axis(labels, choice[None], axis=0)[0]
    return Volume(fused.astype(np.float32), kind="mask")


def fuse_gaussian(
    images: Mapping[ViewAxis, Volume],
    S: SegmentorFn,
    G: AlignerFn,
    d: int,
    sigma_vox: Optional[float] = None,
    threshold: float = 0.5,
    order: str = "align-then-segment",
) -> FusionResult:
    return infer_subset(images, S, G, d, len(images), "gaussian", sigma_vox, threshold, order)


def infer_subset(
    images: Mapping[ViewAxis, Volume],
    S: SegmentorFn,
    G: AlignerFn,
    d: int,
    n_views: int = 3,
    method: str = "gaussian",
    sigma_vox: Optional[float] = None,
    threshold: float = 0.5,
    order: str = "align-then-segment",
) -> FusionResult:
    """
    Fuse the first n_views views (axial, then coronal, then sagittal).

    A single view reduces to the axial segmentation itself.
    """
    axes = _canonical(images)[:n_views]
    if not axes or axes[0] is not ViewAxis.AXIAL:
        raise ShapeError("fusion needs the axial view", {"views": [a.value for a in axes]})
    subset = {axis: images[axis] for axis in axes}
    masks, transforms = align_and_segment(subset, S, G, order)
    n = images[ViewAxis.AXIAL].data.shape[0]

    confidences: Dict[ViewAxis, Volume] = {}
    if method == "gaussian":
        for axis in axes:
            conf = gaussian_confidence(axis, n, d, sigma_vox)
            confidences[axis] = conf if axis is ViewAxis.AXIAL else warp_confidence(conf, transforms[axis])
        if len(axes) == 1:
            soft = masks[ViewAxis.AXIAL].data
        else:
            soft = fuse_weighted(masks, confidences)
        binary = (soft >= threshold).astype(np.float32)
    elif method == "vote":
        soft = fuse_vote([masks[a] for a in axes]).data
        binary = soft
    elif method == "nearest":
        for axis in axes:
            s = sampling_matrix(axis, n, d)
            confidences[axis] = s if axis is ViewAxis.AXIAL else warp_confidence(s, transforms[axis], mode="nearest")
        soft = fuse_nearest(masks, confidences).data
        binary = soft
    else:
        raise ShapeError("unknown fusion method", {"method": method})

    ref = images[ViewAxis.AXIAL]
    logger.debug("Views fused", {"method": method, "views": [a.value for a in axes]})
    return FusionResult(
        soft=ref.with_data(soft, kind="image"),
        binary=ref.with_data(binary, kind="mask"),
        aligned_masks=masks,
        confidences=confidences,
        transforms=transforms,
        method=method,
    )


def fusion_report(result: FusionResult, study: PreparedStudy) -> dict:
    """Per-view and fused DSC against the HR mask, with estimated and true transforms."""
    hr = study.hr_mask
    per_view = {axis.value: dsc(m.as_mask(), hr) for axis, m in result.aligned_masks.items()}
    transforms = {}
    for axis, params in result.transforms.items():
        truth = relative_transform(study.misalignments[axis], study.misalignments[ViewAxis.AXIAL])
        transforms[axis.value] = {
            "estimated": params.to_dict(),
            "true": truth.to_dict(),
            "rotation_error_deg": rotation_error_deg(params, truth),
            "translation_error_vox": translation_error_vox(params, truth, study.size),
        }
    report = {
        "study": study.study_id,
        "method": result.method,
        "per_view_dsc": per_view,
        "fused_dsc": dsc(result.binary, hr),
        "transforms": transforms,
    }
    if len(result.aligned_masks) == 3:
        m = result.aligned_masks
        report["cross_view_dsc"] = cross_view_report(
            m[ViewAxis.AXIAL].as_mask(),
            m[ViewAxis.CORONAL].as_mask(),
            m[ViewAxis.SAGITTAL].as_mask(),
            hr,
        )
    return report


def write_fusion(result: FusionResult, out_dir: Union[str, Path], report: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(result.binary, out / "fused_msk.smv")
    write_volume(result.soft, out / "fused_soft.smv")
    for axis, mask in result.aligned_masks.items():
        write_volume(mask.as_mask(), out / f"aligned_{axis.value}_msk.smv")
    path = out / "fusion_report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("Fusion written", {"path": str(out), "fused_dsc": report.get("fused_dsc")})
    return path


