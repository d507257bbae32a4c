"""Overlap, under/over-segmentation and boundary metrics for binary masks."""

import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import DataError, ShapeError
from .volume import Volume

MaskLike = Union[Volume, np.ndarray]

SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def _binary(mask: MaskLike) -> np.ndarray:
    data = mask.data if isinstance(mask, Volume) else np.asarray(mask)
    return data >= 0.5


def _pair(pred: MaskLike, gt: MaskLike) -> Tuple[np.ndarray, np.ndarray]:
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise ShapeError(
            "prediction and ground truth differ in shape",
            {"pred": list(p.shape), "gt": list(g.shape)},
        )
    return p, g


@dataclass
class MetricsReport:
    dsc: float
    us: float
    os: float
    rms: float
    mba: float
    tp: int
    fn: int
    fp: int
    gt_size: int
    tau: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def dsc(pred: MaskLike, gt: MaskLike) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both masks are empty."""
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / total


def us_os_rms(pred: MaskLike, gt: MaskLike) -> Tuple[float, float, float]:
    """Missed and spurious voxels, each relative to |G|, and their quadratic mean."""
    p, g = _pair(pred, gt)
    gt_size = int(g.sum())
    if gt_size == 0:
        raise DataError("under/over-segmentation needs a non-empty ground truth")
    us = int(np.logical_and(g, ~p).sum()) / gt_size
    os_ = int(np.logical_and(p, ~g).sum()) / gt_size
    return us, os_, math.sqrt((us**2 + os_**2) / 2.0)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbour (outside counts)."""
    interior = ndimage.binary_erosion(mask, structure=SIX_CONNECTED, border_value=0)
    return mask & ~interior


def _recall(src: np.ndarray, ref: np.ndarray, tau: int) -> float:
    if tau > 0:
        near = ndimage.binary_dilation(ref, structure=np.ones((2 * tau + 1,) * 3, dtype=bool))
    else:
        near = ref
    return float(np.logical_and(src, near).sum()) / float(src.sum())


def mba(pred: MaskLike, gt: MaskLike, tau: int = 2) -> float:
    """Mean of the two boundary recalls at Chebyshev tolerance tau."""
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        raise DataError("boundary accuracy needs non-empty masks on both sides")
    bp, bg = boundary(p), boundary(g)
    return 0.5 * (_recall(bg, bp, tau) + _recall(bp, bg, tau))


def evaluate(pred: MaskLike, gt: MaskLike, tau: int = 2) -> MetricsReport:
    p, g = _pair(pred, gt)
    us, os_, rms = us_os_rms(p, g)
    return MetricsReport(
        dsc=dsc(p, g),
        us=us,
        os=os_,
        rms=rms,
        mba=mba(p, g, tau) if p.any() else 0.0,
        tp=int(np.logical_and(p, g).sum()),
        fn=int(np.logical_and(g, ~p).sum()),
        fp=int(np.logical_and(p, ~g).sum()),
        gt_size=int(g.sum()),
        tau=tau,
    )


CROSS_VIEW_PAIRS = (("1", "2"), ("1", "3"), ("2", "3"), ("2", "HR"), ("3", "HR"))


def cross_view_report(
    m1: MaskLike, m2_to_1: MaskLike, m3_to_1: MaskLike, hr_gt: MaskLike
) -> Dict[str, float]:
    """Pairwise DSC between aligned view masks and the HR ground truth."""
    masks = {"1": m1, "2": m2_to_1, "3": m3_to_1, "HR": hr_gt}
    return {f"{a}&{b}": dsc(masks[a], masks[b]) for a, b in CROSS_VIEW_PAIRS}


def summarize(rows: Iterable[Mapping[str, float]], keys: Sequence[str]) -> Dict[str, Dict[str, float]]:
    """Mean and population standard deviation per key."""
    rows = list(rows)
    out: Dict[str, Dict[str, float]] = {}
    for key in keys:
        values: List[float] = [float(r[key]) for r in rows if key in r]
        if values:
            out[key] = {"mean": float(np.mean(values)), "std": float(np.std(values)), "n": len(values)}
    return out
