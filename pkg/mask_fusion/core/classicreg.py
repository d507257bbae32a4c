"""
Classical intensity-based rigid registration.

Global Pearson correlation is maximized over the 6 rigid parameters with
finite-difference gradient ascent, step halving on failure, and a coarse-to-fine
average-pooling pyramid. Parameters live in normalized coordinates, so a
solution carries across pyramid levels unchanged.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .error_trace import logger
from .errors import ConfigError, DataError
from .geometry import AffineParams, warp_tensor
from .volume import Volume

Tensor = torch.Tensor
ArrayLike = Union[Volume, np.ndarray]


@dataclass
class IterativeRegConfig:
    tolerance: float = 1e-6
    max_iterations: int = 500
    levels: int = 3
    fd_step: float = 0.01
    initial_step: float = 0.05
    min_step: float = 1e-4
    mask_smoothing_sigma: float = 1.0

    def validate(self) -> None:
        if self.tolerance <= 0:
            raise ConfigError("classicreg.tolerance must be positive")
        if self.levels < 1 or self.max_iterations < 1:
            raise ConfigError("classicreg.levels and max_iterations must be >= 1")
        if self.fd_step <= 0 or self.initial_step <= 0 or self.min_step <= 0:
            raise ConfigError("classicreg step sizes must be positive")
        if self.mask_smoothing_sigma < 0:
            raise ConfigError("classicreg.mask_smoothing_sigma must be >= 0")


def _array(v: ArrayLike) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v)


def _pyramid(data: np.ndarray, levels: int) -> List[Tensor]:
    """Coarse-to-fine list of [1, 1, D, H, W] float64 tensors."""
    t = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float64))[None, None]
    pyramid = [t]
    for _ in range(levels - 1):
        if min(t.shape[2:]) < 16:
            break
        t = F.avg_pool3d(t, 2)
        pyramid.append(t)
    return pyramid[::-1]


def pearson(a: Tensor, b: Tensor) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = torch.sqrt((a * a).sum() * (b * b).sum())
    if float(denom) == 0.0:
        return 0.0
    return float((a * b).sum() / denom)


def _objective(moving: Tensor, fixed: Tensor, vec: np.ndarray) -> float:
    theta = torch.from_numpy(vec).view(1, 6)
    with torch.no_grad():
        warped = warp_tensor(moving, theta)
    return pearson(warped, fixed)


def _ascend(
    moving: Tensor,
    fixed: Tensor,
    start: np.ndarray,
    cfg: IterativeRegConfig,
    level: int,
    trace: List[Dict],
) -> np.ndarray:
    p = start.copy()
    obj = _objective(moving, fixed, p)
    trace.append({"level": level, "iteration": 0, "objective": obj, "step": cfg.initial_step})
    step = cfg.initial_step
    h = cfg.fd_step
    for it in range(1, cfg.max_iterations + 1):
        grad = np.zeros(6)
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            grad[k] = (_objective(moving, fixed, p + e) - _objective(moving, fixed, p - e)) / (2 * h)
        norm = float(np.linalg.norm(grad))
        if norm == 0.0:
            break
        direction = grad / norm
        candidate, value = None, obj
        while step >= cfg.min_step:
            candidate = p + step * direction
            value = _objective(moving, fixed, candidate)
            if value > obj:
                break
            step *= 0.5
        if value <= obj or candidate is None:
            break
        delta = value - obj
        p, obj = candidate, value
        trace.append({"level": level, "iteration": it, "objective": obj, "step": step})
        if delta < cfg.tolerance:
            break
        step = min(step * 1.5, cfg.initial_step)
    return p


def _check_variance(data: np.ndarray, role: str) -> None:
    if float(np.std(data)) == 0.0:
        raise DataError(f"{role} volume is constant; correlation is undefined", {"role": role})


def _register(
    moving: np.ndarray,
    fixed: np.ndarray,
    cfg: IterativeRegConfig,
    init: Optional[AffineParams],
) -> Tuple[AffineParams, List[Dict]]:
    if moving.shape != fixed.shape:
        raise DataError(
            "moving and fixed volumes differ in shape",
            {"moving": list(moving.shape), "fixed": list(fixed.shape)},
        )
    _check_variance(moving, "moving")
    _check_variance(fixed, "fixed")
    trace: List[Dict] = []
    p = (init or AffineParams.identity()).to_vector()
    for level, (m, f) in enumerate(zip(_pyramid(moving, cfg.levels), _pyramid(fixed, cfg.levels))):
        p = _ascend(m, f, p, cfg, level, trace)
    return AffineParams.from_vector(p), trace


def register_cc(
    moving: ArrayLike,
    fixed: ArrayLike,
    cfg: Optional[IterativeRegConfig] = None,
    init: Optional[AffineParams] = None,
) -> Tuple[AffineParams, List[Dict]]:
    """Rigid parameters maximizing global correlation, plus the per-iteration trace."""
    cfg = cfg or IterativeRegConfig()
    params, trace = _register(_array(moving), _array(fixed), cfg, init)
    logger.debug(
        "Image registration finished",
        {"iterations": len(trace), "objective": trace[-1]["objective"] if trace else None},
    )
    return params, trace


def register_masks_cc(
    moving_mask: ArrayLike,
    fixed_mask: ArrayLike,
    cfg: Optional[IterativeRegConfig] = None,
    init: Optional[AffineParams] = None,
) -> Tuple[AffineParams, List[Dict]]:
    """Same optimizer on binary masks, Gaussian-smoothed so the objective has slope."""
    cfg = cfg or IterativeRegConfig()
    moving = (_array(moving_mask) >= 0.5).astype(np.float64)
    fixed = (_array(fixed_mask) >= 0.5).astype(np.float64)
    start = init or AffineParams.identity()
    if not (moving * fixed).any():
        logger.warning(
            "Mask registration skipped: masks do not overlap",
            {"moving_voxels": int(moving.sum()), "fixed_voxels": int(fixed.sum())},
        )
        return start, [{"level": 0, "iteration": 0, "objective": 0.0, "warning": "no-overlap"}]
    if cfg.mask_smoothing_sigma > 0:
        moving = ndimage.gaussian_filter(moving, cfg.mask_smoothing_sigma)
        fixed = ndimage.gaussian_filter(fixed, cfg.mask_smoothing_sigma)
    return _register(moving, fixed, cfg, start)


class ClassicAligner:
    """Aligner callable backed by the iterative optimizer, for the baseline pipelines."""

    def __init__(self, cfg: Optional[IterativeRegConfig] = None, on_masks: bool = False) -> None:
        self.cfg = cfg or IterativeRegConfig()
        self.on_masks = on_masks

    def __call__(self, moving: Tensor, fixed: Tensor) -> Tensor:
        rows = []
        for m, f in zip(moving, fixed):
            m_arr = m[0].detach().cpu().numpy()
            f_arr = f[0].detach().cpu().numpy()
            register = register_masks_cc if self.on_masks else register_cc
            params, _ = register(m_arr, f_arr, self.cfg)
            rows.append(params.to_tensor(dtype=moving.dtype))
        return torch.cat(rows, dim=0)
