"""
Rigid 6-DOF transforms and the spatial transformer built on them.

Coordinates are normalized per axis to [-1, 1] with voxel k at -1 + 2k/(n-1), and
grid vectors are ordered (x, y, z) to match torch's grid_sample. A transform maps
output (fixed) coordinates to source (moving) coordinates: out(v) = in(R v + t).
"""

import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError
from .volume import Volume

Tensor = torch.Tensor
Vector3 = Tuple[float, float, float]


def rotation_matrices(angles: Tensor) -> Tensor:
    """Rz @ Ry @ Rx for a [B, 3] batch of (rx, ry, rz) radians, differentiable."""
    rx, ry, rz = angles[:, 0], angles[:, 1], angles[:, 2]
    one = torch.ones_like(rx)
    zero = torch.zeros_like(rx)
    cx, sx = torch.cos(rx), torch.sin(rx)
    cy, sy = torch.cos(ry), torch.sin(ry)
    cz, sz = torch.cos(rz), torch.sin(rz)
    rot_x = torch.stack(
        [one, zero, zero, zero, cx, -sx, zero, sx, cx], dim=1
    ).view(-1, 3, 3)
    rot_y = torch.stack(
        [cy, zero, sy, zero, one, zero, -sy, zero, cy], dim=1
    ).view(-1, 3, 3)
    rot_z = torch.stack(
        [cz, -sz, zero, sz, cz, zero, zero, zero, one], dim=1
    ).view(-1, 3, 3)
    return rot_z @ rot_y @ rot_x


@dataclass(frozen=True)
class AffineParams:
    """Euler angles (rx, ry, rz) in radians and a translation in normalized units."""

    rotation: Vector3 = (0.0, 0.0, 0.0)
    translation: Vector3 = (0.0, 0.0, 0.0)

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls()

    @classmethod
    def from_vector(cls, values: Union[Sequence[float], Tensor, np.ndarray]) -> "AffineParams":
        if isinstance(values, torch.Tensor):
            values = values.detach().reshape(-1).double().tolist()
        flat = [float(v) for v in np.asarray(values, dtype=np.float64).reshape(-1)]
        if len(flat) != 6:
            raise ShapeError("affine vector must have 6 entries", {"length": len(flat)})
        return cls(tuple(flat[:3]), tuple(flat[3:]))  # type: ignore[arg-type]

    @classmethod
    def from_degrees(
        cls, rotation_deg: Vector3 = (0.0, 0.0, 0.0), translation: Vector3 = (0.0, 0.0, 0.0)
    ) -> "AffineParams":
        return cls(tuple(math.radians(a) for a in rotation_deg), tuple(translation))  # type: ignore[arg-type]

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "AffineParams":
        """Recover Euler angles from a rigid 4x4 matrix (valid for |ry| < 90 degrees)."""
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ShapeError("expected a 4x4 matrix", {"shape": list(m.shape)})
        r = m[:3, :3]
        ry = -math.asin(max(-1.0, min(1.0, r[2, 0])))
        rx = math.atan2(r[2, 1], r[2, 2])
        rz = math.atan2(r[1, 0], r[0, 0])
        return cls((rx, ry, rz), tuple(float(v) for v in m[:3, 3]))  # type: ignore[arg-type]

    def to_vector(self) -> np.ndarray:
        return np.array(self.rotation + self.translation, dtype=np.float64)

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> Tensor:
        """[1, 6] tensor usable wherever a network would emit parameters."""
        return torch.tensor(self.to_vector(), dtype=dtype).view(1, 6)

    def to_matrix(self) -> np.ndarray:
        rot = rotation_matrices(torch.tensor([self.rotation], dtype=torch.float64))[0]
        m = np.eye(4)
        m[:3, :3] = rot.numpy()
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "AffineParams":
        m = self.to_matrix()
        inv = np.eye(4)
        inv[:3, :3] = m[:3, :3].T
        inv[:3, 3] = -m[:3, :3].T @ m[:3, 3]
        return AffineParams.from_matrix(inv)

    def compose(self, other: "AffineParams") -> "AffineParams":
        """Matrix self @ other; warping by self then other equals warping by the result."""
        return AffineParams.from_matrix(self.to_matrix() @ other.to_matrix())

    def rotation_deg(self) -> Vector3:
        return tuple(math.degrees(a) for a in self.rotation)  # type: ignore[return-value]

    def translation_vox(self, size: int) -> Vector3:
        return tuple(normalized_to_voxels(t, size) for t in self.translation)  # type: ignore[return-value]

    def to_dict(self) -> dict:
        return {
            "rotation_rad": list(self.rotation),
            "translation_norm": list(self.translation),
            "matrix": self.to_matrix().reshape(-1).tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "AffineParams":
        return cls(
            tuple(float(v) for v in payload["rotation_rad"]),  # type: ignore[arg-type]
            tuple(float(v) for v in payload["translation_norm"]),  # type: ignore[arg-type]
        )


def relative_transform(moving: AffineParams, fixed: AffineParams) -> AffineParams:
    """Transform registering a view acquired under `moving` onto one acquired under `fixed`."""
    return moving.inverse().compose(fixed)


def voxels_to_normalized(voxels: float, size: int) -> float:
    return 2.0 * voxels / (size - 1)


def normalized_to_voxels(value: float, size: int) -> float:
    return value * (size - 1) / 2.0


def rotation_error_deg(estimate: AffineParams, truth: AffineParams) -> float:
    """Geodesic angle of R_est^T R_true in degrees."""
    r = estimate.to_matrix()[:3, :3].T @ truth.to_matrix()[:3, :3]
    cos = max(-1.0, min(1.0, (np.trace(r) - 1.0) / 2.0))
    return math.degrees(math.acos(cos))


def translation_error_vox(estimate: AffineParams, truth: AffineParams, size: int) -> float:
    diff = np.asarray(estimate.translation) - np.asarray(truth.translation)
    return float(np.linalg.norm(diff) * (size - 1) / 2.0)


def identity_grid(shape: Sequence[int], dtype: torch.dtype = torch.float64) -> Tensor:
    """[D, H, W, 3] normalized (x, y, z) coordinates of every voxel, -1 + 2k/(n-1) per axis."""
    if len(shape) != 3 or any(int(s) < 2 for s in shape):
        raise ShapeError("grid shape needs three extents >= 2", {"shape": list(shape)})
    d, h, w = (int(s) for s in shape)
    zs, ys, xs = (torch.arange(n, dtype=torch.float64) * 2.0 / (n - 1) - 1.0 for n in (d, h, w))
    gz, gy, gx = torch.meshgrid(zs, ys, xs, indexing="ij")
    return torch.stack([gx, gy, gz], dim=-1).to(dtype)


def affine_grid(
    params: Union[AffineParams, Tensor], shape: Sequence[int]
) -> Tensor:
    """
    Sampling grid for one transform or a batch of them.

    Args:
        params: AffineParams, or a [B, 6] tensor (rx, ry, rz, tx, ty, tz)
        shape: output spatial extents (D, H, W)

    Returns:
        [D, H, W, 3] for AffineParams, [B, D, H, W, 3] for a tensor
    """
    single = isinstance(params, AffineParams)
    theta = params.to_tensor() if single else params
    if theta.dim() != 2 or theta.shape[1] != 6:
        raise ShapeError("affine parameters must be [B, 6]", {"shape": list(theta.shape)})
    # float64 keeps identity-grid nodes on integer voxel positions after unnormalizing
    theta = theta.to(torch.float64)
    base = identity_grid(shape)
    rot = rotation_matrices(theta[:, :3])
    grid = torch.einsum("dhwj,bij->bdhwi", base, rot) + theta[:, None, None, None, 3:]
    return grid[0] if single else grid


def grid_sample(
    input: Tensor,
    grid: Tensor,
    mode: str = "bilinear",
    padding: str = "border",
) -> Tensor:
    """
    Trilinear (or nearest) sampling of a [N, C, D, H, W] tensor at normalized coordinates.

    Out-of-range coordinates read the clamped border value by default; pass
    padding="zeros" for quantities that must vanish outside the source. Sampling
    runs in float64 and the result is cast back to the input dtype.
    """
    if input.dim() != 5:
        raise ShapeError("input must be [N, C, D, H, W]", {"shape": list(input.shape)})
    if grid.dim() == 4:
        grid = grid.unsqueeze(0)
    if grid.dim() != 5 or grid.shape[-1] != 3:
        raise ShapeError("grid must be [N, D, H, W, 3]", {"shape": list(grid.shape)})
    if grid.shape[0] != input.shape[0]:
        if grid.shape[0] == 1:
            grid = grid.expand(input.shape[0], *grid.shape[1:])
        else:
            raise ShapeError(
                "grid batch differs from input batch",
                {"grid": list(grid.shape), "input": list(input.shape)},
            )
    out = F.grid_sample(
        input.to(torch.float64),
        grid.to(torch.float64),
        mode=mode,
        padding_mode=padding,
        align_corners=True,
    )
    return out.to(input.dtype)


def warp_tensor(
    moving: Tensor,
    theta: Union[AffineParams, Tensor],
    mode: str = "bilinear",
    padding: str = "border",
) -> Tensor:
    """Warp a [N, C, D, H, W] tensor by one transform per batch item."""
    if isinstance(theta, AffineParams):
        theta = theta.to_tensor(dtype=moving.dtype)
    if not torch.is_grad_enabled() or not (theta.requires_grad or moving.requires_grad):
        if theta.shape[0] == moving.shape[0] and not theta.any():
            return moving.clone()
    grid = affine_grid(theta, moving.shape[2:])
    return grid_sample(moving, grid, mode=mode, padding=padding)


def warp(
    moving: Volume,
    params: AffineParams,
    mode: str = "bilinear",
    padding: str = "border",
) -> Volume:
    """Resample a cubic volume into the pose described by params."""
    if not moving.is_cubic:
        raise ShapeError("warp needs a cubic volume", {"dims": list(moving.dims)})
    if params == AffineParams.identity():
        return moving
    source = torch.from_numpy(np.ascontiguousarray(moving.data, dtype=np.float32))
    with torch.no_grad():
        out = warp_tensor(source[None, None], params, mode=mode, padding=padding)
    data = out[0, 0].numpy()
    if moving.kind == "mask":
        data = (data >= 0.5).astype(np.float32)
    return moving.with_data(data)
