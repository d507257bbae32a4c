"""
Volume container, SMV file format and the unit-matching preprocessing.

Arrays are stored as numpy (Z, Y, X) in C order, which is the x-fastest layout
index = x + X * (y + Y * z) used on disk.
"""

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .error_trace import logger
from .errors import (
    LengthMismatchError,
    MalformedHeaderError,
    ShapeError,
    UnknownDtypeError,
)

KINDS = ("image", "mask")
SMV_DTYPES = {"f32": np.dtype("<f4")}


class ViewAxis(Enum):
    """Acquisition orientation, named by its sparse (through-plane) axis."""

    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"

    @property
    def array_axis(self) -> int:
        """Index of the sparse axis in a (Z, Y, X) array."""
        return {"axial": 0, "coronal": 1, "sagittal": 2}[self.value]

    @property
    def spacing_index(self) -> int:
        """Index of the sparse axis in an (x, y, z) spacing triple."""
        return 2 - self.array_axis

    @classmethod
    def ordered(cls) -> Tuple["ViewAxis", ...]:
        return (cls.AXIAL, cls.CORONAL, cls.SAGITTAL)


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: str = "image"

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if data.ndim != 3:
            raise ShapeError("volume data must be 3-D", {"ndim": data.ndim})
        if self.kind not in KINDS:
            raise ShapeError("unknown volume kind", {"kind": self.kind})
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ShapeError("spacing must be three positive values", {"spacing": spacing})
        if self.kind == "mask" and not np.isin(data, (0.0, 1.0)).all():
            raise ShapeError("mask volumes may only contain 0 and 1")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> Tuple[int, int, int]:
        """(X, Y, Z) extents."""
        z, y, x = self.data.shape
        return x, y, z

    @property
    def is_cubic(self) -> bool:
        return len(set(self.data.shape)) == 1

    def with_data(self, data: np.ndarray, kind: Optional[str] = None) -> "Volume":
        return Volume(data, self.spacing, kind or self.kind)

    def as_mask(self, threshold: float = 0.5) -> "Volume":
        return Volume((self.data >= threshold).astype(np.float32), self.spacing, "mask")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


def slice_anchor(slice_index: int, factor: int) -> int:
    """Up-sampled index holding LR slice `slice_index` (block start, not block center)."""
    return slice_index * factor


def upsample_to_isotropic(lr: Volume, axis: ViewAxis, target_dim: int) -> Volume:
    """Nearest replication of the sparse axis up to target_dim slices."""
    extent = lr.data.shape[axis.array_axis]
    if target_dim < extent or target_dim % extent:
        raise ShapeError(
            "target extent is not an integer multiple of the sparse extent",
            {"axis": axis.value, "extent": extent, "target_dim": target_dim},
        )
    factor = target_dim // extent
    data = np.repeat(lr.data, factor, axis=axis.array_axis)
    in_plane = [s for i, s in enumerate(lr.spacing) if i != axis.spacing_index]
    p = float(min(in_plane))
    return Volume(data, (p, p, p), lr.kind)


def normalize_intensity(v: Volume, low: float = 2.0, high: float = 98.0) -> Volume:
    """Clamp to the [low, high] nearest-rank percentiles and rescale to [0, 1]."""
    if v.kind != "image":
        raise ShapeError("intensity normalization applies to images only", {"kind": v.kind})
    values = v.data.astype(np.float64)
    lo, hi = np.percentile(values, [low, high], method="inverted_cdf")
    if hi <= lo:
        lo, hi = values.min(), values.max()
    if hi <= lo:
        return v.with_data(np.zeros_like(v.data))
    out = (np.clip(values, lo, hi) - lo) / (hi - lo)
    return v.with_data(out.astype(np.float32))


def write_volume(v: Volume, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing),
        "dtype": "f32",
        "layout": "x-fastest",
        "kind": v.kind,
    }
    payload = v.data.astype(SMV_DTYPES["f32"], copy=False).tobytes(order="C")
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\0")
        f.write(payload)
    logger.debug("Volume written", {"path": str(path), "dims": header["dims"]})
    return path


def read_volume(path: Union[str, Path]) -> Volume:
    raw = Path(path).read_bytes()
    end = raw.find(b"\0")
    if end < 0:
        raise MalformedHeaderError("SMV header is not NUL-terminated", {"path": str(path)})
    try:
        header = json.loads(raw[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeaderError(
            "SMV header is not valid JSON", {"path": str(path), "reason": str(e)}
        ) from e
    if not isinstance(header, dict) or not {"dims", "spacing_mm", "dtype"} <= set(header):
        raise MalformedHeaderError(
            "SMV header lacks dims, spacing_mm or dtype", {"path": str(path)}
        )
    dtype = SMV_DTYPES.get(header["dtype"])
    if dtype is None:
        raise UnknownDtypeError(
            "unsupported SMV dtype", {"path": str(path), "dtype": header["dtype"]}
        )
    if header.get("layout", "x-fastest") != "x-fastest":
        raise MalformedHeaderError(
            "unsupported SMV layout", {"path": str(path), "layout": header.get("layout")}
        )
    dims = header["dims"]
    if len(dims) != 3 or any(not isinstance(d, int) or d < 1 for d in dims):
        raise MalformedHeaderError("SMV dims must be three positive integers", {"dims": dims})
    payload = raw[end + 1 :]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(payload) != expected:
        raise LengthMismatchError(
            "SMV payload length does not match dims",
            {"path": str(path), "expected_bytes": expected, "actual_bytes": len(payload)},
        )
    x, y, z = dims
    data = np.frombuffer(payload, dtype=dtype).reshape(z, y, x).astype(np.float32)
    return Volume(data, tuple(header["spacing_mm"]), header.get("kind", "image"))
