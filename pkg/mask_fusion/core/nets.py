"""
Segmentor (small 3D U-Net) and AlignNet (rigid localization network).

Layers hold their parameters as torch modules but compute through the volcore
primitives, so every shape precondition is checked on the way.
"""

import json
import math
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from . import volcore as vc
from .error_trace import logger
from .errors import CheckpointError, ShapeError
from .geometry import warp_tensor

Tensor = torch.Tensor


class Conv3d(nn.Module):
    def __init__(self, cin: int, cout: int, k: int = 3) -> None:
        super().__init__()
        self.padding = k // 2
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k, k))
        self.bias = nn.Parameter(torch.empty(cout))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        bound = 1.0 / math.sqrt(cin * k**3)
        nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x: Tensor) -> Tensor:
        return vc.conv3d(x, self.weight, self.bias, stride=1, padding=self.padding)


class ConvBlock(nn.Module):
    """Two 3x3x3 convolutions with ReLU."""

    def __init__(self, cin: int, cout: int) -> None:
        super().__init__()
        self.conv1 = Conv3d(cin, cout)
        self.conv2 = Conv3d(cout, cout)

    def forward(self, x: Tensor) -> Tensor:
        return vc.relu(self.conv2(vc.relu(self.conv1(x))))


class Segmentor(nn.Module):
    """Two-level U-Net with skip connections and a sigmoid head."""

    def __init__(self, base_channels: int = 8) -> None:
        super().__init__()
        c = base_channels
        self.base_channels = c
        self.enc1 = ConvBlock(1, c)
        self.enc2 = ConvBlock(c, 2 * c)
        self.bottom = ConvBlock(2 * c, 4 * c)
        self.dec2 = ConvBlock(4 * c + 2 * c, 2 * c)
        self.dec1 = ConvBlock(2 * c + c, c)
        self.head = Conv3d(c, 1, k=1)

    def config(self) -> Dict[str, Any]:
        return {"base_channels": self.base_channels}

    def forward(self, x: Tensor) -> Tensor:
        if any(s % 4 for s in x.shape[2:]):
            raise ShapeError(
                "segmentor input extents must be divisible by 4", {"shape": list(x.shape)}
            )
        e1 = self.enc1(x)
        e2 = self.enc2(vc.maxpool3d(e1, 2))
        b = self.bottom(vc.maxpool3d(e2, 2))
        d2 = self.dec2(vc.concat_channels([vc.upsample_nearest3d(b, 2), e2]))
        d1 = self.dec1(vc.concat_channels([vc.upsample_nearest3d(d2, 2), e1]))
        return vc.sigmoid(self.head(d1))


class AlignNet(nn.Module):
    """
    Localization trunk over the channel-stacked (moving, fixed) pair.

    Stride-1 convolutions alternate with 2x max pooling until the grid is 4 voxels
    (or odd); the flattened features feed a dense head whose last layer starts at
    zero, so an untrained network predicts the identity transform.
    """

    def __init__(self, size: int = 64, base_channels: int = 8, hidden: int = 64) -> None:
        super().__init__()
        self.size = size
        self.base_channels = base_channels
        self.hidden = hidden
        layers = []
        cin, extent, level = 2, size, 0
        while extent > 4 and extent % 2 == 0:
            cout = min(base_channels * 2**level, 32)
            layers.append(Conv3d(cin, cout))
            cin, extent, level = cout, extent // 2, level + 1
        self.trunk = nn.ModuleList(layers)
        self.top = Conv3d(cin, cin)
        self.features = cin * extent**3
        self.fc1 = nn.Linear(self.features, hidden)
        self.fc2 = nn.Linear(hidden, 6)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def config(self) -> Dict[str, Any]:
        return {"size": self.size, "base_channels": self.base_channels, "hidden": self.hidden}

    def forward(self, moving: Tensor, fixed: Tensor) -> Tensor:
        if tuple(moving.shape[2:]) != (self.size,) * 3:
            raise ShapeError(
                "aligner input does not match its grid size",
                {"expected": self.size, "shape": list(moving.shape)},
            )
        x = vc.concat_channels([moving, fixed])
        for conv in self.trunk:
            x = vc.maxpool3d(vc.relu(conv(x)), 2)
        x = vc.relu(self.top(x)).reshape(x.shape[0], -1)
        x = vc.relu(vc.linear(x, self.fc1.weight, self.fc1.bias))
        return vc.linear(x, self.fc2.weight, self.fc2.bias)

    def register(self, moving: Tensor, fixed: Tensor, mode: str = "bilinear") -> Tuple[Tensor, Tensor]:
        """Moved image and the parameters that produced it."""
        theta = self(moving, fixed)
        return warp_tensor(moving, theta, mode=mode), theta


MODELS = {"Segmentor": Segmentor, "AlignNet": AlignNet}


def save_checkpoint(
    model: nn.Module, path: Union[str, Path], extra: Optional[Dict[str, Any]] = None
) -> Path:
    """
    Write <path>.json (layer names, shapes, offsets) and <path>.bin (little-endian f32).

    Returns the JSON manifest path.
    """
    stem = Path(path).with_suffix("")
    stem.parent.mkdir(parents=True, exist_ok=True)
    layers, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        layers.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes(order="C"))
        offset += arr.size
    manifest = {
        "model": type(model).__name__,
        "config": model.config(),
        "dtype": "f32",
        "byteorder": "little",
        "layers": layers,
        "extra": extra or {},
    }
    stem.with_suffix(".bin").write_bytes(b"".join(blobs))
    json_path = stem.with_suffix(".json")
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    logger.info(
        "Checkpoint written",
        {"path": str(json_path), "model": manifest["model"], "parameters": offset},
    )
    return json_path


def load_checkpoint(path: Union[str, Path]) -> nn.Module:
    stem = Path(path).with_suffix("")
    json_path, bin_path = stem.with_suffix(".json"), stem.with_suffix(".bin")
    if not json_path.exists() or not bin_path.exists():
        raise CheckpointError("checkpoint files missing", {"path": str(stem)})
    try:
        manifest = json.loads(json_path.read_text(encoding="utf-8"))
        model = MODELS[manifest["model"]](**manifest["config"])
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointError(
            "checkpoint manifest is invalid", {"path": str(json_path), "reason": str(e)}
        ) from e
    flat = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    state = {}
    expected = model.state_dict()
    for layer in manifest["layers"]:
        count = int(np.prod(layer["shape"])) if layer["shape"] else 1
        chunk = flat[layer["offset"] : layer["offset"] + count]
        if chunk.size != count or layer["name"] not in expected:
            raise CheckpointError(
                "checkpoint layer does not fit the model",
                {"path": str(stem), "layer": layer["name"]},
            )
        state[layer["name"]] = torch.from_numpy(chunk.reshape(layer["shape"]).copy())
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(
            "checkpoint weights do not match the model", {"path": str(stem), "reason": str(e)}
        ) from e
    logger.debug("Checkpoint loaded", {"path": str(json_path), "model": manifest["model"]})
    return model
