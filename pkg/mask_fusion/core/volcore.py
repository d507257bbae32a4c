"""
Dense tensor primitives with reverse-mode differentiation.

Every primitive validates its preconditions and then runs on torch, whose autograd
graph records the operations in execution order and replays them in reverse on
``backward``. Storage is 32-bit unless ``float64_mode()`` is active, which exists
for gradient checking only.
"""

import contextlib
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericError, ShapeError

Tensor = torch.Tensor
Factor = Union[int, Sequence[int]]

_DTYPE = torch.float32
_SPATIAL = ("D", "H", "W")


def dtype() -> torch.dtype:
    return _DTYPE


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Run primitives in 64-bit; only gradient-check tests should use this."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = torch.float64
    try:
        yield
    finally:
        _DTYPE = previous


def seed_everything(seed: int) -> torch.Generator:
    """Seed torch's global RNG and force deterministic kernels."""
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    return torch.Generator().manual_seed(seed)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Build a contiguous tensor in the active precision."""
    if isinstance(data, torch.Tensor):
        out = data.detach().to(_DTYPE).contiguous().clone()
    else:
        out = torch.as_tensor(np.asarray(data), dtype=_DTYPE).contiguous().clone()
    return out.requires_grad_(requires_grad)


def from_volume_array(array: np.ndarray, requires_grad: bool = False) -> Tensor:
    """(Z, Y, X) array to a 1x1xDxHxW tensor."""
    if array.ndim != 3:
        raise ShapeError("volume array must be 3-D", {"ndim": array.ndim})
    return tensor(array[None, None], requires_grad=requires_grad)


def _check_5d(x: Tensor, name: str) -> None:
    if x.dim() != 5:
        raise ShapeError(
            f"{name} must be 5-D (N, C, D, H, W)", {"name": name, "shape": list(x.shape)}
        )


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.dim() == 0 or b.dim() == 0:
        return
    if a.shape != b.shape:
        for axis, (sa, sb) in enumerate(zip(a.shape, b.shape)):
            if sa != sb:
                raise ShapeError(
                    f"{op}: dimension {axis} differs ({sa} vs {sb})",
                    {"op": op, "dim": axis, "lhs": list(a.shape), "rhs": list(b.shape)},
                )
        raise ShapeError(
            f"{op}: rank differs ({a.dim()} vs {b.dim()})",
            {"op": op, "lhs": list(a.shape), "rhs": list(b.shape)},
        )


def _as_operand(x: Union[Tensor, float], like: Tensor) -> Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.tensor(float(x), dtype=like.dtype)


def conv3d(
    input: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation over the three spatial axes."""
    _check_5d(input, "input")
    _check_5d(weight, "weight")
    cout, cin, kd, kh, kw = weight.shape
    if not kd == kh == kw:
        raise ShapeError("kernel must be cubic", {"kernel": [kd, kh, kw]})
    k = kd
    if k % 2 == 0:
        raise ShapeError("kernel size must be odd", {"kernel": k})
    if stride < 1 or padding < 0:
        raise ShapeError(
            "stride must be >= 1 and padding >= 0", {"stride": stride, "padding": padding}
        )
    if input.shape[1] != cin:
        raise ShapeError(
            f"conv3d: dimension C differs (input {input.shape[1]} vs weight {cin})",
            {"dim": "C", "input": list(input.shape), "weight": list(weight.shape)},
        )
    for name, extent in zip(_SPATIAL, input.shape[2:]):
        span = extent + 2 * padding - k
        if span < 0 or span % stride:
            raise ShapeError(
                f"conv3d: dimension {name}={extent} gives a non-integral output "
                f"for kernel {k}, padding {padding}, stride {stride}",
                {"dim": name, "extent": extent, "kernel": k, "stride": stride},
            )
    if bias is not None and (bias.dim() != 1 or bias.shape[0] != cout):
        raise ShapeError(
            f"conv3d: bias must have {cout} entries",
            {"dim": "Cout", "bias": list(bias.shape)},
        )
    return F.conv3d(input, weight, bias, stride=stride, padding=padding)


def add(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    b = _as_operand(b, a)
    _same_shape(a, b, "add")
    return a + b


def mul(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    b = _as_operand(b, a)
    _same_shape(a, b, "mul")
    return a * b


def sub(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    b = _as_operand(b, a)
    _same_shape(a, b, "sub")
    return a - b


def div(a: Tensor, b: Union[Tensor, float]) -> Tensor:
    b = _as_operand(b, a)
    _same_shape(a, b, "div")
    return a / b


def scalar_mul(a: Tensor, s: float) -> Tensor:
    return a * float(s)


def relu(x: Tensor) -> Tensor:
    # torch routes zero gradient through x == 0
    return torch.relu(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def square(x: Tensor) -> Tensor:
    return x * x


def mean(x: Tensor) -> Tensor:
    return x.mean()


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return x.sum()


def mse(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mse")
    return mean(square(sub(a, b)))


def _factors(factor: Factor) -> Tuple[int, int, int]:
    if isinstance(factor, int):
        factors = (factor, factor, factor)
    else:
        factors = tuple(int(f) for f in factor)
    if len(factors) != 3:
        raise ShapeError("need one factor per spatial axis", {"factor": list(factors)})
    if any(f < 1 for f in factors):
        raise ShapeError("upsampling factor must be >= 1", {"factor": list(factors)})
    return factors  # type: ignore[return-value]


def upsample_nearest3d(input: Tensor, factor: Factor) -> Tensor:
    """Replicate every voxel factor times along each spatial axis (per-axis factors allowed)."""
    _check_5d(input, "input")
    out = input
    for axis, f in zip((2, 3, 4), _factors(factor)):
        if f > 1:
            out = torch.repeat_interleave(out, f, dim=axis)
    return out


def maxpool3d(input: Tensor, k: int) -> Tensor:
    """Max over non-overlapping k^3 windows; ties route the gradient to the first index."""
    _check_5d(input, "input")
    if k < 1:
        raise ShapeError("pool size must be >= 1", {"k": k})
    for name, extent in zip(_SPATIAL, input.shape[2:]):
        if extent % k:
            raise ShapeError(
                f"maxpool3d: dimension {name}={extent} is not divisible by {k}",
                {"dim": name, "extent": extent, "k": k},
            )
    return F.max_pool3d(input, kernel_size=k, stride=k)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.dim() != 2 or weight.dim() != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            "linear: feature dimension differs",
            {"input": list(x.shape), "weight": list(weight.shape)},
        )
    return F.linear(x, weight, bias)


def global_mean_pool(x: Tensor) -> Tensor:
    _check_5d(x, "input")
    return x.mean(dim=(2, 3, 4))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    for t in tensors:
        _check_5d(t, "input")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.shape[0] != ref.shape[0] or t.shape[2:] != ref.shape[2:]:
            raise ShapeError(
                "concat_channels: batch or spatial dimensions differ",
                {"lhs": list(ref.shape), "rhs": list(t.shape)},
            )
    return torch.cat(list(tensors), dim=1)


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad leaf reachable from a scalar loss."""
    if loss.numel() != 1:
        raise ShapeError("backward needs a scalar loss", {"shape": list(loss.shape)})
    if not loss.requires_grad:
        raise ShapeError("loss is not attached to any differentiable input")
    if not torch.isfinite(loss).all():
        raise NumericError("non-finite loss", {"value": float(loss.detach())})
    loss.reshape(()).backward()


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@torch.no_grad()
def sgd_step(
    params: Sequence[Tensor],
    lr: float,
    momentum: float = 0.0,
    buffers: Optional[List[Optional[Tensor]]] = None,
) -> None:
    """p <- p - lr * v, v = grad (+ momentum * v); grads are cleared afterwards."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ShapeError(
                "sgd_step: parameter has no gradient", {"index": i, "shape": list(p.shape)}
            )
        step = p.grad
        if momentum and buffers is not None:
            if buffers[i] is None:
                buffers[i] = p.grad.clone()
            else:
                buffers[i].mul_(momentum).add_(p.grad)
            step = buffers[i]
        p.sub_(lr * step)
        p.grad = None
