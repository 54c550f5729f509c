"""
Dense tensor kernels for forward inference of the CIR backbones.

Implements:
- Immutable CHW (or NCHW) float32 tensors
- Grouped 2-D convolution with zero padding (im2col + matmul, float64 accumulation)
- Max pooling, border cropping, ReLU, addition, channel concatenation
- Inference-mode normalization
- The CIRT binary tensor file format
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cir_errors import TensorShapeError


TENSOR_MAGIC = b"CIRT"
TENSOR_VERSION = 1


@dataclass(frozen=True)
class Tensor:
    """Immutable dense float32 array of shape (C, H, W) or (N, C, H, W)."""
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32)
        if arr.ndim not in (3, 4):
            raise TensorShapeError("tensor must be rank 3 or rank 4",
                                   dimension="rank", got=arr.ndim)
        if any(d < 1 for d in arr.shape):
            raise TensorShapeError("tensor dimensions must be positive",
                                   dimension="shape", got=tuple(arr.shape))
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def rank(self) -> int:
        return self.data.ndim

    @property
    def channels(self) -> int:
        return self.data.shape[-3]

    @property
    def height(self) -> int:
        return self.data.shape[-2]

    @property
    def width(self) -> int:
        return self.data.shape[-1]

    @property
    def spatial(self) -> Tuple[int, int]:
        return self.height, self.width

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self.data

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "Tensor":
        return cls(np.zeros((channels, height, width), dtype=np.float32))


@dataclass(frozen=True)
class ConvParams:
    """Convolution hyper-parameters and weights (out, in/groups, kh, kw)."""
    out_channels: int
    in_channels: int
    kernel_h: int
    kernel_w: int
    stride: int
    padding: int
    groups: int
    weights: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise TensorShapeError("channels must be divisible by groups",
                                   dimension="groups", in_channels=self.in_channels,
                                   out_channels=self.out_channels, groups=self.groups)
        if self.stride < 1:
            raise TensorShapeError("stride must be >= 1", dimension="stride", got=self.stride)
        if self.padding < 0:
            raise TensorShapeError("padding must be >= 0", dimension="padding", got=self.padding)
        expected = (self.out_channels, self.in_channels // self.groups,
                    self.kernel_h, self.kernel_w)
        w = np.asarray(self.weights, dtype=np.float32)
        if w.size != int(np.prod(expected)):
            raise TensorShapeError("weights length does not match conv shape",
                                   dimension="weights", expected=int(np.prod(expected)),
                                   got=int(w.size))
        object.__setattr__(self, "weights", w.reshape(expected))
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float32).reshape(-1)
            if b.size != self.out_channels:
                raise TensorShapeError("bias length must equal out_channels",
                                       dimension="bias", expected=self.out_channels,
                                       got=int(b.size))
            object.__setattr__(self, "bias", b)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial output size of a convolution or pooling window."""
    return (size + 2 * padding - kernel) // stride + 1


def _as_batch(t: Tensor) -> np.ndarray:
    return t.data if t.rank == 4 else t.data[None]


def _restore_rank(out: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(out if like.rank == 4 else out[0])


def conv2d(input: Tensor, params: ConvParams, pad_value: float = 0.0) -> Tensor:
    """
    Grouped 2-D cross-correlation.

    Cells outside the input read `pad_value` (zero unless a padding
    perturbation is being measured).
    """
    x = _as_batch(input)
    n, c, h, w = x.shape
    if c != params.in_channels:
        raise TensorShapeError("input channels do not match conv in_channels",
                               dimension="channels", expected=params.in_channels, got=c)
    kh, kw, s, p = params.kernel_h, params.kernel_w, params.stride, params.padding
    out_h = conv_output_size(h, kh, s, p)
    out_w = conv_output_size(w, kw, s, p)
    if out_h < 1 or out_w < 1:
        raise TensorShapeError("convolution output size is not positive",
                               dimension="spatial", input=(h, w),
                               kernel=(kh, kw), stride=s, padding=p)

    xp = x.astype(np.float64)
    if p:
        xp = np.pad(xp, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=pad_value)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :out_h, :out_w]

    g = params.groups
    cg = c // g
    og = params.out_channels // g
    cols = (windows.reshape(n, g, cg, out_h, out_w, kh, kw)
            .transpose(0, 1, 3, 4, 2, 5, 6)
            .reshape(n, g, out_h * out_w, cg * kh * kw))
    kernel = params.weights.astype(np.float64).reshape(g, og, cg * kh * kw)
    out = np.matmul(cols, kernel.transpose(0, 2, 1)[None])
    out = out.transpose(0, 1, 3, 2).reshape(n, params.out_channels, out_h, out_w)
    if params.bias is not None:
        out = out + params.bias.astype(np.float64)[None, :, None, None]
    return _restore_rank(out.astype(np.float32), input)


def maxpool2d(input: Tensor, kernel: int, stride: int) -> Tensor:
    """Max pooling without padding."""
    if kernel < 1 or stride < 1:
        raise TensorShapeError("pool kernel and stride must be >= 1",
                               dimension="pool", kernel=kernel, stride=stride)
    x = _as_batch(input)
    h, w = x.shape[2:]
    out_h = conv_output_size(h, kernel, stride, 0)
    out_w = conv_output_size(w, kernel, stride, 0)
    if out_h < 1 or out_w < 1:
        raise TensorShapeError("pool window exceeds input",
                               dimension="spatial", input=(h, w), kernel=kernel)
    windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    out = windows[:, :, :out_h, :out_w].max(axis=(-2, -1))
    return _restore_rank(out, input)


def crop(input: Tensor, margin: int, margin_end: Optional[int] = None) -> Tensor:
    """
    Remove `margin` cells from the top and left borders and `margin_end`
    (default: `margin`) from the bottom and right borders.
    """
    end = margin if margin_end is None else margin_end
    if margin < 0 or end < 0:
        raise TensorShapeError("crop margin must be >= 0", dimension="margin",
                               got=(margin, end))
    if input.height <= margin + end or input.width <= margin + end:
        raise TensorShapeError("crop margin too large for input",
                               dimension="spatial", input=input.spatial, margin=(margin, end))
    if margin == 0 and end == 0:
        return input
    h, w = input.height, input.width
    return Tensor(input.data[..., margin:h - end, margin:w - end])


def relu(input: Tensor) -> Tensor:
    return Tensor(np.maximum(input.data, 0.0))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise TensorShapeError("add requires identical shapes",
                               dimension="shape", left=a.shape, right=b.shape)
    return Tensor(a.data + b.data)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack channels of `a` then `b`."""
    if a.rank != b.rank or a.spatial != b.spatial or a.shape[:-3] != b.shape[:-3]:
        raise TensorShapeError("concat requires identical spatial sizes",
                               dimension="spatial", left=a.shape, right=b.shape)
    return Tensor(np.concatenate([a.data, b.data], axis=-3))


def norm_inference(input: Tensor,
                   scale: np.ndarray,
                   shift: np.ndarray,
                   mean: np.ndarray,
                   var: np.ndarray,
                   eps: float) -> Tensor:
    """Per-channel (x - mean) / sqrt(var + eps) * scale + shift."""
    c = input.channels
    arrays = []
    for name, arr in (("scale", scale), ("shift", shift), ("mean", mean), ("var", var)):
        a = np.asarray(arr, dtype=np.float64).reshape(-1)
        if a.size != c:
            raise TensorShapeError(f"norm {name} length must equal channels",
                                   dimension=name, expected=c, got=int(a.size))
        arrays.append(a[:, None, None])
    scale64, shift64, mean64, var64 = arrays
    out = (input.data.astype(np.float64) - mean64) / np.sqrt(var64 + eps) * scale64 + shift64
    return Tensor(out.astype(np.float32))


# ---------------------------------------------------------------------------
# CIRT file format
# ---------------------------------------------------------------------------

def save_tensor(path: Union[str, Path], tensor: Union[Tensor, np.ndarray]) -> None:
    """Write a tensor (any rank >= 1) in CIRT little-endian format."""
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float32)
    header = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype("<f4").tobytes(order="C"))


def read_tensor_array(path: Union[str, Path]) -> np.ndarray:
    """Read a CIRT file into a float32 array of the stored rank."""
    raw = Path(path).read_bytes()
    if raw[:4] != TENSOR_MAGIC:
        raise TensorShapeError("not a CIRT tensor file", dimension="magic", path=str(path))
    try:
        version, rank = struct.unpack_from("<II", raw, 4)
        if version != TENSOR_VERSION:
            raise TensorShapeError("unsupported CIRT version", dimension="version", got=version)
        dims = struct.unpack_from(f"<{rank}I", raw, 12)
    except struct.error as exc:
        raise TensorShapeError("truncated CIRT header", dimension="header",
                               path=str(path), size=len(raw)) from exc
    offset = 12 + 4 * rank
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - offset != 4 * count:
        raise TensorShapeError("CIRT payload length does not match dims",
                               dimension="payload", dims=dims)
    return np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)


def load_tensor(path: Union[str, Path]) -> Tensor:
    """Read a rank-3 or rank-4 CIRT file as a Tensor."""
    return Tensor(read_tensor_array(path))
