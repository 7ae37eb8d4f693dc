"""Bit-exact reference layer math and output metrics.

Every backend in :mod:`hetsim.backends` must reproduce the results of the
functions here exactly.  Tensors are NHWC (batch-major, row-major,
channel-minor) and either ``q8`` (int8 codes with per-tensor affine quant)
or ``real`` (float64).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

Q8 = "q8"
REAL = "real"
Q_MIN, Q_MAX = -128, 127
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1

SIGMOID_QUANT_SCALE = 1.0 / 256.0
SIGMOID_QUANT_ZERO_POINT = -128


class ShapeError(ValueError):
    """Raised when tensor shapes do not compose.

    ``mismatches`` maps a dimension name to ``(expected, actual)``.
    """

    def __init__(self, message: str, mismatches: Optional[dict] = None):
        super().__init__(message)
        self.mismatches = dict(mismatches or {})


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"quant scale must be positive, got {self.scale}")
        if not Q_MIN <= self.zero_point <= Q_MAX:
            raise ValueError(f"zero_point {self.zero_point} outside [-128, 127]")


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable 4-D tensor.

    ``data`` is stored as an NHWC numpy array (int8 for q8, float64 for real);
    ``flat()`` gives the canonical flat order.
    """

    data: np.ndarray
    dtype: str = Q8
    quant: Optional[QuantParams] = None

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4 or min(arr.shape) < 1:
            raise ShapeError(f"tensor shape must be 4 positive dims, got {arr.shape}")
        if self.dtype == Q8:
            if self.quant is None:
                raise ValueError("q8 tensor requires QuantParams")
            if arr.dtype != np.int8:
                wide = arr.astype(np.int64)
                if wide.min() < Q_MIN or wide.max() > Q_MAX:
                    raise ValueError("q8 values must lie in [-128, 127]")
                arr = wide.astype(np.int8)
        elif self.dtype == REAL:
            if self.quant is not None:
                raise ValueError("real tensor must not carry QuantParams")
            arr = arr.astype(np.float64)
        else:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_flat(cls, values: Sequence, shape, dtype=Q8, quant=None) -> "Tensor":
        arr = np.asarray(values)
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"{arr.size} values do not fill shape {tuple(shape)}")
        return cls(arr.reshape(shape), dtype, quant)

    @property
    def shape(self) -> tuple:
        return tuple(int(d) for d in self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def nbytes(self) -> int:
        return self.size * (1 if self.dtype == Q8 else 8)

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def dequantize(self) -> np.ndarray:
        if self.dtype == REAL:
            return self.data.copy()
        return dequantize(self.data, self.quant)

    def to_bytes(self) -> bytes:
        return self.data.tobytes()

    def same_as(self, other: "Tensor") -> bool:
        """Exact equality of shape, dtype, quant and every element."""
        return (
            self.shape == other.shape
            and self.dtype == other.dtype
            and self.quant == other.quant
            and np.array_equal(self.data, other.data)
        )

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.same_as(other)

    __hash__ = None


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: float = 1.0

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"box score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


# -- rounding / quantization ---------------------------------------------------

def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def saturate_q8(x) -> np.ndarray:
    return np.clip(np.asarray(x, dtype=np.int64), Q_MIN, Q_MAX).astype(np.int8)


def quantize(x, q: QuantParams) -> np.ndarray:
    """``saturate(round(x / scale) + zero_point)``."""
    codes = round_half_away(np.asarray(x, dtype=np.float64) / q.scale) + q.zero_point
    return saturate_q8(np.clip(codes, Q_MIN, Q_MAX))


def dequantize(v, q: QuantParams) -> np.ndarray:
    return (np.asarray(v, dtype=np.int64) - q.zero_point).astype(np.float64) * q.scale


def requantize(acc: np.ndarray, multiplier: float, zero_point: int) -> np.ndarray:
    """Scale int32 accumulators down to q8 codes.

    All backends funnel through this one function so the float64 rounding
    step is shared and results stay bit-identical.
    """
    return saturate_q8(round_half_away(np.asarray(acc, dtype=np.float64) * multiplier) + zero_point)


def check_accumulators(acc: np.ndarray) -> np.ndarray:
    if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
        raise OverflowError("convolution accumulator exceeds 32-bit range")
    return acc


# -- convolution ---------------------------------------------------------------

@dataclass(frozen=True)
class ConvGeometry:
    """Output size and padding for one convolution or pooling pass."""

    out_h: int
    out_w: int
    pad_top: int = 0
    pad_left: int = 0
    pad_bottom: int = 0
    pad_right: int = 0


def conv_geometry(in_h, in_w, k_h, k_w, stride, padding) -> ConvGeometry:
    if stride < 1:
        raise ValueError("stride must be positive")
    if padding == "valid":
        if k_h > in_h or k_w > in_w:
            raise ShapeError(
                f"kernel {k_h}x{k_w} larger than input {in_h}x{in_w} with valid padding",
                {"height": (in_h, k_h), "width": (in_w, k_w)},
            )
        return ConvGeometry((in_h - k_h) // stride + 1, (in_w - k_w) // stride + 1)
    if padding == "same":
        out_h, out_w = -(-in_h // stride), -(-in_w // stride)
        ph = max((out_h - 1) * stride + k_h - in_h, 0)
        pw = max((out_w - 1) * stride + k_w - in_w, 0)
        return ConvGeometry(out_h, out_w, ph // 2, pw // 2, ph - ph // 2, pw - pw // 2)
    raise ValueError(f"unknown padding {padding!r}")


def check_conv_shapes(input: Tensor, weights: Tensor, bias) -> None:
    n, h, w, c = input.shape
    oc, kh, kw, ic = weights.shape
    bad = {}
    if ic != c:
        bad["input_channels"] = (c, ic)
    if len(bias) != oc:
        bad["output_channels"] = (oc, len(bias))
    if bad:
        detail = ", ".join(f"{k}: expected {e}, got {a}" for k, (e, a) in bad.items())
        raise ShapeError(f"conv2d shape mismatch ({detail})", bad)
    if input.dtype != weights.dtype:
        raise ShapeError("conv2d input and weights must share dtype", {"dtype": (input.dtype, weights.dtype)})


def conv_output_quant(input: Tensor, weights: Tensor, out_quant: Optional[QuantParams]):
    """Output quant and the requantization multiplier for a q8 convolution."""
    out_quant = out_quant or input.quant
    multiplier = input.quant.scale * weights.quant.scale / out_quant.scale
    return out_quant, multiplier


def pad_input(x: np.ndarray, geo: ConvGeometry, fill) -> np.ndarray:
    if not (geo.pad_top or geo.pad_bottom or geo.pad_left or geo.pad_right):
        return x
    return np.pad(
        x,
        ((0, 0), (geo.pad_top, geo.pad_bottom), (geo.pad_left, geo.pad_right), (0, 0)),
        constant_values=fill,
    )


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Patches as ``(n, out_h, out_w, kh*kw*c)`` in (ky, kx, c) order."""
    n, _, _, c = x.shape
    s = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, out_h, out_w, kh, kw, c),
        strides=(s[0], s[1] * stride, s[2] * stride, s[1], s[2], s[3]),
        writeable=False,
    )
    return view.reshape(n, out_h, out_w, kh * kw * c)


def conv_operands(input: Tensor, weights: Tensor, stride: int, padding: str):
    """Zero-point-centred patch matrix and weight matrix for a convolution.

    Returns ``(patches, wmat, geo)`` with ``patches`` of shape
    ``(positions, K)`` and ``wmat`` of shape ``(K, out_channels)``.
    """
    n, h, w, c = input.shape
    oc, kh, kw, _ = weights.shape
    geo = conv_geometry(h, w, kh, kw, stride, padding)
    if input.dtype == Q8:
        x = input.data.astype(np.int64) - input.quant.zero_point
        wm = weights.data.astype(np.int64) - weights.quant.zero_point
    else:
        x = input.data
        wm = weights.data
    x = pad_input(x, geo, 0)
    patches = im2col(np.ascontiguousarray(x), kh, kw, stride, geo.out_h, geo.out_w)
    patches = patches.reshape(-1, kh * kw * c)
    wmat = wm.reshape(oc, kh * kw * c).T
    return patches, wmat, geo


def conv2d(
    input: Tensor,
    weights: Tensor,
    bias,
    stride: int = 1,
    padding: str = "valid",
    out_quant: Optional[QuantParams] = None,
) -> Tensor:
    """2-D convolution; weights are ``(out_c, kh, kw, in_c)``.

    q8: int32 accumulate of zero-point-centred products plus ``bias``, then
    :func:`requantize` into ``out_quant`` (defaults to the input quant).
    """
    check_conv_shapes(input, weights, bias)
    acc, geo = conv_accumulate(input, weights, bias, stride, padding)
    n = input.shape[0]
    oc = weights.shape[0]
    shape = (n, geo.out_h, geo.out_w, oc)
    if input.dtype == REAL:
        return Tensor(acc.reshape(shape), REAL)
    oq, mult = conv_output_quant(input, weights, out_quant)
    return Tensor(requantize(acc, mult, oq.zero_point).reshape(shape), Q8, oq)


def conv_accumulate(input: Tensor, weights: Tensor, bias, stride: int, padding: str):
    """Raw accumulators ``(positions, out_c)`` including bias."""
    patches, wmat, geo = conv_operands(input, weights, stride, padding)
    if input.dtype == Q8:
        acc = patches @ wmat + np.asarray(bias, dtype=np.int64)
        return check_accumulators(acc), geo
    return patches @ wmat + np.asarray(bias, dtype=np.float64), geo


def conv_macs(in_shape, weight_shape, stride: int, padding: str) -> int:
    n, h, w, _ = in_shape
    oc, kh, kw, ic = weight_shape
    geo = conv_geometry(h, w, kh, kw, stride, padding)
    return n * geo.out_h * geo.out_w * oc * kh * kw * ic


# -- pooling / resampling / activations ------------------------------------------

def maxpool2d(input: Tensor, window: int, stride: int) -> Tensor:
    n, h, w, c = input.shape
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    if window > h or window > w:
        raise ShapeError(
            f"pool window {window} larger than spatial extent {h}x{w}",
            {"height": (h, window), "width": (w, window)},
        )
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1
    patches = im2col(input.data, window, window, stride, oh, ow).reshape(n, oh, ow, window * window, c)
    return Tensor(patches.max(axis=3), input.dtype, input.quant)


def upsample2d_nearest(input: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError("upsample factor must be >= 1")
    out = np.repeat(np.repeat(input.data, factor, axis=1), factor, axis=2)
    return Tensor(out, input.dtype, input.quant)


def sigmoid_table(q: QuantParams) -> np.ndarray:
    """256-entry int8 table indexed by ``code + 128``."""
    codes = np.arange(Q_MIN, Q_MAX + 1)
    real = 1.0 / (1.0 + np.exp(-dequantize(codes, q)))
    return quantize(real, QuantParams(SIGMOID_QUANT_SCALE, SIGMOID_QUANT_ZERO_POINT))


def activation(input: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        if input.dtype == Q8:
            return Tensor(np.maximum(input.data, np.int8(input.quant.zero_point)), Q8, input.quant)
        return Tensor(np.maximum(input.data, 0.0), REAL)
    if kind == "sigmoid":
        if input.dtype == Q8:
            table = sigmoid_table(input.quant)
            out = table[input.data.astype(np.int64) - Q_MIN]
            return Tensor(out, Q8, QuantParams(SIGMOID_QUANT_SCALE, SIGMOID_QUANT_ZERO_POINT))
        return Tensor(1.0 / (1.0 + np.exp(-input.data)), REAL)
    raise ValueError(f"unknown activation {kind!r}")


# -- metrics -------------------------------------------------------------------

def binarize(probabilities: Tensor, threshold: float = 0.5) -> Tensor:
    """Threshold a probability map (q8 or real) into a 0/1 real mask."""
    real = probabilities.dequantize()
    return Tensor((real >= threshold).astype(np.float64), REAL)


def cloud_coverage(mask) -> float:
    """Percentage of pixels equal to 1 in a binary single-channel mask."""
    arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if arr.size == 0:
        raise ValueError("cloud_coverage of an empty mask")
    if isinstance(mask, Tensor) and mask.shape[3] != 1:
        raise ShapeError("mask must be single-channel", {"channels": (1, mask.shape[3])})
    vals = np.asarray(arr, dtype=np.float64)
    if not np.all((vals == 0) | (vals == 1)):
        raise ValueError("mask must be binary (0/1)")
    return 100.0 * float(np.count_nonzero(vals)) / vals.size


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    ih = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        raise ValueError("iou undefined for zero-area union")
    return inter / union


HEAD_CHANNELS = 5


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def decode_boxes(head: Tensor, score_threshold: float, cell_size: float = 16.0) -> list:
    """Decode a ``(1, gh, gw, 5)`` head of (tx, ty, tw, th, objectness).

    Centre is ``(cell + sigmoid(t)) * cell_size``; width and height are the
    raw (clamped at zero) values times ``cell_size``; boxes are clipped to
    the image extent.
    """
    n, gh, gw, c = head.shape
    if c != HEAD_CHANNELS:
        raise ShapeError(f"detection head needs {HEAD_CHANNELS} channels, got {c}", {"channels": (HEAD_CHANNELS, c)})
    vals = head.dequantize()[0]
    img_w, img_h = gw * cell_size, gh * cell_size
    boxes = []
    for gy in range(gh):
        for gx in range(gw):
            tx, ty, tw, th, obj = (float(v) for v in vals[gy, gx])
            score = _sigmoid(obj)
            if score <= score_threshold:
                continue
            cx = (gx + _sigmoid(tx)) * cell_size
            cy = (gy + _sigmoid(ty)) * cell_size
            bw = max(tw, 0.0) * cell_size
            bh = max(th, 0.0) * cell_size
            boxes.append(
                BoundingBox(
                    min(max(cx - bw / 2, 0.0), img_w),
                    min(max(cy - bh / 2, 0.0), img_h),
                    min(max(cx + bw / 2, 0.0), img_w),
                    min(max(cy + bh / 2, 0.0), img_h),
                    score,
                )
            )
    return boxes


def nms(boxes: Sequence[BoundingBox], iou_threshold: float) -> list:
    """Greedy non-maximum suppression, highest score first.

    Ties in score keep input order.  Zero-area boxes never suppress and are
    never suppressed.
    """
    ordered = sorted(enumerate(boxes), key=lambda ib: (-ib[1].score, ib[0]))
    kept: list = []
    for _, box in ordered:
        if all(_overlap(box, k) <= iou_threshold for k in kept):
            kept.append(box)
    return kept


def _overlap(a: BoundingBox, b: BoundingBox) -> float:
    if a.area + b.area <= 0:
        return 0.0
    return iou(a, b)


def decode_and_nms(head: Tensor, score_threshold: float, iou_threshold: float, cell_size: float = 16.0) -> list:
    return nms(decode_boxes(head, score_threshold, cell_size), iou_threshold)
