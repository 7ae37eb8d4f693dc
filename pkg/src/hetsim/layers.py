"""Layer descriptors and their reference (scalar) execution."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import QuantParams, Tensor


class LayerKind(enum.IntEnum):
    CONV2D = 1
    MAXPOOL2D = 2
    UPSAMPLE2D = 3
    ACTIVATION = 4


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """One network layer.

    ``activation`` on a conv is fused into the same step; a standalone
    activation layer uses ``kind=ACTIVATION`` and ``activation`` as its
    function.
    """

    kind: LayerKind
    name: str = ""
    weights: Optional[Tensor] = None
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: str = "valid"
    out_quant: Optional[QuantParams] = None
    activation: Optional[str] = None
    window: int = 2
    factor: int = 2

    @classmethod
    def conv(cls, weights, bias, stride=1, padding="valid", out_quant=None, activation=None, name="conv"):
        return cls(LayerKind.CONV2D, name, weights, np.asarray(bias), stride, padding, out_quant, activation)

    @classmethod
    def maxpool(cls, window=2, stride=None, name="maxpool"):
        return cls(LayerKind.MAXPOOL2D, name, stride=stride or window, window=window)

    @classmethod
    def upsample(cls, factor=2, name="upsample"):
        return cls(LayerKind.UPSAMPLE2D, name, factor=factor)

    @classmethod
    def act(cls, kind, name=None):
        return cls(LayerKind.ACTIVATION, name or kind, activation=kind)

    def output_shape(self, in_shape) -> tuple:
        n, h, w, c = in_shape
        if self.kind == LayerKind.CONV2D:
            oc, kh, kw, ic = self.weights.shape
            if ic != c:
                raise T.ShapeError(
                    f"{self.name}: input has {c} channels, weights expect {ic}",
                    {"input_channels": (c, ic)},
                )
            geo = T.conv_geometry(h, w, kh, kw, self.stride, self.padding)
            return (n, geo.out_h, geo.out_w, oc)
        if self.kind == LayerKind.MAXPOOL2D:
            if self.window > h or self.window > w:
                raise T.ShapeError(f"{self.name}: window {self.window} exceeds {h}x{w}")
            return (n, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1, c)
        if self.kind == LayerKind.UPSAMPLE2D:
            return (n, h * self.factor, w * self.factor, c)
        return tuple(in_shape)

    def macs(self, in_shape) -> int:
        """Multiply-accumulates; 0 for layers without a reduction."""
        if self.kind != LayerKind.CONV2D:
            return 0
        return T.conv_macs(in_shape, self.weights.shape, self.stride, self.padding)

    def work_elements(self, in_shape) -> int:
        """MACs for conv, output element count for everything else."""
        if self.kind == LayerKind.CONV2D:
            return self.macs(in_shape)
        return int(np.prod(self.output_shape(in_shape)))

    def macs_per_output(self) -> int:
        if self.kind != LayerKind.CONV2D:
            return 1
        oc, kh, kw, ic = self.weights.shape
        return kh * kw * ic

    def weight_bytes(self) -> int:
        if self.kind != LayerKind.CONV2D:
            return 0
        return self.weights.nbytes + 4 * len(self.bias)

    def to_bytes(self) -> bytes:
        head = f"{int(self.kind)}|{self.name}|{self.stride}|{self.padding}|{self.activation}|{self.window}|{self.factor}"
        parts = [head.encode()]
        if self.weights is not None:
            q = self.weights.quant
            parts.append(f"|w{self.weights.shape}{q}".encode())
            parts.append(self.weights.to_bytes())
            parts.append(np.asarray(self.bias, dtype="<i4").tobytes())
        if self.out_quant is not None:
            parts.append(repr(self.out_quant).encode())
        return b"".join(parts)


def reference_forward(layer: LayerSpec, x: Tensor) -> Tensor:
    if layer.kind == LayerKind.CONV2D:
        y = T.conv2d(x, layer.weights, layer.bias, layer.stride, layer.padding, layer.out_quant)
        return T.activation(y, layer.activation) if layer.activation else y
    if layer.kind == LayerKind.MAXPOOL2D:
        return T.maxpool2d(x, layer.window, layer.stride)
    if layer.kind == LayerKind.UPSAMPLE2D:
        return T.upsample2d_nearest(x, layer.factor)
    return T.activation(x, layer.activation)
