"""CPU, SIMD and SIMT-GPU layer executors with cycle accounting.

Each backend walks the layer with its own iteration structure (row loop,
lane-chunked reduction, warp waves) but lands on the same integer
accumulators, so outputs are bit-identical to :func:`reference_forward`.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass, fields
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import tensor as T
from .layers import LayerKind, LayerSpec, reference_forward
from .tensor import Q8, Tensor

BACKENDS = ("cpu", "simd", "gpu")


class BackendError(RuntimeError):
    pass


class KernelBlobError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class CostParams:
    cpu_cycles_per_mac: float = 8.0
    cpu_issue_width: int = 2
    simd_lanes: int = 8
    simd_cycles_per_op: float = 8.0
    simd_setup_cycles_per_layer: int = 250_000
    gpu_warps: int = 4
    gpu_threads_per_warp: int = 4
    gpu_cycles_per_item: float = 12.0
    gpu_launch_overhead_cycles: int = 680_000
    gpu_clock_ratio: float = 2.0
    link_latency_cycles: int = 200
    link_bytes_per_cycle: float = 4.0

    def __post_init__(self):
        positive = ("cpu_cycles_per_mac", "cpu_issue_width", "simd_lanes", "simd_cycles_per_op",
                    "gpu_warps", "gpu_threads_per_warp", "gpu_cycles_per_item", "gpu_clock_ratio",
                    "link_bytes_per_cycle")
        for name in positive:
            if not getattr(self, name) > 0:
                raise CalibrationError(f"{name} must be positive")
        for name in ("simd_setup_cycles_per_layer", "gpu_launch_overhead_cycles", "link_latency_cycles"):
            if getattr(self, name) < 0:
                raise CalibrationError(f"{name} must be non-negative")

    @property
    def gpu_lanes(self) -> int:
        return self.gpu_warps * self.gpu_threads_per_warp

    def replace(self, **changes) -> "CostParams":
        return dataclasses.replace(self, **changes)


_INT_FIELDS = {f.name for f in fields(CostParams) if f.type in ("int", int)}
COST_FIELDS = tuple(f.name for f in fields(CostParams))


def coerce_cost_value(key: str, raw: str):
    if key not in COST_FIELDS:
        raise CalibrationError(f"unknown cost parameter {key!r}")
    try:
        return int(raw) if key in _INT_FIELDS else float(raw)
    except ValueError:
        raise CalibrationError(f"bad value for {key}: {raw!r}") from None


def parse_calibration(text: str) -> CostParams:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CalibrationError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise CalibrationError(f"line {lineno}: duplicate key {key!r}")
        values[key] = coerce_cost_value(key, raw)
    missing = [k for k in COST_FIELDS if k not in values]
    if missing:
        raise CalibrationError(f"calibration missing keys: {', '.join(missing)}")
    return CostParams(**values)


def format_calibration(cost: CostParams) -> str:
    return "".join(f"{name} = {getattr(cost, name)}\n" for name in COST_FIELDS)


def load_calibration(source: Union[str, Path] = "default") -> CostParams:
    """Load a calibration by shipped name or file path."""
    path = Path(str(source))
    if path.suffix != ".cal" and not path.exists():
        text = resources.files("hetsim.data.calibration").joinpath(f"{source}.cal").read_text()
    else:
        text = path.read_text()
    return parse_calibration(text)


# -- stats and cost formulas ------------------------------------------------------

@dataclass(frozen=True)
class ExecStats:
    cycles: int = 0
    bytes_to_device: int = 0
    bytes_from_device: int = 0
    kernel_launches: int = 0

    def __add__(self, other: "ExecStats") -> "ExecStats":
        return ExecStats(
            self.cycles + other.cycles,
            self.bytes_to_device + other.bytes_to_device,
            self.bytes_from_device + other.bytes_from_device,
            self.kernel_launches + other.kernel_launches,
        )

    @staticmethod
    def total(parts) -> "ExecStats":
        acc = ExecStats()
        for p in parts:
            acc = acc + p
        return acc


def cpu_cycles(work: int, cost: CostParams) -> int:
    return math.ceil(work * cost.cpu_cycles_per_mac / cost.cpu_issue_width)


def simd_cycles(work: int, cost: CostParams) -> int:
    return cost.simd_setup_cycles_per_layer + math.ceil(
        math.ceil(work / cost.simd_lanes) * cost.simd_cycles_per_op
    )


def gpu_kernel_cycles(work_items: int, items_per_thread: int, cost: CostParams) -> int:
    """Device-clock cycles for one launch."""
    waves = math.ceil(work_items / cost.gpu_lanes)
    return cost.gpu_launch_overhead_cycles + waves * math.ceil(cost.gpu_cycles_per_item * items_per_thread)


def to_host_cycles(gpu_cycles: int, cost: CostParams) -> int:
    return math.ceil(gpu_cycles * cost.gpu_clock_ratio)


def transfer(nbytes: int, direction: str, cost: CostParams) -> ExecStats:
    if nbytes < 0:
        raise ValueError("transfer size must be non-negative")
    cycles = cost.link_latency_cycles + math.ceil(nbytes / cost.link_bytes_per_cycle)
    if direction == "to_device":
        return ExecStats(cycles, bytes_to_device=nbytes)
    if direction == "from_device":
        return ExecStats(cycles, bytes_from_device=nbytes)
    raise ValueError(f"unknown transfer direction {direction!r}")


def layer_input_bytes(layer: LayerSpec, in_shape) -> int:
    """Activation bytes plus weights and int32 bias for one q8 layer."""
    return int(np.prod(in_shape)) + layer.weight_bytes()


@dataclass(frozen=True)
class GpuPhases:
    """Host-clock split of a GPU layer.

    ``pre`` (upload and launch) and ``post`` (readback) are driven by the
    host over the link; ``device`` runs on the GPU timeline.
    """

    pre: int
    device: int
    post: int

    @property
    def total(self) -> int:
        return self.pre + self.device + self.post


def gpu_layer_phases(layer: LayerSpec, in_shape, cost: CostParams) -> GpuPhases:
    out_shape = layer.output_shape(in_shape)
    kernel = to_host_cycles(
        gpu_kernel_cycles(int(np.prod(out_shape)), layer.macs_per_output(), cost), cost
    )
    launch = min(to_host_cycles(cost.gpu_launch_overhead_cycles, cost), kernel)
    up = transfer(layer_input_bytes(layer, in_shape), "to_device", cost).cycles
    down = transfer(int(np.prod(out_shape)), "from_device", cost).cycles
    return GpuPhases(up + launch, kernel - launch, down)


def layer_stats(backend: str, layer: LayerSpec, in_shape, cost: CostParams) -> ExecStats:
    """Cost of one layer without executing it."""
    work = layer.work_elements(in_shape)
    if backend == "cpu":
        return ExecStats(cpu_cycles(work, cost))
    if backend == "simd":
        return ExecStats(simd_cycles(work, cost))
    if backend == "gpu":
        out_elems = int(np.prod(layer.output_shape(in_shape)))
        kernel = to_host_cycles(gpu_kernel_cycles(out_elems, layer.macs_per_output(), cost), cost)
        up = transfer(layer_input_bytes(layer, in_shape), "to_device", cost)
        down = transfer(out_elems, "from_device", cost)
        return ExecStats(kernel, kernel_launches=1) + up + down
    raise BackendError(f"unknown backend {backend!r}")


# -- kernel blobs -----------------------------------------------------------------

BLOB_MAGIC = b"MSKB"
BLOB_VERSION = 1
_BLOB_HEAD = struct.Struct("<4sIH")


@dataclass(frozen=True)
class KernelBlob:
    name: str
    layer_kind: int
    payload: bytes = b""
    version: int = BLOB_VERSION
    magic: bytes = BLOB_MAGIC


def embed_blob(blob: KernelBlob) -> bytes:
    name = blob.name.encode("utf-8")
    return b"".join([
        _BLOB_HEAD.pack(blob.magic, blob.version, len(name)),
        name,
        struct.pack("<BI", int(blob.layer_kind), len(blob.payload)),
        blob.payload,
    ])


def load_blob(data: bytes) -> KernelBlob:
    if len(data) < 4 or data[:4] != BLOB_MAGIC:
        raise KernelBlobError("not a kernel blob")
    if len(data) < _BLOB_HEAD.size:
        raise KernelBlobError("truncated kernel blob header")
    magic, version, name_len = _BLOB_HEAD.unpack_from(data)
    if version != BLOB_VERSION:
        raise KernelBlobError(f"unsupported kernel blob version {version}")
    off = _BLOB_HEAD.size
    if len(data) < off + name_len + 5:
        raise KernelBlobError("truncated kernel blob header")
    name = data[off:off + name_len].decode("utf-8")
    off += name_len
    kind, payload_len = struct.unpack_from("<BI", data, off)
    off += 5
    if len(data) - off < payload_len:
        raise KernelBlobError(f"truncated payload: need {payload_len} bytes, have {len(data) - off}")
    return KernelBlob(name, kind, bytes(data[off:off + payload_len]), version, magic)


def _stub_payload(name: str) -> bytes:
    # stands in for a compiled device binary; deterministic so blobs round-trip
    return (name.encode() * 8)[:64]


EMBEDDED_KERNELS = {
    int(kind): embed_blob(KernelBlob(name, int(kind), _stub_payload(name)))
    for kind, name in [
        (LayerKind.CONV2D, "conv2d"),
        (LayerKind.MAXPOOL2D, "maxpool2d"),
        (LayerKind.UPSAMPLE2D, "upsample2d"),
        (LayerKind.ACTIVATION, "activation"),
    ]
}


def kernel_for(kind: int, registry=None) -> KernelBlob:
    registry = EMBEDDED_KERNELS if registry is None else registry
    try:
        image = registry[int(kind)]
    except KeyError:
        raise BackendError(f"no embedded GPU kernel for layer kind {kind}") from None
    blob = load_blob(image)
    if blob.layer_kind != int(kind):
        raise BackendError(f"kernel blob {blob.name!r} is for layer kind {blob.layer_kind}, not {kind}")
    return blob


# -- executors --------------------------------------------------------------------

def _finish_conv(layer: LayerSpec, x: Tensor, acc: np.ndarray, geo) -> Tensor:
    shape = (x.shape[0], geo.out_h, geo.out_w, layer.weights.shape[0])
    if x.dtype == Q8:
        oq, mult = T.conv_output_quant(x, layer.weights, layer.out_quant)
        y = Tensor(T.requantize(T.check_accumulators(acc), mult, oq.zero_point).reshape(shape), Q8, oq)
    else:
        y = Tensor(acc.reshape(shape), T.REAL)
    return T.activation(y, layer.activation) if layer.activation else y


def _conv_operands(layer: LayerSpec, x: Tensor):
    T.check_conv_shapes(x, layer.weights, layer.bias)
    patches, wmat, geo = T.conv_operands(x, layer.weights, layer.stride, layer.padding)
    bias = np.asarray(layer.bias, dtype=np.int64 if x.dtype == Q8 else np.float64)
    return patches, wmat, bias, geo


def _cpu_forward(layer: LayerSpec, x: Tensor, cost: CostParams) -> Tensor:
    if layer.kind != LayerKind.CONV2D:
        return reference_forward(layer, x)
    patches, wmat, bias, geo = _conv_operands(layer, x)
    rows = geo.out_w
    acc = np.empty((patches.shape[0], wmat.shape[1]), dtype=patches.dtype)
    for start in range(0, patches.shape[0], rows):
        acc[start:start + rows] = patches[start:start + rows] @ wmat + bias
    return _finish_conv(layer, x, acc, geo)


def _simd_forward(layer: LayerSpec, x: Tensor, cost: CostParams) -> Tensor:
    lanes = cost.simd_lanes
    if layer.kind == LayerKind.CONV2D:
        patches, wmat, bias, geo = _conv_operands(layer, x)
        acc = np.zeros((patches.shape[0], wmat.shape[1]), dtype=patches.dtype) + bias
        for k in range(0, wmat.shape[0], lanes):
            acc += patches[:, k:k + lanes] @ wmat[k:k + lanes]
        return _finish_conv(layer, x, acc, geo)
    if layer.kind == LayerKind.MAXPOOL2D:
        c = x.shape[3]
        chunks = [
            T.maxpool2d(Tensor(x.data[..., k:k + lanes], x.dtype, x.quant), layer.window, layer.stride).data
            for k in range(0, c, lanes)
        ]
        return Tensor(np.concatenate(chunks, axis=3), x.dtype, x.quant)
    return reference_forward(layer, x)


def _gpu_waves(n_items: int, lanes: int):
    for start in range(0, n_items, lanes):
        yield np.arange(start, min(start + lanes, n_items))


def _gpu_forward(layer: LayerSpec, x: Tensor, cost: CostParams) -> Tensor:
    lanes = cost.gpu_lanes
    out_shape = layer.output_shape(x.shape)
    n_items = int(np.prod(out_shape))
    if layer.kind == LayerKind.CONV2D:
        patches, wmat, bias, geo = _conv_operands(layer, x)
        oc = wmat.shape[1]
        acc = np.empty(n_items, dtype=patches.dtype)
        for items in _gpu_waves(n_items, lanes):
            pos, ch = np.divmod(items, oc)
            acc[items] = np.einsum("ik,ki->i", patches[pos], wmat[:, ch]) + bias[ch]
        return _finish_conv(layer, x, acc.reshape(-1, oc), geo)

    n, oh, ow, c = out_shape
    src = x.data
    out = np.empty(n_items, dtype=src.dtype)
    for items in _gpu_waves(n_items, lanes):
        b, rem = np.divmod(items, oh * ow * c)
        oy, rem = np.divmod(rem, ow * c)
        ox, ch = np.divmod(rem, c)
        if layer.kind == LayerKind.MAXPOOL2D:
            best = None
            for ky in range(layer.window):
                for kx in range(layer.window):
                    v = src[b, oy * layer.stride + ky, ox * layer.stride + kx, ch]
                    best = v if best is None else np.maximum(best, v)
            out[items] = best
        elif layer.kind == LayerKind.UPSAMPLE2D:
            out[items] = src[b, oy // layer.factor, ox // layer.factor, ch]
        else:
            out[items] = src[b, oy, ox, ch]
    y = Tensor(out.reshape(out_shape), x.dtype, x.quant)
    if layer.kind == LayerKind.ACTIVATION:
        return T.activation(y, layer.activation)
    return y


_FORWARD = {"cpu": _cpu_forward, "simd": _simd_forward, "gpu": _gpu_forward}


def exec_layer(backend: str, layer: LayerSpec, inputs: Union[Tensor, Sequence[Tensor]], cost: CostParams):
    """Run one layer on ``backend``; returns ``(output, ExecStats)``."""
    x = inputs if isinstance(inputs, Tensor) else inputs[0]
    try:
        forward = _FORWARD[backend]
    except KeyError:
        raise BackendError(f"unknown backend {backend!r}") from None
    if backend == "gpu":
        kernel_for(layer.kind)
    y = forward(layer, x, cost)
    return y, layer_stats(backend, layer, x.shape, cost)
