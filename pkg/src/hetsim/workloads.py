"""Toy cloud-screening and ship-detection pipelines.

Both follow the loader / inference / output-handler structure and compile
into hypervisor programs.  Weights are untrained: every code comes from a
Park-Miller style LCG, so a network is a pure function of its seed.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from . import backends as B
from . import tensor as T
from .hypervisor import Step
from .layers import LayerKind, LayerSpec, reference_forward
from .tensor import BoundingBox, QuantParams, Tensor

LCG_MODULUS = 2**31 - 1
LCG_MULTIPLIER = 48271

INPUT_QUANT = QuantParams(1.0 / 128.0, 0)
WEIGHT_QUANT = QuantParams(1.0 / 127.0, 0)

CLOUD_UNET = "cloud_unet"
SHIP_DETECTOR = "ship_detector"

SHIP_SCORE_THRESHOLD = 0.5
SHIP_IOU_THRESHOLD = 0.45


class ImageFormatError(ValueError):
    pass


class LCG:
    """``x <- 48271 * x mod (2**31 - 1)``."""

    def __init__(self, seed: int):
        self.state = seed % LCG_MODULUS or 1

    def next(self) -> int:
        self.state = (self.state * LCG_MULTIPLIER) % LCG_MODULUS
        return self.state

    def codes(self, n: int) -> np.ndarray:
        """``n`` codes in [-127, 127]."""
        return np.array([self.next() % 255 - 127 for _ in range(n)], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    name: str
    layers: tuple
    weight_seed: int
    input_shape: tuple
    input_quant: QuantParams = INPUT_QUANT

    def shapes(self) -> list:
        """Input shape of every layer followed by the final output shape."""
        out = [tuple(self.input_shape)]
        for layer in self.layers:
            out.append(layer.output_shape(out[-1]))
        return out

    @property
    def output_shape(self) -> tuple:
        return self.shapes()[-1]

    def macs(self) -> int:
        return sum(l.macs(s) for l, s in zip(self.layers, self.shapes()))

    def to_bytes(self) -> bytes:
        head = f"{self.name}|{self.weight_seed}|{self.input_shape}|{self.input_quant}\n".encode()
        return head + b"\n".join(l.to_bytes() for l in self.layers)


HEAD_QUANT = QuantParams(1.0 / 16.0, 0)


def _conv(rng: LCG, in_c: int, out_c: int, k: int, in_quant: QuantParams, activation, name, out_quant=None):
    w = rng.codes(out_c * k * k * in_c).reshape(out_c, k, k, in_c)
    bias = rng.codes(out_c)
    out_quant = out_quant or QuantParams(in_quant.scale * math.sqrt(k * k * in_c) / 2.0, 0)
    layer = LayerSpec.conv(Tensor(w, T.Q8, WEIGHT_QUANT), bias, 1, "same", out_quant, activation, name)
    return layer, out_quant


def build_cloud_unet(seed: int = 1) -> NetworkSpec:
    """32x32x3 -> 32x32x1 probability map."""
    rng = LCG(seed)
    q = INPUT_QUANT
    enc1, q = _conv(rng, 3, 8, 3, q, "relu", "enc1")
    enc2, q = _conv(rng, 8, 16, 3, q, "relu", "enc2")
    dec1, q = _conv(rng, 16, 8, 3, q, "relu", "dec1")
    head, q = _conv(rng, 8, 1, 1, q, None, "head", HEAD_QUANT)
    layers = (enc1, LayerSpec.maxpool(2, name="pool1"), enc2, LayerSpec.upsample(2, name="up1"),
              dec1, head, LayerSpec.act("sigmoid", "head_sigmoid"))
    return NetworkSpec(CLOUD_UNET, layers, seed, (1, 32, 32, 3))


def build_ship_detector(seed: int = 1) -> NetworkSpec:
    """64x64x3 -> 4x4x5 detection grid."""
    rng = LCG(seed)
    q = INPUT_QUANT
    layers = []
    in_c = 3
    for i, out_c in enumerate((8, 16, 32, 32), 1):
        conv, q = _conv(rng, in_c, out_c, 3, q, "relu", f"stage{i}")
        layers += [conv, LayerSpec.maxpool(2, name=f"pool{i}")]
        in_c = out_c
    head, q = _conv(rng, in_c, T.HEAD_CHANNELS, 1, q, None, "head", HEAD_QUANT)
    layers.append(head)
    return NetworkSpec(SHIP_DETECTOR, tuple(layers), seed, (1, 64, 64, 3))


BUILDERS = {CLOUD_UNET: build_cloud_unet, SHIP_DETECTOR: build_ship_detector}


def build_network(arch: str, seed: int) -> NetworkSpec:
    try:
        return BUILDERS[arch](seed)
    except KeyError:
        raise ValueError(f"unknown workload {arch!r}") from None


# -- images -------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ImageFixture:
    width: int
    height: int
    channels: int
    pixels: bytes
    name: str = ""
    truth_mask: Optional[Tensor] = None
    truth_boxes: tuple = ()

    def __post_init__(self):
        if min(self.width, self.height, self.channels) < 1:
            raise ImageFormatError("image dimensions must be positive")
        if len(self.pixels) != self.width * self.height * self.channels:
            raise ImageFormatError(
                f"{len(self.pixels)} pixel bytes for a {self.width}x{self.height}x{self.channels} image"
            )

    @property
    def shape(self) -> tuple:
        return (1, self.height, self.width, self.channels)

    def to_tensor(self) -> Tensor:
        """Centre pixels on zero: code = pixel - 128 at scale 1/128."""
        px = np.frombuffer(self.pixels, dtype=np.uint8).astype(np.int64) - 128
        return Tensor(px.reshape(self.shape), T.Q8, INPUT_QUANT)


_PNM_HEADER = re.compile(rb"\A(P[0-9A-Za-z])\s+(?:#[^\n]*\n\s*)*(\S+)\s+(?:#[^\n]*\n\s*)*(\S+)\s+(?:#[^\n]*\n\s*)*(\S+)\s")


def parse_pnm(data: bytes, name: str = "") -> ImageFixture:
    """Binary PGM (P5) or PPM (P6) with maxval 255."""
    if data[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported image magic {data[:2]!r}; expected P5 or P6")
    m = _PNM_HEADER.match(data)
    if not m:
        raise ImageFormatError("malformed PNM header")
    try:
        width, height, maxval = (int(g) for g in m.groups()[1:])
    except ValueError:
        raise ImageFormatError("non-numeric PNM header field") from None
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"image dimensions must be positive, got {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"maxval must be 255, got {maxval}")
    channels = 1 if m.group(1) == b"P5" else 3
    need = width * height * channels
    payload = data[m.end():m.end() + need]
    if len(payload) < need:
        raise ImageFormatError(f"pixel payload truncated: need {need} bytes, have {len(payload)}")
    return ImageFixture(width, height, channels, bytes(payload), name)


def to_pnm(image: ImageFixture) -> bytes:
    magic = b"P5" if image.channels == 1 else b"P6"
    if image.channels not in (1, 3):
        raise ImageFormatError("PNM output needs 1 or 3 channels")
    return magic + f"\n{image.width} {image.height}\n255\n".encode() + image.pixels


def _cloud_demo() -> ImageFixture:
    yy, xx = np.mgrid[0:32, 0:32]
    blob = ((xx - 10) ** 2 + (yy - 12) ** 2 < 64) | ((xx - 23) ** 2 / 2.0 + (yy - 22) ** 2 < 36)
    rng = LCG(2024)
    noise = rng.codes(32 * 32 * 3).reshape(32, 32, 3) // 16
    ground = np.stack([60 + 0 * xx, 90 + 0 * xx, 50 + 0 * xx], axis=-1)
    img = np.where(blob[..., None], 230, ground) + noise
    mask = Tensor(blob.astype(np.float64).reshape(1, 32, 32, 1), T.REAL)
    return ImageFixture(32, 32, 3, np.clip(img, 0, 255).astype(np.uint8).tobytes(), "cloud_demo_32", mask)


SHIP_DEMO_BOXES = (
    BoundingBox(8.0, 10.0, 20.0, 15.0),
    BoundingBox(36.0, 40.0, 42.0, 58.0),
    BoundingBox(44.0, 12.0, 58.0, 18.0),
)


def _ship_demo() -> ImageFixture:
    rng = LCG(4096)
    img = np.empty((64, 64, 3), dtype=np.int64)
    img[...] = (20, 45, 90)
    img += rng.codes(64 * 64 * 3).reshape(64, 64, 3) // 32
    for b in SHIP_DEMO_BOXES:
        img[int(b.y_min):int(b.y_max), int(b.x_min):int(b.x_max)] = (200, 200, 195)
    return ImageFixture(64, 64, 3, np.clip(img, 0, 255).astype(np.uint8).tobytes(), "ship_demo_64",
                        truth_boxes=SHIP_DEMO_BOXES)


FIXTURES = {"cloud_demo_32": _cloud_demo, "ship_demo_64": _ship_demo}


def load_image(source: Union[str, bytes]) -> ImageFixture:
    """Embedded fixture by name, or PGM/PPM bytes."""
    if isinstance(source, str):
        try:
            return FIXTURES[source]()
        except KeyError:
            raise ImageFormatError(f"no embedded image named {source!r}") from None
    return parse_pnm(bytes(source))


# -- inference ----------------------------------------------------------------------

@dataclass(frozen=True)
class WorkloadOutput:
    """What the output handler reports, plus a digest of the raw network output."""

    workload: str
    coverage: Optional[float] = None
    boxes: tuple = ()
    digest: str = ""

    def summary(self) -> str:
        if self.coverage is not None:
            return f"coverage={self.coverage!r} digest={self.digest}"
        return f"boxes={len(self.boxes)} digest={self.digest}"


def postprocess(net: NetworkSpec, y: Tensor) -> WorkloadOutput:
    digest = hashlib.sha256(y.to_bytes()).hexdigest()[:16]
    if net.name == CLOUD_UNET:
        return WorkloadOutput(net.name, coverage=T.cloud_coverage(T.binarize(y)), digest=digest)
    cell = net.input_shape[2] / y.shape[2]
    boxes = T.decode_and_nms(y, SHIP_SCORE_THRESHOLD, SHIP_IOU_THRESHOLD, cell)
    return WorkloadOutput(net.name, boxes=tuple(boxes), digest=digest)


def _check_image(net: NetworkSpec, image: ImageFixture):
    if image.shape != tuple(net.input_shape):
        raise T.ShapeError(
            f"{net.name} expects input {net.input_shape}, image is {image.shape}",
            {"input": (tuple(net.input_shape), image.shape)},
        )


def forward(net: NetworkSpec, image: ImageFixture, backend: Optional[str] = None, cost=None):
    """Final network tensor; ``backend=None`` runs the scalar reference."""
    _check_image(net, image)
    x = image.to_tensor()
    stats = []
    for layer in net.layers:
        if backend is None:
            x = reference_forward(layer, x)
        else:
            x, st = B.exec_layer(backend, layer, x, cost)
            stats.append(st)
    return x, stats


def inference_stats(net: NetworkSpec, backend: str, cost: B.CostParams) -> B.ExecStats:
    """Layer costs plus, on the GPU, moving the image in and the result out."""
    parts = [B.layer_stats(backend, l, s, cost) for l, s in zip(net.layers, net.shapes())]
    if backend == "gpu":
        parts.append(B.transfer(int(np.prod(net.input_shape)), "to_device", cost))
        parts.append(B.transfer(int(np.prod(net.output_shape)), "from_device", cost))
    return B.ExecStats.total(parts)


def run_inference(net: NetworkSpec, image: ImageFixture, backend: str, cost: B.CostParams):
    y, _ = forward(net, image, backend, cost)
    return postprocess(net, y), inference_stats(net, backend, cost)


# -- programs -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class WorkloadProgram:
    net: NetworkSpec
    image: ImageFixture
    backend: str
    cost: B.CostParams
    steps: tuple = ()

    def reference_output(self) -> WorkloadOutput:
        y, _ = forward(self.net, self.image)
        return postprocess(self.net, y)

    @property
    def step_kinds(self) -> list:
        return [s.kind for s in self.steps]


def compile_program(net: NetworkSpec, image: ImageFixture, backend: str, cost: B.CostParams) -> WorkloadProgram:
    """Lower a pipeline into hypervisor steps.

    Layer steps execute on ``backend`` when the engine reaches them; the
    loader and output handler run on the host CPU.
    """
    if backend not in B.BACKENDS:
        raise B.BackendError(f"unknown backend {backend!r}")
    _check_image(net, image)
    shapes = net.shapes()
    in_bytes = int(np.prod(net.input_shape))
    out_elems = int(np.prod(net.output_shape))

    def load(state):
        state["x"] = image.to_tensor()

    def emit(state):
        state["output"] = postprocess(net, state["x"])

    def layer_action(layer):
        def act(state):
            state["x"], _ = B.exec_layer(backend, layer, state["x"], cost)
        return act

    steps = [Step("load_image", B.cpu_cycles(in_bytes, cost), label="load_image", action=load)]
    if backend == "gpu":
        steps.append(Step("acquire_gpu", label="acquire_gpu"))
        steps.append(Step("transfer_in", B.transfer(in_bytes, "to_device", cost).cycles, label="transfer_in"))
    for i, (layer, shape) in enumerate(zip(net.layers, shapes)):
        label = f"infer_layer({i})"
        if backend == "gpu":
            ph = B.gpu_layer_phases(layer, shape, cost)
            steps.append(Step("infer_layer", ph.pre, ph.device, ph.post, label, action=layer_action(layer)))
        else:
            cycles = B.layer_stats(backend, layer, shape, cost).cycles
            steps.append(Step("infer_layer", cycles, label=label, action=layer_action(layer)))
    if backend == "gpu":
        steps.append(Step("transfer_out", B.transfer(out_elems, "from_device", cost).cycles, label="transfer_out"))
        steps.append(Step("release_gpu", label="release_gpu"))
    steps.append(Step("emit_output", B.cpu_cycles(out_elems, cost), label="emit_output", action=emit))
    return WorkloadProgram(net, image, backend, cost, tuple(steps))
