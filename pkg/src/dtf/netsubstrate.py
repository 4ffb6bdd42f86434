"""Small differentiable building blocks for the inverter and fusion networks.

Activations are channels-last arrays ``(N, H, W, C)``.  Every convolution is
stride 1 with zero "same" padding; the backward passes are written by hand so
the whole pipeline runs on plain numpy.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

LEAK = 0.1
ACTIVATIONS = ("leaky_relu", "linear")


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    dilation: int = 1
    activation: str = "leaky_relu"

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel - 1) // 2

    @property
    def receptive_field(self) -> int:
        return self.dilation * (self.kernel - 1) + 1

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        return (self.kernel, self.kernel, self.in_channels, self.out_channels)

    @property
    def n_params(self) -> int:
        return self.kernel * self.kernel * self.in_channels * self.out_channels + self.out_channels


class NetworkParams:
    """Per-layer weights ``(k, k, C_in, C_out)`` and biases ``(C_out,)``."""

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases):
            raise ValueError("need one bias vector per weight tensor")
        self.weights = [np.asarray(w) for w in weights]
        self.biases = [np.asarray(b) for b in biases]

    def arrays(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "NetworkParams":
        return cls(arrays[0::2], arrays[1::2])

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays()))

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases])

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def check(self, specs: Sequence[ConvLayerSpec]):
        if len(specs) != len(self.weights):
            raise ValueError(f"{len(specs)} layer specs but {len(self.weights)} parameter sets")
        for i, (spec, w, b) in enumerate(zip(specs, self.weights, self.biases)):
            if w.shape != spec.weight_shape or b.shape != (spec.out_channels,):
                raise ValueError(f"layer {i}: parameter shapes {w.shape}/{b.shape} do not match {spec}")


def init_params(specs: Sequence[ConvLayerSpec], seed=0, dtype=np.float64) -> NetworkParams:
    """Zero biases and weights uniform in +-1/sqrt(fan_in)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for spec in specs:
        fan_in = spec.kernel * spec.kernel * spec.in_channels
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=spec.weight_shape).astype(dtype))
        biases.append(np.zeros(spec.out_channels, dtype=dtype))
    return NetworkParams(weights, biases)


def leaky_relu(x):
    x = np.asarray(x)
    return np.where(x >= 0, x, LEAK * x)


def leaky_relu_grad(pre, grad):
    return np.where(pre >= 0, grad, LEAK * grad)


def _batched(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (H, W, C) or (N, H, W, C) input, got shape {x.shape}")
    return x, False


def _im2col(x, spec: ConvLayerSpec):
    n, h, w, c = x.shape
    k, d, p = spec.kernel, spec.dilation, spec.padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    cols = np.empty((n, h, w, k * k, c), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, :, ky * k + kx, :] = xp[:, ky * d:ky * d + h, kx * d:kx * d + w, :]
    return cols.reshape(n * h * w, k * k * c)


def _col2im(gcols, shape, spec: ConvLayerSpec):
    n, h, w, c = shape
    k, d, p = spec.kernel, spec.dilation, spec.padding
    gcols = gcols.reshape(n, h, w, k * k, c)
    gxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=gcols.dtype)
    for ky in range(k):
        for kx in range(k):
            gxp[:, ky * d:ky * d + h, kx * d:kx * d + w, :] += gcols[:, :, :, ky * k + kx, :]
    return gxp[:, p:p + h, p:p + w, :]


def conv2d_forward(x, spec: ConvLayerSpec, weight, bias, tape: Optional[dict] = None):
    """Activated convolution output; fills ``tape`` with what the backward pass needs."""
    xb, squeeze = _batched(x)
    if xb.shape[-1] != spec.in_channels:
        raise ValueError(f"input has {xb.shape[-1]} channels, layer expects {spec.in_channels}")
    if weight.shape != spec.weight_shape:
        raise ValueError(f"weight shape {weight.shape} does not match {spec.weight_shape}")
    n, h, w, _ = xb.shape
    cols = _im2col(xb, spec)
    pre = cols @ weight.reshape(-1, spec.out_channels) + bias
    pre = pre.reshape(n, h, w, spec.out_channels)
    out = leaky_relu(pre) if spec.activation == "leaky_relu" else pre
    if tape is not None:
        tape.update(cols=cols, pre=pre, in_shape=xb.shape, squeeze=squeeze)
    return out[0] if squeeze else out


def conv2d_backward(grad_out, spec: ConvLayerSpec, weight, tape: dict):
    """Gradients ``(grad_input, grad_weight, grad_bias)`` of one layer."""
    g = np.asarray(grad_out)
    if tape["squeeze"]:
        g = g[None]
    if spec.activation == "leaky_relu":
        g = leaky_relu_grad(tape["pre"], g)
    g2 = g.reshape(-1, spec.out_channels)
    grad_w = (tape["cols"].T @ g2).reshape(spec.weight_shape)
    grad_b = g2.sum(axis=0)
    gcols = g2 @ weight.reshape(-1, spec.out_channels).T
    grad_x = _col2im(gcols, tape["in_shape"], spec)
    return (grad_x[0] if tape["squeeze"] else grad_x), grad_w, grad_b


def pairwise_softmax(logit_a, logit_b):
    """Softmax over two logits per element; returns ``(w_a, w_b)`` summing to one."""
    a = np.asarray(logit_a)
    b = np.asarray(logit_b)
    a = a if np.issubdtype(a.dtype, np.floating) else a.astype(np.float64)
    b = b if np.issubdtype(b.dtype, np.floating) else b.astype(np.float64)
    if a.shape != b.shape:
        raise ValueError("logit shapes differ")
    m = np.maximum(a, b)
    ea = np.exp(a - m)
    eb = np.exp(b - m)
    s = ea + eb
    return ea / s, eb / s


def pairwise_softmax_backward(w_a, w_b, grad_a, grad_b):
    """Gradients with respect to both logits given gradients on both weights."""
    g = (grad_a - grad_b) * w_a * w_b
    return g, -g


class ConvNet:
    """A plain stack of activated convolutions."""

    def __init__(self, specs: Sequence[ConvLayerSpec], params: NetworkParams):
        self.specs = tuple(specs)
        for prev, nxt in zip(self.specs, self.specs[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ValueError(f"layer chain broken: {prev.out_channels} -> {nxt.in_channels}")
        params.check(self.specs)
        self.params = params

    @property
    def in_channels(self) -> int:
        return self.specs[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.specs[-1].out_channels

    @property
    def dtype(self):
        return self.params.weights[0].dtype

    def n_params(self) -> int:
        return self.params.count()

    def forward(self, x, params: Optional[NetworkParams] = None, tapes: Optional[list] = None):
        p = self.params if params is None else params
        h = np.asarray(x, dtype=p.weights[0].dtype)
        for spec, w, b in zip(self.specs, p.weights, p.biases):
            tape = None
            if tapes is not None:
                tape = {}
                tapes.append(tape)
            h = conv2d_forward(h, spec, w, b, tape)
        return h

    def backward(self, grad_out, tapes: list, params: Optional[NetworkParams] = None):
        """Parameter gradients and input gradient for a recorded forward pass."""
        p = self.params if params is None else params
        g = grad_out
        gw: List[np.ndarray] = [None] * len(self.specs)
        gb: List[np.ndarray] = [None] * len(self.specs)
        for i in range(len(self.specs) - 1, -1, -1):
            g, gw[i], gb[i] = conv2d_backward(g, self.specs[i], p.weights[i], tapes[i])
        return NetworkParams(gw, gb), g


def _central_difference(loss_and_grads, params, x, flat, idx, step, abs_floor, retries=3):
    orig = flat[idx]
    loss0 = loss_and_grads(params, x)[0]
    for _ in range(retries + 1):
        flat[idx] = orig + step
        lp = loss_and_grads(params, x)[0]
        flat[idx] = orig - step
        lm = loss_and_grads(params, x)[0]
        flat[idx] = orig
        central = (lp - lm) / (2 * step)
        right, left = (lp - loss0) / step, (loss0 - lm) / step
        if abs(right - left) <= 0.1 * max(abs(right), abs(left), abs_floor):
            break
        step /= 10.0
    return central


def gradient_check(
    loss_and_grads: Callable,
    params: NetworkParams,
    x,
    step: float = 1e-5,
    probes: int = 12,
    seed: int = 0,
    abs_floor: float = 1e-6,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_and_grads(params, x)`` returns ``(loss, NetworkParams grads, grad_x)``.
    ``probes`` random entries of every parameter tensor and of the input are
    checked; ``abs_floor`` keeps the ratio meaningful where both gradients
    vanish.  A stencil that straddles an activation kink (one-sided slopes
    disagree) is retried with a smaller step.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    params = params.astype(np.float64)
    _, grads, grad_x = loss_and_grads(params, x)
    targets = list(zip(params.arrays(), grads.arrays()))
    targets.append((x, grad_x))
    for i, (_, g) in enumerate(targets):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite analytic gradient in tensor {i}")
    worst = 0.0
    for arr, g in targets:
        flat = arr.reshape(-1)
        picks = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        for idx in picks:
            num = _central_difference(loss_and_grads, params, x, flat, idx, step, abs_floor)
            ana = g.reshape(-1)[idx]
            err = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
            worst = max(worst, err)
    return worst


# --- checkpoint container -------------------------------------------------

MAGIC = b"DTFCKPT\x00"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    architecture: str
    specs: Tuple[ConvLayerSpec, ...]
    params: NetworkParams
    extra: Dict[str, np.ndarray]
    meta: Dict


def save_checkpoint(
    path,
    architecture: str,
    specs: Sequence[ConvLayerSpec],
    params: NetworkParams,
    extra: Optional[Dict[str, np.ndarray]] = None,
    meta: Optional[Dict] = None,
):
    """Write parameters (and optional named extra arrays) as little-endian doubles.

    Layout: magic, uint32 header length, UTF-8 JSON header, raw ``<f8`` data in
    header order.  The bytes depend only on the contents.
    """
    params.check(specs)
    arrays = []
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays.append((f"layer{i}.weight", w))
        arrays.append((f"layer{i}.bias", b))
    for name in sorted(extra or {}):
        arrays.append((name, np.asarray(extra[name])))
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": architecture,
        "layers": [asdict(s) for s in specs],
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path, dtype=np.float64) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    (n,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    header = json.loads(raw[start:start + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    offset = start + n
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        arrays[entry["name"]] = data.reshape(shape).astype(dtype)
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing data in checkpoint")
    specs = tuple(ConvLayerSpec(**d) for d in header["layers"])
    weights = [arrays.pop(f"layer{i}.weight") for i in range(len(specs))]
    biases = [arrays.pop(f"layer{i}.bias") for i in range(len(specs))]
    params = NetworkParams(weights, biases)
    params.check(specs)
    return Checkpoint(header["architecture"], specs, params, arrays, header.get("meta", {}))
