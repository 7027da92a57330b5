"""Layer-stack networks over the autodiff substrate.

A Network is an ordered list of LayerSpecs plus their parameter arrays.
Parameters are initialized uniformly in +-sqrt(6 / (fan_in + fan_out)) from
a seed, so two networks built from the same seed are bit-identical.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import MalformedFileError, NumericError

CHECKPOINT_MAGIC = b"SAFL"
CHECKPOINT_VERSION = 1

_KINDS = ("dense", "conv2d", "leaky_relu", "tanh", "sigmoid", "flatten",
          "reshape", "upsample")


@dataclass(frozen=True)
class LayerSpec:
    """One layer: kind plus whichever fields that kind reads.

    dense      : fan_in, fan_out
    conv2d     : fan_in (channels in), fan_out (channels out), kernel, stride
    leaky_relu : alpha
    reshape    : shape (per-sample target, batch axis excluded)
    upsample   : factor (nearest-neighbor)
    tanh / sigmoid / flatten : no fields
    """
    kind: str
    fan_in: int = 0
    fan_out: int = 0
    kernel: int = 0
    stride: int = 1
    alpha: float = 0.2
    shape: tuple = ()
    factor: int = 2

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


def _init_params(spec: LayerSpec, rng: np.random.Generator) -> list[np.ndarray]:
    if spec.kind == "dense":
        limit = np.sqrt(6.0 / (spec.fan_in + spec.fan_out))
        w = rng.uniform(-limit, limit, size=(spec.fan_in, spec.fan_out))
        return [w, np.zeros(spec.fan_out)]
    if spec.kind == "conv2d":
        k = spec.kernel
        fan_in, fan_out = spec.fan_in * k * k, spec.fan_out * k * k
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(spec.fan_out, spec.fan_in, k, k))
        return [w, np.zeros(spec.fan_out)]
    return []


class Network:
    """Ordered layers with their parameter arrays."""

    def __init__(self, specs: list[LayerSpec], seed: int = 0):
        self.specs = list(specs)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.params: list[list[np.ndarray]] = [_init_params(s, rng) for s in self.specs]

    def make_param_nodes(self) -> list[list[ad.Tensor]]:
        """Wrap current arrays as fresh graph leaves (one set per loss evaluation)."""
        return [[ad.Tensor(p) for p in layer] for layer in self.params]

    def apply(self, x: ad.Tensor, nodes: list[list[ad.Tensor]]) -> ad.Tensor:
        """Run the stack inside an existing graph, reusing the given leaves."""
        for spec, layer_nodes in zip(self.specs, nodes):
            x = _apply_layer(spec, layer_nodes, x)
        return x

    def n_params(self) -> int:
        return sum(p.size for layer in self.params for p in layer)


def _apply_layer(spec: LayerSpec, nodes: list[ad.Tensor], x: ad.Tensor) -> ad.Tensor:
    if spec.kind == "dense":
        if x.data.ndim != 2 or x.data.shape[1] != spec.fan_in:
            raise ValueError(
                f"dense layer expects (N, {spec.fan_in}), got {x.data.shape}")
        return ad.add(ad.matmul(x, nodes[0]), nodes[1])
    if spec.kind == "conv2d":
        return ad.conv2d(x, nodes[0], nodes[1], stride=spec.stride)
    if spec.kind == "leaky_relu":
        return ad.leaky_relu(x, alpha=spec.alpha)
    if spec.kind == "tanh":
        return ad.tanh(x)
    if spec.kind == "sigmoid":
        return ad.sigmoid(x)
    if spec.kind == "flatten":
        return ad.reshape(x, (x.data.shape[0], -1))
    if spec.kind == "reshape":
        return ad.reshape(x, (x.data.shape[0], *spec.shape))
    if spec.kind == "upsample":
        return ad.upsample(x, factor=spec.factor)
    raise ValueError(f"unknown layer kind {spec.kind!r}")


@dataclass
class Tape:
    """Everything backward() needs from one forward() call."""
    input: ad.Tensor
    output: ad.Tensor
    param_nodes: list[list[ad.Tensor]]


def forward(net: Network, x) -> tuple[np.ndarray, Tape]:
    """Run the network on a batch; returns the output values and a tape."""
    x_node = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
    nodes = net.make_param_nodes()
    out = net.apply(x_node, nodes)
    return out.data, Tape(x_node, out, nodes)


def backward(tape: Tape, output_grad) -> tuple[np.ndarray, list[list[np.ndarray]]]:
    """Exact reverse-mode gradients of the taped computation."""
    ad.backprop(tape.output, np.asarray(output_grad, dtype=np.float64))
    input_grad = tape.input.grad
    if input_grad is None:
        input_grad = np.zeros_like(tape.input.data)
    param_grads = [[n.grad if n.grad is not None else np.zeros_like(n.data)
                    for n in layer] for layer in tape.param_nodes]
    return input_grad, param_grads


def zero_grads_like(net: Network) -> list[list[np.ndarray]]:
    return [[np.zeros_like(p) for p in layer] for layer in net.params]


def clip_params(net: Network, c: float) -> Network:
    """Clip every parameter entry into [-c, c], in place."""
    if c <= 0:
        raise ValueError("clip bound must be positive")
    for layer in net.params:
        for p in layer:
            np.clip(p, -c, c, out=p)
    return net


@dataclass
class OptimizerState:
    """sgd: w -= lr*g.  rmsprop: a = rho*a + (1-rho)*g^2; w -= lr*g/sqrt(a+eps)."""
    kind: str = "rmsprop"
    learning_rate: float = 5e-5
    rho: float = 0.9
    eps: float = 1e-8
    accum: list = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "rmsprop"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(state: OptimizerState, net: Network,
                   param_grads: list[list[np.ndarray]]) -> tuple[OptimizerState, Network]:
    """Apply one update in place; returns (state, net) for chaining."""
    if state.accum is None and state.kind == "rmsprop":
        state.accum = zero_grads_like(net)
    for i, (layer, grads) in enumerate(zip(net.params, param_grads)):
        for j, (p, g) in enumerate(zip(layer, grads)):
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in layer {i}")
            if state.kind == "sgd":
                p -= state.learning_rate * g
            else:
                a = state.accum[i][j]
                a *= state.rho
                a += (1.0 - state.rho) * g * g
                p -= state.learning_rate * g / np.sqrt(a + state.eps)
    return state, net


# --- checkpoint container: SAFL magic, version, named layer-spec tables,
# --- little-endian float64 parameter blobs, trailing CRC32 ---------------

_KIND_IDS = {k: i for i, k in enumerate(_KINDS)}


def _pack_spec(spec: LayerSpec) -> bytes:
    head = struct.pack("<BIIIIId", _KIND_IDS[spec.kind], spec.fan_in,
                       spec.fan_out, spec.kernel, spec.stride, spec.factor,
                       spec.alpha)
    dims = struct.pack("<B", len(spec.shape)) + b"".join(
        struct.pack("<i", d) for d in spec.shape)
    return head + dims


def _unpack_spec(buf: memoryview, off: int) -> tuple[LayerSpec, int]:
    kind_id, fan_in, fan_out, kernel, stride, factor, alpha = struct.unpack_from(
        "<BIIIIId", buf, off)
    off += struct.calcsize("<BIIIIId")
    (ndim,) = struct.unpack_from("<B", buf, off)
    off += 1
    shape = struct.unpack_from(f"<{ndim}i", buf, off) if ndim else ()
    off += 4 * ndim
    return LayerSpec(kind=_KINDS[kind_id], fan_in=fan_in, fan_out=fan_out,
                     kernel=kernel, stride=stride, alpha=alpha,
                     shape=tuple(shape), factor=factor), off


def save_networks(path, nets: dict[str, Network]) -> None:
    """Write named networks into one container file."""
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<HH", CHECKPOINT_VERSION, len(nets))
    for name, net in nets.items():
        raw = name.encode("utf-8")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<IQ", len(net.specs), net.seed)
        for spec in net.specs:
            body += _pack_spec(spec)
        for layer in net.params:
            body += struct.pack("<B", len(layer))
            for p in layer:
                body += struct.pack("<B", p.ndim)
                body += struct.pack(f"<{p.ndim}I", *p.shape)
                body += p.astype("<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_networks(path) -> dict[str, Network]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise MalformedFileError(f"{path}: not a SAFL checkpoint")
    (crc_stored,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc_stored:
        raise MalformedFileError(f"{path}: checkpoint CRC mismatch")
    buf = memoryview(raw)
    version, n_nets = struct.unpack_from("<HH", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise MalformedFileError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    nets: dict[str, Network] = {}
    for _ in range(n_nets):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = bytes(buf[off:off + name_len]).decode("utf-8")
        off += name_len
        n_layers, seed = struct.unpack_from("<IQ", buf, off)
        off += struct.calcsize("<IQ")
        specs = []
        for _ in range(n_layers):
            spec, off = _unpack_spec(buf, off)
            specs.append(spec)
        net = Network.__new__(Network)
        net.specs = specs
        net.seed = seed
        net.params = []
        for _ in range(n_layers):
            (n_arrays,) = struct.unpack_from("<B", buf, off)
            off += 1
            layer = []
            for _ in range(n_arrays):
                (ndim,) = struct.unpack_from("<B", buf, off)
                off += 1
                shape = struct.unpack_from(f"<{ndim}I", buf, off)
                off += 4 * ndim
                count = int(np.prod(shape)) if ndim else 1
                arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off
                                    ).reshape(shape).astype(np.float64)
                off += 8 * count
                layer.append(arr)
            net.params.append(layer)
        nets[name] = net
    return nets
