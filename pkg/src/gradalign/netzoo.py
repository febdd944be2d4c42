"""Feed-forward networks: MLP, the CIFAR LeNet and a small LeNet for CI.

A network is an ordered list of layers.  Every parameterized layer except
the last is followed by the network-wide activation (relu, softplus with a
fixed beta, or identity).  Parameters are leaf tensors; optimizer steps build
a new :class:`Network` rather than mutating one in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .autodiff.tensor import ShapeError

ACTIVATIONS = ("relu", "softplus", "identity")
CHECKPOINT_MAGIC = "GRADALIGN-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | conv2d | maxpool2d | avgpool2d | flatten
    in_size: int = 0
    out_size: int = 0
    kernel: int = 3
    padding: int = 1
    pool: int = 2
    has_bias: bool = True

    def __post_init__(self):
        if self.kind not in ("dense", "conv2d", "maxpool2d", "avgpool2d", "flatten"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("dense", "conv2d") and (self.in_size < 1 or self.out_size < 1):
            raise ValueError(f"{self.kind} needs positive in/out sizes, got {self.in_size}, {self.out_size}")
        if self.kind == "conv2d" and (self.kernel < 1 or self.padding < 0):
            raise ValueError("conv2d needs kernel >= 1 and padding >= 0")
        if self.kind in ("maxpool2d", "avgpool2d") and self.pool < 1:
            raise ValueError(f"{self.kind} needs pool >= 1")

    @property
    def parameterized(self) -> bool:
        return self.kind in ("dense", "conv2d")

    @property
    def fan_in(self) -> int:
        if self.kind == "conv2d":
            return self.in_size * self.kernel * self.kernel
        return self.in_size

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "conv2d":
            return (self.out_size, self.in_size, self.kernel, self.kernel)
        return (self.out_size, self.in_size)

    def encode(self) -> str:
        if self.kind == "dense":
            return f"dense {self.in_size} {self.out_size} {int(self.has_bias)}"
        if self.kind == "conv2d":
            return f"conv2d {self.in_size} {self.out_size} {self.kernel} {self.padding} {int(self.has_bias)}"
        if self.kind in ("maxpool2d", "avgpool2d"):
            return f"{self.kind} {self.pool}"
        return "flatten"

    @classmethod
    def decode(cls, text: str) -> "LayerSpec":
        parts = text.split()
        kind, nums = parts[0], [int(p) for p in parts[1:]]
        if kind == "dense":
            return cls("dense", nums[0], nums[1], has_bias=bool(nums[2]))
        if kind == "conv2d":
            return cls("conv2d", nums[0], nums[1], kernel=nums[2], padding=nums[3], has_bias=bool(nums[4]))
        if kind in ("maxpool2d", "avgpool2d"):
            return cls(kind, pool=nums[0])
        if kind == "flatten":
            return cls("flatten")
        raise ValueError(f"unknown layer record {text!r}")


@dataclass
class Layer:
    spec: LayerSpec
    weight: Tensor | None = None
    bias: Tensor | None = None


@dataclass
class Network:
    layers: list[Layer]
    class_count: int
    input_shape: tuple[int, ...]
    activation: str = "softplus"
    beta: float = 3.0
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self._check_shapes()

    # -- structure ---------------------------------------------------------
    @property
    def specs(self) -> list[LayerSpec]:
        return [layer.spec for layer in self.layers]

    @property
    def param_layer_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.spec.parameterized]

    @property
    def twice_differentiable(self) -> bool:
        return self.activation != "relu"

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            if layer.weight is not None:
                out.append(layer.weight)
            if layer.bias is not None:
                out.append(layer.bias)
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.parameters()}

    def with_parameters(self, arrays: Sequence[np.ndarray]) -> "Network":
        """Copy of this network whose parameters are ``arrays`` (in order)."""
        arrays = list(arrays)
        layers = []
        k = 0
        for i, layer in enumerate(self.layers):
            w = b = None
            if layer.weight is not None:
                w = _param(arrays[k], f"layers.{i}.weight", layer.weight.shape)
                k += 1
            if layer.bias is not None:
                b = _param(arrays[k], f"layers.{i}.bias", layer.bias.shape)
                k += 1
            layers.append(Layer(layer.spec, w, b))
        if k != len(arrays):
            raise ValueError(f"expected {k} parameter arrays, got {len(arrays)}")
        return replace(self, layers=layers, meta=dict(self.meta))

    def copy(self) -> "Network":
        return self.with_parameters([p.data.copy() for p in self.parameters()])

    def _check_shapes(self) -> None:
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            shape = _out_shape(spec, shape, i)
        if shape != (self.class_count,):
            raise ShapeError(f"network output shape {shape} != ({self.class_count},)")

    # -- evaluation --------------------------------------------------------
    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def forward(self, x) -> Tensor:
        """Batched logits (N, C)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"forward: input shape {x.shape[1:]} != network input {self.input_shape}")
        h = x
        for i in range(len(self.layers)):
            h = self.layer_forward(i, h)
            if self.activated(i):
                h = self.activate(h)
        return h

    def layer_forward(self, i: int, h: Tensor) -> Tensor:
        """Layer ``i`` alone, without the activation that may follow it."""
        layer = self.layers[i]
        spec = layer.spec
        if spec.kind == "dense":
            return ops.dense(h, layer.weight, layer.bias)
        if spec.kind == "conv2d":
            return ops.conv2d(h, layer.weight, layer.bias, pad=spec.padding)
        if spec.kind == "maxpool2d":
            return ops.maxpool2d(h, spec.pool)
        if spec.kind == "avgpool2d":
            return ops.avgpool2d(h, spec.pool)
        return ops.flatten(h)

    def activated(self, i: int) -> bool:
        """Whether the network activation follows layer ``i``."""
        return self.layers[i].spec.parameterized and i != self.param_layer_indices[-1]

    def activate(self, z: Tensor) -> Tensor:
        if self.activation == "identity":
            return z
        if self.activation == "relu":
            return ops.relu(z)
        return ops.softplus(z, self.beta)

    def activation_slope(self, z: Tensor) -> Tensor:
        """Derivative of the activation at ``z`` (taped for softplus)."""
        if self.activation == "identity":
            return Tensor(np.ones(z.shape))
        if self.activation == "relu":
            return Tensor((z.data > 0).astype(np.float64))
        return ops.sigmoid(ops.mul(self.beta, z))

    def predict(self, x) -> np.ndarray:
        with no_grad():
            return self.forward(np.asarray(x, dtype=np.float64)).data.argmax(axis=1)


def _param(arr, name: str, shape) -> Tensor:
    arr = np.array(arr, dtype=np.float64)
    if arr.shape != tuple(shape):
        raise ShapeError(f"parameter {name}: shape {arr.shape} != {tuple(shape)}")
    return Tensor(arr, requires_grad=True, name=name)


def _out_shape(spec: LayerSpec, shape: tuple, i: int) -> tuple:
    if spec.kind == "dense":
        if shape != (spec.in_size,):
            raise ShapeError(f"layer {i} (dense): input {shape} != ({spec.in_size},)")
        return (spec.out_size,)
    if spec.kind == "conv2d":
        if len(shape) != 3 or shape[0] != spec.in_size:
            raise ShapeError(f"layer {i} (conv2d): input {shape} needs {spec.in_size} channels")
        h = shape[1] + 2 * spec.padding - spec.kernel + 1
        w = shape[2] + 2 * spec.padding - spec.kernel + 1
        return (spec.out_size, h, w)
    if spec.kind in ("maxpool2d", "avgpool2d"):
        if len(shape) != 3:
            raise ShapeError(f"layer {i} ({spec.kind}): input {shape} is not (C, H, W)")
        return (shape[0], shape[1] // spec.pool, shape[2] // spec.pool)
    return (int(np.prod(shape)),)


# -- construction ------------------------------------------------------------------


def init_parameters(
    specs: Sequence[LayerSpec],
    class_count: int,
    input_shape: Sequence[int],
    activation: str = "softplus",
    beta: float = 3.0,
    seed: int = 0,
) -> Network:
    """Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, spec in enumerate(specs):
        if not spec.parameterized:
            layers.append(Layer(spec))
            continue
        bound = np.sqrt(6.0 / spec.fan_in)
        w = Tensor(rng.uniform(-bound, bound, size=spec.weight_shape()), requires_grad=True,
                   name=f"layers.{i}.weight")
        b = Tensor(np.zeros(spec.out_size), requires_grad=True, name=f"layers.{i}.bias") if spec.has_bias else None
        layers.append(Layer(spec, w, b))
    return Network(layers, class_count, tuple(input_shape), activation, float(beta), seed)


def mlp(in_dim: int, hidden: Sequence[int], class_count: int, activation: str = "softplus",
        beta: float = 3.0, seed: int = 0, bias: bool = True) -> Network:
    sizes = [in_dim, *hidden, class_count]
    specs = [LayerSpec("dense", a, b, has_bias=bias) for a, b in zip(sizes[:-1], sizes[1:])]
    return init_parameters(specs, class_count, (in_dim,), activation, beta, seed)


def lenet_specs(in_channels: int = 3, side: int = 32, widths=(32, 32, 64, 64), hidden: int = 256,
                class_count: int = 10, pool: str = "max") -> list[LayerSpec]:
    if pool not in ("max", "avg"):
        raise ValueError(f"pool must be 'max' or 'avg', got {pool!r}")
    pool_kind = "maxpool2d" if pool == "max" else "avgpool2d"
    c1, c2, c3, c4 = widths
    flat = c4 * (side // 4) * (side // 4)
    return [
        LayerSpec("conv2d", in_channels, c1),
        LayerSpec("conv2d", c1, c2),
        LayerSpec(pool_kind),
        LayerSpec("conv2d", c2, c3),
        LayerSpec("conv2d", c3, c4),
        LayerSpec(pool_kind),
        LayerSpec("flatten"),
        LayerSpec("dense", flat, hidden),
        LayerSpec("dense", hidden, class_count),
    ]


def lenet(in_channels: int = 3, side: int = 32, class_count: int = 10, activation: str = "softplus",
          beta: float = 3.0, seed: int = 0, pool: str = "max") -> Network:
    """Four 3x3 convolutions, two 2x2 pools, two dense layers (4096 -> 256 -> 10 at 32x32)."""
    specs = lenet_specs(in_channels, side, class_count=class_count, pool=pool)
    return init_parameters(specs, class_count, (in_channels, side, side), activation, beta, seed)


def mini_lenet(in_channels: int = 1, side: int = 16, class_count: int = 10, activation: str = "softplus",
               beta: float = 3.0, seed: int = 0, width: int = 8, hidden: int = 32, pool: str = "max") -> Network:
    """Same topology as :func:`lenet` with 8-channel convolutions, sized for CI.

    ``pool="avg"`` swaps max-pooling for average pooling, which keeps a
    softplus network smooth everywhere (max-pooling has gradient jumps where
    two window entries tie).
    """
    specs = lenet_specs(in_channels, side, widths=(width,) * 4, hidden=hidden, class_count=class_count, pool=pool)
    return init_parameters(specs, class_count, (in_channels, side, side), activation, beta, seed)


def linear_net(in_dim: int, class_count: int, seed: int = 0, weight=None, bias=None) -> Network:
    """Single dense layer: g(x) = W x + b."""
    net = mlp(in_dim, [], class_count, activation="identity", seed=seed)
    if weight is not None or bias is not None:
        w = net.layers[0].weight.data if weight is None else weight
        b = net.layers[0].bias.data if bias is None else bias
        net = net.with_parameters([w, b])
    return net


# -- evaluation helpers ------------------------------------------------------------


def _batched(net: Network, x) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if tuple(x.shape) == net.input_shape:
        return ops.reshape(x, (1, *x.shape)), True
    return x, False


def forward_logits(net: Network, x) -> Tensor:
    """Logits for a batch, or for a single unbatched input."""
    xb, single = _batched(net, x)
    out = net.forward(xb)
    return ops.reshape(out, (net.class_count,)) if single else out


def forward_probs(net: Network, x) -> Tensor:
    xb, single = _batched(net, x)
    out = ops.softmax(net.forward(xb), axis=-1)
    return ops.reshape(out, (net.class_count,)) if single else out


def alpha_transform(net: Network, layer_index: int, alpha: float) -> Network:
    """Scale weight and bias of the ``layer_index``-th parameterized layer by alpha.

    Indices count parameterized layers only (negative indices allowed).
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    idx = net.param_layer_indices
    try:
        target = idx[layer_index]
    except IndexError:
        raise IndexError(f"layer index {layer_index} out of range for {len(idx)} parameterized layers") from None
    arrays = []
    for i, layer in enumerate(net.layers):
        for p in (layer.weight, layer.bias):
            if p is not None:
                arrays.append(p.data * alpha if i == target else p.data.copy())
    return net.with_parameters(arrays)


# -- checkpoints -----------------------------------------------------------------


def save_checkpoint(net: Network, path) -> Path:
    """Text header followed by little-endian float64 parameters in layer order."""
    path = Path(path)
    params = net.parameters()
    count = int(sum(p.size for p in params))
    header = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        f"activation {net.activation}",
        f"beta {net.beta!r}",
        f"classes {net.class_count}",
        "input_shape " + " ".join(str(s) for s in net.input_shape),
        f"seed {net.seed if net.seed is not None else 'none'}",
        *[f"layer {spec.encode()}" for spec in net.specs],
        f"params {count}",
        "end",
    ]
    blob = np.concatenate([p.data.reshape(-1) for p in params]) if params else np.zeros(0)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(blob.astype("<f8").tobytes())
    return path


def load_checkpoint(path) -> Network:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(CHECKPOINT_MAGIC.encode()) or cut < 0:
        raise ValueError(f"{path}: not a checkpoint file")
    lines = raw[:cut].decode("ascii").split("\n")
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    fields: dict[str, str] = {}
    specs = []
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "layer":
            specs.append(LayerSpec.decode(rest))
        else:
            fields[key] = rest
    blob = np.frombuffer(raw[cut + len(marker):], dtype="<f8")
    if blob.size != int(fields["params"]):
        raise ValueError(f"{path}: expected {fields['params']} parameters, found {blob.size}")
    seed = None if fields["seed"] == "none" else int(fields["seed"])
    net = init_parameters(
        specs,
        int(fields["classes"]),
        tuple(int(s) for s in fields["input_shape"].split()),
        fields["activation"],
        float(fields["beta"]),
        seed or 0,
    )
    net.seed = seed
    arrays, k = [], 0
    for p in net.parameters():
        arrays.append(blob[k:k + p.size].reshape(p.shape).astype(np.float64))
        k += p.size
    return net.with_parameters(arrays)
