"""Declarative network descriptions, auxiliary-network rules and parameter init.

Layer positions passed as ``layer_index`` are 0-based list positions. Layer
*numbers* used in plans, exits and ``parameter_count`` are 1-based, so that
"layers 1..n" means the first n trainable units.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, UsageError

SPEC_SCHEMA = "adaptll.network/1"

CONV_STAGE = "conv_stage"
RESIDUAL_BLOCK = "residual_block"

CLASSIC_AUX_FILTERS = 256
AUX_POOL_TARGET = (2, 2)
AUX_KERNEL = 3

MODES = ("aan", "classic", "bp")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    downsample: bool = False

    def __post_init__(self) -> None:
        if self.kind not in (CONV_STAGE, RESIDUAL_BLOCK):
            raise InputError(f"unknown layer kind {self.kind!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise InputError(f"channel counts must be >= 1, got {self.in_channels}->{self.out_channels}")

    @property
    def has_projection(self) -> bool:
        """Residual blocks get a 1x1 projection on the skip path when shapes change."""
        return self.kind == RESIDUAL_BLOCK and (self.downsample or self.in_channels != self.out_channels)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        if not self.downsample:
            return h, w
        if self.kind == CONV_STAGE:
            return h // 2, w // 2  # 2x2 max pool, stride 2
        return (h - 1) // 2 + 1, (w - 1) // 2 + 1  # 3x3 conv, stride 2, pad 1


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    num_classes: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise InputError("a network needs at least one layer")
        if self.num_classes < 2:
            raise InputError(f"num_classes must be >= 2, got {self.num_classes}")
        c, h, w = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.in_channels != c:
                raise InputError(
                    f"layer {i + 1} expects {layer.in_channels} input channels but receives {c}"
                )
            if layer.downsample and (h < 2 or w < 2):
                raise InputError(f"layer {i + 1} downsamples a {h}x{w} map")
            c = layer.out_channels
            h, w = layer.output_hw(h, w)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def input_shapes(self) -> list[tuple[int, int, int]]:
        """(C, H, W) entering each layer."""
        shapes = []
        c, h, w = self.input_shape
        for layer in self.layers:
            shapes.append((c, h, w))
            c = layer.out_channels
            h, w = layer.output_hw(h, w)
        return shapes

    def output_shapes(self) -> list[tuple[int, int, int]]:
        out = []
        for (_, h, w), layer in zip(self.input_shapes(), self.layers):
            oh, ow = layer.output_hw(h, w)
            out.append((layer.out_channels, oh, ow))
        return out

    def first_downsample_index(self) -> int:
        """0-based index of the first downsampling layer, or depth if none."""
        for i, layer in enumerate(self.layers):
            if layer.downsample:
                return i
        return self.depth

    def to_dict(self) -> dict:
        return {
            "schema": SPEC_SCHEMA,
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        if data.get("schema") != SPEC_SCHEMA:
            raise InputError(f"unsupported network schema {data.get('schema')!r}, expected {SPEC_SCHEMA}")
        try:
            layers = tuple(LayerSpec(**layer) for layer in data["layers"])
            return cls(data["name"], tuple(data["input_shape"]), layers, int(data["num_classes"]))
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed network spec: {exc}") from exc

    def with_classes(self, num_classes: int) -> "NetworkSpec":
        return NetworkSpec(self.name, self.input_shape, self.layers, num_classes)


def load_network(path) -> NetworkSpec:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read network spec {path}: {exc}") from exc
    return NetworkSpec.from_dict(data)


@dataclass(frozen=True)
class AuxiliarySpec:
    """Classifier head attached to a layer's output.

    Auxiliary networks are conv(3x3) -> ReLU -> adaptive avg pool -> linear.
    The terminal head of the last layer has no convolution
    (``has_conv=False``); then ``filters`` is the channel count it pools.
    """

    filters: int
    pool_target: tuple[int, int]
    classifier_inputs: int
    num_classes: int
    in_channels: int
    has_conv: bool = True

    def __post_init__(self) -> None:
        if self.filters < 1:
            raise UsageError(f"auxiliary filters must be >= 1, got {self.filters}")
        ph, pw = self.pool_target
        if self.classifier_inputs != self.filters * ph * pw:
            raise UsageError("classifier_inputs must equal filters * pool_h * pool_w")


def _check_aux_index(network: NetworkSpec, layer_index: int) -> None:
    if not 0 <= layer_index < network.depth - 1:
        raise UsageError(
            f"layer_index {layer_index} has no auxiliary network "
            f"(valid: 0..{network.depth - 2}; the final layer uses the terminal classifier)"
        )


def aan_filter_count(network: NetworkSpec, layer_index: int) -> int:
    """Auxiliary filter count under the adaptive rule.

    Layers before the first downsampling layer get half the narrowest layer
    width; the downsampling layer and everything after it get half the
    widest layer width.
    """
    _check_aux_index(network, layer_index)
    widths = [layer.out_channels for layer in network.layers]
    if layer_index < network.first_downsample_index():
        return max(1, min(widths) // 2)
    return max(1, max(widths) // 2)


def build_auxiliary(layer: LayerSpec, mode: str, network: NetworkSpec, layer_index: int) -> AuxiliarySpec:
    _check_aux_index(network, layer_index)
    if mode == "aan":
        filters = aan_filter_count(network, layer_index)
    elif mode == "classic":
        filters = CLASSIC_AUX_FILTERS
    else:
        raise UsageError(f"auxiliary mode must be 'aan' or 'classic', got {mode!r}")
    ph, pw = AUX_POOL_TARGET
    return AuxiliarySpec(filters, AUX_POOL_TARGET, filters * ph * pw, network.num_classes, layer.out_channels)


def terminal_head(network: NetworkSpec) -> AuxiliarySpec:
    c = network.layers[-1].out_channels
    ph, pw = AUX_POOL_TARGET
    return AuxiliarySpec(c, AUX_POOL_TARGET, c * ph * pw, network.num_classes, c, has_conv=False)


def head_specs(network: NetworkSpec, mode: str) -> list[AuxiliarySpec | None]:
    """One head per layer: auxiliaries for local learning, None for BP's hidden layers."""
    if mode not in MODES:
        raise UsageError(f"mode must be one of {MODES}, got {mode!r}")
    heads: list[AuxiliarySpec | None] = []
    for i, layer in enumerate(network.layers[:-1]):
        heads.append(None if mode == "bp" else build_auxiliary(layer, mode, network, i))
    heads.append(terminal_head(network))
    return heads


def unit_param_shapes(layer: LayerSpec) -> dict[str, tuple[int, ...]]:
    cin, cout = layer.in_channels, layer.out_channels
    if layer.kind == CONV_STAGE:
        return {"w": (cout, cin, 3, 3), "b": (cout,)}
    shapes = {"w1": (cout, cin, 3, 3), "b1": (cout,), "w2": (cout, cout, 3, 3), "b2": (cout,)}
    if layer.has_projection:
        shapes.update({"wp": (cout, cin, 1, 1), "bp": (cout,)})
    return shapes


def head_param_shapes(head: AuxiliarySpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    if head.has_conv:
        shapes["w"] = (head.filters, head.in_channels, AUX_KERNEL, AUX_KERNEL)
        shapes["b"] = (head.filters,)
    shapes["fc_w"] = (head.num_classes, head.classifier_inputs)
    shapes["fc_b"] = (head.num_classes,)
    return shapes


def _count(shapes: dict) -> int:
    return sum(int(np.prod(s)) for s in shapes.values())


def parameter_count(
    network: NetworkSpec,
    up_to_layer: int | None = None,
    include_aux_at: int | None = None,
    mode: str = "aan",
) -> int:
    """Scalar parameters (weights + biases) of layers 1..up_to_layer.

    When ``up_to_layer`` is the last layer the terminal classifier is part of
    the count, so ``parameter_count(net)`` is the full model. ``include_aux_at``
    adds the auxiliary network of that (1-based) layer; for the last layer
    its exit head is the terminal classifier, which is already counted.
    """
    n = network.depth if up_to_layer is None else up_to_layer
    if not 1 <= n <= network.depth:
        raise UsageError(f"up_to_layer must be in 1..{network.depth}, got {n}")
    total = sum(_count(unit_param_shapes(layer)) for layer in network.layers[:n])
    if n == network.depth:
        total += _count(head_param_shapes(terminal_head(network)))
    if include_aux_at is not None:
        if not 1 <= include_aux_at <= network.depth:
            raise UsageError(f"include_aux_at must be in 1..{network.depth}, got {include_aux_at}")
        if include_aux_at < network.depth:
            aux = build_auxiliary(network.layers[include_aux_at - 1], mode, network, include_aux_at - 1)
            total += _count(head_param_shapes(aux))
        elif n < network.depth:
            total += _count(head_param_shapes(terminal_head(network)))
    return total


@dataclass
class LayerParams:
    """Parameters of one trainable unit and the head attached to its output."""

    unit: dict[str, np.ndarray]
    head: dict[str, np.ndarray] | None = None
    head_spec: AuxiliarySpec | None = None

    def unit_list(self) -> list[np.ndarray]:
        return list(self.unit.values())

    def head_list(self) -> list[np.ndarray]:
        return [] if self.head is None else list(self.head.values())


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def _init_tensors(shapes: dict, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in shapes.items():
        if len(shape) == 1:
            out[name] = np.zeros(shape, dtype=np.float32)
        else:
            out[name] = _kaiming_uniform(rng, shape)
    return out


def init_unit(layer: LayerSpec, seed: int, layer_index: int) -> dict[str, np.ndarray]:
    return _init_tensors(unit_param_shapes(layer), np.random.default_rng([seed, 0, layer_index]))


def init_head(head: AuxiliarySpec, seed: int, layer_index: int) -> dict[str, np.ndarray]:
    return _init_tensors(head_param_shapes(head), np.random.default_rng([seed, 1, layer_index]))


def init_parameters(network: NetworkSpec, seed: int, mode: str = "aan") -> list[LayerParams]:
    """Kaiming-uniform (fan-in) weights and zero biases.

    Trunk and head draws use separate streams keyed by (seed, layer), so the
    trunk initialisation is identical across modes for the same seed.
    """
    params = []
    for i, (layer, head) in enumerate(zip(network.layers, head_specs(network, mode))):
        params.append(
            LayerParams(
                unit=init_unit(layer, seed, i),
                head=None if head is None else init_head(head, seed, i),
                head_spec=head,
            )
        )
    return params


# Desk-scale presets ---------------------------------------------------------


def _conv_chain(widths_and_ds, in_channels=3):
    layers, c = [], in_channels
    for width, ds in widths_and_ds:
        layers.append(LayerSpec(CONV_STAGE, c, width, ds))
        c = width
    return tuple(layers)


def vgg8(num_classes: int = 10) -> NetworkSpec:
    """Eight 3x3 conv stages, widths 16..128, four 2x2 max-pool downsamples."""
    plan = [(16, False), (16, True), (32, False), (32, True), (64, False), (64, True), (128, False), (128, True)]
    return NetworkSpec("vgg8", (3, 32, 32), _conv_chain(plan), num_classes)


def toy_vgg6(num_classes: int = 10, width: int = 8) -> NetworkSpec:
    plan = [(width, False), (width, True), (2 * width, False), (2 * width, True), (4 * width, False), (4 * width, True)]
    return NetworkSpec("toy_vgg6", (3, 16, 16), _conv_chain(plan), num_classes)


def resnet_toy(num_classes: int = 10) -> NetworkSpec:
    layers = (
        LayerSpec(CONV_STAGE, 3, 16, False),
        LayerSpec(RESIDUAL_BLOCK, 16, 16, False),
        LayerSpec(RESIDUAL_BLOCK, 16, 32, True),
        LayerSpec(RESIDUAL_BLOCK, 32, 32, False),
        LayerSpec(RESIDUAL_BLOCK, 32, 64, True),
    )
    return NetworkSpec("resnet_toy", (3, 32, 32), layers, num_classes)


def vgg19(num_classes: int = 10) -> NetworkSpec:
    """Widths of the 16-conv VGG-19 trunk; used for rule checks, not training."""
    cfg = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]
    plan = []
    for item in cfg:
        if item == "M":
            width, _ = plan[-1]
            plan[-1] = (width, True)
        else:
            plan.append((item, False))
    return NetworkSpec("vgg19", (3, 32, 32), _conv_chain(plan), num_classes)


PRESETS = {"vgg8": vgg8, "toy_vgg6": toy_vgg6, "resnet_toy": resnet_toy, "vgg19": vgg19}


def resolve_network(ref: str, num_classes: int | None = None) -> NetworkSpec:
    """A preset name or a path to a JSON network spec."""
    if ref in PRESETS:
        net = PRESETS[ref]()
    else:
        net = load_network(ref)
    return net if num_classes is None else net.with_classes(num_classes)
