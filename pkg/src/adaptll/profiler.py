"""Per-layer memory profiling and linear memory models."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .arch import (
    AuxiliarySpec,
    LayerParams,
    LayerSpec,
    NetworkSpec,
    head_specs,
    init_head,
    init_parameters,
    init_unit,
)
from .errors import InputError, UsageError
from .meter import MemoryMeter
from .optim import SgdState
from .units import bp_step, local_step

PROFILE_SCHEMA = "adaptll.profile/1"
DEFAULT_PROBE_BATCHES = (4, 8, 16, 32)
WHOLE_NETWORK = 0  # layer_index of the single model in a bp-mode report


@dataclass
class MemoryModel:
    """``bytes(b) = intercept + slope * b`` for one layer (1-based index)."""

    layer_index: int
    slope: float
    intercept: float
    r_squared: float
    sample_points: list[tuple[int, int]] = field(default_factory=list)
    intercept_clamped: bool = False

    def predict(self, batch_size) -> float:
        return self.intercept + self.slope * batch_size

    def to_dict(self) -> dict:
        return {
            "layer_index": self.layer_index,
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "sample_points": [list(p) for p in self.sample_points],
            "intercept_clamped": self.intercept_clamped,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryModel":
        return cls(
            int(d["layer_index"]),
            float(d["slope"]),
            float(d["intercept"]),
            float(d["r_squared"]),
            [tuple(p) for p in d.get("sample_points", [])],
            bool(d.get("intercept_clamped", False)),
        )


def fit_linear(points, layer_index: int = 1) -> MemoryModel:
    """Ordinary least squares of bytes on batch size."""
    pts = [(float(b), float(m)) for b, m in points]
    if len(pts) < 2 or len({b for b, _ in pts}) < 2:
        raise UsageError("fit_linear needs at least two distinct batch sizes")
    b = np.array([p[0] for p in pts])
    m = np.array([p[1] for p in pts])
    design = np.column_stack([b, np.ones_like(b)])
    (slope, intercept), *_ = np.linalg.lstsq(design, m, rcond=None)
    residual = m - (slope * b + intercept)
    ss_tot = float(np.sum((m - m.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else max(0.0, 1.0 - float(np.sum(residual**2)) / ss_tot)
    clamped = intercept < 0
    if clamped:
        warnings.warn(f"layer {layer_index}: negative fitted intercept {intercept:.6g} clamped to 0", stacklevel=2)
        intercept = 0.0
    return MemoryModel(layer_index, float(slope), float(intercept), r2, [tuple(p) for p in points], bool(clamped))


def _probe_batch(input_shape, batch_size: int, num_classes: int, seed: int):
    rng = np.random.default_rng([seed, batch_size])
    x = rng.standard_normal((batch_size, *input_shape)).astype(np.float32)
    y = rng.integers(0, num_classes, batch_size)
    return x, y


def measure_layer_step(
    layer: LayerSpec,
    auxiliary: AuxiliarySpec,
    batch_size: int,
    input_shape,
    meter: MemoryMeter | None = None,
    params: LayerParams | None = None,
    momentum: float = 0.9,
    seed: int = 0,
) -> int:
    """Peak accounted bytes of one local step on a synthetic batch.

    The step runs on copies of ``params`` (fresh initialisation when
    omitted), so measuring leaves the caller's parameters untouched.
    """
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    if tuple(input_shape)[0] != layer.in_channels:
        raise InputError(f"input shape {tuple(input_shape)} does not match a {layer.in_channels}-channel layer")
    meter = meter or MemoryMeter()
    if params is None:
        lp = LayerParams(init_unit(layer, seed, 0), init_head(auxiliary, seed, 0), auxiliary)
    else:
        lp = LayerParams(
            {k: v.copy() for k, v in params.unit.items()},
            {k: v.copy() for k, v in params.head.items()},
            auxiliary,
        )
    x, y = _probe_batch(input_shape, batch_size, auxiliary.num_classes, seed)
    unit_opt = SgdState.for_params(lp.unit_list(), 0.0, momentum)
    head_opt = SgdState.for_params(lp.head_list(), 0.0, momentum)
    with meter.scope() as stats:
        meter.allocate(x)
        local_step(layer, lp, x, y, unit_opt, head_opt, meter)
    return stats.peak_bytes


def measure_network_step(network: NetworkSpec, batch_size: int, meter: MemoryMeter | None = None, momentum: float = 0.9, seed: int = 0) -> int:
    """Peak accounted bytes of one end-to-end backprop step."""
    meter = meter or MemoryMeter()
    params = init_parameters(network, seed, "bp")
    opts = [SgdState.for_params(lp.unit_list() + lp.head_list(), 0.0, momentum) for lp in params]
    x, y = _probe_batch(network.input_shape, batch_size, network.num_classes, seed)
    with meter.scope() as stats:
        meter.allocate(x)
        bp_step(network.layers, params, x, y, opts, meter)
    return stats.peak_bytes


@dataclass
class ProfileReport:
    network: str
    mode: str
    models: list[MemoryModel]
    probe_batches: list[int]

    def to_dict(self) -> dict:
        return {
            "schema": PROFILE_SCHEMA,
            "network": self.network,
            "mode": self.mode,
            "probe_batches": list(self.probe_batches),
            "models": [m.to_dict() for m in self.models],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileReport":
        if d.get("schema") != PROFILE_SCHEMA:
            raise InputError(f"expected profile schema {PROFILE_SCHEMA!r}, got {d.get('schema')!r}")
        return cls(d["network"], d["mode"], [MemoryModel.from_dict(m) for m in d["models"]], list(d["probe_batches"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ProfileReport":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise InputError(f"cannot read profile report {path}: {exc}") from exc


def profile_network(
    network: NetworkSpec,
    mode: str = "aan",
    probe_batches=DEFAULT_PROBE_BATCHES,
    momentum: float = 0.9,
    seed: int = 0,
) -> ProfileReport:
    """Fit one memory model per unit (``aan``/``classic``) or one for the whole net (``bp``).

    The final unit is measured with its terminal classifier as its head.
    """
    probe_batches = [int(b) for b in probe_batches]
    if len(probe_batches) < 2 or min(probe_batches) < 1:
        raise UsageError("probe_batches needs at least two entries, all >= 1")
    if mode == "bp":
        points = [(b, measure_network_step(network, b, momentum=momentum, seed=seed)) for b in probe_batches]
        return ProfileReport(network.name, mode, [fit_linear(points, WHOLE_NETWORK)], probe_batches)
    models = []
    heads = head_specs(network, mode)
    for i, (layer, head, shape) in enumerate(zip(network.layers, heads, network.input_shapes())):
        points = [(b, measure_layer_step(layer, head, b, shape, momentum=momentum, seed=seed)) for b in probe_batches]
        models.append(fit_linear(points, i + 1))
    return ProfileReport(network.name, mode, models, probe_batches)
