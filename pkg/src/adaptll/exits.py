"""Exit-point evaluation, compact early-exit models and inference throughput."""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .arch import AuxiliarySpec, LayerParams, LayerSpec, NetworkSpec, parameter_count
from .data import LabeledDataset
from .errors import InputError, UsageError
from .serialize import head_from_dict, head_to_dict, read_container, write_container
from .units import forward_units, head_logits

EVAL_BATCH = 256


def select_exit(accuracies, tolerance: float = 0.0) -> int:
    """Earliest 1-based layer whose accuracy is within ``tolerance`` of the best."""
    if len(accuracies) == 0:
        raise UsageError("no accuracies to select from")
    if tolerance < 0:
        raise UsageError(f"tolerance must be >= 0, got {tolerance}")
    bar = max(accuracies) - tolerance
    return next(i + 1 for i, acc in enumerate(accuracies) if acc >= bar)


@dataclass
class UnitCounter:
    evaluations: int = 0


def stream_accuracies(layers, params: list[LayerParams], images, labels, batch_size: int = EVAL_BATCH, counter=None):
    """Per-layer head accuracy from one forward pass; also returns the last activations.

    Every sample is forwarded once through each unit, on its own, and the
    activation is tapped by that unit's head.
    """
    correct = np.zeros(len(layers), dtype=np.int64)
    outputs = []
    for start in range(0, len(labels), batch_size):
        a = images[start : start + batch_size]
        y = labels[start : start + batch_size]
        for j, (layer, lp) in enumerate(zip(layers, params)):
            a = forward_units([layer], [lp], a)
            if counter is not None:
                counter.evaluations += 1
            if lp.head is not None:
                correct[j] += int(np.sum(np.argmax(head_logits(lp.head_spec, lp.head, a), axis=1) == y))
        outputs.append(a)
    return correct / len(labels), np.concatenate(outputs)


@dataclass
class ExitEvaluation:
    accuracies: list[float]
    cumulative_parameters: list[int]
    chosen_exit: int  # 1-based
    tolerance: float
    unit_evaluations: int = 0

    def to_dict(self) -> dict:
        return {
            "accuracies": list(self.accuracies),
            "cumulative_parameters": list(self.cumulative_parameters),
            "chosen_exit": self.chosen_exit,
            "tolerance": self.tolerance,
            "unit_evaluations": self.unit_evaluations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExitEvaluation":
        return cls(
            [float(a) for a in d["accuracies"]],
            [int(c) for c in d["cumulative_parameters"]],
            int(d["chosen_exit"]),
            float(d["tolerance"]),
            int(d.get("unit_evaluations", 0)),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ExitEvaluation":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise InputError(f"cannot read exit evaluation {path}: {exc}") from exc


def evaluate_exits(
    network: NetworkSpec,
    params: list[LayerParams],
    val: LabeledDataset,
    tolerance: float = 0.0,
    mode: str = "aan",
    batch_size: int = EVAL_BATCH,
) -> ExitEvaluation:
    if len(val) == 0:
        raise UsageError("validation set is empty")
    if any(lp.head is None for lp in params):
        raise UsageError("every layer needs a trained head to evaluate exits")
    counter = UnitCounter()
    accs, _ = stream_accuracies(network.layers, params, val.images, val.labels, batch_size, counter)
    accs = [float(a) for a in accs]
    cumulative = [parameter_count(network, n, include_aux_at=n, mode=mode) for n in range(1, network.depth + 1)]
    return ExitEvaluation(accs, cumulative, select_exit(accs, tolerance), tolerance, counter.evaluations)


@dataclass
class CompactModel:
    """Units 1..exit_layer plus the head attached at the exit."""

    network_name: str
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    units: list[dict[str, np.ndarray]]
    head_spec: AuxiliarySpec
    head: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @property
    def exit_layer(self) -> int:
        return len(self.layers)

    def parameter_count(self) -> int:
        arrays = [v for u in self.units for v in u.values()] + list(self.head.values())
        return int(sum(a.size for a in arrays))

    def logits(self, x, samplewise: bool = True) -> np.ndarray:
        params = [LayerParams(u) for u in self.units]
        a = forward_units(self.layers, params, x, samplewise)
        return head_logits(self.head_spec, self.head, a, samplewise)

    def predict(self, x, samplewise: bool = True) -> np.ndarray:
        return np.argmax(self.logits(x, samplewise), axis=1)

    def accuracy(self, dataset: LabeledDataset, batch_size: int = EVAL_BATCH) -> float:
        correct = 0
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start : start + batch_size]
            correct += int(np.sum(self.predict(x) == dataset.labels[start : start + batch_size]))
        return correct / len(dataset)


def compact_from(network: NetworkSpec, params: list[LayerParams], exit_layer: int, metadata=None) -> CompactModel:
    if not 1 <= exit_layer <= network.depth:
        raise UsageError(f"exit layer must be in 1..{network.depth}, got {exit_layer}")
    lp = params[exit_layer - 1]
    if lp.head is None:
        raise UsageError(f"layer {exit_layer} has no head to exit through")
    return CompactModel(
        network.name,
        network.input_shape,
        list(network.layers[:exit_layer]),
        [p.unit for p in params[:exit_layer]],
        lp.head_spec,
        lp.head,
        dict(metadata or {}),
    )


def save_compact(path, model: CompactModel) -> None:
    metadata = {
        "kind": "compact",
        "network_name": model.network_name,
        "input_shape": list(model.input_shape),
        "layers": [
            {"kind": l.kind, "in_channels": l.in_channels, "out_channels": l.out_channels, "downsample": l.downsample}
            for l in model.layers
        ],
        "head": head_to_dict(model.head_spec),
        "info": model.metadata,
    }
    tensors = [(f"layer{i}.unit.{k}", v) for i, u in enumerate(model.units) for k, v in u.items()]
    tensors += [(f"head.{k}", v) for k, v in model.head.items()]
    write_container(path, metadata, tensors)


def load_compact(path) -> CompactModel:
    metadata, tensors = read_container(path)
    if metadata.get("kind") != "compact":
        raise InputError(f"{path} is not a compact exit model")
    layers = [LayerSpec(**d) for d in metadata["layers"]]
    units = [{k.split(".")[-1]: v for k, v in tensors.items() if k.startswith(f"layer{i}.unit.")} for i in range(len(layers))]
    head = {k.split(".")[-1]: v for k, v in tensors.items() if k.startswith("head.")}
    return CompactModel(
        metadata["network_name"],
        tuple(metadata["input_shape"]),
        layers,
        units,
        head_from_dict(metadata["head"]),
        head,
        metadata.get("info", {}),
    )


def export_compact(path, network: NetworkSpec, params: list[LayerParams], evaluation: ExitEvaluation, mode: str = "aan") -> CompactModel:
    n = evaluation.chosen_exit
    info = {
        "exit_layer": n,
        "validation_accuracy": evaluation.accuracies[n - 1],
        "parameter_count": parameter_count(network, n, include_aux_at=n, mode=mode),
        "full_parameter_count": parameter_count(network, mode=mode),
    }
    model = compact_from(network, params, n, info)
    save_compact(path, model)
    return model


def inference_throughput(model: CompactModel, batch: int = 32, repetitions: int = 20, seed: int = 0) -> float:
    """Median samples per second of batched forward passes on random inputs."""
    if batch < 1 or repetitions < 1:
        raise UsageError("batch and repetitions must be >= 1")
    x = np.random.default_rng(seed).standard_normal((batch, *model.input_shape)).astype(np.float32)
    model.logits(x, samplewise=False)  # warm-up
    rates = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        model.logits(x, samplewise=False)
        rates.append(batch / (time.perf_counter() - t0))
    return statistics.median(rates)
