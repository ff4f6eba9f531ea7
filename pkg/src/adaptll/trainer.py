"""Block-wise adaptive local learning with activation caching, plus BP and classic-LL baselines.

Memory accounting during training mirrors the profiler: each local step of a
layer registers that layer's input, parameters, head, optimizer state,
gradients and intermediates, and nothing else. Layers outside the step are
treated as resident in storage.
"""

from __future__ import annotations

import json
import os
import tempfile
import time
from contextlib import ExitStack
from dataclasses import dataclass, field

import numpy as np

from .arch import LayerParams, NetworkSpec, init_parameters, parameter_count
from .cache import ActivationCacheManifest, CacheWriter, rebatch
from .data import BatchIterator, LabeledDataset
from .errors import BudgetExceededError, PlanningError, UsageError
from .exits import stream_accuracies
from .meter import MemoryMeter
from .optim import SgdState
from .partition import Block, BlockPlan, fits, max_feasible_batch, minimum_budget, partition
from .profiler import DEFAULT_PROBE_BATCHES, MemoryModel, profile_network
from .units import bp_step, local_step, unit_forward

METRICS_SCHEMA = "adaptll.metrics/1"
DEFAULT_DRIFT_BINS = 64


@dataclass
class TrainSettings:
    epochs: int = 1
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    shuffle_cache_chunks: bool = False
    drift_bins: int = DEFAULT_DRIFT_BINS
    drift_samples: int = 256

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise UsageError(f"epochs must be >= 1, got {self.epochs}")


# Drift diagnostic -------------------------------------------------------------------


@dataclass(frozen=True)
class DriftEstimate:
    layer_index: int  # 1-based
    epoch: int  # 1-based epoch whose inputs are compared with the previous epoch's
    value: float


def drift_estimate(current, previous, bins: int = DEFAULT_DRIFT_BINS, layer_index: int = 0, epoch: int = 0) -> DriftEstimate:
    """Plug-in L1 distance between per-channel activation histograms.

    Both samples share each channel's range; the per-channel distances between
    the normalised histograms are averaged. Values lie in [0, 2].
    """
    current = np.asarray(current)
    previous = np.asarray(previous)
    if current.size == 0 or previous.size == 0:
        raise UsageError("drift needs non-empty activation samples")
    if current.shape[1:] != previous.shape[1:]:
        raise UsageError(f"activation shapes differ: {current.shape} vs {previous.shape}")
    if bins < 1:
        raise UsageError(f"bins must be >= 1, got {bins}")
    channels = current.shape[1] if current.ndim > 1 else 1
    cur = np.moveaxis(current.reshape(len(current), channels, -1), 1, 0).reshape(channels, -1)
    prev = np.moveaxis(previous.reshape(len(previous), channels, -1), 1, 0).reshape(channels, -1)
    total = 0.0
    for c in range(channels):
        if np.array_equal(cur[c], prev[c]):
            continue
        lo = float(min(cur[c].min(), prev[c].min()))
        hi = float(max(cur[c].max(), prev[c].max()))
        if hi == lo:
            continue
        p, _ = np.histogram(cur[c], bins=bins, range=(lo, hi))
        q, _ = np.histogram(prev[c], bins=bins, range=(lo, hi))
        total += float(np.abs(p / p.sum() - q / q.sum()).sum())
    return DriftEstimate(layer_index, epoch, total / channels)


# Metrics ---------------------------------------------------------------------------


@dataclass
class BlockMetrics:
    layers: list[int]
    batch_size: int
    epochs: int
    sgd_steps: int = 0
    peak_bytes: int = 0

    def to_dict(self) -> dict:
        return {
            "layers": list(self.layers),
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "sgd_steps": self.sgd_steps,
            "peak_bytes": self.peak_bytes,
        }


@dataclass
class TrainRunMetrics:
    mode: str
    network: str
    budget_bytes: float | None
    batch_limit: int
    settings: TrainSettings
    train_samples: int
    blocks: list[BlockMetrics] = field(default_factory=list)
    forward_evaluations: list[int] = field(default_factory=list)  # per layer
    forward_after_block: list[list[int]] = field(default_factory=list)
    val_history: dict[int, list[float]] = field(default_factory=dict)
    drift: list[DriftEstimate] = field(default_factory=list)
    final_val_accuracy: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)
    cache_bytes: int = 0
    dataset_bytes: int = 0
    parameter_count: int = 0
    wall_seconds: float = 0.0

    @property
    def total_sgd_steps(self) -> int:
        return sum(b.sgd_steps for b in self.blocks)

    @property
    def total_forward_evaluations(self) -> int:
        return sum(self.forward_evaluations)

    @property
    def max_peak_bytes(self) -> int:
        return max((b.peak_bytes for b in self.blocks), default=0)

    def to_dict(self) -> dict:
        """Deterministic content only; wall time is written separately."""
        s = self.settings
        return {
            "schema": METRICS_SCHEMA,
            "mode": self.mode,
            "network": self.network,
            "budget_bytes": self.budget_bytes,
            "batch_limit": self.batch_limit,
            "settings": {
                "epochs": s.epochs,
                "learning_rate": s.learning_rate,
                "momentum": s.momentum,
                "seed": s.seed,
                "shuffle_cache_chunks": s.shuffle_cache_chunks,
                "drift_bins": s.drift_bins,
            },
            "train_samples": self.train_samples,
            "blocks": [b.to_dict() for b in self.blocks],
            "total_sgd_steps": self.total_sgd_steps,
            "forward_unit_evaluations": self.total_forward_evaluations,
            "forward_evaluations_per_layer": list(self.forward_evaluations),
            "forward_evaluations_after_block": [list(r) for r in self.forward_after_block],
            "max_peak_bytes": self.max_peak_bytes,
            "val_history": {str(k): v for k, v in sorted(self.val_history.items())},
            "drift": [{"layer": d.layer_index, "epoch": d.epoch, "value": d.value} for d in self.drift],
            "final_val_accuracy": list(self.final_val_accuracy),
            "test_accuracy": list(self.test_accuracy),
            "cache_bytes": self.cache_bytes,
            "dataset_bytes": self.dataset_bytes,
            "parameter_count": self.parameter_count,
        }

    def save(self, path, timing_path=None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        if timing_path is not None:
            with open(timing_path, "w") as fh:
                json.dump({"wall_seconds": self.wall_seconds}, fh)
                fh.write("\n")


@dataclass
class TrainResult:
    network: NetworkSpec
    mode: str
    params: list[LayerParams]
    metrics: TrainRunMetrics
    plan: BlockPlan | None = None
    models: list[MemoryModel] | None = None
    manifests: list[ActivationCacheManifest] = field(default_factory=list)


# Block-wise engine ---------------------------------------------------------------------


class _Run:
    """State shared by the blocks of one local-learning run."""

    def __init__(self, network, params, train, val, settings, budget, meter, metrics, cache_root, use_cache, samplewise_reforward):
        self.network = network
        self.params = params
        self.train = train
        self.val = val
        self.s = settings
        self.budget = budget
        self.meter = meter
        self.metrics = metrics
        self.cache_root = cache_root
        self.use_cache = use_cache
        self.samplewise_reforward = samplewise_reforward
        # fixed storage order of every cache: the permutation of the first block's last epoch
        self.order = None
        self.manifest: ActivationCacheManifest | None = None
        self.val_in = None if val is None else val.images

    def check_budget(self, peak: int, where: str) -> None:
        if self.budget is not None and peak > self.budget:
            raise BudgetExceededError(f"{where}: peak {peak} bytes exceeds the budget of {self.budget:.0f} bytes")

    def frozen_forward(self, layer_ids, x):
        """Inference through 0-based layers ``layer_ids``, metered layer by layer."""
        peak = 0
        for i in layer_ids:
            with self.meter.scope() as st:
                self.meter.allocate(x)
                if self.samplewise_reforward:
                    x = np.concatenate(
                        [unit_forward(self.network.layers[i], self.params[i].unit, x[k : k + 1])[0] for k in range(len(x))]
                    )
                else:
                    x = unit_forward(self.network.layers[i], self.params[i].unit, x)[0]
                self.meter.allocate(x)
            peak = max(peak, st.peak_bytes)
            self.metrics.forward_evaluations[i] += 1
        return x, peak

    def batches(self, block_index: int, first: int, batch: int, epoch: int):
        """(x, y, peak) batches feeding layer ``first`` (0-based) for one epoch."""
        if first == 0:
            for x, y in BatchIterator(self.train, batch, self.s.seed, epoch):
                yield x, y, 0
        elif self.use_cache:
            chunk_order = None
            if self.s.shuffle_cache_chunks:
                rng = np.random.default_rng([self.s.seed, block_index, epoch])
                chunk_order = rng.permutation(len(self.manifest.chunks))
            for x, y in rebatch(self.manifest, batch, chunk_order):
                yield x, y, 0
        else:
            for start in range(0, len(self.order), batch):
                idx = self.order[start : start + batch]
                x, peak = self.frozen_forward(range(first), self.train.images[idx])
                yield x, self.train.labels[idx], peak

    def storage_order(self, block: Block):
        if self.order is None:
            self.order = BatchIterator(self.train, block.batch_size, self.s.seed, self.s.epochs - 1).order()
        return self.order

    def train_block(self, block_index: int, block: Block) -> BlockMetrics:
        ids = [l - 1 for l in block.layers]
        bm = BlockMetrics(list(block.layers), block.batch_size, self.s.epochs)
        opts = [
            (
                SgdState.for_params(self.params[i].unit_list(), self.s.learning_rate, self.s.momentum),
                SgdState.for_params(self.params[i].head_list(), self.s.learning_rate, self.s.momentum),
            )
            for i in ids
        ]
        previous_inputs = None
        for epoch in range(self.s.epochs):
            if ids[0] == 0:
                self.storage_order(block)
            for x, y, feed_peak in self.batches(block_index, ids[0], block.batch_size, epoch):
                bm.peak_bytes = max(bm.peak_bytes, feed_peak)
                a = x
                for i, (uo, ho) in zip(ids, opts):
                    with self.meter.scope() as st:
                        self.meter.allocate(a)
                        _, a = local_step(self.network.layers[i], self.params[i], a, y, uo, ho, self.meter, i + 1)
                    bm.peak_bytes = max(bm.peak_bytes, st.peak_bytes)
                    self.metrics.forward_evaluations[i] += 1
                bm.sgd_steps += 1
                self.check_budget(bm.peak_bytes, f"block {block_index}")
            previous_inputs = self.validate(ids, epoch, previous_inputs)
        return bm

    def validate(self, ids, epoch, previous_inputs):
        if self.val is None:
            return None
        layers = [self.network.layers[i] for i in ids]
        params = [self.params[i] for i in ids]
        accs, _ = stream_accuracies(layers, params, self.val_in, self.val.labels)
        for i, acc in zip(ids, accs):
            self.metrics.val_history.setdefault(i + 1, []).append(float(acc))
        # drift of every block layer's input on a fixed probe subset of validation data
        probe = self.val_in[: self.s.drift_samples]
        inputs = [probe]
        for layer, lp in zip(layers[:-1], params[:-1]):
            inputs.append(np.concatenate([unit_forward(layer, lp.unit, inputs[-1][k : k + 1])[0] for k in range(len(probe))]))
        if previous_inputs is not None:
            for i, cur, prev in zip(ids, inputs, previous_inputs):
                self.metrics.drift.append(drift_estimate(cur, prev, self.s.drift_bins, i + 1, epoch + 1))
        return inputs

    def write_cache(self, block_index: int, block: Block) -> int:
        """Forward the whole training set through the trained block into a new cache."""
        ids = [l - 1 for l in block.layers]
        writer = CacheWriter(os.path.join(self.cache_root, f"block_{block_index:02d}"), block_index)
        peak = 0
        order = self.order
        if ids[0] == 0:
            source = (
                (self.train.images[order[s : s + block.batch_size]], self.train.labels[order[s : s + block.batch_size]])
                for s in range(0, len(order), block.batch_size)
            )
        else:
            source = rebatch(self.manifest, block.batch_size)
        pos = 0
        saved = self.samplewise_reforward
        self.samplewise_reforward = True
        try:
            for x, y in source:
                out, p = self.frozen_forward(ids, x)
                peak = max(peak, p)
                writer.append(out, y, order[pos : pos + len(y)])
                pos += len(y)
        finally:
            self.samplewise_reforward = saved
        self.manifest = writer.finish()
        return peak

    def advance_val(self, ids):
        if self.val is None:
            return
        layers = [self.network.layers[i] for i in ids]
        params = [self.params[i] for i in ids]
        _, self.val_in = stream_accuracies(layers, params, self.val_in, self.val.labels)


def _run_blockwise(network, params, blocks, train, val, settings, budget, batch_limit, mode, work_dir, use_cache, samplewise_reforward, test):
    metrics = TrainRunMetrics(mode, network.name, budget, batch_limit, settings, len(train))
    metrics.forward_evaluations = [0] * network.depth
    metrics.dataset_bytes = 4 * train.images.size
    manifests = []
    started = time.perf_counter()
    with ExitStack() as stack:
        if work_dir is None:
            work_dir = stack.enter_context(tempfile.TemporaryDirectory(prefix="adaptll-"))
        run = _Run(network, params, train, val, settings, budget, MemoryMeter(), metrics, os.path.join(work_dir, "cache"), use_cache, samplewise_reforward)
        for k, block in enumerate(blocks, start=1):
            bm = run.train_block(k, block)
            if use_cache and k < len(blocks):
                bm.peak_bytes = max(bm.peak_bytes, run.write_cache(k, block))
                run.check_budget(bm.peak_bytes, f"block {k} cache write")
                manifests.append(run.manifest)
                metrics.cache_bytes += run.manifest.total_bytes()
            run.advance_val([l - 1 for l in block.layers])
            metrics.blocks.append(bm)
            metrics.forward_after_block.append(list(metrics.forward_evaluations))
    _finish_metrics(metrics, network, params, val, test, mode)
    metrics.wall_seconds = time.perf_counter() - started
    return metrics, manifests


def _finish_metrics(metrics, network, params, val, test, mode):
    metrics.parameter_count = parameter_count(network, mode=mode)
    if mode == "bp":
        if val is not None:
            metrics.final_val_accuracy = [float(a) for a in _bp_accuracies(network, params, val)]
        if test is not None:
            metrics.test_accuracy = [float(a) for a in _bp_accuracies(network, params, test)]
        return
    if val is not None:
        metrics.final_val_accuracy = [float(a) for a in stream_accuracies(network.layers, params, val.images, val.labels)[0]]
    if test is not None:
        metrics.test_accuracy = [float(a) for a in stream_accuracies(network.layers, params, test.images, test.labels)[0]]


def _bp_accuracies(network, params, dataset):
    """Terminal-classifier accuracy; hidden layers of a BP net have no heads."""
    accs, _ = stream_accuracies(network.layers, params, dataset.images, dataset.labels)
    return [accs[-1]]


def _check_plan_matches(plan: BlockPlan, network: NetworkSpec) -> None:
    if plan.depth != network.depth:
        raise UsageError(f"plan covers {plan.depth} layers, network has {network.depth}")


def train_neuroflux(
    network: NetworkSpec,
    train: LabeledDataset,
    budget_bytes: float,
    batch_limit: int = 512,
    settings: TrainSettings | None = None,
    val: LabeledDataset | None = None,
    test: LabeledDataset | None = None,
    threshold: float = 0.4,
    plan: BlockPlan | None = None,
    models: list[MemoryModel] | None = None,
    probe_batches=DEFAULT_PROBE_BATCHES,
    work_dir=None,
    use_cache: bool = True,
) -> TrainResult:
    """Adaptive local learning: profile, partition, then train blocks in order.

    With ``use_cache`` false, later blocks re-run the frozen earlier layers on
    every batch instead of reading cached activations; results are identical.
    """
    settings = settings or TrainSettings()
    if plan is None:
        if models is None:
            models = profile_network(network, "aan", probe_batches, settings.momentum, settings.seed).models
        plan = partition(models, budget_bytes, batch_limit, threshold)
    _check_plan_matches(plan, network)
    params = init_parameters(network, settings.seed, "aan")
    metrics, manifests = _run_blockwise(
        network, params, plan.blocks, train, val, settings, budget_bytes, plan.batch_limit, "neuroflux",
        work_dir, use_cache, True, test,
    )
    return TrainResult(network, "neuroflux", params, metrics, plan, models, manifests)


def train_classic_ll_baseline(
    network: NetworkSpec,
    train: LabeledDataset,
    budget_bytes: float,
    batch_limit: int = 512,
    settings: TrainSettings | None = None,
    val: LabeledDataset | None = None,
    test: LabeledDataset | None = None,
    probe_batches=DEFAULT_PROBE_BATCHES,
    models: list[MemoryModel] | None = None,
    samplewise_reforward: bool = False,
) -> TrainResult:
    """Layer-wise training with 256-filter heads at one network-wide batch size.

    Every layer trains in turn; each of its batches is recomputed by running
    the frozen earlier layers, since nothing is cached.
    """
    settings = settings or TrainSettings()
    if models is None:
        models = profile_network(network, "classic", probe_batches, settings.momentum, settings.seed).models
    feasible = []
    for m in models:
        t = max_feasible_batch(m, budget_bytes)
        if t == 0:
            raise PlanningError(
                f"classic local learning: layer {m.layer_index} needs at least {minimum_budget(m)} bytes"
            )
        feasible.append(min(t, batch_limit))
    batch = min(feasible)
    blocks = [Block((i + 1,), batch) for i in range(network.depth)]
    plan = BlockPlan(blocks, budget_bytes, batch_limit, 0.0, feasible)
    params = init_parameters(network, settings.seed, "classic")
    metrics, _ = _run_blockwise(
        network, params, blocks, train, val, settings, budget_bytes, batch_limit, "classic_ll",
        None, False, samplewise_reforward, test,
    )
    return TrainResult(network, "classic_ll", params, metrics, plan, models)


def bp_feasible_batch(model: MemoryModel, budget_bytes: float, batch_limit: int) -> int:
    """Largest batch in 1..batch_limit whose whole-network prediction fits, by linear search."""
    best = 0
    for b in range(1, batch_limit + 1):
        if not fits(model, b, budget_bytes):
            break
        best = b
    return best


def train_bp_baseline(
    network: NetworkSpec,
    train: LabeledDataset,
    budget_bytes: float,
    batch_limit: int = 512,
    settings: TrainSettings | None = None,
    val: LabeledDataset | None = None,
    test: LabeledDataset | None = None,
    probe_batches=DEFAULT_PROBE_BATCHES,
    model: MemoryModel | None = None,
) -> TrainResult:
    """End-to-end backpropagation with every activation held through the backward pass."""
    settings = settings or TrainSettings()
    if model is None:
        model = profile_network(network, "bp", probe_batches, settings.momentum, settings.seed).models[0]
    batch = bp_feasible_batch(model, budget_bytes, batch_limit)
    if batch == 0:
        raise PlanningError(
            f"backpropagation is infeasible: batch 1 needs {minimum_budget(model)} bytes, "
            f"budget is {budget_bytes:.0f}"
        )
    params = init_parameters(network, settings.seed, "bp")
    opts = [SgdState.for_params(lp.unit_list() + lp.head_list(), settings.learning_rate, settings.momentum) for lp in params]
    metrics = TrainRunMetrics("bp", network.name, budget_bytes, batch_limit, settings, len(train))
    metrics.forward_evaluations = [0] * network.depth
    metrics.dataset_bytes = 4 * train.images.size
    bm = BlockMetrics(list(range(1, network.depth + 1)), batch, settings.epochs)
    meter = MemoryMeter()
    started = time.perf_counter()
    for epoch in range(settings.epochs):
        for x, y in BatchIterator(train, batch, settings.seed, epoch):
            with meter.scope() as st:
                meter.allocate(x)
                bp_step(network.layers, params, x, y, opts, meter)
            bm.peak_bytes = max(bm.peak_bytes, st.peak_bytes)
            if bm.peak_bytes > budget_bytes:
                raise BudgetExceededError(f"backpropagation peak {bm.peak_bytes} exceeds the budget")
            for i in range(network.depth):
                metrics.forward_evaluations[i] += 1
            bm.sgd_steps += 1
        if val is not None:
            metrics.val_history.setdefault(network.depth, []).append(float(_bp_accuracies(network, params, val)[0]))
    metrics.blocks.append(bm)
    metrics.forward_after_block.append(list(metrics.forward_evaluations))
    _finish_metrics(metrics, network, params, val, test, "bp")
    metrics.wall_seconds = time.perf_counter() - started
    plan = BlockPlan([Block(tuple(bm.layers), batch)], budget_bytes, batch_limit, 0.0, [batch])
    return TrainResult(network, "bp", params, metrics, plan, [model])
