"""Greedy grouping of layers into blocks with per-block batch sizes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .errors import InputError, PlanningError, UsageError
from .profiler import MemoryModel

PLAN_SCHEMA = "adaptll.plan/1"
DEFAULT_THRESHOLD = 0.4
DEFAULT_BATCH_LIMIT = 512
_REL_EPS = 1e-9  # absorbs float noise in fitted models whose true values are integers


def max_feasible_batch(model: MemoryModel, budget_bytes: float) -> int:
    """Largest batch whose predicted memory fits the budget; 0 if none does."""
    if model.slope <= 0:
        raise UsageError(f"layer {model.layer_index}: slope must be > 0, got {model.slope}")
    headroom = budget_bytes - model.intercept
    if headroom <= 0:
        return 0
    return max(0, math.floor(headroom / model.slope * (1 + _REL_EPS)))


def fits(model: MemoryModel, batch_size: int, budget_bytes: float) -> bool:
    return model.predict(batch_size) <= budget_bytes * (1 + _REL_EPS)


def minimum_budget(model: MemoryModel) -> int:
    """Smallest integer budget that admits batch size 1."""
    return math.ceil(model.predict(1) * (1 - _REL_EPS))


@dataclass(frozen=True)
class Block:
    layers: tuple[int, ...]  # 1-based, contiguous, ascending
    batch_size: int

    @property
    def first(self) -> int:
        return self.layers[0]

    @property
    def last(self) -> int:
        return self.layers[-1]


@dataclass
class BlockPlan:
    blocks: list[Block]
    budget_bytes: float
    batch_limit: int
    grouping_threshold: float
    layer_batches: list[int]  # capped per-layer feasible batches

    @property
    def depth(self) -> int:
        return sum(len(b.layers) for b in self.blocks)

    def describe(self) -> str:
        return ", ".join(
            f"{{{b.first}-{b.last}}}@{b.batch_size}" if len(b.layers) > 1 else f"{{{b.first}}}@{b.batch_size}"
            for b in self.blocks
        )

    def to_dict(self) -> dict:
        return {
            "schema": PLAN_SCHEMA,
            "budget_bytes": self.budget_bytes,
            "batch_limit": self.batch_limit,
            "grouping_threshold": self.grouping_threshold,
            "layer_batches": list(self.layer_batches),
            "blocks": [{"layers": list(b.layers), "batch_size": b.batch_size} for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockPlan":
        if d.get("schema") != PLAN_SCHEMA:
            raise InputError(f"expected plan schema {PLAN_SCHEMA!r}, got {d.get('schema')!r}")
        blocks = [Block(tuple(int(i) for i in b["layers"]), int(b["batch_size"])) for b in d["blocks"]]
        return cls(blocks, d["budget_bytes"], int(d["batch_limit"]), float(d["grouping_threshold"]), list(d["layer_batches"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "BlockPlan":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise InputError(f"cannot read plan {path}: {exc}") from exc


def group_batches(batches, threshold: float = DEFAULT_THRESHOLD) -> list[Block]:
    """Greedy left-to-right grouping of already-capped per-layer batch sizes.

    A block grows while the next layer's batch differs from the most
    recently added layer's batch by at most ``threshold`` times the latter.
    The block runs at the smallest batch among its members.
    """
    blocks = []
    i, n = 0, len(batches)
    while i < n:
        members = [i]
        run_min = batches[i]
        while i + 1 < n and abs(batches[i + 1] - batches[i]) <= threshold * batches[i]:
            i += 1
            members.append(i)
            run_min = min(run_min, batches[i])
        blocks.append(Block(tuple(m + 1 for m in members), run_min))
        i += 1
    return blocks


def partition(
    models: list[MemoryModel],
    budget_bytes: float,
    batch_limit: int = DEFAULT_BATCH_LIMIT,
    threshold: float = DEFAULT_THRESHOLD,
) -> BlockPlan:
    if not models:
        raise UsageError("partition needs at least one memory model")
    if batch_limit < 1:
        raise UsageError(f"batch_limit must be >= 1, got {batch_limit}")
    if not 0 <= threshold < 1:
        raise UsageError(f"grouping threshold must be in [0, 1), got {threshold}")
    capped = []
    for model in models:
        t = max_feasible_batch(model, budget_bytes)
        if t == 0:
            raise PlanningError(
                f"layer {model.layer_index} cannot train even at batch 1 under a budget of "
                f"{budget_bytes:.0f} bytes; it needs at least {minimum_budget(model)} bytes"
            )
        capped.append(min(t, batch_limit))
    return BlockPlan(group_batches(capped, threshold), budget_bytes, batch_limit, threshold, capped)


@dataclass(frozen=True)
class PlanViolation:
    kind: str
    message: str
    block: int | None = None  # 1-based
    layer: int | None = None  # 1-based

    def __str__(self) -> str:
        return self.message


def validate_plan(plan: BlockPlan, models: list[MemoryModel], budget_bytes: float | None = None) -> PlanViolation | None:
    """Return the first broken plan invariant, or None when the plan is sound."""
    budget = plan.budget_bytes if budget_bytes is None else budget_bytes
    expected = 1
    for k, block in enumerate(plan.blocks, start=1):
        if not block.layers:
            return PlanViolation("coverage", f"block {k} is empty", k)
        for layer in block.layers:
            if layer != expected:
                return PlanViolation(
                    "contiguity", f"block {k} lists layer {layer} where layer {expected} was expected", k, layer
                )
            expected += 1
    if expected - 1 != len(models):
        return PlanViolation("coverage", f"plan covers {expected - 1} layers but the network has {len(models)}")
    by_layer = {m.layer_index: m for m in models}
    for k, block in enumerate(plan.blocks, start=1):
        if block.batch_size < 1:
            return PlanViolation("batch", f"block {k} has batch size {block.batch_size}", k)
        if block.batch_size > plan.batch_limit:
            return PlanViolation("cap", f"block {k} batch {block.batch_size} exceeds the limit {plan.batch_limit}", k)
        feasible = []
        for layer in block.layers:
            model = by_layer.get(layer)
            if model is None:
                return PlanViolation("coverage", f"no memory model for layer {layer}", k, layer)
            if not fits(model, block.batch_size, budget):
                return PlanViolation(
                    "memory",
                    f"layer {layer} in block {k} needs {model.predict(block.batch_size):.0f} bytes "
                    f"at batch {block.batch_size}, above the budget of {budget:.0f}",
                    k,
                    layer,
                )
            feasible.append(min(max_feasible_batch(model, budget), plan.batch_limit))
        if block.batch_size != min(feasible):
            return PlanViolation(
                "batch", f"block {k} batch {block.batch_size} is not its members' minimum {min(feasible)}", k
            )
    return None
