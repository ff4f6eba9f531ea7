"""Binary parameter container shared by checkpoints and compact exit models.

Layout: the 32-byte header used by activation chunks, with magic "NFCM" and
dims ``(metadata_bytes, tensor_count)``; then UTF-8 JSON metadata listing
every tensor's name and shape; then the raw float32 little-endian tensors in
that order.
"""

from __future__ import annotations

import json

import numpy as np

from .arch import AuxiliarySpec, LayerParams, NetworkSpec
from .cache import DTYPE_F32_LE, HEADER, pack_header, unpack_header
from .errors import CacheCorruptionError, InputError

MODEL_MAGIC = b"NFCM"


def write_container(path, metadata: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    table = [{"name": name, "shape": list(arr.shape)} for name, arr in tensors]
    meta = json.dumps({**metadata, "tensors": table}, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(pack_header(MODEL_MAGIC, DTYPE_F32_LE, [len(meta), len(tensors)]))
            fh.write(meta)
            for _, arr in tensors:
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    except OSError as exc:
        raise InputError(f"cannot write model file {path}: {exc}") from exc


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read model file {path}: {exc}") from exc
    try:
        _, (meta_len, count) = unpack_header(blob, MODEL_MAGIC, str(path))
    except ValueError as exc:
        raise CacheCorruptionError(f"{path}: malformed header") from exc
    offset = HEADER.size + meta_len
    metadata = json.loads(blob[HEADER.size : offset].decode())
    table = metadata.pop("tensors")
    if len(table) != count:
        raise CacheCorruptionError(f"{path}: header lists {count} tensors, metadata {len(table)}")
    tensors = {}
    for entry in table:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float32)
        offset += 4 * size
    if offset != len(blob):
        raise CacheCorruptionError(f"{path}: {len(blob) - offset} trailing bytes")
    return metadata, tensors


def head_to_dict(spec: AuxiliarySpec | None):
    if spec is None:
        return None
    return {
        "filters": spec.filters,
        "pool_target": list(spec.pool_target),
        "classifier_inputs": spec.classifier_inputs,
        "num_classes": spec.num_classes,
        "in_channels": spec.in_channels,
        "has_conv": spec.has_conv,
    }


def head_from_dict(d) -> AuxiliarySpec | None:
    if d is None:
        return None
    return AuxiliarySpec(
        d["filters"], tuple(d["pool_target"]), d["classifier_inputs"], d["num_classes"], d["in_channels"], d["has_conv"]
    )


def params_to_tensors(params: list[LayerParams], heads_at=None) -> list[tuple[str, np.ndarray]]:
    """Flatten units (all layers) and heads (``heads_at`` 0-based indices, default all)."""
    out = []
    for i, lp in enumerate(params):
        out += [(f"layer{i}.unit.{k}", v) for k, v in lp.unit.items()]
        if lp.head is not None and (heads_at is None or i in heads_at):
            out += [(f"layer{i}.head.{k}", v) for k, v in lp.head.items()]
    return out


def params_from_tensors(tensors: dict, head_dicts: list) -> list[LayerParams]:
    params = []
    for i, hd in enumerate(head_dicts):
        unit = {k.split(".")[-1]: v for k, v in tensors.items() if k.startswith(f"layer{i}.unit.")}
        head = {k.split(".")[-1]: v for k, v in tensors.items() if k.startswith(f"layer{i}.head.")}
        spec = head_from_dict(hd)
        params.append(LayerParams(unit, head if spec is not None else None, spec))
    return params


def save_checkpoint(path, network: NetworkSpec, params: list[LayerParams], mode: str, extra: dict | None = None) -> None:
    metadata = {
        "kind": "checkpoint",
        "mode": mode,
        "network": network.to_dict(),
        "heads": [head_to_dict(lp.head_spec) for lp in params],
        "extra": extra or {},
    }
    write_container(path, metadata, params_to_tensors(params))


def load_checkpoint(path) -> tuple[NetworkSpec, list[LayerParams], str, dict]:
    metadata, tensors = read_container(path)
    if metadata.get("kind") != "checkpoint":
        raise InputError(f"{path} is not a training checkpoint")
    network = NetworkSpec.from_dict(metadata["network"])
    return network, params_from_tensors(tensors, metadata["heads"]), metadata["mode"], metadata.get("extra", {})
