"""Model persistence.

File layout: the 8-byte magic ``CBAMNET1``, an 8-byte little-endian manifest
length, a UTF-8 JSON manifest (format version, model config, array directory,
training metadata), then the raw arrays as little-endian floats in manifest
order: every parameter in registration order followed by each batch-norm
state's running mean and variance. 64-bit storage round-trips bit-exactly;
32-bit halves checkpoint size at the cost of exactness.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, CbamConfig, HeadConfig, Model, StemConfig
from .fsio import atomic_write_bytes

MAGIC = b"CBAMNET1"
FORMAT_VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4"}


class CheckpointError(Exception):
    """Base class for checkpoint load/save failures."""


class CheckpointFormatError(CheckpointError):
    """The file does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """The file's format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before the declared payload."""


class CheckpointNameSetError(CheckpointError):
    """The manifest's array names disagree with the model the config builds."""


class CheckpointConfigMismatchError(CheckpointError):
    """The stored config differs from the expected one."""


def model_config_dict(model: Model) -> dict:
    return {
        "backbone": asdict(model.backbone),
        "head": asdict(model.head),
        "cbam": asdict(model.cbam_config),
        "seed": model.seed,
    }


def _config_from_dict(cfg: dict) -> tuple[BackboneConfig, HeadConfig, CbamConfig, int]:
    bb = cfg["backbone"]
    backbone = BackboneConfig(
        stem=StemConfig(**bb["stem"]),
        blocks=tuple(tuple(b) for b in bb["blocks"]),
        compression=bb["compression"],
        input_side=bb["input_side"],
    )
    hd = cfg["head"]
    head = HeadConfig(widths=tuple(hd["widths"]), dropout_rates=tuple(hd["dropout_rates"]),
                      classes=hd["classes"])
    cbam = CbamConfig(**cfg["cbam"])
    return backbone, head, cbam, cfg.get("seed", 0)


def _flatten(prefix: str, value):
    if isinstance(value, dict):
        for k in value:
            yield from _flatten(f"{prefix}.{k}" if prefix else str(k), value[k])
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _flatten(f"{prefix}[{i}]", v)
    else:
        yield prefix, value


def _array_entries(model: Model):
    for name, tensor in model.params.items():
        yield name, "param", tensor.data
    for name, state in model.bn_states.items():
        yield f"{name}.running_mean", "running_mean", state.running_mean
        yield f"{name}.running_var", "running_var", state.running_var


def save_checkpoint(model: Model, path, metadata: dict | None = None,
                    dtype: str = "float64"):
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPES)}, got {dtype!r}")
    np_dtype = np.dtype(_DTYPES[dtype])
    entries = list(_array_entries(model))
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": dtype,
        "config": model_config_dict(model),
        "metadata": metadata or {},
        "arrays": [{"name": n, "kind": k, "shape": list(a.shape)} for n, k, a in entries],
    }
    manifest_bytes = json.dumps(manifest).encode("utf-8")
    chunks = [MAGIC, len(manifest_bytes).to_bytes(8, "little"), manifest_bytes]
    chunks.extend(np.ascontiguousarray(a, dtype=np_dtype).tobytes() for _, _, a in entries)
    atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(path, expected_config: dict | None = None) -> tuple[Model, dict]:
    """Rebuild a model from a checkpoint; returns (model, training metadata)."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8:
        raise CheckpointTruncatedError(f"{path}: file shorter than the fixed header")
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes {raw[:len(MAGIC)]!r}")
    manifest_len = int.from_bytes(raw[len(MAGIC):len(MAGIC) + 8], "little")
    offset = len(MAGIC) + 8
    if len(raw) < offset + manifest_len:
        raise CheckpointTruncatedError(f"{path}: manifest declared {manifest_len} bytes, file ends early")
    try:
        manifest = json.loads(raw[offset:offset + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: manifest is not valid JSON: {exc}") from exc
    offset += manifest_len

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})")
    if manifest.get("dtype") not in _DTYPES:
        raise CheckpointFormatError(f"{path}: unknown dtype {manifest.get('dtype')!r}")

    if expected_config is not None:
        stored = dict(_flatten("", manifest["config"]))
        wanted = dict(_flatten("", expected_config))
        for key in sorted(set(stored) | set(wanted)):
            if stored.get(key) != wanted.get(key):
                raise CheckpointConfigMismatchError(
                    f"{path}: config field {key!r} is {stored.get(key)!r}, "
                    f"expected {wanted.get(key)!r}")

    backbone, head, cbam, seed = _config_from_dict(manifest["config"])
    model = Model(backbone, head, cbam, seed=seed)

    targets = {}
    for name, tensor in model.params.items():
        targets[name] = ("param", tensor)
    for name, state in model.bn_states.items():
        targets[f"{name}.running_mean"] = ("running_mean", state)
        targets[f"{name}.running_var"] = ("running_var", state)
    stored_names = [e["name"] for e in manifest["arrays"]]
    if set(stored_names) != set(targets) or len(stored_names) != len(targets):
        missing = sorted(set(targets) - set(stored_names))
        extra = sorted(set(stored_names) - set(targets))
        raise CheckpointNameSetError(
            f"{path}: array names disagree with the config's model (missing {missing}, extra {extra})")

    np_dtype = np.dtype(_DTYPES[manifest["dtype"]])
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * np_dtype.itemsize
        if len(raw) < offset + nbytes:
            raise CheckpointTruncatedError(
                f"{path}: array {entry['name']!r} needs {nbytes} bytes, file ends early")
        arr = np.frombuffer(raw[offset:offset + nbytes], dtype=np_dtype).astype(np.float64)
        arr = arr.reshape(shape)
        offset += nbytes
        kind, target = targets[entry["name"]]
        if kind == "param":
            if target.data.shape != shape:
                raise CheckpointNameSetError(
                    f"{path}: array {entry['name']!r} has shape {shape}, model expects {target.data.shape}")
            target.data = arr.copy()
        elif kind == "running_mean":
            target.running_mean = arr.copy()
        else:
            target.running_var = arr.copy()
    return model, manifest.get("metadata", {})
