"""Checkpoint persistence: a TOML manifest and a little-endian parameter blob

The manifest names the blob, records the precision and byte order, embeds the
:class:`~gccpm.model.network.ModelConfig` the network was built from and lists
every parameter (name, shape, element offset, element count) in blob order::

    format_version = 1
    precision = "float32"
    byte_order = "little"
    blob = "final.bin"

    [model]
    input_size = 256
    ...

    [[parameters]]
    name = "backbone.conv1.weight"
    shape = [32, 3, 3, 3]
    offset = 0
    count = 864
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np
import rtoml

from gccpm._utils import drop_none
from gccpm.model.network import ModelConfig, PoseMachine, build_model

MODULE_LOGGER = logging.getLogger(__name__)

FORMAT_VERSION = 1
_BLOB_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    """A checkpoint cannot be read back into a network."""


def blob_path(manifest: Union[str, Path]) -> Path:
    return Path(manifest).with_suffix(".bin")


def save_checkpoint(model: PoseMachine, path: Union[str, Path]) -> Path:
    """Write ``model`` to ``path`` (the manifest) and its sibling ``.bin`` blob

    :return: The manifest path
    """
    path = Path(path).with_suffix(".toml")
    named = model.named_parameters()
    precision = np.result_type(*(t.dtype for _, t in named)).name if named else "float32"
    if precision not in _BLOB_DTYPES:
        raise CheckpointError(f"Cannot store parameters of type {precision}")
    dtype = np.dtype(_BLOB_DTYPES[precision])
    entries, chunks, offset = [], [], 0
    for name, tensor in named:
        data = np.ascontiguousarray(tensor.data, dtype=dtype)
        entries.append(
            {"name": name, "shape": list(data.shape), "offset": offset, "count": int(data.size)}
        )
        chunks.append(data.tobytes())
        offset += data.size
    blob = blob_path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob.write_bytes(b"".join(chunks))
    manifest = {
        "format_version": FORMAT_VERSION,
        "precision": precision,
        "byte_order": "little",
        "blob": blob.name,
        "model": drop_none(model.config.to_dict()),
        "parameters": entries,
    }
    with open(path, "w") as fh:
        rtoml.dump(manifest, fh, pretty=True)
    MODULE_LOGGER.info("Saved %d parameters (%d values) to %s", len(entries), offset, path)
    return path


def read_manifest(path: Union[str, Path]) -> dict:
    path = Path(path)
    try:
        manifest = rtoml.loads(path.read_text())
    except FileNotFoundError:
        raise CheckpointError(f"Checkpoint manifest {path} does not exist") from None
    except rtoml.TomlParsingError as exc:
        raise CheckpointError(f"Checkpoint manifest {path} is not valid TOML: {exc}") from None
    for key in ("format_version", "precision", "byte_order", "blob", "model", "parameters"):
        if key not in manifest:
            raise CheckpointError(f"Checkpoint manifest {path} is missing '{key}'")
    if manifest["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint format version {manifest['format_version']} is not supported "
            f"(expected {FORMAT_VERSION})"
        )
    if manifest["byte_order"] != "little" or manifest["precision"] not in _BLOB_DTYPES:
        raise CheckpointError(
            f"Unsupported blob layout {manifest['precision']}/{manifest['byte_order']}"
        )
    return manifest


def load_checkpoint(
    path: Union[str, Path], config: Optional[ModelConfig] = None
) -> PoseMachine:
    """Rebuild a network from a manifest and restore its parameters bit for bit

    :param path: The manifest
    :param config: When given, the network is built from this config and the
        checkpoint must match it; otherwise the embedded config is used
    :raises CheckpointError: For a truncated or oversized blob, an unknown,
        missing or reshaped parameter, or an unreadable manifest
    """
    path = Path(path)
    manifest = read_manifest(path)
    stored_config = ModelConfig.from_dict(manifest["model"])
    model = build_model(config if config is not None else stored_config)

    dtype = np.dtype(_BLOB_DTYPES[manifest["precision"]])
    blob_file = path.parent / manifest["blob"]
    try:
        raw = blob_file.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"Checkpoint blob {blob_file} does not exist") from None
    expected_values = sum(int(e["count"]) for e in manifest["parameters"])
    if len(raw) != expected_values * dtype.itemsize:
        kind = "truncated" if len(raw) < expected_values * dtype.itemsize else "oversized"
        raise CheckpointError(
            f"Checkpoint blob {blob_file} is {kind}: {len(raw)} bytes, manifest lists "
            f"{expected_values} values ({expected_values * dtype.itemsize} bytes)"
        )
    values = np.frombuffer(raw, dtype=dtype)

    params = dict(model.named_parameters())
    stored = {e["name"]: e for e in manifest["parameters"]}
    unknown = sorted(set(stored) - set(params))
    if unknown:
        raise CheckpointError(
            f"Checkpoint has parameters the model does not: {', '.join(unknown[:5])}"
            + (f" and {len(unknown) - 5} more" if len(unknown) > 5 else "")
        )
    missing = sorted(set(params) - set(stored))
    if missing:
        raise CheckpointError(
            f"Checkpoint lacks parameters the model needs: {', '.join(missing[:5])}"
            + (f" and {len(missing) - 5} more" if len(missing) > 5 else "")
        )
    for name, tensor in params.items():
        entry = stored[name]
        shape = tuple(entry["shape"])
        if shape != tensor.shape:
            raise CheckpointError(
                f"Parameter {name} has shape {shape} in the checkpoint but {tensor.shape} in the model"
            )
        start, count = int(entry["offset"]), int(entry["count"])
        if count != int(np.prod(shape)) or start + count > values.size:
            raise CheckpointError(f"Parameter {name} points outside the blob")
        tensor.data = (
            values[start : start + count].reshape(shape).astype(dtype.newbyteorder("="))
        )
    MODULE_LOGGER.info("Loaded %d parameters from %s", len(params), path)
    return model
