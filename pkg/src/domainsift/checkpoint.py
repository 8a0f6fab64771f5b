"""Binary checkpoint container for model and prefix tensors.

Layout: magic ``LMDS``, format version (u16 LE), header length (u32 LE),
a JSON header carrying the kind, config/provenance metadata, and a tensor
manifest (name, shape, byte offset), then raw little-endian float64 tensor
data in manifest order. Offsets are relative to the start of the data
section. One container format serves both full model weights and
prefix-only files, distinguished by the header ``kind``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tiny_lm import LayerParams, LmConfig, LmParams, _LAYER_TENSORS

MAGIC = b"LMDS"
FORMAT_VERSION = 1

KIND_LM_PARAMS = "lm_params"
KIND_DOMAIN_PREFIX = "domain_prefix"


class CheckpointError(ValueError):
    """The file is not a readable checkpoint of a supported version."""


def write_checkpoint(
    path: str | Path,
    kind: str,
    meta: dict,
    tensors: list[tuple[str, np.ndarray]],
) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = dict(meta)
    header["kind"] = kind
    header["tensors"] = manifest
    header_blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(struct.pack("<H", FORMAT_VERSION))
        handle.write(struct.pack("<I", len(header_blob)))
        handle.write(header_blob)
        for blob in blobs:
            handle.write(blob)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (header, name -> writable float64 tensor)."""
    with open(path, "rb") as handle:
        magic = handle.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        raw = handle.read(2)
        if len(raw) < 2:
            raise CheckpointError(f"{path}: truncated header")
        (version,) = struct.unpack("<H", raw)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (header_len,) = struct.unpack("<I", handle.read(4))
        header_blob = handle.read(header_len)
        if len(header_blob) != header_len:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(header_blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
        data = handle.read()
    tensors: dict[str, np.ndarray] = {}
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(data):
            raise CheckpointError(f"{path}: tensor {entry['name']} out of bounds")
        arr = np.frombuffer(data[start:end], dtype="<f8").reshape(shape).copy()
        tensors[entry["name"]] = arr
    return header, tensors


def save_params(path: str | Path, params: LmParams, provenance: dict | None = None) -> None:
    meta = {"config": params.config.to_dict(), "provenance": provenance or {}}
    write_checkpoint(path, KIND_LM_PARAMS, meta, list(params.named_tensors()))


def load_params(path: str | Path) -> LmParams:
    """Load model weights; the result is frozen (scoring never mutates)."""
    header, tensors = read_checkpoint(path)
    if header.get("kind") != KIND_LM_PARAMS:
        raise CheckpointError(f"{path}: not a model checkpoint (kind={header.get('kind')!r})")
    config = LmConfig(**header["config"])
    config.validate()
    try:
        layers = [
            LayerParams(**{n: tensors[f"layers.{i}.{n}"] for n in _LAYER_TENSORS})
            for i in range(config.n_layers)
        ]
        params = LmParams(
            config=config,
            tok_emb=tensors["tok_emb"],
            pos_emb=tensors["pos_emb"],
            layers=layers,
            lnf_g=tensors["lnf_g"],
            lnf_b=tensors["lnf_b"],
            w_out=tensors["w_out"],
        )
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing tensor {exc}") from exc
    return params.freeze()
