"""Binary checkpoint format.

Layout::

    b"PADLCKPT"                 8-byte magic
    uint32 little-endian        header length in bytes
    header                      UTF-8 JSON
    payload                     raw tensors, little-endian float32, row-major

The header carries ``format_version``, ``model_kind``, ``model_config``,
``metadata``, a ``tensors`` table (name, dtype tag, shape, byte offset,
byte count) and the SHA-256 of the payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import PADL, ConfigError, ModelConfig, load_named_tensors, named_tensors

MAGIC = b"PADLCKPT"
FORMAT_VERSION = 1
DTYPE_TAG = "f32le"


class CheckpointError(ValueError):
    pass


def encode_tensors(arrays: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    table, chunks, offset = [], [], 0
    for name in sorted(arrays):
        raw = np.ascontiguousarray(arrays[name], dtype="<f4").tobytes()
        table.append({"name": name, "dtype": DTYPE_TAG, "shape": list(arrays[name].shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return table, b"".join(chunks)


def decode_tensors(table: list[dict], payload: bytes) -> dict[str, np.ndarray]:
    out = {}
    for entry in table:
        if entry["dtype"] != DTYPE_TAG:
            raise CheckpointError(f"unsupported dtype tag {entry['dtype']!r} for {entry['name']}")
        start, n = entry["offset"], entry["nbytes"]
        shape = tuple(entry["shape"])
        if n != 4 * int(np.prod(shape, dtype=np.int64)) or start + n > len(payload):
            raise CheckpointError(f"tensor {entry['name']} has an inconsistent table entry")
        out[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=start).reshape(shape).astype(np.float32)
    return out


def save_checkpoint(path: str | Path, model: PADL, metadata: dict | None = None) -> None:
    kind, extra = model_kind(model)
    table, payload = encode_tensors(named_tensors(model))
    header = {
        "format_version": FORMAT_VERSION,
        "model_kind": kind,
        "model_options": extra,
        "model_config": model.config.to_dict(),
        "metadata": metadata or {},
        "tensors": table,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Header and tensor table, after magic, version and checksum checks."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    blob = path.read_bytes()
    if blob[:8] != MAGIC or len(blob) < 12:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupted checkpoint header in {path}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format_version {header.get('format_version')} != {FORMAT_VERSION}")
    payload = blob[12 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"checksum mismatch in {path}: payload corrupted")
    return header, decode_tensors(header["tensors"], payload)


def model_kind(model: PADL) -> tuple[str, dict]:
    from .attack import FixedPerturbationBaseline

    if isinstance(model, FixedPerturbationBaseline):
        return "fixed_baseline", {"num_perturbations": model.encoder.count}
    return "padl", {}


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None) -> tuple[PADL, dict]:
    """Rebuild the model stored at ``path``; returns (model, metadata)."""
    header, arrays = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(header["model_config"])
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"invalid model config in checkpoint: {exc}") from exc
    if expected_config is not None and cfg != expected_config:
        raise CheckpointError(f"checkpoint config {cfg} incompatible with {expected_config}")
    if header["model_kind"] == "fixed_baseline":
        from .attack import FixedPerturbationBaseline

        model: PADL = FixedPerturbationBaseline(cfg, header["model_options"]["num_perturbations"])
    elif header["model_kind"] == "padl":
        model = PADL(cfg)
    else:
        raise CheckpointError(f"unknown model kind {header['model_kind']!r}")
    try:
        load_named_tensors(model, arrays)
    except ConfigError as exc:
        raise CheckpointError(str(exc)) from exc
    return model, header.get("metadata", {})
