"""
Self-describing binary checkpoints.

Layout (all integers little-endian)::

    b"LLAB" | u16 version | u32 manifest_len | manifest (UTF-8 JSON)
    u32 n_entries
    per entry: u16 name_len | name | u8 dtype | u8 ndim | u32 dims[ndim] | payload

``dtype`` 0 is float32 (model weights, rounded on save), 1 is float64
(operator matrices, which must keep their orthogonality to ~1e-10).
"""

from __future__ import annotations

import json
import struct
import warnings
from pathlib import Path

import numpy as np

from .errors import DataError
from .models import Encoder, Reconstructor
from .operators import LatentOperator

MAGIC = b"LLAB"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {"f32": 0, "f64": 1}


def encode_manifest(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()


def pack(manifest: dict, params: dict[str, np.ndarray], dtype: str = "f32") -> bytes:
    code = _CODES[dtype]
    man = encode_manifest(manifest)
    out = [MAGIC, struct.pack("<HI", VERSION, len(man)), man, struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} has non-finite values")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def unpack(data: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise DataError(f"{source}: truncated checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != MAGIC:
        raise DataError(f"{source}: not an LLAB checkpoint")
    version, man_len = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise DataError(f"{source}: checkpoint version {version}, this build reads {VERSION}")
    manifest = json.loads(take(man_len).decode())
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise DataError(f"{source}: unknown dtype code {code} for {name!r}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        params[name] = np.frombuffer(take(size), dtype=dt).reshape(shape).astype(np.float64)
    if pos != len(data):
        raise DataError(f"{source}: trailing bytes after parameter table")
    return manifest, params


def write_checkpoint(path, manifest: dict, params: dict[str, np.ndarray], dtype: str = "f32") -> Path:
    path = Path(path)
    path.write_bytes(pack(manifest, params, dtype))
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint {path} not found")
    return unpack(path.read_bytes(), str(path))


def _expect(manifest: dict, kind: str, path) -> None:
    if manifest.get("kind") != kind:
        raise DataError(f"{path}: expected a {kind} checkpoint, found {manifest.get('kind')!r}")


def check_config_hash(manifest: dict, config_hash: str | None, path) -> None:
    if config_hash and manifest.get("config_hash") not in (None, config_hash):
        warnings.warn(f"{path}: config hash differs from the one recorded in the checkpoint")


# typed helpers


def save_encoder(path, enc: Encoder, **meta) -> Path:
    manifest = {"kind": "encoder", "config": enc.config(), "objective": enc.objective,
                "frozen": enc.frozen, "channel_order": "RGB", **meta}
    return write_checkpoint(path, manifest, enc.state_dict())


def load_encoder(path, config_hash: str | None = None) -> tuple[Encoder, dict]:
    manifest, params = read_checkpoint(path)
    _expect(manifest, "encoder", path)
    check_config_hash(manifest, config_hash, path)
    enc = Encoder(**manifest["config"])
    enc.load_state_dict(params)
    enc.freeze()
    return enc, manifest


def save_reconstructor(path, rec: Reconstructor, encoder_hash: str, **meta) -> Path:
    manifest = {"kind": "reconstructor", "config": rec.config(), "encoder_hash": encoder_hash,
                **meta}
    return write_checkpoint(path, manifest, rec.state_dict())


def load_reconstructor(path, config_hash: str | None = None) -> tuple[Reconstructor, dict]:
    manifest, params = read_checkpoint(path)
    _expect(manifest, "reconstructor", path)
    check_config_hash(manifest, config_hash, path)
    rec = Reconstructor(**manifest["config"])
    rec.load_state_dict(params)
    rec.freeze()
    return rec, manifest


def save_operator(path, op: LatentOperator, **meta) -> Path:
    manifest = {"kind": "operator", "operator_kind": op.kind, "dim": op.c,
                "residual": op.residual, "source": op.source, "provenance": op.provenance,
                **meta}
    return write_checkpoint(path, manifest, {"matrix": op.matrix}, dtype="f64")


def load_operator(path) -> tuple[LatentOperator, dict]:
    manifest, params = read_checkpoint(path)
    _expect(manifest, "operator", path)
    op = LatentOperator(params["matrix"], manifest["operator_kind"], manifest.get("residual"),
                        manifest.get("source", ""), manifest.get("provenance", {}))
    return op, manifest
