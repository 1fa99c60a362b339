"""Binary file formats: EMBD (labelled embeddings), EMBP (paired embeddings)
and FEMW (trained mapping network).

All integers and floats are little-endian.  Every file ends with an 8-byte
BLAKE2b digest of all preceding bytes.

EMBD / EMBP::

    magic[4] version:u16 count:u32 dim:u16 meta_len:u32 meta[meta_len] (UTF-8 JSON)
    labels:u32[count]
    EMBD: embeddings:f32[count*dim]
    EMBP: source:f32[count*dim] target:f32[count*dim]
    checksum[8]

FEMW::

    magic[4] version:u16 variant:u8 (0=MLP, 1=KAN) embedding_dim:u16
    n_widths:u16 widths:u32[n_widths] input_scale:f64
    KAN only: grid_size:u16 order:u16 lo:f64 hi:f64 scale_spline:u8
    meta_len:u32 meta[meta_len] (UTF-8 JSON training provenance)
    parameters:f32[...] in FemModel.state_arrays() order
    checksum[8]
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Optional, Tuple

import numpy as np

from .fem import FemModel, fem_build
from .kan import SplineGrid

FORMAT_VERSION = 1
CHECKSUM_LEN = 8

_EMB_HEAD = struct.Struct("<4sHIHI")
_FEMW_HEAD = struct.Struct("<4sHBHH")
_GRID = struct.Struct("<HHddB")


class FormatError(ValueError):
    """Base class for malformed files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


def checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=CHECKSUM_LEN).digest()


def _seal(body: bytes) -> bytes:
    return body + checksum(body)


def _verify(data: bytes, consumed: int) -> None:
    if len(data) < consumed + CHECKSUM_LEN:
        raise TruncatedFileError(f"file ends at byte {len(data)}, expected {consumed + CHECKSUM_LEN}")
    if len(data) > consumed + CHECKSUM_LEN:
        raise FormatError(f"{len(data) - consumed - CHECKSUM_LEN} unexpected trailing bytes")
    if checksum(data[:consumed]) != data[consumed:]:
        raise ChecksumError("checksum mismatch")


def _read_header(data: bytes, magic: bytes, head: struct.Struct):
    if len(data) < 4:
        raise TruncatedFileError("file is shorter than its magic number")
    if data[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {data[:4]!r}")
    if len(data) < head.size:
        raise TruncatedFileError("file is shorter than its header")
    fields = head.unpack_from(data, 0)
    if fields[1] != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported {magic.decode()} version {fields[1]}")
    return fields


def _take(data: bytes, off: int, n: int, what: str):
    if off + n > len(data):
        raise TruncatedFileError(f"file truncated inside {what}")
    return data[off:off + n], off + n


def _write_atomic(path, payload: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# ----------------------------------------------------------------------------
# embeddings
# ----------------------------------------------------------------------------

def _meta_bytes(meta: Optional[dict]) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode() if meta else b""


def _parse_meta(raw: bytes) -> Optional[dict]:
    if not raw:
        return None
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"metadata block is not valid UTF-8 JSON: {e}") from e


def encode_embeddings(labels, blocks, meta: Optional[dict] = None, paired: bool = False) -> bytes:
    labels = np.asarray(labels, dtype="<u4")
    blocks = [np.asarray(b, dtype="<f4") for b in blocks]
    count = len(labels)
    dim = blocks[0].shape[1] if blocks[0].ndim == 2 else 0
    for b in blocks:
        if b.shape != (count, dim):
            raise ValueError(f"embedding block shape {b.shape} != ({count}, {dim})")
    if dim > 0xFFFF:
        raise ValueError("embedding dimension does not fit in u16")
    meta_b = _meta_bytes(meta)
    magic = b"EMBP" if paired else b"EMBD"
    body = _EMB_HEAD.pack(magic, FORMAT_VERSION, count, dim, len(meta_b)) + meta_b
    body += labels.tobytes() + b"".join(b.tobytes() for b in blocks)
    return _seal(body)


def decode_embeddings(data: bytes, paired: bool = False):
    magic = b"EMBP" if paired else b"EMBD"
    _, _, count, dim, meta_len = _read_header(data, magic, _EMB_HEAD)
    off = _EMB_HEAD.size
    meta_raw, off = _take(data, off, meta_len, "metadata")
    raw, off = _take(data, off, 4 * count, "labels")
    labels = np.frombuffer(raw, dtype="<u4").astype(np.uint32)
    blocks = []
    for _ in range(2 if paired else 1):
        raw, off = _take(data, off, 4 * count * dim, "embeddings")
        blocks.append(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(count, dim))
    _verify(data, off)
    return labels, blocks, _parse_meta(meta_raw)


def save_embeddings(path, labels, embeddings, meta: Optional[dict] = None) -> None:
    _write_atomic(path, encode_embeddings(labels, [embeddings], meta))


def load_embeddings(path) -> Tuple[np.ndarray, np.ndarray, Optional[dict]]:
    with open(path, "rb") as fh:
        labels, (emb,), meta = decode_embeddings(fh.read())
    return labels, emb, meta


def save_dataset(path, ds) -> None:
    _write_atomic(path, encode_embeddings(ds.labels, [ds.source, ds.target], ds.meta, paired=True))


def load_dataset(path):
    from .synth import PairedDataset
    with open(path, "rb") as fh:
        labels, (src, tgt), meta = decode_embeddings(fh.read(), paired=True)
    return PairedDataset(labels, src, tgt, meta)


def sniff(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read(4)


# ----------------------------------------------------------------------------
# models
# ----------------------------------------------------------------------------

_VARIANTS = {"mlp": 0, "kan": 1}


def encode_model(model: FemModel) -> bytes:
    widths = model.widths
    body = _FEMW_HEAD.pack(b"FEMW", FORMAT_VERSION, _VARIANTS[model.variant],
                           model.embedding_dim, len(widths))
    body += struct.pack(f"<{len(widths)}I", *widths)
    body += struct.pack("<d", model.input_scale)
    if model.variant == "kan":
        g = model.grid
        scale_spline = model.net.layers[0].scale_spline
        body += _GRID.pack(g.grid_size, g.order, g.lo, g.hi, int(scale_spline))
    meta_b = _meta_bytes(model.provenance)
    body += struct.pack("<I", len(meta_b)) + meta_b
    body += b"".join(np.asarray(a, dtype="<f4").tobytes() for _, a in model.state_arrays())
    return _seal(body)


def state_size(variant: str, widths, grid: Optional[SplineGrid] = None,
               scale_spline: bool = True) -> int:
    """Number of f32 values a FEMW file stores for this architecture."""
    pairs = list(zip(widths[:-1], widths[1:]))
    if variant == "mlp":
        # Linear weight+bias per transition, BN gamma/beta/running mean/var per hidden width
        return sum(a * b + b for a, b in pairs) + 4 * sum(widths[1:-1])
    per_edge = 1 + grid.n_basis + (1 if scale_spline else 0)
    return sum(a * b * per_edge for a, b in pairs)


def decode_model(data: bytes) -> FemModel:
    _, _, tag, dim, n_w = _read_header(data, b"FEMW", _FEMW_HEAD)
    off = _FEMW_HEAD.size
    raw, off = _take(data, off, 4 * n_w, "widths")
    widths = struct.unpack(f"<{n_w}I", raw)
    raw, off = _take(data, off, 8, "input scale")
    (input_scale,) = struct.unpack("<d", raw)
    variants = {v: k for k, v in _VARIANTS.items()}
    if tag not in variants:
        raise FormatError(f"unknown model variant tag {tag}")
    variant = variants[tag]
    if n_w < 2 or widths[0] != dim or widths[-1] != dim or min(widths) == 0:
        raise FormatError(f"inconsistent widths {list(widths)} for embedding_dim {dim}")
    grid, scale_spline = None, True
    if variant == "kan":
        raw, off = _take(data, off, _GRID.size, "grid config")
        G, k, lo, hi, scale_spline = _GRID.unpack(raw)
        try:
            grid = SplineGrid(G, k, lo, hi)
        except ValueError as e:
            raise FormatError(f"invalid grid config: {e}") from e
    raw, off = _take(data, off, 4, "metadata length")
    (meta_len,) = struct.unpack("<I", raw)
    meta_raw, off = _take(data, off, meta_len, "metadata")
    # size and checksum are verified before any parameter memory is allocated
    params_start = off
    off += 4 * state_size(variant, widths, grid, bool(scale_spline))
    if off > len(data):
        raise TruncatedFileError("file truncated inside the parameter blob")
    _verify(data, off)
    if variant == "kan":
        model = fem_build("kan", widths, grid=grid)
        if not scale_spline:
            for layer in model.net.layers:
                layer.scale_spline = False
                layer.spline_scaler[:] = 1.0
    else:
        model = fem_build("mlp", widths)
    off = params_start
    for name, arr in model.state_arrays():
        raw, off = _take(data, off, 4 * arr.size, f"parameter {name}")
        arr[...] = np.frombuffer(raw, dtype="<f4").reshape(arr.shape)
    model.provenance = _parse_meta(meta_raw)
    model.input_scale = input_scale
    model.net.train(False)
    return model


def save_model(path, model: FemModel) -> None:
    _write_atomic(path, encode_model(model))


def load_model(path) -> FemModel:
    with open(path, "rb") as fh:
        return decode_model(fh.read())
