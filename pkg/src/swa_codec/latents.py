"""SWAL latent volume files: raw float64 or quantized int16, scan order."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .fileio import atomic_write

LATENT_MAGIC = b"SWAL"
LATENT_VERSION = 1
DTYPE_F64 = 0
DTYPE_I16 = 1
_HEADER = struct.Struct("<4sH4HH")
_DTYPES = {DTYPE_F64: np.dtype("<f8"), DTYPE_I16: np.dtype("<i2")}


class LatentFormatError(ValueError):
    """A latent file is malformed."""


def encode_latents(volume, quantized: bool = False) -> bytes:
    vol = np.asarray(volume)
    if vol.ndim != 4:
        raise LatentFormatError(f"expected (L, H, W, C), got shape {vol.shape}")
    if any(not 1 <= n <= 0xFFFF for n in vol.shape):
        raise LatentFormatError(f"dimensions {vol.shape} do not fit u16")
    flag = DTYPE_I16 if quantized else DTYPE_F64
    if quantized:
        ints = np.asarray(vol, dtype=np.int64)
        if not np.array_equal(ints, vol) or ints.min(initial=0) < -32768 or ints.max(initial=0) > 32767:
            raise LatentFormatError("quantized latents must be integers in int16 range")
        payload = ints.astype("<i2").tobytes()
    else:
        payload = np.ascontiguousarray(vol, dtype="<f8").tobytes()
    return _HEADER.pack(LATENT_MAGIC, LATENT_VERSION, *vol.shape, flag) + payload


def decode_latents(blob: bytes) -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise LatentFormatError("file shorter than header")
    magic, version, L, H, W, C, flag = _HEADER.unpack_from(blob)
    if magic != LATENT_MAGIC:
        raise LatentFormatError("bad magic; not a SWAL latent file")
    if version != LATENT_VERSION:
        raise LatentFormatError(f"unsupported latent version {version}")
    if flag not in _DTYPES:
        raise LatentFormatError(f"unknown dtype flag {flag}")
    if min(L, H, W, C) < 1:
        raise LatentFormatError("zero-sized dimension")
    dtype = _DTYPES[flag]
    expected = L * H * W * C * dtype.itemsize
    payload = blob[_HEADER.size :]
    if len(payload) != expected:
        raise LatentFormatError(f"payload has {len(payload)} bytes, dims imply {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(L, H, W, C)
    return data.astype(np.int64) if flag == DTYPE_I16 else data.astype(np.float64)


def write_latents(path, volume, quantized: bool = False) -> None:
    atomic_write(path, encode_latents(volume, quantized))


def read_latents(path) -> np.ndarray:
    return decode_latents(Path(path).read_bytes())
