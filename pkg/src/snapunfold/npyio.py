"""NPY v1.0 tensor files and 8-bit PGM frame dumps."""

from __future__ import annotations

import os

import numpy as np
from numpy.lib import format as npformat

SUPPORTED = {"<f4": np.float32, "<f8": np.float64, "|u1": np.uint8}


class NpyFormatError(ValueError):
    """The file is not a supported NPY v1.0 tensor."""


def save_tensor(path: str | os.PathLike, arr) -> None:
    """Write ``arr`` as little-endian, C-order NPY v1.0 (float32, float64 or uint8)."""
    arr = np.asarray(arr)
    if arr.dtype.kind == "f" and arr.dtype.itemsize in (4, 8):
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    elif arr.dtype != np.uint8:
        raise NpyFormatError(f"unsupported dtype {arr.dtype}; use float32, float64 or uint8")
    arr = np.ascontiguousarray(arr)
    header = {"descr": npformat.dtype_to_descr(arr.dtype), "fortran_order": False, "shape": arr.shape}
    with open(path, "wb") as fh:
        npformat.write_array_header_1_0(fh, header)
        fh.write(arr.tobytes(order="C"))


def load_tensor(path: str | os.PathLike, raw: bool = False) -> np.ndarray:
    """Read an NPY v1.0 file written under the same contract.

    uint8 payloads are mapped to float32 in [0, 1] by dividing by 255 unless
    ``raw`` is set, in which case the stored array is returned unchanged.
    """
    with open(path, "rb") as fh:
        try:
            version = npformat.read_magic(fh)
        except ValueError as exc:
            raise NpyFormatError(f"{path}: bad magic, not an NPY file") from exc
        if version != (1, 0):
            raise NpyFormatError(f"{path}: NPY version {version} unsupported, expected 1.0")
        try:
            shape, fortran, dtype = npformat.read_array_header_1_0(fh)
        except ValueError as exc:
            raise NpyFormatError(f"{path}: malformed header: {exc}") from exc
        descr = npformat.dtype_to_descr(dtype)
        if dtype.byteorder == ">":
            raise NpyFormatError(f"{path}: big-endian data ({descr}) is not supported; convert to little-endian")
        if descr not in SUPPORTED:
            raise NpyFormatError(f"{path}: unsupported dtype {descr}")
        if fortran:
            raise NpyFormatError(f"{path}: Fortran-ordered arrays are not supported")
        count = int(np.prod(shape, dtype=np.int64))
        payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise NpyFormatError(f"{path}: truncated payload, expected {count * dtype.itemsize} bytes, "
                             f"got {len(payload)}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if arr.dtype == np.uint8 and not raw:
        return arr.astype(np.float32) / np.float32(255)
    return arr


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def write_pgm(path: str | os.PathLike, img) -> None:
    """Binary 8-bit PGM of an (h, w) image with values in [0, 1]."""
    q = to_uint8(img)
    if q.ndim != 2:
        raise ValueError(f"write_pgm expects an (h, w) image, got {q.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{q.shape[1]} {q.shape[0]}\n255\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Inverse of :func:`write_pgm`; returns float32 in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4 and pos < len(data):
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if len(tokens) < 4 or tokens[0] != b"P5" or tokens[3] != b"255":
        raise NpyFormatError(f"{path}: not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    pix = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    if pix.size != w * h:
        raise NpyFormatError(f"{path}: truncated PGM payload")
    return pix.reshape(h, w).astype(np.float32) / np.float32(255)
