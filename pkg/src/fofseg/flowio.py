"""Bit-exact readers and writers for flow fields, masks and color frames.

Formats: Middlebury .flo for flow, binary PGM (P5) for masks and
probability maps, binary PPM (P6) for color frames, and a raw float32
grid dump for lossless probability export. Every format has a bytes-level
codec (decode_*/encode_*) plus path wrappers. Functions either return
exactly the stored values or raise; nothing is clamped or rescaled on
the way in or out.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

FLO_MAGIC = 202021.25  # "PIEH" interpreted as little-endian float32
MAX_DIM = 100_000


class FlowIOError(Exception):
    """Base error for all file format failures in this module."""


class BadMagicError(FlowIOError):
    pass


class TruncatedError(FlowIOError):
    pass


class NonFiniteError(FlowIOError):
    pass


class DimensionOverflowError(FlowIOError):
    pass


class UnsupportedFormatError(FlowIOError):
    pass


@dataclass
class FlowField:
    """Per-pixel 2-D flow vectors, u horizontal and v vertical (pixels/frame)."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.ndim != 2 or self.u.shape != self.v.shape:
            raise ValueError("u and v must be 2-D arrays of identical shape")
        if self.width < 1 or self.height < 1:
            raise ValueError("flow field must be at least 1x1")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]


def decode_flo(data: bytes, name: str = "<flo>") -> FlowField:
    """Decode a Middlebury .flo buffer.

    Layout: float32 magic 202021.25, int32 width, int32 height, then
    row-major interleaved (u, v) float32 pairs, all little-endian.

    Raises BadMagicError, DimensionOverflowError, TruncatedError or
    NonFiniteError on malformed input.
    """
    if len(data) < 12:
        raise TruncatedError(f"{name}: buffer shorter than .flo header")
    (magic,) = struct.unpack("<f", data[:4])
    if magic != FLO_MAGIC:
        raise BadMagicError(f"{name}: bad magic {magic!r}, expected {FLO_MAGIC}")
    width, height = struct.unpack("<ii", data[4:12])
    if width <= 0 or height <= 0 or width > MAX_DIM or height > MAX_DIM:
        raise DimensionOverflowError(f"{name}: implausible dimensions {width}x{height}")
    need = width * height * 2
    payload = np.frombuffer(data, dtype="<f4", offset=12)
    if payload.size < need:
        raise TruncatedError(f"{name}: expected {need} floats, found {payload.size}")
    payload = payload[:need].reshape(height, width, 2)
    if not np.isfinite(payload).all():
        raise NonFiniteError(f"{name}: NaN or Inf in flow payload")
    return FlowField(u=payload[:, :, 0].copy(), v=payload[:, :, 1].copy())


def encode_flo(field: FlowField) -> bytes:
    """Serialize so that decode_flo reproduces the field bit-exactly.

    Refuses non-finite values (NonFiniteError).
    """
    u = np.asarray(field.u, dtype="<f4")
    v = np.asarray(field.v, dtype="<f4")
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise NonFiniteError("refusing to write NaN/Inf flow values")
    h, w = u.shape
    interleaved = np.empty((h, w, 2), dtype="<f4")
    interleaved[:, :, 0] = u
    interleaved[:, :, 1] = v
    return struct.pack("<f", FLO_MAGIC) + struct.pack("<ii", w, h) + interleaved.tobytes()


def read_flo(path) -> FlowField:
    with open(path, "rb") as f:
        return decode_flo(f.read(), name=str(path))


def write_flo(field: FlowField, path) -> None:
    data = encode_flo(field)
    with open(path, "wb") as f:
        f.write(data)


def _parse_netpbm_header(data: bytes, name) -> tuple[bytes, int, int, int]:
    """Return (magic, width, height, payload_offset)."""
    if len(data) < 2:
        raise TruncatedError(f"{name}: empty or near-empty buffer")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormatError(f"{name}: unsupported magic {magic!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise TruncatedError(f"{name}: header ended early")
        c = data[pos : pos + 1]
        if c == b"#":
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise TruncatedError(f"{name}: unterminated comment")
            pos = nl + 1
        elif c.isspace():
            pos += 1
        elif c.isdigit():
            end = pos
            while end < len(data) and data[end : end + 1].isdigit():
                end += 1
            fields.append(int(data[pos:end]))
            pos = end
        else:
            raise UnsupportedFormatError(f"{name}: junk byte {c!r} in header")
    # exactly one whitespace byte separates maxval from the payload
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise TruncatedError(f"{name}: missing payload separator")
    pos += 1
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise UnsupportedFormatError(f"{name}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormatError(f"{name}: only maxval 255 supported, got {maxval}")
    return magic, width, height, pos


def decode_image(data: bytes, name: str = "<ppm>") -> np.ndarray:
    """Decode a binary PPM (P6) color frame as a (H, W, 3) uint8 array."""
    magic, w, h, off = _parse_netpbm_header(data, name)
    if magic != b"P6":
        raise UnsupportedFormatError(f"{name}: expected P6, got {magic!r}")
    need = w * h * 3
    payload = np.frombuffer(data, dtype=np.uint8, offset=off)
    if payload.size < need:
        raise TruncatedError(f"{name}: expected {need} bytes, found {payload.size}")
    return payload[:need].reshape(h, w, 3).copy()


def encode_image(frame: np.ndarray) -> bytes:
    """Serialize a (H, W, 3) uint8 array as binary PPM (P6)."""
    frame = np.asarray(frame, dtype=np.uint8)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError("color frame must have shape (H, W, 3)")
    h, w = frame.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + frame.tobytes()


def read_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_image(f.read(), name=str(path))


def write_image(frame: np.ndarray, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_image(frame))


def decode_mask(data: bytes, name: str = "<pgm>") -> np.ndarray:
    """Decode a binary PGM (P5) as a (H, W) uint8 array of raw label bytes."""
    magic, w, h, off = _parse_netpbm_header(data, name)
    if magic != b"P5":
        raise UnsupportedFormatError(f"{name}: expected P5, got {magic!r}")
    need = w * h
    payload = np.frombuffer(data, dtype=np.uint8, offset=off)
    if payload.size < need:
        raise TruncatedError(f"{name}: expected {need} bytes, found {payload.size}")
    return payload[:need].reshape(h, w).copy()


def encode_mask(mask: np.ndarray) -> bytes:
    """Serialize a (H, W) grid of small non-negative labels as binary PGM (P5)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    if mask.min() < 0 or mask.max() > 255:
        raise ValueError("mask labels must fit in a byte")
    h, w = mask.shape
    return b"P5\n%d %d\n255\n" % (w, h) + mask.astype(np.uint8).tobytes()


def read_mask(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_mask(f.read(), name=str(path))


def write_mask(mask: np.ndarray, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_mask(mask))


def encode_probability_map(probs: np.ndarray) -> bytes:
    """Quantize a [0, 1] grid to 8 bits (round half up) and serialize as P5."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError("probability map must be 2-D")
    if not np.isfinite(probs).all():
        raise NonFiniteError("NaN/Inf in probability map")
    if probs.min() < 0.0 or probs.max() > 1.0:
        raise ValueError("probabilities must lie in [0, 1]")
    quantized = np.floor(probs * 255.0 + 0.5).astype(np.uint8)
    return encode_mask(quantized)


def write_probability_map(probs: np.ndarray, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_probability_map(probs))


def encode_float_grid(grid: np.ndarray) -> bytes:
    """Lossless float32 dump: ASCII "width,height\\n" then row-major LE floats."""
    grid = np.asarray(grid, dtype="<f4")
    if grid.ndim != 2:
        raise ValueError("float grid must be 2-D")
    h, w = grid.shape
    return b"%d,%d\n" % (w, h) + grid.tobytes()


def decode_float_grid(data: bytes, name: str = "<f32>") -> np.ndarray:
    nl = data.find(b"\n")
    if nl < 0:
        raise TruncatedError(f"{name}: missing header line")
    try:
        w_s, h_s = data[:nl].split(b",")
        w, h = int(w_s), int(h_s)
    except ValueError as exc:
        raise UnsupportedFormatError(f"{name}: bad float grid header") from exc
    payload = np.frombuffer(data, dtype="<f4", offset=nl + 1)
    if payload.size < w * h:
        raise TruncatedError(f"{name}: expected {w * h} floats, found {payload.size}")
    return payload[: w * h].reshape(h, w).copy()


def write_float_grid(grid: np.ndarray, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_float_grid(grid))


def read_float_grid(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_float_grid(f.read(), name=str(path))
