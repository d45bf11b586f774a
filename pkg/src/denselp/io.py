"""Binary and image formats: PPM/PNG images, unary tables, label-score files."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import FeatureField

UNARY_MAGIC = b"UNR1"
SCORES_MAGIC = b"LBS1"
MAX_PIXELS = 1 << 28


class FormatError(ValueError):
    pass


# --- images -----------------------------------------------------------------


def _ppm_tokens(data: bytes, count: int):
    """Read ``count`` header integers with their offsets; returns them and the body offset."""
    pos = 2
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"bad PPM header: expected an integer at byte offset {start}")
        out.append((int(data[start:pos]), start))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError(f"bad PPM header: expected whitespace at byte offset {pos}")
    return out, pos + 1


def parse_ppm(data: bytes) -> FeatureField:
    if data[:2] != b"P6":
        raise FormatError("bad PPM header: missing P6 magic at byte offset 0")
    tokens, body = _ppm_tokens(data, 3)
    (width, w_at), (height, h_at), (maxval, m_at) = tokens
    if width < 1:
        raise FormatError(f"bad PPM width {width} at byte offset {w_at}")
    if height < 1:
        raise FormatError(f"bad PPM height {height} at byte offset {h_at}")
    if maxval != 255:
        raise FormatError(f"only 8-bit PPM is supported; maxval {maxval} at byte offset {m_at}")
    if width * height > MAX_PIXELS:
        raise FormatError(f"image {width}x{height} exceeds {MAX_PIXELS} pixels")
    need = width * height * 3
    if len(data) - body < need:
        raise FormatError(
            f"truncated PPM: pixel data starts at byte offset {body}, "
            f"needs {need} bytes, found {len(data) - body}"
        )
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=body)
    return FeatureField(width, height, pixels.reshape(-1, 3).astype(np.float64))


def load_image(path) -> FeatureField:
    """Read an 8-bit RGB PPM (P6) or PNG into a row-major feature field."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P6":
        return parse_ppm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
        height, width = rgb.shape[:2]
        if width * height > MAX_PIXELS:
            raise FormatError(f"image {width}x{height} exceeds {MAX_PIXELS} pixels")
        return FeatureField(width, height, rgb.reshape(-1, 3))
    raise FormatError(f"{path}: unsupported image format (expected P6 PPM or PNG)")


def encode_ppm(width: int, height: int, rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.size != width * height * 3:
        raise ValueError(f"{rgb.size} values for a {width}x{height} RGB image")
    pixels = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return b"P6\n%d %d\n255\n" % (width, height) + pixels.tobytes()


def save_ppm(path, width: int, height: int, rgb: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(width, height, rgb))


# --- label palette ----------------------------------------------------------


def palette(size: int = 256) -> np.ndarray:
    """Fixed colour table: label ``i`` gets the bit-interleaved colour used by VOC-style maps."""
    table = np.zeros((size, 3), dtype=np.uint8)
    for i in range(size):
        c = i
        r = g = b = 0
        for shift in range(7, -1, -1):
            r |= (c & 1) << shift
            g |= ((c >> 1) & 1) << shift
            b |= ((c >> 2) & 1) << shift
            c >>= 3
        table[i] = (r, g, b)
    return table


def render_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return palette()[labels % 256]


# --- float tables -----------------------------------------------------------


def _write_table(path, magic: bytes, matrix: np.ndarray, dtype: str) -> None:
    matrix = np.asarray(matrix)
    n, m = matrix.shape
    header = magic + struct.pack("<II", n, m)
    Path(path).write_bytes(header + np.ascontiguousarray(matrix, dtype=dtype).tobytes())


def _read_table(path, magic: bytes, dtype: str, what: str):
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != magic:
        raise FormatError(f"{path}: not a {what} file (magic {data[:4]!r}, expected {magic!r})")
    n, m = struct.unpack("<II", data[4:12])
    need = n * m * np.dtype(dtype).itemsize
    if len(data) - 12 != need:
        raise FormatError(f"{path}: header says {n}x{m} ({need} bytes) but body has {len(data) - 12}")
    return np.frombuffer(data, dtype=dtype, offset=12).reshape(n, m)


def save_unaries(path, unaries: np.ndarray) -> None:
    """``UNR1``, little-endian u32 n, u32 m, then n*m float32 values, pixel-major."""
    _write_table(path, UNARY_MAGIC, unaries, "<f4")


def load_unaries(path, n: int | None = None, m: int | None = None) -> np.ndarray:
    table = _read_table(path, UNARY_MAGIC, "<f4", "unary")
    if n is not None and table.shape[0] != n:
        raise FormatError(f"{path}: unaries cover {table.shape[0]} pixels but the image has {n}")
    if m is not None and table.shape[1] != m:
        raise FormatError(f"{path}: unaries have {table.shape[1]} labels, expected {m}")
    return table.astype(np.float64)


def save_scores(path, y: np.ndarray) -> None:
    """``LBS1``, little-endian u32 n, u32 m, then n*m float64 values, pixel-major."""
    _write_table(path, SCORES_MAGIC, y, "<f8")


def load_scores(path) -> np.ndarray:
    return _read_table(path, SCORES_MAGIC, "<f8", "label-score").copy()


def save_label_indices(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.size and labels.max() > 255:
        raise ValueError("label indices above 255 do not fit one byte")
    Path(path).write_bytes(labels.astype(np.uint8).tobytes())
