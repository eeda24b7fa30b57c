"""Binary PPM (P6) / PGM (P5) reading and writing, plus heatmap rendering."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    out: list[bytes] = []
    pos = 0
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        out.append(data[start:pos])
    return out, pos + 1  # a single whitespace byte ends the header


def read_pnm(path) -> np.ndarray:
    """Return uint8 pixels as (H, W, 3) for P6 or (H, W) for P5."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    body = data[pos : pos + need]
    if len(body) != need:
        raise ImageFormatError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_pnm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ImageFormatError(f"expected uint8 pixels, got {pixels.dtype}")
    if pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    elif pixels.ndim == 2:
        magic = b"P5"
    else:
        raise ImageFormatError(f"cannot write array of shape {pixels.shape}")
    h, w = pixels.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    _atomic_write(path, header + np.ascontiguousarray(pixels).tobytes())


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """Read a P6 file as a float32 (3, H, W) array in [0, 1]."""
    px = read_pnm(path)
    if px.ndim != 3:
        raise ImageFormatError(f"{path}: expected a colour (P6) image")
    return (px.transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)


def write_image(path, chw: np.ndarray) -> None:
    write_pnm(path, to_uint8(np.asarray(chw).transpose(1, 2, 0)))


def _jet_table() -> np.ndarray:
    # entry i, t = i/255: r = clip(1.5 - |4t - 3|), g = clip(1.5 - |4t - 2|), b = clip(1.5 - |4t - 1|)
    t = np.arange(256) / 255.0
    rgb = np.stack(
        [np.clip(1.5 - np.abs(4 * t - c), 0.0, 1.0) for c in (3.0, 2.0, 1.0)],
        axis=1,
    )
    return to_uint8(rgb)


COLORMAP = _jet_table()
"""256-entry blue-to-red table; index 0 is dark blue (0, 0, 128), index 255 dark red (128, 0, 0)."""


def _display_levels(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    top = values.max() if values.size else 0.0
    scaled = values / top if top > 0 else np.zeros_like(values)
    return to_uint8(scaled)


def render_gray(path, values: np.ndarray) -> None:
    """Max-normalized 8-bit grayscale PGM (display only)."""
    write_pnm(path, _display_levels(values))


def render_color(path, values: np.ndarray) -> None:
    """Max-normalized heatmap through COLORMAP, written as PPM (display only)."""
    write_pnm(path, COLORMAP[_display_levels(values)])


def render_heatmap(path, values: np.ndarray) -> None:
    if str(path).lower().endswith(".pgm"):
        render_gray(path, values)
    else:
        render_color(path, values)
