"""Binary PPM/PGM map files, dataset images, and exact area resampling.

RGB maps are stored as 8-bit binary PPM (P6).  Scalar maps (opacity,
disparity, depth) are stored as 16-bit big-endian PGM (P5) together with a
JSON sidecar recording the scale factor that maps stored integers back to
physical values.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    """A PPM/PGM file is malformed."""


def to_u8(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to rounded uint8; already-uint8 input passes through."""
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


def to_float(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def write_ppm(path, rgb) -> None:
    """8-bit binary PPM from (H, W, 3) uint8 or [0, 1] float."""
    data = to_u8(rgb)
    if data.ndim != 3 or data.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def _read_pnm_header(fh, magic: bytes):
    if fh.read(2) != magic:
        raise ImageFormatError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        tok = b""
        ch = fh.read(1)
        while ch.isspace():
            ch = fh.read(1)
        if ch == b"#":
            fh.readline()
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = fh.read(1)
        if not tok.isdigit():
            raise ImageFormatError(f"bad header token {tok!r}")
        fields.append(int(tok))
    return fields  # width, height, maxval


def read_ppm(path) -> np.ndarray:
    """Reads a binary PPM into (H, W, 3) uint8."""
    with open(path, "rb") as fh:
        w, h, maxval = _read_pnm_header(fh, b"P6")
        if maxval != 255:
            raise ImageFormatError(f"only 8-bit PPM supported, maxval={maxval}")
        raw = fh.read(w * h * 3)
    if len(raw) != w * h * 3:
        raise ImageFormatError("truncated PPM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def write_pgm16(path, values, kind: str = "map", scale: float | None = None) -> None:
    """16-bit big-endian PGM plus a `<path>.json` sidecar with the scale.

    stored = round(value * scale); scale defaults to using the full 16-bit
    range for the map's maximum (65535 when the map is all zero).
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.ndim != 2:
        raise ValueError(f"expected (H, W), got {vals.shape}")
    if scale is None:
        peak = float(vals.max())
        scale = 65535.0 / peak if peak > 0 else 65535.0
    data = np.clip(np.rint(vals * scale), 0, 65535).astype(">u2")
    h, w = vals.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())
    sidecar = {"kind": kind, "scale": scale}
    with open(str(path) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True)
        fh.write("\n")


def read_pgm16(path):
    """Reads a 16-bit PGM and its sidecar; returns (float map, sidecar dict)."""
    with open(path, "rb") as fh:
        w, h, maxval = _read_pnm_header(fh, b"P5")
        if maxval != 65535:
            raise ImageFormatError(f"expected 16-bit PGM, maxval={maxval}")
        raw = fh.read(w * h * 2)
    if len(raw) != w * h * 2:
        raise ImageFormatError("truncated PGM payload")
    stored = np.frombuffer(raw, dtype=">u2").reshape(h, w).astype(np.float64)
    sidecar_path = Path(str(path) + ".json")
    sidecar = {"kind": "map", "scale": 1.0}
    if sidecar_path.exists():
        with open(sidecar_path, "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
    return stored / float(sidecar.get("scale", 1.0)), sidecar


def load_image_rgb(path) -> np.ndarray:
    """Loads an RGB image as (H, W, 3) float in [0, 1]; PPM native, PNG via Pillow."""
    p = Path(path)
    if p.suffix.lower() == ".ppm":
        return to_float(read_ppm(p))
    from PIL import Image

    with Image.open(p) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return to_float(arr)


def _overlap_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic matrix averaging n_in source cells into n_out cells.

    Entry (i, j) is the fractional overlap of output cell i (width n_in/n_out
    in source units) with source cell j, normalized to sum to 1 per row; this
    realizes exact area-weighted box downsampling for any size ratio.
    """
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        lo = i * ratio
        hi = (i + 1) * ratio
        j0 = int(np.floor(lo))
        j1 = min(int(np.ceil(hi)), n_in)
        for j in range(j0, j1):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    return m / ratio


def area_resample(img: np.ndarray, out_width: int, out_height: int) -> np.ndarray:
    """Exact area-average resample of (H, W[, C]) data to a new size.

    uint8 input comes back as uint8 (rounded); float input stays float.
    """
    arr = np.asarray(img)
    was_u8 = arr.dtype == np.uint8
    data = arr.astype(np.float64)
    h, w = data.shape[:2]
    rows = _overlap_matrix(out_height, h)
    cols = _overlap_matrix(out_width, w)
    if data.ndim == 2:
        out = rows @ data @ cols.T
    else:
        out = np.einsum("ih,hwc,jw->ijc", rows, data, cols)
    if was_u8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out
