"""Binary PGM/PPM reading and writing, plus the mask/raster JSON sidecar."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


class PNMError(ValueError):
    """Malformed PGM/PPM data; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _tokens(buf: bytes, count: int, pos: int) -> tuple[list[int], int]:
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PNMError("expected an unsigned integer in header", start)
        out.append(int(buf[start:pos]))
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise PNMError("header must end with a single whitespace byte", pos)
    return out, pos + 1


def decode_pnm(buf: bytes) -> np.ndarray:
    """Decode P5 (gray) or P6 (RGB) with maxval 255 into a uint8 array."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PNMError(f"bad magic {magic!r}, expected b'P5' or b'P6'", 0)
    (w, h, maxval), pos = _tokens(buf, 3, 2)
    if maxval != 255:
        raise PNMError(f"maxval {maxval} unsupported, only 255", pos - 1 - len(str(maxval)))
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    body = buf[pos:pos + need]
    if len(body) != need:
        raise PNMError(f"truncated pixel data: {len(body)} of {need} bytes", pos + len(body))
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {img.shape}")
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    if img.min(initial=0) < 0 or img.max(initial=0) > 255:
        raise ValueError("PGM intensities must lie in [0, 255]")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def read_pgm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def write_pgm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(img))


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def write_sidecar(path, origin: tuple[float, float], resolution: float) -> None:
    doc = {"origin_um": [float(origin[0]), float(origin[1])], "resolution_um_per_px": float(resolution)}
    sidecar_path(path).write_text(json.dumps(doc))


def read_sidecar(path) -> tuple[tuple[float, float], float]:
    doc = json.loads(sidecar_path(path).read_text())
    ox, oy = doc["origin_um"]
    return (float(ox), float(oy)), float(doc["resolution_um_per_px"])
