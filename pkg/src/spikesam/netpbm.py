"""Reader/writer for binary PGM (P5) and PPM (P6) images, 8-bit only."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _tokens(buf: bytes, pos: int, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out, comments = [], []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise NetpbmError("truncated header")
        if buf[pos:pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            end = n if end < 0 else end
            comments.append(buf[pos + 1:end].decode("utf-8", "replace").strip())
            pos = end + 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        out.append(buf[start:pos])
    return out, pos, comments


def read_netpbm(path: str | os.PathLike) -> tuple[np.ndarray, list[str]]:
    """Return ``(pixels [C,H,W] float64 in [0,255], header comments)``."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"{path}: unsupported magic {magic!r} (need P5 or P6)")
    (w, h, maxval), pos, comments = _tokens(buf, 2, 3)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise NetpbmError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    channels = 1 if magic == b"P5" else 3
    size = w * h * channels
    raw = np.frombuffer(buf, dtype=np.uint8, count=size, offset=pos) if len(buf) - pos >= size else None
    if raw is None:
        raise NetpbmError(f"{path}: expected {size} pixel bytes, found {len(buf) - pos}")
    img = raw.reshape(h, w, channels).transpose(2, 0, 1).astype(np.float64)
    return img, comments


def encode_netpbm(pixels: np.ndarray, comments: list[str] | tuple[str, ...] = ()) -> bytes:
    """Serialize [C,H,W] (C in {1,3}) or [H,W] uint8-range pixels."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise NetpbmError(f"need [1|3, H, W] pixels, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 255:
        raise NetpbmError("pixel values must lie in [0, 255]")
    if any("\n" in line or "\r" in line for line in comments):
        raise NetpbmError("comment lines must not contain line breaks")
    c, h, w = arr.shape
    head = [b"P5" if c == 1 else b"P6"]
    head += [b"# " + line.encode() for line in comments]
    head.append(f"{w} {h}".encode())
    head.append(b"255")
    body = np.ascontiguousarray(np.rint(arr).astype(np.uint8).transpose(1, 2, 0)).tobytes()
    return b"\n".join(head) + b"\n" + body


def write_netpbm(path: str | os.PathLike, pixels: np.ndarray, comments=()) -> Path:
    """Atomic write (temp file + rename)."""
    path = Path(path)
    data = encode_netpbm(pixels, comments)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path
