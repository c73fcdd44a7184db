"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only."""

from __future__ import annotations

import numpy as np

from .errors import FormatError

_WHITESPACE = b" \t\r\n\x0b\x0c"


def _next_token(data: bytes, pos: int, path) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < n and data[pos : pos + 1] != b"\n":
                pos += 1
        elif ch in _WHITESPACE:
            pos += 1
        else:
            break
    if pos >= n:
        raise FormatError(f"{path}: header ended unexpectedly")
    start = pos
    while pos < n and data[pos : pos + 1] not in _WHITESPACE and data[pos : pos + 1] != b"#":
        pos += 1
    return data[start:pos], pos


def _read_netpbm(path, magic: bytes) -> tuple[np.ndarray, int, int]:
    with open(path, "rb") as fh:
        data = fh.read()
    token, pos = _next_token(data, 0, path)
    if token != magic:
        raise FormatError(f"{path}: wrong magic {token!r}, expected {magic!r}")
    fields = []
    for _ in range(3):
        token, pos = _next_token(data, pos, path)
        try:
            fields.append(int(token))
        except ValueError:
            raise FormatError(f"{path}: non-numeric header token {token!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}, only 8-bit (255) handled")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raw = data[pos : pos + need]
    if len(raw) < need:
        raise FormatError(f"{path}: pixel data short by {need - len(raw)} bytes")
    pixels = np.frombuffer(raw, dtype=np.uint8)
    return pixels, width, height


def load_image_ppm(path) -> np.ndarray:
    """Load a binary P6 file into a (1, 3, H, W) float32 tensor scaled to [0, 1]."""
    pixels, width, height = _read_netpbm(path, b"P6")
    rgb = pixels.reshape(height, width, 3).transpose(2, 0, 1)
    return (rgb.astype(np.float32) / 255.0)[None]


def save_image_ppm(image: np.ndarray, path) -> None:
    """Write a (1, 3, H, W) or (3, H, W) float tensor in [0, 1] as binary P6."""
    if image.ndim == 4:
        image = image[0]
    rgb = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = rgb.shape[1], rgb.shape[2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(rgb.transpose(1, 2, 0).tobytes())


def save_gray_pgm(gray: np.ndarray, path) -> None:
    """Write a (H, W) uint8 array as binary P5."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (gray.shape[1], gray.shape[0]))
        fh.write(gray.tobytes())


def _gray_step(classes: int) -> int:
    if classes < 2:
        raise FormatError(f"masks need >= 2 classes, got {classes}")
    return 255 // (classes - 1)


def save_mask_pgm(mask: np.ndarray, path, classes: int) -> None:
    """Write a class-index mask as P5 with indices spread over distinct gray levels."""
    step = _gray_step(classes)
    if mask.min() < 0 or mask.max() >= classes:
        raise FormatError(f"mask values outside [0, {classes})")
    save_gray_pgm(mask.astype(np.uint8) * step, path)


def load_mask_pgm(path, classes: int) -> np.ndarray:
    """Read a mask written by save_mask_pgm back to class indices."""
    step = _gray_step(classes)
    pixels, width, height = _read_netpbm(path, b"P5")
    indices = pixels.reshape(height, width) // step
    if indices.max() >= classes:
        raise FormatError(f"{path}: gray levels inconsistent with {classes} classes")
    return indices.astype(np.uint8)
