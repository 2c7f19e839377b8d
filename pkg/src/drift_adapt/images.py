"""Binary PGM label masks and PPM palette images."""
from __future__ import annotations

from pathlib import Path

import numpy as np

# Agriculture, rangeland, forest, water, barren, urban.
PALETTE = np.array([
    [255, 255, 0],
    [255, 0, 255],
    [0, 255, 0],
    [0, 0, 255],
    [255, 255, 255],
    [0, 255, 255],
], dtype=np.uint8)


def _read_netpbm(path, magic: bytes):
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit files supported, maxval {maxval}")
    return raw[pos + 1:], h, w


def write_pgm(mask, path) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.min() < 0 or mask.max() > 255:
        raise ValueError("PGM mask must be 2-D with labels in [0, 255]")
    h, w = mask.shape
    try:
        Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + mask.astype(np.uint8).tobytes())
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e


def read_pgm(path) -> np.ndarray:
    body, h, w = _read_netpbm(path, b"P5")
    if len(body) != h * w:
        raise ValueError(f"{path}: expected {h * w} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def write_mask_image(pred_mask, path, palette=PALETTE) -> None:
    """Colour-code a label mask as a binary PPM (P6)."""
    mask = np.asarray(pred_mask)
    palette = np.asarray(palette, dtype=np.uint8)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() >= len(palette)):
        raise ValueError(f"mask labels must be < palette size {len(palette)}")
    h, w = mask.shape
    rgb = palette[mask.astype(np.int64)]
    try:
        Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())
    except OSError as e:
        raise OSError(f"cannot write mask image {path}: {e}") from e


def read_ppm(path) -> np.ndarray:
    body, h, w = _read_netpbm(path, b"P6")
    if len(body) != 3 * h * w:
        raise ValueError(f"{path}: expected {3 * h * w} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def read_mask_image(path, palette=PALETTE) -> np.ndarray:
    """Invert :func:`write_mask_image` under the palette."""
    rgb = read_ppm(path)
    palette = np.asarray(palette, dtype=np.uint8)
    match = (rgb[:, :, None, :] == palette[None, None]).all(axis=-1)
    if not match.any(axis=-1).all():
        raise ValueError(f"{path}: contains colours outside the palette")
    return match.argmax(axis=-1)
