"""PPM (P6) image output; PNG alongside when Pillow is importable."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[3, H, W] in [-1, 1] -> [H, W, 3] uint8."""
    x = np.clip((np.asarray(img, np.float64) + 1.0) * 127.5, 0, 255)
    return np.rint(x).astype(np.uint8).transpose(1, 2, 0)


def encode_ppm(img: np.ndarray) -> bytes:
    px = to_uint8(img)
    h, w, _ = px.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    """Inverse of encode_ppm up to quantization: uint8 [H, W, 3]."""
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    return np.frombuffer(parts[4][: w * h * 3], np.uint8).reshape(h, w, 3)


def write_image(path, img: np.ndarray, png: bool = False) -> Path:
    path = Path(path)
    if path.suffix.lower() == ".png":
        png, path = True, path.with_suffix(".ppm")
    path.write_bytes(encode_ppm(img))
    if png:
        try:
            from PIL import Image
        except ImportError:
            return path
        Image.fromarray(to_uint8(img)).save(path.with_suffix(".png"))
    return path
