"""PNG (8-bit) and PFM (little-endian float) image IO."""

from __future__ import annotations

import numpy as np
from PIL import Image


def save_png(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) or (H, W) float image in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img, dtype=np.float64) / 255.0


def save_pfm(path, image: np.ndarray) -> None:
    """Write (H, W) or (H, W, 3) float data as little-endian PFM."""
    arr = np.asarray(image, dtype="<f4")
    if arr.ndim == 2:
        header = b"Pf\n"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF\n"
    else:
        raise ValueError(f"PFM supports (H, W) or (H, W, 3), got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f"{arr.shape[1]} {arr.shape[0]}\n".encode())
        fh.write(b"-1.0\n")  # negative scale marks little-endian
        fh.write(arr[::-1].tobytes())  # PFM rows run bottom to top


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * (3 if header == b"PF" else 1)
        data = np.frombuffer(fh.read(4 * count), dtype=dtype)
    shape = (h, w, 3) if header == b"PF" else (h, w)
    return np.ascontiguousarray(data.reshape(shape)[::-1]).astype(np.float64)
