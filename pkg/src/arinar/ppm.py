"""Binary PPM (P6) output, 8-bit, no dependencies."""
from __future__ import annotations

import numpy as np


def to_bytes(image: np.ndarray) -> np.ndarray:
    """``[H, W, C]`` floats in [0, 1] (C = 1 or 3) to ``[H, W, 3]`` uint8."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.shape[-1] == 1:
        image = np.repeat(image, 3, axis=-1)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError(f"expected [H, W, 1|3] image, got {image.shape}")
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    pixels = to_bytes(image)
    H, W, _ = pixels.shape
    return f"P6\n{W} {H}\n255\n".encode("ascii") + pixels.tobytes()


def write_ppm(path, image: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    """Read back a file written by :func:`write_ppm` as ``[H, W, 3]`` uint8."""
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError(f"{path}: not a P6/255 PPM")
    W, H = (int(v) for v in parts[1].split())
    body = np.frombuffer(parts[3], dtype=np.uint8)
    if body.size != H * W * 3:
        raise ValueError(f"{path}: expected {H * W * 3} pixel bytes, got {body.size}")
    return body.reshape(H, W, 3)


def tile(images, cols: int | None = None, pad: int = 1) -> np.ndarray:
    """Arrange equally sized ``[H, W, C]`` images in a grid with a black gutter."""
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ValueError("nothing to tile")
    H, W, C = images[0].shape
    n = len(images)
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.zeros((rows * (H + pad) + pad, cols * (W + pad) + pad, C))
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        y, x = pad + r * (H + pad), pad + c * (W + pad)
        grid[y:y + H, x:x + W] = im
    return grid
