"""Tiny image-grid writer so the demos can be inspected without extra packages."""
from pathlib import Path

import numpy as np


def save_grid(path, rows, scale: int = 3) -> Path:
    """Write rows of ``(N, 3, H, W)`` images in ``[0, 1]`` as one binary PPM file."""
    strips = [np.concatenate(list(r), axis=2) for r in rows]
    img = np.concatenate(strips, axis=1).transpose(1, 2, 0)
    img = np.kron(img, np.ones((scale, scale, 1)))
    pix = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(f"P6 {pix.shape[1]} {pix.shape[0]} 255\n".encode())
        fh.write(pix.tobytes())
    return path
