"""Structural similarity and the results table.

SSIM follows the usual definition: an 11x11 Gaussian window (sigma 1.5)
slides over the image without padding, local means, variances and the
covariance feed the luminance/contrast/structure product, the map is
averaged, and per-channel values are averaged.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

RESULT_COLUMNS = ("run_id", "scheme", "attack", "ssim", "dataset", "accuracy")
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    luminance_only: bool = False

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' filtering over the last two axes
    rows = sliding_window_view(img, g.size, axis=-1) @ g
    return sliding_window_view(rows, g.size, axis=-2) @ g


def _as_array(img) -> np.ndarray:
    v = getattr(img, "values", img)
    if hasattr(v, "detach"):
        v = v.detach().cpu().numpy()
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 2:
        v = v[None]
    if v.ndim != 3:
        raise ValueError(f"expected C x H x W image, got shape {v.shape}")
    return v


def ssim_map(a, b, p: SsimParams = SsimParams()) -> np.ndarray:
    """Per-channel local SSIM values, shape ``(C, H - w + 1, W - w + 1)``."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if p.luminance_only and a.shape[0] == 3:
        a = np.tensordot(LUMA, a, axes=1)[None]
        b = np.tensordot(LUMA, b, axes=1)[None]
    if p.window > a.shape[1] or p.window > a.shape[2]:
        raise ValueError(f"window {p.window} larger than image {a.shape[1]}x{a.shape[2]}")
    g = gaussian_window(p.window, p.window_sigma)
    c1 = (p.k1 * p.dynamic_range) ** 2
    c2 = (p.k2 * p.dynamic_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, p: SsimParams = SsimParams()) -> float:
    """Mean SSIM of two images in ``[0, dynamic_range]``, averaged over channels."""
    m = ssim_map(a, b, p)
    return float(np.mean([c.mean() for c in m]))


def ssim_batch(a: np.ndarray, b: np.ndarray, p: SsimParams = SsimParams()) -> np.ndarray:
    """Per-image SSIM for two ``(N, C, H, W)`` batches."""
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    return np.array([ssim(x, y, p) for x, y in zip(a, b)])


def mean_ssim(pairs: Iterable, p: SsimParams = SsimParams()) -> float:
    values = [ssim(a, b, p) for a, b in pairs]
    if not values:
        raise ValueError("mean_ssim needs at least one pair")
    return math.fsum(values) / len(values)


# --- results table -------------------------------------------------------------

def read_report(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return list(reader)


def _fmt(v) -> str:
    if v is None:
        return "N/A"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report(rows: Sequence[dict], path) -> list[str]:
    """Append result rows to a CSV table; returns the run ids actually written.

    Missing metrics are written as ``N/A``. A run id already present in the
    file (or earlier in ``rows``) gets a ``-2``, ``-3``, ... suffix.
    """
    path = Path(path)
    existing = read_report(path) if path.exists() else []
    taken = {r["run_id"] for r in existing}
    written = []
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(RESULT_COLUMNS)
        for row in rows:
            base = str(row.get("run_id", "run"))
            rid, k = base, 2
            while rid in taken:
                rid, k = f"{base}-{k}", k + 1
            taken.add(rid)
            written.append(rid)
            w.writerow([rid] + [_fmt(row.get(c)) for c in RESULT_COLUMNS[1:]])
    return written
