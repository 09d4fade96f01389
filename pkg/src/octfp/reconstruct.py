"""Subsurface fingerprint reconstruction.

Bonafide instances are turned into three 2D prints, one per skin layer:
each B-scan is wavelet-denoised, flattened so the skin surface sits on a
fixed row, and the intensities inside each labeled layer are summed down
every A-line. Row j of a layer image is the projection of B-scan j.

Projection arithmetic runs on a fixed dyadic grid (1/65536): intensities
are quantized once, summed as integers, and divided by a power of two at
the end, so the per-layer sums of a partitioned mask add up to the
foreground projection without any floating-point discrepancy.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .core import AnnotationMask, BScan, LayerImage, StraightenedBScan
from .wavelet import wavedec2, waverec2

DENOISE_LEVELS = 2
SURFACE_WINDOW = 15
ANCHOR_ROW = 8
LAYER_CLASS = {"s": 1, "v": 2, "d": 3}
_QUANT = 65536  # dyadic, so quantized sums divide back exactly


def denoise(b: BScan, levels: int = DENOISE_LEVELS) -> BScan:
    """Soft-threshold wavelet shrinkage with the universal threshold.

    Noise scale comes from the finest diagonal subband (median absolute
    coefficient over 0.6745); a clean image gives a near-zero threshold and
    passes through nearly unchanged."""
    ll, detail_stack, shapes = wavedec2(b.pixels, levels)
    hh_fine = detail_stack[-1][2]
    sigma = float(np.median(np.abs(hh_fine))) / 0.6745
    threshold = sigma * math.sqrt(2.0 * math.log(b.pixels.size))
    shrunk = [tuple(_soft(d, threshold) for d in details)
              for details in detail_stack]
    rec = waverec2(ll, shrunk, shapes)
    return BScan(np.clip(rec, 0.0, 1.0), b.slice_index)


def _soft(coeffs: np.ndarray, threshold: float) -> np.ndarray:
    return np.sign(coeffs) * np.maximum(np.abs(coeffs) - threshold, 0.0)


def surface_rows(mask: AnnotationMask) -> np.ndarray:
    """First non-background row per column; NaN where a column is empty."""
    fg = mask.labels != 0
    first = np.argmax(fg, axis=0).astype(np.float64)
    first[~fg.any(axis=0)] = np.nan
    return first


def _smooth_profile(profile: np.ndarray, window: int) -> np.ndarray:
    """Moving average with the window clipped at the image edges."""
    half = window // 2
    n = profile.size
    cum = np.concatenate([[0.0], np.cumsum(profile)])
    lo = np.maximum(np.arange(n) - half, 0)
    hi = np.minimum(np.arange(n) + half + 1, n)
    return (cum[hi] - cum[lo]) / (hi - lo)


def straighten(b: BScan, mask: AnnotationMask, window: int = SURFACE_WINDOW,
               anchor: int = ANCHOR_ROW,
               out_hw: Optional[tuple] = None) -> StraightenedBScan:
    """Flatten the skin surface to a fixed row by integer column shifts.

    The per-column surface (first foreground mask row) is interpolated
    across empty columns, smoothed laterally, and each column is shifted
    so the smoothed surface lands on the anchor row. Vacated pixels become
    zero intensity / background. Image and mask move together."""
    if mask.shape != b.shape:
        raise ValueError(f"mask {mask.shape} does not match B-scan {b.shape}")
    raw = surface_rows(mask)
    valid = ~np.isnan(raw)
    if not valid.any():
        raise ValueError("cannot straighten an entirely background B-scan")
    cols = np.arange(b.shape[1])
    filled = np.interp(cols, cols[valid], raw[valid])
    smooth = _smooth_profile(filled, window)
    shifts = np.rint(smooth).astype(np.int64) - anchor

    h, w = b.shape
    rows = np.arange(h)[:, None] + shifts[None, :]
    inside = (rows >= 0) & (rows < h)
    src = np.clip(rows, 0, h - 1)
    out_px = np.where(inside, b.pixels[src, cols[None, :]], 0.0)
    out_lb = np.where(inside, mask.labels[src, cols[None, :]], 0).astype(np.uint8)

    if out_hw is not None:
        out_px = _fit(out_px, out_hw, 0.0)
        out_lb = _fit(out_lb, out_hw, 0)
    shifted_mask = AnnotationMask(out_lb)
    prof = surface_rows(shifted_mask)
    # -1 marks columns whose foreground was shifted entirely out
    return StraightenedBScan(out_px, shifted_mask,
                             np.where(np.isnan(prof), -1, prof))


def _fit(a: np.ndarray, out_hw: tuple, fill) -> np.ndarray:
    """Crop or pad at the bottom/right to the requested size."""
    h, w = out_hw
    out = np.full((h, w), fill, dtype=a.dtype)
    ch, cw = min(h, a.shape[0]), min(w, a.shape[1])
    out[:ch, :cw] = a[:ch, :cw]
    return out


def mask_indicator(mask, h: str) -> np.ndarray:
    """Binary membership grid of one layer (h in s/v/d)."""
    if h not in LAYER_CLASS:
        raise ValueError(f"layer must be one of {sorted(LAYER_CLASS)}, got {h!r}")
    labels = mask.labels if isinstance(mask, AnnotationMask) else np.asarray(mask)
    return (labels == LAYER_CLASS[h]).astype(np.uint8)


def _quantized(pixels: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(pixels, dtype=np.float64) * _QUANT).astype(np.int64)


def _project(slices: Sequence[StraightenedBScan], member) -> np.ndarray:
    if not slices:
        raise ValueError("no slices to project")
    shape = slices[0].pixels.shape
    rows = []
    for s in slices:
        if s.pixels.shape != shape:
            raise ValueError(
                f"slices disagree on shape: {s.pixels.shape} vs {shape}")
        q = _quantized(s.pixels) * member(s.mask)
        rows.append(q.sum(axis=0))
    return np.stack(rows).astype(np.float64) / _QUANT


def project_layer(slices: Sequence[StraightenedBScan], h: str) -> LayerImage:
    """Per column, sum the intensities whose label belongs to layer h.
    Row j comes from slice j."""
    if h not in LAYER_CLASS:
        raise ValueError(f"layer must be one of {sorted(LAYER_CLASS)}, got {h!r}")
    return LayerImage(_project(slices, lambda m: mask_indicator(m, h)), h)


def project_foreground(slices: Sequence[StraightenedBScan]) -> np.ndarray:
    """Projection of every non-background pixel; the three layer images
    sum to this exactly."""
    return _project(slices, lambda m: (m.labels != 0).astype(np.uint8))


def reconstruct_instance(instance, masks: Sequence[AnnotationMask],
                         denoise_first: bool = True,
                         window: int = SURFACE_WINDOW,
                         anchor: int = ANCHOR_ROW) -> dict:
    """Full pipeline for one instance: denoise, straighten, project all
    three layers. masks align with instance.bscans."""
    if len(masks) != len(instance):
        raise ValueError(
            f"{len(masks)} masks for {len(instance)} B-scans")
    slices = []
    for b, m in zip(instance.bscans, masks):
        if denoise_first:
            b = denoise(b)
        slices.append(straighten(b, m, window=window, anchor=anchor))
    return {h: project_layer(slices, h) for h in LAYER_CLASS}


def to_grayscale(layer) -> np.ndarray:
    """Per-image min-max contrast normalization to 8 bits."""
    r = layer.intensities
    span = r.max() - r.min()
    if span == 0:
        return np.zeros(r.shape, dtype=np.uint8)
    return np.rint((r - r.min()) / span * 255.0).astype(np.uint8)


def export_layers(layers: dict, out_dir: Path) -> list:
    """R_<h>.png (8-bit grayscale) and R_<h>.raw.npy (raw sums) per layer."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for h in sorted(layers):
        img = layers[h]
        png = out_dir / f"R_{h}.png"
        Image.fromarray(to_grayscale(img), mode="L").save(png)
        raw = out_dir / f"R_{h}.raw.npy"
        np.save(raw, img.intensities)
        written.extend([png, raw])
    return written
