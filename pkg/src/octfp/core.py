"""Shared data model for OCT fingertip volumes.

A fingertip capture is an ordered stack of 400 cross-sectional B-scans
(depth x lateral). Everything downstream (the segmentation network, attack
scoring, layer reconstruction) operates on the types defined here. All types
are frozen value objects; operations are pure functions.

On disk an instance is a directory of 16-bit grayscale PNGs named
``bscan_0001.png`` .. ``bscan_NNNN.png``, optional 8-bit ``mask_*.png``
companions (pixel values 0..3), and a ``meta.json`` with the identity fields.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

RAW_SHAPE = (500, 1500)
NET_SHAPE = (256, 768)

N_CLASSES = 4
CLASS_NAMES = ("background", "stratum_corneum", "viable_epidermis", "dermis")

BONAFIDE = "bonafide"
PRESENTATION_ATTACK = "presentation_attack"

# The on-disk intensity grid. B-scans are stored as 16-bit PNGs, so 1/65535
# is the native quantum; reconstruction sums are accumulated on this grid.
INTENSITY_LEVELS = 65535


@dataclass(frozen=True)
class BScan:
    """One cross-sectional slice, rows = depth, cols = lateral position."""

    pixels: np.ndarray
    slice_index: int = 1

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.ndim != 2:
            raise ValueError(f"B-scan pixels must be 2D, got shape {p.shape}")
        if not np.all(np.isfinite(p)):
            bad = int(np.count_nonzero(~np.isfinite(p)))
            raise ValueError(f"B-scan contains {bad} non-finite pixels")
        object.__setattr__(self, "pixels", p)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def is_normalized(self) -> bool:
        return bool(self.pixels.min() >= 0.0 and self.pixels.max() <= 1.0)


@dataclass(frozen=True)
class AnnotationMask:
    """Hard per-pixel labels: 0 background, 1 stratum corneum,
    2 viable epidermis, 3 dermis."""

    labels: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.labels)
        if m.ndim != 2:
            raise ValueError(f"mask must be 2D, got shape {m.shape}")
        if not np.issubdtype(m.dtype, np.integer):
            raise ValueError(f"mask labels must be integers, got {m.dtype}")
        vals = np.unique(m)
        if vals.size and (vals.min() < 0 or vals.max() >= N_CLASSES):
            raise ValueError(f"mask labels outside 0..{N_CLASSES - 1}: {vals}")
        object.__setattr__(self, "labels", m.astype(np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class OctInstance:
    """One fingertip: the full ordered B-scan stack plus identity fields."""

    bscans: tuple
    subject_id: str
    finger_id: str
    session: int = 1
    label: str = BONAFIDE

    def __post_init__(self):
        scans = tuple(self.bscans)
        if not scans:
            raise ValueError("instance needs at least one B-scan")
        shapes = {b.shape for b in scans}
        if len(shapes) != 1:
            raise ValueError(f"B-scans disagree on dimensions: {sorted(shapes)}")
        if self.label not in (BONAFIDE, PRESENTATION_ATTACK):
            raise ValueError(f"unknown label {self.label!r}")
        object.__setattr__(self, "bscans", scans)

    def __len__(self) -> int:
        return len(self.bscans)

    @property
    def instance_id(self) -> str:
        return f"{self.subject_id}_{self.finger_id}_s{self.session}"


@dataclass(frozen=True)
class LatentCode:
    """Encoder bottleneck for one B-scan: 8x24x512 tensor (H x W x C) and,
    once pooled, its channelwise mean as a 512-vector."""

    tensor: np.ndarray
    pooled: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=np.float64)
        if t.ndim != 3:
            raise ValueError(f"latent tensor must be HxWxC, got {t.shape}")
        object.__setattr__(self, "tensor", t)
        if self.pooled is not None:
            p = np.asarray(self.pooled, dtype=np.float64)
            if p.shape != (t.shape[2],):
                raise ValueError(
                    f"pooled length {p.shape} does not match {t.shape[2]} channels")
            if not np.allclose(p, t.mean(axis=(0, 1)), atol=1e-6):
                raise ValueError("pooled vector is not the channelwise mean")
            object.__setattr__(self, "pooled", p)


@dataclass(frozen=True)
class ReferenceCode:
    """Pooled latent averaged over a held-out bonafide set."""

    pooled: np.ndarray
    source_count: int

    def __post_init__(self):
        p = np.asarray(self.pooled, dtype=np.float64)
        if p.ndim != 1:
            raise ValueError("reference code must be a vector")
        if self.source_count <= 0:
            raise ValueError("source_count must be positive")
        object.__setattr__(self, "pooled", p)


@dataclass(frozen=True)
class SegmentationOutput:
    """Per-pixel class probabilities, H x W x 4, each pixel a simplex."""

    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 3 or p.shape[2] != N_CLASSES:
            raise ValueError(f"expected HxWx{N_CLASSES}, got {p.shape}")
        if p.min() < -1e-6 or p.max() > 1.0 + 1e-6:
            raise ValueError("probabilities outside [0,1]")
        sums = p.sum(axis=2)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise ValueError("per-pixel probabilities do not sum to 1")
        object.__setattr__(self, "probabilities", p)

    def argmax_mask(self) -> AnnotationMask:
        return AnnotationMask(self.probabilities.argmax(axis=2).astype(np.uint8))


@dataclass(frozen=True)
class StraightenedBScan:
    """A B-scan after surface flattening, with its shifted mask and the
    per-column surface row detected after the shift."""

    pixels: np.ndarray
    mask: AnnotationMask
    surface_profile: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float64)
        if p.shape != self.mask.shape:
            raise ValueError(
                f"pixels {p.shape} and mask {self.mask.shape} disagree")
        prof = np.asarray(self.surface_profile)
        if prof.shape != (p.shape[1],):
            raise ValueError("surface profile must have one entry per column")
        object.__setattr__(self, "pixels", p)
        object.__setattr__(self, "surface_profile", prof.astype(np.int64))


@dataclass(frozen=True)
class LayerImage:
    """One reconstructed 2D subsurface fingerprint: rows are B-scan indices,
    columns are A-line positions. Entries are non-negative raw depth sums."""

    intensities: np.ndarray
    layer: str

    def __post_init__(self):
        if self.layer not in ("s", "v", "d"):
            raise ValueError(f"layer must be s, v or d, got {self.layer!r}")
        r = np.asarray(self.intensities, dtype=np.float64)
        if r.ndim != 2:
            raise ValueError("layer image must be 2D")
        if r.min() < 0:
            raise ValueError("layer sums must be non-negative")
        object.__setattr__(self, "intensities", r)


@dataclass(frozen=True)
class SpoofScore:
    """Mean latent distance of one instance to the reference code.
    Large means attack-like."""

    value: float
    per_slice: np.ndarray = field(repr=False)

    def __post_init__(self):
        d = np.asarray(self.per_slice, dtype=np.float64)
        if d.ndim != 1 or d.min() < 0:
            raise ValueError("per-slice distances must be a non-negative vector")
        if abs(self.value - d.mean()) > 1e-9:
            raise ValueError("score is not the mean of per-slice distances")
        object.__setattr__(self, "per_slice", d)


# ---------------------------------------------------------------------------
# raster operations


def normalize_bscan(raw: BScan) -> BScan:
    """Min-max normalize a B-scan into [0,1]; a constant image maps to zeros."""
    p = raw.pixels
    lo, hi = p.min(), p.max()
    if hi == lo:
        out = np.zeros_like(p)
    else:
        out = (p - lo) / (hi - lo)
    return BScan(out, raw.slice_index)


def _interp_axis(a: np.ndarray, coords: np.ndarray, axis: int) -> np.ndarray:
    """Linear interpolation of `a` at fractional `coords` along `axis`,
    edges clamped."""
    n = a.shape[axis]
    c = np.clip(coords, 0.0, n - 1.0)
    lo = np.floor(c).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    w = c - lo
    shape = [1] * a.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - w) + np.take(a, hi, axis=axis) * w


def _src_coords(n_out: int, n_in: int) -> np.ndarray:
    # half-pixel centers: output pixel i samples the input at (i+.5)*scale-.5
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resize_bilinear(pixels: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of a 2D grid using half-pixel sample centers."""
    a = np.asarray(pixels, dtype=np.float64)
    a = _interp_axis(a, _src_coords(out_hw[0], a.shape[0]), axis=0)
    a = _interp_axis(a, _src_coords(out_hw[1], a.shape[1]), axis=1)
    return a


def resize_nearest(labels: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resample; the output value set is a subset of the
    input's, so hard labels survive."""
    a = np.asarray(labels)
    rows = np.floor((np.arange(out_hw[0]) + 0.5) * (a.shape[0] / out_hw[0]))
    cols = np.floor((np.arange(out_hw[1]) + 0.5) * (a.shape[1] / out_hw[1]))
    rows = np.clip(rows.astype(np.int64), 0, a.shape[0] - 1)
    cols = np.clip(cols.astype(np.int64), 0, a.shape[1] - 1)
    return a[np.ix_(rows, cols)]


def resize_to_network(
    raw: BScan,
    mask: Optional[AnnotationMask] = None,
    out_hw: tuple[int, int] = NET_SHAPE,
) -> tuple[BScan, Optional[AnnotationMask]]:
    """Resample a B-scan (bilinear) and its mask (nearest) to the network
    input size. The two must agree on dimensions."""
    if mask is not None and mask.shape != raw.shape:
        raise ValueError(
            f"image {raw.shape} and mask {mask.shape} dimensions differ")
    b = BScan(resize_bilinear(raw.pixels, out_hw), raw.slice_index)
    m = None
    if mask is not None:
        m = AnnotationMask(resize_nearest(mask.labels, out_hw))
    return b, m


# ---------------------------------------------------------------------------
# disk layout


def _quantize16(pixels: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(pixels, 0.0, 1.0) * INTENSITY_LEVELS).astype(np.uint16)


def save_instance(
    instance: OctInstance,
    directory: Path,
    masks: Optional[Sequence[AnnotationMask]] = None,
) -> Path:
    """Write one instance to its directory layout. Intensities must already
    be in [0,1]; they are stored on the 16-bit grid."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if masks is not None and len(masks) != len(instance):
        raise ValueError(
            f"{len(masks)} masks for {len(instance)} B-scans in {directory}")
    for i, b in enumerate(instance.bscans, start=1):
        if not b.is_normalized():
            raise ValueError(f"B-scan {i} not normalized to [0,1]")
        Image.fromarray(_quantize16(b.pixels)).save(directory / f"bscan_{i:04d}.png")
        if masks is not None:
            Image.fromarray(masks[i - 1].labels, mode="L").save(
                directory / f"mask_{i:04d}.png")
    meta = {
        "subject_id": instance.subject_id,
        "finger_id": instance.finger_id,
        "session": instance.session,
        "label": instance.label,
    }
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return directory


def load_instance(directory: Path, with_masks: bool = False):
    """Read an instance directory back. Returns (instance, masks or None)."""
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no meta.json in {directory}")
    meta = json.loads(meta_path.read_text())
    scan_paths = sorted(directory.glob("bscan_*.png"))
    if not scan_paths:
        raise FileNotFoundError(f"no B-scans in {directory}")
    bscans = []
    for i, p in enumerate(scan_paths, start=1):
        try:
            arr = np.asarray(Image.open(p), dtype=np.float64)
        except Exception as exc:
            raise IOError(f"unreadable B-scan {p}: {exc}") from exc
        bscans.append(BScan(arr / INTENSITY_LEVELS, slice_index=i))
    masks = None
    if with_masks:
        mask_paths = sorted(directory.glob("mask_*.png"))
        if len(mask_paths) != len(scan_paths):
            raise FileNotFoundError(
                f"{directory} has {len(mask_paths)} masks for {len(scan_paths)} B-scans")
        masks = [AnnotationMask(np.asarray(Image.open(p), dtype=np.uint8))
                 for p in mask_paths]
    instance = OctInstance(
        bscans=tuple(bscans),
        subject_id=meta["subject_id"],
        finger_id=meta["finger_id"],
        session=int(meta["session"]),
        label=meta["label"],
    )
    return instance, masks
