"""Synthetic OCT fingertip phantoms.

Real OCT captures are not available, so these phantoms stand in for them.
A bonafide phantom is a stack of B-scans with four labeled regions per
A-line, top to bottom: background, a bright air-skin entrance line opening
a stratum corneum band, a viable epidermis band, and a dermis band that
fades into background. A 2D ridge field (shared by all slices of an
instance) modulates the stratum corneum thickness, so projecting that band
over depth recovers the ridge pattern. Bright 1-pixel sweat ducts sit on
ridge crests. Attack phantoms lack this depth structure entirely.

Everything is deterministic in (seed, config); per-slice random streams are
derived independently so slices could be generated in parallel.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import (
    BONAFIDE,
    PRESENTATION_ATTACK,
    AnnotationMask,
    BScan,
    OctInstance,
    save_instance,
)

SURFACE_LINE_INTENSITY = 0.95
DUCT_INTENSITY = 0.95
PA_HOMOGENEOUS_INTENSITY = 0.55
PA_SURFACE_LINE_ROWS = 3
FADE_ROWS = 8
FADE_DECAY = 1.5

# stream tags for per-purpose random substreams
_PHASE_STREAM = 3
_SURFACE_STREAM = 5
_DUCT_STREAM = 7
_NOISE_STREAM = 11
_PA_STREAM = 13


@dataclass(frozen=True)
class PhantomConfig:
    seed: int = 0
    n_bscans: int = 400
    height: int = 500
    width: int = 1500
    layer_depths: tuple = (70.0, 85.0, 150.0)
    layer_intensities: tuple = (0.85, 0.45, 0.65)
    ridge_period: float = 180.0
    ridge_amplitude: float = 12.0
    duct_density: float = 2.0  # ducts per 100 columns
    noise_sigma: float = 0.0
    surface_tilt: float = 6.0
    pa_type: str = "homogeneous_3d"
    enforce_full_scale: bool = False

    def __post_init__(self):
        if self.n_bscans < 1 or self.height < 16 or self.width < 16:
            raise ValueError("degenerate phantom dimensions")
        if self.enforce_full_scale and self.n_bscans != 400:
            raise ValueError(
                f"full-scale instances take 400 B-scans, got {self.n_bscans}")
        if len(self.layer_depths) != 3 or min(self.layer_depths) <= 0:
            raise ValueError("layer_depths must be three positive thicknesses")
        if len(self.layer_intensities) != 3:
            raise ValueError("layer_intensities must have three entries")
        for v in self.layer_intensities:
            if not 0.0 < v <= 1.0:
                raise ValueError("layer intensities must sit in (0, 1]")
        vals = self.layer_intensities
        for a in range(3):
            for b in range(a + 1, 3):
                if abs(vals[a] - vals[b]) < 0.1:
                    raise ValueError(
                        "layer intensities closer than 0.1 are not learnable")
        undulation = self.surface_tilt + self.ridge_amplitude
        if self.surface_level + sum(self.layer_depths) + undulation \
                + FADE_ROWS >= self.height:
            raise ValueError("layers plus undulation do not fit the B-scan height")
        if self.ridge_period < 8:
            raise ValueError("ridge_period below 8 px is unresolvable")
        if self.pa_type not in ("layered_2d", "homogeneous_3d"):
            raise ValueError(f"unknown pa_type {self.pa_type!r}")

    @property
    def surface_level(self) -> float:
        return max(10.0, 0.08 * self.height)


def desk_config(seed: int = 0, n_bscans: int = 40) -> PhantomConfig:
    """Desk-scale defaults: B-scans generated directly at the network size."""
    return PhantomConfig(
        seed=seed, n_bscans=n_bscans, height=256, width=768,
        layer_depths=(28.0, 34.0, 60.0), ridge_period=96.0,
        ridge_amplitude=7.0, surface_tilt=6.0)


def _rng(cfg: PhantomConfig, *stream) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([cfg.seed & 0x7FFFFFFF, *stream]))


def _ridge_components(cfg: PhantomConfig):
    """Three oriented sinusoids; the first dominates and runs along columns
    at the configured period."""
    rng = _rng(cfg, _PHASE_STREAM)
    cx = cfg.width / cfg.ridge_period  # cycles across the full width
    comps = [
        (1.00, cx, 1.0),
        (0.30, 0.531 * cx, 2.3),
        (0.22, 1.730 * cx, 3.1),
    ]
    phases = rng.uniform(0.0, 2.0 * np.pi, size=len(comps))
    return comps, phases


def ridge_field(cfg: PhantomConfig) -> np.ndarray:
    """Continuous ridge height field over (slice, column), zero mean."""
    comps, phases = _ridge_components(cfg)
    j = np.arange(cfg.n_bscans)[:, None] / cfg.n_bscans
    n = np.arange(cfg.width)[None, :] / cfg.width
    field = np.zeros((cfg.n_bscans, cfg.width))
    for (amp, cyc_x, cyc_y), phi in zip(comps, phases):
        field += amp * np.sin(2.0 * np.pi * (cyc_x * n + cyc_y * j) + phi)
    return field


def _surface_field(cfg: PhantomConfig) -> np.ndarray:
    """Slow smooth undulation of the skin surface (contact tilt), separate
    from the ridge structure so flattening can undo it."""
    rng = _rng(cfg, _SURFACE_STREAM)
    psi = rng.uniform(0.0, 2.0 * np.pi, size=2)
    j = np.arange(cfg.n_bscans)[:, None] / cfg.n_bscans
    n = np.arange(cfg.width)[None, :] / cfg.width
    g = 0.6 * np.sin(2.0 * np.pi * (0.7 * n + 0.3 * j) + psi[0]) \
        + 0.4 * np.sin(2.0 * np.pi * (1.3 * n - 0.5 * j) + psi[1])
    return cfg.surface_level + cfg.surface_tilt * g


def slice_bounds(cfg: PhantomConfig, j: int, ridge: np.ndarray,
                 surface: np.ndarray):
    """Integer band boundaries (surface, SC bottom, VE bottom, dermis bottom)
    for slice j, one entry per column."""
    rms = np.sqrt(np.mean(ridge ** 2))
    # tanh sharpens the sinusoid mix toward its sign, pushing the projected
    # band thickness toward the binary ridge map
    shaped = np.tanh(2.5 * ridge[j] / rms) if rms > 0 else np.zeros(cfg.width)
    d_s = cfg.layer_depths[0] + cfg.ridge_amplitude * shaped
    b0 = surface[j]
    b1 = b0 + d_s
    b2 = b1 + cfg.layer_depths[1]
    b3 = b2 + cfg.layer_depths[2]
    return np.rint(np.stack([b0, b1, b2, b3])).astype(np.int64)


def _render_slice(cfg: PhantomConfig, j: int, ridge: np.ndarray,
                  surface: np.ndarray):
    """One noise-free B-scan: (image, labels, aux). aux marks the pixels
    brighter than their band's nominal intensity (entrance line, ducts)."""
    h, w = cfg.height, cfg.width
    r0, r1, r2, r3 = slice_bounds(cfg, j, ridge, surface)
    m = np.arange(h)[:, None]
    i_s, i_v, i_d = cfg.layer_intensities

    labels = np.zeros((h, w), dtype=np.uint8)
    labels[(m >= r0) & (m < r1)] = 1
    labels[(m >= r1) & (m < r2)] = 2
    labels[(m >= r2) & (m < r3)] = 3

    img = np.zeros((h, w))
    img[labels == 1] = i_s
    img[labels == 2] = i_v
    img[labels == 3] = i_d
    fade_t = m - r3 + 1
    fade = (fade_t >= 1) & (fade_t <= FADE_ROWS)
    img[fade] = (i_d * np.exp(-fade_t / FADE_DECAY))[fade]

    bright = (m == r0)
    img[bright] = SURFACE_LINE_INTENSITY

    rng = _rng(cfg, _DUCT_STREAM, j)
    crest_cols = np.nonzero(ridge[j] > 0)[0]
    n_ducts = min(int(round(cfg.duct_density * w / 100.0)), crest_cols.size)
    duct_cols = np.sort(rng.choice(crest_cols, size=n_ducts, replace=False)) \
        if n_ducts > 0 else np.empty(0, dtype=np.int64)
    for n in duct_cols:
        top = int(r0[n]) + 2
        length = int(round(0.55 * (int(r1[n]) - top)))
        if length >= 2:
            img[top:top + length, n] = DUCT_INTENSITY
            bright[top:top + length, n] = True

    aux = {"bounds": (r0, r1, r2, r3), "duct_columns": duct_cols, "bright": bright}
    return img, labels, aux


def _speckle(cfg: PhantomConfig, j: int, img: np.ndarray) -> np.ndarray:
    if cfg.noise_sigma <= 0:
        return img
    rng = _rng(cfg, _NOISE_STREAM, j)
    gain = np.exp(cfg.noise_sigma * rng.standard_normal(img.shape)
                  - 0.5 * cfg.noise_sigma ** 2)
    return np.clip(img * gain, 0.0, 1.0)


def generate_bonafide(cfg: PhantomConfig, subject_id: str = "phantom",
                      finger_id: str = "f1", session: int = 1,
                      with_aux: bool = False):
    """Generate one bonafide instance.

    Returns (instance, masks, ridge_map), plus the per-slice aux list when
    ``with_aux`` is set. The ridge map is the binary crest/valley field the
    reconstruction module is expected to recover.
    """
    ridge = ridge_field(cfg)
    surface = _surface_field(cfg)
    bscans, masks, auxes = [], [], []
    for j in range(cfg.n_bscans):
        img, labels, aux = _render_slice(cfg, j, ridge, surface)
        img = _speckle(cfg, j, img)
        bscans.append(BScan(img, slice_index=j + 1))
        masks.append(AnnotationMask(labels))
        auxes.append(aux)
    instance = OctInstance(tuple(bscans), subject_id, finger_id, session, BONAFIDE)
    ridge_map = (ridge > 0).astype(np.uint8)
    if with_aux:
        return instance, masks, ridge_map, auxes
    return instance, masks, ridge_map


def generate_pa(cfg: PhantomConfig, subject_id: str = "attack",
                finger_id: str = "f1", session: int = 1) -> OctInstance:
    """Generate one presentation-attack instance (no masks: attacks carry
    no biological annotation)."""
    surface = _surface_field(cfg)
    rng = _rng(cfg, _PA_STREAM)
    # instance-specific body thickness so attacks are not all clones
    body = int(round(cfg.height * rng.uniform(0.45, 0.6)))
    bscans = []
    for j in range(cfg.n_bscans):
        h, w = cfg.height, cfg.width
        m = np.arange(h)[:, None]
        r0 = np.rint(surface[j]).astype(np.int64)
        img = np.zeros((h, w))
        if cfg.pa_type == "homogeneous_3d":
            img[(m >= r0) & (m < r0 + body)] = PA_HOMOGENEOUS_INTENSITY
        else:  # layered_2d: a thin surface reflection and nothing below
            img[(m >= r0) & (m < r0 + PA_SURFACE_LINE_ROWS)] = \
                SURFACE_LINE_INTENSITY
        img = _speckle(cfg, j, img)
        bscans.append(BScan(img, slice_index=j + 1))
    return OctInstance(tuple(bscans), subject_id, finger_id, session,
                       PRESENTATION_ATTACK)


# ---------------------------------------------------------------------------
# dataset assembly

PARTITIONS = ("reference", "annotated", "test_bonafide", "test_pa")


def _instance_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed & 0x7FFFFFFF, 0xD5, index])
               .generate_state(1)[0])


def generate_dataset(partition_counts: dict, base_cfg: PhantomConfig,
                     out_dir: Path) -> Path:
    """Write a full phantom dataset and its manifest.

    ``partition_counts`` maps each partition name to an instance count (all
    four partitions required, each at least 1). Only the annotated partition
    gets masks on disk; every bonafide instance also stores its ridge map.
    Attack instances alternate between the two archetypes. Returns the
    manifest path.
    """
    unknown = set(partition_counts) - set(PARTITIONS)
    if unknown:
        raise ValueError(f"unknown partitions {sorted(unknown)}")
    for name in PARTITIONS:
        if partition_counts.get(name, 0) < 1:
            raise ValueError(f"partition {name!r} needs at least 1 instance")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    index = 0
    for partition in PARTITIONS:
        for k in range(partition_counts[partition]):
            seed = _instance_seed(base_cfg.seed, index)
            subject = f"p{index:03d}"
            ridge_map = None
            if partition == "test_pa":
                pa_type = "homogeneous_3d" if k % 2 == 0 else "layered_2d"
                cfg = PhantomConfig(**{**asdict(base_cfg), "seed": seed,
                                       "pa_type": pa_type})
                inst = generate_pa(cfg, subject_id=subject)
                masks = None
            else:
                cfg = PhantomConfig(**{**asdict(base_cfg), "seed": seed})
                inst, masks, ridge_map = generate_bonafide(cfg, subject_id=subject)
                if partition != "annotated":
                    masks = None
            rel = Path(partition) / inst.instance_id
            try:
                save_instance(inst, out_dir / rel, masks)
                if ridge_map is not None:
                    np.save(out_dir / rel / "ridge_map.npy", ridge_map)
            except OSError as exc:
                raise OSError(f"writing instance {out_dir / rel}: {exc}") from exc
            entries.append({
                "path": str(rel),
                "label": inst.label,
                "partition": partition,
                "seed": seed,
            })
            index += 1

    manifest = {
        "base_config": asdict(base_cfg),
        "counts": {k: partition_counts[k] for k in PARTITIONS},
        "instances": entries,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest_path


def load_manifest(manifest_path: Path) -> dict:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    manifest["root"] = str(manifest_path.parent)
    return manifest


def manifest_instances(manifest: dict, partition: str) -> list:
    """Absolute instance directories for one partition, manifest order."""
    if partition not in PARTITIONS:
        raise ValueError(f"unknown partition {partition!r}")
    root = Path(manifest["root"])
    return [root / e["path"] for e in manifest["instances"]
            if e["partition"] == partition]
