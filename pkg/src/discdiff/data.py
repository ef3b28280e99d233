"""Paired multi-contrast training data: k-space degradation, cropping,
normalization, synthetic phantoms, and the on-disk manifest format.

Grids are stored as raw little-endian float32, row-major, no header; the
JSON manifest carries shapes, paths, per-slice entropy, and split tags.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.special import expit

from . import __version__
from .curriculum import shannon_entropy

MANIFEST_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")


def write_grid(path, grid) -> None:
    np.ascontiguousarray(grid, dtype="<f4").tofile(path)


def read_grid(path, shape) -> np.ndarray:
    arr = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise ValueError(
            f"{path}: expected {expected} float32 values, found {arr.size}"
        )
    return arr.reshape(shape)


def kspace_truncate(hr: np.ndarray, scale: int) -> np.ndarray:
    """Zero-filled reconstruction: keep the central low-frequency block of
    the centered 2D spectrum, zero the rest, invert, take the real part.
    Output size equals input size.

    The retained block is the largest Hermitian-symmetric subset of the
    central (H/scale) x (W/scale) window: frequencies |f| <= (H/scale - 1)//2
    per axis. Symmetry makes the operator an exact orthogonal projection on
    real images (idempotent, linear, energy non-increasing); keeping the
    window's lone asymmetric boundary row would break that.
    """
    hr = np.asarray(hr, dtype=np.float64)
    if hr.ndim != 2:
        raise ValueError(f"expected a 2D grid, got shape {hr.shape}")
    h, w = hr.shape
    if scale < 1 or h % scale or w % scale:
        raise ValueError(
            f"grid shape {hr.shape} not divisible by scale {scale}"
        )
    spectrum = np.fft.fftshift(np.fft.fft2(hr))
    kept = np.zeros_like(spectrum)
    half_h = (h // scale - 1) // 2
    half_w = (w // scale - 1) // 2
    rows = slice(h // 2 - half_h, h // 2 + half_h + 1)
    cols = slice(w // 2 - half_w, w // 2 + half_w + 1)
    kept[rows, cols] = spectrum[rows, cols]
    return np.fft.ifft2(np.fft.ifftshift(kept)).real


def center_crop(volume: np.ndarray, out_h: int, out_w: int, out_slices: int) -> np.ndarray:
    """Symmetric crop of an (H, W, S) volume about its center, with the
    floor bias toward lower indices on odd margins."""
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {volume.shape}")
    out = (out_h, out_w, out_slices)
    for axis, (have, want) in enumerate(zip(volume.shape, out)):
        if want > have or want < 1:
            raise ValueError(
                f"crop target {out} does not fit inside volume {volume.shape}"
                f" on axis {axis}"
            )
    starts = [(have - want) // 2 for have, want in zip(volume.shape, out)]
    return volume[
        starts[0] : starts[0] + out_h,
        starts[1] : starts[1] + out_w,
        starts[2] : starts[2] + out_slices,
    ]


@dataclass(frozen=True)
class NormalizationScheme:
    """Per-slice affine map of [vmin, vmax] onto [-1, 1]."""

    vmin: float
    vmax: float

    @staticmethod
    def for_grid(grid) -> "NormalizationScheme":
        return NormalizationScheme(float(np.min(grid)), float(np.max(grid)))


def normalize(grid: np.ndarray, scheme: NormalizationScheme) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if scheme.vmax == scheme.vmin:
        return np.zeros_like(grid)
    return 2.0 * (grid - scheme.vmin) / (scheme.vmax - scheme.vmin) - 1.0


def denormalize(grid: np.ndarray, scheme: NormalizationScheme) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    return (grid + 1.0) / 2.0 * (scheme.vmax - scheme.vmin) + scheme.vmin


def generate_phantom_pair(rng: np.random.Generator, resolution: int):
    """Render one synthetic slice pair: soft-edged ellipse compositions as
    shared geometry, viewed through two different monotone intensity maps
    (the second inverted, mimicking a different acquisition contrast) plus
    small independent smooth perturbations. Both outputs lie in [0, 1]."""
    if resolution < 16:
        raise ValueError(f"resolution must be >= 16, got {resolution}")
    ax = np.linspace(-1.0, 1.0, resolution)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")

    geometry = np.zeros((resolution, resolution))
    # Enclosing outline plus a handful of interior blobs.
    n_blobs = int(rng.integers(3, 7))
    specs = [(0.0, 0.0, 0.85, 0.78, 0.0, 0.45, 0.05)]
    for _ in range(n_blobs):
        specs.append(
            (
                rng.uniform(-0.45, 0.45),
                rng.uniform(-0.45, 0.45),
                rng.uniform(0.12, 0.45),
                rng.uniform(0.12, 0.45),
                rng.uniform(0.0, np.pi),
                rng.uniform(0.35, 1.0),
                rng.uniform(0.03, 0.1),
            )
        )
    for cy, cx, ry, rx, angle, amp, softness in specs:
        c, s = np.cos(angle), np.sin(angle)
        u = (xx - cx) * c + (yy - cy) * s
        w = -(xx - cx) * s + (yy - cy) * c
        q = (u / rx) ** 2 + (w / ry) ** 2
        geometry += amp * expit((1.0 - q) / softness)
    peak = geometry.max()
    if peak > 0:
        geometry = geometry / peak

    def perturbation():
        noise = rng.standard_normal((resolution, resolution))
        smooth = gaussian_filter(noise, sigma=resolution / 10.0)
        span = np.abs(smooth).max()
        return 0.03 * smooth / span if span > 0 else smooth

    t2 = np.clip(geometry, 0.0, 1.0) ** 0.7 + perturbation()
    t1 = (1.0 - np.clip(geometry, 0.0, 1.0)) ** 1.5 + perturbation()
    return np.clip(t2, 0.0, 1.0), np.clip(t1, 0.0, 1.0)


@dataclass(frozen=True)
class SliceRecord:
    slice_id: str
    volume_id: str
    split: str
    shape: tuple[int, int]
    entropy_bits: float
    paths: dict[str, str]

    def to_json(self) -> dict:
        return {
            "slice_id": self.slice_id,
            "volume_id": self.volume_id,
            "split": self.split,
            "shape": list(self.shape),
            "entropy_bits": self.entropy_bits,
            "paths": dict(self.paths),
        }

    @staticmethod
    def from_json(obj: dict) -> "SliceRecord":
        return SliceRecord(
            slice_id=obj["slice_id"],
            volume_id=obj["volume_id"],
            split=obj["split"],
            shape=tuple(obj["shape"]),
            entropy_bits=float(obj["entropy_bits"]),
            paths=dict(obj["paths"]),
        )


@dataclass
class Manifest:
    scale: int
    crop: tuple[int, int] | None
    normalization: dict
    records: list[SliceRecord]
    created_with: str = f"discdiff {__version__}"
    version: int = MANIFEST_VERSION
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [r.slice_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate slice_ids in manifest")
        vol_splits: dict[str, str] = {}
        for r in self.records:
            if r.split not in SPLIT_NAMES:
                raise ValueError(f"unknown split tag {r.split!r}")
            if vol_splits.setdefault(r.volume_id, r.split) != r.split:
                raise ValueError(
                    f"volume {r.volume_id} appears in more than one split"
                )

    def split_records(self, split: str) -> list[SliceRecord]:
        return [r for r in self.records if r.split == split]

    def record(self, slice_id: str) -> SliceRecord:
        for r in self.records:
            if r.slice_id == slice_id:
                return r
        raise KeyError(f"no record with slice_id {slice_id!r}")

    def load_grid(self, record: SliceRecord, which: str) -> np.ndarray:
        return read_grid(self.root / record.paths[which], record.shape)

    def save(self, path) -> None:
        path = Path(path)
        doc = {
            "version": self.version,
            "created_with": self.created_with,
            "scale": self.scale,
            "crop": list(self.crop) if self.crop else None,
            "normalization": self.normalization,
            "records": [r.to_json() for r in self.records],
        }
        path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    @staticmethod
    def load(path) -> "Manifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        manifest = Manifest(
            scale=int(doc["scale"]),
            crop=tuple(doc["crop"]) if doc.get("crop") else None,
            normalization=doc["normalization"],
            records=[SliceRecord.from_json(r) for r in doc["records"]],
            created_with=doc["created_with"],
            version=int(doc["version"]),
            root=path.parent,
        )
        for record in manifest.records:
            for p in record.paths.values():
                if not (manifest.root / p).exists():
                    raise FileNotFoundError(f"missing grid file {p}")
        return manifest


def _pipeline_descriptor(n_bins: int) -> dict:
    return {
        "scheme": "per_slice_minmax_to_[-1,1]",
        "entropy_bins": n_bins,
        "entropy_computed_on": "stored_hr_t2",
        "degradation": {
            "method": "centered_kspace_truncation",
            "retained_frequencies_per_axis": "|f| <= (dim/scale - 1) // 2",
            "reconstruction": "zero_filled_real_part",
        },
    }


def split_counts(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Largest-remainder apportionment of n volumes across train/val/test."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError(f"invalid split ratios {ratios}")
    total = sum(ratios)
    exact = [n * r / total for r in ratios]
    counts = [int(np.floor(e)) for e in exact]
    remainders = sorted(
        range(3), key=lambda i: (exact[i] - counts[i], -i), reverse=True
    )
    for i in range(n - sum(counts)):
        counts[remainders[i % 3]] += 1
    return tuple(counts)


def _process_volume(
    volume_id: str,
    split: str,
    slices,
    scale: int,
    out_dir: Path,
    n_bins: int,
) -> list[SliceRecord]:
    records = []
    for k, (hr_t2, hr_t1) in enumerate(slices):
        slice_id = f"{volume_id}_s{k:02d}"
        # round to the stored representation first, so the degraded grid
        # reproduces bit-for-bit from the stored target
        hr_t2 = np.asarray(hr_t2, dtype="<f4")
        hr_t1 = np.asarray(hr_t1, dtype="<f4")
        lr_t2 = kspace_truncate(hr_t2, scale).astype("<f4")
        grids = {"hr_t2": hr_t2, "lr_t2": lr_t2, "hr_t1": hr_t1}
        paths = {}
        for name, grid in grids.items():
            rel = f"grids/{slice_id}_{name}.f32"
            write_grid(out_dir / rel, grid)
            paths[name] = rel
        records.append(
            SliceRecord(
                slice_id=slice_id,
                volume_id=volume_id,
                split=split,
                shape=tuple(np.asarray(hr_t2).shape),
                entropy_bits=shannon_entropy(hr_t2, n_bins),
                paths=paths,
            )
        )
    return records


def build_phantom_dataset(
    out_dir,
    n_volumes: int,
    slices_per_volume: int,
    resolution: int,
    scale: int,
    seed: int,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    n_bins: int = 256,
) -> Manifest:
    """Generate a synthetic dataset of phantom slice pairs, degrade the
    target contrast by k-space truncation, and persist grids + manifest.
    Splits are assigned volume-wise, never slice-wise."""
    out_dir = Path(out_dir)
    (out_dir / "grids").mkdir(parents=True, exist_ok=True)
    counts = split_counts(n_volumes, ratios)
    assignments = [s for s, c in zip(SPLIT_NAMES, counts) for _ in range(c)]
    records = []
    for v in range(n_volumes):
        slices = []
        for k in range(slices_per_volume):
            rng = np.random.default_rng([seed, v, k])
            slices.append(generate_phantom_pair(rng, resolution))
        records.extend(
            _process_volume(f"vol{v:03d}", assignments[v], slices, scale, out_dir, n_bins)
        )
    manifest = Manifest(
        scale=scale,
        crop=None,
        normalization=_pipeline_descriptor(n_bins),
        records=records,
        root=out_dir,
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


def build_volume_dataset(
    out_dir,
    volumes,
    scale: int,
    crop: tuple[int, int, int] | None = None,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    n_bins: int = 256,
) -> Manifest:
    """Adapter for pre-loaded (t2_volume, t1_volume) pairs of shape
    (H, W, S): optional center crop, then the same per-slice pipeline as
    the phantom builder."""
    out_dir = Path(out_dir)
    (out_dir / "grids").mkdir(parents=True, exist_ok=True)
    volumes = list(volumes)
    counts = split_counts(len(volumes), ratios)
    assignments = [s for s, c in zip(SPLIT_NAMES, counts) for _ in range(c)]
    records = []
    for v, (t2_vol, t1_vol) in enumerate(volumes):
        if t2_vol.shape != t1_vol.shape:
            raise ValueError("contrast volumes disagree in shape")
        if crop is not None:
            t2_vol = center_crop(t2_vol, *crop)
            t1_vol = center_crop(t1_vol, *crop)
        slices = [
            (t2_vol[:, :, k], t1_vol[:, :, k]) for k in range(t2_vol.shape[2])
        ]
        records.extend(
            _process_volume(f"vol{v:03d}", assignments[v], slices, scale, out_dir, n_bins)
        )
    manifest = Manifest(
        scale=scale,
        crop=crop[:2] if crop else None,
        normalization=_pipeline_descriptor(n_bins),
        records=records,
        root=out_dir,
    )
    manifest.save(out_dir / "manifest.json")
    return manifest
