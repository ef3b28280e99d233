"""Quantitative and visual evaluation: PSNR, SSIM, error maps, and
sampling-based uncertainty maps."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.signal import convolve2d

from . import diffusion
from .data import Manifest, NormalizationScheme, denormalize, normalize
from .schedule import NoiseSchedule

REPORT_SCHEMA = {
    "type": "object",
    "required": [
        "split",
        "k",
        "sampling_steps",
        "mean_psnr",
        "mean_ssim",
        "baseline_mean_psnr",
        "baseline_mean_ssim",
        "per_slice",
    ],
    "additionalProperties": True,
    "properties": {
        "split": {"type": "string"},
        "k": {"type": "integer", "minimum": 1},
        "sampling_steps": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer"},
        "mean_psnr": {"type": ["number", "string"]},
        "mean_ssim": {"type": "number"},
        "baseline_mean_psnr": {"type": ["number", "string"]},
        "baseline_mean_ssim": {"type": "number"},
        "per_slice": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["slice_id", "psnr", "ssim", "images"],
                "properties": {
                    "slice_id": {"type": "string"},
                    "psnr": {"type": ["number", "string"]},
                    "ssim": {"type": "number"},
                    "baseline_psnr": {"type": ["number", "string"]},
                    "baseline_ssim": {"type": "number"},
                    "images": {"type": "object"},
                },
            },
        },
    },
}


def psnr(restored: np.ndarray, reference: np.ndarray, data_range: float) -> float:
    """Peak signal-to-noise ratio in dB; +inf when the images are equal."""
    restored = np.asarray(restored, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if restored.shape != reference.shape:
        raise ValueError(
            f"shape mismatch {restored.shape} vs {reference.shape}"
        )
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((restored - reference) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(
    restored: np.ndarray,
    reference: np.ndarray,
    data_range: float,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean local structural similarity with a Gaussian window."""
    a = np.asarray(restored, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < window_size:
        raise ValueError(
            f"image {a.shape} smaller than the {window_size}x{window_size} window"
        )
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    window = _gaussian_window(window_size, sigma)

    def smooth(x):
        return convolve2d(x, window, mode="valid")

    mu_a = smooth(a)
    mu_b = smooth(b)
    var_a = smooth(a * a) - mu_a**2
    var_b = smooth(b * b) - mu_b**2
    cov = smooth(a * b) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def uncertainty_maps(samples: np.ndarray):
    """Per-pixel mean and population standard deviation over K samples;
    the std map is None for a single sample."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim < 1 or samples.shape[0] < 1:
        raise ValueError("need at least one sample")
    mean = samples.mean(axis=0)
    if samples.shape[0] < 2:
        return mean, None
    std = samples.std(axis=0, ddof=0)
    # mean-subtraction rounding leaves ~1e-17 residue where every sample
    # agrees; the true deviation there is exactly zero
    std[np.ptp(samples, axis=0) == 0] = 0.0
    return mean, std


def save_grayscale(path, grid: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> None:
    """8-bit grayscale PNG dump, scaled over [vmin, vmax] (the grid's own
    range when not given)."""
    grid = np.asarray(grid, dtype=np.float64)
    lo = float(grid.min()) if vmin is None else vmin
    hi = float(grid.max()) if vmax is None else vmax
    if hi <= lo:
        scaled = np.zeros_like(grid)
    else:
        scaled = (np.clip(grid, lo, hi) - lo) / (hi - lo)
    Image.fromarray((scaled * 255.0).round().astype(np.uint8), mode="L").save(path)


def _encode(x: float):
    return "inf" if math.isinf(x) else x


def _decode(x) -> float:
    return math.inf if x == "inf" else float(x)


def report_to_json(report: dict) -> str:
    doc = json.loads(json.dumps(report))
    doc["mean_psnr"] = _encode(report["mean_psnr"])
    doc["baseline_mean_psnr"] = _encode(report["baseline_mean_psnr"])
    for row, orig in zip(doc["per_slice"], report["per_slice"]):
        row["psnr"] = _encode(orig["psnr"])
        row["baseline_psnr"] = _encode(orig["baseline_psnr"])
    return json.dumps(doc, indent=2) + "\n"


def report_from_json(text: str) -> dict:
    doc = json.loads(text)
    doc["mean_psnr"] = _decode(doc["mean_psnr"])
    doc["baseline_mean_psnr"] = _decode(doc["baseline_mean_psnr"])
    for row in doc["per_slice"]:
        row["psnr"] = _decode(row["psnr"])
        row["baseline_psnr"] = _decode(row["baseline_psnr"])
    return doc


def validate_report(report_doc: dict) -> None:
    import jsonschema

    jsonschema.validate(report_doc, REPORT_SCHEMA)


def _mean(values) -> float:
    return sum(values) / len(values)


def evaluate_dataset(
    manifest: Manifest,
    net,
    schedule: NoiseSchedule,
    split: str = "test",
    k: int = 4,
    seed: int = 0,
    out_dir=None,
    chain_seeds=None,
) -> dict:
    """Score every slice of a split: draw k restorations, compare the
    denormalized sample mean against the stored target, and emit error and
    uncertainty maps. Per-slice chain seeds derive from (seed, slice index)
    unless ``chain_seeds`` pins them explicitly."""
    records = manifest.split_records(split)
    if not records:
        raise ValueError(f"split {split!r} is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)

    per_slice = []
    for i, record in enumerate(records):
        hr = manifest.load_grid(record, "hr_t2")
        lr = manifest.load_grid(record, "lr_t2")
        aux = manifest.load_grid(record, "hr_t1")
        hr_scheme = NormalizationScheme.for_grid(hr)
        cond = diffusion.ConditionPair(
            normalize(lr, NormalizationScheme.for_grid(lr)),
            normalize(aux, NormalizationScheme.for_grid(aux)),
        )
        seeds = chain_seeds
        if seeds is None:
            base = torch.Generator().manual_seed(
                int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
            )
            samples = diffusion.sample_hr(cond, net, schedule, k, base)
        else:
            samples = diffusion.sample_hr(cond, net, schedule, k, 0, chain_seeds=seeds)
        restored_samples = np.stack(
            [denormalize(s, hr_scheme) for s in samples]
        )
        restored, std_map = uncertainty_maps(restored_samples)
        data_range = hr_scheme.vmax - hr_scheme.vmin
        row = {
            "slice_id": record.slice_id,
            "psnr": psnr(restored, hr, data_range),
            "ssim": ssim(restored, hr, data_range),
            "baseline_psnr": psnr(lr, hr, data_range),
            "baseline_ssim": ssim(lr, hr, data_range),
            "images": {},
        }
        if out_dir is not None:
            error_map = np.abs(restored - hr)
            dumps = {"mean": restored, "error": error_map}
            if std_map is not None:
                dumps["std"] = std_map
            for name, grid in dumps.items():
                rel = f"images/{record.slice_id}_{name}.png"
                save_grayscale(out_dir / rel, grid)
                row["images"][name] = rel
        per_slice.append(row)

    report = {
        "split": split,
        "k": k,
        "sampling_steps": schedule.T,
        "seed": seed,
        "mean_psnr": _mean([r["psnr"] for r in per_slice]),
        "mean_ssim": _mean([r["ssim"] for r in per_slice]),
        "baseline_mean_psnr": _mean([r["baseline_psnr"] for r in per_slice]),
        "baseline_mean_ssim": _mean([r["baseline_ssim"] for r in per_slice]),
        "per_slice": per_slice,
    }
    if out_dir is not None:
        (out_dir / "report.json").write_text(report_to_json(report), encoding="utf-8")
    return report
