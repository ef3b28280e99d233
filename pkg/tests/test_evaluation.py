import json
import math

import numpy as np
import pytest
import torch

from discdiff.data import build_phantom_dataset
from discdiff.evaluation import (
    evaluate_dataset,
    psnr,
    report_from_json,
    report_to_json,
    save_grayscale,
    ssim,
    uncertainty_maps,
    validate_report,
)
from discdiff.schedule import make_linear_schedule


class TestPsnr:
    def test_identical_images(self):
        a = np.random.default_rng(0).normal(size=(8, 8))
        assert psnr(a, a.copy(), 1.0) == math.inf

    def test_known_mse(self):
        ref = np.zeros((10, 10))
        restored = np.full((10, 10), 0.1)  # MSE = 0.01
        assert psnr(restored, ref, 1.0) == pytest.approx(20.0, rel=1e-12)

    def test_unit_mse(self):
        ref = np.zeros((4, 4))
        assert psnr(ref + 1.0, ref, 1.0) == pytest.approx(0.0, abs=1e-12)

    def test_monotone_in_mse(self):
        ref = np.zeros((6, 6))
        values = [psnr(ref + d, ref, 1.0) for d in (0.05, 0.1, 0.2, 0.5)]
        assert values == sorted(values, reverse=True)

    def test_errors(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((3, 3)), 1.0)
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((2, 2)), 0.0)


class TestSsim:
    def test_self_similarity(self):
        a = np.random.default_rng(1).uniform(0, 1, size=(16, 16))
        assert ssim(a, a.copy(), 1.0) == pytest.approx(1.0, abs=1e-12)

    def test_matches_reference_implementation(self):
        skimage = pytest.importorskip("skimage.metrics")
        rng = np.random.default_rng(2)
        for _ in range(4):
            a = rng.uniform(0, 1, size=(24, 24))
            b = np.clip(a + rng.normal(0, 0.1, size=(24, 24)), 0, 1)
            got = ssim(a, b, 1.0)
            want = skimage.structural_similarity(
                a,
                b,
                win_size=11,
                gaussian_weights=True,
                sigma=1.5,
                use_sample_covariance=False,
                data_range=1.0,
            )
            assert got == pytest.approx(want, abs=5e-4)

    def test_heavy_noise_scores_low(self):
        rng = np.random.default_rng(3)
        ref = rng.uniform(0.4, 0.6, size=(32, 32))
        noisy = ref + rng.normal(0, 5.0, size=(32, 32))
        assert ssim(noisy, ref, 1.0) < 0.2

    def test_affine_shift_below_one(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(0, 1, size=(16, 16))
        shifted = 0.5 * a + 0.25
        value = ssim(shifted, a, 1.0)
        assert value < 1.0

    def test_constant_patch_closed_form(self):
        # zero variance everywhere: only the luminance term survives,
        # (2 m1 m2 + C1) / (m1^2 + m2^2 + C1) with C1 = 1e-4
        a = np.full((16, 16), 0.8)
        b = np.full((16, 16), 0.65)
        want = (2 * 0.8 * 0.65 + 1e-4) / (0.8**2 + 0.65**2 + 1e-4)
        assert ssim(a, b, 1.0) == pytest.approx(want, rel=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(0, 1, size=(16, 16))
        b = rng.uniform(0, 1, size=(16, 16))
        assert ssim(a, b, 1.0) == pytest.approx(ssim(b, a, 1.0), abs=1e-9)

    def test_flip_invariance(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(0, 1, size=(16, 16))
        b = np.clip(a + rng.normal(0, 0.05, size=(16, 16)), 0, 1)
        direct = ssim(a, b, 1.0)
        flipped = ssim(a[::-1, ::-1], b[::-1, ::-1], 1.0)
        assert direct == pytest.approx(flipped, abs=1e-6)

    def test_psnr_flip_invariance(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(0, 1, size=(12, 12))
        b = rng.uniform(0, 1, size=(12, 12))
        assert psnr(a, b, 1.0) == pytest.approx(psnr(a[::-1], b[::-1], 1.0), rel=1e-12)

    def test_window_too_large(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)), 1.0)


class TestUncertaintyMaps:
    def test_identical_samples_zero_std(self):
        s = np.stack([np.ones((4, 4))] * 5)
        mean, std = uncertainty_maps(s)
        assert np.array_equal(mean, np.ones((4, 4)))
        assert np.array_equal(std, np.zeros((4, 4)))

    def test_two_point_population_std(self):
        s = np.stack([np.zeros((2, 2)), np.full((2, 2), 2.0)])
        mean, std = uncertainty_maps(s)
        assert np.array_equal(mean, np.ones((2, 2)))
        assert np.array_equal(std, np.ones((2, 2)))

    def test_shapes_and_single_sample(self):
        s = np.random.default_rng(0).normal(size=(3, 5, 7))
        mean, std = uncertainty_maps(s)
        assert mean.shape == (5, 7) and std.shape == (5, 7)
        mean1, std1 = uncertainty_maps(s[:1])
        assert mean1.shape == (5, 7) and std1 is None

    def test_order_invariance(self):
        s = np.random.default_rng(1).normal(size=(4, 3, 3))
        _, a = uncertainty_maps(s)
        _, b = uncertainty_maps(s[::-1])
        assert np.allclose(a, b, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            uncertainty_maps(np.zeros((0, 4, 4)))


class TestReportSerialization:
    def _report(self):
        return {
            "split": "test",
            "k": 2,
            "sampling_steps": 5,
            "seed": 0,
            "mean_psnr": math.inf,
            "mean_ssim": 0.5,
            "baseline_mean_psnr": 21.5,
            "baseline_mean_ssim": 0.4,
            "per_slice": [
                {
                    "slice_id": "a",
                    "psnr": math.inf,
                    "ssim": 0.5,
                    "baseline_psnr": 21.5,
                    "baseline_ssim": 0.4,
                    "images": {},
                }
            ],
        }

    def test_roundtrip_with_infinity(self):
        report = self._report()
        text = report_to_json(report)
        assert '"inf"' in text
        back = report_from_json(text)
        assert back == report

    def test_schema_validates(self):
        doc = json.loads(report_to_json(self._report()))
        validate_report(doc)

    def test_schema_rejects_missing_fields(self):
        doc = json.loads(report_to_json(self._report()))
        del doc["mean_psnr"]
        with pytest.raises(Exception):
            validate_report(doc)


def constant_model(x, y, v, t):
    return torch.zeros_like(x), None


@pytest.fixture(scope="module")
def eval_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("evaldata")
    manifest = build_phantom_dataset(
        out, n_volumes=5, slices_per_volume=1, resolution=32, scale=4, seed=3
    )
    return manifest


class TestEvaluateDataset:
    def test_report_contract(self, eval_dataset, tmp_path):
        schedule = make_linear_schedule(3, 1e-3, 0.02)
        report = evaluate_dataset(
            eval_dataset,
            constant_model,
            schedule,
            split="test",
            k=2,
            seed=1,
            out_dir=tmp_path,
        )
        assert len(report["per_slice"]) == 1
        row = report["per_slice"][0]
        assert math.isfinite(row["baseline_psnr"])
        assert set(row["images"]) == {"mean", "error", "std"}
        for rel in row["images"].values():
            assert (tmp_path / rel).exists()
        assert report["mean_psnr"] == pytest.approx(
            np.mean([r["psnr"] for r in report["per_slice"]])
        )
        validate_report(json.loads((tmp_path / "report.json").read_text()))

    def test_k1_omits_std(self, eval_dataset, tmp_path):
        schedule = make_linear_schedule(2, 1e-3, 0.02)
        report = evaluate_dataset(
            eval_dataset, constant_model, schedule, split="test", k=1, seed=1, out_dir=tmp_path
        )
        assert "std" not in report["per_slice"][0]["images"]
        assert math.isfinite(report["per_slice"][0]["psnr"])

    def test_deterministic(self, eval_dataset):
        schedule = make_linear_schedule(2, 1e-3, 0.02)
        a = evaluate_dataset(eval_dataset, constant_model, schedule, split="test", k=2, seed=9)
        b = evaluate_dataset(eval_dataset, constant_model, schedule, split="test", k=2, seed=9)
        assert a == b

    def test_frozen_chains_zero_std(self, eval_dataset, tmp_path):
        schedule = make_linear_schedule(2, 1e-3, 0.02)
        report = evaluate_dataset(
            eval_dataset,
            constant_model,
            schedule,
            split="test",
            k=3,
            seed=0,
            out_dir=tmp_path,
            chain_seeds=[11, 11, 11],
        )
        std_rel = report["per_slice"][0]["images"]["std"]
        from PIL import Image

        img = np.asarray(Image.open(tmp_path / std_rel))
        assert img.max() == 0

    def test_empty_split_rejected(self, tmp_path, eval_dataset):
        with pytest.raises(ValueError):
            evaluate_dataset(
                eval_dataset, constant_model, make_linear_schedule(2, 1e-3, 0.02), split="nope"
            )


def test_save_grayscale_range(tmp_path):
    from PIL import Image

    g = np.linspace(0, 1, 64).reshape(8, 8)
    save_grayscale(tmp_path / "g.png", g)
    img = np.asarray(Image.open(tmp_path / "g.png"))
    assert img.dtype == np.uint8
    assert img.min() == 0 and img.max() == 255
    save_grayscale(tmp_path / "flat.png", np.zeros((4, 4)))
    flat = np.asarray(Image.open(tmp_path / "flat.png"))
    assert flat.max() == 0
