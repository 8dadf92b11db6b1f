import json
import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from dehazekit.errors import DimensionError, InputError
from dehazekit.metrics import (
    EfficiencyReport,
    MetricReport,
    bench_efficiency,
    entropy,
    evaluate_model,
    haze_density,
    psnr,
    ssim_metric,
)
from dehazekit.models import flops_estimate, param_count

from conftest import rand_image


class IdentityModel(nn.Module):
    def forward(self, x):
        return x


def min_filter_loop_oracle(dark, size=7):
    """Brute-force spatial minimum with symmetric (reflect) padding."""
    pad = size // 2
    padded = np.pad(dark, pad, mode="symmetric")
    h, w = dark.shape
    out = np.empty_like(dark)
    for i in range(h):
        for j in range(w):
            out[i, j] = padded[i : i + size, j : j + size].min()
    return out


class TestEntropy:
    def test_constant_image(self):
        assert entropy(torch.full((3, 8, 8), 0.5)) == 0.0

    def test_uniform_histogram(self):
        levels = torch.arange(256, dtype=torch.float32).reshape(16, 16) / 255.0
        assert entropy(levels) == 8.0

    def test_two_levels_fifty_fifty(self):
        img = torch.zeros(16, 16)
        img[:, 8:] = 1.0
        assert entropy(img) == 1.0

    def test_rgb_gray_matches_grayscale(self):
        gray = torch.rand(8, 8)
        rgb = gray.unsqueeze(0).expand(3, 8, 8)
        assert entropy(rgb) == pytest.approx(entropy(gray), abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            entropy(torch.zeros(3, 0, 0))

    def test_range(self):
        for seed in range(3):
            value = entropy(rand_image(seed))
            assert 0.0 <= value <= 8.0


class TestPsnr:
    def test_identical_capped(self):
        x = rand_image(0)
        assert psnr(x, x) == 100.0

    def test_known_mse(self):
        pred = torch.full((3, 8, 8), 0.6, dtype=torch.float64)
        target = torch.full((3, 8, 8), 0.5, dtype=torch.float64)
        assert psnr(pred, target) == pytest.approx(20.0, abs=1e-6)

    def test_matches_loop_oracle(self):
        pred, target = rand_image(1), rand_image(2)
        total = 0.0
        count = 0
        a, b = pred.numpy(), target.numpy()
        for idx in np.ndindex(a.shape):
            total += (float(a[idx]) - float(b[idx])) ** 2
            count += 1
        expected = 10.0 * math.log10(1.0 / (total / count))
        assert psnr(pred, target) == pytest.approx(expected, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            psnr(torch.rand(3, 4, 4), torch.rand(3, 4, 5))


class TestSsimMetric:
    def test_identical_is_one(self):
        x = rand_image(3)
        assert ssim_metric(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_below_one_for_different(self):
        assert ssim_metric(rand_image(4), rand_image(5)) < 1.0


class TestHazeDensity:
    def test_black_image(self):
        assert haze_density(torch.zeros(3, 16, 16)) == 0.0

    def test_white_image(self):
        assert haze_density(torch.ones(3, 16, 16)) == 1.0

    def test_matches_loop_oracle(self):
        img = rand_image(6, (3, 9, 9))
        dark = img.numpy().min(axis=0)
        expected = float(min_filter_loop_oracle(dark).mean())
        assert haze_density(img) == pytest.approx(expected, abs=1e-12)

    def test_requires_rgb(self):
        with pytest.raises(DimensionError):
            haze_density(torch.rand(16, 16))

    def test_monotone_under_uniform_veil(self):
        img = rand_image(7) * 0.6
        veiled = img * 0.7 + 0.9 * 0.3
        assert haze_density(veiled) > haze_density(img)


class TestMetricReport:
    def test_aggregate_is_mean(self):
        report = MetricReport(per_image={
            "a": {"psnr": 10.0, "entropy": 4.0},
            "b": {"psnr": 20.0, "entropy": 6.0},
        })
        assert report.aggregate["psnr"] == pytest.approx(15.0, abs=1e-12)
        assert report.aggregate["entropy"] == pytest.approx(5.0, abs=1e-12)

    def test_json_round_trip_exact(self, tmp_path):
        report = MetricReport(per_image={
            "a": {"psnr": 13.123456789012345, "entropy": 4.987654321098765},
        })
        path = tmp_path / "report.json"
        report.to_json(path)
        loaded = MetricReport.from_json(path)
        for key, value in report.per_image["a"].items():
            assert abs(loaded.per_image["a"][key] - value) < 1e-12
        for key, value in report.aggregate.items():
            assert abs(loaded.aggregate[key] - value) < 1e-12

    def test_json_round_trip_from_string(self):
        report = MetricReport(per_image={"a": {"entropy": 7.25}})
        loaded = MetricReport.from_json(report.to_json())
        assert loaded.per_image == report.per_image

    def test_csv_written(self, tmp_path):
        report = MetricReport(per_image={"a": {"psnr": 10.0}})
        report.write_csv(tmp_path / "report.csv")
        text = (tmp_path / "report.csv").read_text()
        assert "image,psnr" in text and "aggregate" in text


class TestEvaluateModel:
    def test_identity_model_on_identical_pairs(self, tiny_paired):
        dataset = type(tiny_paired)(
            clean=tiny_paired.clean, hazy=[c.clone() for c in tiny_paired.clean], seed=0
        )
        report = evaluate_model(IdentityModel(), dataset, with_ground_truth=True)
        for row in report.per_image.values():
            assert row["psnr"] == 100.0
            assert row["ssim"] == pytest.approx(1.0, abs=1e-9)

    def test_aggregate_equals_mean_of_rows(self, tiny_paired):
        report = evaluate_model(IdentityModel(), tiny_paired, with_ground_truth=True)
        for key in ("psnr", "entropy"):
            vals = [row[key] for row in report.per_image.values()]
            assert report.aggregate[key] == pytest.approx(sum(vals) / len(vals), abs=1e-9)

    def test_unlabeled_dataset(self, tiny_real):
        report = evaluate_model(IdentityModel(), tiny_real, with_ground_truth=False)
        row = next(iter(report.per_image.values()))
        assert "psnr" not in row and "entropy" in row and "haze_density" in row

    def test_ground_truth_requires_paired(self, tiny_real):
        with pytest.raises(InputError):
            evaluate_model(IdentityModel(), tiny_real, with_ground_truth=True)

    def test_writes_reports(self, tmp_path, tiny_real):
        evaluate_model(IdentityModel(), tiny_real, with_ground_truth=False,
                       out_dir=tmp_path)
        assert (tmp_path / "report.json").is_file()
        assert (tmp_path / "report.csv").is_file()


class TestBench:
    def test_flops_field_is_delegated(self, tiny_student):
        report = bench_efficiency(tiny_student, [(1, 3, 16, 16)], warmup=1, runs=3)
        assert report.flops == flops_estimate(tiny_student, (1, 3, 16, 16))
        assert report.params == param_count(tiny_student)

    def test_counts_invariant_across_runs(self, tiny_student):
        a = bench_efficiency(tiny_student, [(1, 3, 16, 16)], warmup=1, runs=3)
        b = bench_efficiency(tiny_student, [(1, 3, 16, 16)], warmup=1, runs=3)
        assert a.params == b.params and a.flops == b.flops

    def test_json_serialization(self, tmp_path, tiny_student):
        report = bench_efficiency(tiny_student, [(1, 3, 16, 16)], warmup=1, runs=3)
        report.to_json(tmp_path / "eff.json")
        data = json.loads((tmp_path / "eff.json").read_text())
        assert data["params"] == report.params
        assert data["latency_ms"]["1x3x16x16"] > 0

    def test_requires_shapes(self, tiny_student):
        with pytest.raises(InputError):
            bench_efficiency(tiny_student, [])
