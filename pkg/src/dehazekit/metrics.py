"""Image quality metrics, dataset evaluation, and efficiency benchmarks.

PSNR/SSIM serve the synthetic domain (ground truth available); grayscale
histogram entropy and a dark-channel haze-density proxy serve the real
domain, where more information and a lower dark channel indicate better
dehazing.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import minimum_filter

from .errors import DimensionError, InputError
from .losses import ssim_loss
from .models import flops_estimate, param_count, run_model

PSNR_CAP_DB = 100.0
BT601_LUMA = (0.299, 0.587, 0.114)
DARK_CHANNEL_WINDOW = 7


def _to_numpy(image) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        return image.detach().cpu().numpy()
    return np.asarray(image)


def entropy(image) -> float:
    """Shannon entropy (bits) of the 256-bin 8-bit grayscale histogram.

    RGB input is converted with BT.601 luma weights. Range [0, 8].
    """
    arr = _to_numpy(image)
    if arr.size == 0:
        raise InputError("cannot compute entropy of an empty image")
    if arr.ndim == 3 and arr.shape[0] == 3:
        w = np.asarray(BT601_LUMA, dtype=np.float64)
        arr = np.tensordot(w, arr.astype(np.float64), axes=([0], [0]))
    elif arr.ndim != 2:
        raise DimensionError(f"expected (3,H,W) or (H,W), got {arr.shape}")
    levels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    hist = np.bincount(levels.reshape(-1), minlength=256).astype(np.float64)
    p = hist / hist.sum()
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def psnr(pred, target) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for near-zero MSE."""
    a, b = _to_numpy(pred).astype(np.float64), _to_numpy(target).astype(np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def ssim_metric(pred, target) -> float:
    """Structural similarity index: 1 - ssim_loss."""
    a = torch.as_tensor(_to_numpy(pred), dtype=torch.float64)
    b = torch.as_tensor(_to_numpy(target), dtype=torch.float64)
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    return float(1.0 - ssim_loss(a, b))


def haze_density(image) -> float:
    """Dark-channel haze density in [0, 1].

    Per-pixel minimum over RGB followed by a 7x7 spatial minimum filter
    (reflect padding), averaged over the image. Haze lifts the dark
    channel toward the airlight, so hazier images score higher.
    """
    arr = _to_numpy(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DimensionError(f"expected an RGB image (3,H,W), got {arr.shape}")
    dark = arr.min(axis=0)
    dark = minimum_filter(dark, size=DARK_CHANNEL_WINDOW, mode="reflect")
    return float(dark.mean())


@dataclass
class MetricReport:
    """Per-image metric values plus their arithmetic means."""

    per_image: dict[str, dict[str, float]]
    aggregate: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate = self._aggregate()

    def _aggregate(self) -> dict[str, float]:
        keys: set[str] = set()
        for row in self.per_image.values():
            keys.update(row)
        agg = {}
        for key in sorted(keys):
            vals = [row[key] for row in self.per_image.values() if key in row]
            if vals:
                agg[key] = float(sum(vals) / len(vals))
        return agg

    def to_json(self, path: str | Path | None = None) -> str:
        payload = json.dumps(
            {"per_image": self.per_image, "aggregate": self.aggregate}, indent=2
        )
        if path is not None:
            Path(path).write_text(payload)
        return payload

    @classmethod
    def from_json(cls, text_or_path: str | Path) -> "MetricReport":
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            text = Path(text_or_path).read_text()
        data = json.loads(text)
        return cls(per_image=data["per_image"], aggregate=data["aggregate"])

    def write_csv(self, path: str | Path) -> None:
        keys = sorted({k for row in self.per_image.values() for k in row})
        lines = ["image," + ",".join(keys)]
        for image_id in sorted(self.per_image):
            row = self.per_image[image_id]
            lines.append(
                image_id + "," + ",".join(
                    f"{row[k]:.10g}" if k in row else "" for k in keys
                )
            )
        lines.append(
            "aggregate," + ",".join(
                f"{self.aggregate[k]:.10g}" if k in self.aggregate else "" for k in keys
            )
        )
        Path(path).write_text("\n".join(lines) + "\n")


def evaluate_model(
    model,
    dataset,
    with_ground_truth: bool = True,
    out_dir: str | Path | None = None,
) -> MetricReport:
    """Run the model over a dataset and report per-image metrics.

    Paired datasets yield PSNR/SSIM against the clean targets plus the
    no-reference metrics of the outputs; unlabeled datasets yield the
    no-reference metrics only. Optionally writes report.json/report.csv.
    """
    if with_ground_truth:
        if not hasattr(dataset, "clean"):
            raise InputError("ground-truth evaluation needs a paired dataset")
        inputs, targets = dataset.hazy, dataset.clean
    else:
        inputs = dataset.images if hasattr(dataset, "images") else dataset.hazy
        targets = None
    if len(inputs) == 0:
        raise InputError("dataset is empty")

    per_image: dict[str, dict[str, float]] = {}
    with torch.no_grad():
        for i, img in enumerate(inputs):
            out = run_model(model, img.unsqueeze(0))[0].clamp(0.0, 1.0)
            row = {
                "entropy": entropy(out),
                "haze_density": haze_density(out),
            }
            if targets is not None:
                row["psnr"] = psnr(out, targets[i])
                row["ssim"] = ssim_metric(out, targets[i])
            per_image[f"img_{i:04d}"] = row
    report = MetricReport(per_image=per_image)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.to_json(out / "report.json")
        report.write_csv(out / "report.csv")
    return report


@dataclass
class EfficiencyReport:
    """Parameter count, analytic FLOPs, and measured latency medians."""

    params: int
    flops: int
    flops_input_shape: tuple[int, ...]
    latency_ms: dict[str, float]

    def __post_init__(self):
        if self.params <= 0 or self.flops <= 0:
            raise InputError("params and flops must be positive")
        if any(v <= 0 for v in self.latency_ms.values()):
            raise InputError("latencies must be positive")

    def to_json(self, path: str | Path | None = None) -> str:
        payload = json.dumps(
            {
                "params": self.params,
                "flops": self.flops,
                "flops_input_shape": list(self.flops_input_shape),
                "latency_ms": self.latency_ms,
            },
            indent=2,
        )
        if path is not None:
            Path(path).write_text(payload)
        return payload


def shape_key(shape: tuple[int, ...]) -> str:
    return "x".join(str(s) for s in shape)


def bench_efficiency(
    model,
    shapes: list[tuple[int, ...]],
    warmup: int = 3,
    runs: int = 20,
) -> EfficiencyReport:
    """Measure forward latency medians plus parameter/FLOP counts.

    Each shape gets ``warmup`` untimed runs, then the median wall time of
    ``runs`` timed forwards on the monotonic clock. FLOPs are reported at
    the first shape.
    """
    if not shapes:
        raise InputError("at least one input shape is required")
    latency: dict[str, float] = {}
    with torch.no_grad():
        for shape in shapes:
            x = torch.zeros(*shape)
            for _ in range(warmup):
                run_model(model, x)
            times = []
            for _ in range(runs):
                t0 = time.perf_counter()
                run_model(model, x)
                times.append((time.perf_counter() - t0) * 1000.0)
            latency[shape_key(shape)] = statistics.median(times)
    return EfficiencyReport(
        params=param_count(model),
        flops=flops_estimate(model, shapes[0]),
        flops_input_shape=tuple(shapes[0]),
        latency_ms=latency,
    )
