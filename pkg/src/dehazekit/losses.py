"""Training losses for the compression phase.

Composite supervised loss (L1 + SSIM + perceptual, each nonneg-weighted)
plus a layered feature-alignment loss between teacher and student encoder
taps. All losses are pure, differentiable, nonnegative, and exactly zero
on identical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, InputError


@dataclass
class LossWeights:
    """Nonnegative weights of the supervised loss components."""

    l1_weight: float = 1.0
    ssim_weight: float = 0.5
    perceptual_weight: float = 0.1

    def __post_init__(self):
        vals = (self.l1_weight, self.ssim_weight, self.perceptual_weight)
        if any(v < 0 for v in vals):
            raise ConfigError(f"loss weights must be >= 0, got {vals}")
        if not any(v > 0 for v in vals):
            raise ConfigError("at least one loss weight must be > 0")


@dataclass
class AlignWeights:
    """Per-stage weights of the feature-alignment loss."""

    w: tuple[float, ...]

    def __post_init__(self):
        self.w = tuple(float(v) for v in self.w)
        if any(v < 0 for v in self.w):
            raise ConfigError(f"alignment weights must be >= 0, got {self.w}")
        if not sum(self.w) > 0:
            raise ConfigError("alignment weights must not all be zero")

    @classmethod
    def uniform(cls, stages: int) -> "AlignWeights":
        return cls(w=tuple(1.0 / stages for _ in range(stages)))


def _check_same_shape(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise DimensionError(
            f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}"
        )


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements."""
    _check_same_shape(pred, target)
    return (pred - target).abs().mean()


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 1.0,
) -> torch.Tensor:
    """1 minus mean SSIM with a Gaussian window.

    Windows are evaluated on the valid region only (no padding). Value is
    in [0, 2] and zero iff the images are identical.
    """
    _check_same_shape(pred, target)
    if pred.dim() != 4:
        raise DimensionError(f"expected rank-4 batches, got rank {pred.dim()}")
    if pred.shape[-2] < window_size or pred.shape[-1] < window_size:
        raise InputError(
            f"spatial dims {tuple(pred.shape[-2:])} smaller than the "
            f"{window_size}x{window_size} window"
        )
    channels = pred.shape[1]
    window = _gaussian_window(window_size, sigma, pred.dtype, pred.device)
    kernel = window.expand(channels, 1, window_size, window_size)

    def wmean(x):
        return F.conv2d(x, kernel, groups=channels)

    mu_p = wmean(pred)
    mu_t = wmean(target)
    var_p = wmean(pred * pred) - mu_p * mu_p
    var_t = wmean(target * target) - mu_t * mu_t
    cov = wmean(pred * target) - mu_p * mu_t

    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    ssim_map = ((2 * mu_p * mu_t + c1) * (2 * cov + c2)) / (
        (mu_p * mu_p + mu_t * mu_t + c1) * (var_p + var_t + c2)
    )
    return 1.0 - ssim_map.mean()


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor, extractor) -> torch.Tensor:
    """MSE between feature taps of pred and target under a frozen extractor.

    Gradients flow through the pred branch only; the target features are
    computed without a graph.
    """
    _check_same_shape(pred, target)
    if not hasattr(extractor, "encode"):
        raise ConfigError("perceptual extractor must expose an encode(x) method")
    taps_pred = extractor.encode(pred)
    with torch.no_grad():
        taps_target = extractor.encode(target)
    if len(taps_pred) != len(taps_target):
        raise ConfigError("extractor returned inconsistent stage counts")
    total = pred.new_zeros(())
    for tp, tt in zip(taps_pred, taps_target):
        total = total + F.mse_loss(tp, tt.detach())
    return total / len(taps_pred)


class TapProjections(nn.Module):
    """Per-stage 1x1 convs mapping student tap widths onto teacher widths.

    Stages whose widths already match get an identity. The projections are
    trainable and belong to the compression phase's optimizer, not to the
    student checkpoint. Projections start at zero, so the initial
    alignment loss equals the weighted teacher feature energy and training
    measures how much of it the student captures.
    """

    def __init__(self, student_widths, teacher_widths):
        super().__init__()
        if len(student_widths) != len(teacher_widths):
            raise ConfigError(
                f"stage counts differ: {len(student_widths)} vs {len(teacher_widths)}"
            )
        layers = []
        for ws, wt in zip(student_widths, teacher_widths):
            layers.append(nn.Identity() if ws == wt else nn.Conv2d(ws, wt, kernel_size=1))
        self.stages = nn.ModuleList(layers)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.zeros_(m.weight)
                nn.init.zeros_(m.bias)

    def __len__(self) -> int:
        return len(self.stages)

    def __getitem__(self, i: int) -> nn.Module:
        return self.stages[i]


def context_align_loss(
    teacher_taps: list[torch.Tensor],
    student_taps: list[torch.Tensor],
    weights: AlignWeights,
    projections: TapProjections | None = None,
) -> torch.Tensor:
    """Weighted per-stage mean squared difference between teacher and
    (projected) student feature maps.

    Teacher taps are treated as constants; gradients reach the student and
    the projections only. Teacher maps are resized bilinearly if their
    spatial size differs from the student's.
    """
    if len(teacher_taps) != len(student_taps):
        raise ConfigError(
            f"tap stage counts differ: {len(teacher_taps)} vs {len(student_taps)}"
        )
    if len(weights.w) != len(student_taps):
        raise ConfigError(
            f"got {len(weights.w)} alignment weights for {len(student_taps)} stages"
        )
    if projections is not None and len(projections) != len(student_taps):
        raise ConfigError("projection stage count does not match the taps")

    total = student_taps[0].new_zeros(())
    for i, (t, s) in enumerate(zip(teacher_taps, student_taps)):
        t = t.detach()
        if projections is not None:
            s = projections[i](s)
        if t.shape[-2:] != s.shape[-2:]:
            t = F.interpolate(t, size=s.shape[-2:], mode="bilinear", align_corners=False)
        if t.shape != s.shape:
            raise DimensionError(
                f"stage {i}: aligned tap shapes differ {tuple(t.shape)} vs {tuple(s.shape)}"
            )
        total = total + weights.w[i] * F.mse_loss(s, t)
    return total


def moc_loss(
    student_out: torch.Tensor,
    target: torch.Tensor,
    teacher_taps: list[torch.Tensor] | None,
    student_taps: list[torch.Tensor] | None,
    weights: LossWeights,
    align_weights: AlignWeights | None = None,
    projections: TapProjections | None = None,
    extractor=None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Composite compression-phase loss.

    Returns the weighted total plus a dict of the unweighted component
    values (for logging). Zero-weight components are skipped entirely, so
    with weights (1, 0, 0) and no alignment the total equals the L1 loss
    bit for bit. ``align_weights=None`` disables the alignment term (the
    naive, supervision-only baseline).
    """
    parts = {"l1": 0.0, "ssim": 0.0, "perceptual": 0.0, "align": 0.0}
    total = student_out.new_zeros(())
    if weights.l1_weight > 0:
        component = l1_loss(student_out, target)
        parts["l1"] = float(component.detach())
        total = total + weights.l1_weight * component
    if weights.ssim_weight > 0:
        component = ssim_loss(student_out, target)
        parts["ssim"] = float(component.detach())
        total = total + weights.ssim_weight * component
    if weights.perceptual_weight > 0:
        if extractor is None:
            raise ConfigError("perceptual_weight > 0 requires an extractor")
        component = perceptual_loss(student_out, target, extractor)
        parts["perceptual"] = float(component.detach())
        total = total + weights.perceptual_weight * component
    if align_weights is not None:
        if teacher_taps is None or student_taps is None:
            raise ConfigError("alignment requires teacher and student taps")
        component = context_align_loss(teacher_taps, student_taps, align_weights, projections)
        parts["align"] = float(component.detach())
        total = total + component
    return total, parts
