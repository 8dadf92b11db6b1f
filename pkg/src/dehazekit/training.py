"""Two-phase training: teacher-to-student compression, then bilevel
adaptation to unlabeled real-domain images.

Phase 1 (``run_moc``) distills a frozen teacher into a compact student by
descending the composite supervised loss plus the feature-alignment loss
on paired synthetic data.

Phase 2 (``run_bia``) alternates, per step, a gradient update of the
lower-level model on real images (prompt-classifier haze loss plus an L1
consistency pull toward the upper model's output) with an exponential
moving average update of the upper-level model toward the lower one. The
upper model never receives gradients; it changes only through the EMA.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch
import torch.nn as nn

from .data import PairedDataset, RealDataset, augment_pair
from .errors import ConfigError, InputError, NumericError, StateError
from .guidance import ImageEmbeddingBackend, PromptPair, haze_loss
from .losses import AlignWeights, LossWeights, TapProjections, l1_loss, moc_loss
from .models import DehazeNet, run_model, save_checkpoint

BIA_MODES = ("full", "lower-only", "upper-only")


@dataclass
class TrainConfig:
    """All scalars of the two training phases."""

    eta_moc: float = 1e-4          # compression-phase starting learning rate
    eta_bia: float = 1e-4          # adaptation-phase starting learning rate
    lr_end: float = 1e-6           # cosine annealing floor, both phases
    alpha: float = 0.95            # EMA coefficient of the upper model
    n_moc: int = 300               # compression steps
    t_bia: int = 200               # adaptation steps
    batch_size: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    optimizer: str = "adam"        # "sgd" exists for gradient-audit tests
    augment: bool = True
    crop_size: int | None = None   # None: full-frame crops
    temperature: float = 1.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    align_weights: tuple[float, ...] | None = None  # None: uniform 1/L

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in [0,1], got {self.alpha}")
        # zero step sizes are allowed (degenerate no-op runs used by audits)
        if self.eta_moc < 0 or self.eta_bia < 0 or self.lr_end < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.lr_end > min(self.eta_moc, self.eta_bia):
            raise ConfigError("cosine schedule must not rise: lr_end <= starting rates")
        if self.n_moc < 0 or self.t_bia < 0:
            raise ConfigError("step counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def cosine_lr(step: int, total: int, start: float, end: float) -> float:
    """Cosine annealing from ``start`` down to ``end`` over ``total`` steps."""
    if total <= 1:
        return start
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * frac))


def _make_optimizer(params, cfg: TrainConfig, lr: float) -> torch.optim.Optimizer:
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=lr)
    return torch.optim.Adam(
        params, lr=lr, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps
    )


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


class _CsvLog:
    def __init__(self, path: str | Path | None, header: list[str]):
        self.file = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.file = open(path, "w", newline="")
            self.writer = csv.writer(self.file)
            self.writer.writerow(header)

    def row(self, values) -> None:
        if self.file is not None:
            self.writer.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in values])

    def close(self) -> None:
        if self.file is not None:
            self.file.close()
            self.file = None


def _freeze(model: nn.Module) -> nn.Module:
    model.requires_grad_(False)
    model.eval()
    return model


def _sample_pairs(
    data: PairedDataset, cfg: TrainConfig, gen: torch.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    idx = torch.randint(len(data), (cfg.batch_size,), generator=gen)
    hazy, clean = data.batch(idx)
    if cfg.augment:
        out_h, out_c = [], []
        for i in range(hazy.shape[0]):
            aug_seed = int(torch.randint(2**31 - 1, (1,), generator=gen))
            h, c = augment_pair(hazy[i], clean[i], aug_seed, crop_size=cfg.crop_size)
            out_h.append(h)
            out_c.append(c)
        hazy, clean = torch.stack(out_h), torch.stack(out_c)
    return hazy, clean


def run_moc(
    teacher: DehazeNet,
    student: DehazeNet,
    data: PairedDataset,
    cfg: TrainConfig,
    *,
    use_align: bool = True,
    log_path: str | Path | None = None,
    ckpt_dir: str | Path | None = None,
    projections: TapProjections | None = None,
) -> DehazeNet:
    """Compression phase: distill the frozen teacher into the student.

    Runs ``cfg.n_moc`` optimizer steps on the composite loss (L1, SSIM,
    perceptual against the teacher encoder, plus feature alignment) over
    seeded batches of the paired dataset. With ``n_moc == 0`` the student
    is returned with parameters untouched. ``use_align=False`` drops the
    alignment term, giving the supervision-only baseline at an otherwise
    identical budget.
    """
    if len(data) == 0:
        raise InputError("paired dataset is empty")
    if cfg.n_moc == 0:
        return student
    _freeze(teacher)
    student.train()
    student.requires_grad_(True)

    stages = student.config.stages
    if teacher.config.stages != stages:
        raise ConfigError("teacher and student must share the stage count")
    align: AlignWeights | None = None
    if use_align:
        if projections is None:
            projections = TapProjections(
                student.config.encoder_widths, teacher.config.encoder_widths
            )
        align = AlignWeights(
            w=cfg.align_weights if cfg.align_weights is not None
            else tuple(1.0 / stages for _ in range(stages))
        )

    gen = torch.Generator().manual_seed(cfg.seed)
    trainable = list(student.parameters())
    if projections is not None:
        trainable += list(projections.parameters())
    opt = _make_optimizer(trainable, cfg, cfg.eta_moc)
    log = _CsvLog(
        log_path,
        ["step", "lr", "loss_total", "loss_l1", "loss_ssim", "loss_perceptual", "loss_align"],
    )
    try:
        for step in range(cfg.n_moc):
            _set_lr(opt, cosine_lr(step, cfg.n_moc, cfg.eta_moc, cfg.lr_end))
            hazy, clean = _sample_pairs(data, cfg, gen)
            if align is not None:
                with torch.no_grad():
                    _, teacher_taps = teacher(hazy)
            else:
                teacher_taps = None
            student_out, student_taps = student(hazy)
            total, parts = moc_loss(
                student_out, clean, teacher_taps, student_taps,
                cfg.loss_weights, align, projections, extractor=teacher,
            )
            if not torch.isfinite(total):
                raise NumericError(f"non-finite compression loss at step {step}: {parts}")
            opt.zero_grad()
            total.backward()
            opt.step()
            log.row([step, opt.param_groups[0]["lr"], float(total.detach()),
                     parts["l1"], parts["ssim"], parts["perceptual"], parts["align"]])
    finally:
        log.close()
    if ckpt_dir is not None:
        save_checkpoint(
            student, ckpt_dir, config=student.config.to_dict(),
            role=student.role, step=cfg.n_moc, phase="student_moc_final",
        )
    return student


def train_teacher(
    model: DehazeNet,
    data: PairedDataset,
    cfg: TrainConfig,
    *,
    steps: int | None = None,
    log_path: str | Path | None = None,
    ckpt_dir: str | Path | None = None,
) -> DehazeNet:
    """Naive end-to-end supervised training (no distillation).

    Used to produce the teacher, and as the supervision-only baseline.
    The perceptual term is dropped because no frozen extractor exists yet.
    """
    if len(data) == 0:
        raise InputError("paired dataset is empty")
    n = cfg.n_moc if steps is None else steps
    if n == 0:
        return model
    model.train()
    model.requires_grad_(True)
    weights = replace(cfg.loss_weights, perceptual_weight=0.0)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = _make_optimizer(model.parameters(), cfg, cfg.eta_moc)
    log = _CsvLog(log_path, ["step", "lr", "loss_total", "loss_l1", "loss_ssim"])
    try:
        for step in range(n):
            _set_lr(opt, cosine_lr(step, n, cfg.eta_moc, cfg.lr_end))
            hazy, clean = _sample_pairs(data, cfg, gen)
            out, _ = model(hazy)
            total, parts = moc_loss(out, clean, None, None, weights)
            if not torch.isfinite(total):
                raise NumericError(f"non-finite supervised loss at step {step}: {parts}")
            opt.zero_grad()
            total.backward()
            opt.step()
            log.row([step, opt.param_groups[0]["lr"], float(total.detach()),
                     parts["l1"], parts["ssim"]])
    finally:
        log.close()
    if ckpt_dir is not None:
        save_checkpoint(
            model, ckpt_dir, config=model.config.to_dict(),
            role=model.role, step=n, phase="teacher_final",
        )
    return model


@dataclass
class BiAState:
    """Adaptation-phase state: the gradient-trained lower model, the
    EMA-tracked upper model, the shared optimizer, and the step counter."""

    lower: nn.Module
    upper: nn.Module
    step: int = 0
    optimizer: torch.optim.Optimizer | None = None
    history: list[torch.Tensor] = field(default_factory=list)

    def __post_init__(self):
        lower_cfg = getattr(self.lower, "config", None)
        upper_cfg = getattr(self.upper, "config", None)
        if lower_cfg != upper_cfg:
            raise ConfigError("lower and upper models must share the same config")


def bia_lower_step(
    state: BiAState,
    real_batch: torch.Tensor,
    prompts: PromptPair,
    backend: ImageEmbeddingBackend,
    cfg: TrainConfig,
    lr: float | None = None,
) -> dict[str, float]:
    """One gradient step of the lower model on a real batch.

    Loss = mean haze probability of the lower model's output, plus the L1
    distance to the upper model's output on the same batch (treated as a
    constant target). The upper model is untouched.
    """
    if not prompts.trained:
        raise StateError("prompts must be trained before the adaptation phase")
    if state.optimizer is None:
        state.optimizer = _make_optimizer(state.lower.parameters(), cfg, cfg.eta_bia)
    if lr is not None:
        _set_lr(state.optimizer, lr)

    out_lower = run_model(state.lower, real_batch)
    loss_haze = haze_loss(out_lower, prompts, backend, cfg.temperature)
    with torch.no_grad():
        out_upper = run_model(state.upper, real_batch)
    loss_consistency = l1_loss(out_lower, out_upper.detach())
    total = loss_haze + loss_consistency
    if not torch.isfinite(total):
        raise NumericError(
            f"non-finite adaptation loss at step {state.step}: "
            f"haze={float(loss_haze)}, consistency={float(loss_consistency)}"
        )
    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.step += 1
    return {
        "haze": float(loss_haze.detach()),
        "consistency": float(loss_consistency.detach()),
        "total": float(total.detach()),
    }


def bia_ema_step(state: BiAState, alpha: float) -> BiAState:
    """EMA update of the upper model: upper <- alpha*upper + (1-alpha)*lower.

    Arithmetic runs in float64 before storing back at the parameter dtype,
    keeping the trajectory within 1e-6 of the exact recursion. The lower
    model is untouched.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"alpha must lie in [0,1], got {alpha}")
    uppers = dict(state.upper.named_parameters())
    lowers = dict(state.lower.named_parameters())
    if uppers.keys() != lowers.keys():
        raise ConfigError("upper/lower parameter names do not match")
    with torch.no_grad():
        for name, up in uppers.items():
            low = lowers[name]
            if up.shape != low.shape:
                raise ConfigError(f"parameter shape mismatch at {name}")
            mixed = alpha * up.double() + (1.0 - alpha) * low.double()
            up.copy_(mixed.to(up.dtype))
    return state


def ema_distance(state: BiAState) -> float:
    """L2 norm of the flattened parameter difference upper - lower."""
    total = 0.0
    for up, low in zip(state.upper.parameters(), state.lower.parameters()):
        total += float(((up.detach() - low.detach()) ** 2).sum())
    return math.sqrt(total)


def run_bia(
    student: DehazeNet,
    real_data: RealDataset,
    prompts: PromptPair,
    backend: ImageEmbeddingBackend,
    cfg: TrainConfig,
    *,
    mode: str = "full",
    log_path: str | Path | None = None,
    ckpt_dir: str | Path | None = None,
    record: bool = False,
) -> tuple[DehazeNet, BiAState]:
    """Adaptation phase: returns the adapted model plus the final state.

    Modes:
      * ``full``: alternate one lower gradient step with one EMA update of
        the upper model; return the upper model.
      * ``lower-only``: gradient steps only, upper stays at the hand-off
        parameters (it still anchors the consistency loss); return lower.
      * ``upper-only``: fine-tune a single model on the haze loss alone,
        no consistency term and no EMA; return that model.

    Both models start as copies of the compression-phase student, so at
    step 0 upper == lower == student exactly. With ``record=True`` the
    state keeps a flat copy of the lower parameters after every step.
    """
    if mode not in BIA_MODES:
        raise ConfigError(f"mode must be one of {BIA_MODES}, got {mode!r}")
    if not prompts.trained:
        raise StateError("prompts must be trained before the adaptation phase")
    if cfg.t_bia > 0 and len(real_data) == 0:
        raise InputError("real dataset is empty")

    lower = copy.deepcopy(student)
    lower.role = "student-syn"
    upper = copy.deepcopy(student)
    upper.role = "student-rea"
    _freeze(upper)
    lower.train()
    lower.requires_grad_(True)
    _freeze(backend)

    state = BiAState(lower=lower, upper=upper)
    gen = torch.Generator().manual_seed(cfg.seed)
    log = _CsvLog(
        log_path,
        ["step", "lr", "loss_total", "loss_haze", "loss_consistency", "ema_distance"],
    )
    try:
        for t in range(cfg.t_bia):
            lr = cosine_lr(t, cfg.t_bia, cfg.eta_bia, cfg.lr_end)
            idx = torch.randint(len(real_data), (cfg.batch_size,), generator=gen)
            batch = real_data.batch(idx)
            if mode == "upper-only":
                parts = _upper_only_step(state, batch, prompts, backend, cfg, lr)
            else:
                parts = bia_lower_step(state, batch, prompts, backend, cfg, lr=lr)
                if mode == "full":
                    bia_ema_step(state, cfg.alpha)
            if record:
                state.history.append(
                    torch.cat([p.detach().reshape(-1).clone() for p in lower.parameters()])
                )
            log.row([t, lr, parts["total"], parts["haze"], parts["consistency"],
                     ema_distance(state)])
    finally:
        log.close()

    result = {"full": upper, "lower-only": lower, "upper-only": lower}[mode]
    if ckpt_dir is not None:
        save_checkpoint(
            result, ckpt_dir, config=result.config.to_dict(),
            role=result.role, step=cfg.t_bia, phase="student_bia_final",
        )
    return result, state


def _upper_only_step(
    state: BiAState,
    batch: torch.Tensor,
    prompts: PromptPair,
    backend: ImageEmbeddingBackend,
    cfg: TrainConfig,
    lr: float,
) -> dict[str, float]:
    """Ablation: descend the haze loss alone on a single model (held in
    ``state.lower``), with no consistency anchor and no EMA."""
    if state.optimizer is None:
        state.optimizer = _make_optimizer(state.lower.parameters(), cfg, cfg.eta_bia)
    _set_lr(state.optimizer, lr)
    out = run_model(state.lower, batch)
    loss = haze_loss(out, prompts, backend, cfg.temperature)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite haze loss at step {state.step}")
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return {"haze": float(loss.detach()), "consistency": 0.0, "total": float(loss.detach())}
