"""Configurable encoder-decoder dehazing networks.

One network family covers both the large teacher and the compact student:
a U-Net style encoder-decoder whose per-stage encoder outputs ("taps") are
exposed for feature alignment and perceptual losses. The module also owns
parameter/FLOP accounting and the on-disk checkpoint format.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, InputError

ROLES = ("teacher", "student-syn", "student-rea")

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    """Architecture hyperparameters for one encoder-decoder instance.

    ``encoder_widths[i]`` is the channel count of encoder stage i; stage 0
    runs at full resolution and every later stage halves the spatial size.
    The decoder mirrors the encoder stage-for-stage with skip connections.
    """

    encoder_widths: tuple[int, ...]
    decoder_widths: tuple[int, ...]
    blocks_per_stage: int = 1
    in_channels: int = 3
    downsample_factor: int = 2

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        if len(self.encoder_widths) != len(self.decoder_widths):
            raise ConfigError(
                f"encoder/decoder stage counts differ: "
                f"{len(self.encoder_widths)} vs {len(self.decoder_widths)}"
            )
        if len(self.encoder_widths) == 0:
            raise ConfigError("at least one stage is required")
        if any(w < 1 for w in self.encoder_widths + self.decoder_widths):
            raise ConfigError("all stage widths must be >= 1")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        if self.downsample_factor != 2:
            raise ConfigError("only downsample_factor=2 is supported")

    @property
    def stages(self) -> int:
        return len(self.encoder_widths)

    def to_dict(self) -> dict:
        return {
            "kind": "dehaze_net",
            "encoder_widths": list(self.encoder_widths),
            "decoder_widths": list(self.decoder_widths),
            "blocks_per_stage": self.blocks_per_stage,
            "in_channels": self.in_channels,
            "downsample_factor": self.downsample_factor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        if d.get("kind", "dehaze_net") != "dehaze_net":
            raise ConfigError(f"not a dehaze_net config: kind={d.get('kind')!r}")
        return cls(
            encoder_widths=tuple(d["encoder_widths"]),
            decoder_widths=tuple(d["decoder_widths"]),
            blocks_per_stage=int(d.get("blocks_per_stage", 1)),
            in_channels=int(d.get("in_channels", 3)),
            downsample_factor=int(d.get("downsample_factor", 2)),
        )


def teacher_config() -> NetConfig:
    """Default large network: 4 stages, widths 32..256, 2 blocks per stage."""
    return NetConfig((32, 64, 128, 256), (32, 64, 128, 256), blocks_per_stage=2)


def student_config() -> NetConfig:
    """Default compact network: 4 stages, widths 8..64, 1 block per stage."""
    return NetConfig((8, 16, 32, 64), (8, 16, 32, 64), blocks_per_stage=1)


def seed_init(module: nn.Module, seed: int) -> nn.Module:
    """Re-initialize conv/linear weights from an explicit generator.

    Replicates the default fan-in uniform scheme so behaviour matches stock
    layers, but is independent of the process-global RNG: the same seed
    always yields bitwise-identical parameters.
    """
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in, _ = nn.init._calculate_fan_in_and_fan_out(m.weight)
            bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
    return module


def _conv3(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)


class DehazeNet(nn.Module):
    """Encoder-decoder dehazing network with per-stage encoder taps.

    ``forward`` returns ``(output, taps)`` where ``output`` matches the
    input shape with values in [0, 1] (sigmoid head) and ``taps[i]`` is the
    encoder feature map of stage i at resolution ``input / 2**i``.
    """

    def __init__(self, config: NetConfig, role: str = "student-syn", seed: int = 0):
        super().__init__()
        if role not in ROLES:
            raise ConfigError(f"role must be one of {ROLES}, got {role!r}")
        self.config = config
        self.role = role

        enc_stages = []
        prev = config.in_channels
        for i, width in enumerate(config.encoder_widths):
            layers: list[nn.Module] = [
                _conv3(prev, width, stride=1 if i == 0 else config.downsample_factor),
                nn.SiLU(inplace=True),
            ]
            for _ in range(config.blocks_per_stage):
                layers += [_conv3(width, width), nn.SiLU(inplace=True)]
            enc_stages.append(nn.Sequential(*layers))
            prev = width
        self.encoder_stages = nn.ModuleList(enc_stages)

        wd = config.decoder_widths
        we = config.encoder_widths
        self.bottleneck = nn.Sequential(_conv3(we[-1], wd[-1]), nn.SiLU(inplace=True))
        ups, fuses = [], []
        for i in range(config.stages - 2, -1, -1):
            ups.append(nn.Sequential(_conv3(wd[i + 1], wd[i]), nn.SiLU(inplace=True)))
            fuses.append(nn.Sequential(_conv3(wd[i] + we[i], wd[i]), nn.SiLU(inplace=True)))
        self.up_convs = nn.ModuleList(ups)
        self.fuse_convs = nn.ModuleList(fuses)
        self.head = _conv3(wd[0], config.in_channels)

        seed_init(self, seed)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4:
            raise DimensionError(f"expected rank-4 input (B,C,H,W), got rank {x.dim()}")
        if x.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"expected {self.config.in_channels} channels, got {x.shape[1]}"
            )
        divisor = self.config.downsample_factor ** (self.config.stages - 1)
        if x.shape[-2] % divisor or x.shape[-1] % divisor:
            raise DimensionError(
                f"spatial dims {tuple(x.shape[-2:])} must be divisible by {divisor}"
            )

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Run the encoder only, returning the per-stage feature taps."""
        self._check_input(x)
        taps = []
        h = x
        for stage in self.encoder_stages:
            h = stage(h)
            taps.append(h)
        return taps

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        taps = self.encode(x)
        h = self.bottleneck(taps[-1])
        for j, i in enumerate(range(self.config.stages - 2, -1, -1)):
            h = F.interpolate(h, scale_factor=self.config.downsample_factor, mode="nearest")
            h = self.up_convs[j](h)
            h = self.fuse_convs[j](torch.cat([h, taps[i]], dim=1))
        y = torch.sigmoid(self.head(h))
        return y, taps


def run_model(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Apply a model and return just the image output.

    Accepts modules that return either a plain tensor or an
    ``(output, taps)`` tuple, so trainers and evaluators stay agnostic to
    the backbone.
    """
    out = model(x)
    if isinstance(out, tuple):
        out = out[0]
    return out


def param_count(model: nn.Module) -> int:
    """Exact number of scalar parameters in the model."""
    return sum(p.numel() for p in model.parameters())


def flops_estimate(model: nn.Module, input_shape: tuple[int, ...]) -> int:
    """Analytic FLOP count (multiply-accumulates x2) for one forward pass.

    Counts conv and linear layers only; activations, normalization and
    elementwise ops are excluded. Output spatial sizes are taken from a
    shape-tracing forward pass with the given input shape.
    """
    counts: list[int] = []
    hooks = []

    def conv_hook(mod: nn.Conv2d, inputs, output):
        cin_per_group = mod.in_channels // mod.groups
        k = mod.kernel_size[0] * mod.kernel_size[1]
        out_elems = output.numel()  # B * Cout * Hout * Wout
        counts.append(2 * cin_per_group * k * out_elems)

    def linear_hook(mod: nn.Linear, inputs, output):
        batch = output.numel() // mod.out_features
        counts.append(2 * mod.in_features * mod.out_features * batch)

    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            hooks.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            hooks.append(m.register_forward_hook(linear_hook))
    try:
        param = next(iter(model.parameters()), None)
        dtype = param.dtype if param is not None else torch.float32
        dummy = torch.zeros(*input_shape, dtype=dtype)
        with torch.no_grad():
            model(dummy)
    finally:
        for h in hooks:
            h.remove()
    return int(sum(counts))


def _blob_name(param_name: str) -> str:
    return param_name + ".bin"


def save_checkpoint(
    model: nn.Module,
    out_dir: str | Path,
    *,
    config: dict,
    role: str,
    step: int,
    phase: str,
) -> Path:
    """Write a checkpoint directory: manifest.json plus one float32 blob
    per named parameter (little-endian, manifest order)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = []
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy().astype("<f4", copy=False)
        arr.tofile(out / _blob_name(name))
        params.append({"name": name, "shape": list(p.shape)})
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "net_config": config,
        "role": role,
        "step": int(step),
        "phase": phase,
        "params": params,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return out


def read_manifest(ckpt_dir: str | Path) -> dict:
    path = Path(ckpt_dir) / "manifest.json"
    if not path.is_file():
        raise InputError(f"no manifest.json under {ckpt_dir}")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format: {manifest.get('format_version')}")
    return manifest


def load_params(model: nn.Module, ckpt_dir: str | Path, manifest: dict) -> nn.Module:
    """Fill ``model`` parameters from checkpoint blobs, in manifest order."""
    ckpt = Path(ckpt_dir)
    model_params = dict(model.named_parameters())
    names = [entry["name"] for entry in manifest["params"]]
    if list(model_params.keys()) != names:
        raise ConfigError("checkpoint parameter names do not match the model")
    with torch.no_grad():
        for entry in manifest["params"]:
            target = model_params[entry["name"]]
            blob = np.fromfile(ckpt / _blob_name(entry["name"]), dtype="<f4")
            if blob.size != target.numel():
                raise ConfigError(
                    f"blob size mismatch for {entry['name']}: "
                    f"{blob.size} vs {target.numel()}"
                )
            target.copy_(torch.from_numpy(blob.reshape(tuple(entry["shape"]))))
    return model


def load_checkpoint(ckpt_dir: str | Path) -> tuple[DehazeNet, dict]:
    """Rebuild a DehazeNet from a checkpoint directory."""
    manifest = read_manifest(ckpt_dir)
    config = NetConfig.from_dict(manifest["net_config"])
    model = DehazeNet(config, role=manifest.get("role", "student-syn"))
    load_params(model, ckpt_dir, manifest)
    return model, manifest


def params_vector(model: nn.Module) -> torch.Tensor:
    """Flat, order-stable copy of all parameters (for EMA checks/diffs)."""
    return torch.cat([p.detach().reshape(-1).clone() for p in model.parameters()])
