"""Flat dotted-key run configuration and run manifests.

Config files are plain ``key = value`` lines (``#`` comments allowed),
e.g.::

    seed = 7
    moc.n_steps = 300
    bia.alpha = 0.95

Every key must exist in DEFAULTS; values are coerced to the default's
type. The fully resolved config is echoed into each run's manifest.json
so any number used by a run can be audited afterwards.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import InputError

DEFAULTS: dict[str, object] = {
    "seed": 0,
    # data generation
    "data.size": 64,
    "data.n": 160,
    # naive supervised teacher training
    "teacher.steps": 300,
    "teacher.batch_size": 8,
    "teacher.lr": 1e-4,
    "teacher.lr_end": 1e-6,
    # compression phase
    "moc.n_steps": 300,
    "moc.batch_size": 8,
    "moc.lr": 1e-4,
    "moc.lr_end": 1e-6,
    "moc.augment": True,
    # adaptation phase
    "bia.t_steps": 200,
    "bia.alpha": 0.95,
    "bia.lr": 1e-4,
    "bia.lr_end": 1e-6,
    "bia.batch_size": 8,
    "bia.mode": "full",
    # supervised loss weights
    "loss.l1_weight": 1.0,
    "loss.ssim_weight": 0.5,
    "loss.perceptual_weight": 0.1,
    # prompt classifier
    "prompts.steps": 400,
    "prompts.lr": 1e-3,
    "prompts.batch_size": 32,
    "prompts.dim": 32,
    "prompts.temperature": 1.0,
}


def _coerce(key: str, raw: str, default) -> object:
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise InputError(f"config key {key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as exc:
            raise InputError(f"config key {key}: expected an integer, got {raw!r}") from exc
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as exc:
            raise InputError(f"config key {key}: expected a number, got {raw!r}") from exc
    return raw


def parse_config_file(path: str | Path) -> dict[str, object]:
    """Parse a key-value config file; unknown keys are rejected."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no config file at {path}")
    values: dict[str, object] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise InputError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw, DEFAULTS[key])
    return values


def resolve_config(
    config_path: str | Path | None = None,
    overrides: dict[str, object] | None = None,
) -> dict[str, object]:
    """Defaults, overlaid by the config file, overlaid by CLI overrides."""
    resolved = dict(DEFAULTS)
    if config_path is not None:
        resolved.update(parse_config_file(config_path))
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise InputError(f"unknown config key {key!r}")
        if value is not None:
            resolved[key] = value
    return resolved


def write_manifest(out_dir: str | Path, verb: str, config: dict[str, object],
                   extra: dict | None = None) -> Path:
    """Record the verb, the fully resolved config, and any run outputs.

    Written as run_manifest.json so it never collides with dataset or
    checkpoint manifests living in the same tree.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"verb": verb, "config": config}
    if extra:
        payload.update(extra)
    path = out / "run_manifest.json"
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return path
