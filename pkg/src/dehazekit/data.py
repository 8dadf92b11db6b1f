"""Synthetic haze data: scattering-model synthesis, procedural scenes,
real-domain simulation, geometric augmentation, and PNG/manifest IO.

Images are float32 tensors in [0, 1], shaped (3, H, W) for single images
and (B, 3, H, W) for batches. The hazy image follows the atmospheric
scattering model: hazy = clean * t + airlight * (1 - t) with transmission
t = exp(-beta * depth).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import DimensionError, InputError

# Procedural clean scenes stay below the minimum airlight (0.7) so haze
# always brightens the scene; the dark-channel density ordering
# density(hazy) > density(clean) then holds for every generated pair.
CLEAN_MAX_BRIGHTNESS = 0.65

BETA_RANGE = (0.5, 2.5)
AIRLIGHT_RANGE = (0.7, 1.0)
DEPTH_MAX = 3.0


@dataclass
class HazeParams:
    """Parameters of one haze synthesis: airlight color, scattering
    coefficient, and a per-pixel depth map (arbitrary units)."""

    airlight: tuple[float, float, float]
    beta: float
    depth_map: torch.Tensor  # (H, W), nonnegative

    def __post_init__(self):
        self.airlight = tuple(float(a) for a in self.airlight)
        if len(self.airlight) != 3:
            raise InputError("airlight must have one value per RGB channel")
        if any(not (0.0 <= a <= 1.0) for a in self.airlight):
            raise InputError(f"airlight channels must lie in [0,1], got {self.airlight}")
        if not self.beta >= 0:
            raise InputError(f"beta must be >= 0, got {self.beta}")
        if not isinstance(self.depth_map, torch.Tensor):
            self.depth_map = torch.as_tensor(self.depth_map, dtype=torch.float32)
        if self.depth_map.dim() != 2:
            raise DimensionError("depth_map must be rank-2 (H, W)")
        if not torch.isfinite(self.depth_map).all() or (self.depth_map < 0).any():
            raise InputError("depth_map must be finite and nonnegative")

    def transmission(self) -> torch.Tensor:
        return torch.exp(-self.beta * self.depth_map)


def synthesize_haze(clean: torch.Tensor, params: HazeParams) -> torch.Tensor:
    """Apply the scattering model to one clean image.

    Deterministic; output is clipped to [0, 1]. Raises DimensionError when
    the depth map does not match the image's spatial size.
    """
    if clean.dim() != 3 or clean.shape[0] != 3:
        raise DimensionError(f"clean image must be (3, H, W), got {tuple(clean.shape)}")
    if params.depth_map.shape != clean.shape[-2:]:
        raise DimensionError(
            f"depth map {tuple(params.depth_map.shape)} does not match "
            f"image {tuple(clean.shape[-2:])}"
        )
    t = params.transmission().to(clean.dtype)
    airlight = torch.tensor(params.airlight, dtype=clean.dtype).view(3, 1, 1)
    hazy = clean * t + airlight * (1.0 - t)
    return hazy.clamp(0.0, 1.0)


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    """Gaussian-smoothed white noise rescaled to [0, 1]."""
    field = gaussian_filter(rng.standard_normal((size, size)), sigma=sigma)
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-12:
        return np.zeros((size, size))
    return (field - lo) / (hi - lo)


def procedural_clean(rng: np.random.Generator, size: int = 64) -> tuple[torch.Tensor, torch.Tensor]:
    """Generate a clean scene and its depth map.

    The scene is a smooth color gradient with a handful of geometric
    shapes; each shape sits at its own depth plateau on top of a smoothed
    random depth field normalized to [0, DEPTH_MAX].
    """
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    img = np.empty((3, size, size))
    for c in range(3):
        a, b, cc = rng.uniform(-1, 1, size=3)
        img[c] = a + b * xx + cc * yy
    lo, hi = img.min(), img.max()
    img = (img - lo) / max(hi - lo, 1e-12) * CLEAN_MAX_BRIGHTNESS

    depth = _smooth_field(rng, size, sigma=size / 8.0)

    n_shapes = int(rng.integers(3, 7))
    for _ in range(n_shapes):
        color = rng.uniform(0.0, CLEAN_MAX_BRIGHTNESS, size=3)
        shape_depth = rng.uniform(0.0, 1.0)
        cy, cx = rng.uniform(0.1, 0.9, size=2) * size
        radius = rng.uniform(0.06, 0.22) * size
        if rng.random() < 0.5:
            mask = (yy * size - cy) ** 2 + (xx * size - cx) ** 2 <= radius**2
        else:
            mask = (np.abs(yy * size - cy) <= radius) & (np.abs(xx * size - cx) <= radius)
        img[:, mask] = color[:, None]
        depth[mask] = shape_depth

    lo, hi = depth.min(), depth.max()
    depth = (depth - lo) / max(hi - lo, 1e-12) * DEPTH_MAX
    return (
        torch.from_numpy(img.astype(np.float32)),
        torch.from_numpy(depth.astype(np.float32)),
    )


@dataclass
class PairedDataset:
    """Index-aligned hazy/clean image pairs from the synthetic domain."""

    clean: list[torch.Tensor]
    hazy: list[torch.Tensor]
    seed: int = 0

    def __post_init__(self):
        if len(self.clean) != len(self.hazy):
            raise InputError(
                f"clean/hazy counts differ: {len(self.clean)} vs {len(self.hazy)}"
            )
        for img in self.clean + self.hazy:
            if img.min() < 0.0 or img.max() > 1.0:
                raise InputError("all pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.clean)

    def batch(self, indices) -> tuple[torch.Tensor, torch.Tensor]:
        idx = [int(i) for i in indices]
        return (
            torch.stack([self.hazy[i] for i in idx]),
            torch.stack([self.clean[i] for i in idx]),
        )

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pairs = []
        for i in range(len(self)):
            hazy_name, clean_name = f"hazy_{i:04d}.png", f"clean_{i:04d}.png"
            save_image(self.hazy[i], out / hazy_name)
            save_image(self.clean[i], out / clean_name)
            pairs.append({"hazy": hazy_name, "clean": clean_name})
        with open(out / "manifest.json", "w") as f:
            json.dump({"kind": "paired", "seed": self.seed, "pairs": pairs}, f, indent=2)
        return out

    @classmethod
    def load(cls, in_dir: str | Path) -> "PairedDataset":
        root = Path(in_dir)
        manifest = _read_dataset_manifest(root, expected_kind="paired")
        hazy = [load_image(root / p["hazy"]) for p in manifest["pairs"]]
        clean = [load_image(root / p["clean"]) for p in manifest["pairs"]]
        return cls(clean=clean, hazy=hazy, seed=int(manifest.get("seed", 0)))


@dataclass
class RealDataset:
    """Unlabeled images standing in for the real domain (no ground truth)."""

    images: list[torch.Tensor]
    seed: int = 0

    def __post_init__(self):
        for img in self.images:
            if img.min() < 0.0 or img.max() > 1.0:
                raise InputError("all pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.images)

    def batch(self, indices) -> torch.Tensor:
        return torch.stack([self.images[int(i)] for i in indices])

    def save(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        names = []
        for i, img in enumerate(self.images):
            name = f"real_{i:04d}.png"
            save_image(img, out / name)
            names.append(name)
        with open(out / "manifest.json", "w") as f:
            json.dump({"kind": "real", "seed": self.seed, "images": names}, f, indent=2)
        return out

    @classmethod
    def load(cls, in_dir: str | Path) -> "RealDataset":
        root = Path(in_dir)
        manifest = _read_dataset_manifest(root, expected_kind="real")
        images = [load_image(root / name) for name in manifest["images"]]
        return cls(images=images, seed=int(manifest.get("seed", 0)))


def _read_dataset_manifest(root: Path, expected_kind: str) -> dict:
    path = root / "manifest.json"
    if not path.is_file():
        raise InputError(f"no dataset manifest under {root}")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("kind") != expected_kind:
        raise InputError(
            f"expected a {expected_kind!r} dataset, found {manifest.get('kind')!r}"
        )
    return manifest


def _load_clean_source(clean_source, n: int, rng: np.random.Generator, size: int):
    """Yield n (clean, depth) pairs from a directory or procedurally."""
    if clean_source is None:
        for _ in range(n):
            yield procedural_clean(rng, size=size)
        return
    root = Path(clean_source)
    files = sorted(
        p for p in root.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    ) if root.is_dir() else []
    if not files:
        raise InputError(f"no clean images found under {clean_source}")
    for i in range(n):
        img = load_image(files[i % len(files)])
        img = _center_crop_resize(img, size)
        depth = torch.from_numpy(
            (_smooth_field(rng, size, sigma=size / 8.0) * DEPTH_MAX).astype(np.float32)
        )
        yield img, depth


def _center_crop_resize(img: torch.Tensor, size: int) -> torch.Tensor:
    c, h, w = img.shape
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    img = img[:, top : top + side, left : left + side]
    if side == size:
        return img
    return torch.nn.functional.interpolate(
        img.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
    ).squeeze(0).clamp(0.0, 1.0)


def build_synthetic_dataset(
    clean_source=None, n: int = 16, seed: int = 0, size: int = 64
) -> PairedDataset:
    """Generate n paired hazy/clean images with per-sample random haze.

    beta is drawn uniformly from BETA_RANGE, airlight is a gray value in
    AIRLIGHT_RANGE, and depth is a smoothed random field. Reproducible:
    the same seed yields a bitwise-identical dataset.
    """
    if n < 1:
        raise InputError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    clean_list, hazy_list = [], []
    for clean, depth in _load_clean_source(clean_source, n, rng, size):
        beta = float(rng.uniform(*BETA_RANGE))
        a = float(rng.uniform(*AIRLIGHT_RANGE))
        params = HazeParams(airlight=(a, a, a), beta=beta, depth_map=depth)
        clean_list.append(clean)
        hazy_list.append(synthesize_haze(clean, params))
    return PairedDataset(clean=clean_list, hazy=hazy_list, seed=seed)


REAL_AIRLIGHT_RANGE = (0.55, 1.0)
REAL_BETA_RANGE = (1.2, 3.2)
REAL_VEIL_RANGE = (0.05, 0.25)


def build_real_dataset(n: int = 16, seed: int = 0, size: int = 64) -> RealDataset:
    """Simulate an unlabeled real-domain set with a deliberately different
    haze process: spatially heterogeneous scattering, a strong per-channel
    color-cast airlight, and a global veil floor. Ground truth is
    discarded."""
    if n < 1:
        raise InputError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    images = []
    for _ in range(n):
        clean, depth = procedural_clean(rng, size=size)
        base_beta = rng.uniform(*REAL_BETA_RANGE)
        beta_field = base_beta * (0.5 + 1.0 * _smooth_field(rng, size, sigma=size / 6.0))
        t = np.exp(-beta_field * depth.numpy())
        # a distance-independent veil keeps some haze everywhere, unlike
        # the synthetic-domain process
        veil = rng.uniform(*REAL_VEIL_RANGE)
        t = torch.from_numpy(((1.0 - veil) * t).astype(np.float32))
        airlight = torch.from_numpy(
            rng.uniform(*REAL_AIRLIGHT_RANGE, size=3).astype(np.float32)
        ).view(3, 1, 1)
        hazy = (clean * t + airlight * (1.0 - t)).clamp(0.0, 1.0)
        images.append(hazy)
    return RealDataset(images=images, seed=seed)


LIGHT_BETA_RANGE = (0.3, 1.0)


def build_light_haze_dataset(n: int = 16, seed: int = 0, size: int = 64) -> RealDataset:
    """Mildly hazed procedural scenes, no ground truth retained.

    Used to give the haze/clear prompt classifier coverage of low haze
    severities, so the decision boundary sits next to the clean class and
    residual haze in model outputs stays detectable.
    """
    if n < 1:
        raise InputError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    images = []
    for _ in range(n):
        clean, depth = procedural_clean(rng, size=size)
        beta = float(rng.uniform(*LIGHT_BETA_RANGE))
        a = float(rng.uniform(*AIRLIGHT_RANGE))
        depth = depth * float(rng.uniform(0.3, 0.7))
        params = HazeParams(airlight=(a, a, a), beta=beta, depth_map=depth)
        images.append(synthesize_haze(clean, params))
    return RealDataset(images=images, seed=seed)


def apply_geometric(
    img: torch.Tensor, rot90: int, hflip: bool, top: int, left: int, crop: int
) -> torch.Tensor:
    """Rotate by rot90 quarter turns, optionally mirror, then crop."""
    out = torch.rot90(img, k=rot90 % 4, dims=(-2, -1))
    if hflip:
        out = torch.flip(out, dims=(-1,))
    h, w = out.shape[-2:]
    if crop > h or crop > w or top < 0 or left < 0 or top + crop > h or left + crop > w:
        raise InputError(f"crop window {crop}@({top},{left}) exceeds image {h}x{w}")
    return out[..., top : top + crop, left : left + crop].contiguous()


def augment_pair(
    hazy: torch.Tensor,
    clean: torch.Tensor,
    seed: int,
    crop_size: int | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Apply one random geometric transform identically to both images.

    Rotation from {0, 90, 180, 270} degrees, optional horizontal flip, and
    a random square crop (full frame by default).
    """
    if hazy.shape != clean.shape:
        raise DimensionError(
            f"hazy/clean shapes differ: {tuple(hazy.shape)} vs {tuple(clean.shape)}"
        )
    rng = np.random.default_rng(seed)
    rot = int(rng.integers(0, 4))
    flip = bool(rng.integers(0, 2))
    h, w = hazy.shape[-2:]
    if rot % 2 == 1:
        h, w = w, h
    crop = min(h, w) if crop_size is None else int(crop_size)
    if crop > h or crop > w:
        raise InputError(f"crop size {crop} exceeds image {h}x{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    return (
        apply_geometric(hazy, rot, flip, top, left, crop),
        apply_geometric(clean, rot, flip, top, left, crop),
    )


def save_image(img: torch.Tensor, path: str | Path) -> None:
    """Write a (3, H, W) float image in [0,1] as 8-bit RGB PNG.

    Quantization uses round-half-to-even.
    """
    if img.dim() != 3 or img.shape[0] != 3:
        raise DimensionError(f"expected (3, H, W), got {tuple(img.shape)}")
    arr = np.rint(img.detach().cpu().numpy() * 255.0).clip(0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_image(path: str | Path) -> torch.Tensor:
    """Read an RGB image file into a (3, H, W) float32 tensor in [0,1]."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"no image file at {path}")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1))
