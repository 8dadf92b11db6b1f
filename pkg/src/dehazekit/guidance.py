"""Real-domain supervision: a haze/clear prompt-pair classifier.

A small convolutional image encoder maps images to unit vectors in a
d-dimensional embedding space; two learnable prompt embeddings (haze and
clear) classify an image by the two-way softmax over its cosine
similarities. Training minimizes binary cross entropy on labeled
hazy/clear images. The mean predicted haze probability of a batch serves
as the adaptation loss: driving model outputs toward the "clear" prompt.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError, NumericError, StateError
from .models import load_params, read_manifest, save_checkpoint, seed_init

EMBED_DIM = 32


DARK_CHANNEL_TEMP = 0.05


def soft_dark_channel(images: torch.Tensor, temp: float = DARK_CHANNEL_TEMP) -> torch.Tensor:
    """Smooth per-pixel channel minimum, (B, 1, H, W).

    A softmin keeps the haze cue differentiable everywhere, which the
    finite-difference gradient audits of the adaptation loss rely on.
    """
    return -temp * torch.logsumexp(-images / temp, dim=1, keepdim=True)


class ImageEmbeddingBackend(nn.Module):
    """Three-stage strided conv encoder with global pooling; produces
    L2-normalized embeddings of dimension ``dim``.

    Alongside RGB the encoder sees a soft dark-channel plane, the
    classic per-pixel haze statistic, so residual haze stays visible in
    the embedding space.
    """

    def __init__(self, dim: int = EMBED_DIM, widths=(16, 32, 64), in_channels: int = 3,
                 seed: int = 0, dark_channel_cue: bool = True):
        super().__init__()
        self.dim = int(dim)
        self.widths = tuple(int(w) for w in widths)
        self.in_channels = int(in_channels)
        self.dark_channel_cue = bool(dark_channel_cue)
        layers: list[nn.Module] = []
        prev = self.in_channels + (1 if self.dark_channel_cue else 0)
        for w in self.widths:
            layers += [nn.Conv2d(prev, w, kernel_size=3, stride=2, padding=1),
                       nn.SiLU(inplace=True)]
            prev = w
        self.features = nn.Sequential(*layers)
        self.project = nn.Linear(prev, self.dim)
        seed_init(self, seed)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """Embed a (B, 3, H, W) batch into unit vectors of shape (B, dim)."""
        if images.dim() != 4:
            raise InputError(f"expected a rank-4 batch, got rank {images.dim()}")
        feats = images
        if self.dark_channel_cue:
            feats = torch.cat([images, soft_dark_channel(images)], dim=1)
        h = self.features(feats)
        h = h.mean(dim=(-2, -1))
        e = self.project(h)
        return e / e.norm(dim=-1, keepdim=True).clamp_min(1e-12)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.encode_image(images)

    def config_dict(self) -> dict:
        return {
            "kind": "embedding_backend",
            "dim": self.dim,
            "widths": list(self.widths),
            "in_channels": self.in_channels,
            "dark_channel_cue": self.dark_channel_cue,
        }

    def save(self, out_dir: str | Path, step: int = 0, phase: str = "prompts") -> Path:
        return save_checkpoint(
            self, out_dir, config=self.config_dict(), role="backend", step=step, phase=phase
        )

    @classmethod
    def load(cls, ckpt_dir: str | Path) -> "ImageEmbeddingBackend":
        manifest = read_manifest(ckpt_dir)
        cfg = manifest["net_config"]
        if cfg.get("kind") != "embedding_backend":
            raise ConfigError(f"not an embedding backend checkpoint: {cfg.get('kind')!r}")
        backend = cls(
            dim=cfg["dim"], widths=cfg["widths"], in_channels=cfg["in_channels"],
            dark_channel_cue=cfg.get("dark_channel_cue", True),
        )
        load_params(backend, ckpt_dir, manifest)
        backend.requires_grad_(False)
        backend.eval()
        return backend


@dataclass
class PromptPair:
    """Learnable haze/clear prompt embeddings plus training metadata."""

    haze: torch.Tensor
    clear: torch.Tensor
    trained: bool = False
    holdout_accuracy: float | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.haze.shape != self.clear.shape or self.haze.dim() != 1:
            raise ConfigError("prompts must be two vectors of the same dimension")
        if not (torch.isfinite(self.haze).all() and torch.isfinite(self.clear).all()):
            raise NumericError("prompt embeddings must be finite")

    @property
    def dim(self) -> int:
        return self.haze.shape[0]

    @classmethod
    def init(cls, dim: int = EMBED_DIM, seed: int = 0) -> "PromptPair":
        gen = torch.Generator().manual_seed(int(seed))
        return cls(
            haze=torch.randn(dim, generator=gen),
            clear=torch.randn(dim, generator=gen),
            seed=seed,
        )

    def save(self, path: str | Path) -> None:
        payload = {
            "dim": self.dim,
            "haze_embed": [float(v) for v in self.haze.detach().cpu()],
            "clear_embed": [float(v) for v in self.clear.detach().cpu()],
            "holdout_accuracy": self.holdout_accuracy,
            "seed": self.seed,
            "trained": self.trained,
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)

    @classmethod
    def load(cls, path: str | Path) -> "PromptPair":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"no prompt file at {path}")
        with open(path) as f:
            payload = json.load(f)
        return cls(
            haze=torch.tensor(payload["haze_embed"], dtype=torch.float32),
            clear=torch.tensor(payload["clear_embed"], dtype=torch.float32),
            trained=bool(payload.get("trained", False)),
            holdout_accuracy=payload.get("holdout_accuracy"),
            seed=payload.get("seed"),
        )


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two vectors, in [-1, 1]."""
    if float(a.detach().norm()) == 0.0 or float(b.detach().norm()) == 0.0:
        raise NumericError("cosine similarity of a zero vector is undefined")
    return torch.dot(a, b) / (a.norm() * b.norm())


def haze_probabilities(
    images: torch.Tensor,
    prompts: PromptPair,
    backend: ImageEmbeddingBackend,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Per-image probability of the haze class, shape (B,), values in (0,1).

    Two-way softmax over the cosine similarities between the image
    embedding and the haze/clear prompts. The complementary clear
    probability is exactly ``1 - haze``.
    """
    embeds = backend.encode_image(images)
    prompt_stack = torch.stack([prompts.haze, prompts.clear]).to(embeds.dtype)
    sims = F.cosine_similarity(embeds.unsqueeze(1), prompt_stack.unsqueeze(0), dim=-1)
    return torch.softmax(sims / temperature, dim=-1)[:, 0]


def haze_probability(
    image: torch.Tensor,
    prompts: PromptPair,
    backend: ImageEmbeddingBackend,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Scalar haze probability of one (3, H, W) image."""
    if image.dim() == 3:
        image = image.unsqueeze(0)
    return haze_probabilities(image, prompts, backend, temperature)[0]


def clear_probability(
    image: torch.Tensor,
    prompts: PromptPair,
    backend: ImageEmbeddingBackend,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Scalar clear probability; by construction 1 - haze_probability."""
    return 1.0 - haze_probability(image, prompts, backend, temperature)


def binary_cross_entropy(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean BCE of predicted probabilities against {0,1} labels.

    Uses xlogy so a perfectly confident correct prediction contributes
    exactly zero instead of 0*log(0).
    """
    return -(torch.xlogy(labels, probs) + torch.xlogy(1.0 - labels, 1.0 - probs)).mean()


def _as_image_list(images) -> list[torch.Tensor]:
    if hasattr(images, "images"):
        images = images.images
    elif hasattr(images, "hazy"):
        images = images.hazy
    return list(images)


def train_prompts(
    haze_images,
    clear_images,
    backend: ImageEmbeddingBackend,
    steps: int = 400,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 32,
    holdout_frac: float = 0.2,
    temperature: float = 1.0,
) -> PromptPair:
    """Fit the prompt pair (and the surrogate backend jointly) with BCE.

    ``haze_images``/``clear_images`` may be lists of (3, H, W) tensors or
    dataset objects. A held-out fraction of each class measures the final
    classification accuracy at threshold 0.5; the trained pair records it.
    The backend is frozen on return.
    """
    hazy = _as_image_list(haze_images)
    clear = _as_image_list(clear_images)
    if not hazy or not clear:
        raise InputError("both the hazy and the clear class must be non-empty")

    gen = torch.Generator().manual_seed(int(seed))
    prompts = PromptPair.init(dim=backend.dim, seed=seed)
    haze_vec = prompts.haze.clone().requires_grad_(True)
    clear_vec = prompts.clear.clone().requires_grad_(True)

    def split(items):
        order = torch.randperm(len(items), generator=gen).tolist()
        n_hold = max(1, int(round(holdout_frac * len(items)))) if len(items) > 1 else 0
        hold = [items[i] for i in order[:n_hold]]
        train = [items[i] for i in order[n_hold:]] or hold
        return train, hold

    hazy_train, hazy_hold = split(hazy)
    clear_train, clear_hold = split(clear)

    backend.train()
    backend.requires_grad_(True)
    opt = torch.optim.Adam(
        [haze_vec, clear_vec, *backend.parameters()], lr=lr
    )
    per_class = max(1, batch_size // 2)
    for step in range(steps):
        idx_h = torch.randint(len(hazy_train), (per_class,), generator=gen)
        idx_c = torch.randint(len(clear_train), (per_class,), generator=gen)
        batch = torch.stack(
            [hazy_train[i] for i in idx_h] + [clear_train[i] for i in idx_c]
        )
        labels = torch.cat([torch.ones(per_class), torch.zeros(per_class)])
        pair = PromptPair(haze=haze_vec, clear=clear_vec, seed=seed)
        probs = haze_probabilities(batch, pair, backend, temperature)
        loss = binary_cross_entropy(probs, labels)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite prompt training loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()

    backend.requires_grad_(False)
    backend.eval()

    trained = PromptPair(
        haze=haze_vec.detach().clone(),
        clear=clear_vec.detach().clone(),
        trained=True,
        seed=seed,
    )
    correct = total = 0
    with torch.no_grad():
        for img, label in [(i, 1.0) for i in hazy_hold] + [(i, 0.0) for i in clear_hold]:
            p = float(haze_probability(img, trained, backend, temperature))
            correct += int((p >= 0.5) == bool(label))
            total += 1
    trained.holdout_accuracy = correct / total if total else None
    return trained


def haze_loss(
    batch: torch.Tensor,
    prompts: PromptPair,
    backend: ImageEmbeddingBackend,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Mean haze probability of a batch; the real-domain adaptation loss.

    Differentiable w.r.t. the batch pixels, hence w.r.t. any model that
    produced them. Requires a trained prompt pair.
    """
    if not prompts.trained:
        raise StateError("prompts must be trained before computing the adaptation loss")
    return haze_probabilities(batch, prompts, backend, temperature).mean()
