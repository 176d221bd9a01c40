"""Segmentation surrogates behind one handle type.

Every handle maps a batch of images in [0, 1] (B x 3 x H x W) to per-pixel class
logits at the input resolution, differentiably in the image.  Transformer
handles also return one row-stochastic attention map per layer.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml

from .errors import ConfigurationError, ContractError, LoadError

FAMILIES = ("vit", "cnn")


@dataclass
class ModelOutput:
    logits: torch.Tensor  # B x C x H x W
    attention: list[torch.Tensor] | None = None  # per layer, B x T x T
    output_scale: float = 1.0
    token_grid: tuple[int, int] | None = None

    @property
    def probabilities(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=1)


def _check_image_size(h, w, minimum=4):
    if h < minimum or w < minimum:
        raise ConfigurationError(f"input {h}x{w} is smaller than {minimum}x{minimum}")


class ToyCNN(nn.Module):
    """Two-level encoder-decoder with a stride-2 skip; works at any input size."""

    def __init__(self, channels: int, num_classes: int):
        super().__init__()
        c = channels
        self.stem = nn.Conv2d(3, c, 3, stride=2, padding=1)
        self.down = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.context = nn.Conv2d(2 * c, 2 * c, 3, padding=2, dilation=2)
        self.fuse = nn.Conv2d(3 * c, c, 3, padding=1)
        self.head = nn.Conv2d(c, num_classes, 1)

    def forward(self, x):
        H, W = x.shape[-2:]
        _check_image_size(H, W)
        s = F.gelu(self.stem(x))
        d = F.gelu(self.down(s))
        d = d + F.gelu(self.context(d))
        u = F.interpolate(d, size=s.shape[-2:], mode="bilinear", align_corners=False)
        f = F.gelu(self.fuse(torch.cat([u, s], dim=1)))
        return F.interpolate(self.head(f), size=(H, W), mode="bilinear", align_corners=False)


def sincos_position_embedding(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine embedding, (h*w) x dim; dim must be divisible by 4."""
    quarter = dim // 4
    omega = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float32) / quarter))
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=torch.float32), torch.arange(w, dtype=torch.float32), indexing="ij"
    )
    ay = ys.reshape(-1, 1) * omega
    ax = xs.reshape(-1, 1) * omega
    return torch.cat([ay.sin(), ay.cos(), ax.sin(), ax.cos()], dim=1)


class _Block(nn.Module):
    def __init__(self, dim: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))
        self.scale = dim**-0.5

    def forward(self, x):
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        x = x + self.proj(attn @ v)
        x = x + self.mlp(self.norm2(x))
        return x, attn


class ToyViT(nn.Module):
    """Single-head tokenizing transformer with a light stride-2 pixel decoder."""

    def __init__(self, token_size: int, layers: int, num_classes: int, dim: int = 32, pixel_dim: int = 8):
        super().__init__()
        if dim % 4:
            raise ConfigurationError("embedding dim must be divisible by 4")
        self.token_size = token_size
        self.dim = dim
        self.embed = nn.Conv2d(3, dim, token_size, stride=token_size)
        self.blocks = nn.ModuleList(_Block(dim) for _ in range(layers))
        self.norm = nn.LayerNorm(dim)
        self.pixel = nn.Conv2d(3, pixel_dim, 3, stride=2, padding=1)
        self.head = nn.Conv2d(dim + pixel_dim, num_classes, 1)

    def forward(self, x):
        B, _, H, W = x.shape
        t = self.token_size
        if H % t or W % t:
            raise ConfigurationError(f"input {H}x{W} is not divisible by token size {t}")
        h, w = H // t, W // t
        tokens = self.embed(x).flatten(2).transpose(1, 2)
        tokens = tokens + sincos_position_embedding(h, w, self.dim).to(tokens)
        attention = []
        for block in self.blocks:
            tokens, attn = block(tokens)
            attention.append(attn)
        feats = self.norm(tokens).transpose(1, 2).reshape(B, self.dim, h, w)
        pix = F.gelu(self.pixel(x))
        feats = F.interpolate(feats, size=pix.shape[-2:], mode="bilinear", align_corners=False)
        logits = self.head(torch.cat([feats, pix], dim=1))
        logits = F.interpolate(logits, size=(H, W), mode="bilinear", align_corners=False)
        return logits, attention


@dataclass(frozen=True, eq=False)
class SurrogateHandle:
    name: str
    family: str
    module: nn.Module
    num_classes: int
    input_downscale: float = 1.0
    token_size: int | None = None
    mean: tuple[float, float, float] | None = None
    std: tuple[float, float, float] | None = None
    # parsed architecture description, used when persisting weights
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if not 0 < self.input_downscale <= 1:
            raise ConfigurationError("input_downscale must lie in (0, 1]")
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)

    def scaled_size(self, H: int, W: int) -> tuple[int, int]:
        if self.input_downscale == 1.0:
            return H, W
        return max(1, round(H * self.input_downscale)), max(1, round(W * self.input_downscale))

    def token_grid(self, H: int, W: int) -> tuple[int, int] | None:
        if self.token_size is None:
            return None
        h, w = self.scaled_size(H, W)
        return h // self.token_size, w // self.token_size

    def forward(self, images) -> ModelOutput:
        x = as_image_batch(images)
        H, W = x.shape[-2:]
        hs, ws = self.scaled_size(H, W)
        if (hs, ws) != (H, W):
            x = F.interpolate(x, size=(hs, ws), mode="bilinear", align_corners=False)
        if self.mean is not None:
            mean = torch.tensor(self.mean, dtype=x.dtype).view(1, 3, 1, 1)
            std = torch.tensor(self.std, dtype=x.dtype).view(1, 3, 1, 1)
            x = (x - mean) / std
        out = self.module(x)
        logits, attention = out if isinstance(out, (tuple, list)) else (out, None)
        if attention is not None:
            attention = list(attention)
            if not attention:
                attention = None
        if self.family == "vit" and attention is None:
            raise ContractError(f"{self.name}: vit handle produced no attention maps")
        if self.family == "cnn" and attention is not None:
            raise ContractError(f"{self.name}: cnn handle must not expose attention")
        if logits.ndim != 4 or logits.shape[1] != self.num_classes:
            raise ContractError(f"{self.name}: expected B x {self.num_classes} x h x w logits, got {tuple(logits.shape)}")
        if logits.shape[-2:] != (H, W):
            logits = F.interpolate(logits, size=(H, W), mode="bilinear", align_corners=False)
        grid = None
        if attention is not None and self.token_size is not None:
            grid = (hs // self.token_size, ws // self.token_size)
        return ModelOutput(logits=logits, attention=attention, output_scale=1.0, token_grid=grid)

    __call__ = forward


def as_image_batch(images) -> torch.Tensor:
    """Accept B x 3 x H x W / 3 x H x W tensors or H x W x 3 arrays (or lists of them)."""
    if isinstance(images, (list, tuple)):
        return torch.cat([as_image_batch(im) for im in images], dim=0)
    if isinstance(images, np.ndarray):
        if images.ndim != 3 or images.shape[2] != 3:
            raise ContractError(f"numpy images must be H x W x 3, got {images.shape}")
        return torch.from_numpy(np.ascontiguousarray(images.transpose(2, 0, 1))).float()[None]
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1] != 3:
        raise ContractError(f"image batch must be B x 3 x H x W, got {tuple(images.shape)}")
    return images.float()


def _seeded(seed: int, build: Callable[[], nn.Module]) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def make_toy_cnn(channels: int, num_classes: int, seed: int, name: str | None = None) -> SurrogateHandle:
    if channels < 1:
        raise ConfigurationError("channels must be positive")
    if num_classes < 2:
        raise ConfigurationError("num_classes must be at least 2")
    module = _seeded(seed, lambda: ToyCNN(channels, num_classes))
    spec = {"architecture": "toy_cnn", "num_classes": num_classes, "params": {"channels": channels}}
    return SurrogateHandle(name or f"toy_cnn_s{seed}", "cnn", module, num_classes, spec=spec)


def make_toy_vit(
    patch_token_size: int,
    layers: int,
    num_classes: int,
    seed: int,
    dim: int = 32,
    input_downscale: float = 1.0,
    name: str | None = None,
) -> SurrogateHandle:
    if patch_token_size < 1 or layers < 1:
        raise ConfigurationError("patch_token_size and layers must be positive")
    if num_classes < 2:
        raise ConfigurationError("num_classes must be at least 2")
    module = _seeded(seed, lambda: ToyViT(patch_token_size, layers, num_classes, dim=dim))
    spec = {
        "architecture": "toy_vit",
        "num_classes": num_classes,
        "params": {"patch_token_size": patch_token_size, "layers": layers, "dim": dim},
    }
    return SurrogateHandle(
        name or f"toy_vit_s{seed}", "vit", module, num_classes,
        input_downscale=input_downscale, token_size=patch_token_size, spec=spec,
    )


def pretrain_toy_model(
    handle: SurrogateHandle, samples, steps: int, seed: int = 0, lr: float = 1e-2, batch_size: int = 4
) -> SurrogateHandle:
    """Briefly fit a toy handle to labelled samples; returns a new handle.

    Optional: nothing in the attack requires trained surrogates, but fitted
    toy models make the mIoU numbers meaningful.
    """
    if steps <= 0:
        return handle
    module = copy.deepcopy(handle.module)
    trainee = dataclasses.replace(handle, module=module)
    module.train()
    for p in module.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(module.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    images = as_image_batch([s.image for s in samples])
    labels = torch.from_numpy(np.stack([s.labels for s in samples]))
    ignore = samples[0].ignore_value
    # inverse-frequency weights keep thin classes from being ignored entirely
    counts = torch.bincount(labels[labels != ignore].flatten(), minlength=handle.num_classes).float()
    weight = (counts.sum() / (counts + 1.0)).sqrt()
    weight = weight / weight.mean()
    for _ in range(steps):
        idx = torch.from_numpy(rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False))
        out = trainee(images[idx])
        loss = F.cross_entropy(out.logits, labels[idx], weight=weight, ignore_index=ignore)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return dataclasses.replace(handle, module=module)


# --------------------------------------------------------------------------
# external adapters


@dataclass(frozen=True)
class AdapterConfig:
    architecture: str
    num_classes: int
    input_downscale: float = 1.0
    mean: tuple[float, float, float] | None = None
    std: tuple[float, float, float] | None = None
    params: dict = field(default_factory=dict)
    name: str | None = None
    token_size: int | None = None


ARCHITECTURES = ("toy_cnn", "toy_vit", "torchscript")
_ARCH_FAMILY = {"toy_cnn": "cnn", "toy_vit": "vit"}


def make_external_adapter(weights_path, family: str, preprocessing: AdapterConfig) -> SurrogateHandle:
    """Wrap weights on disk in a handle.

    ``toy_cnn`` / ``toy_vit`` weights are state dicts; ``torchscript`` loads a
    scripted module whose forward returns logits, or (logits, attentions) for
    the vit family.
    """
    path = Path(weights_path)
    arch = preprocessing.architecture
    if arch not in ARCHITECTURES:
        raise ConfigurationError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")
    if family not in FAMILIES:
        raise ContractError(f"family must be one of {FAMILIES}")
    if arch in _ARCH_FAMILY and _ARCH_FAMILY[arch] != family:
        raise ContractError(f"architecture {arch} is {_ARCH_FAMILY[arch]}-family, declared {family}")
    if not path.is_file():
        raise LoadError(f"weights file not found: {path}")
    if (preprocessing.mean is None) != (preprocessing.std is None):
        raise ConfigurationError("mean and std must be given together")
    name = preprocessing.name or path.stem
    params = dict(preprocessing.params)
    token_size = preprocessing.token_size

    if arch == "torchscript":
        try:
            module = torch.jit.load(str(path), map_location="cpu")
        except Exception as exc:
            raise LoadError(f"cannot load scripted module {path}: {exc}") from exc
        if family == "vit" and token_size is None:
            raise ConfigurationError("vit-family torchscript adapters must declare token_size")
    else:
        try:
            if arch == "toy_cnn":
                module = ToyCNN(int(params.get("channels", 16)), preprocessing.num_classes)
            else:
                token_size = int(params["patch_token_size"])
                module = ToyViT(token_size, int(params.get("layers", 2)), preprocessing.num_classes,
                                dim=int(params.get("dim", 32)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad {arch} params {params}: {exc}") from exc
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
            module.load_state_dict(state)
        except Exception as exc:
            raise LoadError(f"weights at {path} do not match {arch} {params}: {exc}") from exc

    spec = {"architecture": arch, "num_classes": preprocessing.num_classes, "params": params}
    return SurrogateHandle(
        name, family, module, preprocessing.num_classes,
        input_downscale=preprocessing.input_downscale, token_size=token_size,
        mean=None if preprocessing.mean is None else tuple(preprocessing.mean),
        std=None if preprocessing.std is None else tuple(preprocessing.std),
        spec=spec,
    )


def load_adapter(config_path) -> SurrogateHandle:
    """Read an adapter description (YAML or JSON) and build the handle.

    Keys: architecture, family, weights (relative to the file), num_classes,
    downscale, mean, std, params, name, token_size.
    """
    config_path = Path(config_path)
    if not config_path.is_file():
        raise LoadError(f"adapter config not found: {config_path}")
    raw = yaml.safe_load(config_path.read_text())
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{config_path}: expected a mapping")
    allowed = {"architecture", "family", "weights", "num_classes", "downscale", "mean", "std",
               "params", "name", "token_size"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigurationError(f"{config_path}: unknown keys {unknown}")
    for key in ("architecture", "family", "weights", "num_classes"):
        if key not in raw:
            raise ConfigurationError(f"{config_path}: missing key {key!r}")
    weights = Path(raw["weights"])
    if not weights.is_absolute():
        weights = config_path.parent / weights
    pre = AdapterConfig(
        architecture=raw["architecture"],
        num_classes=int(raw["num_classes"]),
        input_downscale=float(raw.get("downscale", 1.0)),
        mean=raw.get("mean"),
        std=raw.get("std"),
        params=raw.get("params") or {},
        name=raw.get("name"),
        token_size=raw.get("token_size"),
    )
    return make_external_adapter(weights, raw["family"], pre)


def save_adapter(handle: SurrogateHandle, directory, name: str | None = None) -> Path:
    """Persist a toy handle as weights + adapter config; returns the config path."""
    if handle.spec.get("architecture") not in _ARCH_FAMILY:
        raise ContractError("only toy handles can be saved as adapters")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = name or handle.name
    torch.save(handle.module.state_dict(), directory / f"{name}.pt")
    cfg = {
        "name": name,
        "architecture": handle.spec["architecture"],
        "family": handle.family,
        "weights": f"{name}.pt",
        "num_classes": handle.num_classes,
        "downscale": handle.input_downscale,
        "params": handle.spec["params"],
    }
    if handle.mean is not None:
        cfg.update(mean=list(handle.mean), std=list(handle.std))
    path = directory / f"{name}.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


def predict(handle: SurrogateHandle, images, batch_size: int = 4) -> torch.Tensor:
    """Gradient-free class probabilities, B x C x H x W."""
    x = as_image_batch(images)
    with torch.no_grad():
        return torch.cat(
            [handle(x[i : i + batch_size]).probabilities for i in range(0, len(x), batch_size)]
        )
