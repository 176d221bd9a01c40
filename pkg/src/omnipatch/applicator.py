"""Differentiable patch compositing under random scale/rotation/translation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .config import EotParams, to_dict
from .errors import ParameterError, PatchFormatError
from .placement import Placement

COVERAGE_THRESHOLD = 0.5


class Transform(NamedTuple):
    scale: float = 1.0
    angle: float = 0.0  # degrees, counter-clockwise as displayed
    dy: float = 0.0
    dx: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.angle == 0.0 and self.dy == 0.0 and self.dx == 0.0


IDENTITY = Transform()


@dataclass
class PatchState:
    pixels: torch.Tensor  # 3 x S x S in [0, 1]
    size: int
    stage: str = "stage1"
    step_count: int = 0
    optimizer_state: dict | None = None

    def as_hwc(self) -> np.ndarray:
        return self.pixels.detach().permute(1, 2, 0).cpu().numpy()

    def copy(self) -> "PatchState":
        return PatchState(self.pixels.detach().clone(), self.size, self.stage, self.step_count,
                          None if self.optimizer_state is None else dict(self.optimizer_state))


@dataclass
class AppliedPatch:
    image: torch.Tensor  # 3 x H x W
    footprint_mask: torch.Tensor  # H x W bool
    transform_used: Transform = field(default=IDENTITY)


def sample_transform(params: EotParams, rng_seed) -> Transform:
    if not params.enabled:
        return IDENTITY
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    draws = [float(rng.uniform(lo, hi)) for lo, hi in (
        params.scale_range, params.rotation_range_deg, params.translation_y_px, params.translation_x_px
    )]
    return Transform(*draws)


def _pixels(patch) -> torch.Tensor:
    return patch.pixels if isinstance(patch, PatchState) else patch


def _window(center, S, transform, H, W):
    """Integer bounding box (clipped) of the transformed patch."""
    a = math.radians(transform.angle)
    half = transform.scale * S / 2
    extent = half * (abs(math.cos(a)) + abs(math.sin(a))) + 1
    cy, cx = center
    y1, y2 = max(0, math.floor(cy - extent)), min(H, math.ceil(cy + extent))
    x1, x2 = max(0, math.floor(cx - extent)), min(W, math.ceil(cx + extent))
    return y1, y2, x1, x2


def _sampling_grid(y1, y2, x1, x2, center, S, transform, dtype):
    """grid_sample coordinates mapping window pixel centres back into the patch."""
    cy, cx = center
    py = torch.arange(y1, y2, dtype=torch.float64) + 0.5 - cy
    px = torch.arange(x1, x2, dtype=torch.float64) + 0.5 - cx
    gy, gx = torch.meshgrid(py, px, indexing="ij")
    a = math.radians(transform.angle)
    c, s = math.cos(a), math.sin(a)
    # inverse of: x' = s*(x cos a + y sin a), y' = s*(-x sin a + y cos a)
    ux = (gx * c - gy * s) / transform.scale
    uy = (gx * s + gy * c) / transform.scale
    # align_corners=False normalization: patch spans [-S/2, S/2] -> [-1, 1]
    grid = torch.stack([2 * ux / S, 2 * uy / S], dim=-1)
    return grid.to(dtype)[None]


def apply_patch(image: torch.Tensor, patch, placement: Placement, transform: Transform = IDENTITY) -> AppliedPatch:
    """Overwrite the covered pixels of a 3 x H x W image with the warped patch.

    The patch is scaled and rotated about its centre, which sits at the
    placement centre shifted by (dy, dx).  Pixels whose resampled coverage is at
    least 0.5 take the bilinear patch colour; gradients reach the patch through
    those colours only.
    """
    theta = _pixels(patch)
    S = theta.shape[-1]
    H, W = image.shape[-2:]
    y0, x0 = placement.top_left
    if placement.patch_size != S:
        raise ParameterError(f"placement is for size {placement.patch_size}, patch is {S}")
    if y0 < 0 or x0 < 0 or y0 + S > H or x0 + S > W:
        raise ParameterError(f"placement {placement.top_left} puts a {S}px patch outside {H}x{W}")
    transform = Transform(*transform)
    out = image.clone()
    footprint = torch.zeros(H, W, dtype=torch.bool)
    if transform.is_identity:
        out[:, y0 : y0 + S, x0 : x0 + S] = theta.clamp(0, 1)
        footprint[y0 : y0 + S, x0 : x0 + S] = True
        return AppliedPatch(out, footprint, transform)

    cy, cx = placement.center
    center = (cy + transform.dy, cx + transform.dx)
    y1, y2, x1, x2 = _window(center, S, transform, H, W)
    if y2 <= y1 or x2 <= x1:
        return AppliedPatch(out, footprint, transform)
    grid = _sampling_grid(y1, y2, x1, x2, center, S, transform, theta.dtype)
    warped = F.grid_sample(theta[None], grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0]
    with torch.no_grad():
        ones = torch.ones(1, 1, S, S, dtype=theta.dtype)
        alpha = F.grid_sample(ones, grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0, 0]
        mask = alpha >= COVERAGE_THRESHOLD
    region = out[:, y1:y2, x1:x2]
    out[:, y1:y2, x1:x2] = torch.where(mask, warped, region).clamp(0, 1)
    footprint[y1:y2, x1:x2] = mask
    return AppliedPatch(out, footprint, transform)


def apply_patch_batch(images: torch.Tensor, patch, placements, transforms) -> tuple[torch.Tensor, torch.Tensor]:
    """Composite one patch onto each image of a batch; returns (images, footprints)."""
    applied = [apply_patch(img, patch, pl, tf) for img, pl, tf in zip(images, placements, transforms)]
    return torch.stack([a.image for a in applied]), torch.stack([a.footprint_mask for a in applied])


def footprint_token_mask(footprint, token_size: int) -> torch.Tensor:
    """Token-grid mask (H/t x W/t): a token is marked if any covered pixel lies in its cell."""
    fp = torch.as_tensor(np.asarray(footprint) if not torch.is_tensor(footprint) else footprint).bool()
    H, W = fp.shape
    t = int(token_size)
    if t < 1 or H % t or W % t:
        raise ParameterError(f"footprint {H}x{W} is not divisible by token size {t}")
    return fp.reshape(H // t, t, W // t, t).any(dim=3).any(dim=1)


def scaled_footprint(footprint: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Footprint on a resized grid: a cell counts if it overlaps any covered pixel."""
    if tuple(footprint.shape[-2:]) == tuple(size):
        return footprint.bool()
    f = F.interpolate(footprint.float()[None, None], size=size, mode="area")
    return f[0, 0] > 0


# --------------------------------------------------------------------------
# persistence: 8-bit PNG + JSON sidecar


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_patch(patch: PatchState, path, config_hash: str | None = None, eot: EotParams | None = None, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raster = np.round(np.clip(patch.as_hwc(), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(raster, mode="RGB").save(path, format="PNG")
    meta = {
        "size": patch.size,
        "stage": patch.stage,
        "step_count": patch.step_count,
        "config_hash": config_hash,
        "eot": to_dict(eot) if eot is not None else None,
    }
    if extra:
        meta.update(extra)
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_patch(path) -> PatchState:
    path = Path(path)
    if not path.is_file():
        raise PatchFormatError(f"patch file not found: {path}")
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise PatchFormatError(f"{path}: expected a PNG raster, got {im.format}")
            if im.mode != "RGB":
                raise PatchFormatError(f"{path}: expected 8-bit RGB, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise PatchFormatError(f"{path}: not a readable image ({exc})") from exc
    if arr.shape[0] != arr.shape[1]:
        raise PatchFormatError(f"{path}: patch must be square, got {arr.shape[:2]}")
    meta = {}
    side = _sidecar(path)
    if side.is_file():
        try:
            meta = json.loads(side.read_text())
        except json.JSONDecodeError as exc:
            raise PatchFormatError(f"{side}: malformed sidecar ({exc})") from exc
        if meta.get("size") not in (None, arr.shape[0]):
            raise PatchFormatError(f"{side}: size {meta['size']} does not match raster {arr.shape[0]}")
    pixels = torch.from_numpy(arr.transpose(2, 0, 1).copy())
    return PatchState(pixels, arr.shape[0], meta.get("stage", "stage2"), int(meta.get("step_count", 0)))
