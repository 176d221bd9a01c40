"""Entropy-guided patch placement.

Pipeline: per-pixel normalized entropy of the surrogate's clean prediction ->
per-class mean entropy -> most uncertain class -> dilated class mask ->
feasible patch centres -> top-p entropy centres -> uniform draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, DomainError, ParameterError
from .models import SurrogateHandle, predict

EPS = 1e-12
STRATEGIES = ("sensitive", "center", "random")


@dataclass
class SensitivityReport:
    per_class_scores: np.ndarray  # C
    selected_class: int
    per_image_means: np.ndarray  # B x C
    images_counted: int
    # B x C presence indicator, used by the presence-weighted average
    presence: np.ndarray | None = None
    class_names: list[str] | None = None

    def to_rows(self) -> list[dict]:
        rows = []
        for c, score in enumerate(self.per_class_scores):
            name = self.class_names[c] if self.class_names and c < len(self.class_names) else str(c)
            n = int(self.presence[:, c].sum()) if self.presence is not None else self.images_counted
            rows.append({"class_id": c, "class_name": name, "score": float(score), "images_present": n})
        return rows


@dataclass
class PlacementRegion:
    mask: np.ndarray  # dilated, bool H x W
    dilation_k: int
    feasible_centers: np.ndarray  # N x 2 (y, x), row-major order
    top_centers: np.ndarray  # M x 2
    quantile_tau: float
    sample_fraction: float
    patch_size: int


@dataclass(frozen=True)
class Placement:
    top_left: tuple[int, int]
    patch_size: int
    strategy: str

    @property
    def center(self) -> tuple[float, float]:
        """Continuous centre of the untransformed footprint."""
        return self.top_left[0] + self.patch_size / 2, self.top_left[1] + self.patch_size / 2


def compute_entropy_map(probabilities) -> np.ndarray:
    """Normalized entropy of a C x H x W (or B x C x H x W) distribution, in [0, 1]."""
    p = probabilities.detach().cpu().double().numpy() if torch.is_tensor(probabilities) else np.asarray(probabilities, dtype=np.float64)
    axis = 0 if p.ndim == 3 else 1
    C = p.shape[axis]
    if C < 2:
        raise DomainError("entropy normalization needs at least 2 classes")
    h = -(p * np.log(p + EPS)).sum(axis=axis) / math.log(C)
    return np.clip(h, 0.0, 1.0)


def class_mean_entropy(entropy: np.ndarray, labels: np.ndarray, class_id: int) -> float:
    if entropy.shape != labels.shape:
        raise ParameterError(f"entropy {entropy.shape} and labels {labels.shape} differ in shape")
    ind = labels == class_id
    return float((entropy * ind).sum() / (ind.sum() + EPS))


def _argmax_lowest(scores: np.ndarray, eligible: np.ndarray) -> int:
    masked = np.where(eligible, scores, -np.inf)
    if not np.isfinite(masked).any():
        return 0
    # np.argmax returns the first maximum, i.e. the lowest class id on ties
    return int(np.argmax(masked))


def sensitivity_scan(
    model: SurrogateHandle,
    dataset,
    label_source: str = "predicted",
    strict_average: bool = False,
    batch_size: int = 4,
    class_names=None,
) -> SensitivityReport:
    """Score every class by its mean predictive entropy over the dataset.

    Per-image class means are averaged over the images in which the class is
    present; ``strict_average`` divides by the full image count instead.
    """
    if len(dataset) == 0:
        raise ParameterError("sensitivity scan needs at least one image")
    if label_source not in ("predicted", "ground_truth"):
        raise ParameterError(f"unknown label_source {label_source!r}")
    if not callable(model):
        raise ContractError("model must be a callable surrogate handle")
    C = model.num_classes
    B = len(dataset)
    means = np.zeros((B, C))
    presence = np.zeros((B, C), dtype=bool)
    for start in range(0, B, batch_size):
        chunk = dataset[start : start + batch_size]
        probs = predict(model, [s.image for s in chunk], batch_size=batch_size)
        if probs.shape[1] != C:
            raise ContractError("model probabilities do not match its declared class count")
        predicted = probs.argmax(dim=1).numpy()
        for j, sample in enumerate(chunk):
            b = start + j
            # one image at a time keeps the float64 temporaries small at full resolution
            entropy = compute_entropy_map(probs[j])
            labels = predicted[j] if label_source == "predicted" else sample.labels
            valid = sample.valid_mask()
            counts = np.bincount(labels[valid].ravel(), minlength=C)[:C]
            sums = np.bincount(labels[valid].ravel(), weights=entropy[valid].ravel(), minlength=C)[:C]
            presence[b] = counts > 0
            means[b] = sums / (counts + EPS)
    if strict_average:
        scores = means.sum(axis=0) / B
    else:
        n = presence.sum(axis=0)
        scores = np.where(n > 0, means.sum(axis=0) / np.maximum(n, 1), 0.0)
    eligible = presence.any(axis=0)
    scores = np.where(eligible, scores, 0.0)
    return SensitivityReport(scores, _argmax_lowest(scores, eligible), means, B, presence, class_names)


def dilate_mask(mask: np.ndarray, k: int) -> np.ndarray:
    """Binary dilation by a k x k square (zero padding at the borders)."""
    if k < 1 or k % 2 == 0:
        raise ParameterError(f"dilation kernel must be odd and positive, got {k}")
    m = torch.as_tensor(np.asarray(mask, dtype=np.float32))[None, None]
    # max_pool pads with -inf, which for a nonnegative mask equals zero padding
    out = F.max_pool2d(m, kernel_size=k, stride=1, padding=k // 2)
    return out[0, 0].numpy() > 0.5


def top_fraction_threshold(values: np.ndarray, p: float) -> float:
    """Nearest-rank threshold keeping the ceil(p * n) largest values (ties included)."""
    n = len(values)
    keep = max(1, math.ceil(p * n - 1e-9))
    return float(np.sort(values)[n - keep])


def build_region(mask: np.ndarray, entropy: np.ndarray, patch_size: int, k: int = 5, p: float = 0.2) -> PlacementRegion:
    H, W = mask.shape
    S = int(patch_size)
    if S > min(H, W):
        raise ParameterError(f"patch size {S} exceeds image {H}x{W}")
    if not 0 < p <= 1:
        raise ParameterError(f"sample fraction must lie in (0, 1], got {p}")
    dilated = dilate_mask(mask, k)
    ys, xs = np.nonzero(dilated)
    # S/2 <= y <= H - S/2, in integers
    ok = (2 * ys >= S) & (2 * ys <= 2 * H - S) & (2 * xs >= S) & (2 * xs <= 2 * W - S)
    centers = np.stack([ys[ok], xs[ok]], axis=1)
    if len(centers) == 0:
        return PlacementRegion(dilated, k, centers, centers, float("nan"), p, S)
    values = entropy[centers[:, 0], centers[:, 1]]
    tau = top_fraction_threshold(values, p)
    return PlacementRegion(dilated, k, centers, centers[values >= tau], tau, p, S)


def _random_top_left(rng, H, W, S):
    return int(rng.integers(0, H - S + 1)), int(rng.integers(0, W - S + 1))


def sample_placement(region: PlacementRegion | None, rng_seed, image_dims, strategy: str = "sensitive", patch_size: int | None = None) -> Placement:
    """Draw a top-left corner; ``rng_seed`` is an int or a ``numpy`` Generator."""
    if strategy not in STRATEGIES:
        raise ParameterError(f"unknown placement strategy {strategy!r}")
    H, W = image_dims
    S = int(patch_size if patch_size is not None else region.patch_size)
    if S > min(H, W):
        raise ParameterError(f"patch size {S} exceeds image {H}x{W}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    if strategy == "center":
        return Placement(((H - S) // 2, (W - S) // 2), S, strategy)
    if strategy == "sensitive" and region is not None and len(region.top_centers):
        yc, xc = region.top_centers[rng.integers(len(region.top_centers))]
        return Placement((int(yc) - S // 2, int(xc) - S // 2), S, strategy)
    return Placement(_random_top_left(rng, H, W, S), S, strategy)


def place_from_probabilities(
    probs: np.ndarray | torch.Tensor,
    target_class: int,
    patch_size: int,
    rng,
    k: int = 5,
    p: float = 0.2,
    strategy: str = "sensitive",
) -> Placement:
    """Placement for one image from the surrogate's clean class probabilities (C x H x W)."""
    probs = probs if torch.is_tensor(probs) else torch.as_tensor(probs)
    H, W = probs.shape[-2:]
    if strategy != "sensitive":
        return sample_placement(None, rng, (H, W), strategy, patch_size=patch_size)
    entropy = compute_entropy_map(probs)
    mask = (probs.argmax(dim=0) == target_class).numpy()
    region = build_region(mask, entropy, patch_size, k, p)
    return sample_placement(region, rng, (H, W), strategy)
