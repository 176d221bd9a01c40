"""Attack objectives.

Sign convention: ``stage1_loss``/``stage2_loss`` return the cross-entropy
quantities the attack *maximizes*; ``total_loss`` negates them so the
optimizer always minimizes.  The auxiliary terms are already in minimization
form (lower is a stronger attack).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .config import LossConfig
from .errors import ContractError, NumericError, UndefinedLossError

EPS = 1e-12
STAGES = ("stage1", "stage2")


@dataclass
class PixelPartition:
    """Two disjoint boolean masks covering exactly the valid pixels."""

    set_a: torch.Tensor
    set_b: torch.Tensor
    criterion: str
    threshold_rule: str = ""

    @property
    def size(self) -> int:
        return int(self.set_a.sum() + self.set_b.sum())


@dataclass
class LossBreakdown:
    attack: float | torch.Tensor
    attn: float | torch.Tensor = 0.0
    boundary: float | torch.Tensor = 0.0
    tv: float | torch.Tensor = 0.0
    align: float | torch.Tensor | None = None
    total: float | torch.Tensor = 0.0
    stage: str = "stage1"
    # the un-negated stage cross-entropy
    stage_value: float | torch.Tensor | None = None

    def as_record(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if torch.is_tensor(v) else v
        return out


def _valid(labels: torch.Tensor, ignore_value: int) -> torch.Tensor:
    return labels != ignore_value


def pixel_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, ignore_value: int = 255) -> torch.Tensor:
    """Per-pixel CE; ignored pixels get 0.  logits (B) x C x H x W, labels (B) x H x W."""
    single = logits.ndim == 3
    if single:
        logits, labels = logits[None], labels[None]
    ce = F.cross_entropy(logits, labels.long(), ignore_index=ignore_value, reduction="none")
    return ce[0] if single else ce


def _batched(logits, *maps):
    if logits.ndim == 3:
        return (logits[None],) + tuple(m[None] for m in maps)
    return (logits,) + maps


def stage1_loss(logits, labels, clean_prediction, gamma: float, ignore_value: int = 255) -> torch.Tensor:
    """Clean-correct pixels weighted 1-gamma, clean-misclassified gamma, summed over |C|+|I|."""
    logits, labels, clean_prediction = _batched(logits, torch.as_tensor(labels), torch.as_tensor(clean_prediction))
    valid = _valid(labels, ignore_value)
    n = int(valid.sum())
    if n == 0:
        raise UndefinedLossError("every pixel is ignored")
    ce = F.cross_entropy(logits, labels.long(), ignore_index=ignore_value, reduction="none")
    correct = valid & (clean_prediction == labels)
    wrong = valid & ~correct
    return ((1 - gamma) * ce[correct].sum() + gamma * ce[wrong].sum()) / n


def js_divergence(p, q, dim: int = 0):
    """Jensen-Shannon divergence (natural log) along ``dim``; works on arrays or tensors."""
    xp = torch if torch.is_tensor(p) else np
    m = 0.5 * (p + q)
    kl_pm = (p * (xp.log(p + EPS) - xp.log(m + EPS))).sum(dim)
    kl_qm = (q * (xp.log(q + EPS) - xp.log(m + EPS))).sum(dim)
    return 0.5 * kl_pm + 0.5 * kl_qm


def kl_divergence(p, q, dim: int = 0):
    xp = torch if torch.is_tensor(p) else np
    return (p * (xp.log(p + EPS) - xp.log(q + EPS))).sum(dim)


def partition_by_js(
    clean_probs,
    adv_probs,
    rule: str = "mean",
    labels: torch.Tensor | None = None,
    ignore_value: int = 255,
    divergence: str = "js",
    scope: str = "batch",
) -> PixelPartition:
    """Split valid pixels by surrogate-averaged divergence between clean and adversarial outputs.

    ``clean_probs``/``adv_probs`` are sequences (one per surrogate) of
    C x H x W or B x C x H x W probabilities.  Pixels whose averaged divergence
    is strictly above the mean go to ``set_a`` (high transfer).
    """
    if rule != "mean":
        raise ContractError(f"unsupported threshold rule {rule!r}")
    if len(clean_probs) != len(adv_probs) or not clean_probs:
        raise ContractError("need matching, nonempty clean/adversarial probability lists")
    fn = js_divergence if divergence == "js" else kl_divergence
    per_model = []
    for c, a in zip(clean_probs, adv_probs):
        if c.shape != a.shape:
            raise ContractError(f"shape mismatch {tuple(c.shape)} vs {tuple(a.shape)}")
        cls_dim = 0 if c.ndim == 3 else 1
        per_model.append(fn(c.detach(), a.detach(), dim=cls_dim))
    div = torch.stack(per_model).mean(dim=0)
    valid = torch.ones_like(div, dtype=torch.bool) if labels is None else _valid(torch.as_tensor(labels), ignore_value)
    if scope == "image" and div.ndim == 3:
        counts = valid.flatten(1).sum(1).clamp_min(1)
        mu = (div * valid).flatten(1).sum(1) / counts
        high = valid & (div > mu.view(-1, 1, 1))
    else:
        mu = div[valid].mean() if valid.any() else div.new_tensor(0.0)
        high = valid & (div > mu)
    return PixelPartition(high, valid & ~high, f"{divergence}_divergence", f"> {scope} mean")


def stage2_loss(per_surrogate_logits, labels, partition: PixelPartition, beta: float, ignore_value: int = 255) -> torch.Tensor:
    """Ensemble CE: high-divergence pixels weighted 1-beta, the rest beta, over 2(|X|+|Y|).

    The 2 is the surrogate count of the ensemble, so duplicating one surrogate
    reproduces its single weighted sum divided by |X|+|Y|.
    """
    logits_list = list(per_surrogate_logits.values()) if isinstance(per_surrogate_logits, dict) else list(per_surrogate_logits)
    if not logits_list:
        raise ContractError("stage 2 needs at least one surrogate")
    total = stage2_terms(logits_list, labels, partition, beta, ignore_value)
    return sum(total)


def stage2_terms(logits_list, labels, partition: PixelPartition, beta: float, ignore_value: int = 255) -> list[torch.Tensor]:
    """Per-surrogate summands of ``stage2_loss`` (their sum is the loss)."""
    n = partition.size
    if n == 0:
        raise UndefinedLossError("partition covers no pixels")
    norm = len(logits_list) * n
    terms = []
    for logits in logits_list:
        lg, lb = _batched(logits, torch.as_tensor(labels))
        ce = F.cross_entropy(lg, lb.long(), ignore_index=ignore_value, reduction="none")
        a, b = partition.set_a.reshape(ce.shape), partition.set_b.reshape(ce.shape)
        terms.append(((1 - beta) * ce[a].sum() + beta * ce[b].sum()) / norm)
    return terms


def gradient_alignment(grad_vit, grad_cnn):
    """Negative cosine similarity of two flattened gradients; 0 if either is zero."""
    a = grad_vit.reshape(-1) if torch.is_tensor(grad_vit) else torch.as_tensor(np.ravel(grad_vit), dtype=torch.float64)
    b = grad_cnn.reshape(-1) if torch.is_tensor(grad_cnn) else torch.as_tensor(np.ravel(grad_cnn), dtype=torch.float64)
    if a.shape != b.shape:
        raise ContractError(f"gradient lengths differ: {a.numel()} vs {b.numel()}")
    if torch.isnan(a).any() or torch.isnan(b).any():
        raise NumericError("NaN in surrogate gradients")
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        return (a * 0).sum() + (b * 0).sum()
    return -(a @ b) / (na * nb)


def attention_hijack_loss(attention, patch_tokens, layers=None) -> torch.Tensor:
    """Minus the mean attention mass that queries put on patch tokens.

    attention: list of (B) x T x T row-stochastic maps; patch_tokens: (B) x T
    (or token grid) mask.  Images without patch tokens are skipped.
    """
    if not attention:
        raise ContractError("attention maps are required for the hijack loss")
    maps = [attention[i] for i in layers] if layers is not None else list(attention)
    tokens = torch.as_tensor(patch_tokens).bool()
    if maps[0].ndim == 2:
        maps = [m[None] for m in maps]
        tokens = tokens.reshape(1, -1)
    else:
        tokens = tokens.reshape(maps[0].shape[0], -1)
    keep = tokens.any(dim=1)
    if not keep.any():
        raise ContractError("patch covers no tokens")
    w = tokens.to(maps[0].dtype)
    per_layer = []
    for m in maps:
        if m.shape[-1] != w.shape[1]:
            raise ContractError(f"attention over {m.shape[-1]} tokens, mask has {w.shape[1]}")
        mass = (m * w[:, None, :]).sum(-1).mean(-1)  # B
        per_layer.append(mass[keep].mean())
    return -torch.stack(per_layer).mean()


def signed_distance_maps(labels: np.ndarray, num_classes: int, ignore_value: int = 255) -> np.ndarray:
    """C x H x W: positive distance outside each class region, negative inside.

    Classes that are absent, or that cover every pixel, get an all-zero map.
    """
    labels = np.asarray(labels)
    out = np.zeros((num_classes,) + labels.shape, dtype=np.float32)
    for c in range(num_classes):
        inside = labels == c
        if not inside.any() or inside.all():
            continue
        outside = ~inside
        out[c] = ndimage.distance_transform_edt(outside) * outside - ndimage.distance_transform_edt(inside) * inside
    return out


def boundary_disruption_loss(adv_probs, labels, distance_maps=None, ignore_value: int = 255) -> torch.Tensor:
    """Negated signed-distance boundary loss averaged over valid pixels.

    Lower when probability mass sits far outside the true regions.
    ``distance_maps`` may be passed in precomputed (cached per sample).
    """
    probs = adv_probs if adv_probs.ndim == 4 else adv_probs[None]
    lab = torch.as_tensor(labels)
    lab = lab if lab.ndim == 3 else lab[None]
    C = probs.shape[1]
    if distance_maps is None:
        distance_maps = np.stack([signed_distance_maps(l.numpy(), C, ignore_value) for l in lab])
    phi = torch.as_tensor(distance_maps, dtype=probs.dtype)
    phi = phi if phi.ndim == 4 else phi[None]
    valid = _valid(lab, ignore_value)
    n = int(valid.sum())
    if n == 0:
        raise UndefinedLossError("every pixel is ignored")
    return -((phi * probs).sum(1) * valid).sum() / n


def total_variation(patch) -> torch.Tensor:
    """Anisotropic TV: summed absolute neighbour differences over S*S pixels.

    Accepts 3 x S x S (channel-first) tensors.
    """
    p = patch if torch.is_tensor(patch) else torch.as_tensor(patch)
    S_h, S_w = p.shape[-2:]
    dv = (p[..., 1:, :] - p[..., :-1, :]).abs().sum()
    dh = (p[..., :, 1:] - p[..., :, :-1]).abs().sum()
    return (dv + dh) / (S_h * S_w)


def total_loss(
    stage_loss,
    config: LossConfig,
    stage: str,
    attn=0.0,
    boundary=0.0,
    tv=0.0,
    align=None,
) -> LossBreakdown:
    """Combine the objective terms; ``stage_loss`` is the (maximized) stage CE."""
    if stage not in STAGES:
        raise ContractError(f"unknown stage {stage!r}")
    if stage == "stage1" and align is not None:
        raise ContractError("gradient alignment is only defined in stage 2")
    attack = -stage_loss
    total = attack + config.lambda_attn * attn + config.lambda_boundary * boundary + config.lambda_tv * tv
    if stage == "stage2" and align is not None:
        total = total + config.lambda_align * align
    return LossBreakdown(attack, attn, boundary, tv, align, total, stage, stage_loss)


def check_finite(value, what: str = "loss") -> None:
    v = float(value)
    if not math.isfinite(v):
        raise NumericError(f"non-finite {what}: {v}")
