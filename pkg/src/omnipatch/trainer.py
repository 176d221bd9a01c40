"""Two-stage universal patch optimization.

Stage 1 attacks the ViT surrogate alone; stage 2 attacks the ViT + CNN pair
with divergence-partitioned weighting and (optionally) gradient alignment.
Every epoch draws its images, placements and EOT transforms from a generator
seeded by (schedule.seed, epoch), so a run resumed from an epoch checkpoint
replays exactly the same randomness as an uninterrupted one.
"""

from __future__ import annotations

import io
import json
import logging
import time
import zipfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .applicator import (
    PatchState,
    apply_patch_batch,
    footprint_token_mask,
    sample_transform,
    save_patch,
    scaled_footprint,
)
from .config import EotParams, LossConfig, PlacementConfig, TrainSchedule, config_hash, to_dict
from .errors import ContractError, DivergenceError, LoadError, ParameterError
from .losses import (
    LossBreakdown,
    attention_hijack_loss,
    boundary_disruption_loss,
    gradient_alignment,
    partition_by_js,
    signed_distance_maps,
    stage1_loss,
    stage2_terms,
    total_loss,
    total_variation,
)
from .models import SurrogateHandle, as_image_batch
from .placement import place_from_probabilities, sensitivity_scan

log = logging.getLogger(__name__)


def initialize_patch(size: int, mode: str = "uniform_random", seed: int = 0) -> PatchState:
    if size < 8:
        raise ParameterError(f"patch size must be at least 8, got {size}")
    if mode == "gray":
        pixels = torch.full((3, size, size), 0.5)
    elif mode == "uniform_random":
        g = torch.Generator().manual_seed(int(seed))
        pixels = torch.rand(3, size, size, generator=g)
    else:
        raise ParameterError(f"unknown init mode {mode!r}")
    return PatchState(pixels, size, "stage1", 0)


class SampleCache:
    """Per-(sample, model) clean probabilities and per-sample distance maps.

    Bounded LRU; entries are recomputed transparently after eviction.
    """

    def __init__(self, capacity: int = 256):
        self.capacity = capacity
        self._probs: OrderedDict = OrderedDict()
        self._phi: OrderedDict = OrderedDict()

    def _remember(self, store, key, value):
        store[key] = value
        store.move_to_end(key)
        while len(store) > self.capacity:
            store.popitem(last=False)

    def clean_probs(self, model: SurrogateHandle, index: int, sample) -> torch.Tensor:
        key = (model.name, index)
        if key not in self._probs:
            with torch.no_grad():
                self._remember(self._probs, key, model(as_image_batch(sample.image)).probabilities[0])
        else:
            self._probs.move_to_end(key)
        return self._probs[key]

    def distance_maps(self, index: int, sample, num_classes: int) -> np.ndarray:
        if index not in self._phi:
            self._remember(self._phi, index, signed_distance_maps(sample.labels, num_classes, sample.ignore_value))
        return self._phi[index]


@dataclass
class PreparedBatch:
    indices: list[int]
    images: torch.Tensor  # B x 3 x H x W
    labels: torch.Tensor  # B x H x W
    placements: list
    ignore_value: int = 255


@dataclass
class TrainLog:
    header: dict = field(default_factory=dict)
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    placements: list[dict] = field(default_factory=list)
    stage_boundaries: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def records(self):
        yield {"type": "header", **self.header}
        for r in self.stage_boundaries:
            yield {"type": "stage", **r}
        for r in self.placements:
            yield {"type": "placement", **r}
        for r in self.steps:
            yield {"type": "step", **r}
        for r in self.epochs:
            yield {"type": "epoch", **r}
        yield {"type": "summary", "steps": len(self.steps), "wall_clock_s": self.wall_clock}

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return path

    def to_dict(self) -> dict:
        return {
            "header": self.header, "steps": self.steps, "epochs": self.epochs,
            "placements": self.placements, "stage_boundaries": self.stage_boundaries,
            "wall_clock": self.wall_clock,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainLog":
        return cls(**d)


# --------------------------------------------------------------------------
# one optimizer step


def _adam_step(theta: torch.Tensor, grad: torch.Tensor, state: dict | None, lr: float):
    param = theta.detach().clone().requires_grad_(True)
    opt = torch.optim.Adam([param], lr=lr)
    if state:
        opt.load_state_dict(state)
    param.grad = grad.detach().clone()
    opt.step()
    return param.detach(), opt.state_dict()


def _patch_tokens(vit: SurrogateHandle, footprints: torch.Tensor) -> torch.Tensor:
    H, W = footprints.shape[-2:]
    size = vit.scaled_size(H, W)
    return torch.stack(
        [footprint_token_mask(scaled_footprint(fp, size), vit.token_size).reshape(-1) for fp in footprints]
    )


def attack_iteration(
    patch: PatchState,
    batch: PreparedBatch,
    surrogates: dict[str, SurrogateHandle],
    config: LossConfig,
    schedule: TrainSchedule,
    rng: np.random.Generator,
    stage: str = "stage1",
    eot: EotParams | None = None,
    cache: SampleCache | None = None,
    samples=None,
) -> tuple[PatchState, LossBreakdown]:
    """One EOT-sampled update of the patch; returns the new state and the loss terms.

    ``surrogates`` holds the ``vit`` handle and, in stage 2, the ``cnn`` handle.
    ``samples`` are the dataset entries behind ``batch.indices`` (for caching).
    """
    eot = eot or EotParams()
    cache = cache or SampleCache()
    vit = surrogates.get("vit")
    cnn = surrogates.get("cnn")
    if vit is None or vit.family != "vit":
        raise ContractError("attack_iteration needs a vit-family surrogate under 'vit'")
    if stage == "stage2" and (cnn is None or cnn.family != "cnn"):
        raise ContractError("stage 2 needs a cnn-family surrogate under 'cnn'")
    samples = samples if samples is not None else [None] * len(batch.indices)

    def clean(model):
        # cached per dataset sample; batches built without samples are computed directly
        if all(s is not None for s in samples):
            return torch.stack([cache.clean_probs(model, i, s) for i, s in zip(batch.indices, samples)])
        with torch.no_grad():
            return model(batch.images).probabilities

    theta = patch.pixels.detach().clone().requires_grad_(True)
    transforms = [sample_transform(eot, rng) for _ in batch.indices]
    adv, footprints = apply_patch_batch(batch.images, theta, batch.placements, transforms)

    vit_out = vit(adv)
    clean_vit = clean(vit)
    align = None
    if stage == "stage1":
        stage_value = stage1_loss(vit_out.logits, batch.labels, clean_vit.argmax(1), config.gamma, batch.ignore_value)
        adv_probs = [vit_out.probabilities]
    else:
        cnn_out = cnn(adv)
        clean_cnn = clean(cnn)
        adv_probs = [vit_out.probabilities, cnn_out.probabilities]
        partition = partition_by_js(
            [clean_vit, clean_cnn], adv_probs, config.js_threshold, batch.labels, batch.ignore_value,
            divergence=config.divergence, scope=config.js_threshold_scope,
        )
        term_vit, term_cnn = stage2_terms([vit_out.logits, cnn_out.logits], batch.labels, partition, config.beta, batch.ignore_value)
        stage_value = term_vit + term_cnn
        # the surrogate gradients of the ensemble loss; the attack ascends it,
        # the sign does not change the cosine
        differentiable = config.lambda_align > 0
        g_vit = torch.autograd.grad(term_vit, theta, create_graph=differentiable, retain_graph=True)[0]
        g_cnn = torch.autograd.grad(
            term_cnn, theta, create_graph=differentiable and config.align_second_order, retain_graph=True
        )[0]
        align = gradient_alignment(g_vit, g_cnn)
        if not differentiable:
            align = align.detach()

    attn = attention_hijack_loss(vit_out.attention, _patch_tokens(vit, footprints), config.attn_layers)
    num_classes = vit.num_classes
    phi = np.stack([cache.distance_maps(i, s, num_classes) if s is not None
                    else signed_distance_maps(lab.numpy(), num_classes, batch.ignore_value)
                    for i, s, lab in zip(batch.indices, samples, batch.labels)])
    boundary = sum(boundary_disruption_loss(p, batch.labels, phi, batch.ignore_value) for p in adv_probs) / len(adv_probs)
    tv = total_variation(theta)
    parts = total_loss(stage_value, config, stage, attn=attn, boundary=boundary, tv=tv, align=align)

    if not torch.isfinite(parts.total):
        raise DivergenceError(
            f"non-finite loss at step {patch.step_count}",
            snapshot={"patch": patch.pixels.clone(), "breakdown": parts.as_record(),
                      "indices": list(batch.indices), "placements": [p.top_left for p in batch.placements]},
        )
    grad = torch.autograd.grad(parts.total, theta)[0]

    if schedule.optimizer == "signed_gradient":
        new_pixels = (theta.detach() - schedule.step_size * grad.sign()).clamp(0.0, 1.0)
        opt_state = patch.optimizer_state
    else:
        new_pixels, opt_state = _adam_step(theta, grad, patch.optimizer_state, schedule.step_size)
        new_pixels = new_pixels.clamp(0.0, 1.0)
    new_state = PatchState(new_pixels, patch.size, stage, patch.step_count + 1, opt_state)
    record = LossBreakdown(*(float(v.detach()) if torch.is_tensor(v) else v for v in (
        parts.attack, parts.attn, parts.boundary, parts.tv, parts.align, parts.total)),
        stage=stage, stage_value=float(stage_value.detach()))
    return new_state, record


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, patch: PatchState, next_epoch: int, log: TrainLog, extra: dict | None = None) -> Path:
    """Single zip: patch.png (8-bit view), state.pt (exact tensors), log.json, meta.json."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save({"pixels": patch.pixels, "optimizer_state": patch.optimizer_state,
                "stage": patch.stage, "step_count": patch.step_count, "next_epoch": next_epoch}, buf)
    png = io.BytesIO()
    from PIL import Image

    Image.fromarray(np.round(patch.as_hwc() * 255).astype(np.uint8), mode="RGB").save(png, format="PNG")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("state.pt", buf.getvalue())
        zf.writestr("patch.png", png.getvalue())
        zf.writestr("log.json", json.dumps(log.to_dict()))
        zf.writestr("meta.json", json.dumps({"next_epoch": next_epoch, **(extra or {})}, sort_keys=True))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[PatchState, int, TrainLog, dict]:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            state = torch.load(io.BytesIO(zf.read("state.pt")), weights_only=False)
            log_ = TrainLog.from_dict(json.loads(zf.read("log.json")))
            meta = json.loads(zf.read("meta.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise LoadError(f"corrupt checkpoint {path}: {exc}") from exc
    patch = PatchState(state["pixels"], state["pixels"].shape[-1], state["stage"], state["step_count"], state["optimizer_state"])
    return patch, int(state["next_epoch"]), log_, meta


# --------------------------------------------------------------------------
# full schedule


def epoch_indices(schedule: TrainSchedule, epoch: int, n: int, rng: np.random.Generator) -> np.ndarray:
    count = schedule.batches_per_epoch * schedule.batch_size
    if count <= n:
        return rng.permutation(n)[:count]
    return rng.integers(0, n, size=count)


def prepare_batch(indices, dataset, vit, cache, target_class, schedule, placement_cfg, rng, strategy=None) -> PreparedBatch:
    samples = [dataset[i] for i in indices]
    placements = []
    for i, s in zip(indices, samples):
        probs = cache.clean_probs(vit, int(i), s)
        placements.append(place_from_probabilities(
            probs, target_class, schedule.patch_size, rng, placement_cfg.dilation_k,
            placement_cfg.sample_fraction, strategy or schedule.placement_strategy,
        ))
    images = as_image_batch([s.image for s in samples])
    labels = torch.from_numpy(np.stack([s.labels for s in samples]))
    return PreparedBatch([int(i) for i in indices], images, labels, placements, samples[0].ignore_value)


def _mean_records(records: list[dict]) -> dict:
    keys = ("attack", "attn", "boundary", "tv", "align", "total", "stage_value")
    out = {}
    for k in keys:
        vals = [r[k] for r in records if r.get(k) is not None]
        if vals:
            out[k] = float(np.mean(vals))
    return out


def train(
    config: LossConfig,
    schedule: TrainSchedule,
    dataset,
    vit: SurrogateHandle,
    cnn: SurrogateHandle | None,
    *,
    eot: EotParams | None = None,
    placement: PlacementConfig | None = None,
    checkpoint_path=None,
    resume_from=None,
    stop_after_epoch: int | None = None,
    dry_run: bool = False,
    target_class: int | None = None,
    cache_size: int = 256,
    log_path=None,
) -> tuple[PatchState, TrainLog]:
    """Run stage 1 then stage 2; see the module docstring for the seeding scheme.

    ``dry_run`` executes one batch of the first epoch of each stage and is meant
    for checking that a configuration runs end to end.  ``stop_after_epoch``
    interrupts after that many epochs (the checkpoint is still written).
    """
    eot = eot or EotParams()
    placement = placement or PlacementConfig()
    if vit.family != "vit":
        raise ContractError(f"{vit.name} is not a vit-family surrogate")
    if schedule.stage2_epochs > 0 and (cnn is None or cnn.family != "cnn"):
        raise ContractError("stage 2 needs a cnn-family surrogate")
    if len(dataset) == 0:
        raise ParameterError("training dataset is empty")
    H, W = dataset[0].labels.shape
    if schedule.patch_size > min(H, W):
        raise ParameterError(f"patch size {schedule.patch_size} exceeds image {H}x{W}")

    started = time.perf_counter()
    cache = SampleCache(cache_size)
    if resume_from is not None:
        patch, start_epoch, tlog, meta = load_checkpoint(resume_from)
        target_class = meta.get("target_class", target_class)
    else:
        patch = initialize_patch(schedule.patch_size, schedule.init_mode, schedule.seed)
        start_epoch, tlog = 0, TrainLog()
        scores = None
        if target_class is None and schedule.placement_strategy == "sensitive":
            report = sensitivity_scan(vit, dataset, placement.label_source, placement.strict_average)
            target_class, scores = report.selected_class, report.per_class_scores.tolist()
        tlog.header = {
            "loss_config": to_dict(config), "schedule": to_dict(schedule), "eot": to_dict(eot),
            "placement": to_dict(placement), "target_class": target_class, "sensitivity_scores": scores,
            "surrogates": {"vit": vit.name, "cnn": cnn.name if cnn is not None else None},
            "vit_input_downscale": vit.input_downscale, "image_size": [H, W],
            "stage_switch_epoch": schedule.stage1_epochs, "total_epochs": schedule.total_epochs,
            "config_hash": config_hash(config, schedule, eot, placement), "dry_run": dry_run,
        }
    surrogates = {"vit": vit, "cnn": cnn}
    epochs = range(start_epoch, schedule.total_epochs)
    if dry_run:
        epochs = [e for e in (0, schedule.stage1_epochs) if e < schedule.total_epochs]
    if schedule.stage1_epochs == 0 and not tlog.stage_boundaries:
        tlog.stage_boundaries.append({"stage": "stage2", "epoch": 0, "step": 0})

    for epoch in epochs:
        stage = schedule.stage_of(epoch)
        if stage == "stage2" and not any(b["stage"] == "stage2" for b in tlog.stage_boundaries):
            tlog.stage_boundaries.append({"stage": "stage2", "epoch": epoch, "step": patch.step_count})
        rng = np.random.default_rng([schedule.seed, epoch])
        order = epoch_indices(schedule, epoch, len(dataset), rng)
        n_batches = 1 if dry_run else schedule.batches_per_epoch
        epoch_records = []
        for b in range(n_batches):
            idx = order[b * schedule.batch_size : (b + 1) * schedule.batch_size]
            batch = prepare_batch(idx, dataset, vit, cache, target_class, schedule, placement, rng)
            for k, (i, pl) in enumerate(zip(batch.indices, batch.placements)):
                tlog.placements.append({"epoch": epoch, "batch": b, "image": i, "top_left": list(pl.top_left), "strategy": pl.strategy})
            samples = [dataset[i] for i in batch.indices]
            for it in range(schedule.attack_iterations):
                patch, parts = attack_iteration(patch, batch, surrogates, config, schedule, rng, stage, eot, cache, samples)
                rec = {k: v for k, v in parts.as_record().items() if v is not None}
                rec.update(step=patch.step_count, epoch=epoch, batch=b, iteration=it)
                tlog.steps.append(rec)
                epoch_records.append(rec)
        tlog.epochs.append({"epoch": epoch, "stage": stage, **_mean_records(epoch_records),
                            "elapsed_s": time.perf_counter() - started})
        log.info("epoch %d (%s): %s", epoch, stage, tlog.epochs[-1])
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, patch, epoch + 1, tlog, {"target_class": target_class})
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
            break
    tlog.wall_clock += time.perf_counter() - started
    if log_path is not None:
        tlog.write_jsonl(log_path)
    return patch, tlog


def export_patch(patch: PatchState, path, config: LossConfig, schedule: TrainSchedule, eot: EotParams, placement: PlacementConfig) -> Path:
    return save_patch(patch, path, config_hash(config, schedule, eot, placement), eot)
