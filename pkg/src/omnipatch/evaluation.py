"""mIoU measurement and the clean / random-patch / trained-patch comparison."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .applicator import IDENTITY, PatchState, apply_patch, sample_transform
from .config import EotParams, LossConfig, PlacementConfig, TrainSchedule
from .errors import ContractError, ParameterError, UndefinedMetricError
from .models import SurrogateHandle, as_image_batch
from .placement import place_from_probabilities, sensitivity_scan

log = logging.getLogger(__name__)

CONDITIONS = ("clean", "random", "patch")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # C x C, rows ground truth, columns prediction

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def update(self, prediction, labels, ignore_value: int = 255) -> "ConfusionMatrix":
        pred = np.asarray(prediction).ravel()
        lab = np.asarray(labels).ravel()
        keep = lab != ignore_value
        C = self.num_classes
        idx = lab[keep].astype(np.int64) * C + pred[keep].astype(np.int64)
        self.counts += np.bincount(idx, minlength=C * C).reshape(C, C)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """Per-class IoU; NaN where the class has empty union."""
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(0) + cm.counts.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU over classes with a nonempty union."""
    iou = class_iou(cm)
    if np.all(np.isnan(iou)):
        raise UndefinedMetricError("no class has a nonempty union")
    return float(np.nanmean(iou))


def _drop(ref, attacked):
    if ref is None or attacked is None or ref == 0:
        return None
    return 100.0 * (ref - attacked) / ref


@dataclass
class ModelResult:
    name: str
    clean_miou: float | None = None
    random_miou: float | None = None
    patch_miou: float | None = None
    per_image: dict = field(default_factory=dict)
    confusion: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def drop_vs_clean(self):
        return _drop(self.clean_miou, self.patch_miou)

    @property
    def drop_vs_random(self):
        return _drop(self.random_miou, self.patch_miou)


@dataclass
class EvaluationReport:
    models: list[ModelResult]
    metadata: dict = field(default_factory=dict)
    clean_only: bool = False

    def __getitem__(self, name: str) -> ModelResult:
        for m in self.models:
            if m.name == name:
                return m
        raise KeyError(name)

    def rows(self) -> list[dict]:
        out = []
        for m in self.models:
            row = {"model": m.name, "clean_miou": m.clean_miou}
            if not self.clean_only:
                row.update(
                    random_patch_miou=m.random_miou, omnipatch_miou=m.patch_miou,
                    drop_vs_clean_pct=m.drop_vs_clean, drop_vs_random_pct=m.drop_vs_random,
                )
            if m.error:
                row["error"] = m.error
            out.append(row)
        return out

    def to_csv(self, path=None) -> str:
        rows = self.rows()
        fieldnames = list(dict.fromkeys(k for r in rows for k in r))
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(v) for k, v in r.items()})
        if path is not None:
            Path(path).write_text(buf.getvalue())
        return buf.getvalue()

    def to_text(self) -> str:
        if self.clean_only:
            header = ["Model", "Clean Image mIoU"]
        else:
            header = ["Model", "Clean Image mIoU", "Random Patch mIoU", "OmniPatch mIoU", "mIoU Drop (%) Clean / Random"]
        lines = [header]
        for m in self.models:
            if m.error:
                lines.append([m.name, f"failed: {m.error}"] + [""] * (len(header) - 2))
                continue
            row = [m.name, _fmt(m.clean_miou)]
            if not self.clean_only:
                row += [_fmt(m.random_miou), _fmt(m.patch_miou), f"{_fmt(m.drop_vs_clean, 2)} / {_fmt(m.drop_vs_random, 2)}"]
            lines.append(row)
        return _table(lines)

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "clean_only": self.clean_only,
            "models": [
                {"name": m.name, "clean_miou": m.clean_miou, "random_miou": m.random_miou,
                 "patch_miou": m.patch_miou, "drop_vs_clean_pct": m.drop_vs_clean,
                 "drop_vs_random_pct": m.drop_vs_random, "per_image": m.per_image, "error": m.error}
                for m in self.models
            ],
        }


def _fmt(v, digits: int = 4):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.{digits}f}"
    return str(v)


def _table(lines) -> str:
    widths = [max(len(str(r[i])) for r in lines) for i in range(len(lines[0]))]
    out = []
    for j, r in enumerate(lines):
        out.append(" | ".join(str(c).ljust(w) for c, w in zip(r, widths)))
        if j == 0:
            out.append("-+-".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def _image_miou(cm: ConfusionMatrix):
    try:
        return miou(cm)
    except UndefinedMetricError:
        return None


def evaluate_patch(
    patch: PatchState | None,
    models: list[SurrogateHandle],
    dataset,
    placement_strategy: str = "sensitive",
    seed: int = 0,
    *,
    patch_size: int | None = None,
    placement_model: SurrogateHandle | None = None,
    target_class: int | None = None,
    placement: PlacementConfig | None = None,
    eot: EotParams | None = None,
    metadata: dict | None = None,
) -> EvaluationReport:
    """Dataset-wide mIoU per model for clean, random-noise-patch and given-patch inputs.

    The placement (and transform, when ``eot`` is enabled) of image i is drawn
    from a generator seeded by (seed, i) and shared by all conditions and
    models.  With ``patch=None`` only the clean condition is measured.
    """
    if len(dataset) == 0:
        raise ParameterError("evaluation dataset is empty")
    placement = placement or PlacementConfig()
    eot = eot or EotParams.identity()
    clean_only = patch is None
    S = patch.size if patch is not None else patch_size
    needs_placement = not clean_only
    if needs_placement and placement_strategy == "sensitive":
        if placement_model is None:
            placement_model = next((m for m in models if m.family == "vit"), None)
        if placement_model is None:
            raise ContractError("sensitive placement needs a vit-family placement model")
        if target_class is None:
            target_class = sensitivity_scan(placement_model, dataset, placement.label_source, placement.strict_average).selected_class

    # per-image patched inputs, shared across models
    plans = []
    for i, sample in enumerate(dataset):
        rng = np.random.default_rng([seed, i])
        if not needs_placement:
            plans.append(None)
            continue
        if placement_strategy == "sensitive":
            with torch.no_grad():
                probs = placement_model(as_image_batch(sample.image)).probabilities[0]
        else:
            probs = torch.zeros(1, *sample.labels.shape)
        pl = place_from_probabilities(probs, target_class if target_class is not None else 0, S, rng,
                                      placement.dilation_k, placement.sample_fraction, placement_strategy)
        noise = torch.from_numpy(rng.uniform(0.0, 1.0, size=(3, S, S)).astype(np.float32))
        tf = sample_transform(eot, rng) if eot.enabled else IDENTITY
        plans.append((pl, noise, tf))

    results = []
    for model in models:
        res = ModelResult(model.name)
        try:
            cms = {c: ConfusionMatrix.empty(model.num_classes) for c in CONDITIONS}
            per_image = {c: [] for c in CONDITIONS}
            for sample, plan in zip(dataset, plans):
                image = as_image_batch(sample.image)[0]
                inputs = {"clean": image}
                if plan is not None:
                    pl, noise, tf = plan
                    inputs["random"] = apply_patch(image, noise, pl, tf).image
                    inputs["patch"] = apply_patch(image, patch.pixels.detach(), pl, tf).image
                with torch.no_grad():
                    preds = model(torch.stack(list(inputs.values()))).logits.argmax(1).numpy()
                preds = dict(zip(inputs, preds))
                for c in CONDITIONS:
                    pred = preds.get(c, preds["clean"])
                    cm = ConfusionMatrix.empty(model.num_classes).update(pred, sample.labels, sample.ignore_value)
                    cms[c] += cm
                    per_image[c].append(_image_miou(cm))
            res.clean_miou, res.random_miou, res.patch_miou = (miou(cms[c]) for c in CONDITIONS)
            res.per_image, res.confusion = per_image, cms
        except Exception as exc:  # recorded per model; the run continues
            log.exception("evaluation of %s failed", model.name)
            res.error = f"{type(exc).__name__}: {exc}"
        results.append(res)
    meta = {"patch_size": S, "placement_strategy": placement_strategy, "seed": seed,
            "target_class": target_class, "eot_enabled": eot.enabled, **(metadata or {})}
    return EvaluationReport(results, meta, clean_only)


# --------------------------------------------------------------------------
# ablations

SUITES = ("placement", "patch_size", "divergence", "grad_align")


@dataclass
class AblationTable:
    suite: str
    variants: list[str]
    reports: dict = field(default_factory=dict)  # variant -> EvaluationReport
    logs: dict = field(default_factory=dict)  # variant -> TrainLog
    errors: dict = field(default_factory=dict)

    def model_names(self) -> list[str]:
        names = []
        for r in self.reports.values():
            names += [m.name for m in r.models if m.name not in names]
        return names

    def value(self, variant: str, model: str):
        rep = self.reports.get(variant)
        if rep is None:
            return None
        try:
            return rep[model].patch_miou
        except KeyError:
            return None

    def rows(self) -> list[dict]:
        return [{"model": m, **{v: self.value(v, m) for v in self.variants}} for m in self.model_names()]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["model", *self.variants], lineterminator="\n")
        writer.writeheader()
        for r in self.rows():
            writer.writerow({k: _fmt(v, 6) for k, v in r.items()})
        if path is not None:
            Path(path).write_text(buf.getvalue())
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [["Model", *self.variants]]
        for r in self.rows():
            lines.append([r["model"], *(_fmt(r[v], 6) for v in self.variants)])
        text = f"Ablation: {self.suite} (patch mIoU)\n" + _table(lines)
        for v, e in self.errors.items():
            text += f"variant {v} failed: {e}\n"
        return text


def ablation_variants(suite: str, config: LossConfig, schedule: TrainSchedule, patch_sizes=(200, 300, 400)):
    """(label, loss config, schedule, eval placement strategy) for every variant of a suite."""
    if suite == "placement":
        return [(s, config, dataclasses.replace(schedule, placement_strategy=s), s) for s in ("center", "random", "sensitive")]
    if suite == "patch_size":
        return [(f"patch_{s}", config, dataclasses.replace(schedule, patch_size=int(s)), schedule.placement_strategy) for s in patch_sizes]
    if suite == "divergence":
        return [(d, dataclasses.replace(config, divergence=d), schedule, schedule.placement_strategy) for d in ("kl", "js")]
    if suite == "grad_align":
        on = config.lambda_align if config.lambda_align > 0 else LossConfig().lambda_align
        return [("align_off", dataclasses.replace(config, lambda_align=0.0), schedule, schedule.placement_strategy),
                ("align_on", dataclasses.replace(config, lambda_align=on), schedule, schedule.placement_strategy)]
    raise ParameterError(f"unknown ablation suite {suite!r}; expected one of {SUITES}")


def run_ablations(
    suite: str,
    config: LossConfig,
    schedule: TrainSchedule,
    train_data,
    eval_data,
    vit: SurrogateHandle,
    cnn: SurrogateHandle,
    targets: list[SurrogateHandle],
    *,
    eot: EotParams | None = None,
    placement: PlacementConfig | None = None,
    patch_sizes=(200, 300, 400),
    eval_seed: int = 0,
) -> AblationTable:
    """Train one patch per variant (same seeds otherwise) and evaluate it on ``targets``."""
    from .trainer import train

    variants = ablation_variants(suite, config, schedule, patch_sizes)
    table = AblationTable(suite, [v[0] for v in variants])
    for label, cfg, sched, strategy in variants:
        try:
            patch, tlog = train(cfg, sched, train_data, vit, cnn, eot=eot, placement=placement)
            table.logs[label] = tlog
            table.reports[label] = evaluate_patch(
                patch, targets, eval_data, strategy, eval_seed, placement_model=vit,
                placement=placement, metadata={"variant": label, "suite": suite},
            )
        except Exception as exc:  # isolate variant failures
            log.exception("ablation variant %s failed", label)
            table.errors[label] = f"{type(exc).__name__}: {exc}"
    return table
