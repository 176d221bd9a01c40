"""``omnipatch`` command line: sensitivity, train, evaluate, ablate.

Every command takes ``--config file.yaml``, any number of ``--set a.b=value``
overrides and ``--out DIR``.  The whole configuration is validated before any
output is written; the resolved configuration is echoed to
``DIR/resolved_config.yaml``.

Exit codes: 0 success, 1 invalid configuration or inputs, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .config import EotParams, LossConfig, PlacementConfig, TrainSchedule, from_dict, to_dict
from .errors import ConfigurationError, IngestionError, LoadError, OmniPatchError, PatchFormatError

log = logging.getLogger("omnipatch")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2
COMMANDS = ("sensitivity", "train", "evaluate", "ablate")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # or "directory"
    root: str | None = None
    train_split: str = "train"
    eval_split: str = "val"
    resolution: tuple[int, int] = (1024, 2048)  # H, W
    num_classes: int = 8
    num_train: int = 40
    num_eval: int = 20
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.source not in ("synthetic", "directory"):
            raise ConfigurationError(f"data.source must be synthetic or directory, got {self.source!r}")
        if self.source == "directory" and not self.root:
            raise ConfigurationError("data.root is required when data.source is directory")
        if len(self.resolution) != 2 or min(self.resolution) < 16:
            raise ConfigurationError(f"data.resolution must be [H, W] with H, W >= 16, got {self.resolution}")


@dataclass(frozen=True)
class ModelsConfig:
    """Toy stack parameters, or adapter files for external models."""

    vit_adapter: str | None = None
    cnn_adapter: str | None = None
    target_adapters: tuple[str, ...] = ()
    vit_token_size: int = 32
    vit_layers: int = 2
    cnn_channels: int = 16
    vit_input_downscale: float = 0.75
    model_seed: int = 1
    pretrain_steps: int = 0

    def __post_init__(self):
        if not 0 < self.vit_input_downscale <= 1:
            raise ConfigurationError("models.vit_input_downscale must lie in (0, 1]")
        if self.pretrain_steps < 0:
            raise ConfigurationError("models.pretrain_steps must be nonnegative")


@dataclass(frozen=True)
class EvaluationConfig:
    patch: str | None = None
    placement_strategy: str = "sensitive"
    seed: int = 0
    eot: bool = False
    clean_only: bool = False

    def __post_init__(self):
        if self.placement_strategy not in ("sensitive", "center", "random"):
            raise ConfigurationError(f"unknown evaluation.placement_strategy {self.placement_strategy!r}")


@dataclass(frozen=True)
class AblationConfig:
    suite: str = "placement"
    patch_sizes: tuple[int, ...] = (200, 300, 400)

    def __post_init__(self):
        from .evaluation import SUITES

        if self.suite not in SUITES:
            raise ConfigurationError(f"unknown ablation suite {self.suite!r}; expected one of {SUITES}")


SECTIONS = {
    "loss": LossConfig,
    "schedule": TrainSchedule,
    "eot": EotParams,
    "placement": PlacementConfig,
    "data": DataConfig,
    "models": ModelsConfig,
    "evaluation": EvaluationConfig,
    "ablation": AblationConfig,
}


@dataclass(frozen=True)
class RunConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    eot: EotParams = field(default_factory=EotParams)
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    data: DataConfig = field(default_factory=DataConfig)
    models: ModelsConfig = field(default_factory=ModelsConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    resume: bool = False
    dry_run: bool = False
    log_level: str = "INFO"
    # clean-prediction cache entries (per image and model); lower it for large images
    cache_size: int = 256

    @classmethod
    def from_mapping(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        scalars = {"resume", "dry_run", "log_level", "cache_size"}
        unknown = sorted(set(data) - set(SECTIONS) - scalars)
        if unknown:
            raise ConfigurationError(f"unknown top-level keys: {', '.join(unknown)}")
        kwargs = {}
        for name, section in SECTIONS.items():
            value = data.get(name) or {}
            if not isinstance(value, dict):
                raise ConfigurationError(f"section {name!r} must be a mapping")
            kwargs[name] = from_dict(section, value, path=name)
        for k in scalars & set(data):
            kwargs[k] = data[k]
        return cls(**kwargs)

    def to_mapping(self) -> dict:
        return to_dict(self)


def _apply_override(tree: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigurationError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigurationError(f"bad override key {key!r}")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = yaml.safe_load(raw)


def resolve_config(config_path=None, overrides=()) -> RunConfig:
    tree = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            tree = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: invalid YAML ({exc})") from exc
        if not isinstance(tree, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
    for o in overrides:
        _apply_override(tree, o)
    return RunConfig.from_mapping(tree)


def validate_inputs(cfg: RunConfig, command: str) -> None:
    """File-system checks that must pass before any output is created."""
    if cfg.data.source == "directory":
        root = Path(cfg.data.root)
        splits = {cfg.data.train_split} if command in ("sensitivity", "train") else {cfg.data.eval_split}
        if command == "ablate":
            splits = {cfg.data.train_split, cfg.data.eval_split}
        for split in sorted(splits):
            for sub in ("images", "labels"):
                if not (root / sub / split).is_dir():
                    raise ConfigurationError(f"dataset directory missing: {root / sub / split}")
    for p in (cfg.models.vit_adapter, cfg.models.cnn_adapter, *cfg.models.target_adapters):
        if p is not None and not Path(p).is_file():
            raise ConfigurationError(f"adapter config not found: {p}")
    if command == "evaluate" and not cfg.evaluation.clean_only:
        if cfg.evaluation.patch is None:
            raise ConfigurationError("evaluate needs --patch (or evaluation.patch) unless clean_only is set")
        if not Path(cfg.evaluation.patch).is_file():
            raise ConfigurationError(f"patch file not found: {cfg.evaluation.patch}")


# --------------------------------------------------------------------------
# building the run


@dataclass
class Workspace:
    train: list
    eval: list
    vit: object
    cnn: object
    targets: list


def _load_data(cfg: RunConfig, split: str):
    from .data import generate_synthetic_dataset, load_dataset

    d = cfg.data
    if d.source == "synthetic":
        n, offset = (d.num_train, 0) if split == "train" else (d.num_eval, 1000)
        return generate_synthetic_dataset(n, d.resolution, d.num_classes, d.seed + offset)
    name = d.train_split if split == "train" else d.eval_split
    return load_dataset(d.root, name, d.resolution, d.num_classes, d.workers)


def build_workspace(cfg: RunConfig, need=("train", "eval")) -> Workspace:
    from .models import load_adapter, make_toy_cnn, make_toy_vit, pretrain_toy_model

    train = _load_data(cfg, "train") if "train" in need or cfg.models.pretrain_steps else []
    evaluation = _load_data(cfg, "eval") if "eval" in need else []
    m = cfg.models
    C = cfg.data.num_classes

    def fit(handle, k):
        return pretrain_toy_model(handle, train, m.pretrain_steps, seed=m.model_seed * 10 + k) if m.pretrain_steps else handle

    if m.vit_adapter:
        vit = load_adapter(m.vit_adapter)
    else:
        vit = fit(make_toy_vit(m.vit_token_size, m.vit_layers, C, m.model_seed,
                               input_downscale=m.vit_input_downscale, name="toy_vit"), 0)
    if m.cnn_adapter:
        cnn = load_adapter(m.cnn_adapter)
    else:
        cnn = fit(make_toy_cnn(m.cnn_channels, C, m.model_seed + 1, name="toy_cnn"), 1)
    if m.target_adapters:
        targets = [load_adapter(p) for p in m.target_adapters]
    else:
        targets = [fit(make_toy_cnn(m.cnn_channels, C, m.model_seed + 2, name="toy_cnn_heldout"), 2), vit, cnn]
    return Workspace(train, evaluation, vit, cnn, targets)


def _prepare_out(out: Path, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(yaml.safe_dump(cfg.to_mapping(), sort_keys=True))


def _bar_chart(path: Path, labels, values, title: str, ylabel: str, highlight=None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4, 0.7 * len(labels) + 2), 3.2))
    colors = ["tab:red" if i == highlight else "tab:blue" for i in range(len(labels))]
    ax.bar(range(len(labels)), values, color=colors)
    ax.set_xticks(range(len(labels)), labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    # fixed metadata keeps the file byte-identical across runs
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# --------------------------------------------------------------------------
# commands


def cmd_sensitivity(cfg: RunConfig, out: Path) -> int:
    from .data import ROLES
    from .placement import sensitivity_scan

    ws = build_workspace(cfg, need=("train",))
    names = [ROLES[c] if c < len(ROLES) else f"class_{c}" for c in range(cfg.data.num_classes)]
    report = sensitivity_scan(ws.vit, ws.train, cfg.placement.label_source, cfg.placement.strict_average,
                              class_names=names)
    _prepare_out(out, cfg)
    rows = report.to_rows()
    with open(out / "sensitivity_scores.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "score": f"{r['score']:.6f}"})
    _bar_chart(out / "sensitivity_chart.png", [r["class_name"] for r in rows], [r["score"] for r in rows],
               "Class-wise sensitivity score", "mean normalized entropy", report.selected_class)
    c = report.selected_class
    print(f"selected class: {c} ({names[c]})")
    return EXIT_OK


def cmd_train(cfg: RunConfig, out: Path) -> int:
    from .trainer import export_patch, train

    ws = build_workspace(cfg, need=("train",))
    ckpt = out / "checkpoint.zip"
    if cfg.resume and not ckpt.is_file():
        raise ConfigurationError(f"resume requested but {ckpt} does not exist")
    _prepare_out(out, cfg)
    patch, tlog = train(
        cfg.loss, cfg.schedule, ws.train, ws.vit, ws.cnn, eot=cfg.eot, placement=cfg.placement,
        checkpoint_path=ckpt, resume_from=ckpt if cfg.resume else None, dry_run=cfg.dry_run,
        cache_size=cfg.cache_size, log_path=out / "train_log.jsonl",
    )
    export_patch(patch, out / "patch.png", cfg.loss, cfg.schedule, cfg.eot, cfg.placement)
    (out / "train_header.json").write_text(json.dumps(tlog.header, indent=2, sort_keys=True))
    print(f"patch written to {out / 'patch.png'} after {patch.step_count} steps "
          f"(target class {tlog.header.get('target_class')})")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, out: Path) -> int:
    from .applicator import load_patch
    from .evaluation import evaluate_patch

    ev = cfg.evaluation
    patch = None if ev.clean_only else load_patch(ev.patch)
    ws = build_workspace(cfg, need=("eval",))
    report = evaluate_patch(
        patch, ws.targets, ws.eval, ev.placement_strategy, ev.seed,
        patch_size=cfg.schedule.patch_size, placement_model=ws.vit, placement=cfg.placement,
        eot=cfg.eot if ev.eot else None,
        metadata={"divergence": cfg.loss.divergence, "align": cfg.loss.lambda_align > 0},
    )
    _prepare_out(out, cfg)
    report.to_csv(out / "evaluation.csv")
    (out / "evaluation.txt").write_text(report.to_text())
    (out / "evaluation.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    print(report.to_text(), end="")
    return EXIT_OK if not any(m.error for m in report.models) else EXIT_RUNTIME


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    from .evaluation import run_ablations

    ws = build_workspace(cfg)
    table = run_ablations(
        cfg.ablation.suite, cfg.loss, cfg.schedule, ws.train, ws.eval, ws.vit, ws.cnn, ws.targets,
        eot=cfg.eot, placement=cfg.placement, patch_sizes=cfg.ablation.patch_sizes,
        eval_seed=cfg.evaluation.seed,
    )
    _prepare_out(out, cfg)
    stem = f"ablation_{table.suite}"
    table.to_csv(out / f"{stem}.csv")
    (out / f"{stem}.txt").write_text(table.to_text())
    first = table.model_names()[0] if table.model_names() else None
    if first is not None:
        vals = [table.value(v, first) for v in table.variants]
        _bar_chart(out / f"{stem}.png", table.variants, [v if v is not None else 0.0 for v in vals],
                   f"{table.suite} ablation ({first})", "patch mIoU")
    print(table.to_text(), end="")
    return EXIT_OK if not table.errors else EXIT_RUNTIME


HANDLERS = {"sensitivity": cmd_sensitivity, "train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate}


COMMAND_HELP = {
    "sensitivity": "rank classes by mean predictive entropy and pick the target class",
    "train": "optimize a patch with the two-stage schedule",
    "evaluate": "compare clean, random-patch and trained-patch mIoU on every target",
    "ablate": "train and evaluate the variants of one ablation suite",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omnipatch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMAND_HELP[name], description=COMMAND_HELP[name])
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. schedule.patch_size=32")
        p.add_argument("--out", required=True, help="output directory")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.zip")
            p.add_argument("--dry-run", action="store_true", help="one batch per stage, end to end")
        if name == "evaluate":
            p.add_argument("--patch", help="trained patch PNG")
            p.add_argument("--clean-only", action="store_true", help="only measure clean mIoU")
        if name == "ablate":
            p.add_argument("--suite", help="placement | patch_size | divergence | grad_align")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if getattr(args, "resume", False):
        overrides.append("resume=true")
    if getattr(args, "dry_run", False):
        overrides.append("dry_run=true")
    if getattr(args, "patch", None):
        overrides.append(f"evaluation.patch={json.dumps(args.patch)}")
    if getattr(args, "clean_only", False):
        overrides.append("evaluation.clean_only=true")
    if getattr(args, "suite", None):
        overrides.append(f"ablation.suite={args.suite}")
    try:
        cfg = resolve_config(args.config, overrides)
        validate_inputs(cfg, args.command)
    except (ConfigurationError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=getattr(logging, str(cfg.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        return HANDLERS[args.command](cfg, out)
    except (IngestionError, LoadError, PatchFormatError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OmniPatchError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
