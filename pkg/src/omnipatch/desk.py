"""The small synthetic stack used for desk-scale experiments and smoke runs."""

from __future__ import annotations

from dataclasses import dataclass

from .data import SegmentationSample, generate_synthetic_dataset
from .models import SurrogateHandle, make_toy_cnn, make_toy_vit, pretrain_toy_model


@dataclass
class DeskStack:
    train: list[SegmentationSample]
    eval: list[SegmentationSample]
    vit: SurrogateHandle
    cnn: SurrogateHandle
    targets: list[SurrogateHandle]


def build_desk_stack(
    num_train: int = 40,
    num_eval: int = 20,
    size: tuple[int, int] = (128, 256),
    num_classes: int = 8,
    data_seed: int = 0,
    model_seed: int = 1,
    pretrain_steps: int = 150,
    vit_token_size: int = 8,
    vit_layers: int = 2,
    cnn_channels: int = 16,
) -> DeskStack:
    """Synthetic train/eval splits, fitted ViT and CNN surrogates, and held-out targets.

    The held-out CNN uses a model seed distinct from the surrogate CNN; the
    surrogates themselves are also reported as (white-box) targets.
    """
    train = generate_synthetic_dataset(num_train, size, num_classes, data_seed)
    evaluation = generate_synthetic_dataset(num_eval, size, num_classes, data_seed + 1000)

    def fit(handle, k):
        return pretrain_toy_model(handle, train, pretrain_steps, seed=model_seed * 10 + k)

    vit = fit(make_toy_vit(vit_token_size, vit_layers, num_classes, model_seed, name="toy_vit"), 0)
    cnn = fit(make_toy_cnn(cnn_channels, num_classes, model_seed + 1, name="toy_cnn"), 1)
    held_out = fit(make_toy_cnn(cnn_channels, num_classes, model_seed + 2, name="toy_cnn_heldout"), 2)
    return DeskStack(train, evaluation, vit, cnn, [held_out, vit, cnn])
