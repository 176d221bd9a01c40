import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from omnipatch.data import (
    IGNORE_VALUE,
    POLE_CLASS,
    SegmentationSample,
    generate_synthetic_dataset,
    load_dataset,
    write_dataset,
)
from omnipatch.errors import ConfigurationError, ContractError, IngestionError, LoadError
from omnipatch.models import (
    AdapterConfig,
    load_adapter,
    make_external_adapter,
    make_toy_cnn,
    make_toy_vit,
    predict,
    save_adapter,
)


# ---------------------------------------------------------------- toy models


def test_toy_cnn_shape_and_determinism():
    x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    a = make_toy_cnn(16, 8, seed=0)
    b = make_toy_cnn(16, 8, seed=0)
    out = a(x)
    assert out.logits.shape == (1, 8, 64, 64) and out.attention is None
    assert torch.equal(out.logits, a(x).logits)
    assert torch.equal(out.logits, b(x).logits)


def test_toy_cnn_gray_probabilities_normalized():
    out = make_toy_cnn(16, 8, seed=0)(torch.full((1, 3, 64, 64), 0.5))
    assert torch.allclose(out.probabilities.sum(1), torch.ones(1, 64, 64), atol=1e-5)


def test_toy_models_do_not_touch_global_rng():
    torch.manual_seed(123)
    expected = torch.rand(3)
    torch.manual_seed(123)
    make_toy_vit(8, 2, 8, seed=5)
    assert torch.equal(torch.rand(3), expected)


def test_toy_vit_attention_contract():
    vit = make_toy_vit(8, 2, 8, seed=0)
    out = vit(torch.rand(1, 3, 64, 64))
    assert len(out.attention) == 2
    for a in out.attention:
        assert a.shape == (1, 64, 64)
        assert torch.allclose(a.sum(-1), torch.ones(1, 64), atol=1e-5)
    assert out.token_grid == (8, 8)
    assert out.logits.shape == (1, 8, 64, 64)


def test_toy_vit_input_gradient_nonzero():
    vit = make_toy_vit(8, 2, 8, seed=0)
    x = torch.rand(1, 3, 32, 32, requires_grad=True)
    vit(x).logits.sum().backward()
    assert x.grad.norm() > 0
    assert x.grad[0, :, 5, 7].abs().sum() > 0


def test_toy_vit_rejects_indivisible_input():
    with pytest.raises(ConfigurationError):
        make_toy_vit(8, 1, 4, seed=0)(torch.rand(1, 3, 30, 32))


def test_downscaled_handle_returns_full_resolution():
    vit = make_toy_vit(8, 1, 5, seed=0, input_downscale=0.75)
    out = vit(torch.rand(2, 3, 64, 128))
    assert out.logits.shape == (2, 5, 64, 128)
    assert out.token_grid == (6, 12)
    assert out.attention[0].shape == (2, 72, 72)


def test_predict_sums_to_one():
    samples = generate_synthetic_dataset(3, (32, 64), 6, seed=0)
    probs = predict(make_toy_cnn(8, 6, seed=0), [s.image for s in samples], batch_size=2)
    assert probs.shape == (3, 6, 32, 64)
    assert torch.allclose(probs.sum(1), torch.ones(3, 32, 64), atol=1e-5)


# ---------------------------------------------------------------- adapters


def test_adapter_roundtrip(tmp_path):
    vit = make_toy_vit(8, 1, 4, seed=3, input_downscale=0.75)
    cfg_path = save_adapter(vit, tmp_path, "v")
    loaded = load_adapter(cfg_path)
    assert loaded.family == "vit" and loaded.input_downscale == 0.75
    x = torch.rand(1, 3, 64, 64)
    assert torch.equal(vit(x).logits, loaded(x).logits)


def test_adapter_cnn_has_no_attention(tmp_path):
    loaded = load_adapter(save_adapter(make_toy_cnn(8, 4, seed=1), tmp_path, "c"))
    assert loaded.family == "cnn" and loaded(torch.rand(1, 3, 16, 16)).attention is None


def test_adapter_errors(tmp_path):
    with pytest.raises(LoadError):
        make_external_adapter(tmp_path / "nope.pt", "cnn", AdapterConfig("toy_cnn", 4, params={"channels": 8}))
    weights = tmp_path / "w.pt"
    torch.save(make_toy_cnn(8, 4, seed=1).module.state_dict(), weights)
    with pytest.raises(LoadError):
        make_external_adapter(weights, "cnn", AdapterConfig("toy_cnn", 4, params={"channels": 16}))
    with pytest.raises(ContractError):
        make_external_adapter(weights, "vit", AdapterConfig("toy_cnn", 4, params={"channels": 8}))
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"architecture": "toy_cnn", "family": "cnn", "weights": "missing.pt", "num_classes": 4}))
    with pytest.raises(LoadError):
        load_adapter(bad)


# ---------------------------------------------------------------- synthetic data


def test_synthetic_contract_and_determinism():
    a = generate_synthetic_dataset(20, (128, 256), 8, seed=1)
    b = generate_synthetic_dataset(20, (128, 256), 8, seed=1)
    assert len(a) == 20
    for s, t in zip(a, b):
        assert s.image.shape == (128, 256, 3) and s.labels.shape == (128, 256)
        assert s.labels.min() >= 0 and s.labels.max() < 8
        assert np.array_equal(s.image, t.image) and np.array_equal(s.labels, t.labels)
        assert 0 <= s.image.min() and s.image.max() <= 1


def test_thin_class_is_rare():
    samples = generate_synthetic_dataset(100, (128, 256), 8, seed=0)
    coverage = np.mean([(s.labels == POLE_CLASS).mean() for s in samples])
    assert 0 < coverage < 0.02


def test_synthetic_rejects_few_classes():
    with pytest.raises(ConfigurationError):
        generate_synthetic_dataset(2, (32, 32), 3, seed=0)


# ---------------------------------------------------------------- directory data


def test_load_roundtrip_and_ignore(tmp_path):
    samples = generate_synthetic_dataset(2, (32, 48), 5, seed=0)
    samples[0].labels[0, :4] = IGNORE_VALUE
    write_dataset(samples, tmp_path, "train")
    loaded = load_dataset(tmp_path, "train", (32, 48), num_classes=5)
    assert len(loaded) == 2
    assert loaded[0].labels.shape == (32, 48) and loaded[0].image.shape == (32, 48, 3)
    assert np.all(loaded[0].labels[0, :4] == IGNORE_VALUE)
    assert not loaded[0].valid_mask()[0, :4].any()
    assert np.array_equal(loaded[1].labels, samples[1].labels)


def test_load_resizes_labels_nearest(tmp_path):
    samples = generate_synthetic_dataset(1, (64, 96), 5, seed=2)
    write_dataset(samples, tmp_path, "val")
    loaded = load_dataset(tmp_path, "val", (32, 48))
    assert set(np.unique(loaded[0].labels)) <= set(np.unique(samples[0].labels))


def test_load_errors(tmp_path):
    with pytest.raises(IngestionError):
        load_dataset(tmp_path, "train", (16, 16))
    (tmp_path / "images" / "train").mkdir(parents=True)
    (tmp_path / "labels" / "train").mkdir(parents=True)
    with pytest.raises(IngestionError):
        load_dataset(tmp_path, "train", (16, 16))
    Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(tmp_path / "images" / "train" / "a.png")
    with pytest.raises(IngestionError) as info:
        load_dataset(tmp_path, "train", (16, 16))
    assert "images/train/a.png" in info.value.offenders
    Image.fromarray(np.full((16, 16), 9, np.uint8)).save(tmp_path / "labels" / "train" / "a.png")
    with pytest.raises(IngestionError):
        load_dataset(tmp_path, "train", (16, 16), num_classes=5)


def test_sample_validation():
    with pytest.raises(Exception):
        SegmentationSample(np.zeros((4, 4, 3), np.float32), np.zeros((5, 4), np.int64))
