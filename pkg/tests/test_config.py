import pytest
from hypothesis import given
from hypothesis import strategies as st

from omnipatch.config import EotParams, LossConfig, PlacementConfig, TrainSchedule, config_hash, from_dict, to_dict
from omnipatch.errors import ConfigurationError


def test_schedule_stages():
    s = TrainSchedule()
    assert s.total_epochs == 20
    assert [s.stage_of(e) for e in (0, 9, 10, 19)] == ["stage1", "stage1", "stage2", "stage2"]
    assert s.step_size == pytest.approx(1 / 255)


@pytest.mark.parametrize("bad", [dict(gamma=-0.1), dict(beta=1.2), dict(lambda_tv=-1), dict(lambda_attn=float("inf")), dict(divergence="tv")])
def test_loss_config_validation(bad):
    with pytest.raises(ConfigurationError):
        LossConfig(**bad)


@pytest.mark.parametrize("bad", [dict(batch_size=0), dict(optimizer="sgd"), dict(placement_strategy="corner"), dict(step_size=-1)])
def test_schedule_validation(bad):
    with pytest.raises(ConfigurationError):
        TrainSchedule(**bad)


def test_placement_validation():
    with pytest.raises(ConfigurationError):
        PlacementConfig(dilation_k=4)
    with pytest.raises(ConfigurationError):
        PlacementConfig(sample_fraction=0)


def test_from_dict_rejects_unknown_and_converts_lists():
    with pytest.raises(ConfigurationError):
        from_dict(LossConfig, {"gamma": 0.5, "delta": 1})
    eot = from_dict(EotParams, {"scale_range": [0.8, 1.2]})
    assert eot.scale_range == (0.8, 1.2)


@given(st.floats(0, 1), st.floats(0, 1))
def test_hash_roundtrip(g, b):
    cfg = LossConfig(gamma=g, beta=b)
    again = from_dict(LossConfig, to_dict(cfg))
    assert again == cfg and config_hash(again) == config_hash(cfg)


def test_hash_changes_with_values():
    assert config_hash(LossConfig()) != config_hash(LossConfig(gamma=0.5))
