import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import build_fd_fixture, ce_by_hand, central_difference_check, edt_oracle, fd_objectives, js_oracle
from omnipatch.config import LossConfig
from omnipatch.errors import ContractError, NumericError, UndefinedLossError
from omnipatch.losses import (
    PixelPartition,
    attention_hijack_loss,
    boundary_disruption_loss,
    gradient_alignment,
    js_divergence,
    kl_divergence,
    partition_by_js,
    signed_distance_maps,
    stage1_loss,
    stage2_loss,
    stage2_terms,
    total_loss,
    total_variation,
)


# ---------------------------------------------------------------- helpers / oracles


def _fixture_logits():
    # 1 x 3 classes x 2 x 2
    return torch.tensor([[[2.0, 0.1], [0.3, -1.0]], [[0.5, 1.2], [0.0, 2.0]], [[-1.0, 0.4], [1.5, 0.2]]], dtype=torch.float64)


# ---------------------------------------------------------------- stage 1


def test_stage1_gamma_half_is_half_mean_ce():
    logits = torch.randn(2, 5, 6, 7, dtype=torch.float64)
    labels = torch.randint(0, 5, (2, 6, 7))
    labels[0, 0, :3] = 255
    clean = torch.randint(0, 5, (2, 6, 7))
    ce = F.cross_entropy(logits, labels, ignore_index=255, reduction="mean")
    assert float(stage1_loss(logits, labels, clean, 0.5)) == pytest.approx(0.5 * float(ce), abs=1e-6)


def test_stage1_empty_misclassified_set():
    logits = torch.randn(4, 3, 3, dtype=torch.float64)
    labels = torch.randint(0, 4, (3, 3))
    ce = F.cross_entropy(logits[None], labels[None]).item()
    assert float(stage1_loss(logits, labels, labels.clone(), 0.7)) == pytest.approx(0.3 * ce, abs=1e-6)


def test_stage1_hand_fixture():
    logits = _fixture_logits()
    labels = torch.tensor([[0, 1], [2, 1]])
    clean = torch.tensor([[0, 0], [2, 0]])  # pixels (0,0),(1,0) correct; (0,1),(1,1) wrong
    ces = [ce_by_hand(logits[:, y, x], int(labels[y, x])) for y, x in [(0, 0), (0, 1), (1, 0), (1, 1)]]
    expected = (0.3 * (ces[0] + ces[2]) + 0.7 * (ces[1] + ces[3])) / 4
    assert float(stage1_loss(logits, labels, clean, 0.7)) == pytest.approx(expected, abs=1e-6)


def test_stage1_ignored_pixels_excluded_and_all_ignored_raises():
    logits = _fixture_logits()
    labels = torch.tensor([[0, 255], [2, 1]])
    clean = labels.clone()
    ces = [ce_by_hand(logits[:, y, x], int(labels[y, x])) for y, x in [(0, 0), (1, 0), (1, 1)]]
    assert float(stage1_loss(logits, labels, clean, 0.7)) == pytest.approx(0.3 * sum(ces) / 3, abs=1e-9)
    with pytest.raises(UndefinedLossError):
        stage1_loss(logits, torch.full((2, 2), 255), clean, 0.7)


def test_stage1_monotone_in_gamma_when_wrong_set_dominates():
    logits = _fixture_logits()
    labels = torch.tensor([[0, 2], [2, 0]])  # (0,1) and (1,1) have large CE
    clean = torch.tensor([[0, 0], [2, 2]])
    vals = [float(stage1_loss(logits, labels, clean, g)) for g in np.linspace(0, 1, 11)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------- divergences


def test_js_identity_and_disjoint():
    p = np.array([0.2, 0.3, 0.5])
    assert js_divergence(p, p) == pytest.approx(0.0, abs=1e-9)
    assert js_divergence(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(math.log(2), abs=1e-6)


def test_js_matches_direct_summation():
    p, q = np.array([0.8, 0.2]), np.array([0.2, 0.8])
    assert js_divergence(p, q) == pytest.approx(js_oracle(p, q), abs=1e-6)


def test_js_random_pairs_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        C = int(rng.integers(2, 12))
        p, q = rng.dirichlet(np.full(C, 0.5)), rng.dirichlet(np.full(C, 0.5))
        a, b = js_divergence(p, q), js_divergence(q, p)
        assert abs(a - b) <= 1e-9
        assert -1e-9 <= a <= math.log(2) + 1e-9
        assert abs(a - js_oracle(p, q)) <= 1e-9
        assert abs(js_divergence(p, p)) <= 1e-9


def test_js_torch_and_numpy_agree():
    p = torch.softmax(torch.randn(5, 3, 3, dtype=torch.float64), 0)
    q = torch.softmax(torch.randn(5, 3, 3, dtype=torch.float64), 0)
    assert np.allclose(js_divergence(p, q).numpy(), js_divergence(p.numpy(), q.numpy()))


def test_kl_basic():
    p, q = np.array([0.5, 0.5]), np.array([0.9, 0.1])
    assert kl_divergence(p, q) == pytest.approx(0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1))
    assert kl_divergence(p, p) == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------- partition


def test_partition_constant_divergence_sets_a_empty():
    p = torch.softmax(torch.randn(3, 4, 4), 0)
    q = torch.softmax(torch.randn(3, 1, 1), 0).expand(3, 4, 4)
    part = partition_by_js([p.expand(3, 4, 4) * 0 + q], [q.clone()])
    assert part.set_a.sum() == 0 and part.set_b.sum() == 16


def test_partition_identity_sets_a_empty():
    p = torch.softmax(torch.randn(2, 4, 5, 6), 1)
    part = partition_by_js([p, p], [p.clone(), p.clone()], labels=torch.zeros(2, 5, 6, dtype=torch.long))
    assert part.set_a.sum() == 0 and part.size == 60


def test_partition_two_value_map_picks_high_half():
    # per-pixel JS of 0.1 on the left half and 0.5 on the right half
    def pair_with_js(target):
        lo, hi = 0.0, 0.5
        for _ in range(60):
            mid = (lo + hi) / 2
            p, q = np.array([0.5 + mid, 0.5 - mid]), np.array([0.5 - mid, 0.5 + mid])
            lo, hi = (mid, hi) if js_oracle(p, q) < target else (lo, mid)
        return p, q

    clean = torch.zeros(2, 4, 4, dtype=torch.float64)
    adv = torch.zeros_like(clean)
    for cols, target in ((slice(0, 2), 0.1), (slice(2, 4), 0.5)):
        p, q = pair_with_js(min(target, math.log(2) - 1e-6))
        clean[:, :, cols] = torch.tensor(p).view(2, 1, 1)
        adv[:, :, cols] = torch.tensor(q).view(2, 1, 1)
    part = partition_by_js([clean], [adv])
    expected = torch.zeros(4, 4, dtype=torch.bool)
    expected[:, 2:] = True
    assert torch.equal(part.set_a, expected)
    assert torch.equal(part.set_b, ~expected)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["batch", "image"]), st.sampled_from(["js", "kl"]))
def test_partition_is_disjoint_cover_of_valid_pixels(seed, scope, divergence):
    g = torch.Generator().manual_seed(seed)
    clean = [torch.softmax(torch.randn(2, 4, 5, 5, generator=g), 1) for _ in range(2)]
    adv = [torch.softmax(torch.randn(2, 4, 5, 5, generator=g), 1) for _ in range(2)]
    labels = torch.randint(0, 4, (2, 5, 5), generator=g)
    labels[0, 0] = 255
    part = partition_by_js(clean, adv, labels=labels, divergence=divergence, scope=scope)
    assert not (part.set_a & part.set_b).any()
    assert torch.equal(part.set_a | part.set_b, labels != 255)


def test_partition_kl_uses_clean_given_adv():
    clean = torch.tensor([0.9, 0.1]).view(2, 1, 1).repeat(1, 1, 2)
    adv = torch.tensor([[0.5, 0.2], [0.5, 0.8]]).view(2, 1, 2)
    part = partition_by_js([clean], [adv], divergence="kl")
    assert part.criterion == "kl_divergence"
    assert part.set_a[0, 1] and not part.set_a[0, 0]


def test_partition_shape_mismatch():
    with pytest.raises(ContractError):
        partition_by_js([torch.ones(2, 3, 3)], [torch.ones(2, 3, 4)])


# ---------------------------------------------------------------- stage 2


def _full_partition(shape, high):
    a = torch.zeros(shape, dtype=torch.bool)
    a[high] = True
    return PixelPartition(a, ~a, "js_divergence")


def test_stage2_beta_half_reduction():
    lv, lc = torch.randn(4, 3, 3, dtype=torch.float64), torch.randn(4, 3, 3, dtype=torch.float64)
    labels = torch.randint(0, 4, (3, 3))
    part = _full_partition((3, 3), (slice(0, 1),))
    mean_ce = [F.cross_entropy(l[None], labels[None]).item() for l in (lv, lc)]
    assert float(stage2_loss({"vit": lv, "cnn": lc}, labels, part, 0.5)) == pytest.approx(0.5 * np.mean(mean_ce), abs=1e-6)


def test_stage2_duplicate_surrogate_reduction():
    lg = torch.randn(4, 3, 3, dtype=torch.float64)
    labels = torch.randint(0, 4, (3, 3))
    part = _full_partition((3, 3), (slice(1, 3), 0))
    ce = F.cross_entropy(lg[None], labels[None], reduction="none")[0]
    single = (0.7 * ce[part.set_a].sum() + 0.3 * ce[part.set_b].sum()) / 9
    assert float(stage2_loss([lg, lg.clone()], labels, part, 0.3)) == pytest.approx(float(single), abs=1e-12)


def test_stage2_hand_fixture():
    lv = _fixture_logits()
    lc = torch.flip(_fixture_logits(), dims=[0])
    labels = torch.tensor([[0, 1], [2, 1]])
    a = torch.tensor([[True, False], [False, True]])
    part = PixelPartition(a, ~a, "js_divergence")
    total = 0.0
    for lg in (lv, lc):
        for y in range(2):
            for x in range(2):
                w = 0.7 if a[y, x] else 0.3
                total += w * ce_by_hand(lg[:, y, x], int(labels[y, x]))
    expected = total / (2 * 4)
    assert float(stage2_loss({"vit": lv, "cnn": lc}, labels, part, 0.3)) == pytest.approx(expected, abs=1e-6)
    terms = stage2_terms([lv, lc], labels, part, 0.3)
    assert float(sum(terms)) == pytest.approx(expected, abs=1e-12)


def test_stage2_monotone_in_beta():
    lg = _fixture_logits()
    labels = torch.tensor([[0, 2], [2, 0]])
    # the high-CE pixels go to set_b, so increasing beta increases the loss
    part = PixelPartition(torch.tensor([[True, False], [True, False]]), torch.tensor([[False, True], [False, True]]), "js_divergence")
    vals = [float(stage2_loss([lg, lg], labels, part, b)) for b in np.linspace(0, 1, 11)]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_stage2_empty_surrogates():
    with pytest.raises(ContractError):
        stage2_loss({}, torch.zeros(2, 2, dtype=torch.long), _full_partition((2, 2), (0,)), 0.3)


# ---------------------------------------------------------------- alignment


def test_alignment_cases():
    g = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    assert float(gradient_alignment(g, 2 * g)) == pytest.approx(-1.0, abs=1e-6)
    assert float(gradient_alignment(g, -g)) == pytest.approx(1.0, abs=1e-6)
    assert float(gradient_alignment(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 3.0]))) == pytest.approx(0.0, abs=1e-6)
    assert float(gradient_alignment(g, torch.zeros(3))) == 0.0


def test_alignment_nan_raises():
    with pytest.raises(NumericError):
        gradient_alignment(torch.tensor([float("nan"), 1.0]), torch.tensor([1.0, 1.0]))


def test_alignment_length_mismatch():
    with pytest.raises(ContractError):
        gradient_alignment(torch.ones(3), torch.ones(4))


@given(
    st.lists(st.floats(-10, 10), min_size=4, max_size=4),
    st.lists(st.floats(-10, 10), min_size=4, max_size=4),
    st.floats(1e-3, 1e3), st.floats(1e-3, 1e3),
)
def test_alignment_scale_invariance(g1, g2, a, b):
    g1, g2 = np.array(g1), np.array(g2)
    if np.linalg.norm(g1) < 1e-3 or np.linalg.norm(g2) < 1e-3:
        return
    base = float(gradient_alignment(g1, g2))
    assert float(gradient_alignment(a * g1, b * g2)) == pytest.approx(base, abs=1e-6)
    assert -1 - 1e-9 <= base <= 1 + 1e-9


# ---------------------------------------------------------------- attention hijack


def test_attention_saturated_floor_and_uniform():
    T, k = 16, 5
    tokens = torch.zeros(1, T, dtype=torch.bool)
    tokens[0, :k] = True
    sat = torch.zeros(1, T, T)
    sat[..., :k] = 1.0 / k
    assert float(attention_hijack_loss([sat, sat], tokens)) == pytest.approx(-1.0, abs=1e-6)
    floor = torch.zeros(1, T, T)
    floor[..., k:] = 1.0 / (T - k)
    assert float(attention_hijack_loss([floor], tokens)) == pytest.approx(0.0, abs=1e-6)
    uni = torch.full((1, T, T), 1.0 / T)
    assert float(attention_hijack_loss([uni, uni, uni], tokens)) == pytest.approx(-k / T, abs=1e-6)


def test_attention_layer_subset_and_errors():
    T = 4
    tokens = torch.tensor([[True, False, False, False]])
    a = torch.full((1, T, T), 0.25)
    b = torch.zeros(1, T, T)
    b[..., 0] = 1.0
    assert float(attention_hijack_loss([a, b], tokens, layers=[1])) == pytest.approx(-1.0)
    with pytest.raises(ContractError):
        attention_hijack_loss([], tokens)
    with pytest.raises(ContractError):
        attention_hijack_loss([a], torch.zeros(1, T, dtype=torch.bool))


# ---------------------------------------------------------------- boundary


def test_signed_distance_matches_brute_force():
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 3, (8, 8))
    labels[:3, :3] = 0
    phi = signed_distance_maps(labels, 4)
    for c in range(3):
        inside = labels == c
        expected = edt_oracle(~inside) - edt_oracle(inside)
        assert np.allclose(phi[c], expected, atol=1e-5)
    assert np.all(phi[3] == 0)  # absent class


def test_boundary_hand_fixture():
    labels = np.zeros((8, 8), int)
    labels[2:6, 3:7] = 1
    probs = torch.softmax(torch.randn(2, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(0)), 0)
    total = 0.0
    for c in range(2):
        inside = labels == c
        phi = edt_oracle(~inside) - edt_oracle(inside)
        total += float((phi * probs[c].numpy()).sum())
    expected = -total / 64
    assert float(boundary_disruption_loss(probs, torch.as_tensor(labels))) == pytest.approx(expected, abs=1e-5)


def test_boundary_symmetric_split_cancels():
    labels = torch.zeros(6, 8, dtype=torch.long)
    labels[:, 4:] = 1
    probs = torch.full((2, 6, 8), 0.5, dtype=torch.float64)
    assert float(boundary_disruption_loss(probs, labels)) == pytest.approx(0.0, abs=1e-6)


def test_boundary_one_hot_is_extreme_against_perturbations():
    # The negated loss rewards mass far outside the true regions, so the exact
    # one-hot map is the *largest* (least disruptive) value for a geometry.
    labels = np.zeros((10, 10), int)
    labels[3:7, 2:8] = 1
    labels[:, 8:] = 2
    lab = torch.as_tensor(labels)
    one_hot = F.one_hot(lab, 3).permute(2, 0, 1).double()
    ref = float(boundary_disruption_loss(one_hot, lab))
    g = torch.Generator().manual_seed(0)
    for t in (0.1, 0.3, 0.5, 0.7, 0.9):
        wrong = torch.softmax(torch.randn(3, 10, 10, dtype=torch.float64, generator=g) * 3, 0)
        perturbed = (1 - t) * one_hot + t * wrong
        assert float(boundary_disruption_loss(perturbed, lab)) <= ref + 1e-12


def test_boundary_single_class_map_is_finite():
    probs = torch.softmax(torch.randn(3, 5, 5), 0)
    val = boundary_disruption_loss(probs, torch.zeros(5, 5, dtype=torch.long))
    assert torch.isfinite(val) and float(val) == 0.0


def test_boundary_ignores_void_pixels():
    labels = torch.zeros(4, 4, dtype=torch.long)
    labels[:, 2:] = 1
    labels[0, 0] = 255
    probs = torch.softmax(torch.randn(2, 4, 4), 0)
    assert torch.isfinite(boundary_disruption_loss(probs, labels))
    with pytest.raises(UndefinedLossError):
        boundary_disruption_loss(probs, torch.full((4, 4), 255))


# ---------------------------------------------------------------- TV


def test_tv_constant():
    assert float(total_variation(torch.full((3, 6, 6), 0.4))) == 0.0


def test_tv_vertical_edge():
    S, h = 8, 0.6
    p = torch.zeros(3, S, S, dtype=torch.float64)
    p[1, :, 3:] = h
    assert float(total_variation(p)) == pytest.approx(h / S, abs=1e-6)


def test_tv_two_by_two():
    p = torch.zeros(1, 2, 2, dtype=torch.float64)
    p[0] = torch.tensor([[0.1, 0.5], [0.7, 0.2]], dtype=torch.float64)
    hand = abs(0.7 - 0.1) + abs(0.2 - 0.5) + abs(0.5 - 0.1) + abs(0.2 - 0.7)
    assert float(total_variation(p)) == pytest.approx(hand / 4, abs=1e-9)


# ---------------------------------------------------------------- total


def test_total_zero_weights_is_attack():
    cfg = LossConfig(lambda_attn=0, lambda_boundary=0, lambda_tv=0, lambda_align=0)
    parts = total_loss(torch.tensor(1.7), cfg, "stage2", attn=-0.4, boundary=3.0, tv=2.0, align=0.5)
    assert float(parts.total) == pytest.approx(-1.7)
    assert float(parts.attack) == pytest.approx(-1.7)


def test_total_align_in_stage1_rejected():
    with pytest.raises(ContractError):
        total_loss(1.0, LossConfig(), "stage1", align=0.1)


def test_total_recombination_with_defaults():
    cfg = LossConfig()
    assert (cfg.gamma, cfg.beta, cfg.lambda_attn, cfg.lambda_boundary, cfg.lambda_tv, cfg.lambda_align) == (0.7, 0.3, 0.1, 0.2, 1e-4, 0.1)
    s, attn, bnd, tv, al = 1.234, -0.321, -12.5, 3.3, 0.42
    p2 = total_loss(s, cfg, "stage2", attn, bnd, tv, al)
    assert p2.total == pytest.approx(-s + 0.1 * attn + 0.2 * bnd + 1e-4 * tv + 0.1 * al, abs=1e-6)
    p1 = total_loss(s, cfg, "stage1", attn, bnd, tv)
    assert p1.total == pytest.approx(-s + 0.1 * attn + 0.2 * bnd + 1e-4 * tv, abs=1e-6)
    assert p1.align is None and p1.as_record()["stage_value"] == s


def test_saturated_inputs_stay_finite():
    one_hot = F.one_hot(torch.tensor([[0, 1], [1, 0]]), 2).permute(2, 0, 1).double()
    logits = torch.log(one_hot + 1e-30)
    labels = torch.tensor([[1, 0], [0, 1]])
    assert torch.isfinite(stage1_loss(logits, labels, labels, 0.7))
    part = partition_by_js([one_hot], [1 - one_hot])
    assert torch.isfinite(stage2_loss([logits, logits], labels, part, 0.3))
    assert math.isfinite(float(js_divergence(one_hot, 1 - one_hot, dim=0).sum()))
    assert torch.isfinite(boundary_disruption_loss(one_hot, labels))
    assert torch.isfinite(total_variation(torch.ones(3, 4, 4)))


# ---------------------------------------------------------------- finite differences w.r.t. the patch


@pytest.fixture(scope="module")
def fd_fixture():
    return build_fd_fixture()


@pytest.mark.parametrize("name", ["stage1", "stage2", "attn", "boundary", "tv", "align"])
def test_loss_gradients_match_central_differences(fd_fixture, name):
    fn = fd_objectives(fd_fixture)[name]
    results = central_difference_check(fn, fd_fixture["theta"], create_graph=name == "align")
    assert len(results) == 10
    for idx, an, fd, ok in results:
        assert ok, (name, idx, an, fd)
