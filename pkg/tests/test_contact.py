"""Distance maps, proximity normalization, contact labels, predictor contracts."""
import math

import numpy as np
import pytest
import torch

from hoigen.contact import (LAMBDA, SIGMA, ContactPredictor,
                            contact_labels_for_sample, contact_loss,
                            distance_map, distance_threshold, gt_contact,
                            normalize_map)
from hoigen.errors import ContractError


# ---------------------------------------------------------------------------
# distance map

def test_distance_map_matches_brute_force():
    rng = np.random.default_rng(0)
    hands = rng.standard_normal((3, 4, 3))
    objs = rng.standard_normal((3, 7, 3))
    dmap = distance_map(hands, objs)
    assert dmap.shape == (3, 4, 7)
    for n in range(3):
        for j in range(4):
            for p in range(7):
                oracle = math.dist(hands[n, j], objs[n, p])
                assert abs(dmap[n, j, p] - oracle) <= 1e-9


def test_distance_map_shape_contracts():
    with pytest.raises(ContractError):
        distance_map(np.zeros((3, 4, 2)), np.zeros((3, 7, 3)))
    with pytest.raises(ContractError):
        distance_map(np.zeros((3, 4, 3)), np.zeros((2, 7, 3)))
    with pytest.raises(ContractError):
        distance_map(np.zeros((4, 3)), np.zeros((3, 7, 3)))


# ---------------------------------------------------------------------------
# normalization and the threshold rule

def test_proximity_at_one_sigma():
    val = normalize_map(np.array(SIGMA))
    assert abs(float(val) - 0.606531) <= 1e-6


def test_proximity_endpoints_and_monotonicity():
    d = np.linspace(0.0, 0.5, 200)
    g = normalize_map(d)
    assert g[0] == 1.0
    assert np.all(np.diff(g) < 0)
    assert np.all((g > 0.0) & (g <= 1.0))
    with pytest.raises(ContractError):
        normalize_map(d, sigma=0.0)


def test_threshold_rule_equals_inverted_distance_rule():
    """Proximity > lambda must agree with raw distance < the inverted
    threshold on randomized instances (1000 point-sets)."""
    assert abs(distance_threshold() - 0.05) <= 1e-12
    assert abs(distance_threshold() - SIGMA * math.sqrt(-2 * math.log(LAMBDA))) \
        <= 1e-15
    rng = np.random.default_rng(42)
    for _ in range(1000):
        dmap = rng.uniform(0.0, 0.12, size=(3, 2, 5))
        by_proximity = gt_contact(normalize_map(dmap))
        by_distance = dmap.min(axis=(0, 1)) < distance_threshold()
        assert np.array_equal(by_proximity, by_distance)


def test_gt_contact_boundary_and_contracts():
    eps = 1e-9
    below = np.full((1, 1, 2), distance_threshold() - eps)
    above = np.full((1, 1, 2), distance_threshold() + eps)
    assert gt_contact(normalize_map(below)).all()
    assert not gt_contact(normalize_map(above)).any()
    with pytest.raises(ContractError):
        gt_contact(np.zeros((2, 3)), threshold=0.5)
    with pytest.raises(ContractError):
        gt_contact(np.zeros((1, 1, 2)), threshold=1.5)


def test_sample_labels_are_binary_with_positives(micro_world):
    for s in micro_world.split("train")[:4]:
        labels = contact_labels_for_sample(s)
        assert labels.shape == (s.geometry.points.shape[0],)
        assert set(np.unique(labels)) <= {0, 1}
        assert labels.sum() > 0
        assert labels[s.geometry.anchor_index] == 1


# ---------------------------------------------------------------------------
# loss

def test_contact_loss_matches_manual_bce():
    labels = torch.tensor([[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    probs = torch.tensor([[0.9, 0.2, 0.7], [0.1, 0.4, 0.6]])
    oracle = 0.0
    for b in range(2):
        for p in range(3):
            y, q = labels[b, p].item(), probs[b, p].item()
            oracle += -(y * math.log(q) + (1 - y) * math.log(1 - q))
    oracle /= 2  # summed over points, averaged over the batch
    loss = contact_loss(labels, probs)
    assert abs(loss.item() - oracle) <= 1e-6


def test_contact_loss_clamps_saturated_probabilities():
    labels = torch.tensor([1.0, 0.0])
    probs = torch.tensor([0.0, 1.0])  # worst case: confidently wrong
    loss = contact_loss(labels, probs)
    assert torch.isfinite(loss)
    # two confidently-wrong points, each clamped near -log(1e-7) ~ 16.1
    assert 2 * 15.0 <= loss.item() <= 2 * 17.5
    with pytest.raises(ContractError):
        contact_loss(torch.zeros(3), torch.zeros(4))


def test_contact_loss_zero_when_confidently_right():
    labels = torch.tensor([1.0, 0.0, 1.0])
    loss = contact_loss(labels, labels.clone())
    assert loss.item() <= 5e-7  # clamp floor only (float32 rounding)


# ---------------------------------------------------------------------------
# predictor

def test_predictor_refuses_inference_before_training():
    torch.manual_seed(0)
    pred = ContactPredictor(token_dim=8, text_dim=6, width=8, layers=1, heads=2)
    tokens, text = torch.randn(1, 5, 8), torch.randn(1, 6)
    with pytest.raises(ContractError):
        pred.predict(tokens, text)
    pred.mark_fitted()
    out = pred.predict(tokens, text)
    assert out.shape == (1, 5)
    assert ((out >= 0) & (out <= 1)).all()


def test_predictor_is_permutation_equivariant():
    torch.manual_seed(0)
    pred = ContactPredictor(token_dim=8, text_dim=6, width=8, layers=2,
                            heads=2).eval()
    tokens, text = torch.randn(2, 9, 8), torch.randn(2, 6)
    perm = torch.randperm(9)
    with torch.no_grad():
        direct = pred(tokens, text)
        permuted = pred(tokens[:, perm], text)
    assert torch.allclose(direct[:, perm], permuted, atol=1e-6)


def test_predictor_shape_contracts():
    pred = ContactPredictor(token_dim=8, text_dim=6, width=8, layers=1, heads=2)
    with pytest.raises(ContractError):
        pred(torch.randn(1, 5, 7), torch.randn(1, 6))
    with pytest.raises(ContractError):
        pred(torch.randn(1, 5, 8), torch.randn(1, 5))
    with pytest.raises(ContractError):
        ContactPredictor(width=10, heads=4)
