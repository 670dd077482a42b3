"""Hand-object distance maps, contact labels, and the contact-part predictor.

Distance kernels are numpy/float64; the predictor and its loss are torch.
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .errors import ContractError
from .kinematics import hand_points, transform_object

SIGMA = 0.05                      # meters; distance normalization bandwidth
LAMBDA = float(np.exp(-0.5))      # contact threshold on the normalized map
EPS_PROB = 1e-7


def distance_map(hands, objects):
    """Pairwise hand-joint/object-point distances.

    hands: (N, J, 3), objects: (N, P, 3) -> (N, J, P) float64.
    """
    hands = np.asarray(hands, dtype=np.float64)
    objects = np.asarray(objects, dtype=np.float64)
    if hands.ndim != 3 or hands.shape[-1] != 3:
        raise ContractError("hands must be (N, J, 3), got %s" % (hands.shape,))
    if objects.ndim != 3 or objects.shape[-1] != 3:
        raise ContractError("objects must be (N, P, 3), got %s" % (objects.shape,))
    if hands.shape[0] != objects.shape[0]:
        raise ContractError("frame counts differ: hands %d vs objects %d"
                            % (hands.shape[0], objects.shape[0]))
    diff = hands[:, :, None, :] - objects[:, None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def normalize_map(dist, sigma=SIGMA):
    """Gaussian proximity: exp(-d^2 / (2 sigma^2)), in (0, 1]."""
    if sigma <= 0:
        raise ContractError("sigma must be positive, got %r" % sigma)
    dist = np.asarray(dist, dtype=np.float64)
    return np.exp(-(dist * dist) / (2.0 * sigma * sigma))


def gt_contact(norm_map, threshold=LAMBDA):
    """Per-point contact labels: point p is in contact iff its best proximity
    over all frames and hand joints exceeds the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ContractError("threshold must be in (0, 1), got %r" % threshold)
    norm_map = np.asarray(norm_map, dtype=np.float64)
    if norm_map.ndim != 3:
        raise ContractError("normalized map must be (N, J, P)")
    return (norm_map.max(axis=(0, 1)) > threshold)


def distance_threshold(sigma=SIGMA, threshold=LAMBDA):
    """The distance at which the normalized-map rule flips, in meters."""
    return float(sigma * np.sqrt(-2.0 * np.log(threshold)))


def contact_labels_for_sample(sample, body=None, sigma=SIGMA, threshold=None):
    """Ground-truth contact labels for one sample, (P,) in {0, 1}."""
    hands = hand_points(sample.body.frames, body=body, layout=sample.body.layout)
    objs = transform_object(sample.obj.frames, sample.geometry.points)
    dbar = normalize_map(distance_map(hands, objs), sigma=sigma)
    return gt_contact(dbar, threshold if threshold is not None else LAMBDA
                      ).astype(np.int32)


def contact_loss(labels, probs):
    """Binary cross-entropy summed over points; batch dims averaged.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    labels = torch.as_tensor(labels)
    probs = torch.as_tensor(probs)
    if labels.shape != probs.shape:
        raise ContractError("labels %s and probabilities %s differ in shape"
                            % (tuple(labels.shape), tuple(probs.shape)))
    labels = labels.to(probs.dtype if probs.is_floating_point() else torch.float64)
    p = probs.clamp(EPS_PROB, 1.0 - EPS_PROB)
    bce = -(labels * torch.log(p) + (1.0 - labels) * torch.log1p(-p))
    per_sample = bce.sum(dim=-1)
    return per_sample.mean() if per_sample.ndim > 0 else per_sample


class ContactPredictor(nn.Module):
    """Cross-attention stack inferring per-point contact probability.

    Queries start from the instruction feature broadcast to every object
    token; keys/values are the object tokens. No positional encoding, so the
    output is permutation-equivariant in the points.
    """

    def __init__(self, token_dim=128, text_dim=256, width=64, layers=6, heads=4):
        super().__init__()
        if width % heads:
            raise ContractError("width must be divisible by heads")
        self.token_dim = token_dim
        self.text_dim = text_dim
        self.text_proj = nn.Linear(text_dim, width)
        self.query_proj = nn.Linear(token_dim, width)
        self.kv_proj = nn.Linear(token_dim, width)
        self.attn = nn.ModuleList()
        self.ffn = nn.ModuleList()
        self.ln_attn = nn.ModuleList()
        self.ln_ffn = nn.ModuleList()
        for _ in range(layers):
            self.attn.append(nn.MultiheadAttention(width, heads, batch_first=True))
            self.ffn.append(nn.Sequential(nn.Linear(width, 4 * width), nn.ReLU(),
                                          nn.Linear(4 * width, width)))
            self.ln_attn.append(nn.LayerNorm(width))
            self.ln_ffn.append(nn.LayerNorm(width))
        self.head = nn.Linear(width, 1)
        self.register_buffer("fitted", torch.zeros((), dtype=torch.int32))

    def mark_fitted(self):
        self.fitted.fill_(1)

    def forward(self, tokens, text_feat):
        """tokens (B, P, token_dim), text_feat (B, text_dim) -> probs (B, P)."""
        if tokens.ndim != 3 or tokens.shape[-1] != self.token_dim:
            raise ContractError("tokens must be (B, P, %d)" % self.token_dim)
        if text_feat.ndim != 2 or text_feat.shape[-1] != self.text_dim:
            raise ContractError("text features must be (B, %d)" % self.text_dim)
        h = self.query_proj(tokens) + self.text_proj(text_feat)[:, None, :]
        kv = self.kv_proj(tokens)
        for attn, ffn, ln_a, ln_f in zip(self.attn, self.ffn,
                                         self.ln_attn, self.ln_ffn):
            a, _ = attn(h, kv, kv, need_weights=False)
            h = ln_a(h + a)
            h = ln_f(h + ffn(h))
        return torch.sigmoid(self.head(h).squeeze(-1))

    def predict(self, tokens, text_feat):
        """Inference entry point; refuses to run with untrained parameters."""
        if int(self.fitted.item()) == 0:
            raise ContractError("contact predictor has not been trained")
        with torch.no_grad():
            return self.forward(tokens, text_feat)
