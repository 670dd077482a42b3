"""Decoupling body motion into a per-action canonical basis plus a residual.

The canonical motion of an action is the frame-wise mean over that action's
training samples, quantized to float32 (the storage dtype). Residuals are
computed and returned in float64: a float64 difference of float32 values is
exact, so basis + residual reproduces the original frames bit-for-bit after
the float32 cast in recompose().
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, RetrievalError
from .kinematics import canonicalize_pose
from .types import DEFAULT_LAYOUT

from .container import load_canonical, save_canonical


@dataclass
class CanonicalMotionSet:
    """Per-action canonical motions: action_id -> (N, D) float32."""

    by_action: dict
    counts: dict

    def actions(self):
        return sorted(self.by_action)

    def retrieve(self, action_id):
        if action_id not in self.by_action:
            raise RetrievalError("no canonical motion for action %r "
                                 "(known: %s)" % (action_id, self.actions()))
        return self.by_action[action_id]

    def save(self, dataset_path):
        return save_canonical(dataset_path, self.by_action, self.counts)

    @classmethod
    def load(cls, dataset_path):
        by_action, counts = load_canonical(dataset_path)
        return cls(by_action=by_action, counts=counts)


def build_canonical_set(samples):
    """Average body frames per action over the given samples.

    Samples are ordered by sample_id before summation, so the result is
    bitwise invariant to input permutation. Means are computed in float64
    and quantized to float32.
    """
    if not samples:
        raise ContractError("cannot build a canonical set from zero samples")
    groups = {}
    for s in sorted(samples, key=lambda s: s.sample_id):
        groups.setdefault(s.text.action_id, []).append(s)
    by_action, counts = {}, {}
    shape = None
    for a, group in groups.items():
        stack = np.stack([g.body.frames for g in group]).astype(np.float64)
        if shape is None:
            shape = stack.shape[1:]
        elif stack.shape[1:] != shape:
            raise ContractError("inconsistent frame shapes across samples")
        by_action[a] = stack.mean(axis=0).astype(np.float32)
        counts[a] = len(group)
    return CanonicalMotionSet(by_action=by_action, counts=counts)


def compute_residual(frames, canonical):
    """frames (N, D) float32 minus canonical (N, D) float32, exact in float64."""
    frames = np.asarray(frames)
    canonical = np.asarray(canonical)
    if frames.shape != canonical.shape:
        raise ContractError("frames %s and canonical %s differ in shape"
                            % (frames.shape, canonical.shape))
    return frames.astype(np.float64) - canonical.astype(np.float64)


def recompose(canonical, residual, layout=None):
    """basis + residual -> float32 pose frames, axis-angle canonicalized.

    Canonicalization only rewrites rotations whose norm exceeds pi, so
    recompose(canonical, compute_residual(b, canonical)) == b bitwise.
    """
    layout = layout or DEFAULT_LAYOUT
    canonical = np.asarray(canonical)
    residual = np.asarray(residual)
    if canonical.shape != residual.shape:
        raise ContractError("canonical %s and residual %s differ in shape"
                            % (canonical.shape, residual.shape))
    merged = canonical.astype(np.float64) + residual
    merged = canonicalize_pose(merged, layout)
    return merged.astype(np.float32)


def residuals_by_action(samples, cset):
    """Residual arrays grouped per sample: list of (sample, residual float64)."""
    out = []
    for s in samples:
        basis = cset.retrieve(s.text.action_id)
        out.append((s, compute_residual(s.body.frames, basis)))
    return out
