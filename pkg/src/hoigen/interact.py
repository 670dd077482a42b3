"""Interaction-error measurement and guided correction of object postures.

The error for a frame n against an anchor frame m over an in-contact pair
set S is

    I_n = || d_n[S] - d_m[S] ||_2  +  || d_n[S] ||_2

(distance drift from the grasp moment plus absolute separation). The guided
corrector descends the summed error over all in-contact frames by gradient
steps on the object posture track, with a halving line search that never
accepts an increase. Gradients flow through a differentiable rigid transform
and distance map (torch); the accept/reject test evaluates the exact error.
"""
from __future__ import annotations

import numpy as np
import torch

from .errors import ContractError

_NORM_EPS = 1e-12      # gradient-stabilizing epsilon inside the surrogate norms


# ---------------------------------------------------------------------------
# differentiable geometry (torch mirrors of the numpy kernels)

def rotation_matrices_torch(aa):
    """Rodrigues formula, differentiable. aa (..., 3) -> (..., 3, 3)."""
    theta = torch.sqrt((aa * aa).sum(dim=-1, keepdim=True) + 1e-18)
    axis = aa / theta
    ax, ay, az = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = torch.zeros_like(ax)
    k = torch.stack([
        torch.stack([zero, -az, ay], dim=-1),
        torch.stack([az, zero, -ax], dim=-1),
        torch.stack([-ay, ax, zero], dim=-1),
    ], dim=-2)
    t = theta[..., None]
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(k.shape)
    return eye + torch.sin(t) * k + (1.0 - torch.cos(t)) * (k @ k)


def transform_object_torch(frames, points):
    """frames (N, 6), points (P, 3) -> posed points (N, P, 3)."""
    rot = rotation_matrices_torch(frames[:, :3])
    return torch.einsum("nab,pb->npa", rot, points) + frames[:, None, 3:]


def distance_map_torch(hands, objects):
    """(N, J, 3) x (N, P, 3) -> exact distances (N, J, P)."""
    diff = hands[:, :, None, :] - objects[:, None, :, :]
    return torch.sqrt((diff * diff).sum(dim=-1).clamp(min=0.0))


# ---------------------------------------------------------------------------
# contact detection and interaction error (numpy contract surface)

def detect_contact_frames(dmap, delta):
    """Frames whose closest hand-object distance is strictly below delta.

    Returns (frames ascending int64 array, anchor) where anchor is the first
    in-contact frame, or (empty, None) when nothing touches.
    """
    dmap = np.asarray(dmap, dtype=np.float64)
    if dmap.ndim != 3:
        raise ContractError("distance map must be (N, J, P)")
    if delta <= 0:
        raise ContractError("delta must be positive")
    mins = dmap.min(axis=(1, 2))
    frames = np.nonzero(mins < delta)[0]
    return frames, (int(frames[0]) if len(frames) else None)


def contact_pairs(dmap, frame, delta):
    """(joint, point) pairs within delta at the given frame."""
    dmap = np.asarray(dmap, dtype=np.float64)
    js, ps = np.nonzero(dmap[frame] <= delta)
    return js, ps


def interaction_error(dmap, n, m, delta, pairs=None):
    """I_n against anchor frame m. Both frames must be in contact."""
    dmap = np.asarray(dmap, dtype=np.float64)
    for name, idx in (("n", n), ("m", m)):
        if not 0 <= idx < dmap.shape[0]:
            raise ContractError("frame %s=%d out of range" % (name, idx))
        if dmap[idx].min() >= delta:
            raise ContractError("frame %s=%d is not in contact (min %.4f >= %.4f)"
                                % (name, idx, dmap[idx].min(), delta))
    if pairs is None:
        pairs = contact_pairs(dmap, m, delta)
    js, ps = pairs
    if len(js) == 0:
        raise ContractError("empty in-contact pair set")
    dn = dmap[n, js, ps]
    dm = dmap[m, js, ps]
    return float(np.linalg.norm(dn - dm) + np.linalg.norm(dn))


def interaction_loss(dmap, delta):
    """Summed interaction error over all in-contact frames.

    Returns dict with total, per-frame errors, the anchor frame, and the
    pair set (fixed from the anchor frame).
    """
    frames, anchor = detect_contact_frames(dmap, delta)
    if anchor is None:
        return {"total": 0.0, "frames": frames, "anchor": None,
                "pairs": (np.array([], np.int64), np.array([], np.int64)),
                "per_frame": []}
    pairs = contact_pairs(dmap, anchor, delta)
    per_frame = [interaction_error(dmap, int(n), anchor, delta, pairs)
                 for n in frames]
    return {"total": float(sum(per_frame)), "frames": frames, "anchor": anchor,
            "pairs": pairs, "per_frame": per_frame}


# ---------------------------------------------------------------------------
# guided correction

TERM_CHOICES = ("temporal", "absolute")


def _error_torch(obj_frames, hands, points, frames, anchor, js, ps, exact,
                 terms=TERM_CHOICES):
    """Summed interaction error in torch; smoothed norms when exact=False."""
    posed = transform_object_torch(obj_frames, points)
    sel = posed[:, ps, :]                       # (N, |S|, 3)
    hand_sel = hands[:, js, :]                  # (N, |S|, 3)
    d_all = torch.sqrt(((hand_sel - sel) ** 2).sum(dim=-1)
                       + (0.0 if exact else 1e-18))
    dm = d_all[anchor]
    total = obj_frames.new_zeros(())
    eps = 0.0 if exact else _NORM_EPS
    for n in frames:
        dn = d_all[n]
        if "temporal" in terms:
            total = total + torch.sqrt(((dn - dm) ** 2).sum() + eps)
        if "absolute" in terms:
            total = total + torch.sqrt((dn ** 2).sum() + eps)
    return total


def guided_correction(obj_frames, hands, points, delta=0.05, eta=1e-2,
                      steps=1, max_halvings=10, terms=TERM_CHOICES):
    """Descend the interaction error by adjusting the object posture track.

    obj_frames (N, 6), hands (N, J, 3) fixed, points (P, 3).
    Contact frames and the pair set are detected once from the input and held
    fixed for the whole call. ``terms`` selects which error terms drive the
    descent (temporal drift, absolute separation, or both — the default).
    Returns (corrected (N, 6) float64, trace dict).
    The accepted error sequence never increases; with no contact or a
    non-finite gradient the input comes back unchanged (with a diagnostic).
    """
    if eta < 0:
        raise ContractError("eta must be >= 0")
    if steps < 0:
        raise ContractError("steps must be >= 0")
    terms = tuple(terms)
    if not terms or any(t not in TERM_CHOICES for t in terms):
        raise ContractError("terms must be a non-empty subset of %s"
                            % (TERM_CHOICES,))
    obj_np = np.asarray(obj_frames, dtype=np.float64)
    hands_np = np.asarray(hands, dtype=np.float64)
    points_np = np.asarray(points, dtype=np.float64)
    from .contact import distance_map      # local import, no cycle at module load
    dmap = distance_map(hands_np, transform_object_np(obj_np, points_np))
    frames, anchor = detect_contact_frames(dmap, delta)
    trace = {"anchor": anchor, "frames": frames.tolist(), "steps": [],
             "note": None}
    if anchor is None:
        trace["note"] = "no contact detected; input unchanged"
        return obj_np, trace
    js, ps = contact_pairs(dmap, anchor, delta)
    trace["n_pairs"] = int(len(js))
    hands_t = torch.as_tensor(hands_np)
    points_t = torch.as_tensor(points_np)
    frame_list = [int(f) for f in frames]
    x = torch.as_tensor(obj_np).clone()
    with torch.no_grad():
        current = float(_error_torch(x, hands_t, points_t, frame_list,
                                     anchor, js, ps, exact=True, terms=terms))
    trace["initial_error"] = current
    for step in range(steps):
        leaf = x.clone().requires_grad_(True)
        err = _error_torch(leaf, hands_t, points_t, frame_list, anchor,
                           js, ps, exact=False, terms=terms)
        err.backward()
        grad = leaf.grad
        if grad is None or not torch.isfinite(grad).all():
            trace["note"] = "non-finite gradient at step %d; stopped" % step
            break
        accepted = False
        rate = float(eta)
        for halving in range(max_halvings + 1):
            with torch.no_grad():
                cand = x - rate * grad
                cand_err = float(_error_torch(cand, hands_t, points_t,
                                              frame_list, anchor, js, ps,
                                              exact=True, terms=terms))
            if np.isfinite(cand_err) and cand_err <= current:
                x = cand
                current = cand_err
                trace["steps"].append({"step": step, "error": current,
                                       "eta": rate, "halvings": halving})
                accepted = True
                break
            rate *= 0.5
        if not accepted:
            trace["note"] = "line search found no non-increasing step at %d" % step
            break
    trace["final_error"] = current
    return x.numpy(), trace


def transform_object_np(frames, points):
    # thin alias so this module reads standalone; same kernel as kinematics
    from .kinematics import transform_object
    return transform_object(frames, points)
