"""Procedural desk-scale world: scripted manipulation clips with rigid grasps.

Each sample is fully determined by (spec.seed, sample_id): base motion curves
are closed-form per action, a deterministic warp adapts them to the object's
template and size, and a seeded low-frequency jitter individualizes the clip.
The object rides the wrist frame rigidly inside a scripted contact window,
with its designated anchor point placed exactly at the wrist joint, so
hand-object distances are constant over the window and the minimum distance
is zero by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ConfigError, ContractError
from .kinematics import (axis_angle_from_matrix, forward_kinematics,
                         transform_object, wrap_axis_angle)
from .types import (ACTION_NAMES, OBJECT_NAMES, BodyPoseSequence, HOISample,
                    JOINT_INDEX, ObjectGeometry, ObjectPostureSequence,
                    PoseLayout, TextInstruction, default_body, validate_sample)
from .container import Dataset

WRIST = JOINT_INDEX["r_wrist"]

# contact window per action, as fractions of the clip
WINDOW_FRACTIONS = {
    0: (0.25, 0.75),   # lift
    1: (0.30, 0.90),   # push
    2: (0.20, 0.80),   # drink
    3: (0.15, 0.90),   # inspect
}


def scripted_window(action_id, n_frames):
    """Inclusive (first, last) contact frame for an action's script."""
    if action_id not in WINDOW_FRACTIONS:
        raise ContractError("unknown action id %r" % action_id)
    w0, w1 = WINDOW_FRACTIONS[action_id]
    return int(round(w0 * (n_frames - 1))), int(round(w1 * (n_frames - 1)))


@dataclass
class ScenarioSpec:
    """Generator configuration. Defaults give the 600-sample reference world."""

    seed: int = 0
    n_frames: int = 64
    n_points: int = 256
    instances_per_pair: int = 50
    actions: tuple = (0, 1, 2, 3)
    objects: tuple = (0, 1, 2)
    split_fractions: tuple = (0.8, 0.05, 0.15)   # train, val, test
    jitter_amp: float = 0.05                     # radians; 0 disables jitter
    warp_amp: float = 1.0                        # 0 disables object-driven warp
    scale_range: tuple = (0.85, 1.15)
    grasp_radius: float = 0.05                   # meters; designated-region reach

    def validate(self):
        if self.n_frames < 8:
            raise ConfigError("n_frames must be >= 8")
        if self.n_points < 16:
            raise ConfigError("n_points must be >= 16")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise ConfigError("split fractions must be non-negative and sum to 1")
        if not self.actions or any(a not in WINDOW_FRACTIONS for a in self.actions):
            raise ConfigError("actions must be a non-empty subset of 0..3")
        if not self.objects or any(o not in (0, 1, 2) for o in self.objects):
            raise ConfigError("objects must be a non-empty subset of 0..2")
        if self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise ConfigError("bad scale range %s" % (self.scale_range,))
        return self

    def to_meta(self):
        d = asdict(self)
        d["actions"] = list(self.actions)
        d["objects"] = list(self.objects)
        d["split_fractions"] = list(self.split_fractions)
        d["scale_range"] = list(self.scale_range)
        return d


# ---------------------------------------------------------------------------
# smooth curve primitives

def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _ramp(t, t0, t1):
    return _smoothstep((t - t0) / max(t1 - t0, 1e-9))


def _bump(t, t0, t1):
    """Raised cosine supported on [t0, t1]."""
    u = np.clip((t - t0) / max(t1 - t0, 1e-9), 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * u), u


# ---------------------------------------------------------------------------
# object templates

def _sample_box(rng, s, n):
    he = np.array([0.09, 0.07, 0.11]) * s
    areas = np.array([he[1] * he[2], he[1] * he[2], he[0] * he[2],
                      he[0] * he[2], he[0] * he[1], he[0] * he[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for i in range(n):
        f = face[i]
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        rest = [a for a in range(3) if a != axis]
        pts[i, axis] = sign * he[axis]
        pts[i, rest[0]] = u[i, 0] * he[rest[0]]
        pts[i, rest[1]] = u[i, 1] * he[rest[1]]
    anchor = np.array([0.0, -0.5 * he[1], -he[2]])   # near-bottom, body side
    return pts, anchor


def _sample_cylinder(rng, s, n):
    r, h = 0.04 * s, 0.22 * s
    a_side = 2.0 * np.pi * r * h
    a_cap = np.pi * r * r
    kind = rng.choice(3, size=n, p=np.array([a_side, a_cap, a_cap])
                      / (a_side + 2 * a_cap))
    ang = rng.uniform(0.0, 2.0 * np.pi, size=n)
    pts = np.empty((n, 3))
    for i in range(n):
        if kind[i] == 0:
            pts[i] = [r * np.cos(ang[i]), r * np.sin(ang[i]),
                      rng.uniform(-h / 2, h / 2)]
        else:
            rr = r * np.sqrt(rng.uniform())
            z = h / 2 if kind[i] == 1 else -h / 2
            pts[i] = [rr * np.cos(ang[i]), rr * np.sin(ang[i]), z]
    anchor = np.array([0.0, -r, -0.25 * h])
    return pts, anchor


def _sample_sphere(rng, s, n):
    r = 0.085 * s
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    anchor_dir = np.array([0.0, -0.55, -0.80])
    return v * r, anchor_dir / np.linalg.norm(anchor_dir) * r


_TEMPLATES = {"box": _sample_box, "cylinder": _sample_cylinder,
              "sphere": _sample_sphere}


def object_size(object_id, scale):
    """Characteristic radius used by the motion warp."""
    base = (0.09, 0.075, 0.085)[object_id]
    return base * scale


def sample_points(spec, object_id, rng):
    """Draw a surface point set. Returns (points (P,3) f64, anchor_index, scale)."""
    template = OBJECT_NAMES[object_id]
    scale = float(rng.uniform(*spec.scale_range))
    pts, anchor = _TEMPLATES[template](rng, scale, spec.n_points)
    centroid = pts.mean(axis=0)
    pts = pts - centroid
    anchor = anchor - centroid
    anchor_index = int(np.argmin(np.linalg.norm(pts - anchor, axis=1)))
    return pts, anchor_index, scale


# ---------------------------------------------------------------------------
# body motion

_J = JOINT_INDEX


def _base_curves(action_id, t, w0, w1):
    """Per-joint axis-angle component curves for one action script.

    Returns dict (joint_index, component) -> array over t, plus root dict.
    """
    reach = _ramp(t, max(w0 - 0.2, 0.0), w0)
    win, wu = _bump(t, w0, w1)
    c = {}
    root = {"y": np.zeros_like(t), "z": -0.02 * _bump(t, w0 - 0.12, w0 + 0.12)[0]}
    # resting arm hang
    c[(_J["l_shoulder"], 1)] = np.full_like(t, 1.25)
    c[(_J["r_shoulder"], 1)] = np.full_like(t, -1.25)
    c[(_J["l_elbow"], 0)] = np.full_like(t, 0.10)
    c[(_J["spine"], 0)] = 0.12 * _bump(t, w0 - 0.15, w0 + 0.2)[0]
    sh = (_J["r_shoulder"], 0)
    el = (_J["r_elbow"], 0)
    wr = (_J["r_wrist"], 0)
    hd = (_J["head"], 0)
    if action_id == 0:      # lift: raise the grasped object toward the chest
        c[sh] = 0.45 * reach + 0.50 * _ramp(t, w0 + 0.05, 0.72)
        c[(_J["r_shoulder"], 1)] = -1.25 + 0.35 * reach
        c[el] = 0.55 * reach + 0.35 * _ramp(t, w0 + 0.05, 0.72)
    elif action_id == 1:    # push: lean in and drive the object forward
        root["y"] = 0.22 * _ramp(t, w0, w1)
        c[sh] = 0.55 * reach + 0.15 * win
        c[(_J["r_shoulder"], 1)] = -1.25 + 0.25 * reach
        c[el] = 0.80 * reach - 0.55 * _ramp(t, w0, w1)
        c[(_J["spine"], 0)] = 0.12 * _bump(t, w0 - 0.15, w0 + 0.2)[0] \
            + 0.10 * _ramp(t, w0, w1)
    elif action_id == 2:    # drink: arc the object up to the mouth and back
        c[sh] = 0.50 * reach + 0.55 * _bump(t, 0.32, 0.72)[0]
        c[(_J["r_shoulder"], 1)] = -1.25 + 0.40 * reach
        c[el] = 0.60 * reach + 0.85 * _bump(t, 0.32, 0.72)[0]
        c[hd] = -0.28 * _bump(t, 0.40, 0.68)[0]
    elif action_id == 3:    # inspect: hold close and twist the wrist
        c[sh] = 0.55 * reach + 0.08 * np.sin(2.0 * np.pi * 2.0 * wu) * win
        c[(_J["r_shoulder"], 1)] = -1.25 + 0.45 * reach
        c[el] = 0.70 * reach
        c[wr] = 0.85 * np.sin(2.0 * np.pi * 1.5 * wu) * win
        c[hd] = 0.18 * _bump(t, w0, w1)[0]
    else:
        raise ContractError("unknown action id %r" % action_id)
    return c, root


def _warp_curves(action_id, object_id, size, warp_amp, t, w0, w1):
    """Deterministic object-conditioned adjustment of the base script."""
    win = _bump(t, max(w0 - 0.1, 0.0), w1)[0]
    rel = size / 0.083 - 1.0      # signed relative object size
    c = {}
    c[(_J["r_shoulder"], 0)] = warp_amp * 0.45 * rel * win
    c[(_J["r_elbow"], 0)] = warp_amp * -0.35 * rel * win
    if object_id == 0:    # box: squarer, wider carry
        c[(_J["r_shoulder"], 2)] = warp_amp * 0.16 * win
    elif object_id == 1:  # cylinder: tighter elbow
        c[(_J["r_elbow"], 0)] = c[(_J["r_elbow"], 0)] + warp_amp * 0.18 * win
    else:                 # sphere: open the shoulder
        c[(_J["r_shoulder"], 1)] = warp_amp * -0.15 * win
    return c


_JITTER_DIMS = (
    ("root_z", 0.012), (("spine", 0), 0.5), (("head", 0), 0.5),
    (("r_shoulder", 0), 1.0), (("r_shoulder", 1), 0.8), (("r_shoulder", 2), 0.5),
    (("r_elbow", 0), 1.0), (("r_wrist", 0), 0.6),
    (("l_shoulder", 1), 0.4), (("l_elbow", 0), 0.4),
)


def _jitter_curves(rng, amp, t):
    """Seeded smooth per-sample variation on a fixed dimension subset."""
    out = {}
    for key, scale in _JITTER_DIMS:
        a = rng.normal(size=2)
        phase = rng.uniform(0.0, 1.0, size=2)
        curve = (a[0] * np.sin(np.pi * (t + phase[0]))
                 + 0.5 * a[1] * np.sin(2.0 * np.pi * (t + phase[1])))
        out[key] = amp * scale * curve
    return out


def make_body(spec, action_id, object_id, size, rng, layout=None,
              with_jitter=True):
    layout = layout or PoseLayout()
    n = spec.n_frames
    t = np.linspace(0.0, 1.0, n)
    w0f, w1f = WINDOW_FRACTIONS[action_id]
    curves, root = _base_curves(action_id, t, w0f, w1f)
    for key, add in _warp_curves(action_id, object_id, size,
                                 spec.warp_amp, t, w0f, w1f).items():
        curves[key] = curves.get(key, 0.0) + add
    if with_jitter and spec.jitter_amp > 0.0:
        for key, add in _jitter_curves(rng, spec.jitter_amp, t).items():
            if key == "root_z":
                root["z"] = root["z"] + add
            else:
                jk = (_J[key[0]], key[1])
                curves[jk] = curves.get(jk, 0.0) + add
    frames = np.zeros((n, layout.frame_dim), dtype=np.float64)
    frames[:, 0] = 0.0
    frames[:, 1] = root["y"]
    frames[:, 2] = 0.95 + root["z"]
    for (joint, comp), vals in curves.items():
        frames[:, 3 + 3 * joint + comp] = vals
    return frames


# ---------------------------------------------------------------------------
# object attachment

def _solve_attachment(body_frames, anchor_point, window, body=None, layout=None):
    body_sk = body or default_body()
    n0, n1 = window
    pos, rot = forward_kinematics(body_frames, body=body_sk, layout=layout,
                                  return_rotations=True)
    wrist_p = pos[:, WRIST]                       # (N, 3)
    wrist_r = rot[:, WRIST]                       # (N, 3, 3)
    n = len(body_frames)
    anchor = np.asarray(anchor_point, dtype=np.float64)
    rmat = np.tile(np.eye(3), (n, 1, 1))
    trans = np.empty((n, 3))
    rel = wrist_r[n0:n1 + 1] @ wrist_r[n0].T      # rotation relative to grasp frame
    rmat[n0:n1 + 1] = rel
    trans[n0:n1 + 1] = wrist_p[n0:n1 + 1] - np.einsum("nab,b->na", rel, anchor)
    trans[:n0] = wrist_p[n0] - anchor             # resting pose, anchor at grasp site
    rmat[:n0] = np.eye(3)
    rmat[n1 + 1:] = rmat[n1]
    trans[n1 + 1:] = trans[n1]
    aa = wrap_axis_angle(axis_angle_from_matrix(rmat))
    return np.concatenate([aa, trans], axis=1)    # (N, 6) float64


def attach_object(body_frames, geometry, window, body=None, layout=None):
    """Solve the object posture track: at rest before/after the window,
    rigidly attached to the wrist inside it (anchor point at the wrist joint).
    """
    return _solve_attachment(body_frames,
                             geometry.points[geometry.anchor_index],
                             window, body, layout)


# ---------------------------------------------------------------------------
# samples and datasets

def sample_rng(seed, sample_id):
    """The per-sample random stream; identical however samples are scheduled."""
    return np.random.default_rng([int(seed), int(sample_id)])


def designated_region(spec, points, anchor_index, nominal_frames, window,
                      body, layout):
    """Object points the scripted grasp is planned to touch: the contact set
    of the nominal (jitter-free) motion under the standard distance rule."""
    from .contact import distance_map
    from .kinematics import hand_points
    obj_track = _solve_attachment(nominal_frames, points[anchor_index],
                                  window, body, layout)
    hands = hand_points(nominal_frames, body=body, layout=layout)
    posed = transform_object(obj_track, points)
    touched = distance_map(hands, posed).min(axis=(0, 1)) < spec.grasp_radius
    touched[anchor_index] = True
    return np.nonzero(touched)[0].astype(np.int32)


def generate_sample(spec, action_id, object_id, sample_id, split="train",
                    body=None, validate=True):
    spec.validate()
    body_sk = body or default_body()
    layout = PoseLayout(body_sk.n_joints)
    rng = sample_rng(spec.seed, sample_id)
    points, anchor_index, scale = sample_points(spec, object_id, rng)
    size = object_size(object_id, scale)
    window = scripted_window(action_id, spec.n_frames)
    nominal = make_body(spec, action_id, object_id, size, None, layout,
                        with_jitter=False)
    graspable = designated_region(spec, points, anchor_index, nominal,
                                  window, body_sk, layout)
    geometry = ObjectGeometry(points=points.astype(np.float32),
                              graspable=graspable,
                              template=OBJECT_NAMES[object_id], scale=scale,
                              anchor_index=anchor_index)
    frames64 = make_body(spec, action_id, object_id, size, rng, layout)
    obj64 = attach_object(frames64, geometry, window, body_sk, layout)
    sample = HOISample(
        sample_id=int(sample_id), split=split,
        text=TextInstruction.from_labels(action_id, object_id),
        body=BodyPoseSequence(frames64.astype(np.float32), layout),
        obj=ObjectPostureSequence(obj64.astype(np.float32)),
        geometry=geometry, contact_window=window)
    if validate:
        validate_sample(sample, body_sk)
    return sample


def assign_splits(spec, n_total):
    """Seeded shuffle into train/val/test; returns a list of split names."""
    rng = np.random.default_rng([int(spec.seed), 987654321])
    order = rng.permutation(n_total)
    f_train, f_val, _ = spec.split_fractions
    n_train = int(round(f_train * n_total))
    n_val = int(round(f_val * n_total))
    names = [""] * n_total
    for rank, idx in enumerate(order):
        if rank < n_train:
            names[idx] = "train"
        elif rank < n_train + n_val:
            names[idx] = "val"
        else:
            names[idx] = "test"
    return names


def pair_table(spec):
    """Fixed enumeration (action, object, instance) -> sample_id."""
    table = []
    for a in spec.actions:
        for o in spec.objects:
            for i in range(spec.instances_per_pair):
                table.append((a, o, i))
    return table


def generate_dataset(spec, body=None, validate=True):
    spec.validate()
    table = pair_table(spec)
    split_names = assign_splits(spec, len(table))
    splits = {"train": [], "val": [], "test": []}
    for sample_id, (a, o, _) in enumerate(table):
        s = generate_sample(spec, a, o, sample_id, split_names[sample_id],
                            body=body, validate=validate)
        splits[s.split].append(s)
    meta = dict(spec.to_meta())
    meta.update(n_samples=len(table),
                counts={k: len(v) for k, v in splits.items()})
    return Dataset(splits, meta)


def grasp_region_iou(sample, body=None, sigma=0.05, threshold=None):
    """IoU between the touched region (distance rule) and the designated
    graspable region — a generator self-check."""
    from .contact import contact_labels_for_sample
    labels = contact_labels_for_sample(sample, body=body, sigma=sigma,
                                       threshold=threshold)
    designated = np.zeros(sample.geometry.n_points, dtype=bool)
    designated[sample.geometry.graspable] = True
    touched = labels.astype(bool)
    union = np.logical_or(touched, designated).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(touched, designated).sum() / union)
