"""Core data types: pose/posture sequences, geometry, instructions, skeleton.

Conventions
-----------
* z is up, y is forward, x is the body's left.
* Body frame layout: [root_translation(3), joint_rotations(3 * n_joints)]
  with rotations as axis-angle vectors, canonical norm <= pi.
* Object frame layout: [axis_angle(3), translation(3)].
* Stored arrays are float32; geometry kernels compute in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, RetrievalError

# ---------------------------------------------------------------------------
# closed instruction vocabulary

ACTION_NAMES = ("lift", "push", "drink", "inspect")
ACTION_VERBS = ("lifts", "pushes", "sips", "inspects")
OBJECT_NAMES = ("box", "cylinder", "sphere")

VOCAB = ("a", "person", "the") + ACTION_VERBS + OBJECT_NAMES
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}
INSTRUCTION_LEN = 5  # "a person <verb> the <object>"


def instruction_text(action_id, object_id):
    return "a person %s the %s" % (ACTION_VERBS[action_id], OBJECT_NAMES[object_id])


def tokenize(text):
    """Map an instruction string to token ids. Unknown words are a data error."""
    words = text.strip().lower().split()
    ids = []
    for w in words:
        if w not in WORD_TO_ID:
            raise RetrievalError("word %r is outside the closed vocabulary" % w)
        ids.append(WORD_TO_ID[w])
    return np.asarray(ids, dtype=np.int32)


def decode_action(tokens):
    """Recover the action label from the verb token. No fallback for unseen verbs."""
    tokens = np.asarray(tokens).ravel()
    verb_ids = {WORD_TO_ID[v]: i for i, v in enumerate(ACTION_VERBS)}
    for t in tokens:
        if int(t) in verb_ids:
            return verb_ids[int(t)]
    raise RetrievalError("no known action verb among tokens %s" % tokens.tolist())


def decode_object(tokens):
    tokens = np.asarray(tokens).ravel()
    obj_ids = {WORD_TO_ID[o]: i for i, o in enumerate(OBJECT_NAMES)}
    for t in tokens:
        if int(t) in obj_ids:
            return obj_ids[int(t)]
    raise RetrievalError("no known object word among tokens %s" % tokens.tolist())


# ---------------------------------------------------------------------------
# skeleton

@dataclass(frozen=True)
class KinematicBody:
    """Fixed skeleton: joint tree with constant bone offsets (meters)."""

    joint_names: tuple
    parents: np.ndarray        # (J,) int, -1 for root
    offsets: np.ndarray        # (J, 3) float64, bone offset in parent frame
    left_hand: tuple           # joint indices treated as left-hand contact points
    right_hand: tuple

    @property
    def n_joints(self):
        return len(self.joint_names)

    @property
    def hand_indices(self):
        return tuple(self.left_hand) + tuple(self.right_hand)

    @property
    def frame_dim(self):
        return 3 + 3 * self.n_joints


_JOINTS = (
    # name, parent, offset
    ("pelvis", -1, (0.0, 0.0, 0.0)),
    ("spine", 0, (0.0, 0.0, 0.12)),
    ("chest", 1, (0.0, 0.0, 0.14)),
    ("neck", 2, (0.0, 0.0, 0.12)),
    ("head", 3, (0.0, 0.0, 0.10)),
    ("l_shoulder", 2, (0.16, 0.0, 0.05)),
    ("l_elbow", 5, (0.26, 0.0, 0.0)),
    ("l_wrist", 6, (0.25, 0.0, 0.0)),
    ("l_finger_a", 7, (0.038, 0.014, 0.0)),
    ("l_finger_b", 7, (0.042, 0.0, 0.0)),
    ("l_finger_c", 7, (0.038, -0.014, 0.0)),
    ("r_shoulder", 2, (-0.16, 0.0, 0.05)),
    ("r_elbow", 11, (-0.26, 0.0, 0.0)),
    ("r_wrist", 12, (-0.25, 0.0, 0.0)),
    ("r_finger_a", 13, (-0.038, 0.014, 0.0)),
    ("r_finger_b", 13, (-0.042, 0.0, 0.0)),
    ("r_finger_c", 13, (-0.038, -0.014, 0.0)),
    ("l_hip", 0, (0.09, 0.0, -0.05)),
    ("l_knee", 17, (0.0, 0.0, -0.40)),
    ("l_ankle", 18, (0.0, 0.0, -0.42)),
    ("r_hip", 0, (-0.09, 0.0, -0.05)),
    ("r_knee", 20, (0.0, 0.0, -0.40)),
    ("r_ankle", 21, (0.0, 0.0, -0.42)),
)


def default_body():
    names = tuple(j[0] for j in _JOINTS)
    parents = np.asarray([j[1] for j in _JOINTS], dtype=np.int64)
    offsets = np.asarray([j[2] for j in _JOINTS], dtype=np.float64)
    return KinematicBody(
        joint_names=names,
        parents=parents,
        offsets=offsets,
        left_hand=(7, 8, 9, 10),
        right_hand=(13, 14, 15, 16),
    )


JOINT_INDEX = {j[0]: i for i, j in enumerate(_JOINTS)}


# ---------------------------------------------------------------------------
# pose layout

@dataclass(frozen=True)
class PoseLayout:
    """Names the slices of a body frame vector."""

    n_joints: int = 23

    @property
    def frame_dim(self):
        return 3 + 3 * self.n_joints

    @property
    def root_translation(self):
        return slice(0, 3)

    @property
    def joint_rotations(self):
        return slice(3, 3 + 3 * self.n_joints)

    def rotation(self, joint):
        """Slice of one joint's axis-angle vector."""
        if not 0 <= joint < self.n_joints:
            raise ContractError("joint index %d out of range" % joint)
        return slice(3 + 3 * joint, 6 + 3 * joint)

    def describe(self):
        d = {"root_translation": (0, 3)}
        for j in range(self.n_joints):
            s = self.rotation(j)
            d["rotation_%02d" % j] = (s.start, s.stop)
        return d


DEFAULT_LAYOUT = PoseLayout()


# ---------------------------------------------------------------------------
# sequences and samples

def _as_f32(a, name, shape_tail):
    a = np.asarray(a)
    if a.ndim != 1 + len(shape_tail) or a.shape[1:] != shape_tail:
        raise ContractError("%s must have shape (N, %s), got %s"
                            % (name, ", ".join(map(str, shape_tail)), a.shape))
    return np.ascontiguousarray(a, dtype=np.float32)


@dataclass
class BodyPoseSequence:
    frames: np.ndarray                      # (N, 72) float32
    layout: PoseLayout = field(default_factory=lambda: DEFAULT_LAYOUT)

    def __post_init__(self):
        self.frames = _as_f32(self.frames, "body frames", (self.layout.frame_dim,))

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def root_translations(self):
        return self.frames[:, self.layout.root_translation]

    def joint_rotations(self):
        n = self.layout.n_joints
        return self.frames[:, self.layout.joint_rotations].reshape(-1, n, 3)


@dataclass
class ObjectPostureSequence:
    frames: np.ndarray                      # (N, 6) float32: [axis_angle, translation]

    def __post_init__(self):
        self.frames = _as_f32(self.frames, "object frames", (6,))

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def rotations(self):
        return self.frames[:, :3]

    @property
    def translations(self):
        return self.frames[:, 3:]


@dataclass
class ObjectGeometry:
    points: np.ndarray                      # (P, 3) float32, centroid at origin
    graspable: np.ndarray                   # (G,) int32 indices into points
    template: str
    scale: float
    anchor_index: int                       # the designated grasp point

    def __post_init__(self):
        self.points = _as_f32(self.points, "object points", (3,))
        self.graspable = np.ascontiguousarray(np.asarray(self.graspable), dtype=np.int32)
        if self.graspable.ndim != 1 or self.graspable.size == 0:
            raise ContractError("graspable region must be a non-empty index vector")
        if self.graspable.min() < 0 or self.graspable.max() >= len(self.points):
            raise ContractError("graspable indices out of range")
        if not 0 <= self.anchor_index < len(self.points):
            raise ContractError("anchor index out of range")

    @property
    def n_points(self):
        return self.points.shape[0]


@dataclass
class TextInstruction:
    tokens: np.ndarray                      # (5,) int32
    action_id: int
    object_id: int
    text: str

    def __post_init__(self):
        self.tokens = np.ascontiguousarray(np.asarray(self.tokens), dtype=np.int32)
        if self.tokens.shape != (INSTRUCTION_LEN,):
            raise ContractError("tokens must have shape (%d,)" % INSTRUCTION_LEN)
        if self.tokens.min() < 0 or self.tokens.max() >= len(VOCAB):
            raise ContractError("token id outside vocabulary")

    @classmethod
    def from_labels(cls, action_id, object_id):
        text = instruction_text(action_id, object_id)
        return cls(tokens=tokenize(text), action_id=action_id,
                   object_id=object_id, text=text)


@dataclass
class HOISample:
    sample_id: int
    split: str                              # train | val | test
    text: TextInstruction
    body: BodyPoseSequence
    obj: ObjectPostureSequence
    geometry: ObjectGeometry
    contact_window: tuple                   # (first_frame, last_frame) inclusive

    @property
    def n_frames(self):
        return self.body.n_frames


MAX_ROTATION_NORM = np.pi + 1e-5  # float32 rounding headroom over pi


def validate_sample(sample, body=None):
    """Structural checks every generated sample must pass."""
    body = body or default_body()
    if sample.split not in ("train", "val", "test"):
        raise ContractError("unknown split %r" % sample.split)
    if sample.body.n_frames != sample.obj.n_frames:
        raise ContractError("body (%d) and object (%d) frame counts differ"
                            % (sample.body.n_frames, sample.obj.n_frames))
    if sample.body.layout.n_joints != body.n_joints:
        raise ContractError("pose layout joint count %d does not match skeleton %d"
                            % (sample.body.layout.n_joints, body.n_joints))
    for name, arr in (("body", sample.body.frames),
                      ("object", sample.obj.frames),
                      ("points", sample.geometry.points)):
        if not np.isfinite(arr).all():
            raise ContractError("non-finite values in %s array" % name)
    rot = sample.body.joint_rotations()
    norms = np.linalg.norm(rot.astype(np.float64), axis=-1)
    if norms.max() > MAX_ROTATION_NORM:
        raise ContractError("joint rotation norm %.4f exceeds pi" % norms.max())
    onorm = np.linalg.norm(sample.obj.rotations.astype(np.float64), axis=-1)
    if onorm.max() > MAX_ROTATION_NORM:
        raise ContractError("object rotation norm %.4f exceeds pi" % onorm.max())
    centroid = sample.geometry.points.astype(np.float64).mean(axis=0)
    if np.abs(centroid).max() > 1e-5:
        raise ContractError("object points are not centered (centroid %s)" % centroid)
    n0, n1 = sample.contact_window
    if not (0 <= n0 <= n1 < sample.n_frames):
        raise ContractError("contact window %s out of range" % (sample.contact_window,))
    return True
