"""On-disk container format: a JSON manifest plus one little-endian binary blob.

A container is a directory holding

    manifest.json   -- schema version, kind tag, metadata, array directory
    arrays.bin      -- the named arrays' raw bytes, concatenated in manifest order

Arrays are float32 or int32, little-endian, C order. The same machinery
stores dataset splits, canonical motion sets, contact labels, and model
checkpoints; they differ only in their ``kind`` tag and metadata.
"""
from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .errors import (ArrayShapeError, ContractError, DataFormatError,
                     PayloadError, SchemaVersionError)
from .types import (ACTION_NAMES, INSTRUCTION_LEN, OBJECT_NAMES, VOCAB,
                    BodyPoseSequence, HOISample, ObjectGeometry,
                    ObjectPostureSequence, PoseLayout, TextInstruction)

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "arrays.bin"

_DTYPES = {"float32": np.dtype("<f4"), "int32": np.dtype("<i4")}


def _dtype_name(arr):
    if arr.dtype == np.float32:
        return "float32"
    if arr.dtype == np.int32:
        return "int32"
    raise ContractError("container arrays must be float32 or int32, got %s" % arr.dtype)


def save_container(path, arrays, kind, meta=None):
    """Write named arrays and metadata to ``path`` (a directory, created)."""
    os.makedirs(path, exist_ok=True)
    entries = []
    blob = bytearray()
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        entries.append({"name": str(name), "dtype": _dtype_name(arr),
                        "shape": list(arr.shape)})
        blob += arr.astype(_DTYPES[_dtype_name(arr)], copy=False).tobytes()
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": str(kind),
        "meta": meta or {},
        "arrays": entries,
        "blob": BLOB_NAME,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(bytes(blob)).hexdigest(),
    }
    with open(os.path.join(path, BLOB_NAME), "wb") as f:
        f.write(bytes(blob))
    with open(os.path.join(path, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_manifest(path):
    mpath = os.path.join(path, MANIFEST_NAME)
    if not os.path.exists(mpath):
        raise DataFormatError("no %s under %s" % (MANIFEST_NAME, path))
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except ValueError as e:
        raise DataFormatError("manifest %s is not valid JSON: %s" % (mpath, e)) from e
    for key in ("schema_version", "kind", "arrays", "blob", "blob_bytes"):
        if key not in manifest:
            raise DataFormatError("manifest %s is missing field %r" % (mpath, key))
    if manifest["schema_version"] != SCHEMA_VERSION:
        raise SchemaVersionError(
            "unsupported schema_version %r (supported: %d)"
            % (manifest["schema_version"], SCHEMA_VERSION))
    return manifest


def load_container(path, kind=None, verify_checksum=True):
    """Read a container back as (arrays: dict name->ndarray, meta: dict)."""
    manifest = read_manifest(path)
    if kind is not None and manifest["kind"] != kind:
        raise DataFormatError("container %s has kind %r, expected %r"
                              % (path, manifest["kind"], kind))
    bpath = os.path.join(path, manifest["blob"])
    if not os.path.exists(bpath):
        raise PayloadError("missing blob %s" % bpath)
    blob = open(bpath, "rb").read()
    if len(blob) != manifest["blob_bytes"]:
        raise PayloadError("blob %s has %d bytes, manifest declares %d"
                           % (manifest["blob"], len(blob), manifest["blob_bytes"]))
    if verify_checksum and "blob_sha256" in manifest:
        digest = hashlib.sha256(blob).hexdigest()
        if digest != manifest["blob_sha256"]:
            raise PayloadError("blob %s checksum mismatch" % manifest["blob"])
    arrays = {}
    offset = 0
    for entry in manifest["arrays"]:
        name = entry.get("name", "<unnamed>")
        if entry.get("dtype") not in _DTYPES:
            raise ArrayShapeError("array %r has unknown dtype %r"
                                  % (name, entry.get("dtype")))
        dtype = _DTYPES[entry["dtype"]]
        shape = tuple(int(s) for s in entry["shape"])
        if any(s < 0 for s in shape):
            raise ArrayShapeError("array %r has negative dimension in shape %s"
                                  % (name, shape))
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        if shape == ():
            nbytes = dtype.itemsize
        if offset + nbytes > len(blob):
            raise PayloadError("blob truncated: array %r needs bytes [%d, %d) "
                               "but blob has %d" % (name, offset, offset + nbytes, len(blob)))
        arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize,
                            offset=offset).reshape(shape).copy()
        arrays[name] = arr
        offset += nbytes
    if offset != len(blob):
        raise PayloadError("blob has %d trailing bytes beyond declared arrays"
                           % (len(blob) - offset))
    return arrays, manifest.get("meta", {})


def require_array(arrays, name, shape=None, dtype=None):
    """Fetch a named array, raising ArrayShapeError on absence or mismatch."""
    if name not in arrays:
        raise ArrayShapeError("required array %r is missing" % name)
    arr = arrays[name]
    if dtype is not None and arr.dtype != np.dtype(dtype):
        raise ArrayShapeError("array %r has dtype %s, expected %s"
                              % (name, arr.dtype, np.dtype(dtype)))
    if shape is not None:
        if len(shape) != arr.ndim or any(
                s is not None and s != a for s, a in zip(shape, arr.shape)):
            raise ArrayShapeError("array %r has shape %s, expected %s"
                                  % (name, arr.shape, tuple(shape)))
    return arr


# ---------------------------------------------------------------------------
# dataset persistence

DATASET_KIND = "hoi-dataset-split"
ROOT_MANIFEST = "manifest.json"
CANONICAL_DIR = "canonical"
CONTACT_DIR = "contact"


class Dataset:
    """In-memory dataset: samples per split plus generator metadata."""

    def __init__(self, splits, meta):
        self.splits = splits                  # dict split -> list[HOISample]
        self.meta = meta

    def split(self, name):
        if name not in self.splits:
            raise ContractError("unknown split %r" % name)
        return self.splits[name]

    def all_samples(self):
        out = []
        for name in ("train", "val", "test"):
            out.extend(self.splits.get(name, []))
        return out

    @property
    def n_frames(self):
        return int(self.meta["n_frames"])


def _split_arrays(samples):
    n = len(samples)
    if n == 0:
        return {
            "sample_ids": np.zeros((0,), np.int32),
            "body": np.zeros((0, 0, 0), np.float32),
            "object": np.zeros((0, 0, 6), np.float32),
            "points": np.zeros((0, 0, 3), np.float32),
            "graspable_mask": np.zeros((0, 0), np.int32),
            "anchor_index": np.zeros((0,), np.int32),
            "tokens": np.zeros((0, INSTRUCTION_LEN), np.int32),
            "action_ids": np.zeros((0,), np.int32),
            "object_ids": np.zeros((0,), np.int32),
            "template_ids": np.zeros((0,), np.int32),
            "scales": np.zeros((0,), np.float32),
            "windows": np.zeros((0, 2), np.int32),
        }
    mask = np.zeros((n, samples[0].geometry.n_points), np.int32)
    for i, s in enumerate(samples):
        mask[i, s.geometry.graspable] = 1
    templates = [OBJECT_NAMES.index(s.geometry.template) for s in samples]
    return {
        "sample_ids": np.asarray([s.sample_id for s in samples], np.int32),
        "body": np.stack([s.body.frames for s in samples]),
        "object": np.stack([s.obj.frames for s in samples]),
        "points": np.stack([s.geometry.points for s in samples]),
        "graspable_mask": mask,
        "anchor_index": np.asarray([s.geometry.anchor_index for s in samples], np.int32),
        "tokens": np.stack([s.text.tokens for s in samples]),
        "action_ids": np.asarray([s.text.action_id for s in samples], np.int32),
        "object_ids": np.asarray([s.text.object_id for s in samples], np.int32),
        "template_ids": np.asarray(templates, np.int32),
        "scales": np.asarray([s.geometry.scale for s in samples], np.float32),
        "windows": np.asarray([s.contact_window for s in samples], np.int32),
    }


def save_dataset(path, dataset):
    os.makedirs(path, exist_ok=True)
    split_info = {}
    for name, samples in dataset.splits.items():
        arrays = _split_arrays(samples)
        meta = {"split": name, "num_samples": len(samples)}
        save_container(os.path.join(path, name), arrays, DATASET_KIND, meta)
        split_info[name] = {"dir": name, "num_samples": len(samples)}
    root = {
        "schema_version": SCHEMA_VERSION,
        "kind": "hoi-dataset",
        "meta": dict(dataset.meta),
        "splits": split_info,
        "vocab": list(VOCAB),
        "actions": list(ACTION_NAMES),
        "objects": list(OBJECT_NAMES),
    }
    with open(os.path.join(path, ROOT_MANIFEST), "w") as f:
        json.dump(root, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _samples_from_arrays(arrays, meta, n_frames, n_points):
    num = int(meta.get("num_samples", -1))
    ids = require_array(arrays, "sample_ids", (None,), np.int32)
    if num != len(ids):
        raise ArrayShapeError("split %r declares num_samples=%d but sample_ids has %d"
                              % (meta.get("split"), num, len(ids)))
    if num == 0:
        return []
    body = require_array(arrays, "body", (num, n_frames, None), np.float32)
    obj = require_array(arrays, "object", (num, n_frames, 6), np.float32)
    points = require_array(arrays, "points", (num, n_points, 3), np.float32)
    mask = require_array(arrays, "graspable_mask", (num, n_points), np.int32)
    anchor = require_array(arrays, "anchor_index", (num,), np.int32)
    tokens = require_array(arrays, "tokens", (num, INSTRUCTION_LEN), np.int32)
    action_ids = require_array(arrays, "action_ids", (num,), np.int32)
    object_ids = require_array(arrays, "object_ids", (num,), np.int32)
    template_ids = require_array(arrays, "template_ids", (num,), np.int32)
    scales = require_array(arrays, "scales", (num,), np.float32)
    windows = require_array(arrays, "windows", (num, 2), np.int32)
    layout = PoseLayout((body.shape[2] - 3) // 3)
    out = []
    for i in range(num):
        geom = ObjectGeometry(points=points[i],
                              graspable=np.nonzero(mask[i])[0].astype(np.int32),
                              template=OBJECT_NAMES[int(template_ids[i])],
                              scale=float(scales[i]),
                              anchor_index=int(anchor[i]))
        text = TextInstruction(tokens=tokens[i], action_id=int(action_ids[i]),
                               object_id=int(object_ids[i]),
                               text=" ".join(VOCAB[t] for t in tokens[i]))
        out.append(HOISample(sample_id=int(ids[i]), split=str(meta["split"]),
                             text=text, body=BodyPoseSequence(body[i], layout),
                             obj=ObjectPostureSequence(obj[i]), geometry=geom,
                             contact_window=(int(windows[i, 0]), int(windows[i, 1]))))
    return out


def load_dataset(path):
    mpath = os.path.join(path, ROOT_MANIFEST)
    if not os.path.exists(mpath):
        raise DataFormatError("no dataset manifest at %s" % mpath)
    try:
        with open(mpath) as f:
            root = json.load(f)
    except ValueError as e:
        raise DataFormatError("dataset manifest %s is not valid JSON: %s" % (mpath, e)) from e
    if root.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError("unsupported dataset schema_version %r"
                                 % root.get("schema_version"))
    if root.get("kind") != "hoi-dataset":
        raise DataFormatError("manifest %s has kind %r, expected 'hoi-dataset'"
                              % (mpath, root.get("kind")))
    meta = root.get("meta", {})
    n_frames = int(meta["n_frames"])
    n_points = int(meta["n_points"])
    splits = {}
    seen_ids = set()
    for name, info in root.get("splits", {}).items():
        arrays, smeta = load_container(os.path.join(path, info["dir"]), DATASET_KIND)
        if int(info["num_samples"]) != int(smeta.get("num_samples", -1)):
            raise ArrayShapeError("split %r count mismatch: root manifest says %s, "
                                  "split manifest says %s"
                                  % (name, info["num_samples"], smeta.get("num_samples")))
        samples = _samples_from_arrays(arrays, smeta, n_frames, n_points)
        for s in samples:
            if s.sample_id in seen_ids:
                raise ArrayShapeError("duplicate sample id %d across splits" % s.sample_id)
            seen_ids.add(s.sample_id)
        splits[name] = samples
    return Dataset(splits, meta)


# ---------------------------------------------------------------------------
# canonical / contact namespaces inside a dataset directory

def save_canonical(dataset_path, by_action, counts):
    """Persist per-action canonical motions under <dataset>/canonical/."""
    arrays = {}
    order = sorted(by_action)
    for a in order:
        arrays["action_%02d" % a] = np.ascontiguousarray(by_action[a], np.float32)
    arrays["counts"] = np.asarray([counts[a] for a in order], np.int32)
    meta = {"action_ids": [int(a) for a in order]}
    return save_container(os.path.join(dataset_path, CANONICAL_DIR), arrays,
                          "canonical-set", meta)


def load_canonical(dataset_path):
    arrays, meta = load_container(os.path.join(dataset_path, CANONICAL_DIR),
                                  "canonical-set")
    counts_arr = require_array(arrays, "counts", (None,), np.int32)
    by_action, counts = {}, {}
    for i, a in enumerate(meta["action_ids"]):
        by_action[int(a)] = require_array(arrays, "action_%02d" % a, None, np.float32)
        counts[int(a)] = int(counts_arr[i])
    return by_action, counts


def save_contact_labels(dataset_path, labels_by_split, meta=None):
    """labels_by_split: split -> (sample_ids (S,), labels (S, P) in {0,1})."""
    arrays = {}
    for name in sorted(labels_by_split):
        ids, labels = labels_by_split[name]
        arrays["%s_sample_ids" % name] = np.asarray(ids, np.int32)
        arrays["%s_labels" % name] = np.asarray(labels, np.int32)
    return save_container(os.path.join(dataset_path, CONTACT_DIR), arrays,
                          "contact-labels", meta or {})


def load_contact_labels(dataset_path):
    arrays, meta = load_container(os.path.join(dataset_path, CONTACT_DIR),
                                  "contact-labels")
    out = {}
    for name in ("train", "val", "test"):
        key = "%s_labels" % name
        if key in arrays:
            out[name] = (arrays["%s_sample_ids" % name], arrays[key])
    return out, meta
