"""Four-stage training and full text+object -> (body, object) synthesis.

Stage 1 trains the action-basis denoiser on per-action canonical motions;
Stage 2 trains the interaction-style denoiser on the residuals; Stage 3
trains the contact-part predictor; Stage 4 trains the object-motion denoiser
(teacher-forced on ground-truth conditions by default, or on predicted
conditions when the earlier checkpoints are supplied). Each stage is
self-contained: it owns its condition encoders and its normalization stats,
all of which live in the stage checkpoint.

Synthesis runs the chain of the paper-shaped system: basis + style bodies are
sampled and recomposed, contact parts inferred, and the object track sampled
with interaction-guided correction on the final denoising steps. One master
seed fans out to independent per-denoiser streams, so the sampled basis
depends only on (text, seed, basis checkpoint).
"""
from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import decouple, diffusion, interact
from .contact import (ContactPredictor, contact_labels_for_sample,
                      contact_loss)
from .container import load_container, save_container
from .diffusion import (BodyEncoder, ConditionalDenoiser, ContactEmbedder,
                        DenoiserConfig, NoiseSchedule, ObjectEncoder,
                        TextEncoder, sample, training_loss)
from .errors import (ConfigError, ContractError, DataFormatError,
                     MissingDependencyError)
from .kinematics import hand_points
from .types import DEFAULT_LAYOUT, VOCAB, decode_action, tokenize

CHECKPOINT_KIND = "hoigen-checkpoint"

STAGE_NAMES = {1: "action", 2: "style", 3: "contact", 4: "object"}
STAGE_DIRS = {"action": "stage1_action", "style": "stage2_style",
              "contact": "stage3_contact", "object": "stage4_object",
              "object_nocontact": "stage4_object_nocontact",
              "direct": "direct_body"}
OPTIMIZER_MODES = ("both", "temporal", "contact", "none")
_GUIDANCE_TERMS = {"both": ("temporal", "absolute"),
                   "temporal": ("temporal",),
                   "contact": ("absolute",)}


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class StageConfig:
    steps: int
    batch: int
    lr: float = 1e-4

    def to_meta(self):
        return {"steps": self.steps, "batch": self.batch, "lr": self.lr}

    @classmethod
    def from_meta(cls, meta):
        return cls(steps=int(meta["steps"]), batch=int(meta["batch"]),
                   lr=float(meta["lr"]))


@dataclass(frozen=True)
class PipelineConfig:
    """Desk-scale defaults; ``paper_scale`` restores the published budgets."""

    n_frames: int = 64
    body_dim: int = DEFAULT_LAYOUT.frame_dim
    obj_dim: int = 6
    n_points: int = 256
    width: int = 64
    layers: int = 8
    heads: int = 4
    train_diffusion_steps: int = 1000
    infer_steps: int = 50
    guidance_steps: int = 10
    guidance_gd_steps: int = 2
    guidance_eta: float = 1e-2
    guidance_delta: float = 0.05
    seed: int = 0
    stage1: StageConfig = field(default_factory=lambda: StageConfig(400, 128))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(400, 128))
    stage3: StageConfig = field(default_factory=lambda: StageConfig(300, 64))
    stage4: StageConfig = field(default_factory=lambda: StageConfig(400, 128))

    def validate(self):
        for name in ("n_frames", "body_dim", "obj_dim", "n_points", "width",
                     "layers", "heads", "train_diffusion_steps", "infer_steps"):
            if getattr(self, name) < 1:
                raise ConfigError("%s must be positive" % name)
        if self.infer_steps > self.train_diffusion_steps:
            raise ConfigError("inference steps cannot exceed training steps")
        if self.guidance_steps < 0 or self.guidance_gd_steps < 0:
            raise ConfigError("guidance step counts must be >= 0")
        if self.guidance_eta < 0 or self.guidance_delta <= 0:
            raise ConfigError("guidance eta must be >= 0 and delta > 0")
        for stage in (self.stage1, self.stage2, self.stage3, self.stage4):
            if stage.steps < 1 or stage.batch < 1 or stage.lr <= 0:
                raise ConfigError("stage configs need steps/batch >= 1, lr > 0")
        return self

    @classmethod
    def paper_scale(cls, n_train=480):
        """Published budgets: 6k/6k/3k/6k epochs at batch 128/128/64/128."""
        def steps(epochs, batch):
            return epochs * max(1, -(-n_train // batch))
        return cls(stage1=StageConfig(steps(6000, 128), 128),
                   stage2=StageConfig(steps(6000, 128), 128),
                   stage3=StageConfig(steps(3000, 64), 64),
                   stage4=StageConfig(steps(6000, 128), 128))

    def stage_config(self, stage_name):
        return {"action": self.stage1, "style": self.stage2,
                "contact": self.stage3, "object": self.stage4,
                "object_nocontact": self.stage4, "direct": self.stage1}[stage_name]

    def denoiser_config(self, frame_dim):
        return DenoiserConfig(frame_dim=frame_dim, n_frames=self.n_frames,
                              width=self.width, layers=self.layers,
                              heads=self.heads)

    def to_meta(self):
        meta = {name: getattr(self, name) for name in
                ("n_frames", "body_dim", "obj_dim", "n_points", "width",
                 "layers", "heads", "train_diffusion_steps", "infer_steps",
                 "guidance_steps", "guidance_gd_steps", "guidance_eta",
                 "guidance_delta", "seed")}
        for idx in (1, 2, 3, 4):
            meta["stage%d" % idx] = getattr(self, "stage%d" % idx).to_meta()
        return meta

    @classmethod
    def from_meta(cls, meta):
        kwargs = {name: meta[name] for name in
                  ("n_frames", "body_dim", "obj_dim", "n_points", "width",
                   "layers", "heads", "train_diffusion_steps", "infer_steps",
                   "guidance_steps", "guidance_gd_steps", "guidance_eta",
                   "guidance_delta", "seed")}
        for idx in (1, 2, 3, 4):
            kwargs["stage%d" % idx] = StageConfig.from_meta(meta["stage%d" % idx])
        return cls(**kwargs)


@dataclass(frozen=True)
class AblationFlags:
    """Pipeline variant switches mirroring the ablation study rows."""

    direct_body: bool = False
    real_basis: bool = False
    real_contact: bool = False
    no_contact: bool = False
    optimizer: str = "both"

    def validate(self):
        if self.optimizer not in OPTIMIZER_MODES:
            raise ConfigError("optimizer must be one of %s, got %r"
                              % (OPTIMIZER_MODES, self.optimizer))
        if self.direct_body and self.real_basis:
            raise ConfigError("direct_body replaces the basis/style split; "
                              "real_basis contradicts it")
        if self.real_contact and self.no_contact:
            raise ConfigError("real_contact supplies labels that no_contact "
                              "removes; the flags contradict")
        return self

    @classmethod
    def parse(cls, spec):
        """Parse 'flag,flag,optimizer=mode' strings from the CLI."""
        kwargs = {}
        for part in filter(None, (p.strip() for p in spec.split(","))):
            if part.startswith("optimizer="):
                kwargs["optimizer"] = part.split("=", 1)[1]
            elif part.replace("-", "_") in ("direct_body", "real_basis",
                                            "real_contact", "no_contact"):
                kwargs[part.replace("-", "_")] = True
            else:
                raise ConfigError("unknown ablation flag %r" % part)
        return cls(**kwargs).validate()


DEFAULT_FLAGS = AblationFlags()


# ---------------------------------------------------------------------------
# stage construction and checkpoint i/o

def _seed_int(*parts):
    """Stable 63-bit seed from a list of integer labels."""
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


def _build_modules(stage_name, config):
    """Fresh (seeded elsewhere) module dict for one stage."""
    vocab = len(VOCAB)
    if stage_name == "action":
        return {"text": TextEncoder(vocab),
                "denoiser": ConditionalDenoiser(
                    config.denoiser_config(config.body_dim), "action")}
    if stage_name == "style":
        return {"text": TextEncoder(vocab), "object": ObjectEncoder(),
                "denoiser": ConditionalDenoiser(
                    config.denoiser_config(config.body_dim), "style")}
    if stage_name == "direct":
        return {"text": TextEncoder(vocab), "object": ObjectEncoder(),
                "denoiser": ConditionalDenoiser(
                    config.denoiser_config(config.body_dim), "direct")}
    if stage_name == "contact":
        return {"text": TextEncoder(vocab), "object": ObjectEncoder(),
                "predictor": ContactPredictor()}
    if stage_name == "object":
        return {"body": BodyEncoder(config.body_dim),
                "contact": ContactEmbedder(config.n_points),
                "denoiser": ConditionalDenoiser(
                    config.denoiser_config(config.obj_dim), "object")}
    if stage_name == "object_nocontact":
        return {"body": BodyEncoder(config.body_dim),
                "denoiser": ConditionalDenoiser(
                    config.denoiser_config(config.obj_dim), "object_nocontact")}
    raise ConfigError("unknown stage %r" % stage_name)


def save_checkpoint(path, stage_name, config, modules, norm=None, losses=None,
                    extra_arrays=None, extra_meta=None):
    arrays = {}
    for mod_name, module in sorted(modules.items()):
        for key, tensor in module.state_dict().items():
            arr = tensor.detach().numpy()
            dtype = np.int32 if arr.dtype.kind in "iu" else np.float32
            arrays["%s.%s" % (mod_name, key)] = arr.astype(dtype)
    for key, arr in (norm or {}).items():
        arrays["norm.%s" % key] = np.asarray(arr, dtype=np.float32)
    if losses is not None:
        arrays["loss_curve"] = np.asarray(losses, dtype=np.float32)
    arrays.update(extra_arrays or {})
    meta = {"stage": stage_name, "pipeline": config.to_meta(),
            "modules": sorted(modules)}
    meta.update(extra_meta or {})
    return save_container(path, arrays, CHECKPOINT_KIND, meta=meta)


def load_checkpoint(path):
    """Rebuild a stage's modules (eval mode) and stats from a checkpoint."""
    arrays, meta = load_container(path, kind=CHECKPOINT_KIND)
    if "stage" not in meta or "pipeline" not in meta:
        raise DataFormatError("checkpoint at %s lacks stage/pipeline metadata"
                              % path)
    config = PipelineConfig.from_meta(meta["pipeline"])
    stage_name = meta["stage"]
    modules = _build_modules(stage_name, config)
    for mod_name, module in modules.items():
        state = {}
        for key, tensor in module.state_dict().items():
            full = "%s.%s" % (mod_name, key)
            if full not in arrays:
                raise DataFormatError("checkpoint missing array %r" % full)
            state[key] = torch.as_tensor(arrays[full]).to(tensor.dtype)
        module.load_state_dict(state)
        module.eval()
    norm = {key[len("norm."):]: arrays[key]
            for key in arrays if key.startswith("norm.")}
    return {"stage": stage_name, "config": config, "modules": modules,
            "norm": norm, "arrays": arrays, "meta": meta}


def _stage_path(out_dir, stage_name):
    return os.path.join(out_dir, STAGE_DIRS[stage_name])


# ---------------------------------------------------------------------------
# training

def _split_tensors(dataset, split):
    samples = dataset.split(split)
    return {
        "samples": samples,
        "body": np.stack([s.body.frames for s in samples]).astype(np.float32),
        "obj": np.stack([s.obj.frames for s in samples]).astype(np.float32),
        "points": np.stack([s.geometry.points for s in samples]).astype(np.float32),
        "tokens": np.stack([s.text.tokens for s in samples]).astype(np.int64),
        "actions": np.array([decode_action(s.text.tokens) for s in samples],
                            dtype=np.int64),
    }


def _norm_stats(x):
    flat = np.asarray(x, dtype=np.float64).reshape(-1, x.shape[-1])
    return (flat.mean(axis=0).astype(np.float32),
            (flat.std(axis=0) + 1e-6).astype(np.float32))


def normalize(x, mean, std):
    return (np.asarray(x, np.float32) - mean) / std


def denormalize(x, mean, std):
    return np.asarray(x, np.float32) * std + mean


def _run_training(step_fn, params, stage_cfg, log_every=0, label=""):
    opt = torch.optim.Adam(params, lr=stage_cfg.lr)
    losses = []
    for step in range(stage_cfg.steps):
        opt.zero_grad()
        loss = step_fn(step)
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if log_every and (step + 1) % log_every == 0:
            print("  %s step %d/%d loss %.4f"
                  % (label, step + 1, stage_cfg.steps, losses[-1]))
    return losses


def train_stage(stage, config, dataset, out_dir, mode="teacher", deps=None,
                log_every=0):
    """Train one stage and write its checkpoint; returns (path, loss curve).

    ``stage`` is 1-4, a stage name, or an ablation variant name ('direct',
    'object_nocontact'). Stage 4 with mode='predicted' synthesizes its
    conditions from the earlier checkpoints in ``deps`` / ``out_dir``.
    """
    stage_name = STAGE_NAMES.get(stage, stage)
    if stage_name not in STAGE_DIRS:
        raise ConfigError("unknown stage %r" % stage)
    config.validate()
    stage_cfg = config.stage_config(stage_name)
    data = _split_tensors(dataset, "train")
    n = len(data["samples"])
    if n < 1:
        raise ContractError("training split is empty")

    torch.manual_seed(_seed_int(config.seed, 11, _stage_ordinal(stage_name)))
    modules = _build_modules(stage_name, config)
    gen = torch.Generator().manual_seed(
        _seed_int(config.seed, 13, _stage_ordinal(stage_name)))
    rng = np.random.default_rng([config.seed, 17, _stage_ordinal(stage_name)])
    batch = min(stage_cfg.batch, n)
    tokens_t = torch.as_tensor(data["tokens"])
    points_t = torch.as_tensor(data["points"])

    norm = {}
    extra_arrays = {}
    extra_meta = {"mode": mode}
    schedule = NoiseSchedule.linear(config.train_diffusion_steps)

    if stage_name in ("action", "style", "direct"):
        cset = decouple.build_canonical_set(data["samples"])
        canon = np.stack([cset.retrieve(a) for a in sorted(cset.by_action)])
        extra_arrays["canonical"] = canon.astype(np.float32)
        extra_meta["canonical_actions"] = sorted(int(a) for a in cset.by_action)
        if stage_name == "action":
            targets = canon[data["actions"]]
        elif stage_name == "style":
            targets = np.stack([
                decouple.compute_residual(s.body.frames, cset.retrieve(a))
                for s, a in zip(data["samples"], data["actions"])])
        else:
            targets = data["body"]
        mean, std = _norm_stats(targets)
        norm = {"target_mean": mean, "target_std": std}
        x_all = torch.as_tensor(normalize(targets, mean, std))
        denoiser = modules["denoiser"]

        def step_fn(step):
            idx = torch.as_tensor(rng.choice(n, batch, replace=False))
            cond = {"text": modules["text"](tokens_t[idx])}
            if "object" in modules:
                cond["object"] = modules["object"](points_t[idx])[0]
            return training_loss(denoiser, x_all[idx], cond, schedule,
                                 generator=gen)

    elif stage_name == "contact":
        labels = np.stack([contact_labels_for_sample(s)
                           for s in data["samples"]]).astype(np.float32)
        labels_t = torch.as_tensor(labels)

        def step_fn(step):
            idx = torch.as_tensor(rng.choice(n, batch, replace=False))
            _, obj_tokens = modules["object"](points_t[idx])
            probs = modules["predictor"](obj_tokens, modules["text"](tokens_t[idx]))
            return contact_loss(labels_t[idx], probs)

    else:   # object / object_nocontact
        mean, std = _norm_stats(data["obj"])
        norm = {"target_mean": mean, "target_std": std}
        x_all = torch.as_tensor(normalize(data["obj"], mean, std))
        body_cond, contact_cond = _stage4_condition_inputs(
            stage_name, mode, config, dataset, data, out_dir, deps)
        denoiser = modules["denoiser"]

        def step_fn(step):
            idx = torch.as_tensor(rng.choice(n, batch, replace=False))
            cond = _stage4_conditions(modules, body_cond[idx],
                                      None if contact_cond is None
                                      else contact_cond[idx])
            return training_loss(denoiser, x_all[idx], cond, schedule,
                                 generator=gen)

    label = "stage %s%s" % (stage_name,
                            " (%s)" % mode if stage_name.startswith("object") else "")
    losses = _run_training(step_fn, _parameters(modules), stage_cfg,
                           log_every=log_every, label=label)
    if stage_name == "contact":
        modules["predictor"].mark_fitted()

    path = _stage_path(out_dir, stage_name)
    save_checkpoint(path, stage_name, config, modules, norm=norm,
                    losses=losses, extra_arrays=extra_arrays,
                    extra_meta=extra_meta)
    return path, losses


def _parameters(modules):
    return list(itertools.chain.from_iterable(
        m.parameters() for _, m in sorted(modules.items())))


def _stage_ordinal(stage_name):
    return list(STAGE_DIRS).index(stage_name)


def _stage4_conditions(modules, body_frames, contact_vec):
    """Single condition-building path shared by teacher and predicted modes."""
    cond = {"body": modules["body"](body_frames)}
    if "contact" in modules:
        if contact_vec is None:
            raise ContractError("object stage needs a contact condition")
        cond["contact"] = modules["contact"](contact_vec)
    return cond


def _stage4_condition_inputs(stage_name, mode, config, dataset, data,
                             out_dir, deps):
    """Condition source arrays for stage 4: ground truth or predictions."""
    if mode not in ("teacher", "predicted"):
        raise ConfigError("stage 4 mode must be 'teacher' or 'predicted'")
    needs_contact = stage_name == "object"
    if mode == "teacher":
        body = torch.as_tensor(data["body"])
        contact = None
        if needs_contact:
            contact = torch.as_tensor(np.stack(
                [contact_labels_for_sample(s) for s in data["samples"]]
            ).astype(np.float32))
        return body, contact
    deps = dict(deps or {})
    for name in ("action", "style") + (("contact",) if needs_contact else ()):
        deps.setdefault(name, _stage_path(out_dir, name))
    pipe = Pipeline.load_paths(deps, require=("action", "style")
                               + (("contact",) if needs_contact else ()))
    bodies, contacts = [], []
    for start in range(0, len(data["samples"]), 32):
        chunk = data["samples"][start:start + 32]
        results = pipe.synthesize_batch(
            [s.text.tokens for s in chunk],
            [s.geometry.points for s in chunk],
            seeds=[_seed_int(config.seed, 19, s.sample_id) for s in chunk],
            stop_after="contact" if needs_contact else "body")
        bodies.extend(r.body for r in results)
        contacts.extend(r.contact for r in results)
    body = torch.as_tensor(np.stack(bodies).astype(np.float32))
    contact = (torch.as_tensor(np.stack(contacts).astype(np.float32))
               if needs_contact else None)
    return body, contact


def train_all(config, dataset, out_dir, stages=(1, 2, 3, 4), mode="teacher",
              log_every=0):
    """Train the requested stages in order; returns {stage name: loss curve}."""
    curves = {}
    for stage in stages:
        path, losses = train_stage(stage, config, dataset, out_dir, mode=mode,
                                   log_every=log_every)
        curves[STAGE_NAMES.get(stage, stage)] = losses
    return curves


# ---------------------------------------------------------------------------
# synthesis

@dataclass
class SynthesisResult:
    tokens: np.ndarray
    body: np.ndarray                 # (N, body_dim) float32
    obj: np.ndarray | None           # (N, 6) float32, None if stopped early
    basis: np.ndarray | None         # action-basis intermediate
    style: np.ndarray | None         # interaction-style intermediate
    contact: np.ndarray | None       # per-point contact probabilities
    guidance_traces: list


class Pipeline:
    """Loaded checkpoints plus the synthesis chain."""

    def __init__(self, stages, config):
        self.stages = stages          # stage name -> checkpoint dict
        self.config = config
        self._schedule = NoiseSchedule.linear(config.train_diffusion_steps)
        self.infer_schedule = self._schedule.subsample(config.infer_steps)

    @classmethod
    def load(cls, out_dir, require=("action", "style", "contact", "object"),
             optional=("object_nocontact", "direct")):
        paths = {name: _stage_path(out_dir, name)
                 for name in set(require) | set(optional)}
        return cls.load_paths(paths, require=require)

    @classmethod
    def load_paths(cls, paths, require=()):
        stages = {}
        config = None
        for name, path in paths.items():
            if not os.path.isdir(path):
                if name in require:
                    raise MissingDependencyError(
                        "stage %r checkpoint not found at %s" % (name, path))
                continue
            ckpt = load_checkpoint(path)
            if ckpt["stage"] != name:
                raise DataFormatError("checkpoint at %s is for stage %r, "
                                      "expected %r" % (path, ckpt["stage"], name))
            stages[name] = ckpt
            config = config or ckpt["config"]
        missing = [name for name in require if name not in stages]
        if missing:
            raise MissingDependencyError("missing stage checkpoints: %s"
                                         % ", ".join(sorted(missing)))
        if config is None:
            raise MissingDependencyError("no checkpoints found")
        return cls(stages, config)

    def _stage(self, name, reason):
        if name not in self.stages:
            raise MissingDependencyError("stage %r checkpoint required %s"
                                         % (name, reason))
        return self.stages[name]

    def canonical_motion(self, action_id):
        ckpt = self._stage("action", "for canonical retrieval")
        actions = ckpt["meta"]["canonical_actions"]
        canon = ckpt["arrays"]["canonical"]
        cset = decouple.CanonicalMotionSet(
            by_action={int(a): canon[i] for i, a in enumerate(actions)},
            counts={int(a): 0 for a in actions})
        return cset.retrieve(int(action_id))

    def synthesize(self, text, points, seed, flags=DEFAULT_FLAGS,
                   real_contact=None, method="deterministic",
                   stop_after=None):
        """One (text, object) -> full HOI sample with intermediates."""
        results = self.synthesize_batch([text], [points], seeds=[seed],
                                        flags=flags,
                                        real_contact=None if real_contact is None
                                        else [real_contact],
                                        method=method, stop_after=stop_after)
        return results[0]

    def synthesize_batch(self, texts, points, seeds, flags=DEFAULT_FLAGS,
                         real_contact=None, method="deterministic",
                         stop_after=None):
        flags.validate()
        if not (len(texts) == len(points) == len(seeds)):
            raise ContractError("texts/points/seeds lengths differ")
        if stop_after not in (None, "body", "contact"):
            raise ConfigError("stop_after must be None, 'body', or 'contact'")
        tokens = np.stack([tokenize(t) if isinstance(t, str) else np.asarray(t)
                           for t in texts]).astype(np.int64)
        pts = np.stack([np.asarray(p, dtype=np.float32) for p in points])
        tokens_t = torch.as_tensor(tokens)
        pts_t = torch.as_tensor(pts)
        gens = {name: [torch.Generator().manual_seed(_seed_int(s, 23, slot))
                       for s in seeds]
                for slot, name in enumerate(("basis", "style", "object"))}

        basis = style = None
        if flags.direct_body:
            body = self._sample_track("direct", {"text": tokens_t,
                                                 "object": pts_t},
                                      gens["basis"], method)
        else:
            if flags.real_basis:
                basis = np.stack([self.canonical_motion(decode_action(t))
                                  for t in tokens])
            else:
                basis = self._sample_track("action", {"text": tokens_t},
                                           gens["basis"], method)
            style = self._sample_track("style", {"text": tokens_t,
                                                 "object": pts_t},
                                       gens["style"], method)
            body = np.stack([decouple.recompose(b, s)
                             for b, s in zip(basis, style)])

        if stop_after == "body":
            return [SynthesisResult(tokens=tokens[i], body=body[i], obj=None,
                                    basis=None if basis is None else basis[i],
                                    style=None if style is None else style[i],
                                    contact=None, guidance_traces=[])
                    for i in range(len(texts))]

        contact = self._contact_condition(flags, tokens_t, pts_t, real_contact)
        if stop_after == "contact":
            return [SynthesisResult(tokens=tokens[i], body=body[i], obj=None,
                                    basis=None if basis is None else basis[i],
                                    style=None if style is None else style[i],
                                    contact=None if contact is None else contact[i],
                                    guidance_traces=[])
                    for i in range(len(texts))]

        obj, traces = self._sample_object(body, contact, pts, gens["object"],
                                          flags, method)
        return [SynthesisResult(tokens=tokens[i], body=body[i], obj=obj[i],
                                basis=None if basis is None else basis[i],
                                style=None if style is None else style[i],
                                contact=None if contact is None else contact[i],
                                guidance_traces=traces[i])
                for i in range(len(texts))]

    def _sample_track(self, stage_name, cond_inputs, gens, method):
        """Sample normalized tracks per item (own noise stream), denormalize."""
        ckpt = self._stage(stage_name, "for synthesis")
        modules = ckpt["modules"]
        cond = {}
        with torch.no_grad():
            if "text" in cond_inputs:
                cond["text"] = modules["text"](cond_inputs["text"])
            if "object" in cond_inputs:
                cond["object"] = modules["object"](cond_inputs["object"])[0]
        dcfg = modules["denoiser"].config
        x_init = torch.stack([
            torch.empty(dcfg.n_frames, dcfg.frame_dim).normal_(generator=g)
            for g in gens])
        with torch.no_grad():
            out = sample(modules["denoiser"], cond, self.infer_schedule,
                         x_init=x_init, method=method)
        mean, std = ckpt["norm"]["target_mean"], ckpt["norm"]["target_std"]
        return denormalize(out.numpy(), mean, std)

    def _contact_condition(self, flags, tokens_t, pts_t, real_contact):
        if flags.no_contact:
            return None
        if flags.real_contact:
            if real_contact is None:
                raise ConfigError("real_contact flag needs ground-truth "
                                  "labels passed as real_contact=")
            return np.stack([np.asarray(c, dtype=np.float32)
                             for c in real_contact])
        ckpt = self._stage("contact", "to infer contact parts")
        modules = ckpt["modules"]
        with torch.no_grad():
            _, obj_tokens = modules["object"](pts_t)
            probs = modules["predictor"].predict(obj_tokens,
                                                 modules["text"](tokens_t))
        return probs.numpy().astype(np.float32)

    def _sample_object(self, body, contact, pts, gens, flags, method):
        stage_name = "object_nocontact" if flags.no_contact else "object"
        ckpt = self._stage(stage_name, "to plan object motion")
        modules = ckpt["modules"]
        body_t = torch.as_tensor(np.asarray(body, dtype=np.float32))
        with torch.no_grad():
            cond = _stage4_conditions(
                modules, body_t,
                None if contact is None else torch.as_tensor(contact))
        mean, std = ckpt["norm"]["target_mean"], ckpt["norm"]["target_std"]
        traces = [[] for _ in range(len(body))]
        guidance = None
        if flags.optimizer != "none" and self.config.guidance_steps > 0:
            hands = [torch.as_tensor(hand_points(np.asarray(b, np.float64)))
                     for b in body]
            points64 = [torch.as_tensor(np.asarray(p, np.float64)) for p in pts]
            terms = _GUIDANCE_TERMS[flags.optimizer]
            cfg = self.config

            def guidance(x, step_index):
                corrected = []
                for i in range(x.shape[0]):
                    raw = denormalize(x[i].numpy(), mean, std).astype(np.float64)
                    fixed, trace = interact.guided_correction(
                        raw, hands[i], points64[i], delta=cfg.guidance_delta,
                        eta=cfg.guidance_eta, steps=cfg.guidance_gd_steps,
                        terms=terms)
                    trace["reverse_step"] = step_index
                    traces[i].append(trace)
                    corrected.append(normalize(fixed, mean, std))
                return torch.as_tensor(np.stack(corrected))

        dcfg = modules["denoiser"].config
        x_init = torch.stack([
            torch.empty(dcfg.n_frames, dcfg.frame_dim).normal_(generator=g)
            for g in gens])
        out = sample(modules["denoiser"], cond, self.infer_schedule,
                     x_init=x_init, guidance=guidance,
                     guidance_steps=self.config.guidance_steps, method=method)
        return denormalize(out.numpy(), mean, std), traces


# ---------------------------------------------------------------------------
# evaluation wiring

def noise_sequences(samples, seed=0):
    """Per-dimension Gaussian noise matched to the split's mean/std.

    The FID floor reference: sequences with the marginal statistics of the
    real data but no structure at all.
    """
    body = np.stack([s.body.frames for s in samples])
    obj = np.stack([s.obj.frames for s in samples])
    rng = np.random.default_rng([seed, 37])
    out = []
    for real in (body, obj):
        flat = real.reshape(-1, real.shape[-1])
        mean, std = flat.mean(axis=0), flat.std(axis=0) + 1e-6
        out.append((rng.standard_normal(real.shape) * std + mean)
                   .astype(np.float32))
    return out[0], out[1]


def trace_reduction(traces):
    """Relative interaction-error drop across one sample's correction calls.

    Calls that found no contact leave a note instead of error fields and are
    skipped; a sample whose every call skipped has no reduction to report.
    """
    steps = [t for t in traces if "initial_error" in t]
    if not steps:
        return None
    init = float(steps[0]["initial_error"])
    final = float(steps[-1]["final_error"])
    if init <= 1e-12:
        return None
    return 1.0 - final / init


def evaluate_pipeline(pipeline, dataset, extractors, flags=DEFAULT_FLAGS,
                      repeats=20, seed=0, split="test", batch=32,
                      mmodality_repeats=8, with_mmodality=True,
                      with_noise_bar=True):
    """Synthesize a split under ``flags`` and run the full metric sweep.

    Returns (report, details). ``report`` maps metric name -> MetricValue,
    including contact precision/rate and, when enabled, the noise-FID floor.
    ``details`` carries the synthesized tracks, features, and traces so
    callers can export or plot without re-synthesizing.
    """
    from . import metrics as M

    samples = dataset.split(split)
    if not samples:
        raise ContractError("split %r has no samples" % split)
    texts = [s.text.tokens for s in samples]
    points = [s.geometry.points for s in samples]

    def synth_group(group_texts, group_points, group_seeds, group_samples):
        real = None
        if flags.real_contact:
            real = [contact_labels_for_sample(s) for s in group_samples]
        return pipeline.synthesize_batch(group_texts, group_points,
                                         group_seeds, flags=flags,
                                         real_contact=real)

    results = []
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        results.extend(synth_group(
            texts[start:start + batch], points[start:start + batch],
            [_seed_int(seed, 29, s.sample_id) for s in chunk], chunk))

    pts = np.stack(points)
    gen_body = np.stack([r.body for r in results])
    gen_obj = np.stack([r.obj for r in results])
    real_body = np.stack([s.body.frames for s in samples])
    real_obj = np.stack([s.obj.frames for s in samples])
    real_feats = extractors.encode_hoi(real_body, real_obj, pts)
    gen_feats = extractors.encode_hoi(gen_body, gen_obj, pts)
    text_feats = extractors.encode_text(np.stack(texts))

    per_text = None
    if with_mmodality:
        uniq, inverse = np.unique(np.stack(texts), axis=0, return_inverse=True)
        per_text = []
        for ti in range(len(uniq)):
            idx = int(np.nonzero(inverse == ti)[0][0])
            reps = synth_group([texts[idx]] * mmodality_repeats,
                               [points[idx]] * mmodality_repeats,
                               [_seed_int(seed, 31, ti, rep)
                                for rep in range(mmodality_repeats)],
                               [samples[idx]] * mmodality_repeats)
            per_text.append(extractors.encode_hoi(
                np.stack([r.body for r in reps]),
                np.stack([r.obj for r in reps]),
                np.stack([points[idx]] * mmodality_repeats)))

    report = M.evaluate(real_feats, text_feats, gen_feats, text_feats,
                        per_text_gen=per_text, repeats=repeats, seed=seed)
    gen_triples = [(r.body, r.obj, p) for r, p in zip(results, points)]
    ref_triples = [(s.body.frames, s.obj.frames, s.geometry.points)
                   for s in samples]
    c_prec, c_pct = M.contact_metrics(gen_triples, ref_triples)
    report["c_prec"] = M.MetricValue(c_prec, 0.0, 1)
    report["c_pct"] = M.MetricValue(c_pct, 0.0, 1)

    if with_noise_bar:
        nb, no = noise_sequences(samples, seed=seed)
        noise_feats = extractors.encode_hoi(nb, no, pts)
        report["fid_noise_bar"] = M.MetricValue(M.fid(real_feats, noise_feats),
                                                0.0, 1)

    reductions = [r for r in (trace_reduction(x.guidance_traces)
                              for x in results) if r is not None]
    if reductions:
        report["li_reduction"] = M.MetricValue(
            float(np.median(reductions)), 0.0, len(reductions))

    details = {"results": results, "gen_feats": gen_feats,
               "real_feats": real_feats, "text_feats": text_feats,
               "samples": samples}
    return report, details
