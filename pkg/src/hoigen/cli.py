"""Command-line entry point.

Subcommands: gen-data, train, sample, evaluate, ablate, export, plot.
Global flags (before the subcommand): --config PATH, --seed INT, --out DIR.
Exit codes: 0 success, 2 configuration error, 3 missing dependency,
4 data error, 1 any other package failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .contact import contact_labels_for_sample
from .container import (load_container, load_dataset, save_container,
                        save_canonical, save_contact_labels, save_dataset)
from .decouple import build_canonical_set
from .errors import (ConfigError, DataFormatError, HoiGenError,
                     MissingDependencyError, RetrievalError)
from .pipeline import (DEFAULT_FLAGS, STAGE_DIRS, AblationFlags, Pipeline,
                       PipelineConfig, evaluate_pipeline, train_stage)
from .synth import OBJECT_NAMES, ScenarioSpec, generate_dataset, sample_points
from .types import tokenize

RESULT_KIND = "synthesis-result"
TRAIN_STAGES = ("1", "2", "3", "4", "all", "direct", "object_nocontact",
                "extractors")


# ---------------------------------------------------------------------------
# config plumbing

def _load_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError("config file %s does not exist" % path)
    try:
        with open(path) as f:
            cfg = json.load(f)
    except ValueError as e:
        raise ConfigError("config file %s is not valid JSON: %s" % (path, e))
    if not isinstance(cfg, dict):
        raise ConfigError("config file %s must hold a JSON object" % path)
    return cfg


def _dataclass_config(cls, section, overrides=None):
    """Build a config dataclass from a JSON section, rejecting unknown keys."""
    from dataclasses import fields

    from .pipeline import StageConfig
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError("unknown %s keys: %s"
                          % (cls.__name__, ", ".join(sorted(unknown))))
    kwargs = dict(section)
    for key, value in (overrides or {}).items():
        if value is not None:
            kwargs[key] = value
    for key in ("stage1", "stage2", "stage3", "stage4"):
        if key in kwargs and isinstance(kwargs[key], dict):
            kwargs[key] = StageConfig.from_meta(kwargs[key])
    for key in ("actions", "objects", "split_fractions", "scale_range"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    try:
        return cls(**kwargs).validate()
    except TypeError as e:
        raise ConfigError("bad %s config: %s" % (cls.__name__, e))


def _scenario_spec(config, seed):
    return _dataclass_config(ScenarioSpec, config.get("data", {}),
                             {"seed": seed})


def _pipeline_config(config, seed):
    section = dict(config.get("pipeline", {}))
    if section.pop("paper_scale", False):
        base = PipelineConfig.paper_scale()
        if section:
            raise ConfigError("paper_scale excludes other pipeline keys")
        return base
    return _dataclass_config(PipelineConfig, section, {"seed": seed})


def _dataset_dir(args):
    return args.data or os.path.join(args.out, "dataset")


def _require_dataset(args):
    path = _dataset_dir(args)
    if not os.path.isdir(path):
        raise MissingDependencyError(
            "no dataset at %s (run `hoigen gen-data` first or pass --data)"
            % path)
    return load_dataset(path)


def _checkpoint_dir(args):
    return args.ckpt or os.path.join(args.out, "checkpoints")


def _extractors(args, dataset, train_if_missing=True):
    from . import metrics
    path = os.path.join(_checkpoint_dir(args), "extractors")
    if os.path.isdir(path):
        return metrics.FeatureExtractorPair.load(path)
    if not train_if_missing:
        raise MissingDependencyError("no feature extractors at %s" % path)
    print("training feature extractors (not found at %s)" % path)
    pair, _ = metrics.train_feature_extractors(dataset, seed=args.seed or 0)
    pair.save(path)
    return pair


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args, config):
    spec = _scenario_spec(config, args.seed)
    dataset = generate_dataset(spec)
    path = _dataset_dir(args)
    save_dataset(path, dataset)
    cset = build_canonical_set(dataset.split("train"))
    save_canonical(path, cset.by_action, cset.counts)
    if not args.no_contact_labels:
        labels = {}
        for split in ("train", "val", "test"):
            samples = dataset.split(split)
            if samples:
                labels[split] = (
                    np.array([s.sample_id for s in samples], np.int32),
                    np.stack([contact_labels_for_sample(s) for s in samples])
                    .astype(np.int32))
        save_contact_labels(path, labels)
    counts = {k: len(dataset.split(k)) for k in ("train", "val", "test")}
    print("dataset written to %s" % path)
    print("samples per split: %s" % json.dumps(counts))
    return 0


def cmd_train(args, config):
    dataset = _require_dataset(args)
    out = _checkpoint_dir(args)
    if args.stage == "extractors":
        from . import metrics
        pair, losses = metrics.train_feature_extractors(
            dataset, seed=args.seed or 0,
            log_every=args.log_every)
        pair.save(os.path.join(out, "extractors"))
        print("extractors trained: loss %.4f -> %.4f"
              % (losses[0], losses[-1]))
        return 0
    pcfg = _pipeline_config(config, args.seed)
    stages = ((1, 2, 3, 4) if args.stage == "all"
              else (int(args.stage),) if args.stage.isdigit()
              else (args.stage,))
    for stage in stages:
        path, losses = train_stage(stage, pcfg, dataset, out, mode=args.mode,
                                   log_every=args.log_every)
        print("stage %s trained (%d steps, loss %.4f -> %.4f) -> %s"
              % (stage, len(losses), losses[0], losses[-1], path))
    return 0


def _parse_object(args, spec):
    """Resolve --object into a point cloud (name draws a fresh instance)."""
    name = args.object
    if name is None:
        raise ConfigError("--object is required (one of %s or a container "
                          "path)" % ", ".join(OBJECT_NAMES))
    if name in OBJECT_NAMES:
        rng = np.random.default_rng([args.seed or 0, 41])
        points, _, _ = sample_points(spec, OBJECT_NAMES.index(name), rng)
        return points.astype(np.float32)
    if os.path.isdir(name):
        arrays, _ = load_container(name)
        if "points" not in arrays:
            raise DataFormatError("container %s has no 'points' array" % name)
        points = arrays["points"]
        if points.ndim == 3:
            points = points[0]
        return points.astype(np.float32)
    raise ConfigError("--object must be one of %s or a container directory, "
                      "got %r" % (", ".join(OBJECT_NAMES), name))


def _json_safe(value):
    if isinstance(value, (np.floating, np.integer)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def cmd_sample(args, config):
    spec = _scenario_spec(config, args.seed)
    points = _parse_object(args, spec)
    flags = AblationFlags.parse(args.ablate) if args.ablate else DEFAULT_FLAGS
    pipe = Pipeline.load(_checkpoint_dir(args))
    seed = args.seed if args.seed is not None else 0
    result = pipe.synthesize(args.text, points, seed=seed, flags=flags)
    out = args.result_dir or os.path.join(args.out,
                                          "sample_seed%d" % seed)
    arrays = {"body": result.body, "object": result.obj,
              "points": points.astype(np.float32),
              "tokens": result.tokens.astype(np.int32)}
    if result.contact is not None:
        arrays["contact"] = result.contact.astype(np.float32)
    if result.basis is not None:
        arrays["basis"] = result.basis.astype(np.float32)
        arrays["style"] = result.style.astype(np.float32)
    meta = {"text": args.text, "seed": seed,
            "flags": _json_safe(vars(flags)),
            "guidance_traces": _json_safe(result.guidance_traces)}
    save_container(out, arrays, RESULT_KIND, meta=meta)
    print("synthesized %r (seed %d) -> %s" % (args.text, seed, out))
    if result.guidance_traces:
        init = result.guidance_traces[0]["initial_error"]
        final = result.guidance_traces[-1]["final_error"]
        print("interaction error %.6f -> %.6f over %d correction calls"
              % (init, final, len(result.guidance_traces)))
    else:
        print("no interaction correction applied (no contact detected "
              "or optimizer off)")
    return 0


def cmd_evaluate(args, config):
    dataset = _require_dataset(args)
    pipe = Pipeline.load(_checkpoint_dir(args))
    pair = _extractors(args, dataset)
    flags = AblationFlags.parse(args.ablate) if args.ablate else DEFAULT_FLAGS
    from . import metrics
    report, details = evaluate_pipeline(
        pipe, dataset, pair, flags=flags, repeats=args.repeats,
        seed=args.seed or 0, split=args.split,
        with_mmodality=not args.no_mmodality)
    text = metrics.report_text(report, title="evaluation (%s split)"
                               % args.split)
    print(text, end="")
    os.makedirs(args.out, exist_ok=True)
    base = os.path.join(args.out, "evaluation")
    with open(base + ".txt", "w") as f:
        f.write(text)
    with open(base + ".json", "w") as f:
        f.write(metrics.report_json(report))
    if args.csv:
        with open(base + ".csv", "w") as f:
            f.write(metrics.report_csv(report))
    np.savez(base + "_features.npz", real=details["real_feats"],
             gen=details["gen_feats"], text=details["text_feats"])
    print("report written to %s.{txt,json%s}" % (base, ",csv" if args.csv else ""))
    return 0


def cmd_ablate(args, config):
    dataset = _require_dataset(args)
    pipe = Pipeline.load(_checkpoint_dir(args),
                         require=("action", "style", "contact", "object"))
    pair = _extractors(args, dataset)
    variant = AblationFlags.parse(args.flags)
    from . import metrics
    rows = {}
    for name, flags in (("full", DEFAULT_FLAGS), (args.flags, variant)):
        report, _ = evaluate_pipeline(pipe, dataset, pair, flags=flags,
                                      repeats=args.repeats,
                                      seed=args.seed or 0, split=args.split,
                                      with_mmodality=False)
        rows[name] = report
        print(metrics.report_text(report, title=name), end="")
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "ablation.json")
    with open(path, "w") as f:
        json.dump({name: {k: {"mean": v.mean, "ci95": v.ci95,
                              "repeats": v.repeats}
                          for k, v in report.items()}
                   for name, report in rows.items()}, f, indent=2,
                  sort_keys=True)
        f.write("\n")
    print("comparison written to %s" % path)
    return 0


def _load_result(path):
    if not os.path.isdir(path):
        raise MissingDependencyError("no synthesis result at %s" % path)
    return load_container(path, kind=RESULT_KIND)


def cmd_export(args, config):
    arrays, meta = _load_result(args.input)
    os.makedirs(args.out, exist_ok=True)
    if args.format == "container":
        out = os.path.join(args.out, "export_container")
        save_container(out, arrays, RESULT_KIND, meta=meta)
        print("container re-serialized to %s" % out)
        return 0
    if args.format == "obj-sequence":
        from .kinematics import transform_object
        points = arrays["points"].astype(np.float64)
        moved = transform_object(arrays["object"].astype(np.float64), points)
        out = os.path.join(args.out, "obj_sequence")
        os.makedirs(out, exist_ok=True)
        for n in range(moved.shape[0]):
            with open(os.path.join(out, "frame_%04d.obj" % n), "w") as f:
                f.write("# object point cloud, frame %d\n" % n)
                for x, y, z in moved[n]:
                    f.write("v %.6f %.6f %.6f\n" % (x, y, z))
        if "contact" in arrays:
            _write_contact_ply(os.path.join(out, "contact.ply"),
                               points, arrays["contact"])
        print("wrote %d frames to %s" % (moved.shape[0], out))
        return 0
    # csv-trace
    traces = meta.get("guidance_traces", [])
    out = os.path.join(args.out, "correction_trace.csv")
    import csv as _csv
    with open(out, "w", newline="") as f:
        writer = _csv.writer(f)
        writer.writerow(["reverse_step", "descent_step", "error", "eta",
                         "halvings"])
        for trace in traces:
            writer.writerow([trace.get("reverse_step", ""), "init",
                             "%.9f" % trace["initial_error"], "", ""])
            for step in trace["steps"]:
                writer.writerow([trace.get("reverse_step", ""),
                                 step["step"] + 1,
                                 "%.9f" % step["error"], step["eta"],
                                 step["halvings"]])
    print("wrote correction trace (%d calls) to %s" % (len(traces), out))
    return 0


def _write_contact_ply(path, points, scores):
    """Point cloud with a per-vertex contact scalar, ASCII PLY."""
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write("element vertex %d\n" % len(points))
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property float contact\nend_header\n")
        for (x, y, z), s in zip(points, scores):
            f.write("%.6f %.6f %.6f %.6f\n" % (x, y, z, s))


def cmd_plot(args, config):
    from . import plotting
    os.makedirs(args.out, exist_ok=True)
    made = []
    what = args.what
    if what in ("loss", "all"):
        curves = {}
        ckpt_dir = _checkpoint_dir(args)
        for stage_name, sub in STAGE_DIRS.items():
            path = os.path.join(ckpt_dir, sub)
            if os.path.isdir(path):
                arrays, _ = load_container(path)
                if "loss_curve" in arrays:
                    curves[stage_name] = arrays["loss_curve"]
        if curves:
            made.append(plotting.plot_loss_curves(
                curves, os.path.join(args.out, "loss_curves.png")))
        elif what == "loss":
            raise MissingDependencyError("no stage checkpoints with loss "
                                         "curves under %s" % ckpt_dir)
    if what in ("metrics", "all"):
        path = os.path.join(args.out, "evaluation.json")
        if args.input and what == "metrics":
            path = args.input
        if os.path.exists(path):
            with open(path) as f:
                report = json.load(f)
            values = {k: (v["mean"], v["ci95"]) for k, v in report.items()}
            made.append(plotting.plot_metric_bars(
                values, os.path.join(args.out, "metric_bars.png")))
        elif what == "metrics":
            raise MissingDependencyError("no evaluation report at %s "
                                         "(run `hoigen evaluate`)" % path)
    if what in ("trace", "contact", "all") and args.input:
        arrays, meta = _load_result(args.input)
        if what in ("trace", "all"):
            made.append(plotting.plot_guidance_traces(
                [meta.get("guidance_traces", [])],
                os.path.join(args.out, "correction_trace.png")))
        if what in ("contact", "all") and "contact" in arrays:
            made.append(plotting.plot_contact_map(
                arrays["points"], arrays["contact"],
                os.path.join(args.out, "contact_map.png")))
    elif what in ("trace", "contact"):
        raise ConfigError("--input (a synthesis result directory) is "
                          "required for %r plots" % what)
    if not made:
        raise MissingDependencyError("nothing to plot: no checkpoints, "
                                     "reports, or --input given")
    for path in made:
        print("wrote %s" % path)
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="hoigen",
        description="Text-conditioned human-object interaction synthesis "
                    "on a procedural desk-scale world.")
    parser.add_argument("--config", default=None,
                        help="JSON config with 'data' and 'pipeline' sections")
    parser.add_argument("--seed", type=int, default=None,
                        help="master seed (overrides config)")
    parser.add_argument("--out", default="runs/default",
                        help="output directory (default: runs/default)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic HOI dataset")
    p.add_argument("--data", default=None,
                   help="dataset directory (default: <out>/dataset)")
    p.add_argument("--no-contact-labels", action="store_true",
                   help="skip writing ground-truth contact labels")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train pipeline stages")
    p.add_argument("--stage", required=True, choices=TRAIN_STAGES,
                   help="1=action basis, 2=interaction style, 3=contact "
                        "parts, 4=object motion; or all / ablation variants")
    p.add_argument("--data", default=None)
    p.add_argument("--ckpt", default=None,
                   help="checkpoint directory (default: <out>/checkpoints)")
    p.add_argument("--mode", choices=("teacher", "predicted"),
                   default="teacher",
                   help="stage 4 condition source during training")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="synthesize one HOI sample")
    p.add_argument("--text", required=True,
                   help='instruction, e.g. "a person lifts the box"')
    p.add_argument("--object", required=True,
                   help="object template name (%s) or a container directory "
                        "with a 'points' array" % ", ".join(OBJECT_NAMES))
    p.add_argument("--ckpt", default=None)
    p.add_argument("--ablate", default=None,
                   help="ablation flags, e.g. 'direct-body,optimizer=none'")
    p.add_argument("--result-dir", default=None,
                   help="where to write the result container")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="run the metric sweep on a split")
    p.add_argument("--data", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test"))
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--ablate", default=None)
    p.add_argument("--csv", action="store_true",
                   help="also write evaluation.csv")
    p.add_argument("--no-mmodality", action="store_true",
                   help="skip the per-text repeated generations")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate",
                       help="compare an ablation variant to the full system")
    p.add_argument("--flags", required=True,
                   help="e.g. 'direct-body' or 'optimizer=temporal'")
    p.add_argument("--data", default=None)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--split", default="test",
                   choices=("train", "val", "test"))
    p.add_argument("--repeats", type=int, default=20)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", help="export a synthesis result")
    p.add_argument("--format", required=True,
                   choices=("container", "obj-sequence", "csv-trace"))
    p.add_argument("--input", required=True,
                   help="synthesis result directory (from `hoigen sample`)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("plot",
                       help="render loss curves, metric bars, or traces")
    p.add_argument("--what", default="all",
                   choices=("loss", "metrics", "trace", "contact", "all"))
    p.add_argument("--ckpt", default=None)
    p.add_argument("--input", default=None,
                   help="evaluation.json or a synthesis result directory")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except ConfigError as e:
        print("config error: %s" % e, file=sys.stderr)
        return 2
    except MissingDependencyError as e:
        print("missing dependency: %s" % e, file=sys.stderr)
        return 3
    except (DataFormatError, RetrievalError) as e:
        print("data error: %s" % e, file=sys.stderr)
        return 4
    except HoiGenError as e:
        print("error: %s" % e, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
