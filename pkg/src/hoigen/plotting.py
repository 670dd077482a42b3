"""Headless figure rendering: loss curves, metric bars, correction traces.

Everything draws through the Agg backend and writes straight to disk, so the
functions work in CI and scripted runs. Each returns the written path.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ContractError

_BAR_COLOR = "#4878b0"
_TRACE_CMAP = "viridis"


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def plot_loss_curves(curves, path, title="Training loss"):
    """curves: {label: sequence of per-step losses} -> one log-y panel."""
    if not curves:
        raise ContractError("no loss curves to plot")
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, values in sorted(curves.items()):
        values = np.asarray(values, dtype=float)
        if values.size == 0:
            raise ContractError("loss curve %r is empty" % label)
        ax.plot(np.arange(1, values.size + 1), values, label=label, lw=1.2)
    ax.set_yscale("log")
    ax.set_xlabel("training step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    return _finish(fig, path)


def _mean_and_ci(value):
    """Accept float, (mean, ci) pairs, or objects with .mean/.ci95."""
    if hasattr(value, "mean") and hasattr(value, "ci95"):
        return float(value.mean), float(value.ci95)
    if isinstance(value, (tuple, list)) and len(value) == 2:
        return float(value[0]), float(value[1])
    return float(value), 0.0


def plot_metric_bars(metric_values, path, title="Evaluation metrics"):
    """metric_values: {metric: value} where value carries an optional CI."""
    if not metric_values:
        raise ContractError("no metrics to plot")
    names = list(metric_values)
    means, cis = zip(*(_mean_and_ci(metric_values[n]) for n in names))
    fig, ax = plt.subplots(figsize=(max(5.0, 0.9 * len(names) + 2), 4))
    x = np.arange(len(names))
    ax.bar(x, means, yerr=cis, capsize=4, color=_BAR_COLOR)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_title(title)
    ax.grid(True, axis="y", alpha=0.3)
    return _finish(fig, path)


def plot_variant_bars(per_variant, path, metric, title=None):
    """per_variant: {variant: {metric: value}} -> one metric across variants."""
    values = {}
    for variant, metric_values in per_variant.items():
        if metric not in metric_values:
            raise ContractError("variant %r lacks metric %r" % (variant, metric))
        values[variant] = metric_values[metric]
    return plot_metric_bars(values, path, title=title or metric)


def plot_guidance_traces(traces_per_sample, path, max_samples=12,
                         title="Interaction-error correction"):
    """Per-sample interaction error across all correction calls.

    ``traces_per_sample``: list over samples; each item is the list of trace
    dicts produced during that sample's guided reverse steps (possibly empty).
    The x axis is the cumulative descent-step index across calls.
    """
    fig, ax = plt.subplots(figsize=(7, 4))
    cmap = plt.get_cmap(_TRACE_CMAP)
    drawn = 0
    for traces in traces_per_sample:
        if drawn >= max_samples:
            break
        errors = []
        for trace in traces:
            if not errors:
                errors.append(float(trace["initial_error"]))
            errors.extend(float(s["error"]) for s in trace["steps"])
        if not errors:
            continue
        color = cmap(0.15 + 0.7 * drawn / max(1, max_samples - 1))
        ax.plot(np.arange(len(errors)), errors, color=color, lw=1.0,
                alpha=0.85)
        drawn += 1
    if drawn == 0:
        ax.text(0.5, 0.5, "no in-contact samples", ha="center", va="center",
                transform=ax.transAxes)
    ax.set_xlabel("cumulative correction step")
    ax.set_ylabel("interaction error")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    return _finish(fig, path)


def plot_contact_map(points, probs, path, threshold=0.5,
                     title="Predicted contact parts"):
    """Two projections of the object point cloud colored by contact score."""
    points = np.asarray(points, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ContractError("points must be (P, 3)")
    if probs.shape != (points.shape[0],):
        raise ContractError("probs must be (P,) matching points")
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    for ax, (i, j, name) in zip(axes, ((0, 1, "x-y"), (0, 2, "x-z"))):
        sc = ax.scatter(points[:, i], points[:, j], c=probs, cmap="coolwarm",
                        vmin=0.0, vmax=1.0, s=14)
        ax.set_title("%s (score >= %.2f: %d pts)"
                     % (name, threshold, int((probs >= threshold).sum())))
        ax.set_aspect("equal", adjustable="datalim")
    fig.colorbar(sc, ax=axes, shrink=0.85, label="contact score")
    fig.suptitle(title)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def plot_motion_overview(body_frames, obj_frames, path, wrist_index=None,
                         title="Synthesized motion"):
    """Wrist and object trajectories in two projections plus height tracks."""
    from .kinematics import forward_kinematics
    from .synth import WRIST

    body_frames = np.asarray(body_frames, dtype=float)
    obj_frames = np.asarray(obj_frames, dtype=float)
    joints = forward_kinematics(body_frames)
    wrist = joints[:, WRIST if wrist_index is None else wrist_index]
    objc = obj_frames[:, 3:6]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.6))
    for ax, (i, j, name) in zip(axes[:2], ((0, 1, "x-y"), (0, 2, "x-z"))):
        ax.plot(wrist[:, i], wrist[:, j], label="wrist", lw=1.4)
        ax.plot(objc[:, i], objc[:, j], label="object", lw=1.4)
        ax.set_title(name)
        ax.set_aspect("equal", adjustable="datalim")
        ax.grid(True, alpha=0.3)
    axes[0].legend(fontsize=8)
    t = np.arange(body_frames.shape[0])
    axes[2].plot(t, np.linalg.norm(wrist - objc, axis=1), lw=1.4)
    axes[2].set_title("wrist-object distance")
    axes[2].set_xlabel("frame")
    axes[2].grid(True, alpha=0.3)
    fig.suptitle(title)
    return _finish(fig, path)
