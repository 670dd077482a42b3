"""Shared fixtures: procedural worlds and a tiny trained pipeline.

Session-scoped so the expensive pieces (dataset generation, tiny-config
training) happen once for the whole suite.
"""
import numpy as np
import pytest

from hoigen import synth
from hoigen.pipeline import PipelineConfig, StageConfig, train_stage


@pytest.fixture(scope="session")
def micro_world():
    """24-sample world for cheap unit tests."""
    return synth.generate_dataset(synth.ScenarioSpec(instances_per_pair=2))


@pytest.fixture(scope="session")
def small_world():
    """240-sample world; its 36-sample test split clears the retrieval pool."""
    return synth.generate_dataset(synth.ScenarioSpec(instances_per_pair=20))


@pytest.fixture(scope="session")
def tiny_config():
    """Minutes-scale training configuration for pipeline behavior tests."""
    return PipelineConfig(width=32, layers=2, heads=2,
                          train_diffusion_steps=100, infer_steps=10,
                          guidance_steps=3, guidance_gd_steps=1,
                          stage1=StageConfig(5, 16), stage2=StageConfig(5, 16),
                          stage3=StageConfig(5, 16), stage4=StageConfig(5, 16),
                          seed=0)


@pytest.fixture(scope="session")
def tiny_checkpoints(tmp_path_factory, small_world, tiny_config):
    """All stages plus ablation variants trained at tiny scale."""
    out = str(tmp_path_factory.mktemp("tiny_ckpts"))
    for stage in (1, 2, 3, 4, "direct", "object_nocontact"):
        train_stage(stage, tiny_config, small_world, out)
    return out


def build_grasp_instance(seed, n_frames=64, n_points=64):
    """Scripted grasp: one hand rigidly holding an object's anchor point.

    The wrist approaches along one direction, touches the anchor exactly at
    frame n0, and holds it rigidly afterwards; the rest of the point cloud
    clusters well away from every hand joint so the in-contact pair set at
    detection time is the single (wrist, anchor) pair.
    Returns (hands (N,5,3), points (P,3), obj_frames (N,6), n0).
    """
    rng = np.random.default_rng([seed, 1234])
    n0 = 16
    t = np.linspace(0.0, 1.0, n_frames)
    base = np.stack([0.2 * np.sin(1.5 * t + rng.uniform(0, 3)),
                     0.8 + 0.15 * t,
                     0.3 * np.cos(1.2 * t + rng.uniform(0, 3))], axis=1)
    approach = rng.standard_normal(3)
    approach /= np.linalg.norm(approach)
    raw = rng.standard_normal(3)
    cluster_dir = raw - (raw @ approach) * approach
    cluster_dir /= np.linalg.norm(cluster_dir)
    wrist = base.copy()
    for n in range(n0):
        wrist[n] = base[n0] + approach * (0.20 - 0.119 * n / max(1, n0 - 1))
    knuckles = wrist[:, None, :] - cluster_dir[None, None, :] * 0.25 * \
        np.linspace(1.0, 1.4, 4)[None, :, None]
    hands = np.concatenate([wrist[:, None, :], knuckles], axis=1)
    cluster = cluster_dir * 0.18 + 0.02 * rng.standard_normal((n_points - 1, 3))
    points = np.concatenate([np.zeros((1, 3)), cluster], axis=0)
    rot = np.zeros((n_frames, 3))
    trans = np.empty((n_frames, 3))
    trans[:n0] = base[n0]       # object rests at the grasp site
    trans[n0:] = wrist[n0:]     # rigid hold: anchor point rides the wrist
    return hands, points, np.concatenate([rot, trans], axis=1), n0


def perturb_grasp(obj_frames, seed, n0):
    """3 cm single-axis offset from a random mid-hold frame onward."""
    rng = np.random.default_rng([seed, 777])
    axis = seed % 3
    sign = 1.0 if (seed // 3) % 2 == 0 else -1.0
    start = n0 + 1 + int(rng.integers(0, obj_frames.shape[0] - n0 - 2))
    out = obj_frames.copy()
    out[start:, 3 + axis] += sign * 0.03
    return out, start
