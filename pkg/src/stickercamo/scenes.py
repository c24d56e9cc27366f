"""Scene material: backgrounds, environment sampling and precomputed training views.

Rasterizing is the expensive part of rendering and does not depend on the
texture, so training works on a fixed bank of :class:`TrainView` objects whose
shading plans are built once.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .detect import GroundTruth, project_gt_box
from .errors import ConfigError
from .imageio import list_images, read_image
from .losses import background_mean_color
from .render import (DEFAULT_FOV, Environment, ScenePose, apply_shading, composite, fit_background,
                     plan_shading, rasterize, sample_pose)

log = logging.getLogger(__name__)

SCENE_LABELS = ("grass", "desert", "highway", "urban", "plain")
KNOWN_LABELS = ("grass", "desert", "highway")


def scene_label(path, root=None):
    """Scene label from the nearest directory name that is a known label, else "other"."""
    parts = Path(path).parent.parts
    if root is not None:
        parts = Path(path).parent.relative_to(root).parts or parts[-1:]
    for part in reversed(parts):
        if part.lower() in KNOWN_LABELS:
            return part.lower()
    return "other"


def load_backgrounds(directory):
    """All images under ``directory`` as ``[(image float64 HxWx3, label), ...]`` in sorted path order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"backgrounds directory not found: {directory}")
    paths = list_images(directory)
    if not paths:
        raise ConfigError(f"no images in {directory}")
    return [(read_image(p), scene_label(p, directory)) for p in paths]


def group_by_label(backgrounds):
    out = {}
    for img, label in backgrounds:
        out.setdefault(label, []).append(img)
    return out


def synthetic_background(label, resolution=(128, 128), rng=None):
    """Procedural stand-in for a photographed scene of the given label."""
    rng = np.random.default_rng(rng)
    h, w = resolution
    yy = np.linspace(0, 1, h)[:, None, None]
    horizon = rng.uniform(0.25, 0.45)
    sky = np.array([0.55, 0.7, 0.9]) + rng.normal(0, 0.03, 3)

    def noise(scale, amp):
        return gaussian_filter(rng.normal(0, 1, (h, w)), scale)[:, :, None] * amp / max(scale, 1) ** 0.5

    if label == "grass":
        ground = np.array([0.25, 0.45, 0.15]) + rng.normal(0, 0.03, 3)
        img = ground + noise(1.5, 0.25) * np.array([0.6, 1.0, 0.5]) + noise(6, 0.4)
    elif label == "desert":
        ground = np.array([0.78, 0.65, 0.45]) + rng.normal(0, 0.03, 3)
        img = ground + noise(8, 0.35) * np.array([1.0, 0.9, 0.7]) + noise(1, 0.04)
    elif label == "highway":
        ground = np.full(3, 0.33) + rng.normal(0, 0.02, 3)
        img = ground + noise(1, 0.06) + np.zeros((h, w, 3))
        xx = np.arange(w)[None, :]
        for lane in (0.3, 0.7):
            cx = lane * w + (np.arange(h)[:, None] - h / 2) * rng.uniform(-0.3, 0.3)
            stripe = (np.abs(xx - cx) < max(1, w // 64)) & ((np.arange(h)[:, None] // 6) % 2 == 0)
            img[stripe] = 0.9
    elif label == "urban":
        img = np.full((h, w, 3), 0.45) + noise(2, 0.1)
        for _ in range(6):
            x0, x1 = sorted(rng.integers(0, w, 2))
            top = int(rng.uniform(0.05, horizon) * h)
            img[top:, x0:x1 + 1] = rng.uniform(0.2, 0.7, 3)
    elif label == "plain":
        return np.full((h, w, 3), 0.5)
    else:
        raise ConfigError(f"unknown synthetic scene {label!r}; choose from {SCENE_LABELS}")
    img = np.broadcast_to(img, (h, w, 3)).copy()
    if label in ("grass", "desert"):
        band = yy[:, :, 0].repeat(w, 1) < horizon
        img[band] = (sky + noise(10, 0.1))[band]
    return np.clip(img, 0.0, 1.0)


def synthetic_backgrounds(labels, per_label, resolution=(128, 128), seed=0):
    rng = np.random.default_rng(seed)
    return [(synthetic_background(lab, resolution, rng), lab) for lab in labels for _ in range(per_label)]


def write_synthetic_dataset(directory, labels=KNOWN_LABELS, per_label=4, resolution=(128, 128), seed=0):
    """Write ``directory/<label>/<k>.png`` files; returns the paths."""
    from .imageio import write_image

    paths = []
    for img, lab in synthetic_backgrounds(labels, per_label, resolution, seed):
        k = sum(1 for p in paths if p.parent.name == lab)
        paths.append(write_image(Path(directory) / lab / f"{k:03d}.png", img))
    return paths


@dataclass
class EnvironmentSampler:
    """Random lighting for expectation over transformations.

    ``diffuse_range`` is sampled log-uniformly; the light direction is drawn
    from the upper hemisphere with elevation >= ``min_light_elevation``.
    """

    base: Environment = Environment()
    diffuse_range: tuple = (1.0, 1.0)
    min_light_elevation: float = 20.0

    def __call__(self, rng):
        lo, hi = self.diffuse_range
        kd = lo if lo == hi else math.exp(rng.uniform(math.log(lo), math.log(hi)))
        if self.min_light_elevation >= 90:
            return self.base.with_(diffuse_color=kd)
        el = math.radians(rng.uniform(self.min_light_elevation, 90.0))
        az = rng.uniform(0, 2 * math.pi)
        light = (math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az))
        return self.base.with_(diffuse_color=kd, light_direction=light)


@dataclass
class TrainView:
    """A fixed viewpoint of the target with a precomputed shading plan."""

    pose: ScenePose
    env: Environment
    background: torch.Tensor
    plan: object
    gt: GroundTruth
    c_r: np.ndarray
    label: str = "other"

    def render(self, texture):
        return composite(apply_shading(self.plan, texture), self.background.to(torch.as_tensor(texture).dtype))


def build_view(mesh, texture_shape, pose, env, background, resolution=(128, 128), fov=DEFAULT_FOV,
               label="other"):
    frags = rasterize(mesh, pose, resolution, fov)
    plan = plan_shading(frags, mesh, texture_shape, env)
    gt = project_gt_box(mesh, pose, resolution, camera=frags.camera)
    bg = fit_background(torch.as_tensor(background, dtype=torch.float64), resolution)
    return TrainView(pose, env, bg, plan, gt, background_mean_color(bg, gt.box), label)


def sample_views(mesh, texture_shape, n, pose_ranges, env_sampler, backgrounds, seed,
                 resolution=(128, 128), fov=DEFAULT_FOV):
    """``n`` views with random poses/lighting, backgrounds cycled in order."""
    if not backgrounds:
        raise ConfigError("need at least one background")
    rng = np.random.default_rng(seed)
    views = []
    for k in range(n):
        pose = sample_pose(pose_ranges, rng)
        env = env_sampler(rng)
        bg, lab = backgrounds[k % len(backgrounds)]
        views.append(build_view(mesh, texture_shape, pose, env, bg, resolution, fov, lab))
    return views


def detection_scenes(mesh, n, pose_ranges, env_sampler, backgrounds, seed, resolution=(128, 128),
                     texture=None, recolor=0.0, negatives=0.25):
    """``[(image, GroundTruth or None), ...]`` for detector training.

    A fraction ``negatives`` of scenes is bare background (ground truth None);
    a fraction ``recolor`` of the others repaints the texture with a random
    channel permutation and gain.
    """
    rng = np.random.default_rng(seed)
    base = np.asarray(mesh.base_texture if texture is None else texture, dtype=np.float64)
    out = []
    for k in range(n):
        pose = sample_pose(pose_ranges, rng)
        env = env_sampler(rng)
        bg = backgrounds[rng.integers(len(backgrounds))][0]
        if rng.uniform() < negatives:
            out.append((fit_background(torch.as_tensor(bg, dtype=torch.float64), resolution).float(), None))
            continue
        tex = base
        if rng.uniform() < recolor:
            tex = np.clip(base[:, :, rng.permutation(3)] * rng.uniform(0.6, 1.4, 3), 0, 1)
        view = build_view(mesh, tex.shape, pose, env, bg, resolution)
        with torch.no_grad():
            img = view.render(torch.as_tensor(tex))
        out.append((img.float(), view.gt))
    return out


def grid_views(mesh, texture_shape, poses, env, backgrounds, resolution=(128, 128)):
    """Views for a fixed pose list (e.g. a held-out grid), backgrounds cycled."""
    return [build_view(mesh, texture_shape, p, env, backgrounds[k % len(backgrounds)][0], resolution,
                       label=backgrounds[k % len(backgrounds)][1])
            for k, p in enumerate(poses)]
