"""How background-like is a texture? CSIM and SSIM between the target and its scene.

Renders the car with its raw paint and with a flat texture tinted to each
scene's mean color, then scores the target crop against the empty background.
Lower CSIM means the colors are closer to the surroundings.

    python3 demos/concealment_metrics.py
"""

import argparse

import numpy as np
import torch

from stickercamo.assets import toy_car
from stickercamo.detect import project_gt_box
from stickercamo.evaluate import target_background_similarity
from stickercamo.losses import background_mean_color
from stickercamo.render import Environment, ScenePose, fit_background, render_scene
from stickercamo.scenes import synthetic_background


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    car = toy_car(64)
    pose = ScenePose(20, 40, 8)
    print(f"{'scene':8s} {'texture':8s} {'CSIM':>6s} {'SSIM':>6s}")
    for label in ("grass", "desert", "highway"):
        bg = fit_background(torch.as_tensor(synthetic_background(label, (128, 128), args.seed)), (128, 128))
        tint = background_mean_color(bg)
        for name, tex in (("raw", car.base_texture), ("tinted", np.tile(tint, (64, 64, 1)))):
            img, _, frags = render_scene(car, tex, pose, Environment(), bg, (128, 128))
            gt = project_gt_box(car, pose, (128, 128), camera=frags.camera)
            c, s = target_background_similarity(img, bg, gt)
            print(f"{label:8s} {name:8s} {c:6.3f} {s:6.3f}")


if __name__ == "__main__":
    main()
