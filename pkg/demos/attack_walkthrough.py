"""A short camouflage attack on the toy detector, from scratch.

1. train the toy detector (or load --weights),
2. run a few epochs of texel-gradient updates on the global region,
3. compare detection on a small held-out pose grid: raw paint, noise, camouflage.

This is a reduced run (32 views, 4 epochs) meant to finish in a few minutes on
one CPU; the full-budget numbers live in the acceptance suite.

    python3 demos/attack_walkthrough.py --out /tmp/demo-attack
"""

import argparse
import time
from pathlib import Path

import numpy as np
import torch

from stickercamo.detect import ToyDetector
from stickercamo.evaluate import SweepGrid, asr
from stickercamo.imageio import image_grid, write_image
from stickercamo.pipeline import cmd_train, preset_config
from stickercamo.pipeline.run import Setup, resolve_mesh, train_toy_detector
from stickercamo.render import Environment
from stickercamo.scenes import grid_views, synthetic_backgrounds
from stickercamo.texgen import init_texture


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo-attack")
    ap.add_argument("--weights", help="toy detector weights; trained from scratch if omitted")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)
    out = Path(args.out)
    cfg = preset_config("desk", out=str(out), mode="one-step", train_views=32,
                        optimizer={"epochs": 4, "seed": args.seed})

    t = time.perf_counter()
    if args.weights:
        det = ToyDetector.load(args.weights)
    else:
        print("training the toy detector (about two minutes)...")
        det, val_ap = train_toy_detector(cfg, resolve_mesh(cfg))
        print(f"  validation AP@0.5 = {val_ap:.3f}")
        out.mkdir(parents=True, exist_ok=True)
        det.save(out / "toy_detector.pt")
    print(f"detector ready ({time.perf_counter() - t:.0f}s)")

    t = time.perf_counter()
    cmd_train(cfg, out, detector=det)
    print(f"camouflage trained ({time.perf_counter() - t:.0f}s); loss log in {out / 'losses.csv'}")

    setup = Setup(cfg, detector=det)
    grid = SweepGrid([7, 10, 13], [10, 30], 45)
    views = grid_views(setup.mesh, tuple(cfg.texture_resolution), grid.poses(), Environment(),
                       synthetic_backgrounds(("grass", "desert", "highway"), 2, seed=99))
    textures = {"raw paint": setup.base,
                "noise": init_texture(tuple(cfg.texture_resolution), setup.mask, args.seed, setup.base).texels,
                "camouflage": torch.as_tensor(np.load(out / "texture.npy"))}
    tiles = []
    for name, tex in textures.items():
        with torch.no_grad():
            images = [v.render(tex).float() for v in views]
        print(f"{name:11s} ASR {asr(images, det):5.1f}% over {len(images)} held-out views")
        tiles += [i.numpy() for i in images[:8]]
    write_image(out / "comparison.png", image_grid(tiles, columns=8))


if __name__ == "__main__":
    main()
