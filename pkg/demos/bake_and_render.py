"""Bake the camouflage regions of the toy car and look at it from a few angles.

Writes the global and local region masks, a sticker cutout and a strip of
renders (raw paint vs. random noise in the global region) to --out.

    python3 demos/bake_and_render.py --out /tmp/demo-bake
"""

import argparse
from pathlib import Path

import torch

from stickercamo.assets import GLOBAL_GROUPS, LOCAL_GROUPS, toy_car
from stickercamo.geometry import FaceSelection, bake_region_mask, sticker_cutout
from stickercamo.imageio import image_grid, write_image, write_mask
from stickercamo.pipeline.run import base_texture
from stickercamo.render import Environment, ScenePose, render_scene
from stickercamo.scenes import synthetic_background
from stickercamo.texgen import init_texture


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo-bake")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)

    car = toy_car(128)
    res = (64, 64)
    masks = {}
    for name, groups in (("global", GLOBAL_GROUPS), ("local", LOCAL_GROUPS)):
        masks[name] = bake_region_mask(car, FaceSelection.from_groups(car, groups), res)
        write_mask(out / f"mask_{name}.png", masks[name].mask)
        print(f"{name:6s} region: {masks[name].nnz} texels ({100 * masks[name].coverage:.1f}% of the atlas)")

    # the base paint resampled to the working resolution, then noise painted into the global region
    base = base_texture(car, res)
    noisy = init_texture(res, masks["global"], args.seed, base)
    rgb, m = sticker_cutout(noisy.texels, masks["global"])
    write_image(out / "sticker.png", rgb)
    write_mask(out / "sticker_mask.png", m)

    bg = torch.as_tensor(synthetic_background("grass", (128, 128), args.seed))
    tiles = []
    for tex in (base, noisy.texels):
        for az in (0, 60, 120, 180, 240, 300):
            img, _, _ = render_scene(car, tex, ScenePose(20, az, 9), Environment(), bg, (128, 128))
            tiles.append(img.numpy())
    write_image(out / "views.png", image_grid(tiles, columns=6))
    print("wrote", ", ".join(sorted(p.name for p in out.iterdir())))


if __name__ == "__main__":
    main()
