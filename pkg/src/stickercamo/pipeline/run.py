"""End-to-end run orchestration behind the CLI subcommands.

Every command writes only under the run's output directory, holds a lock file
while it runs and records what it produced in ``manifest.json``.
"""

import contextlib
import json
import logging
import os
from pathlib import Path

import numpy as np
import torch

from .. import __version__
from ..assets import GLOBAL_GROUPS, LOCAL_GROUPS, load_palette, toy_car
from ..detect import DetectorError, build_detector, toy_detector_train
from ..errors import ConfigError, TexgenError
from ..evaluate import (EvalReport, FULL_SCALE_REFERENCE, concealment_eval, grid_preset, occlusion_sweep,
                        pose_sweep, reflectance_sweep)
from ..geometry import FaceSelection, bake_region_mask, blend_textures, load_mesh, sticker_cutout
from ..imageio import read_image, write_image, write_mask
from ..losses import LossConfig
from ..render import Environment, ScenePose, render_scene
from ..scenes import (EnvironmentSampler, detection_scenes, group_by_label, load_backgrounds,
                      sample_views, synthetic_backgrounds)
from ..texgen import (AdvTexture, DiffusionConfig, GeneratorState, LossLog, generate_texture,
                      geometric_schedule, init_texture, train_diffusion, train_gradient)

log = logging.getLogger(__name__)

SWEEPS = ("pose", "occlusion", "reflectance", "concealment")
MANIFEST = "manifest.json"


# ---------------------------------------------------------------------------
# Output directory plumbing


@contextlib.contextmanager
def run_lock(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"output directory {out} is locked by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def read_manifest(out):
    path = Path(out) / MANIFEST
    if not path.exists():
        return {"code_version": __version__, "checkpoints": [], "reports": [], "bake": []}
    return json.loads(path.read_text())


def write_manifest(out, manifest):
    out = Path(out)
    for key in ("checkpoints", "reports", "bake"):
        for rel in manifest.get(key, []):
            if not (out / rel).exists():
                raise ConfigError(f"manifest lists missing file {rel}")
    if manifest.get("texture") and not (out / manifest["texture"]).exists():
        raise ConfigError(f"manifest lists missing file {manifest['texture']}")
    tmp = out / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, out / MANIFEST)
    return out / MANIFEST


def _rel(out, path):
    return str(Path(path).relative_to(out))


def _add(manifest, key, rels):
    items = manifest.setdefault(key, [])
    for r in rels:
        if r not in items:
            items.append(r)


# ---------------------------------------------------------------------------
# Building blocks from a config


def resolve_mesh(cfg):
    if cfg.mesh == "builtin:toy_car":
        return toy_car(128)
    return load_mesh(cfg.mesh, tuple(cfg.texture_resolution))


def resolve_selection(cfg, mesh):
    if cfg.selection == "builtin:global":
        return FaceSelection.from_groups(mesh, GLOBAL_GROUPS)
    if cfg.selection == "builtin:local":
        return FaceSelection.from_groups(mesh, LOCAL_GROUPS)
    return FaceSelection.load(cfg.selection)


def base_texture(mesh, resolution):
    m = np.zeros(tuple(resolution))
    return blend_textures(mesh.base_texture, torch.zeros(*resolution, 3, dtype=torch.float64), m)


def loss_config(cfg):
    lw = cfg.loss
    palette = load_palette(lw.palette) if lw.palette else load_palette()
    return LossConfig(lw.alpha, lw.beta, lw.gamma, lw.mu, lw.tau, lw.c_ru, palette)


def environment(cfg):
    e = cfg.environment
    return Environment(tuple(e.ambient), e.diffuse_color, tuple(e.specular), e.shininess,
                       tuple(e.light_direction))


def env_sampler(cfg):
    return EnvironmentSampler(environment(cfg), tuple(cfg.environment.eot_diffuse_range),
                              cfg.environment.eot_min_light_elevation)


def backgrounds(cfg, labels=None, per_label=8, seed=None):
    """Backgrounds from the configured directory, or synthetic ones for the configured scenes."""
    labels = list(labels or cfg.scenes)
    if cfg.backgrounds:
        items = load_backgrounds(cfg.backgrounds)
        if labels:
            items = [b for b in items if b[1] in labels] or items
        return items
    seed = cfg.optimizer.seed + 1000 if seed is None else seed
    return synthetic_backgrounds(labels, per_label, tuple(cfg.render_resolution), seed)


def diffusion_config(cfg):
    d = cfg.diffusion
    return DiffusionConfig(d.steps, geometric_schedule(d.steps, d.sigma_max), tuple(d.generator_channels))


def resolve_detector(cfg, mesh, out=None):
    """The configured detector; the toy detector is trained (and cached under ``out``) if no weights are given."""
    dc = cfg.detector
    res = tuple(cfg.render_resolution)
    if dc.weights:
        return build_detector(dc.name, weights=dc.weights, input_resolution=res)
    if dc.name != "toy":
        raise DetectorError(f"detector {dc.name!r} needs a weights file")
    cache = Path(out) / "detector" / "toy.pt" if out else None
    if cache is not None and cache.exists():
        return build_detector("toy", weights=str(cache), input_resolution=res)
    det, _ = train_toy_detector(cfg, mesh)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        det.save(cache)
    return det


def train_toy_detector(cfg, mesh):
    """Train the toy detector on synthetic scenes; returns ``(detector, validation AP@0.5)``."""
    dc = cfg.detector
    res = tuple(cfg.render_resolution)
    bgs = backgrounds(cfg, per_label=40, seed=dc.seed)
    ranges, envs = cfg.pose_ranges.as_dict(), env_sampler(cfg)
    train = detection_scenes(mesh, dc.train_scenes, ranges, envs, bgs, seed=dc.seed + 1, resolution=res)
    val = detection_scenes(mesh, dc.val_scenes, ranges, envs, bgs, seed=dc.seed + 2, resolution=res)
    det, ap = toy_detector_train(train, dc.train_epochs, dc.seed - 1, res, val=val, gate=dc.gate,
                                 stop_at_gate=dc.stop_at_gate)
    log.info("toy detector AP@0.5 on validation: %.3f", ap)
    return det, ap


class Setup:
    """Everything a run needs, resolved once from the config."""

    def __init__(self, cfg, out=None, detector=None):
        cfg.validate()
        self.cfg = cfg
        self.mesh = resolve_mesh(cfg)
        self.selection = resolve_selection(cfg, self.mesh)
        self.mask = bake_region_mask(self.mesh, self.selection, tuple(cfg.texture_resolution))
        self.base = base_texture(self.mesh, cfg.texture_resolution)
        self.loss_cfg = loss_config(cfg)
        self.env = environment(cfg)
        self.detector = detector or resolve_detector(cfg, self.mesh, out)

    def views(self):
        cfg = self.cfg
        return sample_views(self.mesh, tuple(cfg.texture_resolution), cfg.train_views, cfg.pose_ranges.as_dict(),
                            env_sampler(cfg), backgrounds(cfg), seed=cfg.optimizer.seed + 100,
                            resolution=tuple(cfg.render_resolution))


# ---------------------------------------------------------------------------
# Commands


def cmd_bake(cfg, out):
    """Bake the selection mask and the base-texture sticker cutout."""
    cfg.validate()
    mesh = resolve_mesh(cfg)
    sel = resolve_selection(cfg, mesh)
    mask = bake_region_mask(mesh, sel, tuple(cfg.texture_resolution))
    with run_lock(out) as out:
        base = base_texture(mesh, cfg.texture_resolution)
        rgb, m = sticker_cutout(base, mask)
        paths = [write_mask(out / "bake" / "mask.png", mask.mask),
                 write_image(out / "bake" / "sticker.png", rgb),
                 write_mask(out / "bake" / "sticker_mask.png", m)]
        manifest = read_manifest(out)
        manifest["config_hash"] = cfg.config_hash()
        manifest["seed"] = cfg.optimizer.seed
        _add(manifest, "bake", [_rel(out, p) for p in paths])
        write_manifest(out, manifest)
    return paths


def _checkpoint_files(out):
    return sorted((Path(out) / "checkpoints").glob("epoch*.pt"))


def _save_texel_checkpoint(path, texture, step, epoch, config_hash):
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": "stickercamo-texels-v1", "config_hash": config_hash, "step": step, "epoch": epoch,
                "texels": texture.texels, "seed": texture.seed}, path)
    return path


def cmd_train(cfg, out, resume=False, detector=None):
    """Run the configured optimization mode; returns the manifest dict."""
    cfg.validate()
    with run_lock(out) as out:
        setup = Setup(cfg, out, detector)
        views = setup.views()
        h = cfg.config_hash()
        seed = cfg.optimizer.seed
        ckpts = _checkpoint_files(out)
        start = None
        if resume and ckpts:
            start = ckpts[-1]
        elif ckpts:
            for p in ckpts:
                p.unlink()
        checkpoints = [_rel(out, p) for p in _checkpoint_files(out)]
        if cfg.mode == "diffusion":
            if start is not None:
                state = GeneratorState.load(start, config_hash=h)
            else:
                state = GeneratorState(diffusion_config(cfg), seed=seed, lr=cfg.optimizer.lr)
            loss_log = LossLog(out / "losses.csv", resume=start is not None, keep_steps=state.step)
            for _ in range(state.epoch, cfg.optimizer.epochs):
                state = train_diffusion(state, setup.mesh, views, setup.detector, setup.loss_cfg, state.epoch + 1,
                                        mask=setup.mask, seed=seed, batch_size=cfg.optimizer.batch_size,
                                        base=setup.base, loss_log=loss_log)
                checkpoints.append(_rel(out, state.save(out / "checkpoints" / f"epoch{state.epoch:03d}.pt", h)))
            texture = generate_texture(state, state.cfg, seed, setup.mask, setup.base)
        else:
            if start is not None:
                ck = torch.load(start, map_location="cpu", weights_only=False)
                if ck.get("config_hash") != h:
                    raise TexgenError(f"{start}: config hash does not match; refusing to resume")
                texture, epoch, step = AdvTexture(ck["texels"], setup.mask, ck["seed"]), ck["epoch"], ck["step"]
            else:
                texture = init_texture(tuple(cfg.texture_resolution), setup.mask, seed, setup.base)
                epoch, step = 0, 0
            loss_log = LossLog(out / "losses.csv", resume=start is not None, keep_steps=step)
            n_batches = -(-len(views) // cfg.optimizer.batch_size)
            while epoch < cfg.optimizer.epochs:
                texture = _gradient_epoch(texture, views, setup, cfg, epoch, step, loss_log)
                epoch, step = epoch + 1, step + n_batches
                checkpoints.append(_rel(out, _save_texel_checkpoint(
                    out / "checkpoints" / f"epoch{epoch:03d}.pt", texture, step, epoch, h)))
        paths = texture.export(out, "texture")
        np.save(out / "texture.npy", texture.numpy())
        manifest = read_manifest(out)
        manifest.update({"config_hash": h, "code_version": __version__, "seed": seed, "mode": cfg.mode,
                         "texture": _rel(out, paths[0]), "texture_array": "texture.npy",
                         "sticker": [_rel(out, p) for p in paths[1:]], "loss_log": "losses.csv",
                         "checkpoints": checkpoints})
        (out / "config.json").write_text(cfg.to_json() + "\n")
        write_manifest(out, manifest)
    return manifest


def _gradient_epoch(texture, views, setup, cfg, epoch, step, loss_log):
    """One epoch of texel updates with the same batch order as the generator mode."""
    from ..texgen import _batches, batch_loss, one_step_update, reference_color

    for p in setup.detector.model.parameters():
        p.requires_grad_(False)
    c_r = reference_color(views)
    dtype = setup.detector.dtype
    for idx in _batches(len(views), cfg.optimizer.batch_size, cfg.optimizer.seed, epoch):
        tex = texture.texels.to(dtype).detach().requires_grad_(True)
        rep = batch_loss(tex, [views[i] for i in idx], setup.detector, setup.loss_cfg, setup.mask, c_r)
        (grad,) = torch.autograd.grad(rep.total, tex)
        texture = one_step_update(texture, grad.double(), cfg.optimizer.step_size, cfg.optimizer.ascend)
        loss_log.append(step, epoch, rep)
        step += 1
    return texture


def load_texture(path, resolution=None):
    """A texture from a .npy array or an image file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"texture not found: {path}")
    tex = np.load(path) if path.suffix == ".npy" else read_image(path)
    if tex.ndim != 3 or tex.shape[2] != 3:
        raise ConfigError(f"{path}: expected an RGB texture")
    if resolution is not None and tuple(tex.shape[:2]) != tuple(resolution):
        raise ConfigError(f"{path}: texture is {tex.shape[:2]}, config expects {tuple(resolution)}")
    return torch.as_tensor(tex, dtype=torch.float64)


def cmd_render(cfg, out, texture_path=None, poses=None, background=None):
    """Render the (camouflaged) target from the given poses onto a background; writes PNGs."""
    cfg.validate()
    mesh = resolve_mesh(cfg)
    res = tuple(cfg.render_resolution)
    tex = load_texture(texture_path, cfg.texture_resolution) if texture_path else base_texture(
        mesh, cfg.texture_resolution)
    poses = poses or [ScenePose(20, a, 8) for a in (0, 90, 180, 270)]
    bg = read_image(background) if background else np.full((*res, 3), 0.5)
    env = environment(cfg)
    with run_lock(out) as out:
        paths = []
        for k, p in enumerate(poses):
            img, _, _ = render_scene(mesh, tex, p, env, torch.as_tensor(bg), res)
            paths.append(write_image(out / "renders" / f"view{k:03d}.png", img))
        manifest = read_manifest(out)
        _add(manifest, "reports", [_rel(out, p) for p in paths])
        write_manifest(out, manifest)
    return paths


def parse_textures(items, cfg, mesh):
    """``name=path`` pairs (or bare paths) to a name -> texture dict; "raw" maps to the base texture."""
    out = {}
    for item in items or []:
        name, _, path = item.partition("=") if "=" in item else (Path(item).stem, "", item)
        out[name] = base_texture(mesh, cfg.texture_resolution) if path == "raw" else load_texture(
            path, cfg.texture_resolution)
    return out


def cmd_eval(cfg, out, textures, sweep, grid="desk", scenes=None, detector=None):
    """Run one sweep for each texture and write CSV + JSON reports."""
    if sweep not in SWEEPS:
        raise ConfigError(f"unknown sweep {sweep!r}; valid sweeps: {', '.join(SWEEPS)}")
    cfg.validate()
    if not textures:
        raise ConfigError("no textures to evaluate")
    with run_lock(out) as out:
        setup = Setup(cfg, out, detector)
        res = tuple(cfg.render_resolution)
        report = EvalReport(meta={"config_hash": cfg.config_hash(), "seed": cfg.optimizer.seed,
                                  "sweep": sweep, "grid": grid, "textures": sorted(textures)})
        if sweep == "concealment":
            labels = list(scenes or ["grass", "desert", "highway"])
            by_label = group_by_label(backgrounds(cfg, labels, per_label=4))
            missing = [lab for lab in labels if lab not in by_label]
            if missing:
                raise ConfigError(f"no backgrounds for scenes {missing}")
            rep = concealment_eval(setup.mesh, textures, setup.env, {k: by_label[k] for k in labels},
                                   setup.detector, resolution=res)
            report.extend(rep)
        else:
            bgs = [b[0] for b in backgrounds(cfg, per_label=2)] if sweep != "pose" else None
            for name in sorted(textures):
                tex = textures[name]
                if sweep == "pose":
                    rep = pose_sweep(setup.mesh, tex, setup.env, grid_preset(grid), setup.detector,
                                     resolution=res)
                elif sweep == "occlusion":
                    rep = occlusion_sweep(setup.mesh, tex, setup.env, grid_preset(f"{grid}-occlusion"),
                                          setup.detector, bgs, res)
                else:
                    g = grid_preset(f"{grid}-occlusion")
                    rep = reflectance_sweep(setup.mesh, tex, bgs, g.reflectances, setup.detector, g,
                                            setup.env, res)
                for r in rep.rows:
                    r["cell"] = (("texture", name),) + tuple(r["cell"])
                report.extend(rep)
        csv_path = report.write_csv(out / "reports" / f"{sweep}.csv")
        json_path = report.write_summary(out / "reports" / f"{sweep}.json")
        manifest = read_manifest(out)
        _add(manifest, "reports", [_rel(out, csv_path), _rel(out, json_path)])
        write_manifest(out, manifest)
    return report


def cmd_report(out):
    """Collect the run's reports into a Markdown summary with labeled reference columns."""
    out = Path(out)
    manifest = read_manifest(out)
    lines = ["# Run report", ""]
    for key in ("config_hash", "seed", "mode", "code_version", "texture"):
        if key in manifest:
            lines.append(f"- {key}: {manifest[key]}")
    lines.append("")
    losses = out / manifest.get("loss_log", "losses.csv")
    if losses.exists():
        rows = np.genfromtxt(losses, delimiter=",", names=True)
        rows = np.atleast_1d(rows)
        lines += ["## Training", "", "| epoch | mean total loss |", "|---|---|"]
        for e in np.unique(rows["epoch"]):
            lines.append(f"| {int(e)} | {rows['total'][rows['epoch'] == e].mean():.4f} |")
        lines.append("")
    for csv_rel in [r for r in manifest.get("reports", []) if r.endswith(".csv")]:
        rep = EvalReport.read_csv(out / csv_rel)
        lines += [f"## {Path(csv_rel).stem}", "", "| metric | cell | value | images |", "|---|---|---|---|"]
        for r in rep.rows:
            lines.append(f"| {r['metric']} | {EvalReport._cell_str(r['cell'])} | {r['value']:.3f} | {r['count']} |")
        lines.append("")
    lines += [f"## Reference numbers ({FULL_SCALE_REFERENCE['label']})", ""]
    lines += ["| reflectance | RAW ASR | camo(v5) ASR |", "|---|---|---|"]
    for k, (raw, camo) in FULL_SCALE_REFERENCE["reflectance_asr"].items():
        lines.append(f"| {k} | {raw} | {camo} |")
    lines += ["", "| method | YOLOv3 | YOLOv5 | FRCNN | drop |", "|---|---|---|---|---|"]
    for k, v in FULL_SCALE_REFERENCE["ap50_victims"].items():
        lines.append(f"| {k} | " + " | ".join(f"{x:.3f}" for x in v) + " |")
    path = out / "report.md"
    path.write_text("\n".join(lines) + "\n")
    return path
