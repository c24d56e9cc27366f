"""Texture generation: direct gradient updates on texels and a noise-injecting U-Net chain.

Both modes optimize the same objective through the same renderer and
detector; they differ only in what is being optimized (texels vs generator
weights).
"""

import csv
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CamoError, DetectorError, TexgenError
from .geometry import RegionMask, _as_texture, blend_textures, sticker_cutout
from .imageio import write_image, write_mask
from .losses import LossReport, adv_loss, cr_loss, nps_loss, total_loss, tv_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "stickercamo-generator-v1"
DEFAULT_STEP_SIZE = 2.0
LOSS_COLUMNS = ("step", "epoch", "l_iou", "l_obj", "l_adv", "l_tv", "l_nps", "l_cr", "total")


# ---------------------------------------------------------------------------
# Texel mode


@dataclass
class AdvTexture:
    texels: torch.Tensor
    mask: RegionMask
    seed: int

    def __post_init__(self):
        self.texels = _as_texture(self.texels)
        if tuple(self.texels.shape) != (*self.mask.resolution, 3):
            raise TexgenError(f"texels {tuple(self.texels.shape)} do not match mask {self.mask.resolution}")
        if not bool(torch.isfinite(self.texels).all()):
            raise TexgenError("texels must be finite")
        if self.texels.min() < 0 or self.texels.max() > 1:
            raise TexgenError("texels must lie in [0, 1]")

    @property
    def resolution(self):
        return self.mask.resolution

    def numpy(self):
        return self.texels.detach().cpu().numpy()

    def export(self, directory, stem="texture"):
        """Write the texture PNG, the sticker cutout PNG and its mask; returns the three paths."""
        directory = Path(directory)
        rgb, m = sticker_cutout(self.texels, self.mask)
        return (write_image(directory / f"{stem}.png", self.numpy()),
                write_image(directory / f"{stem}_sticker.png", rgb),
                write_mask(directory / f"{stem}_sticker_mask.png", m))


def init_texture(resolution, mask, seed, base=None, dtype=torch.float64):
    """Uniform noise inside the mask, the (resampled) base texture elsewhere."""
    if tuple(resolution) != tuple(mask.resolution):
        raise TexgenError(f"resolution {tuple(resolution)} does not match mask {mask.resolution}")
    h, w = resolution
    noise = np.random.default_rng(seed).uniform(0.0, 1.0, (h, w, 3))
    if base is None:
        base = np.full((h, w, 3), 0.5)
    tex = blend_textures(base, torch.as_tensor(noise, dtype=dtype), mask)
    return AdvTexture(tex, mask, seed)


def one_step_update(texture, grad, v, ascend=False):
    """Move masked texels by ``|v| * grad`` (downhill unless ``ascend``) and clamp to [0, 1]."""
    grad = torch.as_tensor(grad, dtype=texture.texels.dtype)
    if v == 0:
        raise TexgenError("step size v must be nonzero")
    if tuple(grad.shape) != tuple(texture.texels.shape):
        raise TexgenError(f"gradient shape {tuple(grad.shape)} != texture {tuple(texture.texels.shape)}")
    if not bool(torch.isfinite(grad).all()):
        raise TexgenError("non-finite gradient")
    step = abs(v) * grad * (1.0 if ascend else -1.0)
    m = texture.mask.tensor(torch.bool)[:, :, None]
    new = torch.where(m, torch.clamp(texture.texels.detach() + step, 0.0, 1.0), texture.texels.detach())
    return AdvTexture(new, texture.mask, texture.seed)


# ---------------------------------------------------------------------------
# Generator mode


def geometric_schedule(steps=10, sigma_max=0.5, ratio=1 / math.sqrt(2)):
    """sigma_k = sigma_max * ratio**(K - k) for k = 1..K (index 0 holds sigma_1)."""
    return [sigma_max * ratio ** (steps - k) for k in range(1, steps + 1)]


@dataclass
class DiffusionConfig:
    steps: int = 10
    sigma_schedule: list = field(default_factory=geometric_schedule)
    generator_channels: tuple = (32, 64, 128)
    residual: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise TexgenError("steps must be >= 1")
        self.sigma_schedule = [float(s) for s in self.sigma_schedule]
        if len(self.sigma_schedule) != self.steps:
            raise TexgenError(f"sigma schedule has {len(self.sigma_schedule)} entries, expected {self.steps}")
        if any(not (math.isfinite(s) and s >= 0) for s in self.sigma_schedule):
            raise TexgenError("sigma values must be finite and >= 0")
        # sigma_1 <= sigma_2 <= ... <= sigma_K: noise shrinks as the chain runs k = K..1
        if any(a > b for a, b in zip(self.sigma_schedule, self.sigma_schedule[1:])):
            raise TexgenError("sigma schedule must be non-increasing from k = K down to 1")
        self.generator_channels = tuple(int(c) for c in self.generator_channels)
        if len(self.generator_channels) < 1 or any(c < 8 or c % 8 for c in self.generator_channels):
            raise TexgenError("generator channels must be positive multiples of 8")


def _norm(c):
    return nn.GroupNorm(8, c)


class _ConvBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), _norm(cout), nn.SiLU(),
                                  nn.Conv2d(cout, cout, 3, padding=1), _norm(cout), nn.SiLU())

    def forward(self, x):
        return self.body(x)


class UNetGenerator(nn.Module):
    """Encoder-decoder with skip connections; residual output G(x) = x + f(x).

    The last 1x1 convolution starts at zero, so a fresh generator is the identity.
    """

    def __init__(self, channels=(32, 64, 128), residual=True):
        super().__init__()
        self.channels = tuple(channels)
        self.residual = residual
        c0 = self.channels[0]
        self.stem = _ConvBlock(3, c0)
        self.downs = nn.ModuleList()
        prev = c0
        for c in self.channels:
            self.downs.append(nn.Sequential(nn.Conv2d(prev, c, 3, stride=2, padding=1), _norm(c), nn.SiLU(),
                                            _ConvBlock(c, c)))
            prev = c
        self.mid = _ConvBlock(prev, prev)
        self.ups = nn.ModuleList()
        skips = [c0] + list(self.channels[:-1])
        for c, skip in zip(reversed(self.channels), reversed(skips)):
            self.ups.append(_ConvBlock(prev + skip, skip))
            prev = skip
        self.out = nn.Conv2d(prev, 3, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @property
    def factor(self):
        return 2 ** len(self.channels)

    def forward(self, x):
        h = self.stem(x)
        skips = [h]
        for down in self.downs:
            h = down(h)
            skips.append(h)
        h = self.mid(skips.pop())
        for up in self.ups:
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[2:], mode="nearest")
            h = up(torch.cat([h, skip], 1))
        return x + self.out(h) if self.residual else self.out(h)


class GeneratorState:
    """Generator weights, optimizer state and step counter."""

    def __init__(self, cfg=None, seed=0, lr=1e-3, dtype=torch.float32):
        self.cfg = cfg or DiffusionConfig()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.model = UNetGenerator(self.cfg.generator_channels, self.cfg.residual).to(dtype)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=lr)
        self.step = 0
        self.epoch = 0
        self.rng_state = {}

    @property
    def dtype(self):
        return next(self.model.parameters()).dtype

    def num_parameters(self):
        return sum(p.numel() for p in self.model.parameters())

    def fingerprint(self):
        """SHA-256 over weights, optimizer moments and counters.

        Pickled checkpoints are not byte-stable across a save/load cycle (the
        pickler memoizes strings differently), so equality of training state is
        judged on this digest.
        """
        h = hashlib.sha256()
        for k, v in self.model.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        opt = self.optimizer.state_dict()
        for pid in sorted(opt["state"]):
            for k in sorted(opt["state"][pid]):
                h.update(f"{pid}.{k}".encode())
                h.update(torch.as_tensor(opt["state"][pid][k]).cpu().contiguous().numpy().tobytes())
        h.update(json.dumps([opt["param_groups"], self.step, self.epoch], sort_keys=True, default=str).encode())
        return h.hexdigest()

    def to_bytes(self, config_hash=""):
        buf = io.BytesIO()
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "config_hash": config_hash,
            "diffusion": {"steps": self.cfg.steps, "sigma_schedule": self.cfg.sigma_schedule,
                          "generator_channels": list(self.cfg.generator_channels),
                          "residual": self.cfg.residual},
            "theta": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
        }, buf)
        return buf.getvalue()

    def save(self, path, config_hash=""):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes(config_hash))
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path, config_hash=None):
        """Restore a checkpoint; with ``config_hash`` given, refuse a mismatching one."""
        try:
            ckpt = torch.load(path, map_location="cpu", weights_only=False)
        except FileNotFoundError:
            raise TexgenError(f"checkpoint not found: {path}") from None
        if ckpt.get("format") != CHECKPOINT_FORMAT:
            raise TexgenError(f"{path}: unsupported checkpoint format {ckpt.get('format')!r}")
        if config_hash is not None and ckpt["config_hash"] != config_hash:
            raise TexgenError(f"{path}: config hash {ckpt['config_hash'][:12]} does not match the "
                              f"current config {config_hash[:12]}; refusing to resume")
        d = ckpt["diffusion"]
        cfg = DiffusionConfig(d["steps"], d["sigma_schedule"], tuple(d["generator_channels"]), d["residual"])
        dtype = next(iter(ckpt["theta"].values())).dtype
        st = cls(cfg, dtype=dtype)
        st.model.load_state_dict(ckpt["theta"])
        st.optimizer.load_state_dict(ckpt["optimizer"])
        st.step, st.epoch, st.rng_state = ckpt["step"], ckpt["epoch"], ckpt.get("rng_state", {})
        return st


def _noise_generator(seed, stream):
    """Independent torch generator for (run seed, stream id)."""
    digest = hashlib.sha256(f"{seed}:{stream}".encode()).digest()
    return torch.Generator().manual_seed(int.from_bytes(digest[:8], "little") & ((1 << 63) - 1))


def diffusion_generate(state, cfg, seed, mask, base=None, step=None):
    """Run the chain T_{k-1} = G(T_k + eps_k), k = K..1, and return the masked texture tensor.

    T_K is fixed by ``seed``; the eps_k are drawn from the stream for
    ``step`` (None = the final/export stream). Differentiable in the
    generator weights.
    """
    h, w = mask.resolution
    f = state.model.factor
    if h % f or w % f:
        raise TexgenError(f"texture resolution must be a multiple of {f} for this generator")
    dtype = state.dtype
    t = torch.randn(1, 3, h, w, generator=_noise_generator(seed, "init"), dtype=dtype)
    g = _noise_generator(seed, "final" if step is None else f"step{step}")
    for k in range(cfg.steps, 0, -1):
        sigma = cfg.sigma_schedule[k - 1]
        eps = torch.randn(1, 3, h, w, generator=g, dtype=dtype)
        t = state.model(t + sigma * eps)
        if not bool(torch.isfinite(t).all()):
            raise TexgenError(f"non-finite generator activation at chain step k={k}")
    out = torch.sigmoid(t[0].permute(1, 2, 0))
    if base is None:
        base = torch.full((h, w, 3), 0.5, dtype=dtype)
    return blend_textures(base, out, mask)


def generate_texture(state, cfg, seed, mask, base=None):
    with torch.no_grad():
        tex = diffusion_generate(state, cfg, seed, mask, base)
    return AdvTexture(tex.double(), mask, seed)


# ---------------------------------------------------------------------------
# Shared objective and training loops


def reference_color(views):
    """Mean of the views' background reference colors."""
    return np.mean([v.c_r for v in views], axis=0)


def batch_loss(texture, views, detector, loss_cfg, mask, c_r=None):
    """Attack objective of ``texture`` over ``views``; returns a :class:`LossReport`.

    The adversarial term is averaged over views; ``c_r`` defaults to the
    mean reference color of these views.
    """
    tex = texture.texels if isinstance(texture, AdvTexture) else texture
    images = [v.render(tex) for v in views]
    det_dtype = detector.dtype if hasattr(detector, "dtype") else tex.dtype
    dets = detector.detect_batch([i.to(det_dtype) for i in images])
    parts = [adv_loss(d, v.gt, loss_cfg) for d, v in zip(dets, views)]
    l_iou = torch.stack([p[0] for p in parts]).mean().to(tex.dtype)
    l_obj = torch.stack([p[1] for p in parts]).mean().to(tex.dtype)
    l_adv = torch.stack([p[2] for p in parts]).mean().to(tex.dtype)
    if c_r is None:
        c_r = reference_color(views)
    return total_loss(l_adv, tv_loss(tex, mask), nps_loss(tex, mask, loss_cfg.palette),
                      cr_loss(tex, mask, c_r, loss_cfg.c_ru), loss_cfg, l_iou, l_obj)


def _check_detector(detector, mode):
    if not getattr(detector, "differentiable", False):
        raise DetectorError(f"{mode} training needs a differentiable detector; "
                            "use the toy detector or an adapter that exposes gradients")


def _batches(n, batch_size, seed, epoch):
    perm = torch.randperm(n, generator=_noise_generator(seed, f"perm{epoch}")).tolist()
    return [perm[s:s + batch_size] for s in range(0, n, batch_size)]


class LossLog:
    """Append-only CSV of per-step loss reports."""

    def __init__(self, path=None, resume=False, keep_steps=None):
        self.path = Path(path) if path else None
        self.rows = []
        if self.path and resume and keep_steps is not None and self.path.exists():
            # drop rows written after the checkpoint we resume from
            with open(self.path, newline="") as fh:
                rows = list(csv.reader(fh))
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerows(rows[:1] + [r for r in rows[1:] if int(r[0]) < keep_steps])
        elif self.path and not resume:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOSS_COLUMNS)

    def append(self, step, epoch, report):
        vals = report.as_floats()
        row = [step, epoch] + [vals[c] for c in LOSS_COLUMNS[2:]]
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([step, epoch] + [f"{x:.9g}" for x in row[2:]])

    def epoch_means(self):
        by = {}
        for row in self.rows:
            by.setdefault(row[1], []).append(row[-1])
        return {e: float(np.mean(v)) for e, v in sorted(by.items())}


def train_diffusion(state, mesh, scenes, detector, loss_cfg, epochs, *, mask, seed, batch_size=8,
                    base=None, checkpoint_dir=None, config_hash="", loss_log=None, max_steps=None):
    """Optimize the generator weights on the attack objective over ``scenes`` (TrainView list).

    Resumes from ``state.epoch`` / ``state.step``. A checkpoint is written
    at the end of each epoch when ``checkpoint_dir`` is set. Returns the
    state; per-step reports go to ``loss_log``.
    """
    _check_detector(detector, "diffusion")
    if not scenes:
        raise TexgenError("no training scenes")
    del mesh  # views carry their own shading plans
    loss_log = loss_log or LossLog()
    if base is None:
        base = torch.full((*mask.resolution, 3), 0.5)
    base = torch.as_tensor(base).to(state.dtype)
    for p in detector.model.parameters():
        p.requires_grad_(False)
    state.model.train()
    c_r = reference_color(scenes)
    checkpoints = []
    while state.epoch < epochs:
        batches = _batches(len(scenes), batch_size, seed, state.epoch)
        first = state.step - state.epoch * len(batches)
        for idx in batches[first:]:
            if max_steps is not None and state.step >= max_steps:
                return state
            tex = diffusion_generate(state, state.cfg, seed, mask, base, step=state.step)
            try:
                rep = batch_loss(tex, [scenes[i] for i in idx], detector, loss_cfg, mask, c_r)
            except CamoError as exc:
                raise type(exc)(f"{exc.args[0]} (step {state.step})") from exc
            state.optimizer.zero_grad()
            rep.total.backward()
            state.optimizer.step()
            loss_log.append(state.step, state.epoch, rep)
            state.step += 1
        state.epoch += 1
        # every random draw comes from a (seed, stream) generator, so this pins the streams
        state.rng_state = {"seed": seed, "next_step": state.step}
        if checkpoint_dir is not None:
            checkpoints.append(state.save(Path(checkpoint_dir) / f"epoch{state.epoch:03d}.pt", config_hash))
    state.model.eval()
    state.checkpoints = checkpoints
    return state


def train_gradient(texture, scenes, detector, loss_cfg, epochs, *, seed, v=DEFAULT_STEP_SIZE,
                   ascend=False, batch_size=8, loss_log=None, start_step=0):
    """Direct texel optimization: one gradient step per batch, same batches as the generator mode."""
    _check_detector(detector, "gradient")
    if not scenes:
        raise TexgenError("no training scenes")
    loss_log = loss_log or LossLog()
    for p in detector.model.parameters():
        p.requires_grad_(False)
    dtype = detector.dtype if hasattr(detector, "dtype") else texture.texels.dtype
    step = start_step
    c_r = reference_color(scenes)
    for epoch in range(epochs):
        for idx in _batches(len(scenes), batch_size, seed, epoch):
            tex = texture.texels.to(dtype).detach().requires_grad_(True)
            rep = batch_loss(tex, [scenes[i] for i in idx], detector, loss_cfg, texture.mask, c_r)
            (grad,) = torch.autograd.grad(rep.total, tex)
            texture = one_step_update(texture, grad.to(texture.texels.dtype), v, ascend)
            loss_log.append(step, epoch, rep)
            step += 1
    return texture
