"""Attack objective: adversarial, smoothness, printability and concealment terms.

All terms are torch functions of the texture (or of detector outputs) so they
compose into one differentiable scalar.
"""

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np
import torch

from .assets import load_palette
from .errors import LossError

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    alpha: float = 0.05
    beta: float = 1.0
    gamma: float = 1.0
    mu: float = 2.5
    tau: float = 2.0
    c_ru: float = 0.15
    palette: np.ndarray = field(default_factory=load_palette, repr=False)

    def __post_init__(self):
        self.palette = np.asarray(self.palette, dtype=np.float64).reshape(-1, 3)
        for name in ("alpha", "beta", "gamma", "mu", "tau"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise LossError(f"loss weight {name} must be finite and >= 0")
        if len(self.palette) == 0:
            raise LossError("palette must not be empty")
        if not 0 < self.c_ru < 0.5:
            raise LossError("c_ru must lie in (0, 0.5)")


@dataclass
class LossReport:
    l_iou: torch.Tensor
    l_obj: torch.Tensor
    l_adv: torch.Tensor
    l_tv: torch.Tensor
    l_nps: torch.Tensor
    l_cr: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def _t(x, dtype=None):
    t = torch.as_tensor(x, dtype=torch.float64) if isinstance(x, (int, float)) else torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.double()
    return t if dtype is None else t.to(dtype)


def iou(box_a, box_b):
    """Intersection over union of (x1, y1, x2, y2) boxes; broadcasts over leading dims."""
    a, b = _t(box_a), _t(box_b)
    b = b.to(a.dtype)
    iw = torch.clamp(torch.minimum(a[..., 2], b[..., 2]) - torch.maximum(a[..., 0], b[..., 0]), min=0)
    ih = torch.clamp(torch.minimum(a[..., 3], b[..., 3]) - torch.maximum(a[..., 1], b[..., 1]), min=0)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    return torch.where(union > 0, inter / torch.where(union > 0, union, 1), torch.zeros_like(union))


def adv_loss(dets, gt, cfg):
    """(max IOU with the ground truth, max confidence, alpha*iou + beta*obj).

    An empty candidate set gives zeros.
    """
    conf = dets.confidences
    if len(dets) == 0:
        z = torch.zeros((), dtype=conf.dtype)
        return z, z, z
    l_iou = iou(dets.boxes, torch.as_tensor(gt.box, dtype=dets.boxes.dtype)).max()
    l_obj = conf.max()
    return l_iou, l_obj, cfg.alpha * l_iou + cfg.beta * l_obj


def _mask_tensor(mask, dtype):
    m = mask.mask if hasattr(mask, "mask") else np.asarray(mask)
    mt = torch.as_tensor(m, dtype=dtype)
    nnz = float(mt.sum())
    if nnz == 0:
        raise LossError("mask selects no pixels")
    return mt, nnz


def _texels(texture):
    return _t(texture.texels if hasattr(texture, "texels") else texture)


def tv_loss(texture, mask):
    """Masked anisotropic total variation divided by the masked pixel count.

    Only neighbour pairs with both pixels inside the mask contribute.
    """
    t = _texels(texture)
    if t.ndim == 2:
        t = t[:, :, None]
    m, nnz = _mask_tensor(mask, t.dtype)
    dv = (t[1:, :] - t[:-1, :]).abs().sum(-1) * (m[1:, :] * m[:-1, :])
    dh = (t[:, 1:] - t[:, :-1]).abs().sum(-1) * (m[:, 1:] * m[:, :-1])
    return (dv.sum() + dh.sum()) / nnz


def nps_loss(texture, mask, palette):
    """Mean over masked pixels of the Euclidean distance to the nearest palette color."""
    t = _texels(texture)
    m, nnz = _mask_tensor(mask, t.dtype)
    pal = _t(palette, t.dtype).reshape(-1, 3)
    sel = t[m > 0]
    if len(pal) == 0:
        raise LossError("palette must not be empty")
    dist = torch.linalg.vector_norm(sel[:, None, :] - pal[None, :, :], dim=-1)
    return dist.min(dim=1).values.sum() / nnz


def _box_pixel_mask(shape, box):
    """Pixels whose centers satisfy x1 <= cx < x2 and y1 <= cy < y2."""
    h, w = shape
    cx = np.arange(w) + 0.5
    cy = np.arange(h) + 0.5
    x1, y1, x2, y2 = box
    return ((cy >= y1) & (cy < y2))[:, None] & ((cx >= x1) & (cx < x2))[None, :]


def ring_region(shape, box, dilation=0.5):
    """Pixels inside ``box`` grown by ``dilation`` of its size per side, minus the box."""
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    outer = (x1 - dilation * w, y1 - dilation * h, x2 + dilation * w, y2 + dilation * h)
    return _box_pixel_mask(shape, outer) & ~_box_pixel_mask(shape, box)


def background_mean_color(background, target_box=None):
    """Per-channel mean of the background around the target (the reference color c_r).

    Samples the ring between the target box and the box dilated by 50% per
    side; the whole image is used when no box is given or the ring is empty.
    """
    bg = background.detach().cpu().numpy() if isinstance(background, torch.Tensor) else np.asarray(background)
    bg = bg.astype(np.float64)
    if target_box is not None:
        region = ring_region(bg.shape[:2], tuple(float(v) for v in target_box))
        if region.any():
            return bg[region].mean(axis=0)
        log.warning("empty background ring around the target; using the whole image")
    return bg.reshape(-1, bg.shape[-1]).mean(axis=0)


def cr_loss(texture, mask, c_r, c_ru):
    """Concealment term: sum of |t - u_l| + |t - u_h| over masked texels and channels,
    divided by the masked pixel count, with [u_l, u_h] = clamp(c_r -/+ c_ru, 0, 1).
    """
    t = _texels(texture)
    m, nnz = _mask_tensor(mask, t.dtype)
    c_r = _t(c_r, t.dtype)
    u_l = torch.clamp(c_r - c_ru, 0.0, 1.0)
    u_h = torch.clamp(c_r + c_ru, 0.0, 1.0)
    sel = t[m > 0]
    return ((sel - u_l).abs() + (sel - u_h).abs()).sum() / nnz


def total_loss(l_adv, l_tv, l_nps, l_cr, cfg, l_iou=None, l_obj=None):
    """Weighted sum l_adv + gamma*l_tv + mu*l_nps + tau*l_cr packed into a :class:`LossReport`."""
    parts = {"l_adv": l_adv, "l_tv": l_tv, "l_nps": l_nps, "l_cr": l_cr}
    parts = {k: _t(v) for k, v in parts.items()}
    for name, v in parts.items():
        if not bool(torch.isfinite(v).all()):
            raise LossError(f"non-finite loss term {name}")
    total = parts["l_adv"] + cfg.gamma * parts["l_tv"] + cfg.mu * parts["l_nps"] + cfg.tau * parts["l_cr"]
    zero = torch.zeros((), dtype=total.dtype)
    return LossReport(_t(l_iou) if l_iou is not None else zero,
                      _t(l_obj) if l_obj is not None else zero,
                      parts["l_adv"], parts["l_tv"], parts["l_nps"], parts["l_cr"], total)
