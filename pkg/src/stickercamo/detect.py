"""Detector interface and the built-in toy single-class grid detector.

External detectors plug in through :class:`DetectorAdapter`; the toy detector
is small enough to train on synthetic renders in a few minutes on a CPU and is
differentiable end to end, which makes it usable as the attacked model.
"""

import io
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DetectorError, DetectorGateError
from .imageio import resize_bilinear
from .render import DEFAULT_FOV, NEAR_PLANE, camera_from_pose

log = logging.getLogger(__name__)

CONFIDENCE_FLOOR = 1e-3
TOY_FORMAT = "stickercamo-toy-grid-v1"
TOY_WIDTHS = (16, 32, 64, 96, 128)


@dataclass(frozen=True)
class Detection:
    box: tuple
    confidence: float
    class_id: int = 0

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise DetectorError(f"degenerate box {self.box}")
        if not 0.0 <= self.confidence <= 1.0:
            raise DetectorError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    box: tuple
    class_id: int = 0

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise DetectorError(f"invalid ground-truth box {self.box}")
        object.__setattr__(self, "box", tuple(float(v) for v in self.box))

    @property
    def width(self):
        return self.box[2] - self.box[0]


class DetectionSet:
    """Candidate boxes of one image, kept as tensors so losses can backpropagate."""

    def __init__(self, boxes, confidences, class_ids=None, differentiable=False):
        self.boxes = torch.as_tensor(boxes).reshape(-1, 4)
        self.confidences = torch.as_tensor(confidences).reshape(-1)
        if class_ids is None:
            class_ids = torch.zeros(len(self.confidences), dtype=torch.long)
        self.class_ids = torch.as_tensor(class_ids, dtype=torch.long).reshape(-1)
        self.differentiable = differentiable
        if not (len(self.boxes) == len(self.confidences) == len(self.class_ids)):
            raise DetectorError("boxes, confidences and class ids differ in length")

    def __len__(self):
        return len(self.confidences)

    @classmethod
    def from_detections(cls, dets, differentiable=False):
        if not dets:
            return cls(torch.zeros(0, 4), torch.zeros(0), differentiable=differentiable)
        return cls(torch.tensor([d.box for d in dets], dtype=torch.float64),
                   torch.tensor([d.confidence for d in dets], dtype=torch.float64),
                   [d.class_id for d in dets], differentiable)

    @property
    def detections(self):
        b = self.boxes.detach().cpu().double().numpy()
        c = self.confidences.detach().cpu().double().numpy()
        k = self.class_ids.cpu().numpy()
        return [Detection(tuple(b[i].tolist()), float(c[i]), int(k[i])) for i in range(len(self))]

    def max_confidence(self):
        return float(self.confidences.detach().max()) if len(self) else 0.0

    def of_class(self, class_id):
        keep = self.class_ids == class_id
        return DetectionSet(self.boxes[keep], self.confidences[keep], self.class_ids[keep],
                            self.differentiable)

    def detach(self):
        return DetectionSet(self.boxes.detach(), self.confidences.detach(), self.class_ids, False)

    def nms(self, iou_threshold=0.45):
        """Greedy non-maximum suppression (per class), highest confidence first."""
        from .losses import iou

        if len(self) == 0:
            return self.detach()
        conf = self.confidences.detach()
        order = torch.argsort(conf, descending=True, stable=True)
        boxes = self.boxes.detach()
        keep = []
        suppressed = torch.zeros(len(self), dtype=torch.bool)
        for i in order.tolist():
            if suppressed[i]:
                continue
            keep.append(i)
            same = self.class_ids == self.class_ids[i]
            suppressed |= same & (iou(boxes, boxes[i]) > iou_threshold)
        keep = torch.tensor(keep, dtype=torch.long)
        return DetectionSet(boxes[keep], conf[keep], self.class_ids[keep], False)


@runtime_checkable
class DetectorAdapter(Protocol):
    name: str
    input_resolution: tuple
    differentiable: bool

    def detect(self, image) -> DetectionSet:
        ...


_REGISTRY: Dict[str, Callable[..., DetectorAdapter]] = {}


def register_detector(name, factory):
    """Register ``factory(**options) -> DetectorAdapter`` under ``name``."""
    _REGISTRY[name] = factory


def build_detector(name, **options):
    if name not in _REGISTRY:
        raise DetectorError(f"unknown detector {name!r}; registered: {sorted(_REGISTRY)}")
    try:
        det = _REGISTRY[name](**options)
    except DetectorError:
        raise
    except Exception as exc:
        raise DetectorError(f"detector {name!r} failed to load: {exc}") from exc
    if not isinstance(det, DetectorAdapter):
        raise DetectorError(f"factory for {name!r} did not return a detector adapter")
    return det


def registered_detectors():
    return sorted(_REGISTRY)


# ---------------------------------------------------------------------------
# Toy detector


class _Block(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=2, padding=1)

    def forward(self, x):
        return F.silu(self.conv2(F.silu(self.conv1(x))))


class ToyGridDetector(nn.Module):
    """Five stride-2 conv blocks and a per-cell head.

    Each cell of the stride-32 grid predicts (objectness, tx, ty, tw, th); a
    416x416 input yields a 13x13 grid. SiLU activations keep the network
    smooth, which finite-difference gradient checks rely on.
    """

    stride = 32

    def __init__(self, widths=TOY_WIDTHS):
        super().__init__()
        chans = (3,) + tuple(widths)
        self.blocks = nn.Sequential(*[_Block(a, b) for a, b in zip(chans[:-1], chans[1:])])
        self.head1 = nn.Conv2d(chans[-1], chans[-1], 3, padding=1)
        self.head2 = nn.Conv2d(chans[-1], 5, 1)
        with torch.no_grad():
            self.head2.bias.zero_()
            self.head2.bias[0] = -4.6  # objectness prior ~ 0.01

    def forward(self, x):
        x = self.blocks(x * 2.0 - 1.0)
        return self.head2(F.silu(self.head1(x)))

    def decode(self, raw, image_size):
        """Raw head output (B, 5, gh, gw) to per-image boxes and confidences."""
        b, _, gh, gw = raw.shape
        h, w = image_size
        sy, sx = h / gh, w / gw
        ii, jj = torch.meshgrid(torch.arange(gh, dtype=raw.dtype), torch.arange(gw, dtype=raw.dtype),
                                indexing="ij")
        conf = torch.sigmoid(raw[:, 0])
        cx = (jj + 2 * torch.sigmoid(raw[:, 1]) - 0.5) * sx
        cy = (ii + 2 * torch.sigmoid(raw[:, 2]) - 0.5) * sy
        bw = 2 * sx * torch.exp(torch.clamp(raw[:, 3], -6, 4))
        bh = 2 * sy * torch.exp(torch.clamp(raw[:, 4], -6, 4))
        boxes = torch.stack([torch.clamp(cx - bw / 2, min=0), torch.clamp(cy - bh / 2, min=0),
                             torch.clamp(cx + bw / 2, max=w), torch.clamp(cy + bh / 2, max=h)], -1)
        return boxes.reshape(b, -1, 4), conf.reshape(b, -1)


class ToyDetector:
    """Adapter around :class:`ToyGridDetector`; returns all cells above the confidence floor."""

    name = "toy"
    differentiable = True

    def __init__(self, model=None, input_resolution=(128, 128), floor=CONFIDENCE_FLOOR):
        if input_resolution[0] % 32 or input_resolution[1] % 32:
            raise DetectorError("toy detector input size must be a multiple of 32")
        self.model = (model or ToyGridDetector()).eval()
        self.input_resolution = tuple(input_resolution)
        self.floor = floor

    @property
    def dtype(self):
        return next(self.model.parameters()).dtype

    def to(self, dtype):
        self.model.to(dtype)
        return self

    def _prepare(self, images):
        batch = []
        for img in images:
            t = torch.as_tensor(img)
            if t.ndim != 3 or t.shape[2] != 3:
                raise DetectorError(f"expected an HxWx3 image, got shape {tuple(t.shape)}")
            t = resize_bilinear(t.to(self.dtype), self.input_resolution)
            batch.append(t.permute(2, 0, 1))
        return torch.stack(batch)

    def detect_batch(self, images):
        images = list(images)
        if not images:
            return []
        sizes = [tuple(torch.as_tensor(i).shape[:2]) for i in images]
        raw = self.model(self._prepare(images))
        boxes, conf = self.model.decode(raw, self.input_resolution)
        out = []
        for k, (h, w) in enumerate(sizes):
            keep = conf[k] >= self.floor
            bx = boxes[k][keep]
            if (h, w) != self.input_resolution:
                scale = torch.tensor([w / self.input_resolution[1], h / self.input_resolution[0]] * 2,
                                     dtype=bx.dtype)
                bx = bx * scale
            out.append(DetectionSet(bx, conf[k][keep], differentiable=True))
        return out

    def detect(self, image):
        return self.detect_batch([image])[0]

    # persistence

    def save(self, path):
        buf = io.BytesIO()
        torch.save({"format": TOY_FORMAT, "input_resolution": self.input_resolution,
                    "widths": TOY_WIDTHS, "state": self.model.state_dict()}, buf)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path):
        try:
            ckpt = torch.load(path, map_location="cpu", weights_only=False)
        except FileNotFoundError:
            raise DetectorError(f"toy detector weights not found: {path}") from None
        if ckpt.get("format") != TOY_FORMAT:
            raise DetectorError(f"{path}: unsupported weight format {ckpt.get('format')!r}")
        model = ToyGridDetector(tuple(ckpt["widths"]))
        model.load_state_dict(ckpt["state"])
        return cls(model, tuple(ckpt["input_resolution"]))


def _toy_factory(weights=None, input_resolution=(128, 128)):
    if weights is None:
        raise DetectorError("toy detector needs a weights file (train one with toy_detector_train)")
    det = ToyDetector.load(weights)
    if tuple(input_resolution) != det.input_resolution:
        det.input_resolution = tuple(input_resolution)
    return det


register_detector("toy", _toy_factory)


def _targets(gts, grid, image_size, dtype, neighbors=True):
    """Objectness/box targets: the cell holding the box center plus its nearest
    horizontal and vertical neighbours are all positive."""
    gh, gw = grid
    h, w = image_size
    sy, sx = h / gh, w / gw
    obj = torch.zeros(len(gts), gh, gw, dtype=dtype)
    reg = torch.zeros(len(gts), 4, gh, gw, dtype=dtype)
    for k, gt in enumerate(gts):
        if gt is None:
            continue
        x1, y1, x2, y2 = gt.box
        gx, gy = (x1 + x2) / 2 / sx, (y1 + y2) / 2 / sy
        j, i = min(int(gx), gw - 1), min(int(gy), gh - 1)
        cells = [(i, j)]
        if neighbors:
            cells += [(i, j + (1 if gx - j >= 0.5 else -1)), (i + (1 if gy - i >= 0.5 else -1), j)]
        lw, lh = math.log((x2 - x1) / (2 * sx)), math.log((y2 - y1) / (2 * sy))
        for ci, cj in cells:
            if 0 <= ci < gh and 0 <= cj < gw:
                obj[k, ci, cj] = 1
                reg[k, :, ci, cj] = torch.tensor([(gx - cj + 0.5) / 2, (gy - ci + 0.5) / 2, lw, lh])
    return obj, reg


def _val_metrics(det, val):
    from .evaluate import detector_ap, max_confidences

    positives = [s[0] for s in val if s[1] is not None]
    negatives = [s[0] for s in val if s[1] is None]
    miss = float(np.mean(max_confidences(det, positives) < 0.5)) if positives else 0.0
    false_alarm = float(np.mean(max_confidences(det, negatives) >= 0.5)) if negatives else 0.0
    return detector_ap(det, val), max(miss, false_alarm)


def toy_detector_train(scenes, epochs, seed, input_resolution=(128, 128), batch_size=16, lr=1e-3,
                       val=None, gate=0.9, max_miss=0.02, stop_at_gate=False, log_every=0, neighbors=True):
    """Train a :class:`ToyDetector` on ``scenes`` = [(image HxWx3, GroundTruth or None), ...].

    Deterministic given ``seed`` and data order. With ``val``, the detector
    must reach AP@0.5 >= ``gate``, and both the fraction of validation targets
    it misses (max confidence < 0.5) and the fraction of empty validation
    scenes it fires on must be <= ``max_miss``, or :class:`DetectorGateError` is
    raised. ``stop_at_gate`` ends training at the first epoch that passes.
    Returns ``(detector, val_ap)`` (``val_ap`` is None without ``val``).
    """
    if stop_at_gate and val is None:
        raise DetectorError("stop_at_gate needs a validation set")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ToyGridDetector()
    gen = torch.Generator().manual_seed(seed)
    det = ToyDetector(model, input_resolution)
    images = det._prepare([s[0] for s in scenes]) if scenes else None
    gts = [s[1] for s in scenes]
    if scenes:
        scale_h = input_resolution[0] / scenes[0][0].shape[0]
        scale_w = input_resolution[1] / scenes[0][0].shape[1]
        gts = [None if g is None else
               GroundTruth((g.box[0] * scale_w, g.box[1] * scale_h, g.box[2] * scale_w, g.box[3] * scale_h))
               for g in gts]
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    metrics = None
    for epoch in range(epochs):
        model.train()
        perm = torch.randperm(len(scenes), generator=gen)
        total = 0.0
        for start in range(0, len(scenes), batch_size):
            idx = perm[start:start + batch_size]
            raw = model(images[idx])
            obj_t, reg_t = _targets([gts[i] for i in idx], raw.shape[2:], input_resolution, raw.dtype,
                                    neighbors)
            l_obj = F.binary_cross_entropy_with_logits(raw[:, 0], obj_t, reduction="sum")
            pos = obj_t[:, None].expand_as(reg_t) > 0
            pred = torch.cat([torch.sigmoid(raw[:, 1:3]), raw[:, 3:5]], 1)
            l_box = F.smooth_l1_loss(pred[pos], reg_t[pos], reduction="sum", beta=0.1)
            loss = (l_obj + 5.0 * l_box) / len(idx)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        model.eval()
        if log_every and (epoch + 1) % log_every == 0:
            log.info("toy detector epoch %d loss %.4f", epoch + 1, total / max(len(scenes), 1))
        if stop_at_gate:
            metrics = _val_metrics(det, val)
            log.info("toy detector epoch %d: AP@0.5 %.3f, error rate %.3f", epoch + 1, *metrics)
            if metrics[0] >= gate and metrics[1] <= max_miss:
                break
    model.eval()
    if val is None:
        return det, None
    val_ap, miss = metrics or _val_metrics(det, val)
    if val_ap < gate or miss > max_miss:
        raise DetectorGateError(
            f"toy detector reached AP@0.5 = {val_ap:.3f} (gate {gate}) and error rate {miss:.3f} "
            f"(limit {max_miss}) on validation; increase the number of epochs or training scenes")
    return det, val_ap


# ---------------------------------------------------------------------------
# Ground truth from geometry


def project_gt_box(mesh, pose, resolution, fov=DEFAULT_FOV, camera=None):
    """Tight box around the projected mesh vertices, clipped to the image."""
    h, w = resolution
    if camera is None:
        camera = camera_from_pose(pose, mesh.centroid, resolution, fov)
    xy, z = camera.project(mesh.vertices)
    front = z > NEAR_PLANE
    if not front.any():
        raise DetectorError("target not visible")
    xy = xy[front]
    x1, y1 = np.clip(xy.min(axis=0), [0, 0], [w, h])
    x2, y2 = np.clip(xy.max(axis=0), [0, 0], [w, h])
    if not (x1 < x2 and y1 < y2):
        raise DetectorError("target not visible")
    return GroundTruth((x1, y1, x2, y2))
