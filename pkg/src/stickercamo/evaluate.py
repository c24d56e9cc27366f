"""Evaluation: AP@0.5, attack success rate, robustness sweeps and concealment metrics."""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .detect import GroundTruth, project_gt_box
from .errors import EvalError
from .losses import background_mean_color, iou
from .render import Environment, ScenePose, fit_background, render_scene

log = logging.getLogger(__name__)

OCCLUSION_CATEGORIES = {
    "none": (0.0,),
    "small": (0.1, 0.2, 0.3),
    "middle": (0.4, 0.5, 0.6),
    "large": (0.7, 0.8, 0.9),
}
REFLECTANCES = (1.0, 3.0, 5.0, 10.0, 15.0)
PLAIN_GRAY = 0.5

# Numbers reported for the full-scale CARLA experiments; kept only as labeled
# reference columns next to desk-scale results.
FULL_SCALE_REFERENCE = {
    "label": "published full-scale reference - not reproduced at desk scale",
    "ap50_victims": {  # method -> (YOLOv3, YOLOv5, FRCNN, drop)
        "RAW": (0.898, 0.979, 0.839, 0.000), "Noise": (0.672, 0.781, 0.622, 0.214),
        "CAMOU": (0.660, 0.654, 0.581, 0.274), "ER": (0.743, 0.804, 0.734, 0.145),
        "DAS": (0.803, 0.916, 0.833, 0.054), "FCA": (0.265, 0.563, 0.545, 0.448),
        "camo(v3)": (0.212, 0.343, 0.487, 0.558), "camo(v5)": (0.159, 0.088, 0.319, 0.716),
        "camo(FR)": (0.543, 0.513, 0.090, 0.523),
    },
    "ap50_transfer": {  # method -> (SSD, YOLOv7, MkRCNN, CaRCNN, DETR, RT-DETR)
        "RAW": (0.846, 0.979, 0.961, 0.988, 0.969, 0.798),
        "Noise": (0.716, 0.874, 0.917, 0.968, 0.719, 0.426),
        "CAMOU": (0.447, 0.831, 0.849, 0.967, 0.854, 0.251),
        "ER": (0.503, 0.896, 0.899, 0.978, 0.866, 0.309),
        "DAS": (0.618, 0.763, 0.633, 0.885, 0.745, 0.672),
        "FCA": (0.205, 0.259, 0.597, 0.872, 0.389, 0.257),
        "camo(v3)": (0.197, 0.358, 0.476, 0.756, 0.138, 0.081),
        "camo(v5)": (0.179, 0.112, 0.406, 0.506, 0.286, 0.053),
        "camo(FR)": (0.117, 0.481, 0.616, 0.847, 0.400, 0.200),
    },
    "occlusion_asr": {  # (distance, category) -> (RAW, camo(v5))
        (5, "none"): (1.67, 100), (10, "none"): (0.00, 100), (15, "none"): (0.00, 100),
        (20, "none"): (0.00, 98.33),
        (5, "small"): (18.06, 100), (10, "small"): (3.05, 100), (15, "small"): (4.17, 100),
        (20, "small"): (7.23, 99.45),
        (5, "middle"): (44.45, 100), (10, "middle"): (30.39, 100), (15, "middle"): (39.67, 100),
        (20, "middle"): (56.67, 100),
        (5, "large"): (86.12, 100), (10, "large"): (82.23, 100), (15, "large"): (84.34, 100),
        (20, "large"): (89.37, 100),
    },
    "reflectance_asr": {  # diffuse_color -> (RAW, camo(v5))
        1.0: (1.67, 97.91), 3.0: (1.67, 97.71), 5.0: (1.25, 97.08), 10.0: (0.00, 96.25),
        15.0: (0.83, 96.87),
    },
    "concealment_asr": {  # mode -> (Desert, Grass, Highway)
        "None": (0.50, 0.35, 0.77), "Camou-raw": (91.08, 92.59, 87.86),
        "Camou-color": (83.56, 87.27, 84.89),
    },
    "loss_ablation_ap50": {  # (YOLOv3, YOLOv5, FRCNN, DETR)
        "L_attack": (0.286, 0.226, 0.442, 0.284), "L_attack+L_tv": (0.626, 0.534, 0.612, 0.780),
        "L_attack+L_nps": (0.506, 0.281, 0.468, 0.416),
        "L_attack+L_tv+L_nps": (0.159, 0.088, 0.319, 0.286),
    },
    "mode_ablation_ap50": {
        "Gradient-Local": (0.676, 0.565, 0.681, 0.785), "Gradient-Global": (0.527, 0.493, 0.605, 0.664),
        "Diffuse-Local": (0.481, 0.415, 0.536, 0.436), "Diffuse-Global": (0.159, 0.088, 0.319, 0.286),
    },
    "pose_sweep_images": 4320,
}


@dataclass
class SweepGrid:
    distances: list
    pitches: list
    azimuth_step: float
    occlusion_fractions: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5,
                                                                0.6, 0.7, 0.8, 0.9])
    reflectances: list = field(default_factory=lambda: list(REFLECTANCES))
    azimuth_offset: float = 0.0

    def __post_init__(self):
        if not self.distances or not self.pitches:
            raise EvalError("sweep grid needs distances and pitches")
        if self.azimuth_step <= 0 or abs(360.0 / self.azimuth_step - round(360.0 / self.azimuth_step)) > 1e-9:
            raise EvalError("azimuth_step must divide 360")
        if any(not 0 <= f < 1 for f in self.occlusion_fractions):
            raise EvalError("occlusion fractions must lie in [0, 1)")

    @property
    def azimuths(self):
        n = int(round(360.0 / self.azimuth_step))
        return [(self.azimuth_offset + k * self.azimuth_step) % 360.0 for k in range(n)]

    def poses(self):
        return [ScenePose(p, a, d) for d in self.distances for p in self.pitches for a in self.azimuths]

    def __len__(self):
        return len(self.distances) * len(self.pitches) * len(self.azimuths)


GRID_PRESETS = {
    # pose sweep: 6 distances x 6 pitches x 120 azimuths = 4320 images
    "full": dict(distances=[5, 10, 20, 30, 40, 50], pitches=[0, 10, 20, 30, 40, 50], azimuth_step=3),
    "full-occlusion": dict(distances=[5, 10, 15, 20], pitches=[15, 30, 45, 60], azimuth_step=12),
    "desk": dict(distances=[7, 12], pitches=[10, 30], azimuth_step=45),
    "desk-occlusion": dict(distances=[7, 10, 13], pitches=[15, 30, 45], azimuth_step=45),
}


def grid_preset(name):
    if name not in GRID_PRESETS:
        raise EvalError(f"unknown grid preset {name!r}; choose from {sorted(GRID_PRESETS)}")
    return SweepGrid(**GRID_PRESETS[name])


class EvalReport:
    """Rows of (sweep, metric, cell, value, count); cells are tuples of (key, value) pairs."""

    columns = ("sweep", "metric", "cell", "value", "count")

    def __init__(self, rows=None, meta=None):
        self.rows = list(rows or [])
        self.meta = dict(meta or {})

    def add(self, sweep, metric, cell, value, count):
        if metric == "asr" and not 0.0 <= value <= 100.0:
            raise EvalError(f"rate {value} outside [0, 100]")
        self.rows.append({"sweep": sweep, "metric": metric, "cell": tuple(cell),
                          "value": float(value), "count": int(count)})

    def extend(self, other):
        self.rows.extend(other.rows)
        self.meta.update(other.meta)
        return self

    def select(self, sweep=None, metric=None, **cell):
        out = []
        for r in self.rows:
            if sweep is not None and r["sweep"] != sweep:
                continue
            if metric is not None and r["metric"] != metric:
                continue
            cd = dict(r["cell"])
            if all(cd.get(k) == v for k, v in cell.items()) and set(cell) <= set(cd):
                out.append(r)
        return out

    def value(self, sweep, metric, **cell):
        rows = [r for r in self.select(sweep, metric, **cell) if set(dict(r["cell"])) == set(cell)]
        if len(rows) != 1:
            raise EvalError(f"expected one row for {sweep}/{metric}/{cell}, found {len(rows)}")
        return rows[0]["value"]

    @staticmethod
    def _cell_str(cell):
        return ";".join(f"{k}={v}" for k, v in cell)

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([r["sweep"], r["metric"], self._cell_str(r["cell"]),
                            f"{r['value']:.6f}", r["count"]])
        return path

    def write_summary(self, path):
        agg = [r for r in self.rows if not r["cell"] or r["cell"][0][0] in ("all", "scene", "diffuse_color",
                                                                           "mode", "category")]
        data = {"meta": self.meta,
                "rows": [dict(r, cell=self._cell_str(r["cell"])) for r in agg]}
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=str))
        return path

    @classmethod
    def read_csv(cls, path):
        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                cell = tuple(tuple(kv.split("=", 1)) for kv in r["cell"].split(";") if kv)
                rows.append({"sweep": r["sweep"], "metric": r["metric"], "cell": cell,
                             "value": float(r["value"]), "count": int(r["count"])})
        return cls(rows)


# ---------------------------------------------------------------------------
# Detection metrics


def _gt_list(g):
    if g is None:
        return []
    if isinstance(g, GroundTruth):
        return [g]
    return list(g)


def ap50(predictions, gts, iou_threshold=0.5):
    """Average precision at IoU 0.5 with all-point interpolation.

    ``predictions[i]`` is a DetectionSet for image i, ``gts[i]`` its
    GroundTruth (or a list of them). Detections are matched in descending
    confidence order; a detection is a true positive iff its best-overlapping
    ground truth has IoU >= threshold and is not already matched.
    """
    if len(predictions) != len(gts):
        raise EvalError("predictions and ground truths must be paired")
    gt_lists = [_gt_list(g) for g in gts]
    n_gt = sum(len(g) for g in gt_lists)
    if n_gt == 0:
        raise EvalError("no ground-truth boxes")
    entries = []
    for img, dets in enumerate(predictions):
        conf = dets.confidences.detach().double().numpy()
        boxes = dets.boxes.detach().double()
        for k in range(len(dets)):
            entries.append((-conf[k], img, k, boxes[k]))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    matched = [np.zeros(len(g), dtype=bool) for g in gt_lists]
    tp = np.zeros(len(entries))
    for rank, (_, img, _, box) in enumerate(entries):
        g = gt_lists[img]
        if not g:
            continue
        ious = iou(torch.tensor([x.box for x in g], dtype=torch.float64), box).numpy()
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold and not matched[img][best]:
            matched[img][best] = True
            tp[rank] = 1
    if not entries:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(entries) + 1)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[:-1]))


def _detect_all(detector, images, chunk=32):
    out = []
    with torch.no_grad():
        for s in range(0, len(images), chunk):
            part = images[s:s + chunk]
            if hasattr(detector, "detect_batch"):
                out.extend(d.detach() for d in detector.detect_batch(part))
            else:
                out.extend(detector.detect(i).detach() for i in part)
    return out


def detector_ap(detector, scenes, nms_iou=0.45):
    """AP@0.5 of ``detector`` on [(image, GroundTruth), ...] after per-image NMS."""
    dets = _detect_all(detector, [s[0] for s in scenes])
    return ap50([d.nms(nms_iou) for d in dets], [s[1] for s in scenes])


def max_confidences(detector, images):
    return np.array([d.max_confidence() for d in _detect_all(detector, list(images))])


def asr_from_confidences(max_conf, conf_threshold=0.5):
    max_conf = np.asarray(max_conf, dtype=np.float64)
    if max_conf.size == 0:
        raise EvalError("no images to evaluate")
    return 100.0 * float(np.mean(max_conf < conf_threshold))


def asr(images, detector, conf_threshold=0.5):
    """Percent of images where every candidate box scores below ``conf_threshold``."""
    images = list(images)
    if not images:
        raise EvalError("no images to evaluate")
    return asr_from_confidences(max_confidences(detector, images), conf_threshold)


# ---------------------------------------------------------------------------
# Sweeps


def _plain(resolution, value=PLAIN_GRAY):
    return torch.full((*resolution, 3), float(value))


def render_views(mesh, texture, poses, envs, backgrounds, resolution):
    """Composite images and ground-truth boxes for lists of poses/envs/backgrounds."""
    images, gts = [], []
    texture = torch.as_tensor(texture).detach()
    with torch.no_grad():
        for pose, env, bg in zip(poses, envs, backgrounds):
            img, _, frags = render_scene(mesh, texture, pose, env, fit_background(bg, resolution),
                                         resolution)
            images.append(img)
            gts.append(project_gt_box(mesh, pose, resolution, camera=frags.camera))
    return images, gts


def _cycle(items, n):
    items = list(items)
    return [items[i % len(items)] for i in range(n)]


def pose_sweep(mesh, texture, env, grid, detector, background=None, resolution=(128, 128),
               conf_threshold=0.5):
    """ASR per distance, per pitch, per 45-degree azimuth bin and per raw azimuth."""
    poses = grid.poses()
    bg = _plain(resolution) if background is None else background
    images, _ = render_views(mesh, texture, poses, [env] * len(poses), [bg] * len(poses), resolution)
    conf = max_confidences(detector, images)
    succ = conf < conf_threshold
    rep = EvalReport(meta={"sweep": "pose", "images": len(images)})
    d = np.array([p.distance for p in poses])
    e = np.array([p.elevation for p in poses])
    a = np.array([p.azimuth for p in poses])
    rep.add("pose", "asr", (("all", "all"),), 100 * succ.mean(), len(succ))
    for dist in grid.distances:
        sel = d == dist
        rep.add("pose", "asr", (("distance", dist),), 100 * succ[sel].mean(), sel.sum())
    for pitch in grid.pitches:
        sel = e == pitch
        rep.add("pose", "asr", (("pitch", pitch),), 100 * succ[sel].mean(), sel.sum())
    bins = np.floor(a / 45.0).astype(int)
    for b in sorted(set(bins.tolist())):
        sel = bins == b
        rep.add("pose", "asr", (("azimuth_bin", f"{45 * b}-{45 * (b + 1)}"),), 100 * succ[sel].mean(),
                sel.sum())
    for az in grid.azimuths:
        sel = np.isclose(a, az)
        rep.add("pose", "asr", (("azimuth", round(az, 6)),), 100 * succ[sel].mean(), sel.sum())
    return rep


def _box_columns(box, width):
    x1, _, x2, _ = box
    return max(int(np.floor(x1)), 0), min(int(np.ceil(x2)), width)


def occlude(image, gt, fraction, fill=None):
    """Paint the leftmost ``fraction`` of the ground-truth box columns with ``fill``.

    ``fill`` defaults to the mean color of the ring around the box.
    """
    if not 0.0 <= fraction < 1.0:
        raise EvalError("occlusion fraction must lie in [0, 1)")
    if fraction == 0:
        return image
    img = torch.as_tensor(image)
    h, w = img.shape[:2]
    c0, c1 = _box_columns(gt.box, w)
    r0, r1 = max(int(np.floor(gt.box[1])), 0), min(int(np.ceil(gt.box[3])), h)
    n = int(round(fraction * (c1 - c0)))
    if fill is None:
        fill = background_mean_color(img, gt.box)
    out = img.clone()
    out[r0:r1, c0:c0 + n] = torch.as_tensor(np.asarray(fill), dtype=img.dtype)
    return out


def occlusion_sweep(mesh, texture, env, grid, detector, backgrounds=None, resolution=(128, 128),
                    conf_threshold=0.5):
    """ASR per (distance, occlusion category) and per single fraction."""
    poses = grid.poses()
    bgs = _cycle(backgrounds, len(poses)) if backgrounds else [_plain(resolution)] * len(poses)
    images, gts = render_views(mesh, texture, poses, [env] * len(poses), bgs, resolution)
    dist = np.array([p.distance for p in poses])
    rep = EvalReport(meta={"sweep": "occlusion", "images": len(images)})
    per_fraction = {}
    for frac in sorted(set([0.0] + list(grid.occlusion_fractions))):
        occ = [occlude(i, g, frac) for i, g in zip(images, gts)]
        per_fraction[frac] = max_confidences(detector, occ) < conf_threshold
        rep.add("occlusion", "asr", (("fraction", frac),), 100 * per_fraction[frac].mean(), len(occ))
    for cat, fracs in OCCLUSION_CATEGORIES.items():
        fracs = [f for f in fracs if f in per_fraction]
        if not fracs:
            continue
        allsucc = np.concatenate([per_fraction[f] for f in fracs])
        rep.add("occlusion", "asr", (("category", cat),), 100 * allsucc.mean(), len(allsucc))
        for dv in grid.distances:
            s = np.concatenate([per_fraction[f][dist == dv] for f in fracs])
            rep.add("occlusion", "asr", (("distance", dv), ("category", cat)), 100 * s.mean(), len(s))
    return rep


def reflectance_sweep(mesh, texture, backgrounds, reflectances, detector, grid=None, env=None,
                      resolution=(128, 128), conf_threshold=0.5):
    """ASR of the occlusion-experiment grid (unoccluded) for each diffuse coefficient."""
    if any(r <= 0 for r in reflectances):
        raise EvalError("reflectances must be positive")
    grid = grid or grid_preset("desk-occlusion")
    env = env or Environment()
    poses = grid.poses()
    bgs = _cycle(backgrounds, len(poses)) if backgrounds else [_plain(resolution)] * len(poses)
    rep = EvalReport(meta={"sweep": "reflectance", "images_per_value": len(poses)})
    for r in reflectances:
        e = env.with_(diffuse_color=r)
        images, _ = render_views(mesh, texture, poses, [e] * len(poses), bgs, resolution)
        conf = max_confidences(detector, images)
        rep.add("reflectance", "asr", (("diffuse_color", float(r)),),
                asr_from_confidences(conf, conf_threshold), len(images))
    return rep


# ---------------------------------------------------------------------------
# Concealment metrics


def _np_image(x):
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def csim(image_a, image_b, bins=32):
    """Color dissimilarity: per-channel Bhattacharyya distance sqrt(1 - BC) of
    L1-normalized ``bins``-bin histograms over [0, 1], averaged over channels."""
    a, b = _np_image(image_a), _np_image(image_b)
    if a.shape != b.shape:
        raise EvalError("csim needs images of equal shape")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    dists = []
    for ch in range(a.shape[2]):
        ha, _ = np.histogram(np.clip(a[:, :, ch], 0, 1), bins=bins, range=(0.0, 1.0))
        hb, _ = np.histogram(np.clip(b[:, :, ch], 0, 1), bins=bins, range=(0.0, 1.0))
        pa, pb = ha / ha.sum(), hb / hb.sum()
        bc = float(np.sum(np.sqrt(pa * pb)))
        dists.append(np.sqrt(max(0.0, 1.0 - bc)))
    return float(np.mean(dists))


def luminance(image):
    x = _np_image(image)
    if x.ndim == 2:
        return x
    return x[:, :, :3] @ np.array([0.299, 0.587, 0.114])


def ssim(image_a, image_b, data_range=1.0, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM of the luminance images with an 11x11 Gaussian window (sigma 1.5).

    Statistics use population (biased) moments; the mean is taken over window
    centers at least 5 pixels from the border, so both sides must be >= 11.
    """
    a, b = luminance(image_a), luminance(image_b)
    if a.shape != b.shape:
        raise EvalError("ssim needs images of equal shape")
    if min(a.shape) < 11:
        raise EvalError("ssim needs images of at least 11x11 pixels")
    filt = lambda x: gaussian_filter(x, sigma, mode="reflect", truncate=3.5)
    mu_a, mu_b = filt(a), filt(b)
    va = filt(a * a) - mu_a ** 2
    vb = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
    return float(s[5:-5, 5:-5].mean())


def _crop_box(gt, shape, min_size=16):
    h, w = shape
    x1, y1, x2, y2 = gt.box
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    bw, bh = max(x2 - x1, min_size), max(y2 - y1, min_size)
    c0 = int(np.clip(np.floor(cx - bw / 2), 0, w - min_size))
    r0 = int(np.clip(np.floor(cy - bh / 2), 0, h - min_size))
    return r0, min(int(np.ceil(r0 + bh)), h), c0, min(int(np.ceil(c0 + bw)), w)


def target_background_similarity(image, background, gt):
    """(csim, ssim) between the target's box crop and the same crop of the bare background."""
    img, bg = _np_image(image), _np_image(background)
    r0, r1, c0, c1 = _crop_box(gt, img.shape[:2])
    a, b = img[r0:r1, c0:c1], bg[r0:r1, c0:c1]
    return csim(a, b), ssim(a, b)


def concealment_eval(mesh, textures, env, scenes_by_label, detector, distances=(5, 10, 20),
                     pitches=(10, 30), azimuth_step=90, resolution=(128, 128), conf_threshold=0.5):
    """CSIM/SSIM between target and background plus ASR, per scene label and texture.

    ``textures`` maps a mode name (e.g. "camou-raw", "camou-color") to a texture;
    ``scenes_by_label`` maps a scene label to a list of background images.
    """
    grid = SweepGrid(list(distances), list(pitches), azimuth_step)
    poses = grid.poses()
    rep = EvalReport(meta={"sweep": "concealment"})
    for label in sorted(scenes_by_label):
        bgs = [fit_background(b, resolution) for b in _cycle(scenes_by_label[label], len(poses))]
        for mode in sorted(textures):
            images, gts = render_views(mesh, textures[mode], poses, [env] * len(poses), bgs, resolution)
            sims = np.array([target_background_similarity(i, b, g) for i, b, g in zip(images, bgs, gts)])
            conf = max_confidences(detector, images)
            cell = (("scene", label), ("mode", mode))
            rep.add("concealment", "csim", cell, sims[:, 0].mean(), len(images))
            rep.add("concealment", "ssim", cell, sims[:, 1].mean(), len(images))
            rep.add("concealment", "asr", cell, asr_from_confidences(conf, conf_threshold), len(images))
            for dv in grid.distances:
                sel = np.array([p.distance == dv for p in poses])
                c = cell + (("distance", dv),)
                rep.add("concealment", "csim", c, sims[sel, 0].mean(), int(sel.sum()))
                rep.add("concealment", "ssim", c, sims[sel, 1].mean(), int(sel.sum()))
    return rep
