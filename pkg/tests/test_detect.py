import math

import numpy as np
import pytest
import torch

from conftest import random_detector
from stickercamo.assets import toy_car, unit_quad
from stickercamo.detect import (Detection, DetectionSet, GroundTruth, ToyDetector, ToyGridDetector,
                                _targets, build_detector, project_gt_box, register_detector,
                                registered_detectors, toy_detector_train)
from stickercamo.errors import DetectorError, DetectorGateError
from stickercamo.evaluate import detector_ap
from stickercamo.render import Environment, ScenePose, render_scene
from stickercamo.scenes import EnvironmentSampler, detection_scenes, synthetic_backgrounds

RANGES = {"elevation": (0, 50), "azimuth": (0, 360), "distance": (6, 14)}


def _car_image(pose=ScenePose(20, 45, 10), dtype=torch.float64, bg=0.5):
    car = toy_car(64)
    img, _, frags = render_scene(car, car.base_texture, pose, Environment(), torch.full((128, 128, 3), bg),
                                 (128, 128))
    return img.to(dtype), project_gt_box(car, pose, (128, 128), camera=frags.camera)


# --- value types


def test_detection_invariants():
    with pytest.raises(DetectorError):
        Detection((5, 5, 5, 6), 0.5)
    with pytest.raises(DetectorError):
        Detection((0, 0, 1, 1), 1.5)
    with pytest.raises(DetectorError):
        GroundTruth((3, 0, 1, 1))


def test_detection_set_roundtrip_and_nms():
    dets = [Detection((0, 0, 10, 10), 0.9), Detection((1, 1, 10, 10), 0.8), Detection((20, 20, 30, 30), 0.3)]
    ds = DetectionSet.from_detections(dets)
    assert len(ds) == 3 and ds.max_confidence() == 0.9
    assert ds.detections == dets
    kept = ds.nms(0.45)
    assert [d.confidence for d in kept.detections] == [0.9, 0.3]
    assert len(DetectionSet.from_detections([])) == 0
    assert DetectionSet.from_detections([]).max_confidence() == 0.0


# --- ground truth from geometry


def test_gt_box_of_facing_quad():
    res = (416, 416)
    gt = project_gt_box(unit_quad(), ScenePose(0, 0, 10), res)
    # pinhole: half-width in pixels = (W/2) * 0.5 / (10 * tan 30deg)
    half = (res[1] / 2) * 0.5 / (10 * math.tan(math.radians(30)))
    assert abs(gt.width / 2 - half) <= 1
    assert abs((gt.box[0] + gt.box[2]) / 2 - 208) <= 1


def test_gt_box_clipped_to_image():
    gt = project_gt_box(toy_car(16), ScenePose(0, 0, 1.5), (64, 64))
    x1, y1, x2, y2 = gt.box
    assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64


def test_gt_box_looking_away():
    from stickercamo.render import Camera

    cam = Camera(eye=(0, 0, 5), target=(0, 0, 10), resolution=(64, 64))
    with pytest.raises(DetectorError, match="target not visible"):
        project_gt_box(unit_quad(), None, (64, 64), camera=cam)


# --- untrained network plumbing


def test_confidences_and_boxes_valid(untrained_detector):
    img, _ = _car_image()
    ds = untrained_detector.detect(img)
    assert len(ds) > 0
    c = ds.confidences.detach()
    assert float(c.min()) >= untrained_detector.floor and float(c.max()) <= 1
    ds.detections  # validates every box


def test_detect_is_deterministic(untrained_detector):
    img, _ = _car_image()
    a, b = untrained_detector.detect(img), untrained_detector.detect(img)
    assert torch.equal(a.boxes, b.boxes) and torch.equal(a.confidences, b.confidences)


def test_grid_is_stride_32():
    raw = ToyGridDetector()(torch.zeros(1, 3, 416, 416))
    assert raw.shape == (1, 5, 13, 13)


def test_resized_input_boxes_scaled(untrained_detector):
    img, _ = _car_image()
    big = torch.nn.functional.interpolate(img.permute(2, 0, 1)[None], size=(256, 256), mode="bilinear",
                                          align_corners=False)[0].permute(1, 2, 0)
    ds = untrained_detector.detect(big)
    assert float(ds.boxes.detach().max()) <= 256


def test_input_gradient_matches_finite_differences(untrained_detector):
    img, gt = _car_image()
    x = img.clone().requires_grad_(True)
    f = lambda im: untrained_detector.detect(im).confidences.max()
    (g,) = torch.autograd.grad(f(x), x)
    x1, y1, x2, y2 = (int(v) for v in gt.box)
    assert float(g[y1:y2, x1:x2].abs().max()) > 0
    r = np.random.default_rng(0)
    h = 1e-4
    for _ in range(5):
        i, j, c = r.integers(y1, y2), r.integers(x1, x2), r.integers(3)
        xp, xm = img.clone(), img.clone()
        xp[i, j, c] += h
        xm[i, j, c] -= h
        fd = float((f(xp) - f(xm)).detach()) / (2 * h)
        an = float(g[i, j, c])
        assert abs(fd - an) <= 1e-2 * max(abs(an), 1e-9)


def test_save_load_roundtrip(tmp_path, untrained_detector):
    p = tmp_path / "toy.pt"
    untrained_detector.save(p)
    back = ToyDetector.load(p).to(torch.float64)
    img, _ = _car_image()
    assert torch.equal(back.detect(img).confidences, untrained_detector.detect(img).confidences)


def test_load_rejects_other_formats(tmp_path):
    p = tmp_path / "bad.pt"
    torch.save({"format": "other"}, p)
    with pytest.raises(DetectorError, match="unsupported"):
        ToyDetector.load(p)
    with pytest.raises(DetectorError, match="not found"):
        ToyDetector.load(tmp_path / "missing.pt")


def test_registry():
    assert "toy" in registered_detectors()
    with pytest.raises(DetectorError, match="unknown detector"):
        build_detector("yolo-v99")
    with pytest.raises(DetectorError, match="weights"):
        build_detector("toy")

    class Dummy:
        name, input_resolution, differentiable = "dummy", (64, 64), False

        def detect(self, image):
            return DetectionSet(torch.zeros(0, 4), torch.zeros(0))

    register_detector("dummy", lambda **kw: Dummy())
    assert build_detector("dummy").differentiable is False
    register_detector("broken", lambda **kw: object())
    with pytest.raises(DetectorError):
        build_detector("broken")


def test_input_size_must_fit_grid():
    with pytest.raises(DetectorError):
        ToyDetector(input_resolution=(100, 100))


# --- training targets


@pytest.mark.parametrize("box", [(10.0, 20.0, 50.0, 60.0), (70.5, 3.0, 127.0, 40.0), (0.0, 0.0, 128.0, 128.0)])
def test_targets_decode_back_to_box(box):
    obj, reg = _targets([GroundTruth(box), None], (4, 4), (128, 128), torch.float64)
    assert obj[1].sum() == 0
    cells = torch.nonzero(obj[0])
    assert 1 <= len(cells) <= 3
    model = ToyGridDetector().double()
    for i, j in cells.tolist():
        tx, ty, lw, lh = reg[0, :, i, j].tolist()
        assert 0 <= tx <= 1 and 0 <= ty <= 1  # reachable by 2*sigmoid - 0.5
        raw = torch.zeros(1, 5, 4, 4, dtype=torch.float64)
        logit = lambda p: math.log(p / (1 - p)) if 0 < p < 1 else (30.0 if p >= 1 else -30.0)
        raw[0, 1:, i, j] = torch.tensor([logit(tx), logit(ty), lw, lh])
        boxes, _ = model.decode(raw, (128, 128))
        b = boxes[0, i * 4 + j].tolist()
        np.testing.assert_allclose(b, box, atol=1e-6)


# --- training


def _tiny_scenes(n, seed):
    bgs = synthetic_backgrounds(("grass", "plain"), 2, seed=0)
    return detection_scenes(toy_car(32), n, RANGES, EnvironmentSampler(), bgs, seed=seed)


def test_training_is_deterministic():
    scenes = _tiny_scenes(24, 0)
    a, _ = toy_detector_train(scenes, 1, seed=3)
    b, _ = toy_detector_train(scenes, 1, seed=3)
    for pa, pb in zip(a.model.state_dict().values(), b.model.state_dict().values()):
        assert torch.equal(pa, pb)


def test_zero_epochs_is_untrained():
    val = _tiny_scenes(30, 5)
    det, ap = toy_detector_train(_tiny_scenes(8, 0), 0, seed=0, val=val, gate=0.0, max_miss=1.0)
    assert ap < 0.2


def test_gate_failure_points_to_more_training():
    with pytest.raises(DetectorGateError, match="increase the number of epochs"):
        toy_detector_train(_tiny_scenes(16, 0), 1, seed=0, val=_tiny_scenes(20, 5))


def test_stop_at_gate_needs_validation():
    with pytest.raises(DetectorError):
        toy_detector_train(_tiny_scenes(4, 0), 1, seed=0, stop_at_gate=True)


# --- trained detector (desk recipe)


@pytest.mark.slow
def test_trained_detector_passes_gate(trained_detector):
    det, ap = trained_detector
    assert ap >= 0.9


@pytest.mark.slow
def test_trained_detector_ignores_blank_gray(trained_detector):
    det, _ = trained_detector
    assert det.detect(torch.full((128, 128, 3), 0.5)).max_confidence() < 0.5


@pytest.mark.slow
def test_trained_detector_finds_car_at_ten_units(trained_detector):
    det, _ = trained_detector
    for az in (0, 90, 200):
        img, _ = _car_image(ScenePose(20, az, 10), torch.float32)
        assert det.detect(img).max_confidence() > 0.5


@pytest.mark.slow
def test_trained_detector_heldout_ap(trained_detector, desk_config):
    det, _ = trained_detector
    bgs = synthetic_backgrounds(desk_config.scenes, 4, seed=77)
    scenes = detection_scenes(toy_car(128), 100, RANGES, EnvironmentSampler(diffuse_range=(1, 15)), bgs,
                              seed=78, negatives=0.0)
    assert detector_ap(det, scenes) >= 0.9
