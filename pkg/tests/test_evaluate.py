import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from conftest import ConstantDetector
from oracles import ap_pr_table
from stickercamo.assets import toy_car
from stickercamo.detect import DetectionSet, GroundTruth
from stickercamo.errors import EvalError
from stickercamo.evaluate import (FULL_SCALE_REFERENCE, EvalReport, SweepGrid, ap50, asr, asr_from_confidences,
                                  concealment_eval, csim, grid_preset, luminance, occlude, occlusion_sweep,
                                  pose_sweep, reflectance_sweep, ssim)
from stickercamo.render import Environment


def _ds(entries):
    if not entries:
        return DetectionSet(torch.zeros(0, 4), torch.zeros(0))
    return DetectionSet(torch.tensor([e[1] for e in entries], dtype=torch.float64),
                        torch.tensor([e[0] for e in entries], dtype=torch.float64))


# --- AP


def test_ap_perfect():
    gts = [GroundTruth((0, 0, 10, 10)), GroundTruth((5, 5, 20, 20))]
    preds = [_ds([(1.0, g.box)]) for g in gts]
    assert ap50(preds, gts) == 1.0


def test_ap_no_detections():
    assert ap50([_ds([])], [GroundTruth((0, 0, 1, 1))]) == 0.0


def test_ap_hand_built_pr_table():
    gts = [GroundTruth((0, 0, 10, 10)), GroundTruth((0, 0, 10, 10)), GroundTruth((0, 0, 10, 10))]
    preds = [_ds([(0.9, (0, 0, 10, 10))]), _ds([(0.8, (50, 50, 60, 60))]), _ds([(0.7, (0, 0, 10, 10))])]
    # ranks: TP (P=1, R=1/3), FP (P=1/2, R=1/3), TP (P=2/3, R=2/3)
    # all-point AP = 1/3 * 1 + 1/3 * 2/3 = 5/9
    assert abs(ap50(preds, gts) - 5 / 9) < 1e-15


def test_ap_duplicate_is_false_positive():
    gts = [GroundTruth((0, 0, 10, 10))]
    preds = [_ds([(0.9, (0, 0, 10, 10)), (0.8, (0, 0, 10, 10))])]
    assert ap50(preds, gts) == 1.0
    preds = [_ds([(0.9, (40, 40, 50, 50)), (0.8, (0, 0, 10, 10))])]
    assert ap50(preds, gts) == 0.5


def test_ap_errors():
    with pytest.raises(EvalError):
        ap50([_ds([])], [None])
    with pytest.raises(EvalError):
        ap50([_ds([])], [])


box_st = st.tuples(st.integers(0, 8), st.integers(0, 8), st.integers(2, 8), st.integers(2, 8)).map(
    lambda b: (b[0], b[1], b[0] + b[2], b[1] + b[3]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.lists(box_st, max_size=2),
                          st.lists(st.tuples(st.integers(1, 20).map(lambda c: c / 20), box_st), max_size=4)),
                min_size=1, max_size=4).filter(lambda imgs: 1 <= sum(len(d) for _, d in imgs) <= 10
                                               and any(g for g, _ in imgs)))
def test_ap_matches_pr_oracle(images):
    gts = [[GroundTruth(b) for b in g] for g, _ in images]
    preds = [_ds(d) for _, d in images]
    flat = [(i, c, b) for i, (_, d) in enumerate(images) for c, b in d]
    expected = ap_pr_table(flat, [g for g, _ in images])
    assert abs(ap50(preds, gts) - expected) < 1e-12


# --- ASR


def test_asr_examples():
    assert asr_from_confidences([0.4, 0.6, 0.49, 0.51]) == 50.0
    assert asr_from_confidences([0.9, 0.95]) == 0.0
    blank = ConstantDetector(lambda im: 0.0)
    assert asr([torch.zeros(8, 8, 3)] * 3, blank) == 100.0
    with pytest.raises(EvalError):
        asr([], blank)


def test_asr_vacuous_with_no_candidates():
    class Empty:
        def detect(self, image):
            return _ds([])

    assert asr([torch.zeros(4, 4, 3)] * 2, Empty()) == 100.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 1), st.floats(0, 1))
def test_asr_monotone_in_threshold(conf, t1, t2):
    lo, hi = sorted((t1, t2))
    assert asr_from_confidences(conf, lo) <= asr_from_confidences(conf, hi)


# --- grids and report


def test_grid_sizes():
    assert len(grid_preset("desk")) == 32 == len(grid_preset("desk").poses())
    assert len(grid_preset("full")) == FULL_SCALE_REFERENCE["pose_sweep_images"] == 4320
    with pytest.raises(EvalError):
        SweepGrid([5], [0], 7)
    with pytest.raises(EvalError):
        grid_preset("huge")


def test_report_roundtrip(tmp_path):
    rep = EvalReport(meta={"seed": 0})
    rep.add("pose", "asr", (("all", "all"),), 12.5, 32)
    rep.add("pose", "asr", (("distance", 7),), 25.0, 16)
    back = EvalReport.read_csv(rep.write_csv(tmp_path / "r.csv"))
    assert [r["value"] for r in back.rows] == [12.5, 25.0]
    assert back.rows[1]["cell"] == (("distance", "7"),)
    summary = json.loads(rep.write_summary(tmp_path / "r.json").read_text())
    assert len(summary["rows"]) == 1 and summary["meta"]["seed"] == 0
    assert rep.value("pose", "asr", distance=7) == 25.0
    with pytest.raises(EvalError):
        rep.add("pose", "asr", (), 120.0, 1)


# --- occlusion


def test_occlude_zero_is_identity():
    img = torch.rand(32, 32, 3)
    out = occlude(img, GroundTruth((4, 4, 20, 20)), 0.0)
    assert out is img and torch.equal(out, img)


def test_occlude_paints_left_columns():
    img = torch.zeros(32, 32, 3, dtype=torch.float64)
    out = occlude(img, GroundTruth((4, 6, 24, 20)), 0.5, fill=(1.0, 1.0, 1.0))
    painted = out[..., 0] == 1
    assert painted[6:20, 4:14].all() and painted.sum() == 14 * 10
    assert torch.equal(img, torch.zeros_like(img))  # input untouched


def test_occlude_default_fill_is_ring_mean():
    img = torch.zeros(40, 40, 3, dtype=torch.float64)
    img[..., 1] = 0.25
    out = occlude(img, GroundTruth((10, 10, 30, 30)), 0.3)
    np.testing.assert_allclose(out[15, 11].numpy(), [0, 0.25, 0])
    with pytest.raises(EvalError):
        occlude(img, GroundTruth((10, 10, 30, 30)), 1.0)


# --- sweeps (structure, with a brightness-driven stand-in detector)


def _brightness_detector():
    return ConstantDetector(lambda im: float(torch.as_tensor(im).float().mean()))


def test_pose_sweep_cells():
    grid = grid_preset("desk")
    rep = pose_sweep(toy_car(32), toy_car(32).base_texture, Environment(), grid, _brightness_detector(),
                     resolution=(64, 64))
    assert rep.select(metric="asr", all="all")[0]["count"] == 32
    for d in grid.distances:
        assert rep.select(distance=d)[0]["count"] == 16
    assert sum(r["count"] for r in rep.rows if r["cell"][0][0] == "azimuth_bin") == 32
    assert sum(r["count"] for r in rep.rows if r["cell"][0][0] == "azimuth") == 32


def test_occlusion_and_reflectance_sweeps():
    car = toy_car(32)
    grid = SweepGrid([8], [20], 180, occlusion_fractions=[0.1, 0.5, 0.8], reflectances=[1, 5])
    det = _brightness_detector()
    occ = occlusion_sweep(car, car.base_texture, Environment(), grid, det, resolution=(64, 64))
    assert {dict(r["cell"]).get("category") for r in occ.rows} >= {"small", "middle", "large"}
    assert occ.select(fraction=0.0)[0]["count"] == 2
    ref = reflectance_sweep(car, car.base_texture, None, grid.reflectances, det, grid, resolution=(64, 64))
    assert [dict(r["cell"])["diffuse_color"] for r in ref.rows] == [1.0, 5.0]
    with pytest.raises(EvalError):
        reflectance_sweep(car, car.base_texture, None, [0.0], det, grid)


def test_concealment_structure():
    car = toy_car(32)
    rng = np.random.default_rng(0)
    scenes = {"grass": [rng.uniform(size=(64, 64, 3))], "desert": [rng.uniform(size=(64, 64, 3))]}
    tex = {"camou-raw": car.base_texture, "camou-color": np.full_like(car.base_texture, 0.5)}
    rep = concealment_eval(car, tex, Environment(), scenes, _brightness_detector(), distances=(8,), pitches=(20,),
                           azimuth_step=180, resolution=(64, 64))
    for label in scenes:
        for mode in tex:
            for metric in ("csim", "ssim", "asr"):
                assert rep.value("concealment", metric, scene=label, mode=mode) is not None


# --- similarity metrics


def test_csim_examples():
    x = np.random.default_rng(0).uniform(size=(32, 32, 3))
    assert csim(x, x) == 0
    assert abs(csim(np.zeros((8, 8, 3)), np.ones((8, 8, 3))) - 1.0) < 1e-12
    r = np.random.default_rng(1)
    assert csim(r.uniform(size=(128, 128, 3)), r.uniform(size=(128, 128, 3))) < 0.05


def test_ssim_examples():
    r = np.random.default_rng(0)
    x = np.clip(0.5 + 0.2 * r.normal(size=(48, 48, 3)), 0, 1)
    assert abs(ssim(x, x) - 1.0) < 1e-12
    assert ssim(x, 1 - x) < 0.1
    c = np.full((48, 48, 3), 0.4)
    assert ssim(c, c + 1e-4 * r.normal(size=c.shape)) > 0.95
    with pytest.raises(EvalError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_skimage(seed):
    r = np.random.default_rng(seed)
    a = r.uniform(size=(40, 36, 3))
    b = np.clip(a + 0.2 * r.normal(size=a.shape), 0, 1)
    ref = structural_similarity(luminance(a), luminance(b), gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, data_range=1.0)
    assert abs(ssim(a, b) - ref) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_similarity_symmetry_and_range(seed):
    r = np.random.default_rng(seed)
    a, b = r.uniform(size=(16, 16, 3)), r.uniform(size=(16, 16, 3)) ** 2
    assert csim(a, b) == csim(b, a) and csim(a, b) >= 0
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) < 1e-12 and -1 <= s <= 1
