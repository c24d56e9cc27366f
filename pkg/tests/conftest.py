import numpy as np
import pytest
import torch

from stickercamo.assets import unit_quad
from stickercamo.detect import ToyDetector, ToyGridDetector
from stickercamo.geometry import RegionMask

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def quad():
    tex = np.random.default_rng(0).uniform(size=(8, 8, 3))
    return unit_quad(tex)


@pytest.fixture
def full_mask():
    return RegionMask(np.ones((8, 8), dtype=np.uint8))


def random_detector(seed=0, dtype=torch.float64):
    """Untrained toy detector; enough for gradient and plumbing checks."""
    torch.manual_seed(seed)
    return ToyDetector(ToyGridDetector(), (128, 128)).to(dtype)


@pytest.fixture(scope="session")
def untrained_detector():
    return random_detector()


class ConstantDetector:
    """Non-differentiable stand-in that reports a fixed max confidence per image."""

    name = "constant"
    input_resolution = (128, 128)
    differentiable = False

    def __init__(self, fn):
        self.fn = fn

    def detect(self, image):
        from stickercamo.detect import DetectionSet

        c = float(self.fn(image))
        return DetectionSet(torch.tensor([[10.0, 10.0, 50.0, 50.0]]), torch.tensor([c]))


def _source_digest():
    import hashlib
    from pathlib import Path

    import stickercamo

    root = Path(stickercamo.__file__).parent
    h = hashlib.sha256()
    # only what detector training depends on
    for name in ("assets", "detect", "evaluate", "geometry", "imageio", "render", "scenes"):
        h.update((root / f"{name}.py").read_bytes())
    h.update((root / "pipeline" / "run.py").read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def desk_config():
    from stickercamo.pipeline.config import preset_config

    return preset_config("desk")


@pytest.fixture(scope="session")
def trained_detector(request, desk_config):
    """Toy detector trained with the desk recipe, cached per source/config digest.

    Returns ``(detector, validation AP@0.5)``.
    """
    import json

    from stickercamo.assets import toy_car
    from stickercamo.pipeline.run import train_toy_detector

    key = f"{_source_digest()}-{desk_config.config_hash()[:16]}"
    cache = request.config.cache.mkdir("stickercamo-detector")
    weights, meta = cache / f"{key}.pt", cache / f"{key}.json"
    if weights.exists() and meta.exists():
        return ToyDetector.load(weights), json.loads(meta.read_text())["val_ap"]
    det, ap = train_toy_detector(desk_config, toy_car(128))
    det.save(weights)
    meta.write_text(json.dumps({"val_ap": ap}))
    return det, ap


_CRITERIA = {}


@pytest.fixture(scope="session")
def criterion():
    """Record ``criterion(n, ok, detail)``; the lines are printed at the end of the run."""

    def record(number, ok, detail):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
