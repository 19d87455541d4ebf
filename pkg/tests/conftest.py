import os
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

sys.path.insert(0, str(Path(__file__).parent))

from bodvw.imageio import DatasetManifest, save_manifest  # noqa: E402
from bodvw.synthetic import make_prototype_dataset  # noqa: E402
from bodvw.toymodel import build_vgg16_onnx  # noqa: E402


@pytest.fixture(scope="session")
def toy_model(tmp_path_factory):
    """Compact VGG16-shaped ONNX file and its weights."""
    path = tmp_path_factory.mktemp("model") / "toy_vgg16.onnx"
    _, weights = build_vgg16_onnx(path, seed=0, compact=True)
    return path, weights


def _pattern(kind: str, i: int, size=(48, 40)) -> np.ndarray:
    h, w = size
    rng = np.random.default_rng(1000 * len(kind) + i)
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "stripes":
        base = 127 + 120 * np.sin(yy / (1.5 + 0.1 * i))
    elif kind == "checks":
        base = 255.0 * (((yy // 4) + (xx // 4)) % 2)
    else:
        base = 255.0 * np.exp(-((yy - h / 2) ** 2 + (xx - w / 2) ** 2) / (2 * (6 + i % 3) ** 2))
    return np.clip(base + rng.normal(0, 8, size), 0, 255).astype(np.uint8)


@pytest.fixture(scope="session")
def image_dataset(tmp_path_factory):
    """Three visually distinct grayscale categories, eight PNGs each, plus a manifest."""
    root = tmp_path_factory.mktemp("images")
    categories = ("blob", "checks", "stripes")
    entries = []
    for c, kind in enumerate(categories):
        for i in range(8):
            name = f"{kind}_{i}.png"
            Image.fromarray(_pattern(kind, i), mode="L").save(root / name)
            entries.append((name, c))
    manifest = DatasetManifest(name="toy", categories=categories, entries=tuple(entries), root=str(root))
    manifest_path = root / "manifest.csv"
    save_manifest(manifest, manifest_path)
    return manifest_path, manifest


@pytest.fixture(scope="session")
def synthetic_small():
    return make_prototype_dataset(n_classes=3, images_per_class=12, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def dataset4_paths():
    return os.environ.get("BODVW_D4_MANIFEST"), os.environ.get("BODVW_VGG16_ONNX")


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not getattr(module, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in module.RESULTS:
        terminalreporter.write_line(line)
