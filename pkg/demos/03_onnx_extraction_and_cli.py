# %% [markdown]
# # Feature extraction through ONNX, then the command line
#
# The library reads any VGG16 ONNX export whose pooling outputs are named
# `block1_pool` .. `block5_pool`.  For a self-contained demo we build a
# randomly initialised stand-in with the same input and pooling shapes, draw
# a few images, and drive the `bodvw` command on them.

# %%
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from bodvw import DatasetManifest, FeatureExtractor, save_manifest
from bodvw.imageio import load_and_preprocess
from bodvw.toymodel import build_vgg16_onnx

work = Path(tempfile.mkdtemp(prefix="bodvw-demo-"))
model_path = work / "toy_vgg16.onnx"
build_vgg16_onnx(model_path, seed=0)

# %% [markdown]
# ## Tapping the pooling layers

# %%
rng = np.random.default_rng(0)
img = work / "probe.png"
Image.fromarray(rng.integers(0, 256, (300, 260), dtype=np.uint8)).save(img)
extractor = FeatureExtractor(model_path)
maps = extractor.extract_many(load_and_preprocess(img), [1, 2, 3, 4, 5])
for layer, fmap in maps.items():
    print(f"p_{layer}: {fmap.values.shape}")

# %% [markdown]
# ## A tiny two-class image set

# %%
entries = []
for label, period in (("fine", 4), ("coarse", 16)):
    (work / label).mkdir()
    for i in range(10):
        yy, xx = np.mgrid[:64, :64]
        stripes = ((xx + 3 * i) // period % 2) * 200 + rng.integers(0, 40, (64, 64))
        name = f"{label}/{i:02d}.png"
        Image.fromarray(stripes.astype(np.uint8)).save(work / name)
        entries.append((name, label))
categories = ("coarse", "fine")
manifest = DatasetManifest("stripes", categories, tuple((p, categories.index(c)) for p, c in entries))
save_manifest(manifest, work / "manifest.csv")

# %% [markdown]
# ## The command line
#
# Toy images are far apart in pixel space, so gamma is raised well above the
# default to keep the kernel informative on 14 training images.

# %%
def bodvw(*args):
    out = subprocess.run([sys.executable, "-m", "bodvw.cli", *map(str, args)], capture_output=True, text=True)
    print("$ bodvw", *args[:1], "->", out.returncode)
    print(out.stdout or out.stderr)


common = ["--manifest", work / "manifest.csv", "--model", model_path, "--cache-dir", work / "cache"]
bodvw("extract", *common)
bodvw("build-codebook", *common, "--k", "8", "--out", work / "book.cdbk")
bodvw("encode", *common, "--codebook", work / "book.cdbk", "--out", work / "features.csv")
bodvw("train", "--features", work / "features.csv", "--gamma", "0.05", "--folds", "3", "--out", work / "svm.json")
bodvw("predict", "--svm-model", work / "svm.json", "--codebook", work / "book.cdbk", "--model", model_path,
      work / "fine/00.png", work / "coarse/00.png")
bodvw("evaluate", *common, "--k", "8", "--runs", "2", "--gamma", "0.05", "--folds", "3", "--out-dir", work / "reports")
