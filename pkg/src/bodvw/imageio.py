"""Dataset manifests, image decoding and VGG16 input preprocessing."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageDecodeError, ManifestError

INPUT_SIZE = 224
# Caffe-style ImageNet means in B, G, R order (Keras VGG16 default).
CHANNEL_MEANS_BGR = (103.939, 116.779, 123.68)
RESIZE_FILTER = "pil-bilinear"
PREPROCESS_TAG = f"resize{INPUT_SIZE}:{RESIZE_FILTER}|gray->3ch|bgr|caffe-mean|no-rescale"

_SUPPORTED_FORMATS = {"PNG", "JPEG"}


@dataclass(frozen=True)
class DatasetManifest:
    """Labelled image list.

    ``entries`` holds ``(image_path, label_index)`` pairs with paths exactly
    as written in the manifest file; relative paths are resolved against
    ``root`` by :meth:`resolve`.
    """

    name: str
    categories: tuple[str, ...]
    entries: tuple[tuple[str, int], ...]
    root: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "entries", tuple((str(p), int(i)) for p, i in self.entries))
        if not self.entries:
            raise ManifestError("empty manifest")
        if len(set(self.categories)) != len(self.categories):
            raise ManifestError("duplicate category names")
        seen = set()
        for path, idx in self.entries:
            if not 0 <= idx < len(self.categories):
                raise ManifestError(f"label index {idx} out of range for {path!r}")
            if path in seen:
                raise ManifestError(f"duplicate path {path!r}")
            seen.add(path)
        counts = self.category_counts()
        for name, n in zip(self.categories, counts):
            if n == 0:
                raise ManifestError(f"category {name!r} has no entries")

    def __len__(self):
        return len(self.entries)

    @property
    def paths(self) -> list[str]:
        return [p for p, _ in self.entries]

    @property
    def labels(self) -> np.ndarray:
        return np.array([i for _, i in self.entries], dtype=np.int64)

    def category_counts(self) -> list[int]:
        counts = [0] * len(self.categories)
        for _, idx in self.entries:
            counts[idx] += 1
        return counts

    def resolve(self, path: str) -> str:
        if os.path.isabs(path) or not self.root:
            return path
        return os.path.join(self.root, path)

    def subset(self, indices, name: str | None = None) -> DatasetManifest:
        return DatasetManifest(
            name=name or self.name,
            categories=self.categories,
            entries=tuple(self.entries[i] for i in indices),
            root=self.root,
        )


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def load_manifest(path) -> DatasetManifest:
    """Read a ``path,label`` CSV manifest.

    Category order is the sorted set of distinct labels unless a JSON sidecar
    (same stem, ``.json`` suffix) provides ``{"categories": [...]}``.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label"]:
            raise ManifestError(f"{path}: header must be 'path,label', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2 or not row[0].strip() or not row[1].strip():
                raise ManifestError(f"{path}:{lineno}: malformed record {row!r}")
            rows.append((row[0].strip(), row[1].strip()))

    name = path.stem
    sidecar = _sidecar_path(path)
    if sidecar.is_file():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        categories = list(meta["categories"])
        name = meta.get("name", name)
    else:
        categories = sorted({label for _, label in rows})

    index = {c: i for i, c in enumerate(categories)}
    entries = []
    for p, label in rows:
        if label not in index:
            raise ManifestError(f"{path}: label {label!r} not in category list")
        entries.append((p, index[label]))
    return DatasetManifest(name=name, categories=tuple(categories), entries=tuple(entries),
                           root=str(path.parent))


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write the CSV plus a sidecar pinning name and category order."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label"])
        for p, idx in manifest.entries:
            writer.writerow([p, manifest.categories[idx]])
    _sidecar_path(path).write_text(
        json.dumps({"name": manifest.name, "categories": list(manifest.categories)}, indent=2),
        encoding="utf-8",
    )


@dataclass(frozen=True)
class RawImage:
    height: int
    width: int
    channels: int
    data: np.ndarray  # uint8, (height, width, channels)

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ImageDecodeError(f"unsupported channel count {self.channels}")
        if self.height <= 0 or self.width <= 0:
            raise ImageDecodeError("zero-dimension image")
        if self.data.dtype != np.uint8 or self.data.shape != (self.height, self.width, self.channels):
            raise ImageDecodeError(
                f"pixel buffer {self.data.shape}/{self.data.dtype} does not match "
                f"{self.height}x{self.width}x{self.channels} uint8"
            )


@dataclass(frozen=True)
class ModelInput:
    tensor: np.ndarray  # float32, (224, 224, 3), B-G-R mean-subtracted
    provenance: str = ""

    def __post_init__(self):
        if self.tensor.shape != (INPUT_SIZE, INPUT_SIZE, 3):
            raise ValueError(f"model input must be {INPUT_SIZE}x{INPUT_SIZE}x3, got {self.tensor.shape}")
        if not np.all(np.isfinite(self.tensor)):
            raise ValueError("model input contains non-finite values")


def load_image(path) -> RawImage:
    try:
        with Image.open(path) as img:
            fmt = img.format
            if fmt not in _SUPPORTED_FORMATS:
                raise ImageDecodeError(f"{path}: unsupported format {fmt}")
            img.load()
            arr = _to_uint8(img)
    except ImageDecodeError:
        raise
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode image ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    return RawImage(height=h, width=w, channels=c, data=np.ascontiguousarray(arr))


def _to_uint8(img: Image.Image) -> np.ndarray:
    mode = img.mode
    if mode == "L":
        return np.asarray(img, dtype=np.uint8)
    if mode == "RGB":
        return np.asarray(img, dtype=np.uint8)
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        # 16-bit radiographs: map the full range onto 8 bits
        wide = np.asarray(img, dtype=np.float64)
        top = 65535.0 if mode.startswith("I;16") else max(float(wide.max()), 1.0)
        return np.clip(np.rint(wide * (255.0 / top)), 0, 255).astype(np.uint8)
    if mode in ("LA", "1"):
        return np.asarray(img.convert("L"), dtype=np.uint8)
    return np.asarray(img.convert("RGB"), dtype=np.uint8)


def preprocess(image: RawImage, provenance: str = "") -> ModelInput:
    """Resize to 224x224 (bilinear), force three B-G-R channels, subtract means."""
    if image.channels == 1:
        pil = Image.fromarray(image.data[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(image.data, mode="RGB")
    if (image.height, image.width) != (INPUT_SIZE, INPUT_SIZE):
        pil = pil.resize((INPUT_SIZE, INPUT_SIZE), Image.BILINEAR)
    arr = np.asarray(pil, dtype=np.float32)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    else:
        arr = arr[:, :, ::-1]
    arr = arr - np.asarray(CHANNEL_MEANS_BGR, dtype=np.float32)
    return ModelInput(tensor=np.ascontiguousarray(arr, dtype=np.float32), provenance=provenance)


def load_and_preprocess(path) -> ModelInput:
    return preprocess(load_image(path), provenance=str(path))
