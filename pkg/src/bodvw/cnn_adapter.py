"""Pooling-layer taps on a pre-trained VGG16 served through onnxruntime.

Feature maps are cached on disk in a small little-endian binary format::

    b"BDVWFMAP" | u32 version=1 | u32 H | u32 W | u32 L
    | H*W*L float32 (row-major h, w, l) | u32 n | n bytes UTF-8 provenance
"""

from __future__ import annotations

import hashlib
import os
import re
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FileFormatError, ModelError
from .imageio import INPUT_SIZE, PREPROCESS_TAG, ModelInput, load_and_preprocess

LAYER_SHAPES = {
    1: (112, 112, 64),
    2: (56, 56, 128),
    3: (28, 28, 256),
    4: (14, 14, 512),
    5: (7, 7, 512),
}
# Keras layer names; tf2onnx keeps them as path segments of the tensor names.
DEFAULT_TAP_NAMES = {i: f"block{i}_pool" for i in LAYER_SHAPES}

FMAP_MAGIC = b"BDVWFMAP"
FMAP_VERSION = 1
_FMAP_HEADER = struct.Struct("<8sIIII")


def parse_layer(layer) -> int:
    """Accept ``4``, ``"4"``, ``"p4"`` or ``"p_4"``."""
    if isinstance(layer, str):
        m = re.fullmatch(r"\s*p?_?([1-5])\s*", layer)
        if not m:
            raise ValueError(f"unknown pooling layer {layer!r}")
        layer = int(m.group(1))
    if isinstance(layer, bool) or int(layer) != layer or int(layer) not in LAYER_SHAPES:
        raise ValueError(f"pooling layer must be one of 1..5, got {layer!r}")
    return int(layer)


def layer_name(layer) -> str:
    return f"p_{parse_layer(layer)}"


def layer_shape(layer) -> tuple[int, int, int]:
    return LAYER_SHAPES[parse_layer(layer)]


def layer_from_shape(shape) -> int:
    for layer, s in LAYER_SHAPES.items():
        if tuple(shape) == s:
            return layer
    raise FileFormatError(f"shape {tuple(shape)} matches no VGG16 pooling layer")


@dataclass(frozen=True)
class FeatureMap:
    layer: int
    values: np.ndarray  # float32 (H, W, L)
    provenance: str = ""

    def __post_init__(self):
        layer = parse_layer(self.layer)
        object.__setattr__(self, "layer", layer)
        if self.values.shape != LAYER_SHAPES[layer]:
            raise ValueError(f"{layer_name(layer)} map must be {LAYER_SHAPES[layer]}, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature map contains non-finite values")
        if np.any(self.values < 0):
            raise ValueError("feature map has negative values; pooled ReLU outputs are >= 0")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def depth(self) -> int:
        return self.values.shape[2]


def file_sha256(path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                break
            h.update(block)
    return h.hexdigest()


def _resolve_tap(graph, pattern: str) -> str | None:
    producers = {}
    for node in graph.node:
        for out in node.output:
            producers[out] = node.op_type
    if pattern in producers:
        return pattern
    hits = [name for name in producers if pattern in re.split(r"[/:]", name)]
    pooled = [name for name in hits if producers[name] == "MaxPool"]
    if len(pooled) == 1:
        return pooled[0]
    if len(hits) == 1:
        return hits[0]
    if hits:
        raise ModelError(f"tap pattern {pattern!r} is ambiguous: {sorted(hits)[:5]}")
    return None


class FeatureExtractor:
    """One inference session over an ONNX VGG16 with all pooling outputs exposed.

    ``tap_names`` overrides the layer -> tensor-name table for exports whose
    names do not contain the Keras ``block{i}_pool`` segments.  Sessions are
    created lazily and never pickled, so an extractor can be shipped to a
    worker process and opens its own session there.
    """

    def __init__(self, model_path, tap_names: dict | None = None, threads: int = 1):
        self.model_path = str(model_path)
        if not os.path.isfile(self.model_path):
            raise ModelError(f"model file not found: {self.model_path}")
        self.tap_names = dict(DEFAULT_TAP_NAMES)
        if tap_names:
            self.tap_names.update({parse_layer(k): v for k, v in tap_names.items()})
        self.threads = threads
        self.model_hash = file_sha256(self.model_path)
        self._session = None
        self._taps = None
        self._input_name = None
        self._nchw = False

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_session"] = None
        return state

    def _open(self):
        import onnx
        import onnxruntime as ort

        try:
            model = onnx.load(self.model_path)
        except Exception as exc:  # protobuf raises a zoo of types
            raise ModelError(f"cannot parse ONNX model {self.model_path}: {exc}") from exc
        taps = {}
        for layer, pattern in self.tap_names.items():
            name = _resolve_tap(model.graph, pattern)
            if name is not None:
                taps[layer] = name
        existing = {o.name for o in model.graph.output}
        for name in taps.values():
            if name not in existing:
                model.graph.output.append(onnx.ValueInfoProto(name=name))

        opts = ort.SessionOptions()
        opts.intra_op_num_threads = self.threads
        opts.inter_op_num_threads = 1
        opts.execution_mode = ort.ExecutionMode.ORT_SEQUENTIAL
        try:
            session = ort.InferenceSession(model.SerializeToString(), sess_options=opts,
                                           providers=["CPUExecutionProvider"])
        except Exception as exc:
            raise ModelError(f"cannot load ONNX model {self.model_path}: {exc}") from exc

        inputs = session.get_inputs()
        if len(inputs) != 1:
            raise ModelError(f"expected one model input, found {len(inputs)}")
        shape = inputs[0].shape
        if len(shape) != 4:
            raise ModelError(f"expected a 4-D image input, got {shape}")
        if shape[-1] == 3:
            self._nchw = False
        elif shape[1] == 3:
            self._nchw = True
        else:
            raise ModelError(f"cannot infer channel layout from input shape {shape}")
        self._input_name = inputs[0].name
        self._taps = taps
        self._session = session

    @property
    def available_layers(self) -> list[int]:
        if self._session is None:
            self._open()
        return sorted(self._taps)

    def extract_many(self, inp: ModelInput, layers) -> dict[int, FeatureMap]:
        layers = [parse_layer(layer) for layer in layers]
        if self._session is None:
            self._open()
        missing = [layer for layer in layers if layer not in self._taps]
        if missing:
            raise ModelError(
                f"topology mismatch: no tensor for {', '.join(layer_name(m) for m in missing)} "
                f"(patterns {[self.tap_names[m] for m in missing]})"
            )
        x = inp.tensor[None, ...]
        if self._nchw:
            x = x.transpose(0, 3, 1, 2)
        names = [self._taps[layer] for layer in layers]
        try:
            outs = self._session.run(names, {self._input_name: np.ascontiguousarray(x, dtype=np.float32)})
        except Exception as exc:
            raise ModelError(f"inference failed for {inp.provenance!r}: {exc}") from exc

        result = {}
        for layer, out in zip(layers, outs):
            result[layer] = FeatureMap(layer, _to_hwl(np.asarray(out), layer), inp.provenance)
        return result

    def extract(self, inp: ModelInput, layer) -> FeatureMap:
        layer = parse_layer(layer)
        return self.extract_many(inp, [layer])[layer]


def _to_hwl(out: np.ndarray, layer: int) -> np.ndarray:
    h, w, depth = LAYER_SHAPES[layer]
    if out.ndim == 4 and out.shape[0] == 1:
        out = out[0]
    if out.shape == (h, w, depth):
        arr = out
    elif out.shape == (depth, h, w):
        arr = out.transpose(1, 2, 0)
    else:
        raise ModelError(f"topology mismatch: {layer_name(layer)} tensor has shape {out.shape}, "
                         f"expected {(h, w, depth)}")
    return np.ascontiguousarray(arr, dtype=np.float32)


def extract_feature_map(inp: ModelInput, layer, model) -> FeatureMap:
    """Convenience wrapper accepting either an extractor or a model path."""
    if not isinstance(model, FeatureExtractor):
        model = FeatureExtractor(model)
    return model.extract(inp, layer)


# -- cache files --------------------------------------------------------------

def write_feature_map(path, fmap: FeatureMap) -> None:
    h, w, depth = fmap.values.shape
    prov = fmap.provenance.encode("utf-8")
    payload = b"".join([
        _FMAP_HEADER.pack(FMAP_MAGIC, FMAP_VERSION, h, w, depth),
        np.ascontiguousarray(fmap.values, dtype="<f4").tobytes(),
        struct.pack("<I", len(prov)),
        prov,
    ])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".fmap")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_feature_map(path) -> FeatureMap:
    data = Path(path).read_bytes()
    if len(data) < _FMAP_HEADER.size:
        raise FileFormatError(f"{path}: truncated header")
    magic, version, h, w, depth = _FMAP_HEADER.unpack_from(data, 0)
    if magic != FMAP_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    if version != FMAP_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    offset = _FMAP_HEADER.size
    nbytes = h * w * depth * 4
    if len(data) < offset + nbytes + 4:
        raise FileFormatError(f"{path}: truncated payload")
    values = np.frombuffer(data, dtype="<f4", count=h * w * depth, offset=offset).reshape(h, w, depth)
    offset += nbytes
    (n,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if len(data) != offset + n:
        raise FileFormatError(f"{path}: provenance length mismatch")
    provenance = data[offset:offset + n].decode("utf-8")
    return FeatureMap(layer_from_shape((h, w, depth)), values.astype(np.float32), provenance)


def cache_key(image_path: str, content_hash: str, layer: int, model_hash: str,
              preprocess_tag: str = PREPROCESS_TAG) -> str:
    key = "\x1f".join([str(image_path), content_hash, layer_name(layer), model_hash, preprocess_tag])
    return hashlib.sha256(key.encode("utf-8")).hexdigest()


class CachedFeatureSource:
    """Callable ``(image_path, layer) -> FeatureMap`` backed by an on-disk cache.

    ``image_path`` is the manifest path used as provenance and cache key; the
    file itself is read from ``resolve(image_path)`` when given.
    """

    def __init__(self, extractor: FeatureExtractor, cache_dir=None, resolve=None):
        self.extractor = extractor
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.resolve = resolve
        self.extracted = 0
        self.skipped = 0

    def cache_path(self, image_path: str, layer: int) -> Path | None:
        if self.cache_dir is None:
            return None
        real = self.resolve(image_path) if self.resolve else image_path
        key = cache_key(image_path, file_sha256(real), parse_layer(layer), self.extractor.model_hash)
        return self.cache_dir / f"{key}.fmap"

    def is_fresh(self, image_path: str, layer: int) -> bool:
        path = self.cache_path(image_path, layer)
        return path is not None and path.is_file()

    def __call__(self, image_path: str, layer) -> FeatureMap:
        layer = parse_layer(layer)
        path = self.cache_path(image_path, layer)
        if path is not None and path.is_file():
            try:
                fmap = read_feature_map(path)
            except FileFormatError:
                fmap = None
            if fmap is not None and fmap.layer == layer:
                self.skipped += 1
                return fmap
        real = self.resolve(image_path) if self.resolve else image_path
        inp = load_and_preprocess(real)
        inp = ModelInput(inp.tensor, provenance=str(image_path))
        fmap = self.extractor.extract(inp, layer)
        if path is not None:
            write_feature_map(path, fmap)
        self.extracted += 1
        return fmap


__all__ = [
    "DEFAULT_TAP_NAMES",
    "INPUT_SIZE",
    "LAYER_SHAPES",
    "CachedFeatureSource",
    "FeatureExtractor",
    "FeatureMap",
    "cache_key",
    "extract_feature_map",
    "layer_from_shape",
    "layer_name",
    "layer_shape",
    "parse_layer",
    "read_feature_map",
    "write_feature_map",
]
