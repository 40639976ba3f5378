"""CNN layer graph, weights and the JSON manifest format."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from ..errors import FormatError, ShapeMismatch, UnsupportedShape

F32 = np.float32


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    kind = "conv"


@dataclass(frozen=True)
class MaxPool:
    size: int
    stride: int
    kind = "maxpool"


@dataclass(frozen=True)
class Dense:
    out_features: int
    kind = "dense"


@dataclass(frozen=True)
class Relu:
    kind = "relu"


@dataclass(frozen=True)
class Softmax:
    kind = "softmax"


LayerSpec = Union[Conv, MaxPool, Dense, Relu, Softmax]
_KINDS = {"conv": Conv, "maxpool": MaxPool, "dense": Dense, "relu": Relu, "softmax": Softmax}


def output_shape(layer: LayerSpec, in_shape: tuple) -> tuple:
    """Shape produced by ``layer`` from ``in_shape``."""
    if isinstance(layer, (Relu, Softmax)):
        return tuple(in_shape)
    if isinstance(layer, Dense):
        return (layer.out_features,)
    if len(in_shape) != 3:
        raise UnsupportedShape(f"{layer.kind} needs a (C, H, W) input, got {in_shape}")
    c, h, w = in_shape
    if isinstance(layer, Conv):
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        if k < 1 or s < 1 or p < 0 or p >= k:
            raise UnsupportedShape(f"conv k={k} s={s} p={p}")
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise UnsupportedShape(f"conv window {k} larger than input {in_shape}")
        return (layer.out_channels, ho, wo)
    k, s = layer.size, layer.stride
    if k < 1 or s < 1 or k > h or k > w:
        raise UnsupportedShape(f"pool size {k} on input {in_shape}")
    return (c, (h - k) // s + 1, (w - k) // s + 1)


def param_counts(layer: LayerSpec, in_shape: tuple) -> tuple[int, int]:
    """(weight count, bias count) a layer expects."""
    if isinstance(layer, Conv):
        return layer.out_channels * in_shape[0] * layer.kernel_size ** 2, layer.out_channels
    if isinstance(layer, Dense):
        return layer.out_features * int(np.prod(in_shape)), layer.out_features
    return 0, 0


@dataclass
class Model:
    name: str
    input_shape: tuple
    layers: tuple
    weights: list = field(default_factory=list)   # per layer: float32 array or None
    biases: list = field(default_factory=list)    # per layer: float32 array or None

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.layers = tuple(self.layers)
        if not self.weights:
            self.weights = [None] * len(self.layers)
        if not self.biases:
            self.biases = [None] * len(self.layers)
        self.check()

    @property
    def shapes(self) -> list[tuple]:
        out = [self.input_shape]
        for layer in self.layers:
            out.append(output_shape(layer, out[-1]))
        return out

    @property
    def num_classes(self) -> int:
        return int(np.prod(self.shapes[-1]))

    def check(self) -> None:
        if not self.layers:
            raise FormatError(f"model {self.name!r} has no layers")
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Softmax) and i != len(self.layers) - 1:
                raise FormatError("softmax is only allowed as the final layer")
        shapes = self.shapes
        if len(shapes[-1]) != 1:
            raise FormatError(f"final output must be a vector, got {shapes[-1]}")
        for i, layer in enumerate(self.layers):
            nw, nb = param_counts(layer, shapes[i])
            w, b = self.weights[i], self.biases[i]
            if nw:
                if w is None or np.asarray(w).size != nw:
                    raise ShapeMismatch(i, nw, None if w is None else np.asarray(w).size)
                self.weights[i] = np.asarray(w, F32).reshape(-1)
            if b is not None and np.asarray(b).size not in (0, nb):
                raise ShapeMismatch(i, nb, np.asarray(b).size)
            if b is not None:
                self.biases[i] = np.asarray(b, F32).reshape(-1) if np.asarray(b).size else None


def _layer_from_json(d: dict) -> LayerSpec:
    kind = d.get("kind")
    if kind not in _KINDS:
        raise FormatError(f"unknown layer kind {kind!r}")
    try:
        return _KINDS[kind](**d.get("params", {}))
    except TypeError as e:
        raise FormatError(f"bad params for {kind}: {e}") from None


def _layer_params(layer: LayerSpec) -> dict:
    return {k: getattr(layer, k) for k in layer.__dataclass_fields__}


def load_model(manifest_path) -> Model:
    """Read a model manifest and its little-endian binary32 weight blob."""
    path = Path(manifest_path)
    try:
        m = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: {e}") from None
    for key in ("name", "input_shape", "layers", "weights_file"):
        if key not in m:
            raise FormatError(f"{path}: missing {key!r}")
    if not m["layers"]:
        raise FormatError(f"{path}: empty layers list")
    blob_path = path.parent / m["weights_file"]
    try:
        blob = np.fromfile(blob_path, dtype="<f4").astype(F32)
    except FileNotFoundError:
        raise FormatError(f"weights file {blob_path} not found") from None

    layers, weights, biases = [], [], []
    shape = tuple(m["input_shape"])
    for i, d in enumerate(m["layers"]):
        layer = _layer_from_json(d)
        nw, nb = param_counts(layer, shape)

        def take(off_key, len_key, expected):
            n = int(d.get(len_key, 0))
            if expected == 0 and n == 0:
                return None
            if n != expected:
                raise ShapeMismatch(i, expected, n)
            off = int(d.get(off_key, 0))
            if off < 0 or off + n > blob.size:
                raise FormatError(f"layer {i}: {len_key} range [{off}, {off + n}) outside blob")
            return blob[off:off + n].copy()

        weights.append(take("weight_offset", "weight_len", nw))
        bias_len = int(d.get("bias_len", 0))
        biases.append(take("bias_offset", "bias_len", nb) if bias_len else None)
        layers.append(layer)
        shape = output_shape(layer, shape)
    return Model(m["name"], tuple(m["input_shape"]), tuple(layers), weights, biases)


def save_model(model: Model, manifest_path, weights_file: str | None = None) -> None:
    path = Path(manifest_path)
    weights_file = weights_file or path.stem + ".bin"
    chunks, entries, off = [], [], 0
    for layer, w, b in zip(model.layers, model.weights, model.biases):
        e = {"kind": layer.kind, "params": _layer_params(layer)}
        for key, arr in (("weight", w), ("bias", b)):
            n = 0 if arr is None else int(arr.size)
            e[f"{key}_offset"] = off if n else 0
            e[f"{key}_len"] = n
            if n:
                chunks.append(np.asarray(arr, "<f4").reshape(-1))
                off += n
        entries.append(e)
    manifest = {"name": model.name, "input_shape": list(model.input_shape),
                "layers": entries, "weights_file": weights_file}
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    blob = np.concatenate(chunks) if chunks else np.zeros(0, "<f4")
    blob.astype("<f4").tofile(path.parent / weights_file)


def random_model(name: str, input_shape: tuple, layers: tuple, seed: int = 0) -> Model:
    """Model with He-scaled normal weights and small biases from ``seed``."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    shape = tuple(input_shape)
    for layer in layers:
        nw, nb = param_counts(layer, shape)
        if nw:
            fan_in = nw // nb
            weights.append(rng.normal(0, np.sqrt(2.0 / fan_in), nw).astype(F32))
            biases.append(rng.normal(0, 0.05, nb).astype(F32))
        else:
            weights.append(None)
            biases.append(None)
        shape = output_shape(layer, shape)
    return Model(name, tuple(input_shape), tuple(layers), weights, biases)


LENET_SMALL_LAYERS = (
    Conv(4, 5), Relu(), MaxPool(2, 2),
    Conv(8, 5), Relu(), MaxPool(2, 2),
    Dense(10), Softmax(),
)
