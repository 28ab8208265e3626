"""Network description and the offline weight pipeline.

This plays the host-side role: it loads a network manifest (layer kinds,
shapes, quantization parameters, raw tensor files), magnitude-prunes real
weights, quantizes them onto the 8-bit sign-magnitude grid, and reorders
input images into tiled form.

Manifest format (JSON):

    {"input": [c, h, w],
     "input_scale": 64.0,            # optional, default 1.0
     "mean": [...],                  # optional per-channel mean subtraction
     "layers": [{"name": ..., "kind": "conv" | "pad" | "maxpool"
                                    | "fc" | "flatten",
                 "params": {...},
                 "weights_file": "w.bin",   # optional
                 "bias_file": "b.bin"}]}    # optional

Tensor files are raw little-endian float32, row-major; conv weights are
(out, in, k, k), fc weights are (out, in), biases are (out,).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import layout
from .numerics import MAG_MAX, QuantizationError, quantize_array

TILE = layout.TILE


class ModelError(ValueError):
    """Manifest, shape-chain, or weight-pipeline failure."""


@dataclass(frozen=True)
class ConvLayer:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    act_shift: int = 0
    relu: bool = True
    weight_scale: float | None = None

    def __post_init__(self):
        if self.kernel not in (1, 2, 3, 4):
            raise ModelError(f"{self.name}: conv kernel must be 1..4, got {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ModelError(f"{self.name}: bad channel counts")
        if not 0 <= self.act_shift <= 31:
            raise ModelError(f"{self.name}: act_shift out of range")


@dataclass(frozen=True)
class PadLayer:
    name: str
    border: int

    def __post_init__(self):
        if self.border < 0:
            raise ModelError(f"{self.name}: negative pad border")


@dataclass(frozen=True)
class MaxPoolLayer:
    name: str
    window: tuple[int, int]
    stride: tuple[int, int]

    def __post_init__(self):
        wh, ww = self.window
        sh, sw = self.stride
        if not (1 <= wh <= 4 and 1 <= ww <= 4):
            raise ModelError(f"{self.name}: pool window must be within 4x4")
        if sh < 1 or sw < 1:
            raise ModelError(f"{self.name}: pool stride must be positive")


@dataclass(frozen=True)
class FullyConnectedLayer:
    name: str
    in_features: int
    out_features: int
    act_shift: int = 0
    relu: bool = True
    weight_scale: float | None = None


@dataclass(frozen=True)
class FlattenLayer:
    name: str


Layer = ConvLayer | PadLayer | MaxPoolLayer | FullyConnectedLayer | FlattenLayer

_WEIGHTED = (ConvLayer, FullyConnectedLayer)


@dataclass
class NetworkModel:
    """Ordered layers plus their (real or quantized) weight store.

    Weight arrays are float32 before quantization and int16 (signed
    sign-magnitude values) after; biases stay real until the compiler folds
    them into accumulator initialization.
    """

    input_shape: tuple[int, int, int]
    layers: list[Layer]
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    biases: dict[str, np.ndarray] = field(default_factory=dict)
    input_scale: float = 1.0
    mean: np.ndarray | None = None

    def __post_init__(self):
        self.check_shapes()

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise ModelError(f"no layer named {name}")

    def conv_layers(self) -> list[ConvLayer]:
        return [l for l in self.layers if isinstance(l, ConvLayer)]

    def is_quantized(self, name: str) -> bool:
        w = self.weights.get(name)
        return w is not None and np.issubdtype(w.dtype, np.integer)

    def check_shapes(self) -> list[tuple]:
        """Chain shapes layer to layer; returns per-layer output shapes."""
        shape = self.input_shape
        out_shapes: list[tuple] = []
        for l in self.layers:
            if isinstance(l, ConvLayer):
                c, h, w = _expect_3d(shape, l.name)
                if c != l.in_channels:
                    raise ModelError(
                        f"{l.name}: expects {l.in_channels} input channels, got {c}"
                    )
                if h < l.kernel or w < l.kernel:
                    raise ModelError(f"{l.name}: input {h}x{w} smaller than kernel")
                shape = (l.out_channels, h - l.kernel + 1, w - l.kernel + 1)
            elif isinstance(l, PadLayer):
                c, h, w = _expect_3d(shape, l.name)
                shape = (c, h + 2 * l.border, w + 2 * l.border)
            elif isinstance(l, MaxPoolLayer):
                c, h, w = _expect_3d(shape, l.name)
                if h < l.window[0] or w < l.window[1]:
                    raise ModelError(f"{l.name}: input {h}x{w} smaller than window")
                shape = (
                    c,
                    (h - l.window[0]) // l.stride[0] + 1,
                    (w - l.window[1]) // l.stride[1] + 1,
                )
            elif isinstance(l, FlattenLayer):
                c, h, w = _expect_3d(shape, l.name)
                shape = (c * h * w,)
            elif isinstance(l, FullyConnectedLayer):
                if len(shape) != 1 or shape[0] != l.in_features:
                    raise ModelError(
                        f"{l.name}: expects {l.in_features} features, got {shape}"
                    )
                shape = (l.out_features,)
            else:  # pragma: no cover
                raise ModelError(f"unknown layer kind {type(l)}")
            out_shapes.append(shape)
        return out_shapes

    def in_out_shapes(self) -> dict[str, tuple[tuple, tuple]]:
        outs = self.check_shapes()
        ins = [self.input_shape] + outs[:-1]
        return {l.name: (i, o) for l, i, o in zip(self.layers, ins, outs)}

    def activation_scales(self) -> dict[str, float]:
        """Activation scale entering each layer, chained from the input scale.

        A conv/fc with weight scale s and shift t turns input scale a into
        a * s / 2**t; pad/pool/flatten leave it unchanged. Needed to fold
        real biases onto the accumulator grid.
        """
        scale = self.input_scale
        scales = {}
        for l in self.layers:
            scales[l.name] = scale
            if isinstance(l, _WEIGHTED):
                ws = l.weight_scale if l.weight_scale is not None else 1.0
                scale = scale * ws / (1 << l.act_shift)
        return scales


def _expect_3d(shape, name):
    if len(shape) != 3:
        raise ModelError(f"{name}: expects a (c, h, w) input, got {shape}")
    return shape


# ---------------------------------------------------------------------------
# Manifest loading
# ---------------------------------------------------------------------------

def _read_f32(path: Path, count: int, layer: str) -> np.ndarray:
    if not path.exists():
        raise ModelError(f"{layer}: tensor file not found: {path}")
    arr = np.fromfile(path, dtype="<f4")
    if arr.size != count:
        raise ModelError(f"{layer}: {path} holds {arr.size} values, expected {count}")
    return arr.astype(np.float32)


def _layer_from_entry(entry: dict) -> Layer:
    name = entry.get("name")
    kind = entry.get("kind")
    params = entry.get("params", {})
    if not name or not kind:
        raise ModelError(f"manifest layer missing name/kind: {entry}")
    try:
        if kind == "conv":
            return ConvLayer(
                name,
                int(params["in_channels"]),
                int(params["out_channels"]),
                int(params["kernel"]),
                int(params.get("act_shift", 0)),
                bool(params.get("relu", True)),
                params.get("weight_scale"),
            )
        if kind == "pad":
            return PadLayer(name, int(params["border"]))
        if kind == "maxpool":
            return MaxPoolLayer(name, tuple(params["window"]), tuple(params["stride"]))
        if kind == "fc":
            return FullyConnectedLayer(
                name,
                int(params["in_features"]),
                int(params["out_features"]),
                int(params.get("act_shift", 0)),
                bool(params.get("relu", True)),
                params.get("weight_scale"),
            )
        if kind == "flatten":
            return FlattenLayer(name)
    except KeyError as e:
        raise ModelError(f"{name}: missing parameter {e} for kind {kind}") from e
    raise ModelError(f"{name}: unknown layer kind {kind!r}")


def load_network(manifest_path) -> NetworkModel:
    """Load a manifest plus any referenced tensor files into a checked model."""
    path = Path(manifest_path)
    if not path.exists():
        raise ModelError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ModelError(f"malformed manifest {path}: {e}") from e
    if "input" not in doc or "layers" not in doc:
        raise ModelError(f"manifest {path} missing 'input' or 'layers'")
    input_shape = tuple(int(v) for v in doc["input"])
    if len(input_shape) != 3:
        raise ModelError(f"manifest input must be [c, h, w], got {doc['input']}")
    layers = [_layer_from_entry(e) for e in doc["layers"]]

    weights: dict[str, np.ndarray] = {}
    biases: dict[str, np.ndarray] = {}
    base = path.parent
    for entry, l in zip(doc["layers"], layers):
        wf, bf = entry.get("weights_file"), entry.get("bias_file")
        if wf is not None:
            if isinstance(l, ConvLayer):
                n = l.out_channels * l.in_channels * l.kernel * l.kernel
                weights[l.name] = _read_f32(base / wf, n, l.name).reshape(
                    l.out_channels, l.in_channels, l.kernel, l.kernel
                )
            elif isinstance(l, FullyConnectedLayer):
                n = l.out_features * l.in_features
                weights[l.name] = _read_f32(base / wf, n, l.name).reshape(
                    l.out_features, l.in_features
                )
            else:
                raise ModelError(f"{l.name}: layer kind takes no weights")
        if bf is not None:
            if isinstance(l, ConvLayer):
                biases[l.name] = _read_f32(base / bf, l.out_channels, l.name)
            elif isinstance(l, FullyConnectedLayer):
                biases[l.name] = _read_f32(base / bf, l.out_features, l.name)
            else:
                raise ModelError(f"{l.name}: layer kind takes no bias")

    mean = np.asarray(doc["mean"], dtype=np.float64) if "mean" in doc else None
    return NetworkModel(
        input_shape,
        layers,
        weights,
        biases,
        float(doc.get("input_scale", 1.0)),
        mean,
    )


def vgg16_manifest_path() -> Path:
    """Path of the bundled VGG-16 geometry preset."""
    return Path(__file__).parent / "presets" / "vgg16.json"


# ---------------------------------------------------------------------------
# Pruning
# ---------------------------------------------------------------------------

@dataclass
class LayerSparsity:
    total: int
    nonzero: int
    # histogram[n] = number of weight tiles with n nonzero entries (conv only)
    tile_histogram: np.ndarray | None = None

    @property
    def sparsity(self) -> float:
        return 1.0 - self.nonzero / self.total if self.total else 0.0


@dataclass
class SparsityReport:
    per_layer: dict[str, LayerSparsity]

    @property
    def total_nonzero(self) -> int:
        return sum(s.nonzero for s in self.per_layer.values())


def _tile_histogram(w: np.ndarray) -> np.ndarray:
    """Nonzero-count histogram over the (out, in) weight tiles of a conv layer."""
    nnz = np.count_nonzero(w.reshape(w.shape[0], w.shape[1], -1), axis=2)
    return np.bincount(nnz.reshape(-1), minlength=layout.TILE_VALUES + 1)


def sparsity_report(m: NetworkModel) -> SparsityReport:
    per_layer = {}
    for l in m.layers:
        if isinstance(l, _WEIGHTED) and l.name in m.weights:
            w = m.weights[l.name]
            hist = _tile_histogram(w) if isinstance(l, ConvLayer) else None
            per_layer[l.name] = LayerSparsity(int(w.size), int(np.count_nonzero(w)), hist)
    return SparsityReport(per_layer)


def _threshold_for_sparsity(absw: np.ndarray, target: float) -> float:
    """Smallest threshold t with #{|w| < t} >= target * size."""
    need = int(np.ceil(target * absw.size))
    if need <= 0:
        return 0.0
    vals = np.sort(absw.reshape(-1))
    # t must exceed the need-th smallest magnitude; the next distinct value
    # (or just past the max) is the smallest workable threshold.
    pivot = vals[need - 1]
    above = vals[vals > pivot]
    return float(above[0]) if above.size else float(np.nextafter(pivot, np.inf))


def prune_magnitude(
    m: NetworkModel,
    threshold: float | dict[str, float] | None = None,
    sparsity: float | dict[str, float] | None = None,
) -> tuple[NetworkModel, SparsityReport]:
    """Zero out weights with |w| < threshold (or hit a target zero fraction).

    Exactly one of ``threshold`` / ``sparsity`` must be given; either can be
    a single value for all weighted layers or a per-layer-name dict.
    """
    if (threshold is None) == (sparsity is None):
        raise ModelError("give exactly one of threshold or sparsity")

    def per_layer(spec, name):
        v = spec.get(name) if isinstance(spec, dict) else spec
        return None if v is None else float(v)

    new_weights = dict(m.weights)
    for l in m.layers:
        if not (isinstance(l, _WEIGHTED) and l.name in m.weights):
            continue
        w = m.weights[l.name]
        if np.issubdtype(w.dtype, np.integer):
            raise ModelError(f"{l.name}: prune before quantization, weights already integer")
        if threshold is not None:
            t = per_layer(threshold, l.name)
            if t is None:
                continue
            if t < 0:
                raise ModelError(f"{l.name}: negative prune threshold")
        else:
            s = per_layer(sparsity, l.name)
            if s is None:
                continue
            if not 0.0 <= s < 1.0:
                raise ModelError(f"{l.name}: sparsity target must be in [0, 1)")
            t = _threshold_for_sparsity(np.abs(w), s)
        pruned = np.where(np.abs(w) < t, np.float32(0.0), w)
        new_weights[l.name] = pruned.astype(np.float32)

    out = replace_weights(m, new_weights)
    return out, sparsity_report(out)


def replace_weights(m: NetworkModel, weights: dict[str, np.ndarray]) -> NetworkModel:
    return NetworkModel(m.input_shape, list(m.layers), weights, dict(m.biases), m.input_scale, m.mean)


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------

def quantize_network(m: NetworkModel) -> NetworkModel:
    """Quantize every weighted layer onto the sign-magnitude grid.

    The scale is 127 / max|w| per layer unless the layer carries an explicit
    weight_scale. Exact zeros stay exact zeros.
    """
    new_weights = dict(m.weights)
    new_layers: list[Layer] = []
    for l in m.layers:
        if isinstance(l, _WEIGHTED):
            if l.name not in m.weights:
                raise ModelError(f"{l.name}: no weights to quantize")
            w = m.weights[l.name]
            if np.issubdtype(w.dtype, np.integer):
                raise ModelError(f"{l.name}: already quantized")
            if l.weight_scale is not None:
                scale = float(l.weight_scale)
            else:
                max_abs = float(np.max(np.abs(w)))
                if max_abs == 0.0:
                    raise QuantizationError(f"{l.name}: all-zero layer, scale undefined")
                scale = MAG_MAX / max_abs
            new_weights[l.name] = quantize_array(w, scale)
            l = replace(l, weight_scale=scale)
        new_layers.append(l)
    return NetworkModel(m.input_shape, new_layers, new_weights, dict(m.biases), m.input_scale, m.mean)


# ---------------------------------------------------------------------------
# Image ingestion
# ---------------------------------------------------------------------------

def ingest_image(
    image, m: NetworkModel, mean=None, input_scale: float | None = None
) -> layout.TiledTensor:
    """Mean-subtract, quantize with the input scale, and tile an input image."""
    c, h, w = m.input_shape
    if isinstance(image, (str, Path)):
        image = _read_f32(Path(image), c * h * w, "input").reshape(c, h, w)
    arr = np.asarray(image, dtype=np.float64)
    if arr.shape != (c, h, w):
        raise ModelError(f"input image shape {arr.shape} != network input {(c, h, w)}")
    if mean is None:
        mean = m.mean
    if mean is not None:
        arr = arr - np.asarray(mean, dtype=np.float64).reshape(c, 1, 1)
    scale = m.input_scale if input_scale is None else float(input_scale)
    q = quantize_array(arr, scale)
    return layout.tile_tensor(q.reshape(-1), c, w, h)


# ---------------------------------------------------------------------------
# Model save/load (post prune/quantize pipeline state)
# ---------------------------------------------------------------------------

def save_model(m: NetworkModel, path) -> None:
    """Persist a model (with any weights) as an .npz archive."""
    entries = []
    for l in m.layers:
        entry = {"name": l.name, "kind": _kind_of(l), "params": _params_of(l)}
        entries.append(entry)
    doc = {
        "input": list(m.input_shape),
        "input_scale": m.input_scale,
        "layers": entries,
    }
    if m.mean is not None:
        doc["mean"] = list(map(float, m.mean))
    arrays = {"manifest": np.frombuffer(json.dumps(doc).encode(), dtype=np.uint8)}
    for name, w in m.weights.items():
        arrays[f"w::{name}"] = w
    for name, b in m.biases.items():
        arrays[f"b::{name}"] = b
    np.savez(path, **arrays)


def load_model(path) -> NetworkModel:
    """Load a manifest (.json) or a saved pipeline model (.npz)."""
    p = Path(path)
    if p.suffix == ".json":
        return load_network(p)
    with np.load(p) as z:
        doc = json.loads(bytes(z["manifest"]).decode())
        layers = [_layer_from_entry(e) for e in doc["layers"]]
        weights = {k[3:]: z[k] for k in z.files if k.startswith("w::")}
        biases = {k[3:]: z[k] for k in z.files if k.startswith("b::")}
    mean = np.asarray(doc["mean"]) if "mean" in doc else None
    return NetworkModel(
        tuple(doc["input"]), layers, weights, biases, float(doc.get("input_scale", 1.0)), mean
    )


def _kind_of(l: Layer) -> str:
    return {
        ConvLayer: "conv",
        PadLayer: "pad",
        MaxPoolLayer: "maxpool",
        FullyConnectedLayer: "fc",
        FlattenLayer: "flatten",
    }[type(l)]


def _params_of(l: Layer) -> dict:
    if isinstance(l, ConvLayer):
        p = {
            "in_channels": l.in_channels,
            "out_channels": l.out_channels,
            "kernel": l.kernel,
            "act_shift": l.act_shift,
            "relu": l.relu,
        }
        if l.weight_scale is not None:
            p["weight_scale"] = l.weight_scale
        return p
    if isinstance(l, PadLayer):
        return {"border": l.border}
    if isinstance(l, MaxPoolLayer):
        return {"window": list(l.window), "stride": list(l.stride)}
    if isinstance(l, FullyConnectedLayer):
        p = {
            "in_features": l.in_features,
            "out_features": l.out_features,
            "act_shift": l.act_shift,
            "relu": l.relu,
        }
        if l.weight_scale is not None:
            p["weight_scale"] = l.weight_scale
        return p
    return {}
