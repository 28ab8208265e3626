"""Reference implementations of the network operators, in the same integer
arithmetic as the accelerator. Intentionally naive: these are the ground
truth the engine is checked against, value for value.

Tensors here are plain numpy arrays of signed sign-magnitude values:
(channels, height, width) int16 for feature maps, flat int16 for vectors.
"""

from __future__ import annotations

import numpy as np

from . import netmodel
from .numerics import LayerQuant, requantize_array


class OracleError(ValueError):
    pass


def pad_ref(x: np.ndarray, border: int) -> np.ndarray:
    """Zero-pad the perimeter of every channel by ``border`` pixels."""
    if border < 0:
        raise OracleError("negative border")
    if border == 0:
        return x.copy()
    return np.pad(x, ((0, 0), (border, border), (border, border)))


def conv2d_ref(
    x: np.ndarray,
    weights: np.ndarray,
    bias_acc: np.ndarray | None,
    quant: LayerQuant,
) -> np.ndarray:
    """Stride-1 valid convolution with full-width accumulation.

    ``weights`` is (out, in, k, k) integer; ``bias_acc`` is the per-filter
    accumulator initialization (already on the accumulator grid).
    out(o, y, x) = requantize(bias_o + sum_c sum_ij w[o,c,i,j] * in(c, y+i, x+j))
    """
    c_in, h, w = x.shape
    f, wc, k, _ = weights.shape
    if wc != c_in:
        raise OracleError(f"weights expect {wc} channels, input has {c_in}")
    if h < k or w < k:
        raise OracleError(f"input {h}x{w} smaller than kernel {k}")
    oh, ow = h - k + 1, w - k + 1
    acc = np.zeros((f, oh, ow), dtype=np.int64)
    if bias_acc is not None:
        acc += np.asarray(bias_acc, dtype=np.int64).reshape(f, 1, 1)
    xs = x.astype(np.int64)
    ws = weights.astype(np.int64)
    for i in range(k):
        for j in range(k):
            window = xs[:, i : i + oh, j : j + ow]
            # (f, c) x (c, oh, ow) -> (f, oh, ow)
            acc += np.tensordot(ws[:, :, i, j], window, axes=(1, 0))
    return requantize_array(acc, quant)


def maxpool_ref(x: np.ndarray, window: tuple[int, int], stride: tuple[int, int]) -> np.ndarray:
    """Max over each window, signed ordering (-127 < ... < 0 < ... < 127)."""
    c, h, w = x.shape
    wh, ww = window
    sh, sw = stride
    if wh < 1 or ww < 1 or sh < 1 or sw < 1:
        raise OracleError("window and stride must be positive")
    if h < wh or w < ww:
        raise OracleError(f"input {h}x{w} smaller than window {wh}x{ww}")
    oh = (h - wh) // sh + 1
    ow = (w - ww) // sw + 1
    out = np.empty((c, oh, ow), dtype=np.int16)
    for oy in range(oh):
        for ox in range(ow):
            region = x[:, oy * sh : oy * sh + wh, ox * sw : ox * sw + ww]
            out[:, oy, ox] = region.reshape(c, -1).max(axis=1)
    return out


def fold_bias(bias: np.ndarray | None, weight_scale: float, act_scale_in: float, n: int) -> np.ndarray:
    """Real biases onto the accumulator grid: round(b * w_scale * a_scale)."""
    if bias is None:
        return np.zeros(n, dtype=np.int64)
    scaled = np.asarray(bias, dtype=np.float64) * weight_scale * act_scale_in
    return np.round(scaled).astype(np.int64)


def infer_ref(m: netmodel.NetworkModel, image: np.ndarray) -> dict[str, np.ndarray]:
    """Chain the reference operators over a quantized model.

    ``image`` is the already-quantized (c, h, w) int input. Returns the
    activation after every layer keyed by layer name; the last entry holds
    the class scores when the network ends in fully connected layers.
    """
    from .driver import run_fc_host  # host-side op shared with the compiler

    scales = m.activation_scales()
    act = np.asarray(image, dtype=np.int16)
    outputs: dict[str, np.ndarray] = {}
    for l in m.layers:
        if isinstance(l, netmodel.ConvLayer):
            if not m.is_quantized(l.name):
                raise OracleError(f"{l.name}: model must be quantized")
            quant = LayerQuant(l.weight_scale or 1.0, l.act_shift, l.relu)
            bias = fold_bias(
                m.biases.get(l.name), quant.weight_scale, scales[l.name], l.out_channels
            )
            act = conv2d_ref(act, m.weights[l.name], bias, quant)
        elif isinstance(l, netmodel.PadLayer):
            act = pad_ref(act, l.border)
        elif isinstance(l, netmodel.MaxPoolLayer):
            act = maxpool_ref(act, l.window, l.stride)
        elif isinstance(l, netmodel.FlattenLayer):
            act = act.reshape(-1).copy()
        elif isinstance(l, netmodel.FullyConnectedLayer):
            act = run_fc_host(m, l, act)
        outputs[l.name] = act
    return outputs
