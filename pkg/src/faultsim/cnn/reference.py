"""Sequential binary32 reference for CNN inference.

Each output element is computed with the same operation order and rounding as
the compiled kernels: reductions run in ascending index order, multiply-adds
are fused, exp is ``exp2(x * log2(e))``.  It is the golden-run cross-check
and the oracle the simulator is tested against.
"""
from __future__ import annotations

import numpy as np

from .. import fp32
from .model import Conv, Dense, MaxPool, Model, Relu, Softmax, output_shape

F32 = np.float32


def _conv(layer: Conv, x, w, b):
    cin, h, wd = x.shape
    co, ho, wo = output_shape(layer, x.shape)
    k, s, p = layer.kernel_size, layer.stride, layer.padding
    w = w.reshape(co, cin, k, k)
    xp = np.zeros((cin, h + 2 * p, wd + 2 * p), F32)
    xp[:, p:p + h, p:p + wd] = x
    if b is None:
        acc = np.zeros((co, ho, wo), F32)
    else:
        acc = np.broadcast_to(b.reshape(co, 1, 1), (co, ho, wo)).astype(F32)
    for ci in range(cin):
        for ky in range(k):
            for kx in range(k):
                patch = xp[ci, ky:ky + s * (ho - 1) + 1:s, kx:kx + s * (wo - 1) + 1:s]
                acc = fp32.fma(w[:, ci, ky, kx].reshape(co, 1, 1), patch[None], acc)
    return acc


def _dense(layer: Dense, x, w, b):
    x = x.reshape(-1)
    w = w.reshape(layer.out_features, x.size)
    acc = np.zeros(layer.out_features, F32) if b is None else b.astype(F32).copy()
    for i in range(x.size):
        acc = fp32.fma(w[:, i], x[i], acc)
    return acc


def _maxpool(layer: MaxPool, x):
    c, ho, wo = output_shape(layer, x.shape)
    k, s = layer.size, layer.stride
    m = None
    for ky in range(k):
        for kx in range(k):
            v = x[:, ky:ky + s * (ho - 1) + 1:s, kx:kx + s * (wo - 1) + 1:s]
            m = v.copy() if m is None else fp32.fmax(m, v)
    return m


def _softmax(x):
    flat = x.reshape(-1)
    m = flat[0]
    for j in range(1, flat.size):
        m = fp32.fmax(m, flat[j])
    d = fp32.fma(np.full(flat.shape, m, F32), F32(-1.0), flat)
    e = fp32.exp2(fp32.mul(d, fp32.LOG2E))
    s = e[0]
    for j in range(1, e.size):
        s = fp32.add(s, e[j])
    return fp32.mul(e, fp32.rcp(s)).reshape(x.shape)


def reference_layer(layer, x: np.ndarray, weights=None, bias=None) -> np.ndarray:
    """Output of one layer on float32 input ``x``."""
    x = np.asarray(x, F32)
    if isinstance(layer, Conv):
        return _conv(layer, x, weights, bias)
    if isinstance(layer, Dense):
        return _dense(layer, x, weights, bias)
    if isinstance(layer, MaxPool):
        return _maxpool(layer, x)
    if isinstance(layer, Relu):
        return fp32.fmax(x, F32(0.0))
    if isinstance(layer, Softmax):
        return _softmax(x)
    raise TypeError(f"unknown layer {layer!r}")


def reference_activations(model: Model, image: np.ndarray) -> list[np.ndarray]:
    acts = [np.asarray(image, F32).reshape(model.input_shape)]
    for layer, w, b in zip(model.layers, model.weights, model.biases):
        acts.append(reference_layer(layer, acts[-1], w, b))
    return acts


def reference_infer(model: Model, image: np.ndarray) -> np.ndarray:
    """Final-layer output vector for ``image``."""
    return reference_activations(model, image)[-1].reshape(-1).astype(F32)
