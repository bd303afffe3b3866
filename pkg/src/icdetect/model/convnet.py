"""Small convolutional feature extractor with hand-written backpropagation.

Layout is NHWC. Each block is a 3x3 same-padded convolution, ReLU and a 2x2
max-pool; global average pooling of the last block gives the feature vector
fed to the forest. A single affine unit + sigmoid sits on top during CNN
training only.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_CHANNELS = (3, 8, 16, 32)
PROB_CLAMP = 1e-7

Params = dict  # name -> ndarray, insertion order is the canonical order


class ShapeMismatch(ValueError):
    pass


def param_shapes(channels: Sequence[int] = DEFAULT_CHANNELS) -> dict:
    shapes = {}
    for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:]), start=1):
        shapes[f"conv{i}_w"] = (cout, cin, 3, 3)
        shapes[f"conv{i}_b"] = (cout,)
    shapes["head_w"] = (channels[-1],)
    shapes["head_b"] = (1,)
    return shapes


def init_params(seed: int, channels: Sequence[int] = DEFAULT_CHANNELS) -> Params:
    """He-normal conv weights, zero biases, small head."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(channels).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        elif name == "head_w":
            params[name] = rng.normal(0.0, np.sqrt(1.0 / shape[0]), shape)
        else:
            fan_in = shape[1] * 9
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
    return params


def n_blocks(params: Params) -> int:
    return sum(1 for k in params if k.startswith("conv") and k.endswith("_w"))


def feature_dim(params: Params) -> int:
    return params[f"conv{n_blocks(params)}_w"].shape[0]


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def bce_loss(p, y):
    """Elementwise binary cross-entropy and its derivative w.r.t. the logit.

    ``p`` is clamped to [1e-7, 1 - 1e-7] inside the log only; the returned
    gradient is the usual ``p - y``.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    return loss, p - y


def _im2col(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # b, h, w, c, 3, 3
    return win.reshape(b * h * w, c * 9)


def _col2im(dcols: np.ndarray, shape: tuple) -> np.ndarray:
    b, h, w, c = shape
    d = dcols.reshape(b, h, w, c, 3, 3)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + w, :] += d[..., i, j]
    return dxp[:, 1:-1, 1:-1, :]


def check_input(params: Params, x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[0] == 0:
        raise ShapeMismatch(f"expected a non-empty (batch, side, side, channels) array, got {x.shape}")
    cin = params["conv1_w"].shape[1]
    if x.shape[3] != cin:
        raise ShapeMismatch(f"expected {cin} channels, got {x.shape[3]}")
    div = 2 ** n_blocks(params)
    if x.shape[1] % div or x.shape[2] % div:
        raise ShapeMismatch(f"patch side must be divisible by {div}, got {x.shape[1:3]}")


def _head(params: Params, features: np.ndarray) -> np.ndarray:
    return (features * params["head_w"]).sum(axis=1) + params["head_b"][0]


def forward(params: Params, x, cache: Optional[list] = None):
    """``x`` is NHWC in [0, 1]. Returns ``(logits, features)``; pass a list as
    ``cache`` to keep intermediates for :func:`backward`."""
    x = np.asarray(x)
    check_input(params, x)
    dtype = params["conv1_w"].dtype
    # fixed centring to [-1, 1]; zero-mean inputs train much faster
    a = x.astype(dtype, copy=False) * dtype.type(2) - dtype.type(1)
    for i in range(1, n_blocks(params) + 1):
        w, bias = params[f"conv{i}_w"], params[f"conv{i}_b"]
        b, h, wd, c = a.shape
        cols = _im2col(a)
        # stacked per-sample products keep each sample's result independent of
        # the rest of the batch (one BLAS call shape per sample)
        z = cols.reshape(b, h * wd, -1) @ w.reshape(w.shape[0], -1).T + bias
        z = z.reshape(b, h, wd, w.shape[0])
        r = np.maximum(z, 0.0)
        blocks = r.reshape(b, h // 2, 2, wd // 2, 2, w.shape[0]).transpose(0, 1, 3, 5, 2, 4)
        blocks = blocks.reshape(b, h // 2, wd // 2, w.shape[0], 4)
        arg = blocks.argmax(axis=-1)
        pooled = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        if cache is not None:
            cache.append((a.shape, cols, z, arg))
        a = pooled
    features = a.mean(axis=(1, 2))
    logits = _head(params, features)
    if cache is not None:
        cache.append((a.shape, features))
    return logits, features


def backward(params: Params, cache: list, labels) -> tuple[float, Params]:
    """Mean BCE over the cached batch and its exact gradient for every parameter."""
    labels = np.asarray(labels, dtype=np.float64)
    pooled_shape, features = cache[-1]
    logits = _head(params, features)
    p = sigmoid(logits)
    losses, dlogit = bce_loss(p, labels)
    batch = len(labels)
    dtype = params["conv1_w"].dtype
    dlogit = (dlogit / batch).astype(dtype)
    grads = {}
    grads["head_w"] = features.T @ dlogit
    grads["head_b"] = np.array([dlogit.sum()], dtype=dtype)
    dfeat = np.outer(dlogit, params["head_w"])
    b, hp, wp, c = pooled_shape
    da = np.broadcast_to(dfeat[:, None, None, :] / (hp * wp), pooled_shape)

    for i in range(n_blocks(params), 0, -1):
        in_shape, cols, z, arg = cache[i - 1]
        w = params[f"conv{i}_w"]
        b, h, wd, _ = in_shape
        cout = w.shape[0]
        # route pooled gradient to the argmax element of each window
        dblocks = np.zeros((b, h // 2, wd // 2, cout, 4), dtype=z.dtype)
        np.put_along_axis(dblocks, arg[..., None], np.asarray(da)[..., None], axis=-1)
        dr = dblocks.reshape(b, h // 2, wd // 2, cout, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        dr = dr.reshape(b, h, wd, cout)
        dz = np.where(z > 0, dr, 0.0).reshape(-1, cout)
        grads[f"conv{i}_w"] = (dz.T @ cols).reshape(w.shape)
        grads[f"conv{i}_b"] = dz.sum(axis=0)
        if i > 1:
            dcols = dz @ w.reshape(cout, -1)
            da = _col2im(dcols, in_shape)
    ordered = {k: grads[k] for k in params}
    return float(losses.mean()), ordered


def predict_logits(params: Params, x, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Forward in fixed-size chunks; chunking never depends on the caller's
    worker count, so results are bit-stable."""
    x = np.asarray(x)
    logits, feats = [], []
    for s in range(0, len(x), batch_size):
        lg, ft = forward(params, x[s:s + batch_size])
        logits.append(lg)
        feats.append(ft)
    if not logits:
        return np.zeros(0), np.zeros((0, feature_dim(params)))
    return np.concatenate(logits), np.concatenate(feats)


def to_input(patches: np.ndarray, dtype=np.float64) -> np.ndarray:
    """uint8 RGB patches -> float array in [0, 1]."""
    return np.asarray(patches, dtype=dtype) / 255.0
