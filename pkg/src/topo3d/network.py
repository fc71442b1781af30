"""Hand-written 3D convolutional encoder-decoder.

Single-sample tensors of shape (channels, nx, ny, nz), float64 math, exact
reverse-mode gradients derived layer by layer. Convolutions run through a
cached im2col index table and a bincount scatter, so forward and backward
are deterministic matmuls. Transpose convolution is realized as a
zero-stuffed convolution with the spatially flipped kernel.

The raw network output passes tanh (a config invariant), is mapped to a
density by (y + 1) / 2 and clamped to [eps, 1 - eps] so the cross-entropy
loss stays finite.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

LAYER_KINDS = ("conv3d", "maxpool", "transpose_conv3d")
ACTIVATIONS = ("relu", "tanh", "none")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError("kernel/stride must be >= 1 and padding >= 0")
        if self.kind == "transpose_conv3d" and self.padding > self.kernel - 1:
            raise ValueError("transpose conv needs padding <= kernel - 1")
        if self.kind == "maxpool" and self.kernel != self.stride:
            raise ValueError("only kernel == stride pooling is supported")

    @property
    def parametric(self) -> bool:
        return self.kind != "maxpool"

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        """Standard conv/pool/transpose-conv spatial arithmetic."""
        k, s, p = self.kernel, self.stride, self.padding
        if self.kind == "transpose_conv3d":
            return tuple((n - 1) * s + k - 2 * p for n in shape)
        out = tuple((n + 2 * p - k) // s + 1 for n in shape)
        if self.kind == "maxpool" and any(n % k for n in shape):
            raise ValueError(f"pool kernel {k} does not divide shape {shape}")
        if any(n < 1 for n in out):
            raise ValueError(f"layer {self} collapses shape {shape}")
        return out


@dataclass(frozen=True)
class NetworkConfig:
    """Ordered layer stack; all convolutional, tanh on the last layer."""

    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        if self.layers[0].in_channels > 8:
            raise ValueError("input channel count must be <= 8")
        if self.layers[-1].activation != "tanh":
            raise ValueError("final activation must be tanh")
        chans = self.layers[0].in_channels
        for spec in self.layers:
            if spec.parametric:
                if spec.in_channels != chans:
                    raise ValueError(
                        f"layer {spec} expects {spec.in_channels} channels, "
                        f"previous layer emits {chans}")
                chans = spec.out_channels
        if chans != 1:
            raise ValueError("network must emit a single density channel")

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        for spec in self.layers:
            shape = spec.out_shape(shape)
        return shape

    def to_dict(self) -> dict:
        return {"layers": [vars(s) for s in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(tuple(LayerSpec(**s) for s in d["layers"]))


def reference_config(in_channels: int) -> NetworkConfig:
    """Encoder (conv+pool) / decoder (transpose conv + convs) default stack."""
    return NetworkConfig((
        LayerSpec("conv3d", in_channels, 16, kernel=3, padding=1, activation="relu"),
        LayerSpec("maxpool", kernel=2, stride=2),
        LayerSpec("conv3d", 16, 32, kernel=3, padding=1, activation="relu"),
        LayerSpec("transpose_conv3d", 32, 16, kernel=2, stride=2, activation="relu"),
        LayerSpec("conv3d", 16, 8, kernel=3, padding=1, activation="relu"),
        LayerSpec("conv3d", 8, 1, kernel=3, padding=1, activation="tanh"),
    ))


@dataclass
class NetworkParameters:
    """Kernel and bias tensors aligned with the parametric layers."""

    tensors: list[tuple[np.ndarray, np.ndarray] | None]

    def zeros_like(self) -> "NetworkParameters":
        return NetworkParameters([
            None if t is None else (np.zeros_like(t[0]), np.zeros_like(t[1]))
            for t in self.tensors
        ])

    def flat(self):
        for t in self.tensors:
            if t is not None:
                yield t[0]
                yield t[1]

    def validate_finite(self):
        for arr in self.flat():
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite network parameter")


def init_params(config: NetworkConfig, rng: np.random.Generator) -> NetworkParameters:
    """Uniform fan-in initialization, biases zero."""
    tensors = []
    for spec in config.layers:
        if not spec.parametric:
            tensors.append(None)
            continue
        k = spec.kernel
        if spec.kind == "conv3d":
            shape = (spec.out_channels, spec.in_channels, k, k, k)
        else:
            shape = (spec.in_channels, spec.out_channels, k, k, k)
        bound = 1.0 / np.sqrt(spec.in_channels * k ** 3)
        w = rng.uniform(-bound, bound, size=shape)
        tensors.append((w, np.zeros(spec.out_channels)))
    return NetworkParameters(tensors)


# ---------------------------------------------------------------------------
# conv primitive

_IM2COL_CACHE: dict = {}


def _im2col_index(c_in: int, shape: tuple[int, int, int], kernel: int,
                  stride: int, padding: int) -> tuple[np.ndarray, tuple, tuple]:
    key = (c_in, shape, kernel, stride, padding)
    hit = _IM2COL_CACHE.get(key)
    if hit is not None:
        return hit
    px, py, pz = (n + 2 * padding for n in shape)
    ox, oy, oz = ((n + 2 * padding - kernel) // stride + 1 for n in shape)
    # flat indices of every patch element in the padded volume
    kx, ky, kz = np.meshgrid(np.arange(kernel), np.arange(kernel),
                             np.arange(kernel), indexing="ij")
    cc = np.repeat(np.arange(c_in), kernel ** 3)
    kx = np.tile(kx.ravel(), c_in)
    ky = np.tile(ky.ravel(), c_in)
    kz = np.tile(kz.ravel(), c_in)
    bx, by, bz = np.meshgrid(np.arange(ox) * stride, np.arange(oy) * stride,
                             np.arange(oz) * stride, indexing="ij")
    bx, by, bz = bx.ravel(), by.ravel(), bz.ravel()
    idx = (((cc[:, None] * px + kx[:, None] + bx[None, :]) * py
            + ky[:, None] + by[None, :]) * pz
           + kz[:, None] + bz[None, :])
    result = (idx, (px, py, pz), (ox, oy, oz))
    _IM2COL_CACHE[key] = result
    return result


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                  stride: int, padding: int):
    c_out, c_in, k, _, _ = w.shape
    idx, padded, out_shape = _im2col_index(c_in, x.shape[1:], k, stride, padding)
    xp = np.pad(x, ((0, 0),) + ((padding, padding),) * 3) if padding else x
    cols = xp.reshape(-1)[idx]
    out = (w.reshape(c_out, -1) @ cols + b[:, None]).reshape((c_out,) + out_shape)
    cache = (cols, w, x.shape, idx, padded, stride, padding)
    return out, cache


def _conv_backward(dout: np.ndarray, cache):
    cols, w, x_shape, idx, padded, stride, padding = cache
    c_out = dout.shape[0]
    dmat = dout.reshape(c_out, -1)
    dw = (dmat @ cols.T).reshape(w.shape)
    db = dmat.sum(axis=1)
    dcols = w.reshape(c_out, -1).T @ dmat
    flat = np.bincount(idx.ravel(), weights=dcols.ravel(),
                       minlength=x_shape[0] * padded[0] * padded[1] * padded[2])
    dxp = flat.reshape((x_shape[0],) + padded)
    if padding:
        dxp = dxp[:, padding:-padding, padding:-padding, padding:-padding]
    return dxp, dw, db


def _flip_kernel(w: np.ndarray) -> np.ndarray:
    # (c_in, c_out, k, k, k) -> (c_out, c_in, k, k, k) with reversed taps
    return np.flip(w, axis=(2, 3, 4)).transpose(1, 0, 2, 3, 4)


def _stuff(x: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return x
    c, a, b, d = x.shape
    out = np.zeros((c, (a - 1) * stride + 1, (b - 1) * stride + 1,
                    (d - 1) * stride + 1))
    out[:, ::stride, ::stride, ::stride] = x
    return out


def _layer_forward(spec: LayerSpec, tensors, x: np.ndarray):
    if spec.kind == "conv3d":
        w, b = tensors
        out, cache = _conv_forward(x, w, b, spec.stride, spec.padding)
    elif spec.kind == "transpose_conv3d":
        w, b = tensors
        stuffed = _stuff(x, spec.stride)
        out, conv_cache = _conv_forward(
            stuffed, np.ascontiguousarray(_flip_kernel(w)), b,
            stride=1, padding=spec.kernel - 1 - spec.padding)
        cache = (conv_cache, x.shape, spec.stride)
    else:
        k = spec.kernel
        c, a, b_, d = x.shape
        blocks = (x.reshape(c, a // k, k, b_ // k, k, d // k, k)
                  .transpose(0, 1, 3, 5, 2, 4, 6)
                  .reshape(c, a // k, b_ // k, d // k, k ** 3))
        arg = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        cache = (arg, x.shape, k)

    pre = out
    if spec.activation == "relu":
        out = np.maximum(pre, 0.0)
        act_cache = pre
    elif spec.activation == "tanh":
        out = np.tanh(pre)
        act_cache = out
    else:
        act_cache = None
    return out, (cache, act_cache)


def _layer_backward(spec: LayerSpec, caches, dout: np.ndarray):
    cache, act_cache = caches
    if spec.activation == "relu":
        dout = dout * (act_cache > 0)
    elif spec.activation == "tanh":
        dout = dout * (1.0 - act_cache ** 2)

    if spec.kind == "conv3d":
        return _conv_backward(dout, cache)
    if spec.kind == "transpose_conv3d":
        conv_cache, x_shape, stride = cache
        dstuffed, dw_flip, db = _conv_backward(dout, conv_cache)
        dx = dstuffed[:, ::stride, ::stride, ::stride]
        dw = _flip_kernel(dw_flip)  # flipping is an involution
        return dx, dw, db
    arg, x_shape, k = cache
    c, a, b_, d = x_shape
    dblocks = np.zeros((c, a // k, b_ // k, d // k, k ** 3))
    np.put_along_axis(dblocks, arg[..., None], dout[..., None], axis=-1)
    dx = (dblocks.reshape(c, a // k, b_ // k, d // k, k, k, k)
          .transpose(0, 1, 4, 2, 5, 3, 6)
          .reshape(x_shape))
    return dx, None, None


def _forward_with_caches(config: NetworkConfig, params: NetworkParameters,
                         channels: np.ndarray, clamp_eps: float):
    x = np.asarray(channels, dtype=float)
    if x.ndim != 4 or x.shape[0] != config.in_channels:
        raise ValueError(
            f"input must be ({config.in_channels}, nx, ny, nz), got {x.shape}")
    expected = config.output_shape(x.shape[1:])
    if expected != x.shape[1:]:
        raise ValueError(
            f"config maps spatial shape {x.shape[1:]} to {expected}; "
            "encoder and decoder are unbalanced for this grid")
    caches = []
    for spec, tensors in zip(config.layers, params.tensors):
        x, cache = _layer_forward(spec, tensors, x)
        caches.append(cache)
    raw = x[0]  # single output channel, already through tanh
    density = (raw + 1.0) / 2.0
    clamped = np.clip(density, clamp_eps, 1.0 - clamp_eps)
    inside = (density > clamp_eps) & (density < 1.0 - clamp_eps)
    return clamped, inside, caches


def forward(config: NetworkConfig, params: NetworkParameters,
            channels: np.ndarray, clamp_eps: float = 1e-7) -> np.ndarray:
    """Predicted density field in [eps, 1 - eps], same grid as the input."""
    pred, _, _ = _forward_with_caches(config, params, channels, clamp_eps)
    return pred


def loss_value(pred: np.ndarray, target: np.ndarray, beta: float) -> float:
    """Mean binary cross entropy plus beta times mean squared error."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError("prediction and target shapes differ")
    if pred.min() <= 0.0 or pred.max() >= 1.0:
        raise ValueError("predictions must lie strictly inside (0, 1)")
    bce = -np.mean(target * np.log(pred) + (1 - target) * np.log(1 - pred))
    mse = np.mean((pred - target) ** 2)
    return float(bce + beta * mse)


def backward(config: NetworkConfig, params: NetworkParameters,
             channels: np.ndarray, target: np.ndarray, beta: float,
             clamp_eps: float = 1e-7):
    """Loss, exact parameter gradients, and the prediction for one sample."""
    pred, inside, caches = _forward_with_caches(config, params, channels,
                                                clamp_eps)
    target = np.asarray(target, dtype=float)
    loss = loss_value(pred, target, beta)

    n = pred.size
    dpred = (-(target / pred) + (1 - target) / (1 - pred)) / n
    dpred += beta * 2.0 * (pred - target) / n
    # clamp passes gradient only where it acted as identity
    draw = np.where(inside, dpred * 0.5, 0.0)

    grads = params.zeros_like()
    dx = draw[None, ...]
    for i in range(len(config.layers) - 1, -1, -1):
        dx, dw, db = _layer_backward(config.layers[i], caches[i], dx)
        if dw is not None:
            grads.tensors[i][0][...] = dw
            grads.tensors[i][1][...] = db
    return loss, grads, pred


def predict(config: NetworkConfig, params: NetworkParameters,
            channels: np.ndarray, threshold: float = 0.5,
            clamp_eps: float = 1e-7) -> tuple[np.ndarray, np.ndarray]:
    """Float density prediction and its thresholded binary structure."""
    pred = forward(config, params, channels, clamp_eps)
    return pred, (pred >= threshold).astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoint io

CHECKPOINT_MAGIC = b"TOPO3DNN"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sII")  # magic, version, json byte length


class CheckpointError(Exception):
    pass


def save_checkpoint(path, config: NetworkConfig, params: NetworkParameters,
                    channel_ids, extras: dict | None = None):
    meta = {
        "config": config.to_dict(),
        "channel_ids": list(channel_ids),
        "extras": extras or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for w, b in (t for t in params.tensors if t is not None):
            fh.write(np.asarray(w, dtype="<f4").tobytes())
            fh.write(np.asarray(b, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read(_CKPT_HEADER.size)
        if len(raw) != _CKPT_HEADER.size:
            raise CheckpointError("truncated checkpoint header")
        magic, version, blob_len = _CKPT_HEADER.unpack(raw)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        meta = json.loads(fh.read(blob_len).decode())
        config = NetworkConfig.from_dict(meta["config"])
        tensors = []
        for spec in config.layers:
            if not spec.parametric:
                tensors.append(None)
                continue
            k = spec.kernel
            if spec.kind == "conv3d":
                shape = (spec.out_channels, spec.in_channels, k, k, k)
            else:
                shape = (spec.in_channels, spec.out_channels, k, k, k)
            count = int(np.prod(shape))
            w = np.frombuffer(fh.read(count * 4), dtype="<f4")
            b = np.frombuffer(fh.read(spec.out_channels * 4), dtype="<f4")
            if w.size != count or b.size != spec.out_channels:
                raise CheckpointError("truncated checkpoint payload")
            tensors.append((w.astype(float).reshape(shape), b.astype(float)))
    params = NetworkParameters(tensors)
    params.validate_finite()
    return config, params, meta["channel_ids"], meta["extras"]
