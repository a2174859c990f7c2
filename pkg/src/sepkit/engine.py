"""Small fixed-architecture networks with hand-written backpropagation.

Two architectures are supported:

* ``mlp-small``: flatten, two ReLU hidden layers, linear head.
* ``cnn-small``: two 3x3 ReLU convolutions (the second with stride 2), one
  ReLU hidden dense layer and a linear head.

The *feature tap* is the activation feeding the linear head. All arithmetic
is float64. Row-wise matrix products go through :func:`_rowdot`, which makes a
sample's result independent of which other samples share its batch, so
per-sample computations are bit-reproducible under any batching.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BadMagicError, DataError, NumericalError, ShapeError, TruncatedFileError

ARCH_IDS = {"mlp-small": 1, "cnn-small": 2}

CHECKPOINT_MAGIC = b"SEPC"
CHECKPOINT_VERSION = 1
_CK_HEADER = struct.Struct("<4sHHQI")

_BLOCK = 256


def _rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` computed in zero-padded blocks of a fixed row count.

    BLAS picks different kernels depending on matrix size, so the same row can
    come out with different rounding in differently sized products. Every
    product issued here has exactly ``_BLOCK`` rows.
    """
    m = a.shape[0]
    out = np.empty((m, b.shape[1]))
    for start in range(0, m, _BLOCK):
        blk = a[start:start + _BLOCK]
        if blk.shape[0] < _BLOCK:
            padded = np.zeros((_BLOCK, a.shape[1]))
            padded[: blk.shape[0]] = blk
            out[start:] = (padded @ b)[: blk.shape[0]]
        else:
            out[start:start + _BLOCK] = blk @ b
    return out


@dataclass(frozen=True)
class ArchitectureSpec:
    """Layer layout of one of the two supported networks.

    ``hidden`` are the dense hidden widths (two for mlp-small, one for
    cnn-small); ``channels`` are the convolution widths (cnn-small only).
    ``input_offset`` is subtracted from every pixel before the first layer so
    [0, 1] images enter centred.
    """

    id: str
    input_shape: tuple[int, int, int]
    num_classes: int
    hidden: tuple[int, ...]
    channels: tuple[int, ...] = ()
    input_offset: float = 0.5
    layers: tuple = field(init=False, repr=False, compare=False)
    param_shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.id not in ARCH_IDS:
            raise ValueError(f"unknown architecture {self.id!r}; expected one of {sorted(ARCH_IDS)}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        layers, shapes = _build_layout(self)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "param_shapes", shapes)

    @property
    def arch_code(self) -> int:
        return ARCH_IDS[self.id]

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.param_shapes)

    def offsets(self) -> dict[str, tuple[int, tuple[int, ...]]]:
        """Map parameter name to (offset into the flat vector, shape)."""
        out, pos = {}, 0
        for name, shape in self.param_shapes:
            out[name] = (pos, shape)
            pos += int(np.prod(shape))
        return out


def mlp_small(input_shape, num_classes, hidden=(64, 32), input_offset=0.5) -> ArchitectureSpec:
    if len(hidden) != 2:
        raise ValueError("mlp-small has exactly two hidden layers")
    return ArchitectureSpec("mlp-small", tuple(input_shape), num_classes, tuple(hidden), (), input_offset)


def cnn_small(input_shape, num_classes, channels=(8, 16), hidden=32, input_offset=0.5) -> ArchitectureSpec:
    if len(channels) != 2:
        raise ValueError("cnn-small has exactly two convolutions")
    return ArchitectureSpec("cnn-small", tuple(input_shape), num_classes, (int(hidden),), tuple(channels),
                            input_offset)


def make_arch(arch_id: str, input_shape, num_classes, **kwargs) -> ArchitectureSpec:
    if arch_id == "mlp-small":
        return mlp_small(input_shape, num_classes, **kwargs)
    if arch_id == "cnn-small":
        return cnn_small(input_shape, num_classes, **kwargs)
    raise ValueError(f"unknown architecture {arch_id!r}")


def _conv_out(size, k=3, stride=1, pad=1):
    return (size + 2 * pad - k) // stride + 1


def _build_layout(arch):
    c, h, w = arch.input_shape
    layers, shapes = [], []
    if arch.id == "mlp-small":
        if len(arch.hidden) != 2:
            raise ValueError("mlp-small has exactly two hidden layers")
        width = c * h * w
        layers.append(("flatten",))
        for i, hid in enumerate(arch.hidden):
            layers += [("dense", f"fc{i}"), ("relu",)]
            shapes += [(f"fc{i}.w", (hid, width)), (f"fc{i}.b", (hid,))]
            width = hid
    else:
        if len(arch.channels) != 2 or len(arch.hidden) != 1:
            raise ValueError("cnn-small needs two conv widths and one hidden width")
        in_ch = c
        for i, (out_ch, stride) in enumerate(zip(arch.channels, (1, 2))):
            layers += [("conv", f"conv{i}", stride), ("relu",)]
            shapes += [(f"conv{i}.w", (out_ch, in_ch, 3, 3)), (f"conv{i}.b", (out_ch,))]
            in_ch = out_ch
            h, w = _conv_out(h, stride=stride), _conv_out(w, stride=stride)
        layers += [("flatten",), ("dense", "fc0"), ("relu",)]
        width = in_ch * h * w
        shapes += [("fc0.w", (arch.hidden[0], width)), ("fc0.b", (arch.hidden[0],))]
        width = arch.hidden[0]
    layers.append(("dense", "head"))
    shapes += [("head.w", (arch.num_classes, width)), ("head.b", (arch.num_classes,))]
    return tuple(layers), tuple(shapes)


@dataclass(frozen=True, eq=False)
class ModelCheckpoint:
    """Immutable parameter vector of an architecture at a training epoch."""

    arch: ArchitectureSpec
    params: np.ndarray
    epoch: int = 0

    def __post_init__(self):
        params = np.array(self.params, dtype=np.float64).reshape(-1)
        if params.size != self.arch.n_params:
            raise ShapeError(
                f"parameter count {params.size} does not match {self.arch.id} ({self.arch.n_params})"
            )
        if self.epoch < 0:
            raise ValueError("epoch must be >= 0")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        views = {
            name: params[off:off + int(np.prod(shape))].reshape(shape)
            for name, (off, shape) in self.arch.offsets().items()
        }
        object.__setattr__(self, "_views", views)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    @classmethod
    def zeros(cls, arch, epoch=0):
        return cls(arch, np.zeros(arch.n_params), epoch)

    @classmethod
    def from_arrays(cls, arch, arrays: dict, epoch=0):
        flat = np.zeros(arch.n_params)
        for name, (off, shape) in arch.offsets().items():
            if name in arrays:
                flat[off:off + int(np.prod(shape))] = np.asarray(arrays[name], dtype=np.float64).reshape(-1)
        return cls(arch, flat, epoch)

    def rounded(self) -> "ModelCheckpoint":
        """Copy with parameters rounded to float32, i.e. what a file stores."""
        return ModelCheckpoint(self.arch, self.params.astype(np.float32), self.epoch)

    def with_epoch(self, epoch) -> "ModelCheckpoint":
        return ModelCheckpoint(self.arch, self.params, epoch)


def init_params(arch: ArchitectureSpec, seed: int) -> ModelCheckpoint:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng([int(seed), 0x5EBC])
    flat = np.zeros(arch.n_params)
    for name, (off, shape) in arch.offsets().items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            size = int(np.prod(shape))
            flat[off:off + size] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size)
    return ModelCheckpoint(arch, flat, 0)


# ---------------------------------------------------------------------------
# forward / backward


def _as_batch(arch, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == len(arch.input_shape)
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != arch.input_shape:
        raise ShapeError(f"expected input shape [batch, {', '.join(map(str, arch.input_shape))}], got {list(x.shape)}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("input contains non-finite values", layer=0)
    return x, single


def _im2col(x, stride):
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * 9)
    return cols, ho, wo


def _col2im(dcols, x_shape, ho, wo, stride):
    b, c, h, w = x_shape
    d = dcols.reshape(b, ho, wo, c, 3, 3)
    dxp = np.zeros((b, c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


def _run(model, x, stop=None):
    """Apply layers ``[0, stop)``; returns (output, per-layer caches)."""
    layers = model.arch.layers if stop is None else model.arch.layers[:stop]
    caches = []
    if model.arch.input_offset:
        x = x - model.arch.input_offset
    for idx, layer in enumerate(layers):
        kind = layer[0]
        if kind == "flatten":
            caches.append(x.shape)
            x = x.reshape(x.shape[0], -1)
        elif kind == "relu":
            caches.append(x > 0)
            x = np.where(x > 0, x, 0.0)
        elif kind == "dense":
            w, b = model[layer[1] + ".w"], model[layer[1] + ".b"]
            caches.append(x)
            x = _rowdot(x, w.T) + b
        elif kind == "conv":
            w, b = model[layer[1] + ".w"], model[layer[1] + ".b"]
            cols, ho, wo = _im2col(x, layer[2])
            caches.append((cols, x.shape, ho, wo))
            out = _rowdot(cols, w.reshape(w.shape[0], -1).T) + b
            x = out.reshape(x.shape[0], ho, wo, w.shape[0]).transpose(0, 3, 1, 2)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite activation after layer {idx} ({kind})", layer=idx)
    return x, caches


def _backward(model, caches, grad, n_layers, want_params):
    """Backpropagate ``grad`` (w.r.t. the output of layer ``n_layers - 1``).

    Returns (input gradient, flat parameter gradient or None).
    """
    pgrad = np.zeros(model.arch.n_params) if want_params else None
    offsets = model.arch.offsets()

    def put(name, value):
        off, shape = offsets[name]
        pgrad[off:off + int(np.prod(shape))] = value.reshape(-1)

    for idx in range(n_layers - 1, -1, -1):
        layer, cache = model.arch.layers[idx], caches[idx]
        kind = layer[0]
        if kind == "flatten":
            grad = grad.reshape(cache)
        elif kind == "relu":
            grad = np.where(cache, grad, 0.0)
        elif kind == "dense":
            w = model[layer[1] + ".w"]
            if want_params:
                put(layer[1] + ".w", grad.T @ cache)
                put(layer[1] + ".b", grad.sum(axis=0))
            grad = _rowdot(grad, w)
        elif kind == "conv":
            w = model[layer[1] + ".w"]
            cols, x_shape, ho, wo = cache
            g2 = grad.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
            if want_params:
                put(layer[1] + ".w", g2.T @ cols)
                put(layer[1] + ".b", g2.sum(axis=0))
            dcols = _rowdot(g2, w.reshape(w.shape[0], -1))
            grad = _col2im(dcols, x_shape, ho, wo, layer[2])
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient at layer {idx} ({kind})", layer=idx)
    return grad, pgrad


def forward(model: ModelCheckpoint, batch) -> np.ndarray:
    """Logits of shape [batch, classes]."""
    x, _ = _as_batch(model.arch, batch)
    out, _ = _run(model, x)
    return out


def features(model: ModelCheckpoint, batch) -> np.ndarray:
    """Penultimate activation, i.e. the input of the linear head."""
    x, _ = _as_batch(model.arch, batch)
    out, _ = _run(model, x, stop=len(model.arch.layers) - 1)
    return out


def head(model: ModelCheckpoint, feats) -> np.ndarray:
    """Apply only the final linear layer."""
    feats = np.asarray(feats, dtype=np.float64)
    return _rowdot(feats, model["head.w"].T) + model["head.b"]


def predict(model: ModelCheckpoint, batch) -> np.ndarray:
    return np.argmax(forward(model, batch), axis=1)


def _targets(targets, n, num_classes):
    t = np.asarray(targets, dtype=np.int64)
    t = np.broadcast_to(t, (n,)) if t.ndim == 0 else t
    if t.shape != (n,):
        raise ShapeError(f"expected {n} targets, got shape {list(t.shape)}")
    if np.any(t < 0) or np.any(t >= num_classes):
        raise ValueError(f"target out of range [0, {num_classes})")
    return t


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def ce_loss(logits, target):
    """Cross-entropy ``-log softmax(logits)[target]``.

    Accepts a single logit vector with an integer target (returns a float) or
    a [batch, classes] array with per-row targets (returns an array).
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None] if single else z
    t = _targets(target, z2.shape[0], z2.shape[1])
    loss = -log_softmax(z2)[np.arange(len(t)), t]
    loss = np.maximum(loss, 0.0)
    return float(loss[0]) if single else loss


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _ce_logit_grad(logits, t):
    g = softmax(logits)
    g[np.arange(len(t)), t] -= 1.0
    return g


def input_gradient_ce(model: ModelCheckpoint, x, target) -> np.ndarray:
    """Gradient of each sample's CE loss (toward ``target``) w.r.t. its input."""
    xb, single = _as_batch(model.arch, x)
    t = _targets(target, xb.shape[0], model.arch.num_classes)
    logits, caches = _run(model, xb)
    n = len(model.arch.layers)
    grad, _ = _backward(model, caches, _ce_logit_grad(logits, t), n, want_params=False)
    return grad[0] if single else grad


def fa_loss(model: ModelCheckpoint, x, center) -> np.ndarray | float:
    """Mean squared error between the feature tap and ``center`` per sample."""
    xb, single = _as_batch(model.arch, x)
    c = _center_batch(model, center, xb.shape[0])
    diff = features(model, xb) - c
    loss = np.mean(diff * diff, axis=1)
    return float(loss[0]) if single else loss


def _center_batch(model, center, n):
    c = np.asarray(center, dtype=np.float64)
    d = model.arch.feature_dim
    if c.shape == (d,):
        c = np.broadcast_to(c, (n, d))
    if c.shape != (n, d):
        raise ShapeError(f"center must have shape [{d}] or [{n}, {d}], got {list(c.shape)}")
    return c


def input_gradient_fa(model: ModelCheckpoint, x, center) -> np.ndarray:
    """Gradient of the feature-alignment MSE w.r.t. the input.

    ``center`` is one feature vector or one per sample.
    """
    xb, single = _as_batch(model.arch, x)
    c = _center_batch(model, center, xb.shape[0])
    stop = len(model.arch.layers) - 1
    feats, caches = _run(model, xb, stop=stop)
    gfeat = 2.0 * (feats - c) / feats.shape[1]
    grad, _ = _backward(model, caches, gfeat, stop, want_params=False)
    return grad[0] if single else grad


def param_gradient(model: ModelCheckpoint, batch, labels, return_loss=False):
    """Gradient of the batch-mean CE loss w.r.t. the flat parameter vector."""
    xb, _ = _as_batch(model.arch, batch)
    t = _targets(labels, xb.shape[0], model.arch.num_classes)
    logits, caches = _run(model, xb)
    g = _ce_logit_grad(logits, t) / xb.shape[0]
    _, pgrad = _backward(model, caches, g, len(model.arch.layers), want_params=True)
    if return_loss:
        return pgrad, float(np.mean(ce_loss(logits, t)))
    return pgrad


# ---------------------------------------------------------------------------
# checkpoint files


def checkpoint_to_bytes(model: ModelCheckpoint) -> bytes:
    header = _CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.arch.arch_code,
                             model.arch.n_params, model.epoch)
    return header + model.params.astype("<f4").tobytes()


def checkpoint_from_bytes(data: bytes, arch: ArchitectureSpec) -> ModelCheckpoint:
    """Parse a checkpoint file. The layout does not carry input shape or class
    count, so the caller supplies the architecture and it is validated."""
    if len(data) < _CK_HEADER.size:
        raise TruncatedFileError(f"checkpoint header needs {_CK_HEADER.size} bytes, got {len(data)}")
    magic, version, code, count, epoch = _CK_HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(magic, CHECKPOINT_MAGIC)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    if code != arch.arch_code:
        raise DataError(f"checkpoint architecture id {code} does not match {arch.id} ({arch.arch_code})")
    if count != arch.n_params:
        raise DataError(f"checkpoint holds {count} parameters, {arch.id} needs {arch.n_params}")
    body = data[_CK_HEADER.size:]
    if len(body) != 4 * count:
        raise TruncatedFileError(f"expected {4 * count} parameter bytes, got {len(body)}")
    return ModelCheckpoint(arch, np.frombuffer(body, dtype="<f4"), epoch)


def save_checkpoint(model: ModelCheckpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(model))


def load_checkpoint(path, arch: ArchitectureSpec) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read(), arch)


def checkpoints_like(models: Sequence[ModelCheckpoint]) -> ArchitectureSpec:
    archs = {m.arch for m in models}
    if len(archs) != 1:
        raise ValueError("checkpoints do not share one architecture")
    return archs.pop()
