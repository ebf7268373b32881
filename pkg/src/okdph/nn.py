"""Small float64 network substrate: specs, flat parameter vectors, forward,
analytic backward and SGD with momentum.

Networks are plain chains of dense, conv2d, relu, maxpool2d and flatten
layers. Parameters live in one flat ``float64`` array so that students can be
averaged, hybridized and projected without touching layer structure.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KINDS = ("dense", "conv2d", "relu", "maxpool2d", "flatten")


class SpecError(ValueError):
    """Raised when a network specification does not chain."""


class LayoutError(ValueError):
    """Raised when two parameter vectors do not share a layout."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    n_in: int = 0
    n_out: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    pool: int = 0

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "dense":
            d.update(n_in=self.n_in, n_out=self.n_out)
        elif self.kind == "conv2d":
            d.update(n_in=self.n_in, n_out=self.n_out, kernel=self.kernel,
                     stride=self.stride, padding=self.padding)
        elif self.kind == "maxpool2d":
            d.update(pool=self.pool)
        return d


def dense(n_in: int, n_out: int) -> LayerSpec:
    return LayerSpec("dense", n_in=n_in, n_out=n_out)


def conv2d(c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec("conv2d", n_in=c_in, n_out=c_out, kernel=kernel, stride=stride, padding=padding)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool2d(pool: int = 2) -> LayerSpec:
    return LayerSpec("maxpool2d", pool=pool)


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))

    def to_dict(self) -> dict:
        return {
            "layers": [layer.to_dict() for layer in self.layers],
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = tuple(LayerSpec(**layer) for layer in d["layers"])
        return cls(layers, tuple(d["input_shape"]), int(d["num_classes"]))

    def digest(self) -> str:
        """sha256 over the canonical JSON form; identifies the architecture."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _layer_name(spec: NetworkSpec, i: int) -> str:
    if i < 0:
        return "input"
    return f"layer {i} ({spec.layers[i].kind})"


def validate(spec: NetworkSpec) -> list[tuple[int, ...]]:
    """Check that layer shapes chain; return the output shape of every layer."""
    if spec.num_classes < 2:
        raise SpecError(f"num_classes must be >= 2, got {spec.num_classes}")
    if not spec.layers:
        raise SpecError("network has no layers")
    shapes = []
    shape = spec.input_shape
    for i, layer in enumerate(spec.layers):
        where = f"{_layer_name(spec, i - 1)} -> {_layer_name(spec, i)}"
        if layer.kind not in KINDS:
            raise SpecError(f"{where}: unknown layer kind {layer.kind!r}")
        if layer.kind == "dense":
            if len(shape) != 1 or shape[0] != layer.n_in:
                raise SpecError(f"{where}: dense expects ({layer.n_in},), got {shape}")
            if layer.n_out < 1:
                raise SpecError(f"{where}: dense n_out must be >= 1")
            shape = (layer.n_out,)
        elif layer.kind == "conv2d":
            if len(shape) != 3 or shape[0] != layer.n_in:
                raise SpecError(f"{where}: conv2d expects ({layer.n_in}, H, W), got {shape}")
            if layer.kernel < 1 or layer.stride < 1 or layer.padding < 0 or layer.n_out < 1:
                raise SpecError(f"{where}: bad conv2d geometry {layer}")
            h = (shape[1] + 2 * layer.padding - layer.kernel) // layer.stride + 1
            w = (shape[2] + 2 * layer.padding - layer.kernel) // layer.stride + 1
            if h < 1 or w < 1:
                raise SpecError(f"{where}: kernel larger than padded input {shape}")
            shape = (layer.n_out, h, w)
        elif layer.kind == "maxpool2d":
            if len(shape) != 3 or layer.pool < 1:
                raise SpecError(f"{where}: maxpool2d expects (C, H, W), got {shape}")
            if shape[1] % layer.pool or shape[2] % layer.pool:
                raise SpecError(f"{where}: spatial size {shape[1:]} not divisible by pool {layer.pool}")
            shape = (shape[0], shape[1] // layer.pool, shape[2] // layer.pool)
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        shapes.append(shape)
    if shape != (spec.num_classes,):
        raise SpecError(
            f"{_layer_name(spec, len(spec.layers) - 1)} -> output: emits {shape}, "
            f"expected ({spec.num_classes},) logits")
    return shapes


def mlp(sizes: list[int]) -> NetworkSpec:
    """Dense/ReLU stack; ``sizes`` includes input width and class count."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(dense(a, b))
        if i < len(sizes) - 2:
            layers.append(relu())
    return NetworkSpec(tuple(layers), (sizes[0],), sizes[-1])


def small_cnn(input_shape: tuple[int, int, int], channels: list[int], num_classes: int) -> NetworkSpec:
    """conv3x3(pad 1)/ReLU/maxpool2 blocks followed by one dense classifier."""
    c, h, w = input_shape
    layers = []
    for c_out in channels:
        layers += [conv2d(c, c_out, 3, padding=1), relu(), maxpool2d(2)]
        c, h, w = c_out, h // 2, w // 2
    layers += [flatten(), dense(c * h * w, num_classes)]
    return NetworkSpec(tuple(layers), tuple(input_shape), num_classes)


# ---------------------------------------------------------------------------
# flat parameter vectors


@dataclass(frozen=True)
class Slot:
    layer: int
    name: str  # "W" or "b"
    offset: int
    length: int
    shape: tuple[int, ...]


def make_layout(spec: NetworkSpec) -> tuple[Slot, ...]:
    validate(spec)
    slots = []
    offset = 0
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            shapes = {"W": (layer.n_in, layer.n_out), "b": (layer.n_out,)}
        elif layer.kind == "conv2d":
            shapes = {"W": (layer.n_out, layer.n_in, layer.kernel, layer.kernel), "b": (layer.n_out,)}
        else:
            continue
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            slots.append(Slot(i, name, offset, n, shape))
            offset += n
    return tuple(slots)


def layout_to_json(layout: tuple[Slot, ...]) -> list[dict]:
    return [{"layer": s.layer, "name": s.name, "offset": s.offset,
             "length": s.length, "shape": list(s.shape)} for s in layout]


def layout_from_json(items: list[dict]) -> tuple[Slot, ...]:
    return tuple(Slot(d["layer"], d["name"], d["offset"], d["length"], tuple(d["shape"])) for d in items)


@dataclass
class ParamVector:
    """Flat float64 parameters (or gradients) plus the slot layout."""

    values: np.ndarray
    layout: tuple[Slot, ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != sum(s.length for s in self.layout):
            raise LayoutError(
                f"values of size {self.values.size} do not match layout total "
                f"{sum(s.length for s in self.layout)}")

    def __len__(self) -> int:
        return self.values.size

    def view(self, layer: int, name: str) -> np.ndarray:
        for s in self.layout:
            if s.layer == layer and s.name == name:
                return self.values[s.offset:s.offset + s.length].reshape(s.shape)
        raise KeyError((layer, name))

    def arrays(self) -> list[np.ndarray]:
        return [self.values[s.offset:s.offset + s.length].reshape(s.shape).copy() for s in self.layout]

    @classmethod
    def from_arrays(cls, layout: tuple[Slot, ...], arrays: list[np.ndarray]) -> "ParamVector":
        if len(arrays) != len(layout):
            raise LayoutError(f"expected {len(layout)} arrays, got {len(arrays)}")
        for s, a in zip(layout, arrays):
            if tuple(np.shape(a)) != s.shape:
                raise LayoutError(f"layer {s.layer} {s.name}: shape {np.shape(a)} != {s.shape}")
        flat = np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)
        return cls(flat, layout)

    def like(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def locate(self, index: int) -> str:
        for s in self.layout:
            if s.offset <= index < s.offset + s.length:
                return f"layer {s.layer} {s.name}[{np.unravel_index(index - s.offset, s.shape)}]"
        raise IndexError(index)


GradVector = ParamVector


def check_same_layout(vectors: list[ParamVector]) -> None:
    first = vectors[0].layout
    for k, v in enumerate(vectors[1:], start=1):
        if v.layout != first:
            raise LayoutError(f"parameter vector {k} has a different layout from vector 0")


def init_network(spec: NetworkSpec, seed: int) -> ParamVector:
    """He-style uniform init (bound sqrt(6 / fan_in)) for weights, zero biases."""
    layout = make_layout(spec)
    rng = np.random.default_rng(seed)
    values = np.zeros(sum(s.length for s in layout))
    for s in layout:
        if s.name != "W":
            continue
        fan_in = s.shape[0] if len(s.shape) == 2 else int(np.prod(s.shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        values[s.offset:s.offset + s.length] = rng.uniform(-bound, bound, s.length)
    return ParamVector(values, layout)


def zeros_like(params: ParamVector) -> ParamVector:
    return ParamVector(np.zeros_like(params.values), params.layout)


# ---------------------------------------------------------------------------
# forward / backward


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(dcols: np.ndarray, x_shape: tuple, k: int, stride: int, padding: int,
            ho: int, wo: int) -> np.ndarray:
    b, c, h, w = x_shape
    d = dcols.reshape(b, ho, wo, c, k, k)
    dx = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def _check_input(spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match network input {spec.input_shape}")
    return x


def _forward(spec: NetworkSpec, params: ParamVector, x: np.ndarray, keep: bool):
    cache = []
    h = _check_input(spec, x)
    for i, layer in enumerate(spec.layers):
        if layer.kind == "dense":
            W, b = params.view(i, "W"), params.view(i, "b")
            cache.append(h if keep else None)
            h = h @ W + b
        elif layer.kind == "conv2d":
            W, b = params.view(i, "W"), params.view(i, "b")
            cols, ho, wo = _im2col(h, layer.kernel, layer.stride, layer.padding)
            cache.append((cols, h.shape, ho, wo) if keep else None)
            out = cols @ W.reshape(layer.n_out, -1).T + b
            h = out.reshape(h.shape[0], ho, wo, layer.n_out).transpose(0, 3, 1, 2)
        elif layer.kind == "relu":
            cache.append(h > 0 if keep else None)
            h = np.maximum(h, 0.0)
        elif layer.kind == "maxpool2d":
            p = layer.pool
            bsz, c, hh, ww = h.shape
            r = h.reshape(bsz, c, hh // p, p, ww // p, p).transpose(0, 1, 2, 4, 3, 5)
            r = r.reshape(bsz, c, hh // p, ww // p, p * p)
            idx = r.argmax(axis=-1)
            cache.append((idx, h.shape) if keep else None)
            h = np.take_along_axis(r, idx[..., None], axis=-1)[..., 0]
        elif layer.kind == "flatten":
            cache.append(h.shape if keep else None)
            h = h.reshape(h.shape[0], -1)
    return h, cache


def forward(spec: NetworkSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Raw logits of shape (B, C)."""
    return _forward(spec, params, x, keep=False)[0]


def forward_with_cache(spec: NetworkSpec, params: ParamVector, x: np.ndarray):
    return _forward(spec, params, x, keep=True)


def backward(spec: NetworkSpec, params: ParamVector, x: np.ndarray, dlogits: np.ndarray,
             cache=None) -> ParamVector:
    """Gradient w.r.t. every parameter given dLoss/dlogits.

    ``dlogits`` is expected to already carry the 1/B batch-mean factor, as the
    loss functions in :mod:`okdph.losses` return it.
    """
    x = _check_input(spec, x)
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != (x.shape[0], spec.num_classes):
        raise ValueError(f"logit gradient shape {dlogits.shape} != {(x.shape[0], spec.num_classes)}")
    if cache is None:
        _, cache = _forward(spec, params, x, keep=True)
    grad = np.zeros_like(params.values)
    g = ParamVector(grad, params.layout)
    d = dlogits
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        c = cache[i]
        if layer.kind == "dense":
            W = params.view(i, "W")
            g.view(i, "W")[...] = c.T @ d
            g.view(i, "b")[...] = d.sum(axis=0)
            if i:
                d = d @ W.T
        elif layer.kind == "conv2d":
            cols, x_shape, ho, wo = c
            W = params.view(i, "W")
            dflat = d.transpose(0, 2, 3, 1).reshape(-1, layer.n_out)
            g.view(i, "W")[...] = (dflat.T @ cols).reshape(W.shape)
            g.view(i, "b")[...] = dflat.sum(axis=0)
            if i:
                dcols = dflat @ W.reshape(layer.n_out, -1)
                d = _col2im(dcols, x_shape, layer.kernel, layer.stride, layer.padding, ho, wo)
        elif layer.kind == "relu":
            d = d * c
        elif layer.kind == "maxpool2d":
            idx, x_shape = c
            p = layer.pool
            bsz, ch, hh, ww = x_shape
            r = np.zeros((bsz, ch, hh // p, ww // p, p * p))
            np.put_along_axis(r, idx[..., None], d[..., None], axis=-1)
            d = r.reshape(bsz, ch, hh // p, ww // p, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)
        elif layer.kind == "flatten":
            d = d.reshape(c)
    return g


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class SgdState:
    buffer: np.ndarray
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("SGD coefficients must be non-negative")

    @classmethod
    def for_params(cls, params: ParamVector, lr: float, momentum: float = 0.0,
                   weight_decay: float = 0.0) -> "SgdState":
        return cls(np.zeros_like(params.values), lr, momentum, weight_decay)


def sgd_step(params: ParamVector, grads: ParamVector, state: SgdState) -> ParamVector:
    """Classical momentum with L2 decay folded into the gradient.

    v <- momentum * v + (g + wd * theta);  theta <- theta - lr * v.
    Updates ``state.buffer`` in place and returns new parameters.
    """
    if grads.layout != params.layout or state.buffer.shape != params.values.shape:
        raise LayoutError("gradient / momentum buffer layout does not match parameters")
    bad = ~np.isfinite(grads.values)
    if bad.any():
        raise FloatingPointError(f"non-finite gradient at {grads.locate(int(np.argmax(bad)))}")
    step = grads.values + state.weight_decay * params.values if state.weight_decay else grads.values
    state.buffer = state.momentum * state.buffer + step
    return ParamVector(params.values - state.lr * state.buffer, params.layout)
