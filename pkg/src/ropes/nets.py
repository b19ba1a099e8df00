"""Declarative network construction, initialization, and the Adam step.

Networks are validated at build time by pushing shapes through the layer
chain, so training never hits a runtime shape error.  The forward pass is
written against the generic tensor ops and therefore also accepts forward-mode
duals, which is what makes the decoder Jacobian-vector products differentiable.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T

_KINDS = {"conv", "conv_transpose", "dense", "relu", "group_norm", "res_block",
          "flatten", "reshape"}


class ShapeChainError(ValueError):
    """Layer chain is inconsistent; message names the offending layer."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    features: int = None
    kernel: int = 3
    stride: int = 1
    groups: int = None
    padding: str = "SAME"
    shape: tuple = None  # for reshape
    init_gain: float = None  # multiplies the fan-in weight scale
    bias_init: float = None  # constant bias start, instead of zero

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for attr in ("features", "kernel", "stride", "groups"):
            v = getattr(self, attr)
            if v is not None and v <= 0:
                raise ValueError(f"{self.kind}: {attr} must be positive")
        if self.shape is not None:
            object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))


def _default_groups(channels):
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer chain with a declared input shape (without batch dim)."""

    layers: tuple
    input_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.output_shape()  # validates the whole chain

    def output_shape(self):
        shape = self.input_shape
        for idx, layer in enumerate(self.layers):
            shape = _infer_shape(shape, layer, idx)
        return shape

    def to_json(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": [
                {k: (list(v) if isinstance(v, tuple) else v)
                 for k, v in asdict(l).items() if v is not None}
                for l in self.layers
            ],
        }

    @classmethod
    def from_json(cls, obj):
        layers = []
        for l in obj["layers"]:
            l = dict(l)
            if "shape" in l:
                l["shape"] = tuple(l["shape"])
            layers.append(LayerSpec(**l))
        return cls(tuple(layers), tuple(obj["input_shape"]))


def _infer_shape(shape, layer, idx):
    kind = layer.kind
    where = f"layer {idx} ({kind})"
    if kind == "relu":
        return shape
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "reshape":
        if layer.shape is None or int(np.prod(layer.shape)) != int(np.prod(shape)):
            raise ShapeChainError(f"{where}: cannot reshape {shape} to {layer.shape}")
        return layer.shape
    if kind == "dense":
        if len(shape) != 1:
            raise ShapeChainError(f"{where}: dense needs a flat input, got {shape}")
        return (layer.features,)
    if kind in ("conv", "conv_transpose", "group_norm", "res_block"):
        if len(shape) != 3:
            raise ShapeChainError(f"{where}: needs an HWC input, got {shape}")
        h, w, c = shape
        if kind == "conv":
            if layer.padding == "SAME":
                oh, ow = -(-h // layer.stride), -(-w // layer.stride)
            else:
                oh = (h - layer.kernel) // layer.stride + 1
                ow = (w - layer.kernel) // layer.stride + 1
                if oh <= 0 or ow <= 0:
                    raise ShapeChainError(f"{where}: kernel {layer.kernel} too large for {shape}")
            return (oh, ow, layer.features)
        if kind == "conv_transpose":
            return (h * layer.stride, w * layer.stride, layer.features)
        if kind == "group_norm":
            g = layer.groups if layer.groups else _default_groups(c)
            if c % g:
                raise ShapeChainError(f"{where}: {c} channels not divisible by {g} groups")
            return shape
        # res_block keeps shape but requires matching width
        if layer.features != c:
            raise ShapeChainError(
                f"{where}: res_block features {layer.features} != input channels {c}"
            )
        return shape
    raise ShapeChainError(f"{where}: unhandled kind")  # pragma: no cover


class ParamStore:
    """Named parameter tensors with stable ordering and Adam state slots."""

    def __init__(self):
        self._params = {}
        self.opt_state = {}
        self.step_count = 0

    def add(self, name, array):
        if name in self._params:
            raise ValueError(f"duplicate parameter {name}")
        self._params[name] = T.Tensor(np.asarray(array, dtype=np.float64),
                                      requires_grad=True, name=name)

    def names(self):
        return list(self._params)

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def zero_grads(self):
        for p in self._params.values():
            p.grad = None

    def grads(self):
        return {n: p.grad for n, p in self._params.items()}

    def copy(self):
        out = ParamStore()
        for n, p in self._params.items():
            out.add(n, p.data.copy())
        out.step_count = self.step_count
        out.opt_state = {k: (m.copy(), v.copy()) for k, (m, v) in self.opt_state.items()}
        return out

    def content_hash(self):
        import hashlib

        h = hashlib.sha256()
        for n in self.names():
            h.update(n.encode())
            h.update(self._params[n].data.tobytes())
        return h.hexdigest()


def adam_step(store: ParamStore, grads, lr, step_index, beta1=0.9, beta2=0.999,
              eps=1e-8):
    """In-place Adam update with bias correction by ``step_index`` (1-based)."""
    for name in store.names():
        g = grads.get(name)
        if g is None:
            continue
        p = store[name]
        if g.shape != p.data.shape:
            raise T.ShapeError(f"grad/param shape mismatch for {name}")
        m, v = store.opt_state.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        store.opt_state[name] = (m, v)
        mhat = m / (1 - beta1**step_index)
        vhat = v / (1 - beta2**step_index)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
    store.step_count = step_index


class Network:
    """Recorded forward function over a validated layer chain."""

    def __init__(self, spec: NetworkSpec, store: ParamStore, prefix=""):
        self.spec = spec
        self.store = store
        self.prefix = prefix
        self._shapes = self._chain_shapes()

    def _chain_shapes(self):
        shapes = [self.spec.input_shape]
        for idx, layer in enumerate(self.spec.layers):
            shapes.append(_infer_shape(shapes[-1], layer, idx))
        return shapes

    def _p(self, idx, suffix):
        return self.store[f"{self.prefix}l{idx:02d}_{suffix}"]

    def __call__(self, x):
        for idx, layer in enumerate(self.spec.layers):
            x = self._apply(x, layer, idx, self._shapes[idx])
        return x

    def _apply(self, x, layer, idx, in_shape):
        kind = layer.kind
        if kind == "relu":
            return T.relu(x)
        if kind == "flatten":
            return T.flatten(x)
        if kind == "reshape":
            batch = x.shape[0]
            return T.reshape(x, (batch,) + layer.shape)
        if kind == "dense":
            return T.dense(x, self._p(idx, "w"), self._p(idx, "b"))
        if kind == "conv":
            y = T.conv2d(x, self._p(idx, "w"), stride=layer.stride,
                         padding=layer.padding)
            return T.add(y, self._p(idx, "b"))
        if kind == "conv_transpose":
            y = T.conv_transpose2d(x, self._p(idx, "w"), stride=layer.stride)
            return T.add(y, self._p(idx, "b"))
        if kind == "group_norm":
            g = layer.groups if layer.groups else _default_groups(in_shape[-1])
            return T.group_norm(x, self._p(idx, "gn_g"), self._p(idx, "gn_b"), g)
        if kind == "res_block":
            c = in_shape[-1]
            g = layer.groups if layer.groups else _default_groups(c)
            h = T.group_norm(x, self._p(idx, "gn1_g"), self._p(idx, "gn1_b"), g)
            h = T.relu(h)
            h = T.add(T.conv2d(h, self._p(idx, "w1")), self._p(idx, "b1"))
            h = T.group_norm(h, self._p(idx, "gn2_g"), self._p(idx, "gn2_b"), g)
            h = T.relu(h)
            h = T.add(T.conv2d(h, self._p(idx, "w2")), self._p(idx, "b2"))
            return T.add(x, h)
        raise ShapeChainError(f"layer {idx}: unhandled kind {kind}")  # pragma: no cover


def _he_uniform(rng, shape, fan_in):
    # bound sqrt(6/fan_in) gives std sqrt(2/fan_in), matched to relu layers
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(spec: NetworkSpec, rng, store: ParamStore = None, prefix="") -> ParamStore:
    """Register fan-in-scaled parameters for every layer of ``spec``."""
    if store is None:
        store = ParamStore()
    shape = spec.input_shape
    for idx, layer in enumerate(spec.layers):
        name = lambda suffix: f"{prefix}l{idx:02d}_{suffix}"
        gain = 1.0 if layer.init_gain is None else layer.init_gain
        bias0 = 0.0 if layer.bias_init is None else layer.bias_init
        if layer.kind == "dense":
            fan_in = shape[0]
            store.add(name("w"), gain * _he_uniform(rng, (fan_in, layer.features), fan_in))
            store.add(name("b"), np.full(layer.features, bias0))
        elif layer.kind == "conv":
            c = shape[-1]
            fan_in = layer.kernel * layer.kernel * c
            store.add(name("w"), gain * _he_uniform(
                rng, (layer.kernel, layer.kernel, c, layer.features), fan_in))
            store.add(name("b"), np.full(layer.features, bias0))
        elif layer.kind == "conv_transpose":
            c = shape[-1]
            fan_in = layer.kernel * layer.kernel * c // (layer.stride**2)
            store.add(name("w"), gain * _he_uniform(
                rng, (layer.kernel, layer.kernel, layer.features, c), max(fan_in, 1)))
            store.add(name("b"), np.full(layer.features, bias0))
        elif layer.kind == "group_norm":
            c = shape[-1]
            store.add(name("gn_g"), np.ones(c))
            store.add(name("gn_b"), np.zeros(c))
        elif layer.kind == "res_block":
            c = shape[-1]
            fan_in = 9 * c
            store.add(name("gn1_g"), np.ones(c))
            store.add(name("gn1_b"), np.zeros(c))
            store.add(name("w1"), _he_uniform(rng, (3, 3, c, c), fan_in))
            store.add(name("b1"), np.zeros(c))
            store.add(name("gn2_g"), np.ones(c))
            store.add(name("gn2_b"), np.zeros(c))
            store.add(name("w2"), _he_uniform(rng, (3, 3, c, c), fan_in))
            store.add(name("b2"), np.zeros(c))
        shape = _infer_shape(shape, layer, idx)
    return store


def build_network(spec: NetworkSpec, rng, prefix="", store=None) -> Network:
    store = init_params(spec, rng, store=store, prefix=prefix)
    return Network(spec, store, prefix=prefix)


# ---------------------------------------------------------------------------
# checkpoints: checkpoint.json + params.f32 (little-endian float32)


def save_checkpoint(directory, store: ParamStore, specs: dict, extra=None):
    os.makedirs(directory, exist_ok=True)
    names = store.names()
    meta = {
        "params": [{"name": n, "shape": list(store[n].data.shape)} for n in names],
        "step": store.step_count,
        "specs": {k: v.to_json() for k, v in specs.items()},
        "extra": extra or {},
    }
    flat = np.concatenate([store[n].data.reshape(-1) for n in names]) if names else np.zeros(0)
    blob = flat.astype("<f4").tobytes()
    tmp_meta = os.path.join(directory, "checkpoint.json.tmp")
    with open(tmp_meta, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    tmp_blob = os.path.join(directory, "params.f32.tmp")
    with open(tmp_blob, "wb") as f:
        f.write(blob)
    os.replace(tmp_blob, os.path.join(directory, "params.f32"))
    os.replace(tmp_meta, os.path.join(directory, "checkpoint.json"))


def load_checkpoint(directory):
    """Returns (store, specs dict, extra dict); params widened to float64."""
    with open(os.path.join(directory, "checkpoint.json"), encoding="utf-8") as f:
        meta = json.load(f)
    flat = np.fromfile(os.path.join(directory, "params.f32"), dtype="<f4").astype(np.float64)
    store = ParamStore()
    offset = 0
    for entry in meta["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        store.add(entry["name"], flat[offset : offset + size].reshape(shape))
        offset += size
    if offset != flat.size:
        raise IOError("params.f32 does not match checkpoint.json shapes")
    store.step_count = meta.get("step", 0)
    specs = {k: NetworkSpec.from_json(v) for k, v in meta.get("specs", {}).items()}
    return store, specs, meta.get("extra", {})


# ---------------------------------------------------------------------------
# desk-scale architectures


def ae1_encoder_spec(image_hw=(32, 32), widths=(16, 32)) -> NetworkSpec:
    """Compress (H, W, 1) to (H/8, W/8, 1): two width stages + 1-channel downsample."""
    w1, w2 = widths
    layers = [
        LayerSpec("conv", features=w1),
        LayerSpec("res_block", features=w1),
        LayerSpec("conv", features=w1, stride=2),
        LayerSpec("relu"),
        LayerSpec("conv", features=w2),
        LayerSpec("res_block", features=w2),
        LayerSpec("conv", features=w2, stride=2),
        LayerSpec("relu"),
        LayerSpec("conv", features=1, stride=2, init_gain=0.1, bias_init=0.2),
        LayerSpec("relu"),
    ]
    return NetworkSpec(tuple(layers), (image_hw[0], image_hw[1], 1))


def ae1_decoder_spec(feature_hw=(4, 4), widths=(16, 32)) -> NetworkSpec:
    w1, w2 = widths
    layers = [
        LayerSpec("conv", features=w2),
        LayerSpec("res_block", features=w2),
        LayerSpec("conv_transpose", features=w2, kernel=4, stride=2),
        LayerSpec("relu"),
        LayerSpec("conv", features=w1),
        LayerSpec("res_block", features=w1),
        LayerSpec("conv_transpose", features=w1, kernel=4, stride=2),
        LayerSpec("relu"),
        LayerSpec("conv_transpose", features=w1, kernel=4, stride=2),
        LayerSpec("relu"),
        LayerSpec("conv", features=1, init_gain=0.1, bias_init=0.2),
        LayerSpec("relu"),
    ]
    return NetworkSpec(tuple(layers), (feature_hw[0], feature_hw[1], 1))


def ae2_encoder_spec(feature_hw=(4, 4), in_channels=1, latent_dim=3,
                     widths=(16, 32)) -> NetworkSpec:
    w1, w2 = widths
    h, w = feature_hw
    layers = [
        LayerSpec("conv", features=w1),
        LayerSpec("res_block", features=w1),
        LayerSpec("conv", features=w1, stride=2),
        LayerSpec("relu"),
        LayerSpec("conv", features=w2),
        LayerSpec("res_block", features=w2),
        LayerSpec("conv", features=w2, stride=2),
        LayerSpec("relu"),
        LayerSpec("flatten"),
        LayerSpec("dense", features=latent_dim),
    ]
    return NetworkSpec(tuple(layers), (h, w, in_channels))


def ae2_decoder_spec(latent_dim=3, feature_hw=(4, 4), out_channels=1,
                     widths=(16, 32)) -> NetworkSpec:
    w1, w2 = widths
    h, w = feature_hw
    h0, w0 = h // 4, w // 4
    layers = [
        LayerSpec("dense", features=h0 * w0 * w2),
        LayerSpec("relu"),
        LayerSpec("reshape", shape=(h0, w0, w2)),
        LayerSpec("conv", features=w2),
        LayerSpec("res_block", features=w2),
        LayerSpec("conv_transpose", features=w2, kernel=4, stride=2),
        LayerSpec("relu"),
        LayerSpec("conv", features=w1),
        LayerSpec("res_block", features=w1),
        LayerSpec("conv_transpose", features=w1, kernel=4, stride=2),
        LayerSpec("relu"),
        LayerSpec("conv", features=out_channels, init_gain=0.1, bias_init=0.2),
        LayerSpec("relu"),
    ]
    return NetworkSpec(tuple(layers), (latent_dim,))


def ldr_spec(feature_hw=(4, 4), in_channels=1, widths=(16,), dense_width=32) -> NetworkSpec:
    """Binary classifier: valid convs shrink the map, then two dense layers.

    Inputs too small for a 3x3 valid convolution fall back to a dense stack,
    which covers scalar and low-dimensional toy problems.
    """
    h, w = feature_hw
    layers = []
    if h >= 3 and w >= 3:
        for f in widths:
            layers.append(LayerSpec("conv", features=f, kernel=3,
                                    padding="VALID"))
            layers.append(LayerSpec("relu"))
        layers.append(LayerSpec("flatten"))
    else:
        layers += [
            LayerSpec("flatten"),
            LayerSpec("dense", features=dense_width),
            LayerSpec("relu"),
        ]
    layers += [
        LayerSpec("dense", features=dense_width),
        LayerSpec("relu"),
        LayerSpec("dense", features=1),
    ]
    return NetworkSpec(tuple(layers), (h, w, in_channels))
