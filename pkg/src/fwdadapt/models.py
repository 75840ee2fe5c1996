"""Toy forward-only architectures with per-layer feature taps.

Both models are plain parameter dictionaries plus a forward function written
against an ``ops`` namespace (:mod:`fwdadapt.tensor` by default). Each "layer"
index is one transformer block (TinyViT) or one conv stage (TinyCNN); the norm
registry maps a layer index to the names of the normalization affine
parameters that live in it.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from fwdadapt import tensor as T

ARCHITECTURES = ("vit", "cnn")

VIT_DEFAULTS = dict(image=16, patch=4, dim=32, depth=4, heads=2, mlp=64, classes=8, pool="mean")
CNN_DEFAULTS = dict(image=16, channels=(16, 16, 32, 32), strides=(1, 2, 2, 1), groups=4, classes=8)


class StateError(RuntimeError):
    """Operation not valid in the model's current state (e.g. double quantization)."""


@dataclass
class ModelGraph:
    arch: str
    config: dict
    params: dict[str, np.ndarray]
    norm_registry: list[list[str]]
    weight_names: list[str]
    quant: dict[str, tuple[np.ndarray, float]] = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.norm_registry)

    @property
    def n_classes(self) -> int:
        return self.config["classes"]

    @property
    def quantized(self) -> bool:
        return bool(self.quant)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (1, self.config["image"], self.config["image"])

    def get(self, name: str) -> np.ndarray:
        if name in self.quant:
            q, scale = self.quant[name]
            return q.astype(T.DTYPE) * scale
        return self.params[name]

    def norm_params(self, layers=None) -> list[str]:
        layers = range(self.n_layers) if layers is None else layers
        return [name for l in layers for name in self.norm_registry[l]]

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def descriptor(self) -> dict:
        cfg = {k: list(v) if isinstance(v, tuple) else v for k, v in self.config.items()}
        return {"arch": self.arch, "config": cfg, "quantized": self.quantized}

    def forward(self, x, capture=(), ops=None, values=None):
        """Return ``(logits, features)``; ``features[l]`` is (N, m, d) for captured layer ``l``.

        ``values`` overrides entries of the parameter store (used to feed
        recorded values in from the autodiff backend).
        """
        ops = T if ops is None else ops
        x = np.asarray(x, dtype=T.DTYPE)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise T.ShapeError(f"expected input (N, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        capture = set(capture)
        bad = capture - set(range(self.n_layers))
        if bad:
            raise ValueError(f"no such layers to capture: {sorted(bad)}")

        def p(name):
            if values is not None and name in values:
                return values[name]
            return self.get(name)

        fwd = _vit_forward if self.arch == "vit" else _cnn_forward
        return fwd(self.config, p, x, capture, ops)


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    n, c, h, w = x.shape
    g = h // patch
    return (
        x.reshape(n, c, g, patch, g, patch).transpose(0, 2, 4, 1, 3, 5).reshape(n, g * g, c * patch * patch)
    )


def _vit_forward(cfg, p, x, capture, ops):
    feats = {}
    h = ops.linear(patchify(x, cfg["patch"]), p("embed.w"), p("embed.b"))
    h = ops.prepend_token(h, p("cls")) + p("pos")
    for l in range(cfg["depth"]):
        b = f"blocks.{l}."
        a = ops.layer_norm(h, p(b + "ln1.g"), p(b + "ln1.b"))
        h = h + ops.attention(a, p(b + "attn.wqkv"), p(b + "attn.bqkv"), p(b + "attn.wo"), p(b + "attn.bo"), cfg["heads"])
        m = ops.layer_norm(h, p(b + "ln2.g"), p(b + "ln2.b"))
        h = h + ops.linear(ops.gelu(ops.linear(m, p(b + "mlp.w1"), p(b + "mlp.b1"))), p(b + "mlp.w2"), p(b + "mlp.b2"))
        if l == cfg["depth"] - 1:
            # the final norm belongs to the last layer, so its tap sits after it
            h = ops.layer_norm(h, p("norm.g"), p("norm.b"))
        if l in capture:
            feats[l] = h
    pooled = h[:, 0] if cfg["pool"] == "cls" else ops.token_mean(h)
    return ops.linear(pooled, p("head.w"), p("head.b")), feats


def _cnn_forward(cfg, p, x, capture, ops):
    feats = {}
    h = x
    for l, stride in enumerate(cfg["strides"]):
        s = f"stages.{l}."
        h = ops.conv2d(h, p(s + "conv.w"), stride, 1, p(s + "conv.b"))
        h = ops.relu(ops.group_norm(h, cfg["groups"], p(s + "gn.g"), p(s + "gn.b")))
        if l in capture:
            n, c = h.shape[:2]
            feats[l] = h.reshape(n, c, -1).transpose(0, 2, 1)
    return ops.linear(ops.global_avg_pool(h), p("head.w"), p("head.b")), feats


def tiny_vit(seed: int = 0, **overrides) -> ModelGraph:
    cfg = {**VIT_DEFAULTS, **overrides}
    rng = np.random.default_rng(seed)
    d, hid, depth = cfg["dim"], cfg["mlp"], cfg["depth"]
    n_tok = (cfg["image"] // cfg["patch"]) ** 2 + 1
    pin = cfg["patch"] ** 2

    def w(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out))

    params = {
        "embed.w": w(pin, d), "embed.b": np.zeros(d),
        "cls": rng.normal(0.0, 0.02, d), "pos": rng.normal(0.0, 0.02, (n_tok, d)),
    }
    registry = []
    for l in range(depth):
        b = f"blocks.{l}."
        params.update({
            b + "ln1.g": np.ones(d), b + "ln1.b": np.zeros(d),
            b + "attn.wqkv": w(d, 3 * d), b + "attn.bqkv": np.zeros(3 * d),
            b + "attn.wo": w(d, d), b + "attn.bo": np.zeros(d),
            b + "ln2.g": np.ones(d), b + "ln2.b": np.zeros(d),
            b + "mlp.w1": w(d, hid), b + "mlp.b1": np.zeros(hid),
            b + "mlp.w2": w(hid, d), b + "mlp.b2": np.zeros(d),
        })
        registry.append([b + "ln1.g", b + "ln1.b", b + "ln2.g", b + "ln2.b"])
    params.update({"norm.g": np.ones(d), "norm.b": np.zeros(d), "head.w": w(d, cfg["classes"]),
                   "head.b": np.zeros(cfg["classes"])})
    # the final norm sits in the last block's slot of the registry
    registry[-1] += ["norm.g", "norm.b"]
    weights = [k for k in params if k.endswith(("embed.w", "wqkv", "wo", "w1", "w2", "head.w"))]
    return ModelGraph("vit", cfg, params, registry, weights)


def tiny_cnn(seed: int = 0, **overrides) -> ModelGraph:
    cfg = {**CNN_DEFAULTS, **overrides}
    cfg["channels"], cfg["strides"] = tuple(cfg["channels"]), tuple(cfg["strides"])
    if len(cfg["channels"]) != len(cfg["strides"]):
        raise ValueError("channels and strides must have the same length")
    rng = np.random.default_rng(seed)
    params, registry = {}, []
    cin = 1
    for l, cout in enumerate(cfg["channels"]):
        if cout % cfg["groups"]:
            raise ValueError(f"stage {l}: {cout} channels not divisible by {cfg['groups']} groups")
        s = f"stages.{l}."
        params[s + "conv.w"] = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), (cout, cin, 3, 3))
        params[s + "conv.b"] = np.zeros(cout)
        params[s + "gn.g"] = np.ones(cout)
        params[s + "gn.b"] = np.zeros(cout)
        registry.append([s + "gn.g", s + "gn.b"])
        cin = cout
    params["head.w"] = rng.normal(0.0, 1.0 / np.sqrt(cin), (cin, cfg["classes"]))
    params["head.b"] = np.zeros(cfg["classes"])
    weights = [k for k in params if k.endswith(("conv.w", "head.w"))]
    return ModelGraph("cnn", cfg, params, registry, weights)


def build_model(arch: str, seed: int = 0, **overrides) -> ModelGraph:
    if arch == "vit":
        return tiny_vit(seed, **overrides)
    if arch == "cnn":
        return tiny_cnn(seed, **overrides)
    raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


def quantize_tensor(w: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric per-tensor int8: scale = max|w| / 127 (1.0 for an all-zero tensor)."""
    amax = float(np.max(np.abs(w))) if w.size else 0.0
    scale = amax / 127.0 if amax > 0 else 1.0
    q = np.clip(np.round(w / scale), -127, 127).astype(np.int8)
    return q, scale


def quantize(model: ModelGraph) -> ModelGraph:
    """Return an int8-weight copy; norm affines and biases stay float64."""
    if model.quantized:
        raise StateError("model is already quantized")
    out = model.copy()
    for name in out.weight_names:
        out.quant[name] = quantize_tensor(out.params.pop(name))
    return out


class ParamSelection:
    """Flat read/write view over the norm affine parameters of a layer set."""

    def __init__(self, model: ModelGraph, layers):
        layers = sorted(set(int(l) for l in layers))
        if any(l < 0 or l >= model.n_layers for l in layers):
            raise ValueError(f"layer indices {layers} out of range for {model.n_layers} layers")
        self.model = model
        self.layers = layers
        self.names = model.norm_params(layers)
        self.sizes = [model.params[n].size for n in self.names]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)

    @property
    def dim(self) -> int:
        return int(self.offsets[-1])

    def read(self) -> np.ndarray:
        if not self.names:
            return np.zeros(0)
        return np.concatenate([self.model.params[n].ravel() for n in self.names])

    def write(self, flat) -> None:
        flat = np.asarray(flat, dtype=T.DTYPE)
        if flat.shape != (self.dim,):
            raise T.ShapeError(f"selection expects a vector of length {self.dim}, got {flat.shape}")
        for name, a, b in zip(self.names, self.offsets[:-1], self.offsets[1:]):
            self.model.params[name] = flat[a:b].reshape(self.model.params[name].shape).copy()

    def split(self, flat) -> dict[str, np.ndarray]:
        """Map a flat vector back to per-parameter arrays (without writing)."""
        return {
            n: np.asarray(flat[a:b]).reshape(self.model.params[n].shape)
            for n, a, b in zip(self.names, self.offsets[:-1], self.offsets[1:])
        }

    def __repr__(self):
        return f"ParamSelection(layers={self.layers}, dim={self.dim})"
