"""Point-wise feature network with hand-written forward and backward passes.

    F:   7 -> hidden -> hidden -> feat_dim      (tanh on every layer)
    G:   feat_dim -> proj_hidden -> proj_dim    (tanh, then linear)
    cls: feat_dim -> n_classes                  (linear)

Per-point input is ``(x, y, z, intensity, range, pitch, beam / (n_beams-1))``
with positions divided by fixed scales.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError
from .scanio import PointCloud

IN_DIM = 7
LAYERS = (("W1", "b1"), ("W2", "b2"), ("W3", "b3"), ("Wg1", "bg1"), ("Wg2", "bg2"),
          ("Wc", "bc"))


@dataclass(frozen=True)
class NetConfig:
    n_classes: int
    hidden: int = 32
    feat_dim: int = 16
    proj_dim: int = 8
    proj_hidden: int = 16
    n_beams: int = 64
    xy_scale: float = 20.0
    z_scale: float = 2.0

    def __post_init__(self):
        for name in ("n_classes", "hidden", "feat_dim", "proj_dim", "proj_hidden", "n_beams"):
            if getattr(self, name) < 1:
                raise ConfigError(f"net.{name} must be >= 1")

    def shapes(self) -> dict:
        h, d, p, ph, k = self.hidden, self.feat_dim, self.proj_dim, self.proj_hidden, self.n_classes
        dims = {"W1": (IN_DIM, h), "W2": (h, h), "W3": (h, d), "Wg1": (d, ph),
                "Wg2": (ph, p), "Wc": (d, k)}
        out = {}
        for w, b in LAYERS:
            out[w] = dims[w]
            out[b] = (dims[w][1],)
        return out


@dataclass(frozen=True, eq=False)
class NetParams:
    config: NetConfig
    weights: dict  # name -> float64 array

    def __getitem__(self, name):
        return self.weights[name]

    def names(self):
        return list(self.config.shapes())

    def replace_weights(self, weights) -> "NetParams":
        return dataclasses.replace(self, weights=weights)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights[k].ravel() for k in self.names()])


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    inputs: np.ndarray   # (N, 7)
    h1: np.ndarray       # (N, hidden)
    h2: np.ndarray
    feat: np.ndarray     # F(x), (N, feat_dim)
    g1: np.ndarray
    proj: np.ndarray     # G(F(x)), (N, proj_dim)
    logits: np.ndarray   # (N, n_classes)

    @property
    def n(self) -> int:
        return len(self.inputs)


def init_params(config: NetConfig, seed: int = 0) -> NetParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights = {}
    for w, b in LAYERS:
        fan_in, fan_out = config.shapes()[w]
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights[w] = rng.uniform(-a, a, size=(fan_in, fan_out))
        weights[b] = np.zeros(fan_out)
    return NetParams(config, weights)


def zero_like(params: NetParams) -> dict:
    return {k: np.zeros_like(v) for k, v in params.weights.items()}


def encode(cloud: PointCloud, config: NetConfig) -> np.ndarray:
    if cloud.beam is None:
        raise ConfigError("forward needs beams assigned")
    xyz = cloud.xyz.astype(np.float64)
    rng_xy = np.hypot(xyz[:, 0], xyz[:, 1])
    rng3 = np.sqrt(rng_xy ** 2 + xyz[:, 2] ** 2)
    pitch = np.arctan2(xyz[:, 2], rng_xy)
    beam = cloud.beam / max(config.n_beams - 1, 1)
    x = np.column_stack([xyz[:, 0] / config.xy_scale, xyz[:, 1] / config.xy_scale,
                         xyz[:, 2] / config.z_scale, cloud.intensity.astype(np.float64),
                         rng3 / config.xy_scale, pitch, beam])
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite point attributes")
    return x


def forward_inputs(params: NetParams, x: np.ndarray) -> ForwardTrace:
    w = params.weights
    h1 = np.tanh(x @ w["W1"] + w["b1"])
    h2 = np.tanh(h1 @ w["W2"] + w["b2"])
    feat = np.tanh(h2 @ w["W3"] + w["b3"])
    g1 = np.tanh(feat @ w["Wg1"] + w["bg1"])
    proj = g1 @ w["Wg2"] + w["bg2"]
    logits = feat @ w["Wc"] + w["bc"]
    return ForwardTrace(x, h1, h2, feat, g1, proj, logits)


def forward(params: NetParams, cloud: PointCloud) -> ForwardTrace:
    return forward_inputs(params, encode(cloud, params.config))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _cot(value, shape, name):
    if value is None:
        return np.zeros(shape)
    value = np.asarray(value, dtype=np.float64)
    if value.shape != shape:
        raise ValueError(f"cotangent on {name} has shape {value.shape}, expected {shape}")
    return value


def backward(params: NetParams, trace: ForwardTrace, d_feat=None, d_proj=None,
             d_logits=None) -> dict:
    """Reverse-mode gradients for cotangents on any subset of the three heads."""
    w = params.weights
    d_feat = _cot(d_feat, trace.feat.shape, "features")
    d_proj = _cot(d_proj, trace.proj.shape, "projections")
    d_logits = _cot(d_logits, trace.logits.shape, "logits")
    g = {}
    g["Wc"] = trace.feat.T @ d_logits
    g["bc"] = d_logits.sum(axis=0)
    g["Wg2"] = trace.g1.T @ d_proj
    g["bg2"] = d_proj.sum(axis=0)
    dz = (d_proj @ w["Wg2"].T) * (1 - trace.g1 ** 2)
    g["Wg1"] = trace.feat.T @ dz
    g["bg1"] = dz.sum(axis=0)
    d_f = d_feat + d_logits @ w["Wc"].T + dz @ w["Wg1"].T
    dz = d_f * (1 - trace.feat ** 2)
    g["W3"] = trace.h2.T @ dz
    g["b3"] = dz.sum(axis=0)
    dz = (dz @ w["W3"].T) * (1 - trace.h2 ** 2)
    g["W2"] = trace.h1.T @ dz
    g["b2"] = dz.sum(axis=0)
    dz = (dz @ w["W2"].T) * (1 - trace.h1 ** 2)
    g["W1"] = trace.inputs.T @ dz
    g["b1"] = dz.sum(axis=0)
    return g


def add_grads(a: dict, b: dict, scale: float = 1.0) -> dict:
    return {k: a[k] + scale * b[k] for k in a}


def sgd_step(params: NetParams, grads: dict, lr: float, weight_decay: float = 0.0) -> NetParams:
    """``w <- w - lr * (g + weight_decay * w)`` for every tensor."""
    new = {}
    for k, w in params.weights.items():
        g = grads[k]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
        new[k] = w - lr * (g + weight_decay * w)
        if not np.all(np.isfinite(new[k])):
            raise NumericError(f"non-finite update for {k}")
    return params.replace_weights(new)


def params_to_dict(params: NetParams) -> dict:
    return {
        "config": dataclasses.asdict(params.config),
        "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                    for k, v in params.weights.items()},
    }


def params_from_dict(doc: dict) -> NetParams:
    config = NetConfig(**doc["config"])
    weights = {}
    for k, shape in config.shapes().items():
        entry = doc["weights"][k]
        if tuple(entry["shape"]) != shape:
            raise ConfigError(f"weight {k} has shape {entry['shape']}, expected {list(shape)}")
        weights[k] = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
    return NetParams(config, weights)
