"""Single affine layers with hand-written backward passes, SGD with
polynomial decay, an EMA teacher, and NPY checkpoints."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor_store import load_npy, save_npy

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("identity", "leaky_relu", "softmax_rows", "normalize_rows")


class ContractError(ValueError):
    """Shape mismatch or misuse of a cached forward pass."""


class TrainingDivergenceError(FloatingPointError):
    pass


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"
    version: int = 0

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ContractError(f"bad layer shapes {self.weight.shape} / {self.bias.shape}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class Cache:
    x: np.ndarray
    z: np.ndarray
    out: np.ndarray
    layer_id: int
    version: int


def identity_averaging(dim: int, activation: str) -> Layer:
    """Layer mapping [a, b] -> (a + b) / 2 before the activation."""
    eye = np.eye(dim)
    return Layer(np.hstack([eye, eye]) / 2.0, np.zeros(dim), activation)


def random_layer(in_dim: int, out_dim: int, activation: str, rng: np.random.Generator,
                 scale: float | None = None) -> Layer:
    scale = np.sqrt(2.0 / in_dim) if scale is None else scale
    return Layer(rng.normal(0.0, scale, size=(out_dim, in_dim)), np.zeros(out_dim), activation)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return z
    if activation == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if activation == "softmax_rows":
        return softmax_rows(z)
    # normalize_rows: rectify then rescale onto the simplex; all-dead rows become uniform
    r = np.maximum(z, 0.0)
    s = r.sum(axis=1, keepdims=True)
    uniform = np.full_like(r, 1.0 / r.shape[1])
    return np.where(s > 0, r / np.where(s > 0, s, 1.0), uniform)


def _activation_backward(g: np.ndarray, cache: Cache, activation: str) -> np.ndarray:
    z, out = cache.z, cache.out
    if activation == "identity":
        return g
    if activation == "leaky_relu":
        return np.where(z > 0, g, LEAKY_SLOPE * g)
    if activation == "softmax_rows":
        return out * (g - (g * out).sum(axis=1, keepdims=True))
    r = np.maximum(z, 0.0)
    s = r.sum(axis=1, keepdims=True)
    live = s > 0
    dr = (g - (g * out).sum(axis=1, keepdims=True)) / np.where(live, s, 1.0)
    return np.where(live & (z > 0), dr, 0.0)


def mlp_forward(layer: Layer, x) -> tuple[np.ndarray, Cache]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ContractError(f"input shape {x.shape} does not match layer in_dim {layer.in_dim}")
    z = x @ layer.weight.T + layer.bias
    out = _activate(z, layer.activation)
    return out, Cache(x, z, out, id(layer), layer.version)


def mlp_backward(layer: Layer, cache: Cache, upstream) -> tuple[dict[str, np.ndarray], np.ndarray]:
    if cache.layer_id != id(layer) or cache.version != layer.version:
        raise ContractError("cache does not belong to the current state of this layer")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != cache.out.shape:
        raise ContractError(f"upstream gradient shape {g.shape} != output shape {cache.out.shape}")
    dz = _activation_backward(g, cache, layer.activation)
    grads = {"weight": dz.T @ cache.x, "bias": dz.sum(axis=0)}
    return grads, dz @ layer.weight


class Network:
    """Named collection of layers: backbone, the two heads, and the per-round
    graph layers ``f_c.{k}`` / ``f_s.{k}``."""

    def __init__(self, layers: dict[str, Layer]):
        self.layers = dict(layers)

    def __getitem__(self, name: str) -> Layer:
        return self.layers[name]

    def params(self) -> dict[str, np.ndarray]:
        return {f"{name}.{p}": arr for name, layer in self.layers.items()
                for p, arr in layer.params().items()}

    def bump_versions(self) -> None:
        for layer in self.layers.values():
            layer.version += 1

    def copy(self) -> "Network":
        return Network({name: Layer(l.weight.copy(), l.bias.copy(), l.activation)
                        for name, l in self.layers.items()})

    def graph_layers(self, rounds: int) -> list[tuple[Layer, Layer]]:
        return [(self.layers[f"f_c.{k}"], self.layers[f"f_s.{k}"]) for k in range(rounds)]


def build_network(raw_dim: int, hidden: int, num_classes: int, embed_dim: int, rounds: int,
                  rng: np.random.Generator, clg_activation: str = "normalize_rows") -> Network:
    layers = {
        "backbone": random_layer(raw_dim, hidden, "leaky_relu", rng),
        "cls_head": random_layer(hidden, num_classes, "softmax_rows", rng, scale=np.sqrt(1.0 / hidden)),
        "emb_head": random_layer(hidden, embed_dim, "identity", rng, scale=np.sqrt(1.0 / hidden)),
    }
    for k in range(rounds):
        layers[f"f_c.{k}"] = identity_averaging(num_classes, clg_activation)
        layers[f"f_s.{k}"] = identity_averaging(embed_dim, "leaky_relu")
    return Network(layers)


@dataclass
class OptimizerState:
    base_lr: float
    total_iter: int
    momentum: float = 0.9
    iter: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self, it: int | None = None) -> float:
        it = self.iter if it is None else it
        frac = min(max(it / self.total_iter, 0.0), 1.0)
        return self.base_lr * (1.0 - frac) ** 0.9


def sgd_step(opt: OptimizerState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """In-place momentum SGD at the polynomially decayed rate; returns ``params``."""
    if opt.iter >= opt.total_iter:
        raise ContractError(f"optimizer exhausted: iter {opt.iter} >= total_iter {opt.total_iter}")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDivergenceError(f"non-finite gradient for {name}")
    lr = opt.lr()
    for name, g in grads.items():
        v = opt.velocity.get(name)
        v = g.copy() if v is None else opt.momentum * v + g
        opt.velocity[name] = v
        if lr != 0.0:
            params[name] -= lr * v
    opt.iter += 1
    return params


@dataclass
class TeacherState:
    shadow: dict[str, np.ndarray]
    decay: float = 0.99

    @classmethod
    def from_params(cls, params: dict[str, np.ndarray], decay: float = 0.99) -> "TeacherState":
        return cls({k: v.copy() for k, v in params.items()}, decay)


def teacher_update(teacher: TeacherState, student: dict[str, np.ndarray], decay: float | None = None) -> TeacherState:
    """shadow <- d * shadow + (1 - d) * student, with d = ``decay`` or the state's decay."""
    d = teacher.decay if decay is None else decay
    if set(student) != set(teacher.shadow):
        raise ContractError("teacher and student parameter names differ")
    for name, s in student.items():
        t = teacher.shadow[name]
        if t.shape != s.shape:
            raise ContractError(f"shape mismatch for {name}: {t.shape} vs {s.shape}")
        t *= d
        t += (1.0 - d) * s
    return teacher


def save_checkpoint(directory, params: dict[str, np.ndarray], step: int, extra: dict | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    entries = []
    for name in sorted(params):
        fname = f"{name}.npy"
        save_npy(params[name], os.path.join(directory, fname))
        entries.append({"name": name, "file": fname, "shape": list(params[name].shape)})
    manifest = {"step": int(step), "params": entries, **(extra or {})}
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    path = os.path.join(directory, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    with open(path) as fh:
        manifest = json.load(fh)
    params = {}
    for entry in manifest["params"]:
        arr = load_npy(os.path.join(directory, entry["file"]))
        if list(arr.shape) != entry["shape"]:
            raise ContractError(f"{entry['name']}: shape {arr.shape} != manifest {entry['shape']}")
        params[entry["name"]] = arr
    return params, manifest


def assign_params(net: Network, params: dict[str, np.ndarray]) -> None:
    own = net.params()
    if set(own) != set(params):
        missing = sorted(set(own) ^ set(params))
        raise ContractError(f"checkpoint parameters do not match the network: {missing[:4]}")
    for name, arr in params.items():
        if own[name].shape != arr.shape:
            raise ContractError(f"{name}: shape {arr.shape} != {own[name].shape}")
        own[name][...] = arr
    net.bump_versions()
