"""Dense MLPs, batch normalisation and Adam.

A :class:`Network` is an immutable value: training code produces new
networks instead of mutating old ones. ``forward`` builds expression nodes
(parameters become trainable leaves named ``"<prefix>/<layer>/<key>"``);
``predict`` is the plain numpy evaluation used for push-forwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad

ACTIVATIONS = ("relu", "tanh", "none")
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

# Adam presets: (beta1, beta2)
AUTOENCODER_BETAS = (0.9, 0.9)
GAN_BETAS = (0.1, 0.5)
GAN_BETAS_HD = (0.0, 0.5)
DEFAULT_LR = 1e-3


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including the input width, one activation per layer."""

    layer_widths: tuple[int, ...]
    activations: tuple[str, ...]
    batch_norm: tuple[bool, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        bn = tuple(bool(b) for b in self.batch_norm) or (False,) * len(self.activations)
        object.__setattr__(self, "batch_norm", bn)
        if len(self.layer_widths) < 2:
            raise ValueError("an MLP needs an input width and at least one layer")
        if any(w <= 0 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive: {self.layer_widths}")
        if len(self.activations) != len(self.layer_widths) - 1:
            raise ValueError("need exactly one activation per layer")
        if len(self.batch_norm) != len(self.activations):
            raise ValueError("need exactly one batch_norm flag per layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @classmethod
    def dense(cls, widths: Sequence[int], hidden: str = "relu", output: str = "none",
              batch_norm: bool = False) -> "MlpSpec":
        """Hidden layers share one activation; the last layer gets ``output``."""
        n = len(widths) - 1
        acts = (hidden,) * (n - 1) + (output,)
        bn = (batch_norm,) * (n - 1) + (False,)
        return cls(tuple(widths), acts, bn)

    @property
    def n_layers(self) -> int:
        return len(self.activations)

    @property
    def input_width(self) -> int:
        return self.layer_widths[0]

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def is_critic_safe(self) -> bool:
        return not any(self.batch_norm)

    def then(self, other: "MlpSpec") -> "MlpSpec":
        """Spec of ``other`` applied after ``self``."""
        if self.output_width != other.input_width:
            raise ValueError("widths do not chain")
        return MlpSpec(self.layer_widths + other.layer_widths[1:],
                       self.activations + other.activations,
                       self.batch_norm + other.batch_norm)

    def to_dict(self) -> dict:
        return {"layer_widths": list(self.layer_widths),
                "activations": list(self.activations),
                "batch_norm": list(self.batch_norm)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MlpSpec":
        return cls(tuple(d["layer_widths"]), tuple(d["activations"]),
                   tuple(d.get("batch_norm", ())))


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Network:
    """Weights ``W{i}`` of shape (in, out), biases ``b{i}``; batch-norm layers
    add ``gamma{i}``, ``beta{i}`` (trainable) and ``mean{i}``, ``var{i}``
    (running statistics)."""

    spec: MlpSpec
    params: Mapping[str, np.ndarray]
    state: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "params", {k: _frozen(v) for k, v in self.params.items()})
        object.__setattr__(self, "state", {k: _frozen(v) for k, v in self.state.items()})
        for i in range(self.spec.n_layers):
            shape = (self.spec.layer_widths[i], self.spec.layer_widths[i + 1])
            if self.params[f"W{i}"].shape != shape:
                raise ValueError(f"W{i} has shape {self.params[f'W{i}'].shape}, expected {shape}")
            if self.spec.batch_norm[i] and not (self.state[f"var{i}"] > 0).all():
                raise ValueError("running variance must be positive")

    def with_params(self, params: Mapping[str, np.ndarray]) -> "Network":
        return replace(self, params={**self.params, **params})

    def with_state(self, state: Mapping[str, np.ndarray]) -> "Network":
        return replace(self, state={**self.state, **state})

    @property
    def n_parameters(self) -> int:
        return int(np.sum([v.size for v in self.params.values()]))

    def equals(self, other: "Network") -> bool:
        """Bitwise equality of spec, parameters and running statistics."""
        if self.spec != other.spec:
            return False
        for a, b in ((self.params, other.params), (self.state, other.state)):
            if a.keys() != b.keys():
                return False
            if not all(np.array_equal(a[k], b[k]) and a[k].tobytes() == b[k].tobytes() for k in a):
                return False
        return True


def init_mlp(spec: MlpSpec, seed: int) -> Network:
    """He-uniform weights for relu layers, Xavier-uniform otherwise; zero biases."""
    rng = np.random.default_rng(seed)
    params, state = {}, {}
    for i, act in enumerate(spec.activations):
        fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
        if act == "relu":
            limit = np.sqrt(6.0 / fan_in)
        else:
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
        if spec.batch_norm[i]:
            params[f"gamma{i}"] = np.ones(fan_out)
            params[f"beta{i}"] = np.zeros(fan_out)
            state[f"mean{i}"] = np.zeros(fan_out)
            state[f"var{i}"] = np.ones(fan_out)
    return Network(spec, params, state)


def identity_network(width: int) -> Network:
    """Single affine layer computing ``x @ I + 0``; exact on every input."""
    spec = MlpSpec((width, width), ("none",))
    return Network(spec, {"W0": np.eye(width), "b0": np.zeros(width)})


def constant_network(in_width: int, value: Sequence[float]) -> Network:
    """Affine layer with zero weights and bias ``value``."""
    value = np.asarray(value, dtype=np.float64)
    spec = MlpSpec((in_width, value.size), ("none",))
    return Network(spec, {"W0": np.zeros((in_width, value.size)), "b0": value})


def compose(*nets: Network) -> Network:
    """Single network applying ``nets[0]`` first, then ``nets[1]``, ..."""
    spec = nets[0].spec
    params = dict()
    state = dict()
    offset = 0
    for k, net in enumerate(nets):
        if k:
            spec = spec.then(net.spec)
        for key, v in net.params.items():
            name, idx = _split_key(key)
            params[f"{name}{idx + offset}"] = v
        for key, v in net.state.items():
            name, idx = _split_key(key)
            state[f"{name}{idx + offset}"] = v
        offset += net.spec.n_layers
    return Network(spec, params, state)


def _split_key(key: str) -> tuple[str, int]:
    i = len(key)
    while key[i - 1].isdigit():
        i -= 1
    return key[:i], int(key[i:])


def param_leaves(net: Network, prefix: str, trainable: bool = True) -> dict[str, ad.Node]:
    return {k: ad.leaf(f"{prefix}/{k}", trainable) for k in net.params}


def param_bindings(net: Network, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in net.params.items()}


@dataclass
class ForwardResult:
    output: ad.Node
    leaves: dict[str, ad.Node]
    batch_stats: dict[str, ad.Node]  # "mean{i}" / "var{i}" nodes in train mode


def forward(net: Network, x: ad.Node, mode: str = "eval", prefix: str = "net",
            trainable: bool = True, leaves: dict[str, ad.Node] | None = None) -> ForwardResult:
    """Expression for ``net(x)``.

    In ``train`` mode batch-norm layers normalise with batch statistics and
    expose them in ``batch_stats``; in ``eval`` mode they use the running
    statistics as constants.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if leaves is None:
        leaves = param_leaves(net, prefix, trainable)
    spec = net.spec
    stats: dict[str, ad.Node] = {}
    h = x
    for i, act in enumerate(spec.activations):
        h = ad.matmul(h, leaves[f"W{i}"]) + leaves[f"b{i}"]
        if spec.batch_norm[i]:
            if mode == "train":
                mu = ad.mean(h, axis=0)
                centred = h - mu
                var = ad.mean(centred * centred, axis=0)
                stats[f"mean{i}"], stats[f"var{i}"] = mu, var
                h = centred * ad.power(var + BN_EPS, -0.5)
            else:
                inv = 1.0 / np.sqrt(net.state[f"var{i}"] + BN_EPS)
                h = (h - ad.const(net.state[f"mean{i}"])) * ad.const(inv)
            h = h * leaves[f"gamma{i}"] + leaves[f"beta{i}"]
        if act == "relu":
            h = ad.relu(h)
        elif act == "tanh":
            h = ad.tanh(h)
    return ForwardResult(h, leaves, stats)


def _check_batch(net: Network, x: np.ndarray, mode: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.spec.input_width:
        raise ValueError(f"expected batch of shape (n, {net.spec.input_width}), got {x.shape}")
    if x.shape[0] < 1:
        raise ValueError("empty batch")
    if mode == "train" and any(net.spec.batch_norm) and x.shape[0] < 2:
        raise ValueError("train-mode batch norm needs at least 2 rows")
    return x


def predict(net: Network, x: np.ndarray) -> np.ndarray:
    """Eval-mode forward pass in plain numpy (same operation order as ``forward``)."""
    h = _check_batch(net, x, "eval")
    spec = net.spec
    p = net.params
    for i, act in enumerate(spec.activations):
        h = h @ p[f"W{i}"] + p[f"b{i}"]
        if spec.batch_norm[i]:
            inv = 1.0 / np.sqrt(net.state[f"var{i}"] + BN_EPS)
            h = (h - net.state[f"mean{i}"]) * inv
            h = h * p[f"gamma{i}"] + p[f"beta{i}"]
        if act == "relu":
            h = np.maximum(h, 0.0)
        elif act == "tanh":
            h = np.tanh(h)
    return h


def run(net: Network, x: np.ndarray, mode: str = "eval") -> np.ndarray:
    """Evaluate ``net`` through the expression graph (any mode)."""
    x = _check_batch(net, x, mode)
    res = forward(net, ad.leaf("x"), mode)
    g = ad.ExprGraph({"y": res.output}, param_bindings(net, "net"))
    return ad.evaluate(g, {"x": x})["y"]


def update_running_stats(net: Network, batch_stats: Mapping[str, np.ndarray],
                         batch_size: int) -> Network:
    """Momentum update of running mean/variance (unbiased batch variance)."""
    if not batch_stats:
        return net
    new = {}
    for key, value in batch_stats.items():
        value = np.asarray(value).reshape(-1)
        if key.startswith("var") and batch_size > 1:
            value = value * (batch_size / (batch_size - 1))
        new[key] = BN_MOMENTUM * net.state[key] + (1.0 - BN_MOMENTUM) * value
    return net.with_state(new)


# ------------------------------------------------------------------- Adam

@dataclass(frozen=True, eq=False)
class AdamState:
    lr: float = DEFAULT_LR
    beta1: float = GAN_BETAS[0]
    beta2: float = GAN_BETAS[1]
    eps: float = 1e-8
    t: int = 0
    m: Mapping[str, np.ndarray] = field(default_factory=dict)
    v: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient for {key!r} has shape {g.shape}, expected {np.shape(p)}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {key!r}")
        m = state.m.get(key)
        v = state.v.get(key)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * (g * g) if v is None else b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        new_params[key] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[key], new_v[key] = m, v
    return new_params, replace(state, t=t, m=new_m, v=new_v)
