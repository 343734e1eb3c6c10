"""Multi-layer perceptron approximator with smooth activations.

Parameters live in plain numpy arrays; the same forward definition runs on
raw arrays, on jets (derivative-carrying evaluation) and on tape nodes
(trainable evaluation), depending on what is passed in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tape as tp
from .jets import (Jet, derivs_gelu, derivs_silu, derivs_tanh)

ACTIVATIONS = ("tanh", "silu", "gelu")

_DERIV_FNS = {"tanh": derivs_tanh, "silu": derivs_silu, "gelu": derivs_gelu}


@dataclass
class NetworkConfig:
    depth: int = 4                # hidden layers
    width: int = 32
    inputs: int = 2
    outputs: int = 1
    activation: str = "gelu"
    seed: int = 0
    llaaf: bool = False           # layer-wise adaptive activation slopes

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    def layer_dims(self):
        dims = [self.inputs] + [self.width] * self.depth + [self.outputs]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class MlpParams:
    config: NetworkConfig
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    slopes: list = field(default_factory=list)   # per hidden layer, L-LAAF only

    def copy(self):
        return MlpParams(self.config,
                         [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases],
                         [s.copy() for s in self.slopes])


def init_glorot(cfg):
    """Glorot-uniform weights, zero biases, unit slopes when adaptive."""
    rng = np.random.default_rng(cfg.seed)
    weights, biases = [], []
    for fan_in, fan_out in cfg.layer_dims():
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    slopes = [np.ones(()) for _ in range(cfg.depth)] if cfg.llaaf else []
    return MlpParams(cfg, weights, biases, slopes)


def activation_value(kind, z):
    """Elementwise activation on arrays or jets with exact derivatives."""
    if isinstance(z, Jet):
        return z.compose(_DERIV_FNS[kind](z.value, z.space.order))
    z = np.asarray(z, dtype=float)
    return _DERIV_FNS[kind](z, 0)[0]


def forward(params, x):
    """Plain forward pass on a numpy array (..., inputs) or a jet batch.

    Jet inputs must carry the feature axis as the trailing batch axis
    (as produced by Jet.seeds).
    """
    cfg = params.config
    act = cfg.activation
    jet_in = isinstance(x, Jet)
    z = x if jet_in else np.asarray(x, dtype=float)
    for layer in range(cfg.depth):
        w, b = params.weights[layer], params.biases[layer]
        if jet_in:
            coef = z.coef @ w.T
            coef[0] += b
            z = Jet(z.space, coef)
        else:
            z = z @ w.T + b
        if params.slopes:
            z = z * float(params.slopes[layer])
        z = activation_value(act, z)
    w, b = params.weights[-1], params.biases[-1]
    if jet_in:
        coef = z.coef @ w.T
        coef[0] += b
        return Jet(z.space, coef)
    return z @ w.T + b


def forward_on_tape(tape, param_nodes, x_node, cfg):
    """Forward pass over tape nodes; x_node is a jet-valued constant node."""
    z = x_node
    for layer in range(cfg.depth):
        z = tp.affine(z, param_nodes[f"w{layer}"], param_nodes[f"b{layer}"])
        s = param_nodes.get(f"s{layer}")
        if s is not None:
            z = z * s
        z = tp.compose(z, cfg.activation)
    n = cfg.depth
    return tp.affine(z, param_nodes[f"w{n}"], param_nodes[f"b{n}"])


def register_params(tape, params):
    """Record all trainable arrays on a tape; returns name -> node."""
    nodes = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        nodes[f"w{i}"] = tape.param(w)
        nodes[f"b{i}"] = tape.param(b)
    for i, s in enumerate(params.slopes):
        nodes[f"s{i}"] = tape.param(s)
    return nodes


def slope_recovery_loss(params):
    """Reciprocal mean-exponential of the adaptive slopes (L-LAAF term)."""
    if not params.slopes:
        raise ValueError("slope recovery needs adaptive-slope parameters")
    return 1.0 / float(np.mean([np.exp(float(s)) for s in params.slopes]))


def slope_recovery_on_tape(tape, param_nodes, cfg):
    """Tape version of the slope recovery term (differentiable in slopes)."""
    acc = None
    for i in range(cfg.depth):
        e = tp.exp_scalar(param_nodes[f"s{i}"])
        acc = e if acc is None else acc + e
    mean_exp = acc * (1.0 / cfg.depth)
    # reciprocal via a dedicated node
    val = 1.0 / mean_exp.value
    out = tp.Node(tape, val, (mean_exp,))

    def bwd(g):
        mean_exp.accum(-g * val * val, own=True)
    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params, path):
    """Layer-tagged binary checkpoint; round-trips bit-exactly."""
    cfg = params.config
    header = json.dumps({
        "depth": cfg.depth, "width": cfg.width, "inputs": cfg.inputs,
        "outputs": cfg.outputs, "activation": cfg.activation,
        "seed": cfg.seed, "llaaf": cfg.llaaf,
    })
    arrays = {"header": np.frombuffer(header.encode(), dtype=np.uint8)}
    for i, w in enumerate(params.weights):
        arrays[f"w{i}"] = w
    for i, b in enumerate(params.biases):
        arrays[f"b{i}"] = b
    for i, s in enumerate(params.slopes):
        arrays[f"s{i}"] = s
    np.savez(path, **arrays)
    return path


def load_checkpoint(path):
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        cfg = NetworkConfig(**header)
        weights = [data[f"w{i}"] for i in range(cfg.depth + 1)]
        biases = [data[f"b{i}"] for i in range(cfg.depth + 1)]
        slopes = []
        if cfg.llaaf:
            slopes = [data[f"s{i}"] for i in range(cfg.depth)]
    return MlpParams(cfg, weights, biases, slopes)
