"""Small feed-forward networks with hand-written backward passes, Adam, and a
finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionMismatchError, MissingCacheError, ShapeMismatchError

ACTIVATIONS = ("tanh", "relu", "linear", "l2norm")


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str = "linear"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeMismatchError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}")


class Mlp:
    """Affine layers, each followed by tanh, relu, identity or L2 normalisation.

    ``l2norm`` may only close the network; it projects the final affine output
    onto the unit sphere.
    """

    def __init__(self, layers: Sequence[Layer]):
        layers = list(layers)
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ShapeMismatchError(
                    f"layer output {prev.weight.shape[1]} does not feed input {nxt.weight.shape[0]}")
        if any(layer.activation == "l2norm" for layer in layers[:-1]):
            raise ValueError("l2norm is only allowed as the final layer")
        self.layers = layers

    @classmethod
    def build(cls, sizes: Sequence[int], activations: Sequence[str],
              rng: np.random.Generator) -> "Mlp":
        """Glorot-uniform weights, zero biases. ``sizes`` includes the input width."""
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per affine layer")
        layers = []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append(Layer(rng.uniform(-limit, limit, size=(fan_in, fan_out)),
                                np.zeros(fan_out), act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    @property
    def params(self) -> list[np.ndarray]:
        """Parameter arrays in (W0, b0, W1, b1, ...) order; mutating them mutates the net."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])

    def forward(self, x: np.ndarray):
        """Returns ``(output, cache)``; the cache feeds :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise DimensionMismatchError(f"input width {x.shape[-1]} != {self.in_dim}")
        cache = []
        h = x
        for layer in self.layers:
            u = h @ layer.weight + layer.bias
            if layer.activation == "tanh":
                out = np.tanh(u)
            elif layer.activation == "relu":
                out = np.maximum(u, 0.0)
            elif layer.activation == "l2norm":
                out = u / np.linalg.norm(u, axis=-1, keepdims=True)
            else:
                out = u
            cache.append((h, u, out))
            h = out
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, grad_out: np.ndarray, cache):
        """Reverse-mode pass. Returns ``(grad_input, grads)`` with grads aligned to :attr:`params`."""
        if not cache or len(cache) != len(self.layers):
            raise MissingCacheError("backward needs the cache from a forward pass on this net")
        g = np.asarray(grad_out, dtype=np.float64)
        grads: list[np.ndarray] = [None] * (2 * len(self.layers))
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            h, u, out = cache[i]
            if layer.activation == "tanh":
                g = g * (1.0 - out * out)
            elif layer.activation == "relu":
                g = g * (u > 0)
            elif layer.activation == "l2norm":
                # d(u/|u|) = (I - q q^T) / |u|
                norm = np.linalg.norm(u, axis=-1, keepdims=True)
                g = (g - out * np.sum(out * g, axis=-1, keepdims=True)) / norm
            h2 = np.atleast_2d(h)
            g2 = np.atleast_2d(g)
            grads[2 * i] = h2.T @ g2
            grads[2 * i + 1] = g2.sum(axis=0)
            g = g @ layer.weight.T
        return g, grads


@dataclass
class AdamState:
    rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps_adam: float = 1e-8
    step: int = 0
    first: Optional[np.ndarray] = None
    second: Optional[np.ndarray] = None


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray],
              rate: float | None = None) -> list[np.ndarray]:
    """Bias-corrected Adam update applied in place; returns ``params``."""
    if len(params) != len(grads):
        raise ShapeMismatchError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeMismatchError(f"parameter {p.shape} vs gradient {g.shape}")
    g = np.concatenate([x.ravel() for x in grads])
    if state.first is None or len(state.first) != g.size:
        # moments are kept as flat vectors over all parameters
        state.first = np.zeros_like(g)
        state.second = np.zeros_like(g)
    lr = state.rate if rate is None else rate
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    m, v = state.first, state.second
    m *= state.beta1
    m += (1.0 - state.beta1) * g
    v *= state.beta2
    v += (1.0 - state.beta2) * (g * g)
    step = (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps_adam)
    start = 0
    for p in params:
        p -= step[start:start + p.size].reshape(p.shape)
        start += p.size
    return params


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise.

    The floor keeps entries whose true gradient is ~0 from dominating through
    finite-difference round-off.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numerical_grads(loss: Callable[[], float], params: list[np.ndarray],
                    step: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``loss()`` w.r.t. every entry of every array in ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = loss()
            flat[j] = orig - step
            down = loss()
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * step)
        out.append(g)
    return out


def grad_check(net: Mlp, loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
               x: np.ndarray, step: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between backprop and central differences for ``loss_fn(net(x))``.

    ``loss_fn`` maps the network output to ``(loss, dloss/doutput)``.
    """
    out, cache = net.forward(x)
    _, dout = loss_fn(out)
    _, analytic = net.backward(dout, cache)
    numeric = numerical_grads(lambda: loss_fn(net.forward(x)[0])[0], net.params, step)
    return max(relative_error(a, n, floor) for a, n in zip(analytic, numeric))


def net_to_arrays(net: Mlp, prefix: str) -> dict:
    arrays = {f"{prefix}activations": np.array(",".join(l.activation for l in net.layers))}
    for i, layer in enumerate(net.layers):
        arrays[f"{prefix}W{i}"] = layer.weight
        arrays[f"{prefix}b{i}"] = layer.bias
    return arrays


def net_from_arrays(arrays, prefix: str) -> Mlp:
    acts = str(arrays[f"{prefix}activations"]).split(",")
    return Mlp([Layer(np.array(arrays[f"{prefix}W{i}"]), np.array(arrays[f"{prefix}b{i}"]), a)
                for i, a in enumerate(acts)])


def save_net(net: Mlp, path) -> None:
    np.savez(path, **net_to_arrays(net, ""))


def load_net(path) -> Mlp:
    with np.load(path, allow_pickle=False) as data:
        return net_from_arrays(data, "")
