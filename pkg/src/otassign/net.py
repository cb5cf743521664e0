"""Small dense feedforward networks with hand-written backprop and RMSProp.

Both the assigner (scalar potential on data space) and the generator are
instances of :class:`DenseNet`. Weights are stored as ``(fan_in, fan_out)``
so a batch ``x`` of shape ``(n, fan_in)`` maps to ``x @ W + b``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "sigmoid", "identity")
LEAKY_SLOPE = 0.2
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


def _act(name, z):
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        # split by sign so exp never overflows
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z, a):
    """Derivative of the activation given pre-activation z and output a."""
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise DimensionError(
                f"weight {self.weight.shape} and bias {self.bias.shape} do not match"
            )


@dataclass
class DenseNet:
    layers: list
    # bumped whenever parameters change in place; used to detect stale caches
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise DimensionError(
                    f"layer output {prev.weight.shape[1]} does not feed input {nxt.weight.shape[0]}"
                )

    @classmethod
    def create(cls, sizes, hidden_activation="leaky_relu", output_activation="identity",
               rng=None, dtype=np.float64):
        """Glorot-uniform weights, zero biases.

        ``sizes`` lists every width including input and output, e.g.
        ``[2, 512, 512, 1]``.
        """
        rng = np.random.default_rng(rng)
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
            b = np.zeros(fan_out, dtype=dtype)
            act = output_activation if i == len(sizes) - 2 else hidden_activation
            layers.append(Layer(w, b, act))
        return cls(layers)

    @property
    def input_dim(self):
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self):
        return self.layers[-1].weight.shape[1]

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    @property
    def sizes(self):
        return [self.input_dim] + [layer.weight.shape[1] for layer in self.layers]

    def parameters(self):
        """Flat list ``[W0, b0, W1, b1, ...]`` of the live arrays."""
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def copy(self):
        layers = [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        return DenseNet(layers, version=self.version)

    def mark_updated(self):
        self.version += 1

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"expected input of shape (n, {self.input_dim}), got {x.shape}")
        return x

    def trace(self, x):
        """Forward pass keeping every layer's input, pre- and post-activation.

        The result can be handed to :meth:`backward` to skip a second forward.
        """
        x = self._check_input(x)
        inputs, pre, post = [], [], []
        a = x
        for layer in self.layers:
            z = a @ layer.weight + layer.bias
            inputs.append(a)
            a = _act(layer.activation, z)
            pre.append(z)
            post.append(a)
        return inputs, pre, post

    def forward(self, x):
        x = self._check_input(x)
        a = x
        for layer in self.layers:
            a = _act(layer.activation, a @ layer.weight + layer.bias)
        return a

    __call__ = forward

    def backward(self, x, upstream, need_params=True, need_input=True, trace=None):
        """Reverse-mode pass for the scalar ``sum(upstream * forward(x))``.

        Returns ``(param_grads, input_grad)``; param grads follow the order
        of :meth:`parameters`.
        """
        inputs, pre, post = trace if trace is not None else self.trace(x)
        upstream = np.asarray(upstream, dtype=self.dtype)
        if upstream.shape != post[-1].shape:
            raise DimensionError(f"upstream shape {upstream.shape} != output shape {post[-1].shape}")
        grads = [None] * (2 * len(self.layers))
        delta = upstream
        dx = None
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            dz = delta * _act_grad(layer.activation, pre[i], post[i])
            if need_params:
                grads[2 * i] = inputs[i].T @ dz
                grads[2 * i + 1] = dz.sum(axis=0)
            if i > 0 or need_input:
                delta = dz @ layer.weight.T
        if need_input:
            dx = delta
        return (grads if need_params else None), dx

    def backward_params(self, x, upstream, trace=None):
        return self.backward(x, upstream, need_params=True, need_input=False, trace=trace)[0]

    def backward_input(self, x, upstream):
        return self.backward(x, upstream, need_params=False, need_input=True)[1]

    def state_arrays(self, prefix=""):
        arrays = {}
        for i, layer in enumerate(self.layers):
            arrays[f"{prefix}W{i}"] = layer.weight
            arrays[f"{prefix}b{i}"] = layer.bias
        return arrays

    def describe(self):
        return {"sizes": self.sizes, "activations": [l.activation for l in self.layers]}

    @classmethod
    def from_arrays(cls, meta, arrays, prefix=""):
        layers = []
        for i, act in enumerate(meta["activations"]):
            layers.append(Layer(np.array(arrays[f"{prefix}W{i}"]),
                                np.array(arrays[f"{prefix}b{i}"]), act))
        net = cls(layers)
        if net.sizes != list(meta["sizes"]):
            raise DimensionError(f"checkpoint sizes {meta['sizes']} do not match arrays {net.sizes}")
        return net


class RMSProp:
    """RMSProp with ``acc <- rho*acc + (1-rho)*g**2`` and ``p <- p - lr*g/(sqrt(acc)+eps)``."""

    def __init__(self, params, lr=5e-5, rho=0.9, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 < rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.acc = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        if len(params) != len(self.acc) or len(grads) != len(params):
            raise DimensionError("parameter, gradient and accumulator lists differ in length")
        for p, g in zip(params, grads):
            if p.shape != np.shape(g):
                raise DimensionError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError("non-finite gradient; update rejected")
        for p, g, acc in zip(params, grads, self.acc):
            acc *= self.rho
            acc += (1.0 - self.rho) * np.square(g)
            p -= self.lr * g / (np.sqrt(acc) + self.eps)

    def update(self, net, grads):
        self.step(net.parameters(), grads)
        net.mark_updated()

    def state_arrays(self, prefix=""):
        return {f"{prefix}acc{i}": a for i, a in enumerate(self.acc)}

    def describe(self):
        return {"lr": self.lr, "rho": self.rho, "eps": self.eps}

    @classmethod
    def from_arrays(cls, meta, arrays, params, prefix=""):
        opt = cls(params, lr=meta["lr"], rho=meta["rho"], eps=meta["eps"])
        opt.acc = [np.array(arrays[f"{prefix}acc{i}"]) for i in range(len(params))]
        return opt


def save_checkpoint(path, nets, optimizers=None, extra=None):
    """Write networks (and optionally their optimizers) to one ``.npz`` file.

    ``nets`` and ``optimizers`` are dicts keyed by name; ``extra`` is any
    JSON-serialisable metadata or a dict of arrays under ``extra_arrays``.
    """
    optimizers = optimizers or {}
    extra = dict(extra or {})
    extra_arrays = extra.pop("extra_arrays", {})
    meta = {"version": CHECKPOINT_VERSION, "nets": {}, "optimizers": {}, "extra": extra}
    arrays = {}
    for name, net in nets.items():
        meta["nets"][name] = net.describe()
        arrays.update(net.state_arrays(prefix=f"{name}/"))
    for name, opt in optimizers.items():
        meta["optimizers"][name] = opt.describe()
        arrays.update(opt.state_arrays(prefix=f"{name}/opt/"))
    for key, value in extra_arrays.items():
        arrays[f"extra/{key}"] = value
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: ``(nets, optimizers, extra)``."""
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(arrays.pop("__meta__").tobytes().decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    nets = {name: DenseNet.from_arrays(m, arrays, prefix=f"{name}/") for name, m in meta["nets"].items()}
    optimizers = {
        name: RMSProp.from_arrays(m, arrays, nets[name].parameters(), prefix=f"{name}/opt/")
        for name, m in meta["optimizers"].items()
    }
    extra = dict(meta["extra"])
    extra_arrays = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    if extra_arrays:
        extra["extra_arrays"] = extra_arrays
    return nets, optimizers, extra
