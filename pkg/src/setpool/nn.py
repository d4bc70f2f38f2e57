"""Small dense-network substrate with hand-written reverse mode.

Everything runs in float64. A network is a list of affine layers, each
followed by an elementwise activation. ``forward`` returns a tape that
``backward`` consumes; gradients are plain lists of arrays aligned with
``DenseNet.params()``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("identity", "tanh", "relu", "softplus")

Grads = list  # list[np.ndarray], aligned with DenseNet.params()


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class GradientCheckError(RuntimeError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _activate(name, z):
    if name == "identity":
        return z
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "softplus":
        return softplus(z)
    raise ValueError(f"unknown activation {name!r}")


def _activation_grad(name, z, y):
    if name == "identity":
        return np.ones_like(z)
    if name == "tanh":
        return 1.0 - y * y
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "softplus":
        return _sigmoid(z)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "identity"

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]


class DenseNet:
    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ShapeError("a DenseNet needs at least one layer")
        for i, (a, b) in enumerate(zip(layers[:-1], layers[1:])):
            if a.n_out != b.n_in:
                raise ShapeError(f"layer {i} outputs {a.n_out} but layer {i + 1} expects {b.n_in}")
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            if layer.b.shape != (layer.n_out,):
                raise ShapeError("bias length must match layer output width")
        self.layers = list(layers)
        self.version = 0

    @classmethod
    def create(cls, dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator,
               zero_last: bool = False) -> "DenseNet":
        """Glorot-uniform initialised network; ``zero_last`` zeroes the output layer."""
        if len(activations) != len(dims) - 1:
            raise ShapeError("need one activation per layer")
        layers = []
        for i, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
            if i == len(dims) - 2 and zero_last:
                W = np.zeros((n_out, n_in))
            else:
                limit = np.sqrt(6.0 / (n_in + n_out))
                W = rng.uniform(-limit, limit, size=(n_out, n_in))
            layers.append(Layer(W, np.zeros(n_out), activations[i]))
        return cls(layers)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].n_in] + [layer.n_out for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.W, layer.b))
        return out

    def zeros_like(self) -> Grads:
        return [np.zeros_like(p) for p in self.params()]

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def touch(self) -> None:
        """Mark parameters as changed; invalidates outstanding tapes."""
        self.version += 1

    def __call__(self, x):
        return forward(self, x)[0]


@dataclass
class Tape:
    net: DenseNet
    version: int
    batched: bool
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)


def forward(net: DenseNet, x) -> tuple[np.ndarray, Tape]:
    """Apply ``net`` to a vector ``(in,)`` or a batch ``(n, in)``."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    if x.ndim not in (1, 2) or x.shape[-1] != net.layers[0].n_in:
        raise ShapeError(f"expected input width {net.layers[0].n_in}, got shape {x.shape}")
    h = x[None, :] if not batched else x
    tape = Tape(net, net.version, batched)
    for layer in net.layers:
        tape.inputs.append(h)
        z = h @ layer.W.T + layer.b
        h = _activate(layer.activation, z)
        tape.pre.append(z)
        tape.post.append(h)
    return (h if batched else h[0]), tape


def backward(net: DenseNet, tape: Tape | None, upstream) -> tuple[Grads, np.ndarray]:
    """Reverse pass of ``<upstream, forward(x)>``; batch gradients are summed."""
    if tape is None or tape.net is not net or not tape.inputs:
        raise TapeError("backward needs the tape from a forward call on this network")
    if tape.version != net.version:
        raise TapeError("tape is stale: parameters changed since forward")
    g = np.asarray(upstream, dtype=np.float64)
    g = g if tape.batched else g[None, :]
    if g.shape != tape.post[-1].shape:
        raise ShapeError(f"upstream shape {g.shape} does not match output {tape.post[-1].shape}")
    grads: Grads = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dz = g * _activation_grad(layer.activation, tape.pre[i], tape.post[i])
        grads[2 * i] = dz.T @ tape.inputs[i]
        grads[2 * i + 1] = dz.sum(axis=0)
        g = dz @ layer.W
    return grads, (g if tape.batched else g[0])


def softmax_xent(logits, label: int) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("softmax_xent needs at least one logit")
    if not 0 <= label < logits.size:
        raise ValueError(f"label {label} out of range for {logits.size} classes")
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    loss = float(log_z - shifted[label])
    d = np.exp(shifted - log_z)
    d[label] -= 1.0
    return loss, d


def _check_finite(grads: Grads) -> None:
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient, update rejected")


def sgd_step(net: DenseNet, grads: Grads, lr: float) -> DenseNet:
    """In-place ``p -= lr * g`` for every parameter."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    params = net.params()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ShapeError("gradient is not shape-congruent with the network")
    _check_finite(grads)
    for p, g in zip(params, grads):
        p -= lr * g
    net.touch()
    return net


class SGD:
    """SGD with optional heavy-ball momentum, one velocity buffer per network."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity: dict[int, Grads] = {}

    def step(self, net: DenseNet, grads: Grads, lr: float | None = None) -> DenseNet:
        lr = self.lr if lr is None else lr
        if self.momentum == 0.0:
            return sgd_step(net, grads, lr)
        _check_finite(grads)
        vel = self._velocity.setdefault(id(net), net.zeros_like())
        for v, g in zip(vel, grads):
            v *= self.momentum
            v += g
        return sgd_step(net, vel, lr)


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.ravel(a) for a in arrays])


def unflatten(vec: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    out, pos = [], 0
    for a in like:
        out.append(vec[pos:pos + a.size].reshape(a.shape))
        pos += a.size
    if pos != vec.size:
        raise ShapeError("flat vector length does not match parameter shapes")
    return out


def grad_check(f: Callable[[], float], params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
               eps: float = 1e-5) -> float:
    """Max of |analytic - central difference| / max(1, |analytic|) over all entries.

    ``f`` is re-evaluated after each in-place perturbation of ``params``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradientCheckError(f"objective not finite near parameter entry {i}")
            numeric = (fp - fm) / (2 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst


# checkpoint format: magic, u32 version, u32 n_layers, per layer (u32 in, u32 out,
# u32 activation code), then per layer W row-major and b as little-endian float64.
MAGIC = b"SETPOOLNET"
FORMAT_VERSION = 1


def net_to_bytes(net: DenseNet) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(net.layers))]
    for layer in net.layers:
        parts.append(struct.pack("<III", layer.n_in, layer.n_out, ACTIVATIONS.index(layer.activation)))
    for layer in net.layers:
        parts.append(np.ascontiguousarray(layer.W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())
    return b"".join(parts)


def net_from_bytes(blob: bytes) -> DenseNet:
    if not blob.startswith(MAGIC):
        raise ValueError("not a network checkpoint (bad magic)")
    pos = len(MAGIC)
    version, n_layers = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    shapes = []
    for _ in range(n_layers):
        n_in, n_out, code = struct.unpack_from("<III", blob, pos)
        pos += 12
        if code >= len(ACTIVATIONS):
            raise ValueError(f"unknown activation code {code}")
        shapes.append((n_in, n_out, ACTIVATIONS[code]))
    layers = []
    for n_in, n_out, act in shapes:
        W = np.frombuffer(blob, dtype="<f8", count=n_in * n_out, offset=pos).reshape(n_out, n_in)
        pos += 8 * n_in * n_out
        b = np.frombuffer(blob, dtype="<f8", count=n_out, offset=pos)
        pos += 8 * n_out
        layers.append(Layer(W.astype(np.float64), b.astype(np.float64), act))
    if pos != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    return DenseNet(layers)


def save_net(net: DenseNet, path) -> None:
    Path(path).write_bytes(net_to_bytes(net))


def load_net(path) -> DenseNet:
    return net_from_bytes(Path(path).read_bytes())
