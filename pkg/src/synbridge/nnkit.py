"""Affine layers with hand-written backward passes, Adam, and the ``SYNW``
parameter checkpoint format.

Layers take either a single vector or a batch of row vectors. ``forward``
caches what ``backward`` needs; ``backward`` accumulates parameter gradients
and returns the gradient with respect to the input.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._fileutil import atomic_write
from .errors import BadMagic, CorruptPayload, NoCachedForward, ShapeMismatch, VersionUnsupported

CHECKPOINT_MAGIC = b"SYNW"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Activation:
    kind: str = "identity"
    slope: float = 0.01

    def __post_init__(self):
        if self.kind not in ("identity", "relu", "leaky_relu", "sigmoid"):
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "leaky_relu" and not 0 < self.slope < 1:
            raise ValueError("LeakyReLU slope must lie in (0, 1)")

    def __call__(self, z):
        if self.kind == "relu":
            return np.maximum(z, 0.0)
        if self.kind == "leaky_relu":
            return np.where(z > 0, z, self.slope * z)
        if self.kind == "sigmoid":
            return sigmoid(z)
        return z

    def derivative(self, z, out):
        if self.kind == "relu":
            return (z > 0).astype(np.float64)
        if self.kind == "leaky_relu":
            return np.where(z > 0, 1.0, self.slope)
        if self.kind == "sigmoid":
            return out * (1.0 - out)
        return np.ones_like(z)


IDENTITY = Activation("identity")
RELU = Activation("relu")
SIGMOID = Activation("sigmoid")


def leaky_relu(slope: float = 0.01) -> Activation:
    return Activation("leaky_relu", slope)


def sigmoid(z):
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class AffineLayer:
    """``y = act(W x + b)`` with ``W`` of shape ``(out_dim, in_dim)``."""

    def __init__(self, weight, bias, activation: Activation = IDENTITY):
        self.weight = np.array(weight, dtype=np.float64)
        self.bias = np.array(bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatch(
                f"weight {self.weight.shape} and bias {self.bias.shape} are incompatible"
            )
        self.activation = activation
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim or x.ndim > 2:
            raise ShapeMismatch(f"expected input of length {self.in_dim}, got shape {x.shape}")
        z = x @ self.weight.T + self.bias
        out = self.activation(z)
        self._cache = (x, z, out)
        return out

    __call__ = forward

    def apply(self, x):
        """Forward pass without touching the backward cache (safe to share)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim or x.ndim > 2:
            raise ShapeMismatch(f"expected input of length {self.in_dim}, got shape {x.shape}")
        return self.activation(x @ self.weight.T + self.bias)

    def backward(self, upstream):
        if self._cache is None:
            raise NoCachedForward("backward called before forward")
        x, z, out = self._cache
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != out.shape:
            raise ShapeMismatch(f"upstream shape {upstream.shape} != output shape {out.shape}")
        dz = upstream * self.activation.derivative(z, out)
        if x.ndim == 1:
            self.grad_weight += np.outer(dz, x)
            self.grad_bias += dz
        else:
            self.grad_weight += dz.T @ x
            self.grad_bias += dz.sum(axis=0)
        return dz @ self.weight

    def parameters(self):
        return [self.weight, self.bias]

    def gradients(self):
        return [self.grad_weight, self.grad_bias]

    def zero_grad(self):
        self.grad_weight[...] = 0.0
        self.grad_bias[...] = 0.0

    def clear_cache(self):
        self._cache = None

    def copy(self) -> "AffineLayer":
        return AffineLayer(self.weight.copy(), self.bias.copy(), self.activation)


def init_parameters(in_dim: int, out_dim: int, seed, activation: Activation = IDENTITY) -> AffineLayer:
    """Uniform fan-in initialization in ``[-1/sqrt(in_dim), 1/sqrt(in_dim)]``, zero bias."""
    if in_dim < 1 or out_dim < 1:
        raise ValueError("layer dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(in_dim)
    weight = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    return AffineLayer(weight, np.zeros(out_dim), activation)


@dataclass
class Adam:
    """Adam with L2 weight decay added to the gradient (coupled).

    Set ``decoupled=True`` for the AdamW variant, which shrinks parameters
    directly by ``lr * weight_decay``.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = False
    step_count: int = 0
    _m: list = field(default_factory=list, repr=False)
    _v: list = field(default_factory=list, repr=False)

    def step(self, params, grads):
        """Update ``params`` in place from ``grads``, then zero ``grads``."""
        if len(params) != len(grads):
            raise ShapeMismatch("params and grads differ in length")
        if not self._m:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        if len(self._m) != len(params):
            raise ShapeMismatch("parameter list changed between steps")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            if p.shape != g.shape or p.shape != m.shape:
                raise ShapeMismatch(f"parameter {p.shape} vs gradient {g.shape}")
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and self.decoupled:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        for g in grads:
            g[...] = 0.0


def scheduled_lr(base_lr: float, step: int, total_steps: int, schedule: str = "constant") -> float:
    """Learning rate at ``step`` (0-based) for a ``constant`` or ``cosine`` schedule."""
    if schedule == "constant" or total_steps <= 1:
        return base_lr
    if schedule == "cosine":
        return 0.5 * base_lr * (1.0 + np.cos(np.pi * step / total_steps))
    raise ValueError(f"unknown lr schedule {schedule!r}")


def layer_tensors(prefix: str, layer: AffineLayer) -> dict:
    return {f"{prefix}.W": layer.weight, f"{prefix}.b": layer.bias}


def layer_from_tensors(tensors: dict, prefix: str, activation: Activation = IDENTITY) -> AffineLayer:
    try:
        return AffineLayer(tensors[f"{prefix}.W"], tensors[f"{prefix}.b"], activation)
    except KeyError as exc:
        raise CorruptPayload(f"checkpoint lacks tensor {exc.args[0]!r}") from None


def save_checkpoint(tensors: dict, path) -> None:
    """Write named tensors in the ``SYNW`` layout (little-endian, float32 payload)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    atomic_write(Path(path), b"".join(chunks))


def load_checkpoint(path) -> dict:
    """Read a ``SYNW`` file into an ordered ``{name: float64 array}`` dict."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: not a SYNW checkpoint")
    if len(data) < 8:
        raise CorruptPayload(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionUnsupported(f"{path}: checkpoint version {version}")
    offset = 8
    tensors = {}
    try:
        while offset < len(data):
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset : offset + name_len].decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise CorruptPayload(f"{path}: truncated tensor name")
            offset += name_len
            (rank,) = struct.unpack_from("<I", data, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if offset + nbytes > len(data):
                raise CorruptPayload(f"{path}: tensor {name!r} payload truncated")
            arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=offset)
            tensors[name] = arr.astype(np.float64).reshape(shape)
            offset += nbytes
    except struct.error as exc:
        raise CorruptPayload(f"{path}: {exc}") from None
    return tensors
