"""Encoder, frozen reference, multiplier network and prototype classifier."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor

DEFAULT_TAU = 0.07


def _check_layers(weights, biases):
    if len(weights) == 0 or len(weights) != len(biases):
        raise ValueError("need one bias per weight matrix and at least one layer")
    for i, (w, b) in enumerate(zip(weights, biases)):
        if w.ndim != 2 or b.shape != (w.shape[1],):
            raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
        if i and weights[i - 1].shape[1] != w.shape[0]:
            raise ValueError(
                f"layer {i}: input dim {w.shape[0]} does not chain from {weights[i - 1].shape[1]}"
            )


class _ParamSet:
    """Shared plumbing for named lists of float32 arrays."""

    def arrays(self) -> list[np.ndarray]:
        raise NotImplementedError

    def names(self) -> list[str]:
        raise NotImplementedError

    def named(self) -> list[tuple[str, np.ndarray]]:
        return list(zip(self.names(), self.arrays()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, a in self.named():
            h.update(name.encode())
            h.update(np.ascontiguousarray(a, dtype=np.float32).tobytes())
        return h.hexdigest()

    def on(self, tape: Tape) -> list[Tensor]:
        """Watch every array on ``tape``; returns tensors in ``arrays()`` order."""
        return [tape.watch(a) for a in self.arrays()]


@dataclass
class EncoderParams(_ParamSet):
    """MLP encoder; ReLU on hidden layers, identity output.

    Weights are stored ``(in, out)`` so a batch maps as ``x @ W + b``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float32) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float32) for b in self.biases]
        _check_layers(self.weights, self.biases)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def embed_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [w.shape[1] for w in self.weights]

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def names(self):
        out = []
        for i in range(len(self.weights)):
            out += [f"encoder.{i}.weight", f"encoder.{i}.bias"]
        return out

    def with_arrays(self, arrays) -> "EncoderParams":
        return EncoderParams(list(arrays[0::2]), list(arrays[1::2]))

    @classmethod
    def init(cls, dims, seed: int | np.random.Generator = 0) -> "EncoderParams":
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)


@dataclass(frozen=True)
class ReferenceEncoder:
    """Read-only snapshot of an encoder; arrays are flagged non-writeable."""

    params: EncoderParams
    digest: str = field(default="")

    def __post_init__(self):
        for a in self.params.arrays():
            a.flags.writeable = False
        object.__setattr__(self, "digest", self.params.checksum())

    @property
    def input_dim(self):
        return self.params.input_dim

    @property
    def embed_dim(self):
        return self.params.embed_dim

    def checksum(self) -> str:
        return self.params.checksum()

    def arrays(self):
        return self.params.arrays()


def freeze(params: EncoderParams) -> ReferenceEncoder:
    return ReferenceEncoder(copy.deepcopy(params))


def encode(params, x) -> Tensor:
    """Embed a batch ``(n, input_dim)``.

    ``params`` is an :class:`EncoderParams`, a :class:`ReferenceEncoder`, or
    the list of tensors returned by ``EncoderParams.on(tape)``.
    """
    if isinstance(params, ReferenceEncoder):
        params = params.params
    layers = params.arrays() if isinstance(params, EncoderParams) else list(params)
    x = T.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != layers[0].shape[0]:
        raise T.ShapeError(f"encode: expected (batch, {layers[0].shape[0]}), got {x.shape}")
    h = x
    n_layers = len(layers) // 2
    for i in range(n_layers):
        h = T.matmul(h, layers[2 * i]) + layers[2 * i + 1]
        if i < n_layers - 1:
            h = T.relu(h)
    return h


@dataclass
class DualNetParams(_ParamSet):
    """Two-layer multiplier network ``softplus(relu(z0 W1 + b1) W2 + b2)``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float32))
        _check_layers([self.w1, self.w2], [self.b1, self.b2])
        if self.w2.shape[1] != 1:
            raise ValueError("dual network must have a single output")

    @property
    def embed_dim(self) -> int:
        return self.w1.shape[0]

    def arrays(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def names(self):
        return ["dual.0.weight", "dual.0.bias", "dual.1.weight", "dual.1.bias"]

    def with_arrays(self, arrays) -> "DualNetParams":
        return DualNetParams(*arrays)

    @classmethod
    def init(cls, embed_dim: int, hidden: int = 32, seed=0, out_bias: float = 0.0):
        rng = np.random.default_rng(seed)
        w1 = rng.normal(0.0, np.sqrt(2.0 / embed_dim), (embed_dim, hidden))
        w2 = rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, 1))
        return cls(w1, np.zeros(hidden), w2, np.full(1, out_bias))


@dataclass
class ScalarDual(_ParamSet):
    """Input-independent multiplier ``softplus(w)`` (the constant-multiplier limit)."""

    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float32).reshape(1)

    def arrays(self):
        return [self.w]

    def names(self):
        return ["dual.scalar"]

    def with_arrays(self, arrays) -> "ScalarDual":
        return ScalarDual(arrays[0])

    @classmethod
    def init(cls, value: float = 0.0):
        return cls(np.array([value]))


def dual_lambda(omega, z0) -> Tensor:
    """Per-sample non-negative multipliers from reference embeddings.

    ``z0`` is treated as a constant even if it carries a tape node; only the
    multiplier parameters are differentiated. ``omega`` may be a param set or
    the tensors from its ``on(tape)``.
    """
    z0 = np.asarray(z0.data if isinstance(z0, Tensor) else z0, dtype=np.float32)
    if z0.ndim != 2:
        raise T.ShapeError(f"dual_lambda: expected (batch, k), got {z0.shape}")
    if isinstance(omega, ScalarDual) or (not isinstance(omega, DualNetParams) and len(omega) == 1):
        (w,) = omega.arrays() if isinstance(omega, ScalarDual) else omega
        ones = Tensor(np.ones(z0.shape[0], dtype=np.float32))
        return T.softplus(ones * w)
    w1, b1, w2, b2 = omega.arrays() if isinstance(omega, DualNetParams) else omega
    if z0.shape[1] != T.as_tensor(w1).shape[0]:
        raise T.ShapeError(f"dual_lambda: embedding dim {z0.shape[1]} != {T.as_tensor(w1).shape[0]}")
    hidden = T.relu(T.matmul(z0, w1) + b1)
    out = T.matmul(hidden, w2) + b2
    return T.softplus(T.reshape(out, (z0.shape[0],)))


@dataclass(frozen=True)
class PrototypeHead:
    """Unit-norm class vectors scored by temperature-scaled cosine similarity."""

    prototypes: np.ndarray
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        p = np.array(self.prototypes, dtype=np.float32)
        if p.ndim != 2 or p.shape[0] < 1:
            raise ValueError("prototypes must be a (C, k) matrix with C >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        norms = np.linalg.norm(p.astype(np.float64), axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-5):
            raise ValueError("prototypes must have unit l2 norm")
        p.flags.writeable = False
        object.__setattr__(self, "prototypes", p)

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @classmethod
    def from_embeddings(cls, z: np.ndarray, labels: np.ndarray, n_classes: int, tau=DEFAULT_TAU):
        """Class-mean embeddings, l2-normalised."""
        z = np.asarray(z, dtype=np.float64)
        centers = np.zeros((n_classes, z.shape[1]))
        for c in range(n_classes):
            members = z[labels == c]
            if len(members) == 0:
                raise ValueError(f"no samples for class {c}")
            centers[c] = members.mean(axis=0)
        norms = np.linalg.norm(centers, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("degenerate class centroid")
        return cls((centers / norms).astype(np.float32), tau)


def prototype_logits(head: PrototypeHead, z) -> Tensor:
    z = T.as_tensor(z)
    if z.data.ndim != 2 or z.shape[1] != head.prototypes.shape[1]:
        raise T.ShapeError(f"prototype head expects (batch, {head.prototypes.shape[1]}), got {z.shape}")
    sq = T.sq_norm(z)
    if np.any(sq.data == 0):
        raise ValueError("zero-norm embedding row")
    unit = z / T.reshape(T.sqrt(sq), (z.shape[0], 1))
    return T.matmul(unit, head.prototypes.T) * (1.0 / head.tau)


def prototype_log_probs(head: PrototypeHead, z) -> Tensor:
    return T.log_softmax(prototype_logits(head, z))


def prototype_probs(head: PrototypeHead, z) -> Tensor:
    return T.exp(prototype_log_probs(head, z))


def predict(head: PrototypeHead, z) -> np.ndarray:
    z = np.asarray(z.data if isinstance(z, Tensor) else z)
    return np.argmax(prototype_logits(head, z).data, axis=1)
