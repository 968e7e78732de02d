"""Variational quantum classifier, local training and federated averaging.

Circuit layout for ``n`` qubits and ``L`` layers:

* angle encoding: ``U(x_j, 0, 0)`` (an RY rotation) on qubit ``j``;
* ``L`` layers of ``U(theta, phi, lam)`` on every qubit followed by a CNOT
  ring ``CNOT(q, q + 1 mod n)`` (a single CNOT for two qubits, none for one).

Parameters are stored flat as ``[layer][qubit][theta, phi, lam]``, so
``d = 3 * n * L``.

Class readout: class ``c`` reads qubit ``c mod n`` with sign
``(-1) ** (c // n)``; scores are ``readout_scale * sign * <Z>`` and go through
a softmax. With ``class_count <= n`` every class owns a qubit; beyond that,
classes in odd groups reuse a qubit with the opposite sign.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import quantumsim as qs

PROB_FLOOR = 1e-12
SHIFT = math.pi / 2

QUANT_BITS = 16
QUANT_LOW = -2 * math.pi
QUANT_SPAN = 4 * math.pi
QUANT_STEP = QUANT_SPAN / 2**QUANT_BITS


class ShapeError(ValueError):
    pass


class EmptyAggregation(ValueError):
    pass


@dataclass(frozen=True)
class CircuitSpec:
    n_qubits: int = 4
    layers: int = 2
    class_count: int = 2
    readout_scale: float = 2.0

    @property
    def n_params(self) -> int:
        return 3 * self.n_qubits * self.layers

    def readout_matrix(self) -> np.ndarray:
        R = np.zeros((self.class_count, self.n_qubits))
        for c in range(self.class_count):
            R[c, c % self.n_qubits] = (-1) ** (c // self.n_qubits)
        return R


@dataclass(frozen=True, eq=False)
class ModelParams:
    angles: np.ndarray
    version: int = 0
    origin: object = None
    produced_at: float = 0.0  # simulation seconds since scenario start

    def __post_init__(self):
        a = np.array(self.angles, dtype=float).reshape(-1)
        if not np.all(np.isfinite(a)):
            raise ValueError("model angles must be finite")
        a.setflags(write=False)
        object.__setattr__(self, "angles", a)

    @property
    def d(self) -> int:
        return self.angles.size

    def with_angles(self, angles, **changes) -> "ModelParams":
        return replace(self, angles=angles, **changes)

    def same_angles(self, other: "ModelParams") -> bool:
        return self.angles.tobytes() == other.angles.tobytes()


@dataclass(frozen=True)
class Example:
    features: tuple
    label: int


@dataclass(frozen=True, eq=False)
class LocalDataset:
    features: np.ndarray  # (N, f)
    labels: np.ndarray  # (N,)
    owner: object = None

    def __post_init__(self):
        f = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=int)
        if f.ndim != 2 or y.shape != (f.shape[0],):
            raise ShapeError("features must be (N, f) with one label per row")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def examples(self) -> list[Example]:
        return [Example(tuple(x), int(y)) for x, y in zip(self.features, self.labels)]

    @classmethod
    def from_examples(cls, examples, owner=None) -> "LocalDataset":
        return cls(np.array([e.features for e in examples], dtype=float), np.array([e.label for e in examples]), owner)

    def subset(self, idx) -> "LocalDataset":
        return LocalDataset(self.features[idx], self.labels[idx], self.owner)


# ---------------------------------------------------------------------------
# circuit evaluation


def _layer_gates(angles: np.ndarray, spec: CircuitSpec) -> np.ndarray:
    """(..., d) -> (..., L, n, 3)"""
    return angles.reshape(angles.shape[:-1] + (spec.layers, spec.n_qubits, 3))


def _ring(n: int) -> list[tuple[int, int]]:
    if n == 1:
        return []
    if n == 2:
        return [(0, 1)]
    return [(q, (q + 1) % n) for q in range(n)]


def expectations(angles: np.ndarray, X: np.ndarray, spec: CircuitSpec) -> np.ndarray:
    """<Z_q> for a stack of parameter vectors and a batch of inputs.

    ``angles`` is ``(K, d)`` or ``(d,)``; ``X`` is ``(B, n)``. Returns
    ``(K, B, n)`` (or ``(B, n)`` for a single parameter vector).
    """
    angles = np.asarray(angles, dtype=float)
    single = angles.ndim == 1
    A = np.atleast_2d(angles)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = spec.n_qubits
    if X.shape[1] != n:
        raise ShapeError(f"expected {n} features, got {X.shape[1]}")
    if A.shape[1] != spec.n_params:
        raise ShapeError(f"expected {spec.n_params} parameters, got {A.shape[1]}")
    amps = qs.zero_states((X.shape[0],), n)
    for q in range(n):
        amps = qs.apply_1q(amps, qs.u_matrices(X[:, q], 0.0, 0.0), q, n)
    amps = np.broadcast_to(amps, (A.shape[0],) + amps.shape)
    layers = _layer_gates(A, spec)
    for ell in range(spec.layers):
        for q in range(n):
            th, ph, la = layers[:, ell, q, 0], layers[:, ell, q, 1], layers[:, ell, q, 2]
            m = qs.u_matrices(th, ph, la)[:, None]  # (K, 1, 2, 2)
            amps = qs.apply_1q(amps, m, q, n)
        for c, t in _ring(n):
            amps = qs.apply_cnot(amps, c, t, n)
    z = qs.z_expectations(amps, n)
    return z[0] if single else z


def _softmax(scores: np.ndarray) -> np.ndarray:
    s = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def probabilities_from_z(z: np.ndarray, spec: CircuitSpec) -> np.ndarray:
    return _softmax(spec.readout_scale * z @ spec.readout_matrix().T)


def predict(params: ModelParams, x, spec: CircuitSpec) -> np.ndarray:
    """Class probabilities for one feature vector ``(f,)`` or a batch ``(B, f)``."""
    x = np.asarray(x, dtype=float)
    probs = probabilities_from_z(expectations(params.angles, np.atleast_2d(x), spec), spec)
    return probs[0] if x.ndim == 1 else probs


def cross_entropy(probs: np.ndarray, labels) -> float:
    labels = np.asarray(labels, dtype=int)
    p = probs[np.arange(labels.size), labels]
    return float(np.mean(-np.log(np.maximum(p, PROB_FLOOR))))


def loss(params: ModelParams, dataset: LocalDataset, spec: CircuitSpec) -> float:
    if len(dataset) == 0:
        raise ValueError("loss of an empty dataset")
    return cross_entropy(predict(params, dataset.features, spec), dataset.labels)


def accuracy(params: ModelParams, dataset: LocalDataset, spec: CircuitSpec) -> float:
    if len(dataset) == 0:
        return float("nan")
    probs = predict(params, dataset.features, spec)
    return float(np.mean(np.argmax(probs, axis=1) == dataset.labels))


# ---------------------------------------------------------------------------
# gradients


def expectation_jacobian(angles: np.ndarray, X: np.ndarray, spec: CircuitSpec) -> np.ndarray:
    """d<Z_q>/d angle_k by the parameter-shift rule; shape ``(B, n, d)``."""
    angles = np.asarray(angles, dtype=float)
    d = angles.size
    if d == 0:
        return np.zeros((np.atleast_2d(X).shape[0], spec.n_qubits, 0))
    eye = np.eye(d) * SHIFT
    stack = np.concatenate([angles + eye, angles - eye])  # (2d, d)
    z = expectations(stack, X, spec)  # (2d, B, n)
    jac = (z[:d] - z[d:]) / 2
    return np.moveaxis(jac, 0, -1)


def gradient(params: ModelParams, batch: LocalDataset, spec: CircuitSpec) -> np.ndarray:
    """Gradient of the mean cross-entropy over ``batch``.

    The circuit derivative of every <Z_q> comes from the shift rule; the
    softmax/cross-entropy part is chained on classically.
    """
    if len(batch) == 0:
        raise ValueError("gradient of an empty batch")
    if params.d == 0:
        return np.zeros(0)
    X, y = batch.features, batch.labels
    z = expectations(params.angles, X, spec)
    probs = probabilities_from_z(z, spec)
    onehot = np.zeros_like(probs)
    onehot[np.arange(y.size), y] = 1.0
    dz = spec.readout_scale * (probs - onehot) @ spec.readout_matrix() / y.size  # (B, n)
    jac = expectation_jacobian(params.angles, X, spec)
    return np.einsum("bq,bqk->k", dz, jac)


def local_train(
    params: ModelParams,
    dataset: LocalDataset,
    epochs: int,
    lr: float,
    spec: CircuitSpec,
    rng: np.random.Generator,
    batch_size: int = 16,
    completed_at: float | None = None,
    origin=None,
) -> ModelParams:
    """Mini-batch gradient descent; the batch order is drawn from ``rng``."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    theta = params.angles.copy()
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = dataset.subset(order[start : start + batch_size])
            theta = theta - lr * gradient(params.with_angles(theta), batch, spec)
    return ModelParams(
        theta,
        version=params.version + 1,
        origin=dataset.owner if origin is None else origin,
        produced_at=params.produced_at if completed_at is None else completed_at,
    )


def _origin_key(p: ModelParams):
    o = p.origin
    return (0, o, "") if isinstance(o, (int, np.integer)) else (1, 0, str(o))


def fed_avg(updates, origin=None) -> ModelParams:
    """Weighted componentwise mean of ``[(ModelParams, weight), ...]``.

    Inputs are folded in a canonical order so the result does not depend on
    how the caller enumerated them.
    """
    updates = list(updates)
    if not updates:
        raise EmptyAggregation("no updates to aggregate")
    ws = np.array([w for _, w in updates], dtype=float)
    if np.any(ws < 0) or ws.sum() <= 0:
        raise EmptyAggregation("weights must be non-negative and not all zero")
    order = sorted(range(len(updates)), key=lambda i: (_origin_key(updates[i][0]), updates[i][0].angles.tobytes(), ws[i]))
    ps = [updates[i][0] for i in order]
    w = ws[order] / math.fsum(ws)
    base = ps[0].angles
    acc = np.zeros_like(base)
    for wi, p in zip(w, ps):
        acc = acc + wi * (p.angles - base)
    return ModelParams(
        base + acc,
        version=max(p.version for p in ps) + 1,
        origin=origin,
        produced_at=max(p.produced_at for p in ps),
    )


def init_params(spec: CircuitSpec, rng: np.random.Generator, scale: float = 0.1) -> ModelParams:
    return quantize_params(ModelParams(rng.normal(0.0, scale, spec.n_params)))


# ---------------------------------------------------------------------------
# fixed-point codec shared with the transport layer


def wrap_angles(a) -> np.ndarray:
    # U is 4*pi periodic in theta up to a global phase and 2*pi in phi/lambda
    return np.mod(np.asarray(a, dtype=float) - QUANT_LOW, QUANT_SPAN) + QUANT_LOW


def quantize(a) -> np.ndarray:
    codes = np.rint((wrap_angles(a) - QUANT_LOW) / QUANT_STEP).astype(np.int64)
    return (codes % 2**QUANT_BITS).astype(np.uint16)


def dequantize(codes) -> np.ndarray:
    return QUANT_LOW + np.asarray(codes, dtype=np.uint16).astype(float) * QUANT_STEP


def quantize_params(p: ModelParams) -> ModelParams:
    return p.with_angles(dequantize(quantize(p.angles)))


def pack_angles(a) -> bytes:
    return quantize(a).astype("<u2").tobytes()


def unpack_angles(blob: bytes) -> np.ndarray:
    return dequantize(np.frombuffer(blob, dtype="<u2"))


_CKPT_MAGIC = b"SQFL"
_CKPT_HEADER = struct.Struct(">4sIIII")


def dump_checkpoint(params: ModelParams, spec: CircuitSpec) -> bytes:
    """Header (d, f, L, class_count) followed by 16-bit fixed-point angles."""
    head = _CKPT_HEADER.pack(_CKPT_MAGIC, params.d, spec.n_qubits, spec.layers, spec.class_count)
    return head + pack_angles(params.angles)


def load_checkpoint(blob: bytes) -> tuple[ModelParams, CircuitSpec]:
    magic, d, f, L, c = _CKPT_HEADER.unpack_from(blob)
    if magic != _CKPT_MAGIC:
        raise ValueError("not a model checkpoint")
    angles = unpack_angles(blob[_CKPT_HEADER.size :])
    if angles.size != d:
        raise ShapeError(f"checkpoint declares {d} angles, holds {angles.size}")
    return ModelParams(angles), CircuitSpec(n_qubits=f, layers=L, class_count=c)
