"""Dense statevector simulator.

Qubit 0 is the least significant bit of the basis index, so for two qubits
the amplitude order is |q1 q0> = 00, 01, 10, 11.

All kernels accept amplitude arrays with arbitrary leading batch axes, i.e.
shape ``(..., 2**n)``. The learning path and the QKD simulation rely on this
to run many independent circuits in one numpy call.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import cos, sin, sqrt

import numpy as np

MAX_QUBITS = 12

_INV_SQRT2 = 1 / sqrt(2)
H_MATRIX = np.array([[1, 1], [1, -1]], dtype=complex) * _INV_SQRT2
X_MATRIX = np.array([[0, 1], [1, 0]], dtype=complex)
Z_MATRIX = np.array([[1, 0], [0, -1]], dtype=complex)


class SizeError(ValueError):
    pass


class TargetError(ValueError):
    pass


def u_matrix(theta: float, phi: float, lam: float) -> np.ndarray:
    """Generic single-qubit rotation U(theta, phi, lambda)."""
    c, s = cos(theta / 2), sin(theta / 2)
    return np.array(
        [
            [c, -np.exp(1j * lam) * s],
            [np.exp(1j * phi) * s, np.exp(1j * (phi + lam)) * c],
        ],
        dtype=complex,
    )


@dataclass(frozen=True)
class Gate:
    kind: str
    targets: tuple[int, ...]
    params: tuple[float, ...] = ()

    def matrix(self) -> np.ndarray:
        if self.kind == "H":
            return H_MATRIX
        if self.kind == "X":
            return X_MATRIX
        if self.kind == "Z":
            return Z_MATRIX
        if self.kind == "U":
            return u_matrix(*self.params)
        if self.kind == "M":
            # raw 2x2 matrix smuggled through params (used for inverses)
            return np.asarray(self.params, dtype=complex).reshape(2, 2)
        raise ValueError(f"no single-qubit matrix for gate {self.kind}")

    def inverse(self) -> "Gate":
        if self.kind in ("H", "X", "Z", "CNOT"):
            return self
        m = self.matrix().conj().T
        return Gate("M", self.targets, tuple(m.reshape(-1)))


def H(q: int) -> Gate:
    return Gate("H", (q,))


def X(q: int) -> Gate:
    return Gate("X", (q,))


def Z(q: int) -> Gate:
    return Gate("Z", (q,))


def U(q: int, theta: float, phi: float, lam: float = 0.0) -> Gate:
    return Gate("U", (q,), (float(theta), float(phi), float(lam)))


def CNOT(control: int, target: int) -> Gate:
    return Gate("CNOT", (control, target))


# ---------------------------------------------------------------------------
# batched kernels


def _axis(qubit: int, n: int, batch_ndim: int) -> int:
    # C-order reshape puts the most significant qubit first
    return batch_ndim + (n - 1 - qubit)


def apply_1q(amps: np.ndarray, matrix: np.ndarray, qubit: int, n: int) -> np.ndarray:
    """Apply a 2x2 matrix to ``qubit``. ``matrix`` may carry batch axes too."""
    batch = amps.shape[:-1]
    t = amps.reshape(batch + (2,) * n)
    ax = _axis(qubit, n, len(batch))
    t = np.moveaxis(t, ax, -1)
    if matrix.ndim == 2:
        t = t @ matrix.T
    else:
        # per-batch matrices: (..., 2, 2); broadcast over the qubit axes
        m = matrix.reshape(matrix.shape[:-2] + (1,) * (n - 1) + (2, 2))
        t = np.einsum("...j,...ij->...i", t, m)
    return np.moveaxis(t, -1, ax).reshape(batch + (2**n,))


def apply_cnot(amps: np.ndarray, control: int, target: int, n: int) -> np.ndarray:
    idx = np.arange(2**n)
    src = np.where((idx >> control) & 1, idx ^ (1 << target), idx)
    return amps[..., src]


def apply_gate(amps: np.ndarray, gate: Gate, n: int) -> np.ndarray:
    _check_targets(gate, n)
    if gate.kind == "CNOT":
        return apply_cnot(amps, gate.targets[0], gate.targets[1], n)
    return apply_1q(amps, gate.matrix(), gate.targets[0], n)


def prob_one(amps: np.ndarray, qubit: int, n: int) -> np.ndarray:
    mask = ((np.arange(2**n) >> qubit) & 1).astype(bool)
    return np.sum(np.abs(amps[..., mask]) ** 2, axis=-1)


def z_expectations(amps: np.ndarray, n: int) -> np.ndarray:
    """<Z_q> for every qubit; output shape ``(..., n)``."""
    probs = np.abs(amps) ** 2
    idx = np.arange(2**n)
    signs = 1.0 - 2.0 * ((idx[:, None] >> np.arange(n)[None, :]) & 1)
    return probs @ signs


def collapse(amps: np.ndarray, qubit: int, bits: np.ndarray, n: int) -> np.ndarray:
    """Project each batch entry onto ``qubit == bit`` and renormalise."""
    bits = np.asarray(bits)
    idx_bits = (np.arange(2**n) >> qubit) & 1
    keep = idx_bits == bits[..., None]
    out = np.where(keep, amps, 0)
    norm = np.sqrt(np.sum(np.abs(out) ** 2, axis=-1, keepdims=True))
    return out / norm


def measure_batch(amps: np.ndarray, qubit: int, n: int, rng: np.random.Generator):
    p1 = np.clip(prob_one(amps, qubit, n), 0.0, 1.0)
    bits = (rng.random(p1.shape) < p1).astype(np.int8)
    return bits, collapse(amps, qubit, bits, n)


def _check_targets(gate: Gate, n: int) -> None:
    t = gate.targets
    if len(set(t)) != len(t) or any(q < 0 or q >= n for q in t):
        raise TargetError(f"invalid targets {t} for {n} qubits")


# ---------------------------------------------------------------------------
# value-semantic single state API


@dataclass(frozen=True, eq=False)
class Statevector:
    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        self.amplitudes.setflags(write=False)

    def norm(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2))

    def equals_up_to_phase(self, other: "Statevector", tol: float = 1e-9) -> bool:
        return state_fidelity(self, other) > 1 - tol


def new_state(n: int) -> Statevector:
    if not 1 <= n <= MAX_QUBITS:
        raise SizeError(f"n_qubits must be in [1, {MAX_QUBITS}], got {n}")
    amps = np.zeros(2**n, dtype=complex)
    amps[0] = 1.0
    return Statevector(n, amps)


def from_amplitudes(amps) -> Statevector:
    amps = np.array(amps, dtype=complex)
    n = int(round(np.log2(amps.size)))
    if 2**n != amps.size or not 1 <= n <= MAX_QUBITS:
        raise SizeError(f"amplitude vector of length {amps.size} is not 2**n")
    return Statevector(n, amps / np.linalg.norm(amps))


def apply(state: Statevector, gate: Gate) -> Statevector:
    return Statevector(state.n_qubits, apply_gate(state.amplitudes, gate, state.n_qubits))


def run(state: Statevector, gates) -> Statevector:
    amps = state.amplitudes
    for g in gates:
        amps = apply_gate(amps, g, state.n_qubits)
    return Statevector(state.n_qubits, amps)


def measure(state: Statevector, qubit: int, rng: np.random.Generator) -> tuple[int, Statevector]:
    if not 0 <= qubit < state.n_qubits:
        raise TargetError(f"qubit {qubit} out of range")
    bit, amps = measure_batch(state.amplitudes, qubit, state.n_qubits, rng)
    return int(bit), Statevector(state.n_qubits, amps)


def project(state: Statevector, qubit: int, bit: int) -> tuple[float, Statevector]:
    """Force a measurement outcome; returns its Born probability and the state."""
    p1 = float(prob_one(state.amplitudes, qubit, state.n_qubits))
    p = p1 if bit else 1 - p1
    if p <= 0:
        raise ValueError(f"outcome {bit} on qubit {qubit} has zero probability")
    return p, Statevector(state.n_qubits, collapse(state.amplitudes, qubit, np.array(bit), state.n_qubits))


def expectation_z(state: Statevector, qubit: int) -> float:
    if not 0 <= qubit < state.n_qubits:
        raise TargetError(f"qubit {qubit} out of range")
    return float(1 - 2 * prob_one(state.amplitudes, qubit, state.n_qubits))


def state_fidelity(a: Statevector, b: Statevector) -> float:
    return float(abs(np.vdot(a.amplitudes, b.amplitudes)) ** 2)


def qubit_state(state: Statevector, qubit: int) -> np.ndarray:
    """Single-qubit amplitudes of ``qubit`` in a product state.

    Only valid when ``qubit`` is unentangled with the rest (e.g. after the
    other qubits have been measured); raises otherwise.
    """
    n = state.n_qubits
    t = np.moveaxis(state.amplitudes.reshape((2,) * n), n - 1 - qubit, -1).reshape(-1, 2)
    row = t[np.argmax(np.sum(np.abs(t) ** 2, axis=1))]
    vec = row / np.linalg.norm(row)
    # product check: every other row must be parallel to vec
    resid = t - np.outer(t @ vec.conj(), vec)
    if np.max(np.abs(resid)) > 1e-9:
        raise ValueError(f"qubit {qubit} is entangled with the register")
    return vec


def bloch_vector(vec: np.ndarray) -> np.ndarray:
    a, b = vec
    return np.array(
        [2 * (np.conj(a) * b).real, 2 * (np.conj(a) * b).imag, abs(a) ** 2 - abs(b) ** 2]
    )


def u_matrices(theta, phi, lam) -> np.ndarray:
    """Vectorised :func:`u_matrix`; output shape ``broadcast(...) + (2, 2)``."""
    theta, phi, lam = np.broadcast_arrays(
        np.asarray(theta, dtype=float), np.asarray(phi, dtype=float), np.asarray(lam, dtype=float)
    )
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    out = np.empty(theta.shape + (2, 2), dtype=complex)
    out[..., 0, 0] = c
    out[..., 0, 1] = -np.exp(1j * lam) * s
    out[..., 1, 0] = np.exp(1j * phi) * s
    out[..., 1, 1] = np.exp(1j * (phi + lam)) * c
    return out


def zero_states(batch_shape, n: int) -> np.ndarray:
    amps = np.zeros(tuple(batch_shape) + (2**n,), dtype=complex)
    amps[..., 0] = 1.0
    return amps
