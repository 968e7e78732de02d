"""Key establishment and parameter transport.

BB84 runs on the statevector kernels, one batched circuit per session. Keys
feed either a one-time pad over the fixed-point parameter bytes or AES-GCM
with a key derived by HKDF. Teleportation carries two angles per qubit.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import quantumsim as qs
from .qfl import QUANT_BITS, QUANT_LOW, QUANT_SPAN, ModelParams, dequantize, pack_angles, quantize, unpack_angles

Z_BASIS, X_BASIS = 0, 1
MIN_KEY_BITS = 8
AEAD_KEY_BYTES = 32
NONCE_BYTES = 12
TAG_BYTES = 16

SCHEME_TAGS = {"plain": 0, "otp": 1, "aead": 2}
_TAG_SCHEMES = {v: k for k, v in SCHEME_TAGS.items()}
_HEADER = struct.Struct(">BIH")


class SecurityError(Exception):
    pass


class Abort(SecurityError):
    """QBER above threshold: the quantum channel is presumed tapped."""

    def __init__(self, qber: float):
        super().__init__(f"QKD aborted: sample QBER {qber:.3f} above threshold")
        self.qber = qber


class InsufficientKey(SecurityError):
    pass


class AuthFailure(SecurityError):
    pass


class LengthMismatch(SecurityError):
    pass


class WeakKey(SecurityError):
    pass


class KeyReuseError(AssertionError):
    pass


@dataclass
class ChannelModel:
    adversary: str = "none"  # or "intercept_resend"
    rng: np.random.Generator | None = None

    def __post_init__(self):
        if self.adversary not in ("none", "intercept_resend"):
            raise ValueError(f"unknown adversary {self.adversary!r}")


@dataclass
class SiftedKey:
    bits: np.ndarray
    source_qubits: int
    sample_qber: float
    spent: int = 0

    @property
    def available(self) -> int:
        return self.bits.size - self.spent


@dataclass
class QkdSession:
    sender_bits: np.ndarray
    sender_bases: np.ndarray
    receiver_bases: np.ndarray
    receiver_bits: np.ndarray
    sifted: np.ndarray  # indices where bases agree
    sample: np.ndarray  # indices (into sifted) disclosed for the QBER estimate
    qber: float


# ---------------------------------------------------------------------------
# BB84


def generate_random(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random bit string from measuring ``n`` qubits prepared in |+>."""
    amps = qs.apply_1q(qs.zero_states((n,), 1), qs.H_MATRIX, 0, 1)
    bits, _ = qs.measure_batch(amps, 0, 1, rng)
    return bits.astype(np.uint8)


def _select(flags, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(flags, dtype=bool)[:, None, None], a, b)


def prepare(bits, bases) -> np.ndarray:
    bits = np.asarray(bits)
    amps = qs.zero_states((bits.size,), 1)
    eye = np.eye(2, dtype=complex)
    amps = qs.apply_1q(amps, _select(bits, qs.X_MATRIX, eye), 0, 1)
    return qs.apply_1q(amps, _select(bases, qs.H_MATRIX, eye), 0, 1)


def measure_in(amps: np.ndarray, bases, rng: np.random.Generator) -> np.ndarray:
    eye = np.eye(2, dtype=complex)
    rotated = qs.apply_1q(amps, _select(bases, qs.H_MATRIX, eye), 0, 1)
    bits, _ = qs.measure_batch(rotated, 0, 1, rng)
    return bits.astype(np.uint8)


def transmit(amps: np.ndarray, channel: ChannelModel, rng: np.random.Generator) -> np.ndarray:
    """Quantum channel; intercept-resend measures and re-prepares every qubit."""
    if channel.adversary == "none":
        return amps
    eve_rng = channel.rng or rng
    eve_bases = generate_random(amps.shape[0], eve_rng)
    eve_bits = measure_in(amps, eve_bases, eve_rng)
    return prepare(eve_bits, eve_bases)


def sift(sender_bases, receiver_bases) -> np.ndarray:
    return np.nonzero(np.asarray(sender_bases) == np.asarray(receiver_bases))[0]


def run_bb84(
    n: int,
    channel: ChannelModel,
    rng: np.random.Generator,
    sample_fraction: float = 0.25,
    sender_bits=None,
    sender_bases=None,
    receiver_bases=None,
) -> QkdSession:
    """One prepare-and-measure exchange; bit and basis strings may be pinned."""
    a_bits = generate_random(n, rng) if sender_bits is None else np.asarray(sender_bits, dtype=np.uint8)
    a_bases = generate_random(n, rng) if sender_bases is None else np.asarray(sender_bases, dtype=np.uint8)
    b_bases = generate_random(n, rng) if receiver_bases is None else np.asarray(receiver_bases, dtype=np.uint8)
    received = transmit(prepare(a_bits, a_bases), channel, rng)
    b_bits = measure_in(received, b_bases, rng)
    sifted = sift(a_bases, b_bases)
    m = sifted.size
    k = min(m, max(1, int(round(sample_fraction * m)))) if m else 0
    sample = np.sort(rng.choice(m, size=k, replace=False)) if k else np.zeros(0, dtype=int)
    errs = a_bits[sifted[sample]] != b_bits[sifted[sample]]
    qber = float(errs.mean()) if k else 0.0
    return QkdSession(a_bits, a_bases, b_bases, b_bits, sifted, sample, qber)


def qkd_establish(
    n: int,
    channel: ChannelModel,
    sample_fraction: float = 0.25,
    qber_threshold: float = 0.10,
    rng: np.random.Generator | None = None,
) -> tuple[SiftedKey, SiftedKey]:
    if n < 16:
        raise ValueError("BB84 needs at least 16 qubits")
    if not 0 < sample_fraction < 1:
        raise ValueError("sample_fraction must be in (0, 1)")
    rng = rng if rng is not None else (channel.rng or np.random.default_rng())
    s = run_bb84(n, channel, rng, sample_fraction)
    if s.qber > qber_threshold:
        raise Abort(s.qber)
    keep = np.setdiff1d(np.arange(s.sifted.size), s.sample)
    idx = s.sifted[keep]
    if idx.size < MIN_KEY_BITS:
        raise InsufficientKey(f"only {idx.size} sifted bits left after sampling")
    return (
        SiftedKey(s.sender_bits[idx].copy(), n, s.qber),
        SiftedKey(s.receiver_bits[idx].copy(), n, s.qber),
    )


def qubits_for_otp(message_len: int, sample_fraction: float = 0.25, margin: float = 1.25) -> int:
    """Qubit budget that leaves ``8 * message_len`` key bits in expectation, with margin."""
    need = 8 * message_len
    return max(16, math.ceil(margin * need / (0.5 * (1 - sample_fraction))) + 32)


# ---------------------------------------------------------------------------
# keys


class OneTimeKey(bytes):
    """Key bytes that refuse to encrypt twice."""

    used = False


def derive_key(key: SiftedKey, message_len: int, scheme: str = "otp") -> bytes:
    if scheme == "otp":
        need = 8 * message_len
        if key.available < need:
            raise InsufficientKey(f"need {need} key bits, {key.available} left")
        chunk = key.bits[key.spent : key.spent + need]
        key.spent += need
        return OneTimeKey(np.packbits(chunk).tobytes())
    if scheme == "aead":
        material = np.packbits(key.bits).tobytes() + struct.pack(">I", key.bits.size)
        hkdf = HKDF(algorithm=hashes.SHA256(), length=AEAD_KEY_BYTES, salt=None, info=b"satqfl aead v1")
        return hkdf.derive(material)
    raise ValueError(f"unknown scheme {scheme!r}")


def check_key_randomness(key: bytes) -> None:
    if len(key) >= 8 and not any(key):
        raise WeakKey("all-zero key rejected")


# ---------------------------------------------------------------------------
# envelopes


@dataclass
class CipherEnvelope:
    scheme: str
    ciphertext: bytes
    param_count: int
    quantization: int = QUANT_BITS
    nonce: bytes = b""
    tag: bytes = b""

    def header(self) -> bytes:
        return _HEADER.pack(SCHEME_TAGS[self.scheme], self.param_count, self.quantization)

    def to_bytes(self) -> bytes:
        return self.header() + self.nonce + self.ciphertext + self.tag

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CipherEnvelope":
        tag_byte, count, quant = _HEADER.unpack_from(blob)
        scheme = _TAG_SCHEMES[tag_byte]
        body = blob[_HEADER.size :]
        if scheme == "aead":
            return cls(scheme, body[NONCE_BYTES:-TAG_BYTES], count, quant, body[:NONCE_BYTES], body[-TAG_BYTES:])
        return cls(scheme, body, count, quant)

    def __len__(self) -> int:
        return _HEADER.size + len(self.nonce) + len(self.ciphertext) + len(self.tag)


def _angles(params) -> np.ndarray:
    return params.angles if isinstance(params, ModelParams) else np.asarray(params, dtype=float)


def encrypt(params, key: bytes | None, scheme: str, nonce: bytes | None = None) -> CipherEnvelope:
    angles = _angles(params)
    plain = pack_angles(angles)
    if scheme == "plain":
        return CipherEnvelope("plain", plain, angles.size)
    if scheme == "otp":
        if len(key) < len(plain):
            raise LengthMismatch(f"OTP key has {len(key)} bytes, message {len(plain)}")
        if isinstance(key, OneTimeKey):
            if key.used:
                raise KeyReuseError("one-time pad key already used")
            key.used = True
        ct = bytes(a ^ b for a, b in zip(plain, key))
        return CipherEnvelope("otp", ct, angles.size)
    if scheme == "aead":
        if nonce is None or len(nonce) != NONCE_BYTES:
            raise ValueError("AEAD needs a 12-byte nonce")
        env = CipherEnvelope("aead", b"", angles.size, nonce=nonce)
        sealed = AESGCM(key).encrypt(nonce, plain, env.header())
        env.ciphertext, env.tag = sealed[:-TAG_BYTES], sealed[-TAG_BYTES:]
        return env
    raise ValueError(f"unknown scheme {scheme!r}")


def decrypt(env: CipherEnvelope, key: bytes | None) -> np.ndarray:
    """Recover the (quantised) angle vector."""
    if env.scheme == "plain":
        plain = env.ciphertext
    elif env.scheme == "otp":
        if len(key) < len(env.ciphertext):
            raise LengthMismatch(f"OTP key has {len(key)} bytes, message {len(env.ciphertext)}")
        plain = bytes(a ^ b for a, b in zip(env.ciphertext, key))
    elif env.scheme == "aead":
        try:
            plain = AESGCM(key).decrypt(env.nonce, env.ciphertext + env.tag, env.header())
        except InvalidTag:
            raise AuthFailure("AEAD tag verification failed") from None
    else:
        raise ValueError(f"unknown scheme {env.scheme!r}")
    angles = unpack_angles(plain)
    if angles.size != env.param_count:
        raise LengthMismatch(f"envelope declares {env.param_count} params, holds {angles.size}")
    return angles


# ---------------------------------------------------------------------------
# teleportation

SECRET, SENDER, RECEIVER = 0, 1, 2


@dataclass
class TeleportResult:
    classical_bits: tuple[int, int]  # (cr[0] from the secret qubit, cr[1] from the sender half)
    recovered: tuple[float, float]
    fidelity: float
    inverse_check: float  # |<0| U(recovered)^dagger |received>|^2
    received: np.ndarray = field(repr=False, default=None)


def secret_state(theta: float, phi: float) -> np.ndarray:
    return qs.u_matrix(theta, phi, 0.0)[:, 0]


def recover_angles(vec: np.ndarray) -> tuple[float, float]:
    """(theta, phi) with U(theta, phi, 0)|0> equal to ``vec`` up to phase.

    theta lands in [0, pi] and phi in [0, 2*pi); phi is 0 when theta is 0.
    """
    a, b = vec
    theta = 2 * math.atan2(abs(b), abs(a))
    if abs(b) < 1e-15:
        return theta, 0.0
    phi = (np.angle(b) - np.angle(a)) % (2 * math.pi)
    return theta, float(phi)


def teleport(theta: float, phi: float, rng: np.random.Generator | None = None, outcomes=None) -> TeleportResult:
    """Send U(theta, phi, 0)|0> from the secret qubit to the receiver's qubit.

    ``outcomes`` pins the two measurement results ``(cr0, cr1)`` to exercise
    a particular correction branch; otherwise they are sampled from ``rng``.
    """
    state = qs.run(
        qs.new_state(3),
        [
            qs.H(SENDER),
            qs.CNOT(SENDER, RECEIVER),
            qs.U(SECRET, theta, phi, 0.0),
            qs.CNOT(SECRET, SENDER),
            qs.H(SECRET),
        ],
    )
    if outcomes is None:
        cr1, state = qs.measure(state, SENDER, rng)
        cr0, state = qs.measure(state, SECRET, rng)
    else:
        cr0, cr1 = outcomes
        _, state = qs.project(state, SENDER, cr1)
        _, state = qs.project(state, SECRET, cr0)
    if cr1:
        state = qs.apply(state, qs.X(RECEIVER))
    if cr0:
        state = qs.apply(state, qs.Z(RECEIVER))
    received = qs.qubit_state(state, RECEIVER)
    target = secret_state(theta, phi)
    fid = float(abs(np.vdot(target, received)) ** 2)
    rec = recover_angles(received)
    undone = qs.u_matrix(rec[0], rec[1], 0.0).conj().T @ received
    return TeleportResult((int(cr0), int(cr1)), rec, fid, float(abs(undone[0]) ** 2), received)


# Angles are mapped into a window where U(theta, phi, 0)|0> is injective and
# phi stays well conditioned (sin(theta/2) bounded away from 0).
_ENC_LO, _ENC_HI = math.pi / 8, 7 * math.pi / 8


def encode_pair(v1: float, v2: float) -> tuple[float, float]:
    u1 = (float(v1) - QUANT_LOW) / QUANT_SPAN
    u2 = (float(v2) - QUANT_LOW) / QUANT_SPAN
    return _ENC_LO + u1 * (_ENC_HI - _ENC_LO), 2 * math.pi * u2


def decode_pair(theta: float, phi: float) -> tuple[float, float]:
    u1 = (theta - _ENC_LO) / (_ENC_HI - _ENC_LO)
    u2 = (phi / (2 * math.pi)) % 1.0
    return QUANT_LOW + u1 * QUANT_SPAN, QUANT_LOW + u2 * QUANT_SPAN


# ---------------------------------------------------------------------------
# parameter transfer


@dataclass
class TransferConfig:
    scheme: str = "aead"  # envelope scheme for the non-teleported part: otp | aead | plain
    sample_fraction: float = 0.25
    qber_threshold: float = 0.10
    aead_qubits: int = 256
    max_qkd_attempts: int = 3


@dataclass
class Transcript:
    received: np.ndarray  # quantised angles delivered to the receiver
    events: list = field(default_factory=list)
    envelope_bytes: int = 0
    classical_bits: int = 0
    qkd_qubits: int = 0
    teleported_qubits: int = 0

    @property
    def wire_bytes(self) -> int:
        return self.envelope_bytes + math.ceil(self.classical_bits / 8)


def _establish(message_len: int, channel: ChannelModel, cfg: TransferConfig, rng, tr: Transcript):
    for attempt in range(cfg.max_qkd_attempts):
        if cfg.scheme == "otp":
            n = qubits_for_otp(message_len, cfg.sample_fraction) * (attempt + 1)
        else:
            n = cfg.aead_qubits * (attempt + 1)
        tr.qkd_qubits += n
        try:
            sender, receiver = qkd_establish(n, channel, cfg.sample_fraction, cfg.qber_threshold, rng)
        except Abort as exc:
            tr.events.append({"event": "qkd_abort", "qubits": n, "qber": exc.qber})
            raise
        except InsufficientKey:
            tr.events.append({"event": "qkd_short", "qubits": n})
            continue
        if cfg.scheme == "otp" and sender.available < 8 * message_len:
            tr.events.append({"event": "qkd_short", "qubits": n, "bits": int(sender.available)})
            continue
        tr.events.append({"event": "qkd", "qubits": n, "key_bits": int(sender.bits.size), "qber": sender.sample_qber})
        return sender, receiver
    raise InsufficientKey(f"no usable key after {cfg.max_qkd_attempts} QKD sessions")


def transfer_params(
    params,
    mode: int | str = "full",
    channel: ChannelModel | None = None,
    cfg: TransferConfig | None = None,
    rng: np.random.Generator | None = None,
    nonce: bytes | None = None,
) -> Transcript:
    """Send a parameter vector; ``mode`` is ``"full"`` or the integer ``i``
    of ``partial(i)`` (the first ``i`` angles are teleported pairwise).

    Raises :class:`Abort` before anything is released if QKD detects an
    eavesdropper.
    """
    cfg = cfg or TransferConfig()
    channel = channel or ChannelModel()
    rng = rng if rng is not None else (channel.rng or np.random.default_rng())
    angles = _angles(params)
    i = 0 if mode == "full" else int(mode)
    if not 0 <= i <= angles.size:
        raise ValueError(f"partial({i}) exceeds {angles.size} parameters")
    codes = quantize(angles)
    head, tail = codes[:i], codes[i:]
    tr = Transcript(received=np.zeros(0))
    out_tail = np.zeros(0)

    if tail.size:
        plain_len = 2 * tail.size
        if cfg.scheme == "plain":
            skey = rkey = None
        else:
            sender, receiver = _establish(plain_len, channel, cfg, rng, tr)
            skey = derive_key(sender, plain_len, cfg.scheme)
            rkey = derive_key(receiver, plain_len, cfg.scheme)
            check_key_randomness(skey)
        if cfg.scheme == "aead" and nonce is None:
            nonce = rng.bytes(NONCE_BYTES)
        env = encrypt(dequantize(tail), skey, cfg.scheme, nonce)
        wire = env.to_bytes()
        tr.envelope_bytes += len(wire)
        out_tail = decrypt(CipherEnvelope.from_bytes(wire), rkey)
        tr.events.append({"event": "envelope", "scheme": cfg.scheme, "params": int(tail.size), "bytes": len(wire)})

    out_head = []
    values = dequantize(head)
    for k in range(0, head.size, 2):
        pair = values[k : k + 2]
        v1 = pair[0]
        v2 = pair[1] if pair.size > 1 else QUANT_LOW
        enc = encode_pair(v1, v2)
        res = teleport(enc[0], enc[1], rng)
        got = decode_pair(*res.recovered)
        out_head.extend(got[: pair.size])
        tr.teleported_qubits += 1
        tr.classical_bits += 2
        tr.events.append(
            {
                "event": "teleport",
                "values": [float(x) for x in pair],
                "encoded": [enc[0], enc[1]],
                "bits": list(res.classical_bits),
                "fidelity": res.fidelity,
            }
        )
    head_codes = quantize(np.array(out_head)) if out_head else np.zeros(0, dtype=np.uint16)
    tr.received = dequantize(np.concatenate([head_codes, quantize(out_tail)]).astype(np.uint16))
    return tr
