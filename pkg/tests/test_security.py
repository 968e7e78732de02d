from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from satqfl import quantumsim as qs
from satqfl import security as sec
from satqfl.qfl import ModelParams, dequantize, quantize

NONE = sec.ChannelModel("none")
EVE = sec.ChannelModel("intercept_resend")


# -- BB84 -------------------------------------------------------------------


def test_sift_example():
    # Z = 0, X = 1
    s = sec.run_bb84(4, NONE, np.random.default_rng(0), sender_bits=[0, 1, 1, 0], sender_bases=[0, 1, 0, 1], receiver_bases=[0, 0, 0, 1])
    assert list(s.sifted) == [0, 2, 3]
    assert "".join(map(str, s.sender_bits[s.sifted])) == "010"
    assert np.array_equal(s.receiver_bits[s.sifted], s.sender_bits[s.sifted])


def test_prepare_states():
    amps = sec.prepare([0, 1, 0, 1], [0, 0, 1, 1])
    h = 1 / math.sqrt(2)
    assert np.allclose(amps, [[1, 0], [0, 1], [h, h], [h, -h]])


@pytest.mark.parametrize("seed", range(20))
def test_noiseless_keys_agree(seed):
    a, b = sec.qkd_establish(512, NONE, rng=np.random.default_rng(seed))
    assert np.array_equal(a.bits, b.bits)
    assert a.sample_qber == 0.0


def test_noiseless_sift_rate(rng):
    fr = [sec.run_bb84(4096, NONE, rng).sifted.size / 4096 for _ in range(50)]
    assert all(abs(f - 0.5) <= 0.03 for f in fr)


def test_intercept_resend_qber_and_abort(rng):
    qbers = []
    for _ in range(50):
        with pytest.raises(sec.Abort) as exc:
            sec.qkd_establish(4096, EVE, rng=rng)
        qbers.append(exc.value.qber)
    assert abs(np.mean(qbers) - 0.25) <= 0.03


def test_disclosed_bits_not_in_key():
    rng = np.random.default_rng(3)
    s = sec.run_bb84(256, NONE, np.random.default_rng(3))
    a, _ = sec.qkd_establish(256, NONE, rng=rng)
    assert a.bits.size == s.sifted.size - s.sample.size
    assert a.bits.size <= a.source_qubits


def test_establish_preconditions():
    with pytest.raises(ValueError):
        sec.qkd_establish(8, NONE, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        sec.qkd_establish(64, NONE, sample_fraction=1.0, rng=np.random.default_rng(0))


def test_insufficient_key():
    # a single surviving bit cannot feed even one byte
    with pytest.raises(sec.InsufficientKey):
        sec.qkd_establish(16, NONE, sample_fraction=0.9, rng=np.random.default_rng(0))


def test_random_bits_are_fair(rng):
    assert abs(sec.generate_random(20000, rng).mean() - 0.5) < 0.02


# -- keys -------------------------------------------------------------------


def key_of(bits):
    return sec.SiftedKey(np.asarray(bits, dtype=np.uint8), 4 * len(bits), 0.0)


def test_otp_accounting(rng):
    k = key_of(rng.integers(0, 2, 128))
    out = sec.derive_key(k, 16, "otp")
    assert len(out) == 16 and out == np.packbits(k.bits).tobytes()
    assert k.available == 0
    with pytest.raises(sec.InsufficientKey):
        sec.derive_key(k, 1, "otp")


def test_aead_key_deterministic(rng):
    bits = rng.integers(0, 2, 200)
    a = sec.derive_key(key_of(bits), 0, "aead")
    b = sec.derive_key(key_of(bits), 0, "aead")
    c = sec.derive_key(key_of(1 - bits), 0, "aead")
    assert a == b and len(a) == 32 and a != c


def test_aead_key_matches_reference_hkdf(rng):
    from cryptography.hazmat.primitives import hashes
    from cryptography.hazmat.primitives.kdf.hkdf import HKDF

    bits = rng.integers(0, 2, 77).astype(np.uint8)
    material = np.packbits(bits).tobytes() + (77).to_bytes(4, "big")
    ref = HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=b"satqfl aead v1").derive(material)
    assert sec.derive_key(key_of(bits), 0, "aead") == ref


# -- envelopes --------------------------------------------------------------


params_st = st.lists(st.floats(-50, 50), min_size=1, max_size=40).map(np.array)


@settings(max_examples=50)
@given(params_st, st.binary(min_size=80, max_size=80))
def test_otp_round_trip(angles, pad):
    key = pad[: 2 * angles.size]
    env = sec.encrypt(angles, key, "otp")
    assert len(env.ciphertext) == 2 * angles.size
    back = sec.decrypt(sec.CipherEnvelope.from_bytes(env.to_bytes()), key)
    assert np.array_equal(back, dequantize(quantize(angles)))


@settings(max_examples=30)
@given(params_st, st.binary(min_size=32, max_size=32), st.binary(min_size=12, max_size=12))
def test_aead_round_trip(angles, key, nonce):
    env = sec.encrypt(angles, key, "aead", nonce)
    back = sec.decrypt(sec.CipherEnvelope.from_bytes(env.to_bytes()), key)
    assert np.array_equal(back, dequantize(quantize(angles)))


def test_zero_key_otp_is_identity_and_rejected():
    angles = np.array([0.1, -2.0, 3.0])
    env = sec.encrypt(angles, bytes(6), "otp")
    assert env.ciphertext == sec.encrypt(angles, None, "plain").ciphertext
    with pytest.raises(sec.WeakKey):
        sec.check_key_randomness(bytes(16))


def test_aead_tamper_and_wrong_key(rng):
    key, nonce = bytes(range(32)), bytes(12)
    env = sec.encrypt(rng.normal(size=8), key, "aead", nonce)
    blob = bytearray(env.to_bytes())
    for pos in (0 + 7 + 12, len(blob) - 1, 5):  # ciphertext, tag, header
        bad = bytearray(blob)
        bad[pos] ^= 0x01
        with pytest.raises((sec.AuthFailure, sec.LengthMismatch)):
            sec.decrypt(sec.CipherEnvelope.from_bytes(bytes(bad)), key)
    with pytest.raises(sec.AuthFailure):
        sec.decrypt(env, bytes(32))


def test_envelope_layout():
    key, nonce = bytes(range(32)), bytes(range(12))
    env = sec.encrypt(np.zeros(5), key, "aead", nonce)
    blob = env.to_bytes()
    assert blob[0] == 2
    assert int.from_bytes(blob[1:5], "big") == 5
    assert int.from_bytes(blob[5:7], "big") == 16
    assert blob[7:19] == nonce
    assert len(blob) == 7 + 12 + 10 + 16 == len(env)
    assert sec.encrypt(np.zeros(5), bytes(10), "otp").to_bytes()[0] == 1


def test_otp_length_mismatch():
    with pytest.raises(sec.LengthMismatch):
        sec.encrypt(np.zeros(4), bytes(7), "otp")


def test_otp_key_reuse_is_assertion():
    k = key_of(np.random.default_rng(0).integers(0, 2, 64))
    pad = sec.derive_key(k, 4, "otp")
    sec.encrypt(np.zeros(2), pad, "otp")
    with pytest.raises(AssertionError):
        sec.encrypt(np.zeros(2), pad, "otp")


# -- teleportation ----------------------------------------------------------


def test_teleport_basis_states(rng):
    for theta, bit in ((0.0, 0), (math.pi, 1)):
        r = sec.teleport(theta, 0.0, rng)
        p1 = abs(r.received[1]) ** 2
        assert p1 == pytest.approx(float(bit), abs=1e-12)


@pytest.mark.parametrize("branch", [(0, 0), (0, 1), (1, 0), (1, 1)])
def test_teleport_branches_preserve_bloch_vector(branch):
    rng = np.random.default_rng(sum(branch) + 10 * branch[0])
    for _ in range(25):
        theta, phi = rng.uniform(0, math.pi), rng.uniform(0, 2 * math.pi)
        r = sec.teleport(theta, phi, outcomes=branch)
        assert r.classical_bits == branch
        assert abs(r.fidelity - 1) < 1e-9
        assert np.allclose(qs.bloch_vector(r.received), qs.bloch_vector(sec.secret_state(theta, phi)), atol=1e-9)
        assert r.recovered[0] == pytest.approx(theta, abs=1e-9)
        assert abs((r.recovered[1] - phi + math.pi) % (2 * math.pi) - math.pi) < 1e-9
        assert r.inverse_check == pytest.approx(1.0, abs=1e-9)


def test_teleport_branch_probabilities_uniform():
    # an independent statevector route: each branch has Born probability 1/4
    s = qs.run(qs.new_state(3), [qs.H(1), qs.CNOT(1, 2), qs.U(0, 1.0, 0.4), qs.CNOT(0, 1), qs.H(0)])
    for cr0 in (0, 1):
        for cr1 in (0, 1):
            p1, s1 = qs.project(s, 1, cr1)
            p0, _ = qs.project(s1, 0, cr0)
            assert p1 * p0 == pytest.approx(0.25, abs=1e-12)


@given(st.floats(-2 * math.pi, 2 * math.pi - 1e-9), st.floats(-2 * math.pi, 2 * math.pi - 1e-9))
def test_pair_encoding_round_trip(v1, v2):
    enc = sec.encode_pair(v1, v2)
    assert math.pi / 8 <= enc[0] < 7 * math.pi / 8
    back = sec.decode_pair(*sec.recover_angles(sec.secret_state(*enc)))
    assert back[0] == pytest.approx(v1, abs=1e-9)
    assert back[1] == pytest.approx(v2, abs=1e-9)


# -- transfer ---------------------------------------------------------------


@pytest.mark.parametrize("mode", ["full", 0, 1, 2, 5, 8])
@pytest.mark.parametrize("scheme", ["plain", "otp", "aead"])
def test_transfer_returns_quantised_input(mode, scheme, rng):
    angles = rng.uniform(-7, 7, 8)
    tr = sec.transfer_params(ModelParams(angles), mode, NONE, sec.TransferConfig(scheme=scheme), rng)
    assert np.array_equal(tr.received, dequantize(quantize(angles)))


def test_partial_two_packs_one_qubit(rng):
    angles = np.array([0.3, 1.1, 0.7, -0.2])
    tr = sec.transfer_params(angles, 2, NONE, rng=rng)
    assert tr.teleported_qubits == 1 and tr.classical_bits == 2
    tele = [e for e in tr.events if e["event"] == "teleport"]
    assert np.allclose(tele[0]["values"], [0.3, 1.1], atol=1e-3)
    env = [e for e in tr.events if e["event"] == "envelope"]
    assert env[0]["params"] == 2


def test_partial_zero_is_full():
    angles = np.linspace(-1, 1, 6)
    a = sec.transfer_params(angles, 0, NONE, rng=np.random.default_rng(5))
    b = sec.transfer_params(angles, "full", NONE, rng=np.random.default_rng(5))
    assert np.array_equal(a.received, b.received)
    assert a.events == b.events and a.teleported_qubits == 0


def test_transfer_aborts_under_attack(rng):
    with pytest.raises(sec.Abort):
        sec.transfer_params(np.ones(8), "full", EVE, rng=rng)


def test_transfer_rejects_oversized_partial():
    with pytest.raises(ValueError):
        sec.transfer_params(np.ones(3), 4, NONE, rng=np.random.default_rng(0))
