from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from satqfl import qfl
from satqfl import quantumsim as qs
from satqfl.qfl import CircuitSpec, LocalDataset, ModelParams

SPEC = CircuitSpec(4, 2, 2, 2.0)


def reference_expectations(angles, x, spec):
    """Gate-by-gate route through the value API, independent of the batched kernel."""
    n = spec.n_qubits
    s = qs.new_state(n)
    gates = [qs.U(q, x[q], 0, 0) for q in range(n)]
    A = np.asarray(angles).reshape(spec.layers, n, 3)
    ring = [] if n == 1 else [(0, 1)] if n == 2 else [(q, (q + 1) % n) for q in range(n)]
    for ell in range(spec.layers):
        gates += [qs.U(q, *A[ell, q]) for q in range(n)]
        gates += [qs.CNOT(c, t) for c, t in ring]
    s = qs.run(s, gates)
    return np.array([qs.expectation_z(s, q) for q in range(n)])


def dataset(rng, n=12, f=4, classes=2):
    return LocalDataset(rng.uniform(0, math.pi, (n, f)), rng.integers(0, classes, n), owner=1)


def fd_gradient(params, batch, spec, h=1e-4):
    g = np.zeros(params.d)
    for k in range(params.d):
        e = np.zeros(params.d)
        e[k] = h
        g[k] = (qfl.loss(params.with_angles(params.angles + e), batch, spec) - qfl.loss(params.with_angles(params.angles - e), batch, spec)) / (2 * h)
    return g


# -- circuit ----------------------------------------------------------------


@pytest.mark.parametrize("spec", [CircuitSpec(1, 1, 2), CircuitSpec(2, 2, 2), CircuitSpec(3, 1, 3), CircuitSpec(4, 2, 7)])
def test_batched_circuit_matches_gate_route(spec, rng):
    angles = rng.uniform(-3, 3, spec.n_params)
    X = rng.uniform(0, math.pi, (5, spec.n_qubits))
    z = qfl.expectations(angles, X, spec)
    for b in range(5):
        assert np.allclose(z[b], reference_expectations(angles, X[b], spec), atol=1e-12)


def test_symmetric_circuit_is_uniform():
    spec = CircuitSpec(2, 2, 2)
    p = qfl.predict(ModelParams(np.zeros(spec.n_params)), np.zeros(2), spec)
    assert np.allclose(p, [0.5, 0.5])


def test_probabilities_on_simplex(rng):
    spec = CircuitSpec(4, 2, 7, 3.0)
    params = ModelParams(rng.uniform(-3, 3, spec.n_params))
    P = qfl.predict(params, rng.uniform(0, math.pi, (100, 4)), spec)
    assert np.all(P >= 0) and np.allclose(P.sum(axis=1), 1, atol=1e-9)


@pytest.mark.parametrize("theta", [0.0, 0.4, math.pi / 3, 2.0, math.pi])
def test_single_qubit_score_gap(theta):
    spec = CircuitSpec(1, 1, 2, 2.0)
    p = qfl.predict(ModelParams([theta, 0, 0]), [0.0], spec)
    assert math.log(p[0] / p[1]) == pytest.approx(2 * spec.readout_scale * math.cos(theta), abs=1e-9)


def test_shape_errors():
    with pytest.raises(qfl.ShapeError):
        qfl.predict(ModelParams(np.zeros(SPEC.n_params)), np.zeros(3), SPEC)
    with pytest.raises(qfl.ShapeError):
        qfl.predict(ModelParams(np.zeros(5)), np.zeros(4), SPEC)
    with pytest.raises(qfl.ShapeError):
        LocalDataset(np.zeros((3, 4)), np.zeros(2))


def test_readout_reuses_qubits_with_sign():
    R = CircuitSpec(2, 1, 4).readout_matrix()
    assert np.array_equal(R, [[1, 0], [0, 1], [-1, 0], [0, -1]])


# -- loss -------------------------------------------------------------------


def test_loss_extremes():
    assert qfl.cross_entropy(np.eye(3), [0, 1, 2]) < 1e-9
    assert qfl.cross_entropy(np.full((4, 2), 0.5), [0, 1, 1, 0]) == pytest.approx(math.log(2), abs=1e-9)
    assert qfl.cross_entropy(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))


def test_loss_non_negative(rng):
    ds = dataset(rng)
    for _ in range(1000 // 50):
        for a in rng.uniform(-4, 4, (50, SPEC.n_params)):
            assert qfl.loss(ModelParams(a), ds, SPEC) >= 0


# -- gradient ---------------------------------------------------------------


def test_single_qubit_shift_derivative():
    spec = CircuitSpec(1, 1, 2)
    jac = qfl.expectation_jacobian(np.array([math.pi / 3, 0, 0]), np.zeros((1, 1)), spec)
    assert jac[0, 0, 0] == pytest.approx(-math.sin(math.pi / 3), abs=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    spec = CircuitSpec(4, int(rng.integers(1, 3)), int(rng.integers(2, 5)), 2.0)
    params = ModelParams(rng.uniform(-math.pi, math.pi, spec.n_params))
    batch = dataset(rng, n=6, classes=spec.class_count)
    g = qfl.gradient(params, batch, spec)
    assert np.max(np.abs(g - fd_gradient(params, batch, spec))) < 1e-4


def test_empty_parameter_vector():
    spec = CircuitSpec(2, 0, 2)
    g = qfl.gradient(ModelParams(np.zeros(0)), dataset(np.random.default_rng(0), f=2), spec)
    assert g.shape == (0,)


# -- training ---------------------------------------------------------------


def test_zero_learning_rate_keeps_angles(rng):
    p = ModelParams(rng.normal(size=SPEC.n_params), version=3)
    out = qfl.local_train(p, dataset(rng), 2, 0.0, SPEC, np.random.default_rng(0), completed_at=42.0, origin=9)
    assert np.array_equal(out.angles, p.angles)
    assert out.version == 4 and out.produced_at == 42.0 and out.origin == 9


def test_one_step_descends_on_single_qubit_model():
    spec = CircuitSpec(1, 1, 2)
    ds = LocalDataset(np.zeros((4, 1)), np.zeros(4, dtype=int))
    p = ModelParams([1.2, 0.0, 0.0])
    out = qfl.local_train(p, ds, 1, 0.1, spec, np.random.default_rng(0), batch_size=4)
    assert qfl.loss(out, ds, spec) < qfl.loss(p, ds, spec)


def test_training_is_deterministic(rng):
    p, ds = ModelParams(rng.normal(size=SPEC.n_params)), dataset(rng, n=30)
    a = qfl.local_train(p, ds, 2, 0.2, SPEC, np.random.default_rng(5))
    b = qfl.local_train(p, ds, 2, 0.2, SPEC, np.random.default_rng(5))
    assert a.angles.tobytes() == b.angles.tobytes()


def test_negative_learning_rate_rejected(rng):
    with pytest.raises(ValueError):
        qfl.local_train(ModelParams(np.zeros(SPEC.n_params)), dataset(rng), 1, -0.1, SPEC, rng)


# -- aggregation ------------------------------------------------------------


def mp(v, version=0, origin=None):
    return ModelParams(np.asarray(v, dtype=float), version=version, origin=origin)


def test_fed_avg_examples():
    assert np.allclose(qfl.fed_avg([(mp([1, 2]), 1), (mp([3, 4]), 1)]).angles, [2, 3])
    assert np.allclose(qfl.fed_avg([(mp([0, 0]), 2), (mp([3, 3]), 1)]).angles, [1, 1])
    single = mp([0.5, -1.5], version=4)
    out = qfl.fed_avg([(single, 3.0)])
    assert np.array_equal(out.angles, single.angles) and out.version == 5


def test_fed_avg_errors():
    with pytest.raises(qfl.EmptyAggregation):
        qfl.fed_avg([])
    with pytest.raises(qfl.EmptyAggregation):
        qfl.fed_avg([(mp([1.0]), 0.0)])


vecs = st.lists(st.lists(st.floats(-10, 10), min_size=3, max_size=3), min_size=1, max_size=6)


@settings(max_examples=100)
@given(vecs, st.data())
def test_fed_avg_properties(vs, data):
    ws = data.draw(st.lists(st.floats(0.01, 10), min_size=len(vs), max_size=len(vs)))
    ups = [(mp(v, version=i, origin=i), w) for i, (v, w) in enumerate(zip(vs, ws))]
    out = qfl.fed_avg(ups)
    perm = data.draw(st.permutations(ups))
    assert out.angles.tobytes() == qfl.fed_avg(perm).angles.tobytes()
    arr = np.array(vs)
    assert np.all(out.angles >= arr.min(axis=0) - 1e-9) and np.all(out.angles <= arr.max(axis=0) + 1e-9)
    assert out.version == len(vs)
    same = qfl.fed_avg([(mp(vs[0]), w) for w in ws])
    assert np.array_equal(same.angles, mp(vs[0]).angles)


# -- codec ------------------------------------------------------------------


@given(st.lists(st.floats(-100, 100), max_size=30))
def test_quantisation_round_trip(vals):
    a = np.array(vals, dtype=float)
    q = qfl.dequantize(qfl.quantize(a))
    assert np.array_equal(qfl.unpack_angles(qfl.pack_angles(q)), q)
    assert np.array_equal(qfl.dequantize(qfl.quantize(q)), q)
    err = (qfl.wrap_angles(a) - q + 2 * math.pi) % (4 * math.pi) - 2 * math.pi
    assert np.all(np.abs(err) <= qfl.QUANT_STEP / 2 + 1e-9)


def test_quantisation_keeps_predictions_periodic(rng):
    spec = CircuitSpec(2, 1, 2)
    a = rng.uniform(-12, 12, spec.n_params)
    x = rng.uniform(0, math.pi, (4, 2))
    assert np.allclose(qfl.predict(ModelParams(a), x, spec), qfl.predict(ModelParams(qfl.wrap_angles(a)), x, spec), atol=1e-12)


def test_pack_is_little_endian():
    blob = qfl.pack_angles(np.array([-2 * math.pi + qfl.QUANT_STEP]))
    assert blob == b"\x01\x00"


def test_checkpoint_round_trip(rng):
    p = qfl.quantize_params(ModelParams(rng.normal(size=SPEC.n_params)))
    back, spec = qfl.load_checkpoint(qfl.dump_checkpoint(p, SPEC))
    assert np.array_equal(back.angles, p.angles)
    assert (spec.n_qubits, spec.layers, spec.class_count) == (4, 2, 2)
    with pytest.raises(ValueError):
        qfl.load_checkpoint(b"XXXX" + bytes(16))


def test_model_params_are_immutable_and_finite():
    p = mp([1.0, 2.0])
    with pytest.raises(ValueError):
        p.angles[0] = 5
    with pytest.raises(ValueError):
        mp([1.0, float("nan")])
