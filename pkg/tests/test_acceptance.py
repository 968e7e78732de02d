"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is echoed in the terminal summary.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest

from satqfl import access, orbits, qfl
from satqfl.access import _bfs, _adjacency
from satqfl.harness import config_from_dict, run_experiment
from satqfl.harness.experiment import build_timeline, load_fleet
from satqfl.qfl import CircuitSpec, LocalDataset, ModelParams
from satqfl.scheduler import GROUND, check_trace
from satqfl.security import ChannelModel, run_bb84, teleport


def smoothed(values, window=3):
    v = np.asarray(values, dtype=float)
    return np.convolve(v, np.ones(window) / window, mode="valid")


# 1 ------------------------------------------------------------------------


def test_bb84_signatures(acceptance):
    t0 = time.perf_counter()
    n, sessions = 4096, 1000
    sifted, clean_qber, eve_qber, aborts = [], [], [], 0
    for k in range(sessions):
        s = run_bb84(n, ChannelModel("none"), np.random.default_rng([k, 0]))
        sifted.append(s.sifted.size / n)
        clean_qber.append(s.qber)
        e = run_bb84(n, ChannelModel("intercept_resend"), np.random.default_rng([k, 1]))
        eve_qber.append(e.qber)
        aborts += e.qber > 0.10
    elapsed = time.perf_counter() - t0
    ok = (
        all(abs(f - 0.5) <= 0.03 for f in sifted)
        and all(q == 0.0 for q in clean_qber)
        and abs(np.mean(eve_qber) - 0.25) <= 0.03
        and aborts / sessions > 0.999
        and elapsed < 30
    )
    acceptance(
        "1 BB84",
        ok,
        f"sifted in [{min(sifted):.3f}, {max(sifted):.3f}], clean QBER max {max(clean_qber)}, "
        f"attacked QBER mean {np.mean(eve_qber):.4f}, abort {aborts}/{sessions}, {elapsed:.1f}s",
    )
    assert ok


# 2 ------------------------------------------------------------------------


def _angle_gap(a, b):
    return abs((a - b + math.pi) % (2 * math.pi) - math.pi)


def test_teleportation_fidelity(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_f, worst_angle, worst_inv = 0.0, 0.0, 0.0
    for _ in range(200):
        theta, phi = rng.uniform(0.01, math.pi - 0.01), rng.uniform(0, 2 * math.pi)
        for branch in [(0, 0), (0, 1), (1, 0), (1, 1)]:
            r = teleport(theta, phi, rng, outcomes=branch)
            worst_f = max(worst_f, abs(r.fidelity - 1))
            worst_inv = max(worst_inv, abs(r.inverse_check - 1))
            worst_angle = max(worst_angle, abs(r.recovered[0] - theta), _angle_gap(r.recovered[1], phi))
    elapsed = time.perf_counter() - t0
    ok = worst_f <= 1e-9 and worst_inv <= 1e-9 and worst_angle <= 1e-9 and elapsed < 5
    acceptance("2 teleportation", ok, f"max |F-1| {worst_f:.1e}, max angle error {worst_angle:.1e}, {elapsed:.2f}s")
    assert ok


# 3 ------------------------------------------------------------------------


def test_parameter_shift_gradient(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst, dims = 0.0, set()
    h = 1e-4
    for _ in range(50):
        spec = CircuitSpec(4, int(rng.integers(1, 3)), int(rng.integers(2, 9)), float(rng.uniform(1, 3)))
        dims.add(spec.n_params)
        params = ModelParams(rng.uniform(-math.pi, math.pi, spec.n_params))
        batch = LocalDataset(rng.uniform(0, math.pi, (5, 4)), rng.integers(0, spec.class_count, 5))
        g = qfl.gradient(params, batch, spec)
        fd = np.empty_like(g)
        for k in range(spec.n_params):
            e = np.zeros(spec.n_params)
            e[k] = h
            fd[k] = (qfl.loss(params.with_angles(params.angles + e), batch, spec) - qfl.loss(params.with_angles(params.angles - e), batch, spec)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(g - fd))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and max(dims) <= 24 and elapsed < 60
    acceptance("3 gradient", ok, f"max inf-norm error {worst:.2e} over d in {sorted(dims)}, {elapsed:.1f}s")
    assert ok


# 4 ------------------------------------------------------------------------

CONVERGENCE = {
    "topology": "full_visibility",
    "n_satellites": 8,
    "mode": "simultaneous",
    "seed": 0,
    "training": {"rounds": 20, "lr": 0.3, "lr_decay": 0.7, "readout_scale": 3.0},
    "dataset": {"source": "synthetic:separable", "rows": 800},
}


def test_convergence_trend(acceptance):
    t0 = time.perf_counter()
    report = run_experiment(config_from_dict(CONVERGENCE)).report
    acc = report.column("server_test_acc")[-1]
    sm = smoothed(report.column("server_val_loss"))
    rises = np.diff(sm)
    elapsed = time.perf_counter() - t0
    ok = acc >= 0.85 and np.all(rises <= 0) and elapsed < 600
    acceptance("4 convergence", ok, f"final test acc {acc:.3f}, largest smoothed val-loss rise {rises.max():.2e}, {elapsed:.1f}s")
    assert ok


# 5 ------------------------------------------------------------------------


def test_async_equals_simultaneous(acceptance):
    base = {"topology": "full_visibility", "n_satellites": 10, "full_visibility_primaries": 3, "staleness": {"delta_max": math.inf}, "training": {"rounds": 5}, "dataset": {"rows": 400}}
    ok = True
    for seed in (0, 1, 2):
        dicts = {}
        for mode in ("simultaneous", "asynchronous"):
            res = run_experiment(config_from_dict({**base, "mode": mode, "seed": seed}))
            rows = []
            for t in res.traces:
                d = t.to_dict()
                d.pop("mode")
                d["notes"] = [n for n in d["notes"] if "async" not in n]
                rows.append(d)
            dicts[mode] = (rows, res.final_params.angles.tobytes())
        ok &= dicts["simultaneous"] == dicts["asynchronous"]
    acceptance("5 mode equivalence", ok, "traces and final parameters bit-identical for seeds 0, 1, 2")
    assert ok


# 6 ------------------------------------------------------------------------


def test_security_transparency(acceptance):
    layers = ["plaintext", "otp", "aead", "teleport_partial(4)"]
    reports = {s: run_experiment(config_from_dict({"security": s, "training": {"rounds": 5}})).report for s in layers}
    cols = ["server_val_acc", "server_test_acc", "server_val_loss", "device_train_acc", "device_test_acc", "device_val_loss"]
    same = all(np.array_equal(reports[s].column(c), reports["plaintext"].column(c), equal_nan=True) for s in layers for c in cols)
    comm = {s: float(np.sum(reports[s].column("comm_time"))) for s in layers}
    ordered = all(comm["plaintext"] < comm[s] for s in layers[1:])
    ok = same and ordered
    acceptance("6 security transparency", ok, "comm s: " + ", ".join(f"{s}={v:.2f}" for s, v in comm.items()))
    assert ok


# 7 ------------------------------------------------------------------------


def test_scheduler_safety(acceptance):
    t0 = time.perf_counter()
    cfg = config_from_dict({})
    assert cfg.n_satellites == 50 and len(cfg.ground_stations) == 10 and cfg.sample_time == 30 and cfg.duration == 6
    res = run_experiment(cfg)
    elements, _ = load_fleet(cfg)
    tl = build_timeline(cfg, elements)
    h = cfg.routing.h_max
    snaps = tl.snapshots()

    # every transmission sits in its logged window and the pair is linked at that sample
    total, inside = 0, 0
    for tr in res.traces:
        for tx in tr.transmissions:
            total += 1
            start, end = tx["window"]
            k = int(tx["t"] // cfg.sample_time)
            snap = snaps[k]
            a, b = tx["sender"], tx["receiver"]
            if GROUND in (a, b):
                sat = b if a == GROUND else a
                linked = (sat, tx["station"]) in snap.sat_ground_edges
            else:
                limit = 2 * h if tx["kind"] == "handoff" else h
                linked = b in _bfs(_adjacency(snap), a, limit)
            inside += bool(start <= tx["t"] < end and linked)
    violations = [v for tr in res.traces for v in check_trace(tr, cfg.policy)]
    ages = [a for tr in res.traces for a in tr.staleness.values()]
    fresh = sum(a <= cfg.policy.delta_max for a in ages)

    # disjoint primary/secondary cover at every sample
    covers = 0
    every = set(elements)
    for snap in snaps:
        part = access.partition(snap, cfg.routing)
        visible = {s for s, _ in snap.sat_ground_edges}
        covers += bool(
            not (part.primaries & part.secondaries)
            and part.primaries | part.secondaries == every
            and part.primaries == visible
            and all(part.assignment[s] in part.primaries for s in part.assignment)
        )
    elapsed = time.perf_counter() - t0
    ok = total > 0 and inside == total and not violations and fresh == len(ages) and len(snaps) == 721 and covers == 721 and elapsed < 300
    acceptance(
        "7 scheduler safety",
        ok,
        f"{inside}/{total} transmissions in window, {fresh}/{len(ages)} updates fresh, {covers}/{len(snaps)} samples covered, {elapsed:.1f}s",
    )
    assert ok


# 8 ------------------------------------------------------------------------


def test_orbital_sanity(acceptance, sample_tle_text):
    cfg = config_from_dict({})
    elements, _ = load_fleet(cfg)
    t = orbits.seconds_since_j2000(cfg.start_time) + np.arange(0, cfg.horizon_seconds + 1, cfg.sample_time)
    drift = 0.0
    for el in elements.values():
        pos, vel = orbits.propagate_many(el, t)
        E = orbits.specific_energy(pos, vel)
        drift = max(drift, float(np.max(np.abs(E / E[0] - 1))))

    rng = np.random.default_rng(8)
    residual = 0.0
    for e in np.concatenate([rng.uniform(0, 0.99, 200), [0.0, 0.5, 0.9, 0.999]]):
        M = rng.uniform(0, 2 * math.pi, 500)
        E = orbits.solve_kepler(M, float(e))
        residual = max(residual, float(np.max(np.abs(E - e * np.sin(E) - M))))

    recs = orbits.parse_tle(sample_tle_text)
    round_trip = orbits.format_tles(recs) == sample_tle_text and orbits.parse_tle(orbits.format_tles(recs)) == recs
    ok = drift < 1e-9 and residual < 1e-12 and round_trip and len(recs) == 5
    acceptance("8 orbital sanity", ok, f"energy drift {drift:.1e}, Kepler residual {residual:.1e}, TLE round trip {round_trip}")
    assert ok
