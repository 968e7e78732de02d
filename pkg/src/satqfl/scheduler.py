"""Hierarchical training rounds aligned with contact windows.

Time inside the scheduler is float seconds since the scenario start.
A round starting at ``t0`` runs:

1. ground -> primary broadcast of the global model (primaries are ground
   visible at ``t0`` by definition);
2. the mode-specific secondary pass inside each primary's cluster;
3. further training on the primary;
4. primary -> ground upload and ground aggregation.

Every transmission starts inside a contact window of its sender/receiver
pair and is logged with that window.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import qfl
from .access import ContactWindow, Partition, Timeline
from .qfl import CircuitSpec, LocalDataset, ModelParams
from .security import Abort, ChannelModel, TransferConfig, transfer_params

GROUND = "ground"


class NoParticipants(RuntimeError):
    pass


class Mode(str, Enum):
    SEQUENTIAL = "sequential"
    SIMULTANEOUS = "simultaneous"
    ASYNCHRONOUS = "asynchronous"


@dataclass(frozen=True)
class StalenessPolicy:
    delta_max: float = 720.0
    p_min_floor: float = 0.1
    carry_over: bool = False

    def __post_init__(self):
        if not self.delta_max > 0:
            raise ValueError("delta_max must be positive")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 1
    lr: float = 0.2
    batch_size: int = 16
    seconds_per_sample: float = 0.5  # onboard compute per example per epoch
    lr_decay: float = 1.0  # learning rate multiplier applied once per round


@dataclass(frozen=True)
class LinkConfig:
    link_rate_bps: float = 1e4
    per_hop_latency: float = 0.02
    qkd_seconds_per_qubit: float = 1e-4
    teleport_seconds_per_qubit: float = 0.01


# ---------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class Slot:
    start: float
    end: float
    wid: str


class WindowBook:
    """Contact windows per node pair in simulation seconds."""

    def __init__(self, windows, origin=None):
        self._by_pair: dict = {}
        for w in windows:
            if isinstance(w, ContactWindow):
                s = (w.t_start - origin).total_seconds()
                e = (w.t_end - origin).total_seconds()
                a, b = w.a, w.b
            else:
                a, b, s, e = w
            key = self._key(a, b)
            self._by_pair.setdefault(key, []).append(Slot(s, e, f"{key[0]}~{key[1]}@{s:g}"))
        for slots in self._by_pair.values():
            slots.sort(key=lambda x: x.start)
        self._ends = {k: [x.end for x in v] for k, v in self._by_pair.items()}

    @staticmethod
    def _key(a, b):
        if isinstance(a, str) or isinstance(b, str):
            return (a, b) if not isinstance(a, str) else (b, a)
        return (min(a, b), max(a, b))

    def next_slot(self, a, b, t: float, horizon: float):
        """Earliest (t_tx, slot) with t_tx >= t inside a window and t_tx < horizon."""
        key = self._key(a, b)
        slots = self._by_pair.get(key)
        if not slots:
            return None
        k = bisect.bisect_right(self._ends[key], t)
        if k == len(slots):
            return None
        slot = slots[k]
        t_tx = max(t, slot.start)
        if t_tx >= horizon:
            return None
        return t_tx, slot

    def pairs(self):
        return self._by_pair.keys()

    def slots(self, a, b) -> list[Slot]:
        return list(self._by_pair.get(self._key(a, b), []))


@dataclass
class Network:
    """Everything the round driver needs to know about connectivity."""

    ground: WindowBook  # satellite <-> station
    cluster: WindowBook  # satellite <-> satellite within h_max hops
    chain: WindowBook  # satellite <-> satellite for sequential hand-offs
    stations: list
    horizon: float
    hops: object = None  # callable (a, b, t) -> hop count

    def hop_count(self, a, b, t: float) -> int:
        if self.hops is None:
            return 1
        h = self.hops(a, b, t)
        return int(h) if math.isfinite(h) else 1

    @classmethod
    def from_timeline(cls, tl: Timeline) -> "Network":
        origin = tl.start
        h = tl.cfg.h_max
        times = tl.times

        def hops(a, b, t):
            if a == b:
                return 0
            k = min(int(t // tl.sample_time + 1e-9), len(times) - 1)
            i, j = tl._index[a], tl._index[b]
            return tl.hops[k, i, j]

        return cls(
            ground=WindowBook(tl.ground_windows(), origin),
            cluster=WindowBook(tl.route_windows(h), origin),
            chain=WindowBook(tl.route_windows(2 * h), origin),
            stations=list(tl.station_names),
            horizon=(tl.times[-1] - origin).total_seconds() + tl.sample_time,
            hops=hops,
        )

    @classmethod
    def full_visibility(cls, satellites, stations=("GS",), horizon: float = 1e9) -> "Network":
        sats = sorted(satellites)
        sat_pairs = [(a, b, 0.0, horizon) for i, a in enumerate(sats) for b in sats[i + 1 :]]
        ground = [(s, g, 0.0, horizon) for s in sats for g in stations]
        return cls(WindowBook(ground), WindowBook(sat_pairs), WindowBook(sat_pairs), list(stations), horizon)


# ---------------------------------------------------------------------------
# transport


@dataclass
class Delivery:
    params: ModelParams
    bytes: int
    duration: float
    qkd_qubits: int = 0
    teleported_qubits: int = 0


@dataclass
class Transport:
    """Moves parameter vectors; every path applies the same 16-bit quantisation."""

    security: str = "plaintext"  # plaintext | otp | aead | teleport_partial(i)
    link: LinkConfig = field(default_factory=LinkConfig)
    adversary: str = "none"
    teleport_count: int = 0

    @classmethod
    def parse(cls, security: str, link: LinkConfig | None = None, adversary: str = "none") -> "Transport":
        link = link or LinkConfig()
        if security.startswith("teleport_partial"):
            inner = security[len("teleport_partial") :].strip("()") or "2"
            return cls("teleport_partial", link, adversary, int(inner))
        if security not in ("plaintext", "otp", "aead"):
            raise ValueError(f"unknown security layer {security!r}")
        return cls(security, link, adversary)

    @property
    def label(self) -> str:
        if self.security == "teleport_partial":
            return f"teleport_partial({self.teleport_count})"
        return self.security

    def send(self, params: ModelParams, hops: int, rng: np.random.Generator) -> Delivery:
        scheme = {"plaintext": "plain", "otp": "otp", "aead": "aead", "teleport_partial": "aead"}[self.security]
        mode = min(self.teleport_count, params.d) if self.security == "teleport_partial" else "full"
        tr = transfer_params(params.angles, mode, ChannelModel(self.adversary), TransferConfig(scheme=scheme), rng)
        link = self.link
        duration = (
            tr.wire_bytes * 8 / link.link_rate_bps
            + hops * link.per_hop_latency
            + tr.qkd_qubits * link.qkd_seconds_per_qubit
            + tr.teleported_qubits * link.teleport_seconds_per_qubit
        )
        return Delivery(params.with_angles(tr.received), tr.wire_bytes, duration, tr.qkd_qubits, tr.teleported_qubits)


# ---------------------------------------------------------------------------
# traces


@dataclass
class RoundTrace:
    round: int
    mode: str
    t_start: float
    clusters: list = field(default_factory=list)
    participants: list = field(default_factory=list)
    staleness: dict = field(default_factory=dict)
    rejected: list = field(default_factory=list)
    transmissions: list = field(default_factory=list)
    communication_time: float = 0.0
    global_version: int = 0
    global_angles: list = field(default_factory=list)
    server: dict = field(default_factory=dict)
    devices: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["staleness"] = {str(k): v for k, v in sorted(self.staleness.items(), key=lambda kv: str(kv[0]))}
        return d


def check_trace(trace: RoundTrace, policy: StalenessPolicy) -> list[str]:
    """Contract violations in a trace (empty when it is sound)."""
    problems = []
    for tx in trace.transmissions:
        start, end = tx["window"]
        if not start <= tx["t"] < end:
            problems.append(f"transmission {tx['sender']}->{tx['receiver']} at {tx['t']} outside [{start}, {end})")
    for sat, age in trace.staleness.items():
        if age > policy.delta_max:
            problems.append(f"update from {sat} accepted with staleness {age} > {policy.delta_max}")
    return problems


def participation_monitor(traces, satellites=None, p_min_floor: float = 0.1) -> tuple[dict, list]:
    """Fraction of rounds each satellite contributed to; plus the ones below the floor."""
    traces = list(traces)
    if not traces:
        raise ValueError("participation needs at least one round")
    seen = set(satellites or ())
    counts: dict = {}
    for tr in traces:
        for s in tr.participants:
            counts[s] = counts.get(s, 0) + 1
            seen.add(s)
    freq = {s: counts.get(s, 0) / len(traces) for s in sorted(seen, key=str)}
    flagged = [s for s, f in freq.items() if f < p_min_floor]
    return freq, flagged


# ---------------------------------------------------------------------------
# round driver


@dataclass
class _Pending:
    params: ModelParams
    weight: float
    arrival: float
    sender: object
    receiver: object


@dataclass
class RoundDriver:
    network: Network
    datasets: dict
    spec: CircuitSpec
    training: TrainingConfig = field(default_factory=TrainingConfig)
    transport: Transport = field(default_factory=Transport)
    policy: StalenessPolicy = field(default_factory=StalenessPolicy)
    seed: int = 0
    round_duration: float = 360.0
    global_every_n_rounds: int = 1
    server_val: LocalDataset | None = None
    server_test: LocalDataset | None = None

    def __post_init__(self):
        self._pending: list[_Pending] = []
        self._held: dict = {}
        self._trace: RoundTrace | None = None
        self._round = 0
        self._tx_count = 0
        self._device_models: dict = {}

    # -- primitives -------------------------------------------------------

    def train(self, sat, params: ModelParams, start: float) -> ModelParams:
        ds = self.datasets[sat]
        rng = np.random.default_rng([self.seed, self._round, _int_id(sat), 1])
        done = start + self.training.seconds_per_sample * len(ds) * self.training.epochs
        out = qfl.local_train(
            params, ds, self.training.epochs, self.training.lr * self.training.lr_decay**self._round, self.spec, rng,
            batch_size=self.training.batch_size, completed_at=done, origin=sat,
        )
        self._device_models[sat] = out
        return out

    def transmit(self, params, sender, receiver, t: float, book: WindowBook, horizon: float, kind: str):
        """Send at the first window opening at or after ``t``; None if none before ``horizon``."""
        if receiver == GROUND:
            best = None
            for g in sorted(self.network.stations):
                hit = book.next_slot(sender, g, t, horizon)
                if hit and (best is None or hit[0] < best[0][0]):
                    best = (hit, g)
            if best is None:
                return None
            (t_tx, slot), station = best
            hops = 1
        elif sender == GROUND:
            best = None
            for g in sorted(self.network.stations):
                hit = book.next_slot(receiver, g, t, horizon)
                if hit and (best is None or hit[0] < best[0][0]):
                    best = (hit, g)
            if best is None:
                return None
            (t_tx, slot), station = best
            hops = 1
        else:
            hit = book.next_slot(sender, receiver, t, horizon)
            if hit is None:
                return None
            t_tx, slot = hit
            station = None
            hops = max(1, self.network.hop_count(sender, receiver, t_tx))
        rng = np.random.default_rng([self.seed, self._round, self._tx_count, 2])
        self._tx_count += 1
        delivery = self.transport.send(params, hops, rng)
        rec = {
            "kind": kind,
            "sender": sender,
            "receiver": receiver,
            "t": t_tx,
            "arrival": t_tx + delivery.duration,
            "bytes": delivery.bytes,
            "hops": hops,
            "duration": delivery.duration,
            "window": [slot.start, slot.end],
            "window_id": slot.wid,
        }
        if station is not None:
            rec["station"] = station
        if delivery.qkd_qubits:
            rec["qkd_qubits"] = delivery.qkd_qubits
        if delivery.teleported_qubits:
            rec["teleported_qubits"] = delivery.teleported_qubits
        self._trace.transmissions.append(rec)
        self._trace.communication_time += delivery.duration
        return rec, delivery.params

    def _send_or_log(self, params, sender, receiver, t, book, horizon, kind, reason="no_access"):
        try:
            hit = self.transmit(params, sender, receiver, t, book, horizon, kind)
        except Abort as exc:
            self._reject(sender, receiver, "qkd_abort", qber=exc.qber)
            return None
        if hit is None:
            self._reject(sender if sender != GROUND else receiver, receiver, reason)
        return hit

    def _reject(self, sat, primary, reason, **extra):
        self._trace.rejected.append({"satellite": sat, "receiver": primary, "reason": reason, **extra})

    def _weight(self, sat) -> float:
        return float(len(self.datasets[sat]))

    # -- secondary passes -------------------------------------------------

    def sequential_pass(self, primary, secondaries, start_params: ModelParams, t0: float):
        """Chain the model through ``secondaries`` in order, ending at ``primary``.

        Returns ``(model, ready_time, contributors)``.
        """
        horizon = self.network.horizon
        theta, t, holder, contributors = start_params, t0, primary, []
        for s in secondaries:
            book = self.network.cluster if holder == primary else self.network.chain
            hit = self._send_or_log(theta, holder, s, t, book, horizon, "handoff" if holder != primary else "downlink")
            if hit is None:
                continue
            rec, received = hit
            theta = self.train(s, received, rec["arrival"])
            t, holder = theta.produced_at, s
            contributors.append(s)
        if holder == primary:
            return start_params, t0, []
        hit = self._send_or_log(theta, holder, primary, t, self.network.cluster, horizon, "uplink")
        if hit is None:
            return start_params, t0, []
        rec, received = hit
        self._trace.staleness[holder] = max(0.0, rec["arrival"] - received.produced_at)
        return received, rec["arrival"], contributors

    def simultaneous_pass(self, primary, secondaries, start_params: ModelParams, t0: float):
        horizon = self.network.horizon
        got = []
        for s in sorted(secondaries, key=_sort_key):
            hit = self._send_or_log(start_params, primary, s, t0, self.network.cluster, horizon, "downlink")
            if hit is None:
                continue
            rec, received = hit
            theta = self.train(s, received, rec["arrival"])
            hit = self._send_or_log(theta, s, primary, theta.produced_at, self.network.cluster, horizon, "uplink")
            if hit is None:
                continue
            rec, received = hit
            got.append(_Pending(received, self._weight(s), rec["arrival"], s, primary))
        if not got:
            return start_params, t0, []
        t_agg = max(g.arrival for g in got)
        accepted = self._admit(got, primary, t_agg)
        if not accepted:
            return start_params, t_agg, []
        model = qfl.fed_avg([(g.params, g.weight) for g in accepted], origin=primary)
        return model, t_agg, [g.sender for g in accepted]

    def _admit(self, items, receiver, t_agg: float) -> list:
        # the staleness bound holds in every mode, not only the asynchronous one
        accepted = []
        for g in items:
            age = t_agg - g.params.produced_at
            if age > self.policy.delta_max:
                self._reject(g.sender, receiver, "stale", staleness=age)
                continue
            accepted.append(g)
            self._trace.staleness[g.sender] = max(0.0, age)
        return accepted

    def async_pass(self, primary, secondaries, start_params: ModelParams, t0: float, deadline: float | None = None):
        """Collect updates that reach ``primary`` before the round deadline.

        Staleness is judged at the aggregation instant: the last arrival when
        every secondary delivered, otherwise the deadline.
        """
        deadline = t0 + self.round_duration if deadline is None else deadline
        got, missing = [], False
        for s in sorted(secondaries, key=_sort_key):
            hit = self._send_or_log(start_params, primary, s, t0, self.network.cluster, deadline, "downlink")
            if hit is None:
                missing = True
                continue
            rec, received = hit
            theta = self.train(s, received, rec["arrival"])
            hit = self._send_or_log(theta, s, primary, theta.produced_at, self.network.cluster, deadline, "uplink")
            if hit is None:
                missing = True
                continue
            rec, received = hit
            item = _Pending(received, self._weight(s), rec["arrival"], s, primary)
            if rec["arrival"] > deadline:
                missing = True
                self._reject(s, primary, "late", arrival=rec["arrival"])
                if self.policy.carry_over:
                    self._pending.append(item)
                continue
            got.append(item)
        carried = [p for p in self._pending if p.receiver == primary and p not in got]
        self._pending = [p for p in self._pending if p.receiver != primary]
        t_agg = deadline if missing or not got else max(g.arrival for g in got)
        accepted = self._admit(carried + got, primary, t_agg)
        if not accepted:
            return start_params, t0 if not got else t_agg, []
        model = qfl.fed_avg([(g.params, g.weight) for g in accepted], origin=primary)
        return model, t_agg, [g.sender for g in accepted]

    def queue_update(self, params: ModelParams, sender, receiver, arrival: float) -> None:
        """Hand the next async pass an update carried over from earlier."""
        self._pending.append(_Pending(params, self._weight(sender), arrival, sender, receiver))

    # -- full round -------------------------------------------------------

    def run_round(self, mode: Mode, part: Partition, participants, t0: float, global_params: ModelParams, round_index: int) -> tuple[RoundTrace, ModelParams]:
        mode = Mode(mode)
        primaries = sorted(p for p in part.primaries if p in self.datasets)
        if not primaries:
            raise NoParticipants(f"round {round_index}: no ground-visible satellite")
        self._round = round_index
        self._tx_count = 0
        self._device_models = {}
        self._trace = trace = RoundTrace(round_index, mode.value, t0)
        horizon = self.network.horizon
        upload = (round_index + 1) % self.global_every_n_rounds == 0
        uploads = []
        contributors_all = []
        for p in primaries:
            members = [s for s in part.cluster(p) if s in participants and s in self.datasets]
            entry = {"primary": p, "stations": list(part.stations.get(p, ())), "secondaries": members}
            trace.clusters.append(entry)
            if p in self._held:
                start, t_start = self._held.pop(p), t0
            else:
                hit = self._send_or_log(global_params, GROUND, p, t0, self.network.ground, horizon, "broadcast")
                if hit is None:
                    entry["skipped"] = "no_ground_access"
                    continue
                rec, start = hit
                t_start = rec["arrival"]
            if mode is Mode.SEQUENTIAL:
                model, ready, contrib = self.sequential_pass(p, members, start, t_start)
            elif mode is Mode.SIMULTANEOUS:
                model, ready, contrib = self.simultaneous_pass(p, members, start, t_start)
            else:
                model, ready, contrib = self.async_pass(p, members, start, t_start, deadline=t0 + self.round_duration)
            theta_p = self.train(p, model, max(ready, t_start))
            entry["accepted"] = contrib
            weight = self._weight(p) + sum(self._weight(s) for s in contrib)
            if not upload:
                self._held[p] = theta_p
                contributors_all += [p] + contrib
                continue
            hit = self._send_or_log(theta_p, p, GROUND, theta_p.produced_at, self.network.ground, horizon, "upload", "no_ground_access")
            if hit is None:
                continue
            rec, received = hit
            uploads.append((_Pending(received, weight, rec["arrival"], p, GROUND), contrib))
        if uploads:
            t_global = max(u.arrival for u, _ in uploads)
            admitted = {g.sender for g in self._admit([u for u, _ in uploads], GROUND, t_global)}
            uploads = [(u, c) for u, c in uploads if u.sender in admitted]
            for u, c in uploads:
                contributors_all += [u.sender] + c
        if uploads:
            new = qfl.fed_avg([(u.params, u.weight) for u, _ in uploads], origin=GROUND)
            new = new.with_angles(new.angles, version=global_params.version + 1)
        else:
            trace.notes.append("no primary model reached the ground; global model carried over")
            new = global_params.with_angles(global_params.angles, version=global_params.version + 1, origin=GROUND)
        trace.participants = sorted(set(contributors_all), key=_sort_key)
        trace.global_version = new.version
        trace.global_angles = [float(a) for a in new.angles]
        self._evaluate(trace, new)
        return trace, new

    def _evaluate(self, trace: RoundTrace, model: ModelParams) -> None:
        spec = self.spec
        if self.server_val is not None and len(self.server_val):
            trace.server["val_acc"] = qfl.accuracy(model, self.server_val, spec)
            trace.server["val_loss"] = qfl.loss(model, self.server_val, spec)
        if self.server_test is not None and len(self.server_test):
            trace.server["test_acc"] = qfl.accuracy(model, self.server_test, spec)
        if not self._device_models:
            return
        train_acc, test_acc, val_loss = [], [], []
        for sat in sorted(self._device_models, key=_sort_key):
            m = self._device_models[sat]
            train_acc.append(qfl.accuracy(m, self.datasets[sat], spec))
            if self.server_test is not None and len(self.server_test):
                test_acc.append(qfl.accuracy(m, self.server_test, spec))
            if self.server_val is not None and len(self.server_val):
                val_loss.append(qfl.loss(m, self.server_val, spec))
        trace.devices["train_acc"] = float(np.mean(train_acc))
        if test_acc:
            trace.devices["test_acc"] = float(np.mean(test_acc))
        if val_loss:
            trace.devices["val_loss"] = float(np.mean(val_loss))
        trace.devices["count"] = len(self._device_models)


def _int_id(sat) -> int:
    if isinstance(sat, (int, np.integer)):
        return int(sat)
    return int.from_bytes(str(sat).encode()[:8], "big")


def _sort_key(s):
    return (0, s, "") if isinstance(s, (int, np.integer)) else (1, 0, str(s))
