"""Time-varying connectivity: line-of-sight edges, primary/secondary
partition, participation and contact windows."""
from __future__ import annotations

import csv
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np
from scipy.sparse.csgraph import shortest_path

from . import orbits
from .orbits import EARTH_RADIUS, EciState


@dataclass(frozen=True)
class RoutingConfig:
    h_max: int = 3
    l_max: float = 0.1  # seconds
    min_elevation: float = 0.0  # degrees
    isl_altitude_margin: float = 80.0  # km
    per_hop_latency: float = 0.02  # seconds

    def __post_init__(self):
        if self.h_max < 1:
            raise ValueError("h_max must be >= 1")
        if self.l_max <= 0:
            raise ValueError("l_max must be > 0")

    @property
    def blocking_radius(self) -> float:
        return EARTH_RADIUS + self.isl_altitude_margin


@dataclass(frozen=True)
class AccessSnapshot:
    time: datetime
    sat_ground_edges: frozenset  # of (satellite id, station name)
    isl_edges: frozenset  # of (low id, high id)
    satellites: tuple = ()


@dataclass(frozen=True)
class Partition:
    primaries: frozenset
    secondaries: frozenset
    assignment: dict  # secondary -> primary
    hops: dict = field(default_factory=dict)  # secondary -> ISL hops to its primary
    stations: dict = field(default_factory=dict)  # primary -> tuple of station names

    def cluster(self, primary) -> list:
        """Secondaries assigned to ``primary`` ordered by (hops, id)."""
        members = [s for s, p in self.assignment.items() if p == primary]
        return sorted(members, key=lambda s: (self.hops[s], s))

    @property
    def unassigned(self) -> frozenset:
        return self.secondaries - set(self.assignment)


@dataclass(frozen=True, order=True)
class ContactWindow:
    a: object
    b: object
    t_start: datetime
    t_end: datetime

    def contains(self, t: datetime) -> bool:
        return self.t_start <= t < self.t_end


# ---------------------------------------------------------------------------
# geometry kernels (broadcast over leading axes)


def _sin_elevation(sat, gs):
    diff = sat - gs
    zenith = gs / np.linalg.norm(gs, axis=-1, keepdims=True)
    return np.sum(diff * zenith, axis=-1) / np.linalg.norm(diff, axis=-1)


def _segment_clear(p1, p2, radius):
    # symmetric in p1/p2 by construction
    d = p2 - p1
    length = np.linalg.norm(d, axis=-1)
    # a degenerate segment is just its endpoint
    foot_inside = (np.sum(p1 * -d, axis=-1) >= 0) & (np.sum(p2 * d, axis=-1) >= 0) & (length > 0)
    chord = np.linalg.norm(np.cross(p1, p2), axis=-1) / np.maximum(length, 1e-300)
    ends = np.minimum(np.linalg.norm(p1, axis=-1), np.linalg.norm(p2, axis=-1))
    return np.where(foot_inside, chord, ends) > radius


def los_sat_ground(sat: EciState, gs: EciState, min_elevation: float) -> bool:
    return bool(_sin_elevation(sat.position, gs.position) >= math.sin(math.radians(min_elevation)))


def los_sat_sat(p1: EciState, p2: EciState, blocking_radius: float) -> bool:
    return bool(_segment_clear(np.asarray(p1.position), np.asarray(p2.position), blocking_radius))


def _edges_from_arrays(sat_ids, gs_ids, sat_pos, gs_pos, cfg: RoutingConfig):
    """sat_pos (S, 3), gs_pos (G, 3) -> (ground edge set, ISL edge set)."""
    ground = set()
    if len(gs_ids) and len(sat_ids):
        vis = _sin_elevation(sat_pos[:, None, :], gs_pos[None, :, :]) >= math.sin(math.radians(cfg.min_elevation))
        for i, j in zip(*np.nonzero(vis)):
            ground.add((sat_ids[i], gs_ids[j]))
    isl = set()
    if len(sat_ids) > 1:
        clear = _segment_clear(sat_pos[:, None, :], sat_pos[None, :, :], cfg.blocking_radius)
        for i, j in zip(*np.nonzero(np.triu(clear, 1))):
            a, b = sat_ids[i], sat_ids[j]
            isl.add((min(a, b), max(a, b)))
    return frozenset(ground), frozenset(isl)


def snapshot(sat_states: dict, gs_states: dict, cfg: RoutingConfig) -> AccessSnapshot:
    times = {s.time for s in sat_states.values()} | {g.time for g in gs_states.values()}
    if len(times) > 1:
        raise ValueError("all states must share one timestamp")
    sat_ids = sorted(sat_states)
    gs_ids = sorted(gs_states)
    sat_pos = np.array([sat_states[k].position for k in sat_ids], dtype=float).reshape(-1, 3)
    gs_pos = np.array([gs_states[k].position for k in gs_ids], dtype=float).reshape(-1, 3)
    ground, isl = _edges_from_arrays(sat_ids, gs_ids, sat_pos, gs_pos, cfg)
    t = times.pop() if times else None
    return AccessSnapshot(t, ground, isl, tuple(sat_ids))


# ---------------------------------------------------------------------------
# partition and participation


def _adjacency(snap: AccessSnapshot) -> dict:
    adj = defaultdict(list)
    for a, b in snap.isl_edges:
        adj[a].append(b)
        adj[b].append(a)
    return adj


def _bfs(adj: dict, src, limit: int) -> dict:
    dist = {src: 0}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        if dist[u] == limit:
            continue
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def _all_satellites(snap: AccessSnapshot) -> set:
    sats = set(snap.satellites)
    sats.update(s for s, _ in snap.sat_ground_edges)
    for a, b in snap.isl_edges:
        sats.update((a, b))
    return sats


def partition(snap: AccessSnapshot, cfg: RoutingConfig) -> Partition:
    sats = _all_satellites(snap)
    stations = defaultdict(list)
    for s, g in snap.sat_ground_edges:
        stations[s].append(g)
    primaries = frozenset(stations)
    secondaries = frozenset(sats - primaries)
    adj = _adjacency(snap)
    best: dict = {}
    for p in sorted(primaries):
        for s, d in _bfs(adj, p, cfg.h_max).items():
            if s in secondaries and (s not in best or (d, p) < best[s]):
                best[s] = (d, p)
    return Partition(
        primaries=primaries,
        secondaries=secondaries,
        assignment={s: p for s, (d, p) in sorted(best.items())},
        hops={s: d for s, (d, p) in sorted(best.items())},
        stations={p: tuple(sorted(stations[p])) for p in sorted(primaries)},
    )


def participating_set(snap: AccessSnapshot, cfg: RoutingConfig, part: Partition | None = None) -> set:
    part = part or partition(snap, cfg)
    ok = set(part.primaries)
    ok.update(s for s, h in part.hops.items() if h * cfg.per_hop_latency <= cfg.l_max)
    return ok


# ---------------------------------------------------------------------------
# contact windows


def _sample_step(times: list[datetime], sample_time: float | None) -> timedelta:
    if sample_time is not None:
        return timedelta(seconds=sample_time)
    if len(times) < 2:
        raise ValueError("sample_time is required for fewer than two snapshots")
    return times[1] - times[0]


def contact_windows(snapshots: list[AccessSnapshot], sample_time: float | None = None) -> list[ContactWindow]:
    if not snapshots:
        return []
    times = [s.time for s in snapshots]
    step = _sample_step(times, sample_time)
    runs: dict = {}
    out = []
    for k, snap in enumerate(snapshots):
        present = set(snap.sat_ground_edges) | set(snap.isl_edges)
        for pair in list(runs):
            if pair not in present:
                out.append(ContactWindow(pair[0], pair[1], times[runs.pop(pair)], times[k - 1] + step))
        for pair in present:
            runs.setdefault(pair, k)
    last = times[-1] + step
    for pair, k in runs.items():
        out.append(ContactWindow(pair[0], pair[1], times[k], last))
    return sorted(out, key=_window_key)


def _window_key(w: ContactWindow):
    return (str(w.a), str(w.b), w.t_start)


def windows_from_mask(a, b, mask: np.ndarray, times: list[datetime], step: timedelta) -> list[ContactWindow]:
    """Merge a boolean presence series into maximal windows."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.nonzero(edges == 1)[0]
    ends = np.nonzero(edges == -1)[0]
    return [ContactWindow(a, b, times[s], times[e - 1] + step) for s, e in zip(starts, ends)]


# ---------------------------------------------------------------------------
# whole-scenario timeline


@dataclass
class Timeline:
    """Access geometry sampled on the scenario grid."""

    times: list[datetime]
    sat_ids: list[int]
    station_names: list[str]
    sample_time: float
    ground_vis: np.ndarray  # (T, S, G) bool
    hops: np.ndarray  # (T, S, S) ISL hop counts, inf when unreachable
    cfg: RoutingConfig

    def __post_init__(self):
        self._index = {s: i for i, s in enumerate(self.sat_ids)}

    @property
    def start(self) -> datetime:
        return self.times[0]

    def snapshot(self, k: int) -> AccessSnapshot:
        vis = self.ground_vis[k]
        ground = frozenset(
            (self.sat_ids[i], self.station_names[j]) for i, j in zip(*np.nonzero(vis))
        )
        adj = np.triu(self.hops[k] == 1, 1)
        isl = frozenset((self.sat_ids[i], self.sat_ids[j]) for i, j in zip(*np.nonzero(adj)))
        return AccessSnapshot(self.times[k], ground, isl, tuple(self.sat_ids))

    def snapshots(self) -> list[AccessSnapshot]:
        return [self.snapshot(k) for k in range(len(self.times))]

    def sample_index(self, t: datetime) -> int:
        k = int(math.floor((t - self.start).total_seconds() / self.sample_time + 1e-9))
        return min(max(k, 0), len(self.times) - 1)

    def hop_count(self, a: int, b: int, t: datetime) -> float:
        return float(self.hops[self.sample_index(t), self._index[a], self._index[b]])

    def ground_windows(self) -> list[ContactWindow]:
        step = timedelta(seconds=self.sample_time)
        out = []
        for i, s in enumerate(self.sat_ids):
            for j, g in enumerate(self.station_names):
                out += windows_from_mask(s, g, self.ground_vis[:, i, j], self.times, step)
        return out

    def route_windows(self, hop_limit: int) -> list[ContactWindow]:
        """Windows during which two satellites are within ``hop_limit`` ISL hops."""
        step = timedelta(seconds=self.sample_time)
        reach = self.hops <= hop_limit
        out = []
        n = len(self.sat_ids)
        for i in range(n):
            for j in range(i + 1, n):
                if reach[:, i, j].any():
                    out += windows_from_mask(self.sat_ids[i], self.sat_ids[j], reach[:, i, j], self.times, step)
        return out


def build_timeline(elements: dict, stations, times: list[datetime], cfg: RoutingConfig) -> Timeline:
    sat_ids = sorted(elements)
    names = [g.name for g in stations]
    secs = np.array([orbits.seconds_since_j2000(t) for t in times])
    sat_pos = np.stack([orbits.propagate_many(elements[s], secs)[0] for s in sat_ids], axis=1)  # (T, S, 3)
    if stations:
        gs_pos = np.stack([orbits.station_positions(g, secs) for g in stations], axis=1)  # (T, G, 3)
        sin_el = _sin_elevation(sat_pos[:, :, None, :], gs_pos[:, None, :, :])
        ground_vis = sin_el >= math.sin(math.radians(cfg.min_elevation))
    else:
        ground_vis = np.zeros((len(times), len(sat_ids), 0), dtype=bool)
    clear = _segment_clear(sat_pos[:, :, None, :], sat_pos[:, None, :, :], cfg.blocking_radius)
    n = len(sat_ids)
    clear &= ~np.eye(n, dtype=bool)[None]
    hops = np.stack([shortest_path(c.astype(float), unweighted=True, directed=False) for c in clear])
    if len(sample_spacing := {(b - a).total_seconds() for a, b in zip(times, times[1:])}) > 1:
        raise ValueError("time grid must be equally spaced")
    sample_time = sample_spacing.pop() if sample_spacing else 1.0
    return Timeline(list(times), sat_ids, names, sample_time, ground_vis, hops, cfg)


# ---------------------------------------------------------------------------
# exports


def write_contact_plan(windows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["a", "b", "t_start_iso", "t_end_iso"])
        for win in sorted(windows, key=_window_key):
            w.writerow([win.a, win.b, win.t_start.isoformat(), win.t_end.isoformat()])


def read_contact_plan(path) -> list[ContactWindow]:
    def node(v: str):
        return int(v) if v.isdigit() else v

    with open(path, newline="") as fh:
        return [
            ContactWindow(node(r["a"]), node(r["b"]), datetime.fromisoformat(r["t_start_iso"]), datetime.fromisoformat(r["t_end_iso"]))
            for r in csv.DictReader(fh)
        ]


def partition_record(snap: AccessSnapshot, part: Partition, names: dict | None = None) -> dict:
    """One JSON-serialisable row of the per-snapshot partition report."""
    names = names or {}
    label = lambda s: names.get(s, str(s))  # noqa: E731
    return {
        "time": snap.time.isoformat() if snap.time else None,
        "primaries": [
            {
                "satellite": label(p),
                "stations": list(part.stations.get(p, ())),
                "secondaries": [label(s) for s in part.cluster(p)],
            }
            for p in sorted(part.primaries)
        ],
        "non_accessible": [label(s) for s in sorted(part.secondaries)],
        "unassigned": [label(s) for s in sorted(part.unassigned)],
    }
