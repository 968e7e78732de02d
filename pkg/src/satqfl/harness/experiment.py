"""End-to-end experiment: orbits -> access -> partitions -> rounds -> files."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import timedelta
from pathlib import Path

import numpy as np

from .. import access, orbits, qfl
from ..access import Partition
from ..scheduler import (
    Network,
    NoParticipants,
    RoundDriver,
    RoundTrace,
    TrainingConfig,
    Transport,
    check_trace,
    participation_monitor,
)
from .config import ConfigError, ScenarioConfig, default_tle_path
from .data import load_dataset

log = logging.getLogger(__name__)

# (column, source section, key, higher is better)
METRICS = (
    ("server_val_acc", "server", "val_acc", True),
    ("server_test_acc", "server", "test_acc", True),
    ("server_val_loss", "server", "val_loss", False),
    ("device_train_acc", "devices", "train_acc", True),
    ("device_test_acc", "devices", "test_acc", True),
    ("device_val_loss", "devices", "val_loss", False),
    ("comm_time", None, "communication_time", False),
)


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)  # one dict per round
    label: str = ""
    participation: dict = field(default_factory=dict)
    flagged: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    @property
    def rounds(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, math.nan) for r in self.rows], dtype=float)

    def aggregates(self) -> dict:
        """``{metric: (avg, final)}``; NaN for an empty run."""
        out = {}
        for name, *_ in METRICS:
            col = self.column(name)
            if col.size == 0 or np.all(np.isnan(col)):
                out[name] = (math.nan, math.nan)
            else:
                out[name] = (float(np.nanmean(col)), float(col[-1]))
        return out

    @classmethod
    def from_traces(cls, traces, label: str = "") -> "MetricsReport":
        rows = []
        for tr in traces:
            row = {"round": tr.round}
            for name, section, key, _ in METRICS:
                src = tr.__dict__ if section is None else getattr(tr, section)
                row[name] = float(src[key]) if key in src else math.nan
            rows.append(row)
        return cls(rows, label)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "rows": self.rows,
            "aggregates": {k: list(v) for k, v in self.aggregates().items()},
            "participation": {str(k): v for k, v in self.participation.items()},
            "flagged": [str(s) for s in self.flagged],
            "violations": self.violations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d.get("rows", []), d.get("label", ""), d.get("participation", {}), d.get("flagged", []), d.get("violations", []))

    @classmethod
    def load(cls, path) -> "MetricsReport":
        path = Path(path)
        if path.is_dir():
            path = path / "report.json"
        return cls.from_dict(json.loads(path.read_text()))


@dataclass
class ExperimentResult:
    report: MetricsReport
    traces: list
    partitions: list  # (round, Partition) pairs actually used
    files: dict
    final_params: qfl.ModelParams | None = None


# ---------------------------------------------------------------------------
# scenario pieces


def load_fleet(cfg: ScenarioConfig) -> tuple[dict, dict]:
    """``({catalog: OrbitalElements}, {catalog: name})`` for the first n records."""
    path = Path(cfg.tle_path) if cfg.tle_path else default_tle_path()
    if not path.exists():
        raise ConfigError("tle_path", f"no such file: {path}")
    records = orbits.parse_tle(path.read_text())
    if cfg.n_satellites > len(records):
        raise ConfigError("n_satellites", f"{cfg.n_satellites} requested but {path.name} holds {len(records)} records")
    records = records[: cfg.n_satellites]
    return (
        {r.catalog_number: orbits.elements_from_tle(r) for r in records},
        {r.catalog_number: r.name for r in records},
    )


def build_timeline(cfg: ScenarioConfig, elements: dict) -> access.Timeline:
    times = orbits.time_grid(cfg.start_time, cfg.horizon_seconds, cfg.sample_time)
    return access.build_timeline(elements, cfg.ground_stations, times, cfg.routing)


def full_visibility_partition(satellites, n_primaries: int, station: str = "GS") -> Partition:
    sats = sorted(satellites)
    prim = sats[: max(1, min(n_primaries, len(sats)))]
    rest = sats[len(prim) :]
    assignment = {s: prim[i % len(prim)] for i, s in enumerate(rest)}
    return Partition(
        primaries=frozenset(prim),
        secondaries=frozenset(rest),
        assignment=assignment,
        hops={s: 1 for s in rest},
        stations={p: (station,) for p in prim},
    )


# ---------------------------------------------------------------------------
# writers (byte-stable: fixed key order, repr floats, "\n" line endings)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (set, frozenset)):
        return sorted(o, key=str)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=_json_default, allow_nan=True)


def write_jsonl(path, rows) -> None:
    with open(path, "w", newline="\n") as fh:
        for r in rows:
            fh.write(dumps(r) + "\n")


def write_per_round(path, report: MetricsReport) -> None:
    cols = ["round"] + [m[0] for m in METRICS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in report.rows:
            w.writerow([r["round"]] + [repr(r[c]) for c in cols[1:]])


def write_summary(path, report: MetricsReport) -> None:
    """Avg/Final per metric, one row, like the usual results table."""
    agg = report.aggregates()
    header, values = ["label", "rounds"], [report.label, report.rounds]
    for name, (avg, fin) in agg.items():
        header += [f"{name}_avg", f"{name}_final"]
        values += [repr(avg), repr(fin)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerow(values)


# ---------------------------------------------------------------------------
# main loop


def run_experiment(cfg: ScenarioConfig, out_dir=None, *, figures: bool = True, label: str | None = None) -> ExperimentResult:
    """Run ``cfg.training.rounds`` rounds and write the artefacts to ``out_dir``."""
    tr = cfg.training
    label = label or f"{cfg.mode.value}-{cfg.security}"
    spec = qfl.CircuitSpec(tr.qubits, tr.layers, tr.classes, tr.readout_scale)
    names: dict = {}
    timeline = None
    if cfg.topology == "orbital":
        elements, names = load_fleet(cfg)
        satellites = sorted(elements)
        timeline = build_timeline(cfg, elements)
        network = Network.from_timeline(timeline)
    else:
        satellites = list(range(1, cfg.n_satellites + 1))
        network = Network.full_visibility(satellites, horizon=math.inf)
        fixed = full_visibility_partition(satellites, cfg.full_visibility_primaries, network.stations[0])

    split = load_dataset(cfg.dataset, satellites, cfg.seed)
    if split.class_count > spec.class_count:
        raise ConfigError("training.classes", f"dataset has {split.class_count} classes, circuit reads {spec.class_count}")

    driver = RoundDriver(
        network=network,
        datasets=split.shards,
        spec=spec,
        training=TrainingConfig(tr.epochs, tr.lr, tr.batch_size, tr.seconds_per_sample, tr.lr_decay),
        transport=Transport.parse(cfg.security, cfg.link, cfg.adversary),
        policy=cfg.policy,
        seed=cfg.seed,
        round_duration=cfg.round_duration,
        global_every_n_rounds=tr.global_every_n_rounds,
        server_val=split.server_val,
        server_test=split.server_test,
    )
    params = qfl.init_params(spec, np.random.default_rng([cfg.seed, 5]), tr.init_scale)
    traces: list[RoundTrace] = []
    used: list = []
    part_rows: list = []
    for r in range(tr.rounds):
        t0 = r * cfg.round_duration
        if timeline is not None:
            k = int(round(t0 / cfg.sample_time))
            snap = timeline.snapshot(k)
            part = access.partition(snap, cfg.routing)
            participants = access.participating_set(snap, cfg.routing, part)
            row = access.partition_record(snap, part, names)
        else:
            part, participants = fixed, set(satellites)
            row = {"primaries": [{"satellite": str(p), "secondaries": [str(s) for s in part.cluster(p)]} for p in sorted(part.primaries)]}
        row["round"] = r
        part_rows.append(row)
        used.append((r, part))
        try:
            trace, params = driver.run_round(cfg.mode, part, participants, t0, params, r)
        except NoParticipants as exc:
            log.warning("%s", exc)
            trace = RoundTrace(r, cfg.mode.value, t0, notes=[str(exc)])
            params = params.with_angles(params.angles, version=params.version + 1)
            trace.global_version = params.version
            trace.global_angles = [float(a) for a in params.angles]
        if cfg.mode.value == "asynchronous" and "val_loss" in trace.devices:
            trace.notes.append("device validation loss is reported for every async round")
        traces.append(trace)
        log.info("round %d: %d participants, comm %.3f s", r, len(trace.participants), trace.communication_time)

    report = MetricsReport.from_traces(traces, label)
    report.participation, report.flagged = (
        participation_monitor(traces, satellites, cfg.policy.p_min_floor) if traces else ({}, [])
    )
    report.violations = [v for t in traces for v in check_trace(t, cfg.policy)]

    files: dict = {}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files["traces"] = out / "traces.jsonl"
        write_jsonl(files["traces"], [t.to_dict() for t in traces])
        files["per_round"] = out / "per_round.csv"
        write_per_round(files["per_round"], report)
        files["summary"] = out / "summary.csv"
        write_summary(files["summary"], report)
        files["partition"] = out / "partition.jsonl"
        write_jsonl(files["partition"], part_rows)
        if timeline is not None:
            files["contact_plan"] = out / "contact_plan.csv"
            access.write_contact_plan(timeline.ground_windows(), files["contact_plan"])
        files["report"] = out / "report.json"
        files["report"].write_text(dumps({"config": cfg.to_dict(), **report.to_dict()}) + "\n")
        if figures:
            from ..plotting import plot_report

            files.update(plot_report(report, out / "figures"))
    return ExperimentResult(report, traces, used, files, params)


def simulate_access(cfg: ScenarioConfig, out_dir) -> dict:
    """Contact plan CSV plus one partition JSONL row per sample."""
    elements, names = load_fleet(cfg)
    tl = build_timeline(cfg, elements)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"contact_plan": out / "contact_plan.csv", "partition": out / "partition.jsonl", "isl_plan": out / "isl_plan.csv"}
    access.write_contact_plan(tl.ground_windows(), files["contact_plan"])
    access.write_contact_plan(tl.route_windows(1), files["isl_plan"])
    rows, visible = [], []
    for k in range(len(tl.times)):
        snap = tl.snapshot(k)
        part = access.partition(snap, cfg.routing)
        rows.append(access.partition_record(snap, part, names))
        visible.append(len(part.primaries))
    write_jsonl(files["partition"], rows)
    from ..plotting import plot_visibility

    files.update(plot_visibility([(t - tl.start) / timedelta(hours=1) for t in tl.times], visible, len(tl.sat_ids), out / "figures"))
    return files
