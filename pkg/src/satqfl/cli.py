"""Command-line entry point: ``satqfl <verb> [options]``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _config(args):
    from .harness.config import config_from_dict, load_config, override

    cfg = load_config(args.config) if args.config else config_from_dict({})
    changes = {}
    for name in ("seed", "mode", "security"):
        v = getattr(args, name, None)
        if v is not None:
            changes[name] = v
    return override(cfg, **changes) if changes else cfg


def cmd_simulate_access(args) -> int:
    from .harness.experiment import simulate_access

    cfg = _config(args)
    files = simulate_access(cfg, args.out)
    for k, v in files.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .harness.experiment import run_experiment

    cfg = _config(args)
    res = run_experiment(cfg, args.out, figures=not args.no_figures)
    agg = res.report.aggregates()
    print(f"rounds: {res.report.rounds}")
    for name, (avg, fin) in agg.items():
        print(f"{name:18s} avg={avg:.4f} final={fin:.4f}")
    if res.report.violations:
        print(f"contract violations: {len(res.report.violations)}", file=sys.stderr)
        return EXIT_RUNTIME
    for k, v in res.files.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .harness.compare import compare_runs
    from .harness.experiment import MetricsReport
    from .plotting import plot_comparison

    reports = [MetricsReport.load(p) for p in args.reports]
    labels = [r.label or Path(p).stem for r, p in zip(reports, args.reports)]
    table = compare_runs(reports, labels)
    sys.stdout.write(table.to_markdown())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        table.write_csv(out / "comparison.csv")
        plot_comparison(table, out / "figures")
    return EXIT_OK


def cmd_qkd_demo(args) -> int:
    from .security import ChannelModel, run_bb84

    rng = np.random.default_rng(args.seed)
    sess = run_bb84(args.qubits, ChannelModel(args.adversary), rng, sample_fraction=args.sample_fraction)
    show = min(args.show, args.qubits)
    out = {
        "qubits": args.qubits,
        "adversary": args.adversary,
        "sifted": int(sess.sifted.size),
        "sifted_fraction": sess.sifted.size / args.qubits,
        "disclosed": int(sess.sample.size),
        "qber": sess.qber,
        "abort": bool(sess.qber > args.threshold),
        "first_sender_bits": "".join(map(str, sess.sender_bits[:show])),
        "first_sender_bases": "".join("+x"[b] for b in sess.sender_bases[:show]),
        "first_receiver_bases": "".join("+x"[b] for b in sess.receiver_bases[:show]),
        "first_receiver_bits": "".join(map(str, sess.receiver_bits[:show])),
    }
    text = json.dumps(out, indent=2)
    print(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "qkd_transcript.json").write_text(text + "\n")
    return EXIT_OK


def cmd_teleport_demo(args) -> int:
    from .security import teleport

    rng = np.random.default_rng(args.seed)
    theta = args.theta if args.theta is not None else float(rng.uniform(0, math.pi))
    phi = args.phi if args.phi is not None else float(rng.uniform(0, 2 * math.pi))
    rows = []
    for outcomes in ([None] if not args.all_branches else [(0, 0), (0, 1), (1, 0), (1, 1)]):
        r = teleport(theta, phi, rng, outcomes=outcomes)
        rows.append(
            {
                "theta": theta,
                "phi": phi,
                "classical_bits": list(r.classical_bits),
                "recovered": list(r.recovered),
                "fidelity": r.fidelity,
                "inverse_check": r.inverse_check,
            }
        )
    for row in rows:
        print(json.dumps(row))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="satqfl", description="Federated quantum learning over a LEO constellation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def scenario(sp, run_opts=True):
        sp.add_argument("--config", type=Path, help="scenario YAML")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, default=Path("out"))
        if run_opts:
            sp.add_argument("--mode", choices=["sequential", "simultaneous", "asynchronous", "async"])
            sp.add_argument("--security", help="plaintext | otp | aead | teleport_partial(i)")

    sp = sub.add_parser("simulate-access", help="contact plan CSV and partition JSONL")
    scenario(sp, run_opts=False)
    sp.set_defaults(func=cmd_simulate_access)

    sp = sub.add_parser("train", help="run a full experiment")
    scenario(sp)
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("compare", help="compare report.json files or run directories")
    sp.add_argument("reports", nargs="+", type=Path)
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("qkd-demo", help="one BB84 session transcript")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--qubits", type=int, default=4096)
    sp.add_argument("--adversary", choices=["none", "intercept_resend"], default="none")
    sp.add_argument("--sample-fraction", type=float, default=0.25)
    sp.add_argument("--threshold", type=float, default=0.10)
    sp.add_argument("--show", type=int, default=16)
    sp.add_argument("--out", type=Path)
    sp.set_defaults(func=cmd_qkd_demo)

    sp = sub.add_parser("teleport-demo", help="teleport one U(theta, phi)|0> state")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--theta", type=float)
    sp.add_argument("--phi", type=float)
    sp.add_argument("--all-branches", action="store_true")
    sp.set_defaults(func=cmd_teleport_demo)
    return p


def main(argv=None) -> int:
    from .harness.config import ConfigError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # runtime failures map to one exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
