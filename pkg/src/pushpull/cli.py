"""Command line front door: every component runs as `pushpull <component>`.

Server-shaped commands print `READY port=N` once bound and a final
`SUMMARY {...}` JSON line on SIGTERM, which is what the lab supervisor
scrapes when it wires processes together.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import signal
import sys
from pathlib import Path

from . import lab as lab_mod
from . import publisher as publisher_mod
from . import pull_server, push_server, sink as sink_mod, swarm as swarm_mod
from .metrics import pull_schedule_oracle
from .util import print_summary, run_until_sigterm


def _add_push_server(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("push-server", help="long-polling pub/sub server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0, help="0 picks a free port")
    p.add_argument("--timeout-ms", type=int, default=push_server.DEFAULT_TIMEOUT_MS)
    p.add_argument("--interval-ms", type=int, default=push_server.DEFAULT_INTERVAL_MS)
    p.add_argument("--sweep-ms", type=int, default=push_server.DEFAULT_SWEEP_MS)
    p.add_argument("--outbox-capacity", type=int, default=push_server.DEFAULT_OUTBOX_CAPACITY)
    p.add_argument("--grace-ms", type=int, default=None, help="session idle expiry; default 2x timeout")

    def run(args: argparse.Namespace) -> int:
        config = push_server.PushConfig(
            timeout_ms=args.timeout_ms,
            interval_ms=args.interval_ms,
            sweep_period_ms=args.sweep_ms,
            outbox_capacity=args.outbox_capacity,
            session_grace_ms=args.grace_ms,
        )
        return run_until_sigterm(lambda stop: push_server.serve(stop, args.host, args.port, config))

    p.set_defaults(fn=run)


def _add_pull_server(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("pull-server", help="snapshot poll server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)

    def run(args: argparse.Namespace) -> int:
        return run_until_sigterm(lambda stop: pull_server.serve(stop, args.host, args.port))

    p.set_defaults(fn=run)


def _add_publisher(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("publisher", help="fixed-rate item publisher")
    p.add_argument("--target", required=True, help="server base URL")
    p.add_argument("--channel", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--interval-ms", type=int, required=True)
    p.add_argument("--request-timeout-s", type=float, default=5.0)
    p.add_argument("--start-at-ms", type=int, default=None, help="wall clock ms for the first send")

    def run(args: argparse.Namespace) -> int:
        config = publisher_mod.PublisherConfig(
            target=args.target,
            channel=args.channel,
            count=args.count,
            interval_ms=args.interval_ms,
            request_timeout_s=args.request_timeout_s,
            start_at_ms=args.start_at_ms,
        )
        outcomes = publisher_mod.run_publisher(
            config, emit=lambda o: print(json.dumps(o.to_wire(), separators=(",", ":")), flush=True)
        )
        ok = [o for o in outcomes if o.ok]
        print_summary(
            {
                "published": len(ok),
                "failed": len(outcomes) - len(ok),
                "firstCreationTs": outcomes[0].creation_ts if outcomes else None,
                "lastCreationTs": outcomes[-1].creation_ts if outcomes else None,
            }
        )
        return 0  # publish failures are recorded, not fatal

    p.set_defaults(fn=run)


def _add_swarm(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("swarm", help="simulated client fleet")
    p.add_argument("--mode", choices=("push", "pull"), required=True)
    p.add_argument("--clients", type=int, required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--channel", required=True)
    p.add_argument("--run-id", required=True)
    p.add_argument("--duration-ms", type=int, required=True)
    p.add_argument("--pull-interval-ms", type=int, default=1500)
    p.add_argument("--ramp-up-ms", type=int, default=None)
    p.add_argument("--backoff-ms", type=int, default=1000)
    p.add_argument("--queue-capacity", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-epoch-ms", type=int, default=None, help="wall clock ms the pull tick grids anchor to")
    out = p.add_mutually_exclusive_group(required=True)
    out.add_argument("--sink", help="stats sink address host:port")
    out.add_argument("--out", help="write receipts to this NDJSON file instead")

    def run(args: argparse.Namespace) -> int:
        config = swarm_mod.SwarmConfig(
            mode=args.mode,
            clients=args.clients,
            target=args.target,
            channel=args.channel,
            run_id=args.run_id,
            duration_ms=args.duration_ms,
            pull_interval_ms=args.pull_interval_ms,
            ramp_up_ms=args.ramp_up_ms,
            backoff_ms=args.backoff_ms,
            queue_capacity=args.queue_capacity,
            seed=args.seed,
            grid_epoch_ms=args.grid_epoch_ms,
        )

        async def main(stop: asyncio.Event) -> int:
            if args.sink:
                host, _, port = args.sink.rpartition(":")
                record_sink = await swarm_mod.StreamSink.to_tcp(host, int(port), config.queue_capacity)
            else:
                record_sink = swarm_mod.StreamSink.to_file(args.out, config.queue_capacity)
            stats = await swarm_mod.run_swarm(config, record_sink, stop)
            print_summary(stats.summary())
            return 0

        return run_until_sigterm(main)

    p.set_defaults(fn=run)


def _add_sink(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("sink", help="receipt collector and CPU sampler")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--cpu-pid", type=int, default=None)
    p.add_argument("--cpu-pid-file", default=None, help="poll this file for the pid to sample")
    p.add_argument("--cpu-period-ms", type=int, default=500)

    def run(args: argparse.Namespace) -> int:
        return run_until_sigterm(
            lambda stop: sink_mod.serve(
                stop,
                Path(args.out_dir),
                host=args.host,
                port=args.port,
                cpu_pid=args.cpu_pid,
                cpu_pid_file=args.cpu_pid_file,
                cpu_period_ms=args.cpu_period_ms,
            )
        )

    p.set_defaults(fn=run)


def _add_lab(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("lab", help="experiment orchestration and reporting")
    lab_sub = p.add_subparsers(dest="lab_cmd", required=True)

    run_p = lab_sub.add_parser("run", help="one experiment from a config file")
    run_p.add_argument("--config", required=True, help="experiment config JSON")
    run_p.add_argument("--out", default="runs", help="output directory")

    def run_one(args: argparse.Namespace) -> int:
        config = lab_mod.ExperimentConfig.from_wire(json.loads(Path(args.config).read_text()))
        row = lab_mod.run_experiment(config, Path(args.out))
        print(json.dumps(row.to_wire(), indent=2))
        return 0 if row.error is None else 1

    run_p.set_defaults(fn=run_one)

    sweep_p = lab_sub.add_parser("sweep", help="run a grid of experiments, resumably")
    sweep_p.add_argument("--grid", required=True, help="JSON array of experiment configs")
    sweep_p.add_argument("--out", required=True)

    def run_sweep(args: argparse.Namespace) -> int:
        grid = [lab_mod.ExperimentConfig.from_wire(obj) for obj in json.loads(Path(args.grid).read_text())]
        rows = lab_mod.sweep(grid, Path(args.out))
        failures = [r for r in rows if r.error is not None]
        print(f"{len(rows) - len(failures)}/{len(rows)} runs ok")
        for r in failures:
            print(f"  failed: {r.run_dir}: {r.error}")
        return 0 if not failures else 1

    sweep_p.set_defaults(fn=run_sweep)

    grid_p = lab_sub.add_parser("desk-grid", help="write the desk-scale sweep grid")
    grid_p.add_argument("--out", required=True)
    grid_p.add_argument("--seed", type=int, default=0)

    def write_grid(args: argparse.Namespace) -> int:
        grid = [c.to_wire() for c in lab_mod.desk_grid(seed=args.seed)]
        Path(args.out).write_text(json.dumps(grid, indent=2) + "\n")
        print(f"{len(grid)} experiments -> {args.out}")
        return 0

    grid_p.set_defaults(fn=write_grid)

    rep_p = lab_sub.add_parser("report", help="CSV series + summary from finished runs")
    rep_p.add_argument("--runs", required=True, help="directory holding run subdirectories")
    rep_p.add_argument("--out", default=None, help="report directory (default <runs>/report)")

    def run_report(args: argparse.Namespace) -> int:
        from . import report as report_mod

        runs_dir = Path(args.runs)
        rows = lab_mod.collect_rows(runs_dir)
        out = Path(args.out) if args.out else runs_dir / "report"
        written = report_mod.emit_report(rows, out)
        for path in written:
            print(path)
        return 0

    rep_p.set_defaults(fn=run_report)

    oracle_p = lab_sub.add_parser("oracle", help="predicted pull receipts for one client phase")
    oracle_p.add_argument("--publish-interval-ms", type=int, required=True)
    oracle_p.add_argument("--pull-interval-ms", type=int, required=True)
    oracle_p.add_argument("--messages", type=int, default=10)
    oracle_p.add_argument("--phase-ms", type=int, default=0)
    oracle_p.add_argument("--drain-ms", type=int, default=None)

    def run_oracle(args: argparse.Namespace) -> int:
        pred = pull_schedule_oracle(
            args.publish_interval_ms, args.pull_interval_ms, args.messages, args.phase_ms, args.drain_ms
        )
        print(
            json.dumps(
                {
                    "nonUnique": pred.non_unique,
                    "unique": pred.unique,
                    "items": list(pred.items),
                    "polls": pred.poll_count,
                    "emptyPolls": pred.empty_polls,
                },
                indent=2,
            )
        )
        return 0

    oracle_p.set_defaults(fn=run_oracle)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pushpull", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)
    _add_push_server(sub)
    _add_pull_server(sub)
    _add_publisher(sub)
    _add_swarm(sub)
    _add_sink(sub)
    _add_lab(sub)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
