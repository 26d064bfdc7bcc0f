"""Experiment lab: wires sink, server, swarm, and publisher together as
subprocesses, observes one run, and reduces it to an aggregate row.

Run directory layout (per experiment):

    receipts.ndjson  cpu.ndjson  config.json  counters.json   <- dataset
    meta.json        <- publisher log, swarm summary, observation window
    aggregate.json   <- the reduced row; its presence marks the run done
"""
from __future__ import annotations

import json
import math
import subprocess
import sys
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import requests

from .metrics import first_receipts, received_counts
from .sink import load_run
from .util import now_ms

CHANNEL = "/stock/SIM"
AGGREGATE_FILE = "aggregate.json"
META_FILE = "meta.json"

# desk-scale preset: one tenth of the reference deployment's clocks
DESK_TIME_SCALE = 10
DESK_PULL_INTERVAL_MS = 1500
DESK_LONG_POLL_TIMEOUT_MS = 4500
DESK_TOTAL_MESSAGES = 10
DESK_PUBLISH_INTERVALS_MS = (500, 1000, 1500, 2000, 5000)
DESK_CLIENTS = (25, 50, 100)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    clients: int
    publish_interval_ms: int
    pull_interval_ms: int = DESK_PULL_INTERVAL_MS
    total_messages: int = DESK_TOTAL_MESSAGES
    long_poll_timeout_ms: int = DESK_LONG_POLL_TIMEOUT_MS
    time_scale: int = DESK_TIME_SCALE
    seed: int = 0

    def to_wire(self) -> dict:
        return {
            "mode": self.mode,
            "clients": self.clients,
            "publishIntervalMs": self.publish_interval_ms,
            "pullIntervalMs": self.pull_interval_ms,
            "totalMessages": self.total_messages,
            "longPollTimeoutMs": self.long_poll_timeout_ms,
            "timeScale": self.time_scale,
            "seed": self.seed,
        }

    @staticmethod
    def from_wire(obj: dict) -> "ExperimentConfig":
        return ExperimentConfig(
            mode=obj["mode"],
            clients=int(obj["clients"]),
            publish_interval_ms=int(obj["publishIntervalMs"]),
            pull_interval_ms=int(obj.get("pullIntervalMs", DESK_PULL_INTERVAL_MS)),
            total_messages=int(obj.get("totalMessages", DESK_TOTAL_MESSAGES)),
            long_poll_timeout_ms=int(obj.get("longPollTimeoutMs", DESK_LONG_POLL_TIMEOUT_MS)),
            time_scale=int(obj.get("timeScale", DESK_TIME_SCALE)),
            seed=int(obj.get("seed", 0)),
        )

    def run_id(self) -> str:
        return f"{self.mode}-c{self.clients:03d}-q{self.publish_interval_ms:05d}-s{self.seed}"

    def drain_ms(self) -> int:
        # how long after the last publish the observation keeps running:
        # long enough for the slowest legitimate receipt in each mode
        if self.mode == "pull":
            return 2 * self.pull_interval_ms
        return 2 * self.long_poll_timeout_ms


def desk_grid(seed: int = 0) -> list[ExperimentConfig]:
    return [
        ExperimentConfig(mode=mode, clients=k, publish_interval_ms=q, seed=seed)
        for mode in ("push", "pull")
        for k in DESK_CLIENTS
        for q in DESK_PUBLISH_INTERVALS_MS
    ]


@dataclass
class AggregateRow:
    config: ExperimentConfig
    run_dir: str
    mean_trip_time_ms: float | None = None
    trip_stddev_ms: float = 0.0
    trip_samples: int = 0
    mean_cpu_percent: float | None = None
    cpu_stddev: float = 0.0
    cpu_samples: int = 0
    mean_received_non_unique: float | None = None
    non_unique_stddev: float = 0.0
    mean_received_unique: float | None = None
    unique_stddev: float = 0.0
    clients_reporting: int = 0
    complete_clients: int = 0
    duplicate_deliveries: int = 0
    error_count: int = 0
    counters: dict | None = None
    error: str | None = None

    def to_wire(self) -> dict:
        return {
            "config": self.config.to_wire(),
            "runDir": self.run_dir,
            "meanTripTimeMs": self.mean_trip_time_ms,
            "tripStddevMs": self.trip_stddev_ms,
            "tripSamples": self.trip_samples,
            "meanCpuPercent": self.mean_cpu_percent,
            "cpuStddev": self.cpu_stddev,
            "cpuSamples": self.cpu_samples,
            "meanReceivedNonUnique": self.mean_received_non_unique,
            "nonUniqueStddev": self.non_unique_stddev,
            "meanReceivedUnique": self.mean_received_unique,
            "uniqueStddev": self.unique_stddev,
            "clientsReporting": self.clients_reporting,
            "completeClients": self.complete_clients,
            "duplicateDeliveries": self.duplicate_deliveries,
            "errorCount": self.error_count,
            "counters": self.counters,
            "error": self.error,
        }

    @staticmethod
    def from_wire(obj: dict) -> "AggregateRow":
        return AggregateRow(
            config=ExperimentConfig.from_wire(obj["config"]),
            run_dir=obj["runDir"],
            mean_trip_time_ms=obj.get("meanTripTimeMs"),
            trip_stddev_ms=obj.get("tripStddevMs", 0.0),
            trip_samples=obj.get("tripSamples", 0),
            mean_cpu_percent=obj.get("meanCpuPercent"),
            cpu_stddev=obj.get("cpuStddev", 0.0),
            cpu_samples=obj.get("cpuSamples", 0),
            mean_received_non_unique=obj.get("meanReceivedNonUnique"),
            non_unique_stddev=obj.get("nonUniqueStddev", 0.0),
            mean_received_unique=obj.get("meanReceivedUnique"),
            unique_stddev=obj.get("uniqueStddev", 0.0),
            clients_reporting=obj.get("clientsReporting", 0),
            complete_clients=obj.get("completeClients", 0),
            duplicate_deliveries=obj.get("duplicateDeliveries", 0),
            error_count=obj.get("errorCount", 0),
            counters=obj.get("counters"),
            error=obj.get("error"),
        )


def _stats(values: list[float]) -> tuple[float | None, float]:
    if not values:
        return None, 0.0
    m = sum(values) / len(values)
    if len(values) < 2:
        return m, 0.0
    var = sum((v - m) ** 2 for v in values) / (len(values) - 1)
    return m, math.sqrt(var)


def analyze_run(run_dir: Path) -> AggregateRow:
    """Reduce one finished run directory to its aggregate row."""
    dataset = load_run(run_dir)
    meta = json.loads((run_dir / META_FILE).read_text())
    config = ExperimentConfig.from_wire(dataset.config)

    firsts = first_receipts(dataset.receipts)
    trips = [float(r.trip_time_ms) for r in firsts]
    mean_trip, trip_sd = _stats(trips)

    window_start = meta.get("windowStartTs")
    window_end = meta.get("windowEndTs")
    cpu_values = [
        s.process_cpu_percent
        for s in dataset.cpu_samples
        if window_start is None or window_start <= s.ts <= window_end
    ]
    mean_cpu, cpu_sd = _stats(cpu_values)

    counts = received_counts(dataset.receipts)
    non_unique = [float(c[0]) for c in counts.values()]
    unique = [float(c[1]) for c in counts.values()]
    mean_nu, nu_sd = _stats(non_unique)
    mean_u, u_sd = _stats(unique)

    swarm_summary = meta.get("swarmSummary", {})
    publisher = meta.get("publisherOutcomes", [])
    publish_failures = sum(1 for o in publisher if o.get("error"))
    errors = (
        swarm_summary.get("errors", 0)
        + swarm_summary.get("dropped", 0)
        + meta.get("sinkSummary", {}).get("malformed", 0)
        + publish_failures
    )

    return AggregateRow(
        config=config,
        run_dir=str(run_dir),
        mean_trip_time_ms=mean_trip,
        trip_stddev_ms=trip_sd,
        trip_samples=len(trips),
        mean_cpu_percent=mean_cpu,
        cpu_stddev=cpu_sd,
        cpu_samples=len(cpu_values),
        mean_received_non_unique=mean_nu,
        non_unique_stddev=nu_sd,
        mean_received_unique=mean_u,
        unique_stddev=u_sd,
        clients_reporting=len(counts),
        complete_clients=sum(1 for c in counts.values() if c[1] == config.total_messages),
        duplicate_deliveries=len(dataset.receipts) - len(firsts) if config.mode == "push" else 0,
        error_count=errors,
        counters=dataset.counters,
    )


# ---------------------------------------------------------------------------
# child process plumbing


class Child:
    """Subprocess with line-buffered stdout/stderr capture on threads."""

    def __init__(self, name: str, argv: list[str]):
        self.name = name
        self.argv = argv
        self.proc = subprocess.Popen(
            argv, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, bufsize=1
        )
        self.stdout_lines: list[str] = []
        self.stderr_lines: list[str] = []
        self._threads = [
            threading.Thread(target=self._pump, args=(self.proc.stdout, self.stdout_lines), daemon=True),
            threading.Thread(target=self._pump, args=(self.proc.stderr, self.stderr_lines), daemon=True),
        ]
        for t in self._threads:
            t.start()

    @staticmethod
    def _pump(stream, into: list[str]) -> None:
        for line in stream:
            into.append(line.rstrip("\n"))
        stream.close()

    def wait_ready(self, timeout_s: float = 15.0) -> int:
        """Port from the READY line, or RuntimeError with captured stderr."""
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            for line in self.stdout_lines:
                if line.startswith("READY port="):
                    return int(line.split("port=", 1)[1])
            if self.proc.poll() is not None:
                raise RuntimeError(f"{self.name} exited before READY: {self.tail()}")
            time.sleep(0.02)
        raise RuntimeError(f"{self.name} never printed READY: {self.tail()}")

    def summary(self) -> dict | None:
        for line in reversed(self.stdout_lines):
            if line.startswith("SUMMARY "):
                return json.loads(line[len("SUMMARY "):])
        return None

    def stop(self, timeout_s: float = 15.0) -> int:
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout=timeout_s)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        for t in self._threads:
            t.join(timeout=2)
        return self.proc.returncode

    def kill(self) -> None:
        if self.proc.poll() is None:
            self.proc.kill()
            self.proc.wait()

    def tail(self, n: int = 8) -> str:
        return " | ".join(self.stderr_lines[-n:] or self.stdout_lines[-n:])


def _module_cmd(*args: str) -> list[str]:
    return [sys.executable, "-m", "pushpull", *args]


def _get_counters(port: int, timeout_s: float = 2.0) -> dict:
    resp = requests.get(f"http://127.0.0.1:{port}/counters", timeout=timeout_s)
    resp.raise_for_status()
    return resp.json()


def _wait_for_fleet(server_port: int, config: ExperimentConfig, deadline_s: float = 30.0) -> None:
    """Block until every client has checked in with the server."""
    key = "subscribes" if config.mode == "push" else "pulls"
    deadline = time.monotonic() + deadline_s
    while time.monotonic() < deadline:
        try:
            if _get_counters(server_port)[key] >= config.clients:
                return
        except requests.RequestException:
            pass
        time.sleep(0.05)
    raise RuntimeError(f"fleet never became ready ({key} < {config.clients})")


def run_experiment(config: ExperimentConfig, out_dir: Path | str) -> AggregateRow:
    """Run one experiment end to end; reuses the run directory when done.

    A finished run is marked by aggregate.json; calling again is a no-op
    load, which is what makes sweeps resumable.
    """
    out_dir = Path(out_dir)
    run_dir = out_dir / config.run_id()
    agg_path = run_dir / AGGREGATE_FILE
    if agg_path.exists():
        cached = AggregateRow.from_wire(json.loads(agg_path.read_text()))
        if cached.error is None:
            return cached
        agg_path.unlink()  # failed attempt: run it again
    run_dir.mkdir(parents=True, exist_ok=True)
    # a half-finished earlier attempt would double up the ndjson appends
    for stale in ("receipts.ndjson", "cpu.ndjson", META_FILE):
        (run_dir / stale).unlink(missing_ok=True)

    children: list[Child] = []
    pid_file = run_dir / "server.pid"
    try:
        sink = Child(
            "sink",
            _module_cmd(
                "sink", "--out-dir", str(run_dir), "--port", "0",
                "--cpu-pid-file", str(pid_file), "--cpu-period-ms", "250",
            ),
        )
        children.append(sink)
        sink_port = sink.wait_ready()

        if config.mode == "push":
            server = Child(
                "push-server",
                _module_cmd(
                    "push-server", "--port", "0",
                    "--timeout-ms", str(config.long_poll_timeout_ms),
                ),
            )
        else:
            server = Child("pull-server", _module_cmd("pull-server", "--port", "0"))
        children.append(server)
        server_port = server.wait_ready()
        pid_file.write_text(str(server.proc.pid))

        # generous hard stop; the lab terminates the fleet at the window edge
        duration_ms = (
            config.total_messages * config.publish_interval_ms + config.drain_ms() + 60_000
        )
        grid_epoch_ms = now_ms()
        swarm = Child(
            "swarm",
            _module_cmd(
                "swarm", "--mode", config.mode, "--clients", str(config.clients),
                "--target", f"http://127.0.0.1:{server_port}", "--channel", CHANNEL,
                "--run-id", config.run_id(), "--duration-ms", str(duration_ms),
                "--pull-interval-ms", str(config.pull_interval_ms),
                "--seed", str(config.seed),
                "--grid-epoch-ms", str(grid_epoch_ms),
                "--sink", f"127.0.0.1:{sink_port}",
            ),
        )
        children.append(swarm)
        _wait_for_fleet(server_port, config)
        counters_before = _get_counters(server_port)

        # pin the publish schedule to the poll grids: a fixed fractional offset
        # keeps publish instants off the poll instants, and an aligned start
        # makes each cell's trip/receipt structure a grid property instead of
        # a startup-timing lottery; the 2 ms lead cancels the send-side stamp
        # latency, which otherwise shaves the age of every item caught
        p = config.pull_interval_ms
        offset_ms = grid_epoch_ms + round(0.16 * p) - 2
        margin_ms = max(1500, p)
        slots = max(1, math.ceil((now_ms() + margin_ms - offset_ms) / p))
        publish_start_ms = offset_ms + slots * p

        publisher = Child(
            "publisher",
            _module_cmd(
                "publisher", "--target", f"http://127.0.0.1:{server_port}",
                "--channel", CHANNEL, "--count", str(config.total_messages),
                "--interval-ms", str(config.publish_interval_ms),
                "--start-at-ms", str(publish_start_ms),
            ),
        )
        children.append(publisher)
        pub_budget_s = (
            (publish_start_ms - now_ms()) / 1000.0
            + config.total_messages * config.publish_interval_ms / 1000.0
            + 60.0
        )
        try:
            publisher.proc.wait(timeout=pub_budget_s)
        except subprocess.TimeoutExpired as e:
            raise RuntimeError("publisher overran its schedule") from e
        publisher_exit_ts = now_ms()

        time.sleep(config.drain_ms() / 1000.0)
        window_end_ts = now_ms()

        swarm.stop()
        counters_after = _get_counters(server_port)
        sink.stop()
        server.stop()

        outcomes = [
            json.loads(line)
            for line in publisher.stdout_lines
            if line.startswith("{")
        ]
        creation_ts = [o["creationTs"] for o in outcomes if o.get("creationTs")]
        meta = {
            "runId": config.run_id(),
            "publisherOutcomes": outcomes,
            "publisherSummary": publisher.summary(),
            "publisherExitTs": publisher_exit_ts,
            "swarmSummary": swarm.summary() or {},
            "sinkSummary": sink.summary() or {},
            "serverSummary": server.summary() or {},
            "countersBefore": counters_before,
            "windowStartTs": min(creation_ts) if creation_ts else None,
            "windowEndTs": window_end_ts,
            "drainMs": config.drain_ms(),
            "gridEpochMs": grid_epoch_ms,
            "publishStartAtMs": publish_start_ms,
            "channel": CHANNEL,
        }
        (run_dir / META_FILE).write_text(json.dumps(meta, indent=2) + "\n")
        (run_dir / "config.json").write_text(json.dumps(config.to_wire(), indent=2) + "\n")
        (run_dir / "counters.json").write_text(json.dumps(counters_after, indent=2) + "\n")

        row = analyze_run(run_dir)
    except Exception as e:
        for child in children:
            child.kill()
        row = AggregateRow(config=config, run_dir=str(run_dir), error=f"{type(e).__name__}: {e}")
    finally:
        for child in children:
            child.kill()
        pid_file.unlink(missing_ok=True)

    agg_path.write_text(json.dumps(row.to_wire(), indent=2) + "\n")
    return row


def sweep(grid: list[ExperimentConfig], out_dir: Path | str) -> list[AggregateRow]:
    """Run every experiment in the grid, skipping finished ones; never aborts."""
    out_dir = Path(out_dir)
    rows = []
    for i, config in enumerate(grid):
        t0 = time.monotonic()
        row = run_experiment(config, out_dir)
        dt = time.monotonic() - t0
        status = "ok" if row.error is None else f"FAILED ({row.error})"
        print(f"[{i + 1}/{len(grid)}] {config.run_id()}: {status} in {dt:.1f}s", flush=True)
        rows.append(row)
    return rows


def collect_rows(out_dir: Path | str) -> list[AggregateRow]:
    """Load every aggregate row under a sweep output directory."""
    rows = []
    for agg in sorted(Path(out_dir).glob(f"*/{AGGREGATE_FILE}")):
        rows.append(AggregateRow.from_wire(json.loads(agg.read_text())))
    return rows
