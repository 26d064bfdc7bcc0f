"""Stats sink: receives receipt records over TCP, samples a server's CPU,
and persists everything a run produces as plain files.

Wire format in: one JSON receipt per line. On-disk layout per run directory:

    receipts.ndjson   one receipt per line
    cpu.ndjson        one cpu sample per line
    config.json       experiment configuration
    counters.json     server counters snapshot
"""
from __future__ import annotations

import asyncio
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import ReceiptRecord
from .util import now_ms, print_ready, print_summary

RECEIPTS_FILE = "receipts.ndjson"
CPU_FILE = "cpu.ndjson"
CONFIG_FILE = "config.json"
COUNTERS_FILE = "counters.json"


class ProcessGone(RuntimeError):
    """The sampled process no longer exists."""


@dataclass(frozen=True)
class CpuSample:
    ts: int
    process_cpu_percent: float
    process_rss_bytes: int

    def to_wire(self) -> dict:
        return {
            "ts": self.ts,
            "processCpuPercent": self.process_cpu_percent,
            "processRssBytes": self.process_rss_bytes,
        }

    @staticmethod
    def from_wire(obj: dict) -> "CpuSample":
        return CpuSample(
            ts=int(obj["ts"]),
            process_cpu_percent=float(obj["processCpuPercent"]),
            process_rss_bytes=int(obj["processRssBytes"]),
        )


class CpuSource:
    """Cumulative on-CPU time and RSS for one pid.

    Sums nanosecond schedstat counters across the process's threads; the
    tick-based accounting in /proc/pid/stat is 10 ms per tick, far too
    coarse to compare quiet servers. Falls back to psutil off Linux.
    """

    def __init__(self, pid: int):
        self.pid = pid
        self._task_dir = Path(f"/proc/{pid}/task")
        self._statm = Path(f"/proc/{pid}/statm")
        self._page = os.sysconf("SC_PAGE_SIZE")
        self._psutil_proc = None
        if not self._task_dir.exists():
            import psutil

            try:
                self._psutil_proc = psutil.Process(pid)
            except psutil.NoSuchProcess as e:
                raise ProcessGone(f"pid {pid}") from e

    def read(self) -> tuple[int, int]:
        """Returns (cpu_ns_total, rss_bytes)."""
        if self._psutil_proc is not None:
            return self._read_psutil()
        try:
            # an unreaped child keeps its /proc entry; treat zombies as gone
            stat = Path(f"/proc/{self.pid}/stat").read_text()
            if stat.rsplit(")", 1)[1].split()[0] in ("Z", "X"):
                raise ProcessGone(f"pid {self.pid} is a zombie")
            total_ns = 0
            for tid in os.listdir(self._task_dir):
                try:
                    text = (self._task_dir / tid / "schedstat").read_text()
                    total_ns += int(text.split()[0])
                except (FileNotFoundError, ProcessLookupError):
                    continue  # thread exited between listdir and read
            rss_pages = int(self._statm.read_text().split()[1])
        except (FileNotFoundError, ProcessLookupError) as e:
            raise ProcessGone(f"pid {self.pid}") from e
        return total_ns, rss_pages * self._page

    def _read_psutil(self) -> tuple[int, int]:
        import psutil

        try:
            times = self._psutil_proc.cpu_times()
            rss = self._psutil_proc.memory_info().rss
        except psutil.NoSuchProcess as e:
            raise ProcessGone(f"pid {self.pid}") from e
        return int((times.user + times.system) * 1_000_000_000), rss


def cpu_percent_between(prev_ns: int, cur_ns: int, prev_ts: int, cur_ts: int) -> float:
    """Share of one core used between two cumulative readings, in percent."""
    wall_ns = (cur_ts - prev_ts) * 1_000_000
    if wall_ns <= 0:
        return 0.0
    return max(0.0, (cur_ns - prev_ns) / wall_ns * 100.0)


async def sample_cpu(
    source: CpuSource,
    period_ms: int,
    emit,
    stop: asyncio.Event,
) -> int:
    """Poll the source until stopped or the process dies; returns sample count."""
    count = 0
    try:
        prev_ns, _ = source.read()
    except ProcessGone:
        return 0
    prev_ts = now_ms()
    while not stop.is_set():
        try:
            await asyncio.wait_for(stop.wait(), timeout=period_ms / 1000.0)
            break
        except asyncio.TimeoutError:
            pass
        try:
            cur_ns, rss = source.read()
        except ProcessGone:
            break
        cur_ts = now_ms()
        emit(CpuSample(cur_ts, round(cpu_percent_between(prev_ns, cur_ns, prev_ts, cur_ts), 3), rss))
        count += 1
        prev_ns, prev_ts = cur_ns, cur_ts
    return count


# ---------------------------------------------------------------------------
# run dataset on disk


@dataclass
class RunDataset:
    config: dict
    receipts: list[ReceiptRecord] = field(default_factory=list)
    cpu_samples: list[CpuSample] = field(default_factory=list)
    counters: dict = field(default_factory=dict)


def persist(dataset: RunDataset, run_dir: Path | str) -> None:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / RECEIPTS_FILE, "w") as f:
        for r in dataset.receipts:
            f.write(json.dumps(r.to_wire(), separators=(",", ":")) + "\n")
    with open(run_dir / CPU_FILE, "w") as f:
        for s in dataset.cpu_samples:
            f.write(json.dumps(s.to_wire(), separators=(",", ":")) + "\n")
    (run_dir / CONFIG_FILE).write_text(json.dumps(dataset.config, indent=2) + "\n")
    (run_dir / COUNTERS_FILE).write_text(json.dumps(dataset.counters, indent=2) + "\n")


def load_run(run_dir: Path | str) -> RunDataset:
    run_dir = Path(run_dir)
    receipts = []
    with open(run_dir / RECEIPTS_FILE) as f:
        for line in f:
            if line.strip():
                receipts.append(ReceiptRecord.from_wire(json.loads(line)))
    cpu_samples = []
    with open(run_dir / CPU_FILE) as f:
        for line in f:
            if line.strip():
                cpu_samples.append(CpuSample.from_wire(json.loads(line)))
    config = json.loads((run_dir / CONFIG_FILE).read_text())
    counters = json.loads((run_dir / COUNTERS_FILE).read_text())
    return RunDataset(config=config, receipts=receipts, cpu_samples=cpu_samples, counters=counters)


# ---------------------------------------------------------------------------
# the sink process


class SinkState:
    def __init__(self, out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        self.out_dir = out_dir
        self.receipts_f = open(out_dir / RECEIPTS_FILE, "a", buffering=1)
        self.cpu_f = open(out_dir / CPU_FILE, "a", buffering=1)
        self.received = 0
        self.malformed = 0
        self.cpu_samples = 0
        self.open_connections = 0

    def ingest_line(self, line: bytes) -> bool:
        """One receipt line in, normalized line out. False when malformed."""
        try:
            record = ReceiptRecord.from_wire(json.loads(line))
        except (json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError, ValueError):
            self.malformed += 1
            return False
        self.receipts_f.write(json.dumps(record.to_wire(), separators=(",", ":")) + "\n")
        self.received += 1
        return True

    def emit_cpu(self, sample: CpuSample) -> None:
        self.cpu_f.write(json.dumps(sample.to_wire(), separators=(",", ":")) + "\n")
        self.cpu_samples += 1

    def close(self) -> None:
        self.receipts_f.close()
        self.cpu_f.close()

    def summary(self) -> dict:
        return {"receipts": self.received, "malformed": self.malformed, "cpuSamples": self.cpu_samples}


async def _handle_connection(state: SinkState, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
    state.open_connections += 1
    try:
        while True:
            line = await reader.readline()
            if not line:
                break
            if line.strip():
                state.ingest_line(line)
    finally:
        state.open_connections -= 1
        writer.close()


async def _resolve_pid(pid: int | None, pid_file: str | None, stop: asyncio.Event) -> int | None:
    if pid is not None:
        return pid
    if pid_file is None:
        return None
    # the supervisor writes this shortly after we start; poll until it lands
    path = Path(pid_file)
    while not stop.is_set():
        if path.exists():
            text = path.read_text().strip()
            if text:
                return int(text)
        await asyncio.sleep(0.05)
    return None


async def serve(
    stop: asyncio.Event,
    out_dir: Path | str,
    host: str = "127.0.0.1",
    port: int = 0,
    cpu_pid: int | None = None,
    cpu_pid_file: str | None = None,
    cpu_period_ms: int = 500,
    state: SinkState | None = None,
) -> int:
    state = state or SinkState(Path(out_dir))
    server = await asyncio.start_server(
        lambda r, w: _handle_connection(state, r, w), host, port
    )
    bound = server.sockets[0].getsockname()[1]
    print_ready(bound)

    sampler_task = None

    async def sampler():
        pid = await _resolve_pid(cpu_pid, cpu_pid_file, stop)
        if pid is None:
            return
        try:
            source = CpuSource(pid)
        except ProcessGone:
            return
        await sample_cpu(source, cpu_period_ms, state.emit_cpu, stop)

    if cpu_pid is not None or cpu_pid_file is not None:
        sampler_task = asyncio.create_task(sampler())

    await stop.wait()
    server.close()
    await server.wait_closed()
    # the swarm closes its stream before exiting; give stragglers a moment
    deadline = asyncio.get_running_loop().time() + 3.0
    while state.open_connections > 0 and asyncio.get_running_loop().time() < deadline:
        await asyncio.sleep(0.05)
    if sampler_task is not None:
        await sampler_task
    state.close()
    print_summary(state.summary())
    return 0
