"""Sink ingest, persistence round trip, and CPU sampling accuracy."""
from __future__ import annotations

import asyncio
import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

from pushpull.metrics import ReceiptRecord
from pushpull.sink import (
    CpuSample,
    CpuSource,
    ProcessGone,
    RunDataset,
    SinkState,
    cpu_percent_between,
    load_run,
    persist,
    sample_cpu,
    serve,
)


def receipt_line(client: int = 0, item: int = 1) -> bytes:
    rec = ReceiptRecord("r1", client, "push", item, 1000, 1100)
    return (json.dumps(rec.to_wire()) + "\n").encode()


# ---------------------------------------------------------------------------
# ingest


def test_ingest_valid_line(tmp_path):
    state = SinkState(tmp_path)
    assert state.ingest_line(receipt_line()) is True
    state.close()
    lines = (tmp_path / "receipts.ndjson").read_text().splitlines()
    assert len(lines) == 1
    back = ReceiptRecord.from_wire(json.loads(lines[0]))
    assert back.trip_time_ms == 100


@pytest.mark.parametrize(
    "line",
    [b"not json\n", b"{}\n", b'{"runId": "r", "clientIdx": "NaN?"}\n', b'[1,2]\n'],
)
def test_ingest_malformed_counts_and_skips(tmp_path, line):
    state = SinkState(tmp_path)
    assert state.ingest_line(line) is False
    assert state.malformed == 1
    assert state.received == 0
    state.close()
    assert (tmp_path / "receipts.ndjson").read_text() == ""


def test_ingest_hundred_thousand_lines(tmp_path):
    state = SinkState(tmp_path)
    t0 = time.monotonic()
    for i in range(100_000):
        state.ingest_line(receipt_line(client=i % 50, item=i))
    elapsed = time.monotonic() - t0
    state.close()
    assert state.received == 100_000
    assert state.malformed == 0
    assert sum(1 for _ in open(tmp_path / "receipts.ndjson")) == 100_000
    assert elapsed < 30, f"ingest too slow: {elapsed:.1f}s"


def test_sink_server_end_to_end(tmp_path, capsys):
    async def body():
        stop = asyncio.Event()
        state = SinkState(tmp_path)
        task = asyncio.create_task(serve(stop, tmp_path, port=0, state=state))
        await asyncio.sleep(0.1)
        port = int(capsys.readouterr().out.strip().split("port=")[1])

        reader, writer = await asyncio.open_connection("127.0.0.1", port)
        for i in range(100):
            writer.write(receipt_line(client=i % 7, item=i))
        writer.write(b"garbage\n")
        await writer.drain()
        writer.close()
        await writer.wait_closed()
        await asyncio.sleep(0.1)
        stop.set()
        assert await task == 0
        return state

    state = asyncio.run(body())
    assert state.received == 100
    assert state.malformed == 1
    out = capsys.readouterr().out
    summary = json.loads(out.split("SUMMARY ", 1)[1])
    assert summary["receipts"] == 100 and summary["malformed"] == 1


def test_sink_accepts_multiple_connections(tmp_path, capsys):
    async def body():
        stop = asyncio.Event()
        state = SinkState(tmp_path)
        task = asyncio.create_task(serve(stop, tmp_path, port=0, state=state))
        await asyncio.sleep(0.1)
        port = int(capsys.readouterr().out.strip().split("port=")[1])

        async def feed(n):
            reader, writer = await asyncio.open_connection("127.0.0.1", port)
            for i in range(n):
                writer.write(receipt_line(item=i))
            await writer.drain()
            writer.close()
            await writer.wait_closed()

        await asyncio.gather(feed(10), feed(20), feed(30))
        await asyncio.sleep(0.1)
        stop.set()
        await task
        return state

    state = asyncio.run(body())
    assert state.received == 60


# ---------------------------------------------------------------------------
# persistence


def test_persist_load_round_trip(tmp_path):
    dataset = RunDataset(
        config={"mode": "push", "clients": 3, "publishIntervalMs": 500, "pullIntervalMs": 150,
                "totalMessages": 10, "longPollTimeoutMs": 4500, "timeScale": 10, "seed": 7},
        receipts=[ReceiptRecord("r1", c, "push", i, 1000 + i, 1080 + i) for c in range(3) for i in range(10)],
        cpu_samples=[CpuSample(1000 + 100 * k, 12.5 + k, 30_000_000 + k) for k in range(5)],
        counters={"handshakes": 3, "connects": 40, "subscribes": 3, "publishes": 10, "deliversSent": 30},
    )
    persist(dataset, tmp_path / "run1")
    back = load_run(tmp_path / "run1")
    assert back.config == dataset.config
    assert back.receipts == dataset.receipts
    assert back.cpu_samples == dataset.cpu_samples
    assert back.counters == dataset.counters
    names = sorted(p.name for p in (tmp_path / "run1").iterdir())
    assert names == ["config.json", "counters.json", "cpu.ndjson", "receipts.ndjson"]


def test_streamed_files_load_like_persisted_ones(tmp_path):
    # the sink process appends line by line; loader must not care
    state = SinkState(tmp_path)
    for i in range(5):
        state.ingest_line(receipt_line(item=i))
    state.emit_cpu(CpuSample(123, 4.5, 1000))
    state.close()
    (tmp_path / "config.json").write_text('{"mode": "pull"}')
    (tmp_path / "counters.json").write_text('{"pulls": 5}')
    back = load_run(tmp_path)
    assert len(back.receipts) == 5
    assert back.cpu_samples == [CpuSample(123, 4.5, 1000)]
    assert back.counters == {"pulls": 5}


# ---------------------------------------------------------------------------
# cpu sampling


def test_cpu_percent_math():
    # 250ms of cpu over 500ms of wall is 50%
    assert cpu_percent_between(0, 250_000_000, 1000, 1500) == pytest.approx(50.0)
    assert cpu_percent_between(5, 5, 1000, 2000) == 0.0
    assert cpu_percent_between(10, 5, 1000, 2000) == 0.0  # counter went backwards: clamp
    assert cpu_percent_between(0, 10, 1000, 1000) == 0.0  # zero wall: no division


def spawn(code: str) -> subprocess.Popen:
    return subprocess.Popen([sys.executable, "-c", code])


def test_cpu_source_tracks_a_spinner():
    proc = spawn("while True: pass")
    try:
        time.sleep(0.1)
        src = CpuSource(proc.pid)
        ns0, rss0 = src.read()
        time.sleep(0.5)
        ns1, rss1 = src.read()
        pct = (ns1 - ns0) / (0.5 * 1e9) * 100
        assert 60 <= pct <= 115, pct  # busy loop pins its core
        assert rss1 > 1_000_000
    finally:
        proc.kill()
        proc.wait()


def test_cpu_source_idle_process_is_quiet():
    proc = spawn("import time; time.sleep(30)")
    try:
        time.sleep(0.1)
        src = CpuSource(proc.pid)
        ns0, _ = src.read()
        time.sleep(0.5)
        ns1, _ = src.read()
        pct = (ns1 - ns0) / (0.5 * 1e9) * 100
        assert pct < 5, pct
    finally:
        proc.kill()
        proc.wait()


def test_cpu_source_dead_pid_raises():
    proc = spawn("pass")
    proc.wait()
    with pytest.raises(ProcessGone):
        CpuSource(proc.pid).read()


def test_sampler_emits_and_stops_when_process_dies():
    proc = spawn("import time; time.sleep(0.6)")

    async def body():
        samples: list[CpuSample] = []
        stop = asyncio.Event()
        src = CpuSource(proc.pid)
        n = await sample_cpu(src, 100, samples.append, stop)
        return n, samples

    try:
        n, samples = asyncio.run(body())
        # ran for ~600ms at 100ms period, then the subject exited
        assert 3 <= n <= 8, n
        assert all(s.process_rss_bytes > 0 for s in samples)
        assert all(0.0 <= s.process_cpu_percent <= 120.0 for s in samples)
    finally:
        proc.kill()
        proc.wait()


def test_sampler_respects_stop_event():
    proc = spawn("import time; time.sleep(10)")

    async def body():
        samples = []
        stop = asyncio.Event()

        async def stopper():
            await asyncio.sleep(0.35)
            stop.set()

        task = asyncio.create_task(stopper())
        n = await sample_cpu(CpuSource(proc.pid), 100, samples.append, stop)
        await task
        return n

    try:
        t0 = time.monotonic()
        n = asyncio.run(body())
        assert time.monotonic() - t0 < 1.0
        assert 2 <= n <= 5
    finally:
        proc.kill()
        proc.wait()
