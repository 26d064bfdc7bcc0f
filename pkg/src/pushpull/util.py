"""Small shared helpers: wall-clock ms, server bootstrap, readiness lines."""
from __future__ import annotations

import asyncio
import json
import signal
import sys
import time
from typing import Any

from aiohttp import web


def now_ms() -> int:
    return time.time_ns() // 1_000_000


def print_ready(port: int) -> None:
    """Handshake line a supervisor greps for once the socket is bound."""
    print(f"READY port={port}", flush=True)


def print_summary(payload: dict[str, Any]) -> None:
    print("SUMMARY " + json.dumps(payload, separators=(",", ":")), flush=True, file=sys.stdout)


async def start_site(app: web.Application, host: str, port: int) -> tuple[web.AppRunner, int]:
    """Bind the app; returns the runner and the actual port (port 0 works)."""
    runner = web.AppRunner(app, access_log=None, shutdown_timeout=5.0)
    await runner.setup()
    site = web.TCPSite(runner, host, port)
    await site.start()
    bound = site._server.sockets[0].getsockname()[1]  # noqa: SLF001 - aiohttp keeps this private
    return runner, bound


def run_until_sigterm(main: Any) -> int:
    """Drive an async server entry point until SIGTERM/SIGINT.

    `main` is an async callable taking a stop event; it owns setup, the READY
    line, and the exit summary.
    """

    async def wrapper() -> int:
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGTERM, signal.SIGINT):
            loop.add_signal_handler(sig, stop.set)
        return await main(stop)

    return asyncio.run(wrapper())
