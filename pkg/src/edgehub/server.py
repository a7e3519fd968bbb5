"""Network services: the hub (gateway stream + REST) and the cloud stub.

Everything that touches the hub runs on one asyncio loop, so gateway frames,
REST readings and scheduled cycles are applied one at a time. Only the sync
flusher runs in a worker thread; the queue it shares is locked.
"""

from __future__ import annotations

import asyncio
import json
import logging
import random
import threading

import uvicorn
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from websockets.asyncio.server import serve as ws_serve
from websockets.exceptions import ConnectionClosed

from .config import HubConfig, SimClock, parse_addr
from .hub import Hub
from .sync import Backoff, CloudStub, HttpUplink, Uplink, flush

log = logging.getLogger(__name__)


def create_hub_app(hub: Hub) -> FastAPI:
    app = FastAPI(title="edgehub", version="0.1.0")

    # async handlers run on the loop thread, keeping the hub single-writer
    @app.post("/api/v1/telemetry")
    async def telemetry(request: Request):
        status, body = hub.ingest_reading(await request.body())
        return JSONResponse(body, status_code=status)

    @app.get("/healthz")
    async def healthz():
        return hub.health()

    if isinstance(hub.clock, SimClock):

        @app.post("/api/v1/clock")
        async def set_clock(request: Request):
            try:
                now = int(json.loads(await request.body())["now"])
                hub.clock.set(now)
            except (ValueError, KeyError, TypeError) as exc:
                return JSONResponse({"ok": False, "error": str(exc)}, status_code=400)
            cycles = hub.tick()
            return {"ok": True, "now": now, "cycles": [c.cycle.cycle_end for c in cycles]}

    return app


def create_stub_app(stub: CloudStub) -> FastAPI:
    app = FastAPI(title="edgehub cloud stub", version="0.1.0")

    @app.post("/api/v1/batches")
    async def batches(request: Request):
        status, body = stub.receive(await request.body())
        return JSONResponse(body, status_code=status)

    return app


async def run_schedule(hub: Hub, stop: asyncio.Event) -> None:
    """Close cycles at every boundary until ``stop`` is set.

    On a simulated clock cycles are driven by clock updates instead; the loop
    then only polls.
    """
    while not stop.is_set():
        hub.tick()
        wait_s = max(0.0, (hub.next_boundary - hub.clock()) / 1000)
        try:
            await asyncio.wait_for(stop.wait(), timeout=min(wait_s, 1.0))
        except asyncio.TimeoutError:
            pass


class HubService:
    """The hub with its listeners. ``gateway_port``/``rest_port`` are set once ``ready``."""

    def __init__(self, config: HubConfig, *, hub: Hub | None = None, uplink: Uplink | None = None):
        self.config = config
        self.hub = hub or Hub(config)
        if uplink is None and config.cloud_url:
            uplink = HttpUplink(config.cloud_url)
        self.uplink = uplink
        self.ready = asyncio.Event()
        self.gateway_port: int | None = None
        self.rest_port: int | None = None
        self._flush_stop = threading.Event()

    async def _gateway(self, ws) -> None:
        try:
            async for message in ws:
                ack = self.hub.handle_gateway_message(message)
                await ws.send(json.dumps(ack, separators=(",", ":")))
        except ConnectionClosed:
            pass

    async def _flusher(self, stop: asyncio.Event) -> None:
        rng = random.Random()
        while not stop.is_set():
            if len(self.hub.queue):
                report = await asyncio.to_thread(
                    flush, self.hub.queue, self.uplink, backoff=Backoff(), rng=rng, sleep=self._flush_stop.wait
                )
                if report.requests:
                    log.info("sync flush: %s", report)
            try:
                await asyncio.wait_for(stop.wait(), timeout=self.config.flush_interval_s)
            except asyncio.TimeoutError:
                pass

    async def run(self, stop: asyncio.Event | None = None) -> None:
        stop = stop or asyncio.Event()
        if not self.hub.started:
            self.hub.start()
        gw_host, gw_port = parse_addr(self.config.gateway_listen)
        rest_host, rest_port = parse_addr(self.config.rest_listen)
        app = create_hub_app(self.hub)
        server = uvicorn.Server(uvicorn.Config(app, host=rest_host, port=rest_port, log_level="warning", lifespan="off"))
        async with ws_serve(self._gateway, gw_host, gw_port) as ws_server:
            self.gateway_port = next(iter(ws_server.sockets)).getsockname()[1]
            rest_task = asyncio.create_task(server.serve())
            while not server.started:
                if rest_task.done():
                    rest_task.result()
                await asyncio.sleep(0.01)
            self.rest_port = server.servers[0].sockets[0].getsockname()[1]
            tasks = [asyncio.create_task(run_schedule(self.hub, stop))]
            if self.uplink is not None:
                tasks.append(asyncio.create_task(self._flusher(stop)))
            self.ready.set()
            log.info("hub listening: gateway :%d, rest :%d", self.gateway_port, self.rest_port)
            try:
                await stop.wait()
            finally:
                self._flush_stop.set()
                server.should_exit = True
                await rest_task
                for t in tasks:
                    await t
                self.hub.close()


class StubService:
    """Cloud stub HTTP listener; ``port`` is set once ``ready``."""

    def __init__(self, stub: CloudStub, listen: str):
        self.stub = stub
        self.listen = listen
        self.ready = asyncio.Event()
        self.port: int | None = None

    async def run(self, stop: asyncio.Event | None = None) -> None:
        host, port = parse_addr(self.listen)
        config = uvicorn.Config(create_stub_app(self.stub), host=host, port=port, log_level="warning", lifespan="off")
        server = uvicorn.Server(config)
        task = asyncio.create_task(server.serve())
        while not server.started:
            if task.done():
                task.result()
            await asyncio.sleep(0.01)
        self.port = server.servers[0].sockets[0].getsockname()[1]
        self.ready.set()
        if stop is None:
            await task
            return
        await stop.wait()
        server.should_exit = True
        await task
