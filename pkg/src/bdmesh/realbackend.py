"""Real-network backend: the same state machines over asyncio sockets.

The coordinator core and the node agent are written against small
transport ducks; this module implements those ducks with one asyncio
loop, a TCP JSON-lines control connection, and non-blocking UDP
sockets driven by add_reader.  Nothing protocol-level lives here.

Everything runs on the loop thread, so the synchronous callback style
the state machines use is safe as is.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import random
import socket
import sys
import time
from typing import Callable, Iterable, Optional

from .agent import NodeAgent
from .netsim import MAX_CONTROL_LINE
from .rendezvous import Coordinator, DEFAULT_OBSERVER_PORTS
from .securelink import Identity

log = logging.getLogger("bdmesh.real")

CONNECT_ATTEMPTS = 3
CONNECT_RETRY_S = 1.0
INTRODUCE_RETRY_S = 0.5
INTRODUCE_ATTEMPTS = 20

EXIT_OK = 0
EXIT_SIM_FAILURE = 3
EXIT_BIND_FAILURE = 5
EXIT_COORD_UNREACHABLE = 6
EXIT_IDENTITY_CONFLICT = 7

__all__ = [
    "AsyncioTransport", "AsyncioUdpSocket", "TcpLineChannel",
    "CoordinatorServer", "NodeClient",
    "run_coordinator_cli", "run_node_cli",
]


class AsyncioUdpSocket:
    """Non-blocking UDP socket satisfying the simulator socket duck."""

    def __init__(self, loop: asyncio.AbstractEventLoop, handler, port: int = 0):
        self._loop = loop
        self._handler = handler
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.setblocking(False)
        try:
            self._sock.bind(("0.0.0.0", port))
        except OSError:
            self._sock.close()
            raise
        self._closed = False
        loop.add_reader(self._sock.fileno(), self._read_ready)

    @property
    def local_port(self) -> int:
        return self._sock.getsockname()[1]

    def _read_ready(self) -> None:
        while True:
            try:
                data, src = self._sock.recvfrom(65535)
            except (BlockingIOError, InterruptedError):
                return
            except OSError:
                return
            self._handler(data, (src[0], src[1]), self)

    def send(self, dst, payload: bytes) -> None:
        if self._closed:
            return
        try:
            self._sock.sendto(payload, dst)
        except (BlockingIOError, OSError):
            pass  # UDP: drop on transient error, like a congested wire

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._loop.remove_reader(self._sock.fileno())
        self._sock.close()


class _TimerHandleAdapter:
    __slots__ = ("_handle",)

    def __init__(self, handle: asyncio.TimerHandle):
        self._handle = handle

    def cancel(self) -> None:
        self._handle.cancel()


class AsyncioTransport:
    """Wall-clock twin of the simulator's host transport."""

    def __init__(self, loop: asyncio.AbstractEventLoop,
                 rng: Optional[random.Random] = None):
        self._loop = loop
        self.rng = rng or random.Random()

    def now_us(self) -> int:
        return time.monotonic_ns() // 1000

    def call_later(self, delay_us: int, fn: Callable[[], None]) -> _TimerHandleAdapter:
        return _TimerHandleAdapter(self._loop.call_later(delay_us / 1e6, fn))

    def open_socket(self, handler, port: int = 0) -> AsyncioUdpSocket:
        return AsyncioUdpSocket(self._loop, handler, port)


class TcpLineChannel:
    """One JSON-lines control connection over a TCP stream.

    Works for both directions: the coordinator wraps accepted
    connections, the node wraps its outbound one.  Reading happens in
    an owner-supplied task via drain_lines().
    """

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self._reader = reader
        self._writer = writer
        peername = writer.get_extra_info("peername") or ("0.0.0.0", 0)
        self.peer_observed = (peername[0], peername[1])
        self.on_line: Optional[Callable[[dict], None]] = None
        self.on_close: Optional[Callable[[], None]] = None
        self.closed = False

    @property
    def local_address(self) -> tuple[str, int]:
        name = self._writer.get_extra_info("sockname") or ("0.0.0.0", 0)
        return (name[0], name[1])

    def send(self, msg: dict) -> None:
        if self.closed:
            return
        try:
            self._writer.write(json.dumps(msg, separators=(",", ":")).encode() + b"\n")
        except (ConnectionError, RuntimeError):
            self.close()

    async def drain_lines(self) -> None:
        """Read lines until EOF, dispatching each parsed object."""
        try:
            while True:
                line = await self._reader.readline()
                if not line:
                    break
                if len(line) > MAX_CONTROL_LINE:
                    log.warning("dropping oversized control line (%d bytes)", len(line))
                    continue
                try:
                    msg = json.loads(line)
                except ValueError:
                    log.warning("dropping unparseable control line")
                    continue
                if self.on_line is not None:
                    self.on_line(msg)
        except (ConnectionError, asyncio.IncompleteReadError, ValueError):
            pass  # ValueError: a line overran the stream limit
        finally:
            self.close()

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            self._writer.close()
        except RuntimeError:
            pass
        if self.on_close is not None:
            self.on_close()


class _ObserverProtocol(asyncio.DatagramProtocol):
    def __init__(self, coordinator: Coordinator):
        self._coordinator = coordinator
        self._transport = None

    def connection_made(self, transport) -> None:
        self._transport = transport

    def datagram_received(self, data: bytes, addr) -> None:
        reply = self._coordinator.observe_datagram(data, (addr[0], addr[1]))
        if reply is not None and self._transport is not None:
            self._transport.sendto(reply, addr)


class CoordinatorServer:
    """Rendezvous service: TCP control plus two UDP observer ports."""

    def __init__(self, host: str = "0.0.0.0", port: int = 4500,
                 observer_ports: Iterable[int] = DEFAULT_OBSERVER_PORTS,
                 punch: Optional[dict] = None):
        self.host = host
        self.port = port
        self.observer_ports = tuple(observer_ports)
        self.core = Coordinator(punch=punch)
        self._server: Optional[asyncio.AbstractServer] = None
        self._observers: list = []
        self._tasks: set = set()

    async def start(self) -> None:
        loop = asyncio.get_running_loop()
        self._server = await asyncio.start_server(
            self._on_connection, self.host, self.port, limit=MAX_CONTROL_LINE * 2)
        for oport in self.observer_ports:
            transport, _ = await loop.create_datagram_endpoint(
                lambda: _ObserverProtocol(self.core),
                local_addr=(self.host, oport))
            self._observers.append(transport)
        log.info("coordinator on %s:%d (observers %s)",
                 self.host, self.port, ",".join(map(str, self.observer_ports)))

    async def _on_connection(self, reader: asyncio.StreamReader,
                             writer: asyncio.StreamWriter) -> None:
        channel = TcpLineChannel(reader, writer)
        self.core.attach(channel)
        task = asyncio.current_task()
        if task is not None:
            self._tasks.add(task)
            task.add_done_callback(self._tasks.discard)
        await channel.drain_lines()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for transport in self._observers:
            transport.close()
        for task in list(self._tasks):
            task.cancel()

    async def serve_forever(self) -> None:
        assert self._server is not None
        await self._server.serve_forever()


def _load_identity(key_path: Optional[str]) -> Identity:
    """Read a 32-byte hex seed, creating the file when absent."""
    if not key_path:
        return Identity.generate()
    if os.path.exists(key_path):
        with open(key_path, "r", encoding="utf-8") as f:
            seed = bytes.fromhex(f.read().strip())
        if len(seed) != 32:
            raise ValueError(f"{key_path} must hold a 64-char hex seed")
        return Identity.from_seed(seed)
    seed = os.urandom(32)
    fd = os.open(key_path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        f.write(seed.hex() + "\n")
    return Identity.from_seed(seed)


def _parse_hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


class NodeClient:
    """One real-network node: control channel, agent, echo service.

    Every inbound payload chunk starting with b"ping:" is answered on
    the same link with b"pong:" plus the original body, giving --once
    runs something observable to wait for.
    """

    def __init__(self, coord: str, node_id: str,
                 identity: Optional[Identity] = None,
                 connect: Iterable[str] = (), encrypted: bool = True,
                 observer_ports: Iterable[int] = DEFAULT_OBSERVER_PORTS):
        self.coord_host, self.coord_port = _parse_hostport(coord)
        self.node_id = node_id
        self.identity = identity or Identity.generate()
        self.connect_peers = list(connect)
        self.encrypted = encrypted
        self.observer_ports = tuple(observer_ports)
        self.agent: Optional[NodeAgent] = None
        self.channel: Optional[TcpLineChannel] = None
        self.exit_code: Optional[int] = None
        self.events: list[dict] = []
        self._echoed: set[str] = set()
        self._pinged: set[str] = set()
        self._reader_task = None
        self._wake = asyncio.Event()

    async def start(self) -> int:
        """Connect, register, link; returns 0 or the fatal exit code."""
        loop = asyncio.get_running_loop()
        for attempt in range(1, CONNECT_ATTEMPTS + 1):
            try:
                reader, writer = await asyncio.open_connection(
                    self.coord_host, self.coord_port, limit=MAX_CONTROL_LINE * 2)
                break
            except OSError as e:
                log.warning("coordinator connect %d/%d failed: %s",
                            attempt, CONNECT_ATTEMPTS, e)
                if attempt == CONNECT_ATTEMPTS:
                    print(f"cannot reach coordinator at "
                          f"{self.coord_host}:{self.coord_port}", file=sys.stderr)
                    return EXIT_COORD_UNREACHABLE
                await asyncio.sleep(CONNECT_RETRY_S)
        self.channel = TcpLineChannel(reader, writer)
        transport = AsyncioTransport(loop)
        coord_ip = writer.get_extra_info("peername")[0]
        observers = [(coord_ip, p) for p in self.observer_ports]
        try:
            self.agent = NodeAgent(
                self.node_id, transport, self.channel,
                local_ip=self.channel.local_address[0],
                identity=self.identity, default_encrypted=self.encrypted,
                observers=observers, on_event=self._on_event)
            self.agent.start()
        except OSError as e:
            print(f"cannot bind a local socket: {e}", file=sys.stderr)
            return EXIT_BIND_FAILURE
        self.channel.on_close = self._on_channel_closed
        self._reader_task = asyncio.ensure_future(self.channel.drain_lines())
        return EXIT_OK

    def _on_channel_closed(self) -> None:
        if self.exit_code is None and self.agent is not None \
                and self.agent.fatal_error != "identity-conflict":
            self.exit_code = EXIT_COORD_UNREACHABLE
        self._wake.set()

    def _on_event(self, event: dict) -> None:
        self.events.append(event)
        log.debug("node %s event %s", self.node_id, event)
        if event["event"] == "coordinator_error" and \
                event.get("error") == "identity-conflict":
            self.exit_code = EXIT_IDENTITY_CONFLICT
        if event["event"] == "link_up":
            link = self.agent.links[event["peer"]]
            link.on_payload = lambda data, p=event["peer"]: self._on_payload(p, data)
            if event["peer"] in self.connect_peers:
                self._send_ping(event["peer"])
        self._wake.set()

    def _send_ping(self, peer: str) -> None:
        if peer in self._pinged:
            return
        self._pinged.add(peer)
        self.agent.links[peer].send(b"ping:" + self.node_id.encode())

    def _on_payload(self, peer: str, data: bytes) -> None:
        if data.startswith(b"ping:"):
            self.agent.links[peer].send(b"pong:" + data[5:])
        elif data.startswith(b"pong:"):
            self._echoed.add(peer)
            self._wake.set()

    async def wait_ready(self, timeout_s: float = 15.0) -> bool:
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            if self.exit_code is not None:
                return False
            if self.agent is not None and self.agent.ready:
                return True
            self._wake.clear()
            try:
                await asyncio.wait_for(self._wake.wait(),
                                       max(0.05, deadline - time.monotonic()))
            except asyncio.TimeoutError:
                pass
        return self.agent is not None and self.agent.ready

    async def link_all(self, timeout_s: float = 60.0) -> bool:
        """Request and wait for an echoed link to every --connect peer."""
        deadline = time.monotonic() + timeout_s
        pending = [p for p in self.connect_peers]
        attempts = 0
        while time.monotonic() < deadline and self.exit_code is None:
            still = [p for p in pending if p not in self.agent.links]
            if still and attempts < INTRODUCE_ATTEMPTS:
                attempts += 1
                for p in still:
                    self.agent.connect(p)
            if all(p in self._echoed for p in self.connect_peers):
                return True
            self._wake.clear()
            try:
                await asyncio.wait_for(self._wake.wait(), INTRODUCE_RETRY_S)
            except asyncio.TimeoutError:
                pass
        return all(p in self._echoed for p in self.connect_peers)

    async def run_forever(self) -> None:
        while self.exit_code is None:
            self._wake.clear()
            try:
                await asyncio.wait_for(self._wake.wait(), 3600.0)
            except asyncio.TimeoutError:
                pass

    async def close(self) -> None:
        if self._reader_task is not None:
            self._reader_task.cancel()
        if self.channel is not None:
            self.channel.close()


async def _coordinator_main(host: str, port: int,
                            observer_ports: tuple[int, int]) -> int:
    server = CoordinatorServer(host, port, observer_ports)
    try:
        await server.start()
    except OSError as e:
        print(f"cannot bind {host}:{port} (or an observer port): {e}",
              file=sys.stderr)
        return EXIT_BIND_FAILURE
    try:
        await server.serve_forever()
    except asyncio.CancelledError:
        pass
    finally:
        await server.close()
    return EXIT_OK


def run_coordinator_cli(host: str, port: int,
                        observer_ports: tuple[int, int]) -> int:
    try:
        return asyncio.run(_coordinator_main(host, port, observer_ports))
    except KeyboardInterrupt:
        print("coordinator stopped", file=sys.stderr)
        return EXIT_OK


async def _node_main(coord: str, node_id: str, key_path: Optional[str],
                     connect: list[str], once: bool, plain: bool) -> int:
    try:
        identity = _load_identity(key_path)
    except (OSError, ValueError) as e:
        print(f"cannot load key: {e}", file=sys.stderr)
        return 2
    client = NodeClient(coord, node_id, identity=identity, connect=connect,
                        encrypted=not plain)
    code = await client.start()
    if code != EXIT_OK:
        return code
    try:
        if not await client.wait_ready():
            return client.exit_code if client.exit_code is not None \
                else EXIT_COORD_UNREACHABLE
        if client.connect_peers:
            linked = await client.link_all()
            if client.exit_code is not None:
                return client.exit_code
            if once:
                if linked:
                    print(f"{node_id}: all links verified", file=sys.stderr)
                    return EXIT_OK
                print(f"{node_id}: links did not come up", file=sys.stderr)
                return EXIT_SIM_FAILURE
        if once and not client.connect_peers:
            return EXIT_OK
        await client.run_forever()
        return client.exit_code if client.exit_code is not None else EXIT_OK
    finally:
        await client.close()


def run_node_cli(coord: str, node_id: str, key_path: Optional[str],
                 connect: list[str], once: bool, plain: bool) -> int:
    try:
        return asyncio.run(_node_main(coord, node_id, key_path,
                                      connect, once, plain))
    except KeyboardInterrupt:
        print(f"node {node_id} stopped", file=sys.stderr)
        return EXIT_OK
