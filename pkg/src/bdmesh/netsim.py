"""Deterministic virtual-time network simulator with NAT models.

Everything runs on one event heap keyed by (time_us, seq): equal-time
events fire in schedule order, so a run is a pure function of the
scenario and the seed.  Datagrams are UDP-like (unreliable, unordered
under jitter, 1200-byte max payload); control channels are TCP-like
(reliable, ordered, line-oriented).

NAT behavior is split along two axes:

- mapping: endpoint_independent reuses one external port for all
  destinations of an internal endpoint; endpoint_dependent allocates a
  fresh external port per (internal, destination) pair.
- filtering: endpoint_independent accepts from anyone once a mapping
  exists; address_dependent requires the internal endpoint to have
  sent to the source IP; address_and_port_dependent requires a prior
  send to the exact source endpoint.

An "easy" NAT is endpoint-independent on both axes; a "hard" NAT is
endpoint-dependent mapping with address-and-port-dependent filtering.
Mappings expire after an idle TTL (default 30 s) and are refreshed by
any matching outbound packet; expiry is evaluated lazily on access.

Loss, latency and jitter are drawn from the sender's link policy; the
receiver's link contributes only its udp_blocked flag.  Loss is drawn
after NAT translation, so a lost packet still creates and refreshes
mappings, which is what a real NAT sees too.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import json
import random
from dataclasses import dataclass, field
from heapq import heappop, heappush
from typing import Callable, Optional

from .errors import InvalidParametersError, PortsExhaustedError, SimulationError
from .probability import PortSpace

Endpoint = tuple[str, int]

MAX_DATAGRAM = 1200
MAX_CONTROL_LINE = 8192
DEFAULT_MAPPING_TTL_S = 30.0

__all__ = [
    "Endpoint",
    "MAX_DATAGRAM",
    "MAX_CONTROL_LINE",
    "MappingMode",
    "FilteringMode",
    "PortAlloc",
    "NatProfile",
    "Nat",
    "LinkPolicy",
    "Timer",
    "VirtualClock",
    "TraceLog",
    "SimSocket",
    "Host",
    "HostTransport",
    "ChannelEnd",
    "Network",
]


class MappingMode(enum.Enum):
    ENDPOINT_INDEPENDENT = "endpoint_independent"
    ENDPOINT_DEPENDENT = "endpoint_dependent"


class FilteringMode(enum.Enum):
    ENDPOINT_INDEPENDENT = "endpoint_independent"
    ADDRESS_DEPENDENT = "address_dependent"
    ADDRESS_AND_PORT_DEPENDENT = "address_and_port_dependent"


class PortAlloc(enum.Enum):
    UNIFORM_RANDOM = "uniform_random"
    SEQUENTIAL = "sequential"


@dataclass(frozen=True)
class NatProfile:
    """Static behavior of one NAT box."""

    nat_id: str
    mapping: MappingMode = MappingMode.ENDPOINT_INDEPENDENT
    filtering: FilteringMode = FilteringMode.ENDPOINT_INDEPENDENT
    port_alloc: PortAlloc = PortAlloc.UNIFORM_RANDOM
    mapping_ttl_s: float = DEFAULT_MAPPING_TTL_S
    alloc_space: PortSpace = field(default_factory=PortSpace)

    def __post_init__(self) -> None:
        if self.mapping_ttl_s <= 0:
            raise InvalidParametersError("mapping TTL must be positive")

    @classmethod
    def easy(cls, nat_id: str, **kw) -> "NatProfile":
        return cls(
            nat_id,
            mapping=MappingMode.ENDPOINT_INDEPENDENT,
            filtering=FilteringMode.ENDPOINT_INDEPENDENT,
            **kw,
        )

    @classmethod
    def hard(cls, nat_id: str, **kw) -> "NatProfile":
        return cls(
            nat_id,
            mapping=MappingMode.ENDPOINT_DEPENDENT,
            filtering=FilteringMode.ADDRESS_AND_PORT_DEPENDENT,
            **kw,
        )


@dataclass(slots=True, eq=False)
class _Mapping:
    key: tuple
    internal: Endpoint
    ext_port: int
    expires_us: int
    remotes: set[Endpoint]


class Nat:
    """One NAT box: a public IP plus a live mapping table."""

    def __init__(self, profile: NatProfile, public_ip: str, rng: random.Random):
        self.profile = profile
        self.public_ip = public_ip
        self._rng = rng
        self._ttl_us = int(profile.mapping_ttl_s * 1_000_000)
        self._by_key: dict[tuple, _Mapping] = {}
        self._by_ext: dict[int, _Mapping] = {}
        self._by_internal: dict[Endpoint, set[_Mapping]] = {}
        self._seq_cursor = profile.alloc_space.lo
        self._stream_cursor = itertools.count(50000)

    def _purge(self, m: _Mapping) -> None:
        del self._by_key[m.key]
        del self._by_ext[m.ext_port]
        peers = self._by_internal[m.internal]
        peers.discard(m)
        if not peers:
            del self._by_internal[m.internal]

    def _alloc_port(self, now_us: int) -> int:
        space = self.profile.alloc_space
        k = space.size
        if len(self._by_ext) >= k:
            for m in [m for m in self._by_ext.values() if m.expires_us <= now_us]:
                self._purge(m)
            if len(self._by_ext) >= k:
                raise PortsExhaustedError(f"nat {self.profile.nat_id} has no free ports")
        if self.profile.port_alloc is PortAlloc.UNIFORM_RANDOM:
            while True:
                cand = self._rng.randrange(space.lo, space.hi + 1)
                m = self._by_ext.get(cand)
                if m is not None and m.expires_us <= now_us:
                    self._purge(m)
                    m = None
                if m is None:
                    return cand
        for _ in range(k):
            cand = self._seq_cursor
            self._seq_cursor = space.lo + (cand - space.lo + 1) % k
            m = self._by_ext.get(cand)
            if m is not None and m.expires_us <= now_us:
                self._purge(m)
                m = None
            if m is None:
                return cand
        raise PortsExhaustedError(f"nat {self.profile.nat_id} has no free ports")

    def outbound(self, internal: Endpoint, dst: Endpoint, now_us: int) -> int:
        """Translate an outbound packet; create or refresh the mapping."""
        if self.profile.mapping is MappingMode.ENDPOINT_INDEPENDENT:
            key = internal
        else:
            key = (internal, dst)
        m = self._by_key.get(key)
        if m is not None and m.expires_us <= now_us:
            self._purge(m)
            m = None
        if m is None:
            port = self._alloc_port(now_us)
            m = _Mapping(key, internal, port, 0, set())
            self._by_key[key] = m
            self._by_ext[port] = m
            self._by_internal.setdefault(internal, set()).add(m)
        m.expires_us = now_us + self._ttl_us
        m.remotes.add(dst)
        return m.ext_port

    def inbound(self, src: Endpoint, ext_port: int, now_us: int) -> tuple[Optional[Endpoint], str]:
        """Translate an inbound packet; returns (internal endpoint, reason)."""
        m = self._by_ext.get(ext_port)
        if m is None:
            return None, "no-mapping"
        if m.expires_us <= now_us:
            self._purge(m)
            return None, "expired"
        f = self.profile.filtering
        if f is FilteringMode.ENDPOINT_INDEPENDENT:
            return m.internal, "ok"
        if f is FilteringMode.ADDRESS_DEPENDENT:
            for peer in self._by_internal.get(m.internal, ()):
                if peer.expires_us > now_us and any(r[0] == src[0] for r in peer.remotes):
                    return m.internal, "ok"
            return None, "filtered"
        if src in m.remotes:
            return m.internal, "ok"
        return None, "filtered"

    def live_mappings(self, now_us: int) -> int:
        return sum(1 for m in self._by_ext.values() if m.expires_us > now_us)

    def next_stream_port(self) -> int:
        # Stream (control channel) sources live in their own protocol
        # space and never collide with UDP mapping bookkeeping.
        return next(self._stream_cursor)


@dataclass(frozen=True)
class LinkPolicy:
    """Impairments of one host's uplink."""

    loss: float = 0.0
    latency_us: int = 1000
    jitter_us: int = 0
    udp_blocked: bool = False

    def __post_init__(self) -> None:
        if not (0.0 <= self.loss < 1.0):
            raise InvalidParametersError(f"loss must lie in [0, 1), got {self.loss}")
        if self.latency_us < 0 or self.jitter_us < 0:
            raise InvalidParametersError("latency and jitter must be non-negative")


class Timer:
    """One-shot cancellable timer handle."""

    __slots__ = ("fn",)

    def __init__(self, fn: Callable[[], None]):
        self.fn = fn

    def cancel(self) -> None:
        self.fn = None

    @property
    def active(self) -> bool:
        return self.fn is not None


class VirtualClock:
    """Event heap ordered by (time_us, schedule seq)."""

    __slots__ = ("now_us", "_heap", "_seq")

    def __init__(self) -> None:
        self.now_us = 0
        self._heap: list = []
        self._seq = 0

    def schedule_at(self, t_us: int, fn) -> None:
        self._seq += 1
        heappush(self._heap, (t_us, self._seq, fn))

    def schedule(self, delay_us: int, fn) -> None:
        self.schedule_at(self.now_us + delay_us, fn)

    def call_later(self, delay_us: int, fn: Callable[[], None]) -> Timer:
        timer = Timer(fn)
        self.schedule_at(self.now_us + delay_us, timer)
        return timer

    def run_until(self, t_us: int) -> int:
        """Fire every event due at or before t_us; returns events fired."""
        heap = self._heap
        fired = 0
        while heap and heap[0][0] <= t_us:
            when, _, item = heappop(heap)
            self.now_us = when
            if type(item) is Timer:
                fn = item.fn
                if fn is None:
                    continue
                item.fn = None
                fn()
            else:
                item()
            fired += 1
        if t_us > self.now_us:
            self.now_us = t_us
        return fired

    @property
    def pending(self) -> int:
        return len(self._heap)


class TraceLog:
    """Append-only event trace with a stable content hash."""

    def __init__(self) -> None:
        self.entries: list[dict] = []

    def add(self, t_us: int, kind: str, src: str, dst: str, info: str) -> None:
        self.entries.append({"t_us": t_us, "kind": kind, "src": src, "dst": dst, "info": info})

    def digest(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(json.dumps(e, sort_keys=True, separators=(",", ":")).encode())
            h.update(b"\n")
        return h.hexdigest()

    def dump_lines(self) -> list[str]:
        return [json.dumps(e, sort_keys=True, separators=(",", ":")) for e in self.entries]


def _fmt(ep: Endpoint) -> str:
    return f"{ep[0]}:{ep[1]}"


class SimSocket:
    """Bound UDP-like socket on a simulated host."""

    __slots__ = ("host", "port", "handler", "closed")

    def __init__(self, host: "Host", port: int, handler):
        self.host = host
        self.port = port
        self.handler = handler
        self.closed = False

    @property
    def local_port(self) -> int:
        return self.port

    def send(self, dst: Endpoint, payload: bytes) -> None:
        if self.closed:
            raise SimulationError("send on closed socket")
        self.host.net._send_from(self.host, self.port, dst, payload)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            del self.host.sockets[self.port]


class Host:
    """One endpoint machine, optionally behind a NAT."""

    EPHEMERAL_LO = 30000
    EPHEMERAL_HI = 60999

    def __init__(self, host_id: str, ip: str, net: "Network",
                 nat: Optional[Nat] = None, link: Optional[LinkPolicy] = None):
        self.id = host_id
        self.ip = ip
        self.net = net
        self.nat = nat
        self.link = link or LinkPolicy()
        self.sockets: dict[int, SimSocket] = {}
        self.channel_listeners: dict[int, Callable[["ChannelEnd"], None]] = {}
        self._eph_next = self.EPHEMERAL_LO
        self._stream_next = itertools.count(61000)

    def bind(self, handler, port: int = 0) -> SimSocket:
        """handler(payload: bytes, src: Endpoint, sock: SimSocket)."""
        if port == 0:
            span = self.EPHEMERAL_HI - self.EPHEMERAL_LO + 1
            for _ in range(span):
                cand = self._eph_next
                self._eph_next = self.EPHEMERAL_LO + (cand - self.EPHEMERAL_LO + 1) % span
                if cand not in self.sockets:
                    port = cand
                    break
            else:
                raise PortsExhaustedError(f"host {self.id} has no free ephemeral ports")
        elif port in self.sockets:
            raise InvalidParametersError(f"port {port} already bound on {self.id}")
        sock = SimSocket(self, port, handler)
        self.sockets[port] = sock
        return sock

    def listen_channel(self, port: int, acceptor: Callable[["ChannelEnd"], None]) -> None:
        self.channel_listeners[port] = acceptor


class HostTransport:
    """Adapter handing protocol machines what they need from one host:
    virtual time, timers, fresh sockets, and the world's seeded rng."""

    __slots__ = ("host",)

    def __init__(self, host: Host):
        self.host = host

    @property
    def rng(self) -> random.Random:
        return self.host.net.rng

    def now_us(self) -> int:
        return self.host.net.clock.now_us

    def call_later(self, delay_us: int, fn: Callable[[], None]) -> Timer:
        return self.host.net.clock.call_later(delay_us, fn)

    def open_socket(self, handler, port: int = 0) -> SimSocket:
        return self.host.bind(handler, port)


class ChannelEnd:
    """One side of a reliable ordered line channel (TCP-like)."""

    def __init__(self, net: "Network", host: Host, local: Endpoint, remote: Endpoint):
        self.net = net
        self.host = host
        self.local = local          # this end as the peer sees it
        self.remote = remote        # the peer as this end sees it
        self.peer: Optional[ChannelEnd] = None
        self.closed = False
        self.on_line: Optional[Callable[[dict], None]] = None
        self.on_close: Optional[Callable[[], None]] = None
        self._deliver_floor_us = 0

    @property
    def peer_observed(self) -> Endpoint:
        return self.remote

    def send(self, obj: dict) -> None:
        line = json.dumps(obj, separators=(",", ":")).encode() + b"\n"
        if len(line) > MAX_CONTROL_LINE:
            raise InvalidParametersError(f"control line of {len(line)} bytes exceeds {MAX_CONTROL_LINE}")
        if self.closed or self.peer is None or self.peer.closed:
            raise SimulationError("send on closed channel")
        self.net._channel_send(self, line)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        peer = self.peer
        if peer is not None and not peer.closed:
            delay = self.host.link.latency_us
            self.net.clock.schedule(delay, peer._peer_closed)

    def _peer_closed(self) -> None:
        if self.closed:
            return
        self.closed = True
        if self.on_close is not None:
            self.on_close()


class Network:
    """The world: hosts, NATs, the clock, and the wire."""

    def __init__(self, seed: int = 0, trace: bool = False):
        self.clock = VirtualClock()
        self.rng = random.Random(seed)
        self.hosts: dict[str, Host] = {}
        self.nats: dict[str, Nat] = {}
        self._by_ip: dict[str, object] = {}
        self.trace: Optional[TraceLog] = TraceLog() if trace else None
        self.on_wire: Optional[Callable[[str, Endpoint, Endpoint, bytes], None]] = None
        self.stats = {"sent": 0, "delivered": 0, "dropped": 0, "dead_letters": 0}
        self._host_ip = itertools.count(1)
        self._nat_ip = itertools.count(1)

    # -- topology -----------------------------------------------------

    def add_nat(self, profile: NatProfile) -> Nat:
        if profile.nat_id in self.nats:
            raise InvalidParametersError(f"duplicate nat id {profile.nat_id}")
        n = next(self._nat_ip)
        ip = f"198.18.{n // 256}.{n % 256}"
        nat = Nat(profile, ip, self.rng)
        self.nats[profile.nat_id] = nat
        self._by_ip[ip] = nat
        return nat

    def add_host(self, host_id: str, nat: Optional[Nat] = None,
                 link: Optional[LinkPolicy] = None) -> Host:
        if host_id in self.hosts:
            raise InvalidParametersError(f"duplicate host id {host_id}")
        n = next(self._host_ip)
        ip = f"10.0.{n // 256}.{n % 256}"
        host = Host(host_id, ip, self, nat=nat, link=link)
        self.hosts[host_id] = host
        self._by_ip[ip] = host
        return host

    # -- datagram path ------------------------------------------------

    def _drop(self, src: str, dst: str, reason: str) -> None:
        self.stats["dropped"] += 1
        if self.trace is not None:
            self.trace.add(self.clock.now_us, "drop", src, dst, reason)

    def _send_from(self, host: Host, src_port: int, dst: Endpoint, payload: bytes) -> None:
        if len(payload) > MAX_DATAGRAM:
            raise InvalidParametersError(f"datagram of {len(payload)} bytes exceeds {MAX_DATAGRAM}")
        self.stats["sent"] += 1
        now = self.clock.now_us
        link = host.link
        internal = (host.ip, src_port)
        if link.udp_blocked:
            self._drop(_fmt(internal), _fmt(dst), "udp-blocked")
            return
        if host.nat is not None:
            try:
                ext_port = host.nat.outbound(internal, dst, now)
            except PortsExhaustedError:
                self._drop(_fmt(internal), _fmt(dst), "ports-exhausted")
                return
            wire_src = (host.nat.public_ip, ext_port)
        else:
            wire_src = internal
        if self.trace is not None:
            self.trace.add(now, "send", _fmt(wire_src), _fmt(dst), f"len={len(payload)}")
        if self.on_wire is not None:
            self.on_wire("udp", wire_src, dst, payload)
        if link.loss > 0.0 and self.rng.random() < link.loss:
            self._drop(_fmt(wire_src), _fmt(dst), "loss")
            return
        delay = link.latency_us
        if link.jitter_us:
            delay += self.rng.randrange(link.jitter_us + 1)
        self.clock.schedule(delay, lambda: self._deliver(wire_src, dst, payload))

    def _deliver(self, src: Endpoint, dst: Endpoint, payload: bytes) -> None:
        now = self.clock.now_us
        target = self._by_ip.get(dst[0])
        if target is None:
            self.stats["dead_letters"] += 1
            self._drop(_fmt(src), _fmt(dst), "dead-letter")
            return
        if isinstance(target, Nat):
            internal, reason = target.inbound(src, dst[1], now)
            if internal is None:
                self._drop(_fmt(src), _fmt(dst), reason)
                return
            host = self._by_ip.get(internal[0])
            port = internal[1]
        else:
            host = target
            if host.nat is not None:
                # Private addresses are not routable from the outside.
                self.stats["dead_letters"] += 1
                self._drop(_fmt(src), _fmt(dst), "dead-letter")
                return
            port = dst[1]
        if host.link.udp_blocked:
            self._drop(_fmt(src), _fmt(dst), "udp-blocked")
            return
        sock = host.sockets.get(port)
        if sock is None:
            self.stats["dead_letters"] += 1
            self._drop(_fmt(src), _fmt(dst), "no-socket")
            return
        self.stats["delivered"] += 1
        if self.trace is not None:
            self.trace.add(now, "deliver", _fmt(src), _fmt((host.ip, port)), f"len={len(payload)}")
        sock.handler(payload, src, sock)

    # -- control channels ----------------------------------------------

    def connect_channel(self, client: Host, server: Host, server_port: int) -> ChannelEnd:
        """Open a reliable channel; the server's acceptor fires after one
        link latency with its end."""
        acceptor = server.channel_listeners.get(server_port)
        if acceptor is None:
            raise SimulationError(f"nothing listening on {server.id}:{server_port}")
        if client.nat is not None:
            client_seen = (client.nat.public_ip, client.nat.next_stream_port())
        else:
            client_seen = (client.ip, next(client._stream_next))
        server_seen = (server.ip, server_port)
        client_end = ChannelEnd(self, client, client_seen, server_seen)
        server_end = ChannelEnd(self, server, server_seen, client_seen)
        client_end.peer = server_end
        server_end.peer = client_end
        self.clock.schedule(client.link.latency_us, lambda: acceptor(server_end))
        return client_end

    def _channel_send(self, end: ChannelEnd, line: bytes) -> None:
        peer = end.peer
        if self.trace is not None:
            self.trace.add(self.clock.now_us, "ctrl", _fmt(end.local), _fmt(peer.local), f"len={len(line)}")
        if self.on_wire is not None:
            self.on_wire("ctrl", end.local, peer.local, line)
        t = self.clock.now_us + end.host.link.latency_us
        if t < peer._deliver_floor_us:
            t = peer._deliver_floor_us
        peer._deliver_floor_us = t
        self.clock.schedule_at(t, lambda: self._channel_deliver(peer, line))

    def _channel_deliver(self, end: ChannelEnd, line: bytes) -> None:
        if end.closed or end.on_line is None:
            return
        end.on_line(json.loads(line))

    # -- running --------------------------------------------------------

    def run_until(self, t_us: int) -> int:
        return self.clock.run_until(t_us)

    def run_for(self, dt_us: int) -> int:
        return self.clock.run_until(self.clock.now_us + dt_us)

    @property
    def now_us(self) -> int:
        return self.clock.now_us
