"""Hole-punch state machines.

Peers in the easy cases (public or endpoint-independent NAT on at
least one side... but both sides reachable) run a symmetric direct
punch: both fire short probe bursts at each other's observed endpoint
until a three-way probe/ack/confirm completes.

The interesting case is one side behind a hard NAT (endpoint-dependent
mapping, exact-endpoint filtering).  Its observed port is useless: a
fresh mapping on a fresh port appears for every destination.  Instead
the hard side becomes the "opener": it binds `open_ports` local
sockets and sends one probe from each toward the easy side's fixed
endpoint, tearing `open_ports` pinholes at uniformly random external
ports.  The easy side becomes the "prober": from one fixed socket it
probes distinct ports of the hard side's public address, drawn without
replacement, at `probe_rate` per second.  The chance that `a` probes
find one of `b` pinholes among `k` candidate ports is exactly the
collision law in the probability module, so the defaults (256 open
ports, 100 probes/s) give even odds within two seconds and better
than 99.9% within the twenty-second budget.

Probe datagrams are 22 bytes:

    "BDHP"  version(1)  kind(1)  session_id(8)  nonce(8)

with kinds PROBE(1), PROBE_ACK(2, echoing the probe's nonce) and
CONFIRM(3, echoing the ack's nonce).  Anything that does not parse is
ignored.  The prober ignores PROBE and the opener ignores PROBE_ACK,
so establishment is driven purely by prober probes finding pinholes;
the opener also treats any non-probe datagram on a punched socket as
an implicit confirm, which covers a lost CONFIRM followed by data.
"""

from __future__ import annotations

import enum
import json
import math
import random
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import InvalidParametersError, ProtocolError
from .probability import PortSpace, schedule_ports

PROBE_MAGIC = b"BDHP"
PROBE_VERSION = 1
KIND_PROBE = 1
KIND_PROBE_ACK = 2
KIND_CONFIRM = 3

_PROBE_STRUCT = struct.Struct(">4sBB8s8s")
PROBE_LEN = _PROBE_STRUCT.size  # 22

MAX_OPEN_PORTS = 4096
MAX_PROBE_RATE = 1000.0

Endpoint = tuple[str, int]

__all__ = [
    "PROBE_MAGIC",
    "PROBE_LEN",
    "KIND_PROBE",
    "KIND_PROBE_ACK",
    "KIND_CONFIRM",
    "pack_probe",
    "parse_probe",
    "PunchConfig",
    "SessionState",
    "TraversalSession",
    "NatClassifier",
    "DirectPunch",
    "BirthdayOpener",
    "BirthdayProber",
]


def pack_probe(kind: int, session_id: bytes, nonce: bytes) -> bytes:
    return _PROBE_STRUCT.pack(PROBE_MAGIC, PROBE_VERSION, kind, session_id, nonce)


def parse_probe(data: bytes) -> Optional[tuple[int, bytes, bytes]]:
    """Returns (kind, session_id, nonce), or None for anything malformed."""
    if len(data) != PROBE_LEN or not data.startswith(PROBE_MAGIC):
        return None
    _, version, kind, session_id, nonce = _PROBE_STRUCT.unpack(data)
    if version != PROBE_VERSION or kind not in (KIND_PROBE, KIND_PROBE_ACK, KIND_CONFIRM):
        return None
    return kind, session_id, nonce


@dataclass(frozen=True)
class PunchConfig:
    """Knobs for one traversal attempt.

    open_ports is the pinhole count the opener maintains; probe_rate
    and max_duration_s bound the prober, whose total budget is
    floor(probe_rate * max_duration_s) distinct ports.  The refresh
    interval re-sends opener probes to keep NAT mappings alive and
    defaults to half the common 30 s mapping TTL.
    """

    open_ports: int = 256
    probe_rate: float = 100.0
    max_duration_s: float = 20.0
    refresh_interval_s: float = 15.0
    space: PortSpace = field(default_factory=PortSpace)
    direct_interval_s: float = 0.1
    direct_timeout_s: float = 5.0
    confirm_repeat: int = 3
    confirm_spacing_s: float = 0.05

    def __post_init__(self) -> None:
        if not (1 <= self.open_ports <= min(MAX_OPEN_PORTS, self.space.size)):
            raise InvalidParametersError(
                f"open_ports must lie in [1, {min(MAX_OPEN_PORTS, self.space.size)}], got {self.open_ports}")
        if not (0.0 < self.probe_rate <= MAX_PROBE_RATE):
            raise InvalidParametersError(
                f"probe_rate must lie in (0, {MAX_PROBE_RATE}], got {self.probe_rate}")
        if self.max_duration_s <= 0 or self.refresh_interval_s <= 0:
            raise InvalidParametersError("durations must be positive")
        if self.probe_budget > self.space.size:
            raise InvalidParametersError(
                f"budget of {self.probe_budget} probes exceeds the {self.space.size}-port space; "
                "lower probe_rate or max_duration_s")
        if self.direct_interval_s <= 0 or self.direct_timeout_s <= 0:
            raise InvalidParametersError("durations must be positive")
        if self.confirm_repeat < 1 or self.confirm_spacing_s <= 0:
            raise InvalidParametersError("confirm schedule must be positive")

    @property
    def probe_budget(self) -> int:
        return math.floor(self.probe_rate * self.max_duration_s + 1e-9)


class SessionState(enum.Enum):
    IDLE = "idle"
    OBSERVING = "observing"
    EXCHANGING = "exchanging"
    PUNCHING = "punching"
    ESTABLISHED_DIRECT = "established_direct"
    ESTABLISHED_RELAYED = "established_relayed"
    FAILED = "failed"


_LEGAL_TRANSITIONS: dict[SessionState, frozenset[SessionState]] = {
    SessionState.IDLE: frozenset({SessionState.OBSERVING, SessionState.FAILED}),
    SessionState.OBSERVING: frozenset({SessionState.EXCHANGING, SessionState.FAILED}),
    SessionState.EXCHANGING: frozenset({SessionState.PUNCHING, SessionState.FAILED}),
    SessionState.PUNCHING: frozenset({
        SessionState.ESTABLISHED_DIRECT,
        SessionState.ESTABLISHED_RELAYED,
        SessionState.FAILED,
    }),
    SessionState.ESTABLISHED_DIRECT: frozenset(),
    SessionState.ESTABLISHED_RELAYED: frozenset(),
    SessionState.FAILED: frozenset(),
}


class TraversalSession:
    """State and bookkeeping for one attempt to reach one peer."""

    def __init__(self, session_id: bytes, peer_id: str, role: str):
        self.session_id = session_id
        self.peer_id = peer_id
        self.role = role
        self.state = SessionState.IDLE
        self.history: list[tuple[int, SessionState]] = []
        self.probes_sent = 0
        self.started_us: Optional[int] = None
        self.finished_us: Optional[int] = None
        self.failure: Optional[str] = None

    def to(self, state: SessionState, now_us: int = 0) -> None:
        if state not in _LEGAL_TRANSITIONS[self.state]:
            raise ProtocolError(f"illegal transition {self.state.value} -> {state.value}")
        self.state = state
        self.history.append((now_us, state))

    @property
    def terminal(self) -> bool:
        return not _LEGAL_TRANSITIONS[self.state]

    @property
    def established(self) -> bool:
        return self.state in (SessionState.ESTABLISHED_DIRECT, SessionState.ESTABLISHED_RELAYED)


class NatClassifier:
    """Learns the local NAT class by asking two observers what they see.

    Both observers answering with the socket's own local endpoint
    means no translation (public).  Identical answers that differ from
    the local endpoint mean one stable mapping (easy).  Divergent
    answers mean per-destination mappings (hard).  One answer is
    inconclusive (unknown); none means UDP goes nowhere (udp_blocked).
    """

    def __init__(self, transport, sock, local: Endpoint, observers: list[Endpoint],
                 on_done: Callable[[str, Optional[Endpoint]], None],
                 rng: random.Random, tries: int = 3, retry_interval_s: float = 0.5):
        if len(observers) != 2:
            raise InvalidParametersError("classification needs exactly two observers")
        self._transport = transport
        self._sock = sock
        self._local = local
        self._observers = observers
        self._on_done = on_done
        self._tries = tries
        self._interval_us = int(retry_interval_s * 1_000_000)
        self._tokens = [rng.getrandbits(63) for _ in observers]
        self._answers: list[Optional[Endpoint]] = [None, None]
        self._round = 0
        self._timer = None
        self._done = False

    def start(self) -> None:
        self._send_round()

    def _send_round(self) -> None:
        self._round += 1
        for i, obs in enumerate(self._observers):
            if self._answers[i] is None:
                line = json.dumps({"type": "observe", "token": self._tokens[i]},
                                  separators=(",", ":")).encode()
                self._sock.send(obs, line)
        if self._round < self._tries:
            self._timer = self._transport.call_later(self._interval_us, self._send_round)
        else:
            self._timer = self._transport.call_later(self._interval_us, self._finish)

    def on_observed(self, obj: dict) -> None:
        """Feed a parsed {"type": "observed", ...} reply."""
        if self._done:
            return
        token = obj.get("token")
        ep = obj.get("endpoint")
        if not isinstance(ep, dict):
            return
        for i, want in enumerate(self._tokens):
            if token == want and self._answers[i] is None:
                self._answers[i] = (ep["ip"], ep["port"])
        if all(a is not None for a in self._answers):
            self._finish()

    def _finish(self) -> None:
        if self._done:
            return
        self._done = True
        if self._timer is not None:
            self._timer.cancel()
        a, b = self._answers
        if a is None and b is None:
            verdict, observed = "udp_blocked", None
        elif a is None or b is None:
            verdict, observed = "unknown", a or b
        elif a == b == self._local:
            verdict, observed = "public", a
        elif a == b:
            verdict, observed = "easy", a
        else:
            verdict, observed = "hard", a
        self._on_done(verdict, observed)


class DirectPunch:
    """Symmetric probe exchange toward a known peer endpoint."""

    def __init__(self, transport, sock, session_id: bytes, peer: Endpoint,
                 cfg: PunchConfig, on_done, rng: random.Random):
        self._transport = transport
        self._sock = sock
        self._session_id = session_id
        self._peer = peer
        self._cfg = cfg
        self._on_done = on_done
        self._rng = rng
        self._sent_nonces: set[bytes] = set()
        self._timer = None
        self._deadline = None
        self.probes_sent = 0
        self.done = False
        self.established_peer: Optional[Endpoint] = None

    def start(self) -> None:
        self._deadline = self._transport.call_later(
            int(self._cfg.direct_timeout_s * 1_000_000), self._timeout)
        self._tick()

    def _tick(self) -> None:
        if self.done:
            return
        nonce = self._rng.randbytes(8)
        self._sent_nonces.add(nonce)
        self._sock.send(self._peer, pack_probe(KIND_PROBE, self._session_id, nonce))
        self.probes_sent += 1
        self._timer = self._transport.call_later(
            int(self._cfg.direct_interval_s * 1_000_000), self._tick)

    def on_datagram(self, data: bytes, src: Endpoint) -> None:
        parsed = parse_probe(data)
        if parsed is None or parsed[1] != self._session_id:
            return
        kind, _, nonce = parsed
        if kind == KIND_PROBE:
            self._sock.send(src, pack_probe(KIND_PROBE_ACK, self._session_id, nonce))
            return
        if self.done:
            return
        if kind == KIND_PROBE_ACK and nonce in self._sent_nonces:
            for _ in range(self._cfg.confirm_repeat):
                self._sock.send(src, pack_probe(KIND_CONFIRM, self._session_id, nonce))
            self._establish(src)
        elif kind == KIND_CONFIRM:
            self._establish(src)

    def _establish(self, peer: Endpoint) -> None:
        self.done = True
        self.established_peer = peer
        self._cancel()
        self._on_done(True, self._sock, peer, "direct")

    def _timeout(self) -> None:
        if self.done:
            return
        self.done = True
        self._cancel()
        self._on_done(False, self._sock, None, "timeout")

    def _cancel(self) -> None:
        for t in (self._timer, self._deadline):
            if t is not None:
                t.cancel()


class BirthdayOpener:
    """Hard-NAT side: tears many pinholes and waits for a probe to land.

    Each of open_ports sockets sends one probe at the prober's fixed
    endpoint, allocating a uniformly random external port on the local
    endpoint-dependent NAT.  Those probes are fire-and-forget (the
    prober ignores them); their sole purpose is the mapping.  Re-sent
    every refresh interval so mappings outlive their idle TTL.
    """

    def __init__(self, transport, session_id: bytes, prober_endpoint: Endpoint,
                 cfg: PunchConfig, on_done, rng: random.Random):
        self._transport = transport
        self._session_id = session_id
        self._prober = prober_endpoint
        self._cfg = cfg
        self._on_done = on_done
        self._rng = rng
        self._sockets: list = []
        self._nonces: list[bytes] = []
        self._refresh_timer = None
        self._deadline = None
        self.probes_sent = 0
        self.done = False
        self.established_peer: Optional[Endpoint] = None
        self.pending_data: list[tuple[bytes, Endpoint]] = []

    def start(self) -> None:
        for _ in range(self._cfg.open_ports):
            sock = self._transport.open_socket(self._on_datagram)
            self._sockets.append(sock)
            self._nonces.append(self._rng.randbytes(8))
        self._deadline = self._transport.call_later(
            int(self._cfg.max_duration_s * 1_000_000), self._timeout)
        self._send_all()

    def _send_all(self) -> None:
        if self.done:
            return
        for sock, nonce in zip(self._sockets, self._nonces):
            sock.send(self._prober, pack_probe(KIND_PROBE, self._session_id, nonce))
            self.probes_sent += 1
        self._refresh_timer = self._transport.call_later(
            int(self._cfg.refresh_interval_s * 1_000_000), self._send_all)

    def _on_datagram(self, data: bytes, src: Endpoint, sock) -> None:
        parsed = parse_probe(data)
        if parsed is None:
            # Data already riding the punched path doubles as a confirm.
            if not self.done:
                self.pending_data.append((data, src))
                self._establish(sock, src)
            elif sock is self.link_socket:
                self.pending_data.append((data, src))
            return
        kind, session_id, nonce = parsed
        if session_id != self._session_id:
            return
        if kind == KIND_PROBE:
            sock.send(src, pack_probe(KIND_PROBE_ACK, self._session_id, nonce))
        elif kind == KIND_CONFIRM and not self.done:
            self._establish(sock, src)

    @property
    def link_socket(self):
        return self._sockets[0] if self.done and self._sockets else None

    def _establish(self, keep, peer: Endpoint) -> None:
        self.done = True
        self.established_peer = peer
        self._cancel()
        for sock in self._sockets:
            if sock is not keep:
                sock.close()
        self._sockets = [keep]
        self._on_done(True, keep, peer, "birthday")

    def _timeout(self) -> None:
        if self.done:
            return
        self.done = True
        self._cancel()
        for sock in self._sockets:
            sock.close()
        self._sockets = []
        self._on_done(False, None, None, "timeout")

    def _cancel(self) -> None:
        for t in (self._refresh_timer, self._deadline):
            if t is not None:
                t.cancel()


class BirthdayProber:
    """Easy side: sweeps random distinct ports of the opener's address.

    Probe nonces are the probe index, so an ack is validated by simple
    range check.  The budget is floor(probe_rate * max_duration_s)
    ports drawn without replacement; if it runs out early the prober
    keeps listening until the deadline for acks still in flight.
    """

    def __init__(self, transport, sock, session_id: bytes, opener_ip: str,
                 cfg: PunchConfig, on_done, rng: random.Random,
                 schedule_seed: Optional[int] = None):
        self._transport = transport
        self._sock = sock
        self._session_id = session_id
        self._opener_ip = opener_ip
        self._cfg = cfg
        self._on_done = on_done
        if schedule_seed is None:
            schedule_seed = rng.getrandbits(63)
        self._schedule = schedule_ports(cfg.space, cfg.probe_budget, schedule_seed)
        self._interval_us = max(1, round(1_000_000 / cfg.probe_rate))
        self._next = 0
        self._timer = None
        self._deadline = None
        self.probes_sent = 0
        self.done = False
        self.established_peer: Optional[Endpoint] = None

    def start(self) -> None:
        self._deadline = self._transport.call_later(
            int(self._cfg.max_duration_s * 1_000_000), self._timeout)
        self._tick()

    def _tick(self) -> None:
        if self.done or self._next >= len(self._schedule):
            return
        port = self._schedule[self._next]
        nonce = self._next.to_bytes(8, "big")
        self._next += 1
        self.probes_sent += 1
        self._sock.send((self._opener_ip, port), pack_probe(KIND_PROBE, self._session_id, nonce))
        if self._next < len(self._schedule):
            self._timer = self._transport.call_later(self._interval_us, self._tick)

    def on_datagram(self, data: bytes, src: Endpoint) -> None:
        parsed = parse_probe(data)
        if parsed is None or parsed[1] != self._session_id:
            return
        kind, _, nonce = parsed
        if kind != KIND_PROBE_ACK or self.done:
            return
        if int.from_bytes(nonce, "big") >= self._next:
            return
        self.done = True
        self.established_peer = src
        self._cancel()
        self._send_confirm(src, nonce, self._cfg.confirm_repeat)
        self._on_done(True, self._sock, src, "birthday")

    def _send_confirm(self, peer: Endpoint, nonce: bytes, remaining: int) -> None:
        self._sock.send(peer, pack_probe(KIND_CONFIRM, self._session_id, nonce))
        if remaining > 1:
            self._transport.call_later(
                int(self._cfg.confirm_spacing_s * 1_000_000),
                lambda: self._send_confirm(peer, nonce, remaining - 1))

    def _timeout(self) -> None:
        if self.done:
            return
        self.done = True
        self._cancel()
        self._on_done(False, self._sock, None, "timeout")

    def _cancel(self) -> None:
        for t in (self._timer, self._deadline):
            if t is not None:
                t.cancel()
