"""Node agent: everything one overlay member does.

Lifecycle: connect the control channel, register, classify the local
NAT against the coordinator's two UDP observers, then re-register with
the verdict and the externally observed endpoint.  After that the
agent answers introductions (its own requests and its peers') by
running one traversal session per peer:

    role direct   symmetric probe exchange at the peer's endpoint
    role opener   birthday punch, pinhole side (we are the hard one)
    role prober   birthday punch, probing side
    role relay    no punch; both ends open a relay session instead

A failed punch falls back to the relay.  Once a path exists, links
configured for encryption run the identity-pinned handshake (the
lexicographically smaller node id initiates) and all payload rides
sealed frames; unencrypted links use plain length-prefixed frames.
Either way the result is an OverlayLink that sends and receives
payload chunks of at most 1024 bytes end to end.

All datagrams of one agent share its primary socket except opener
pinholes, which get sockets of their own.  Demux order on arrival:
probe packets (22-byte "BDHP"), handshake messages ("BDHS"), sealed
frames (by channel id), plain frames (by source route), observer
replies (JSON).  Anything else is dropped silently.
"""

from __future__ import annotations

import base64
import json
import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import HandshakeError, InvalidParametersError, ProtocolError, ReplayError
from .netsim import Endpoint, HostTransport, Network
from .rendezvous import DEFAULT_CONTROL_PORT, DEFAULT_OBSERVER_PORTS, MAX_RELAY_CHUNK
from .securelink import (
    FrameCipher,
    HandshakeInitiator,
    HandshakeResponder,
    Identity,
    frame_plain,
    is_handshake,
    split_plain,
)
from .traversal import (
    KIND_PROBE,
    PROBE_LEN,
    PROBE_MAGIC,
    BirthdayOpener,
    BirthdayProber,
    DirectPunch,
    NatClassifier,
    PunchConfig,
    SessionState,
    TraversalSession,
    parse_probe,
)

LINK_CHUNK = 1024
HANDSHAKE_RETRY_S = 1.0
HANDSHAKE_TRIES = 5
SESSION_GRACE_S = 5.0
KEEPALIVE_S = 20.0

__all__ = ["LINK_CHUNK", "OverlayLink", "LinkSession", "NodeAgent"]


class OverlayLink:
    """Established payload path to one peer_id, direct or relayed."""

    def __init__(self, session: "LinkSession"):
        self._session = session
        self.peer_id = session.peer_id
        self.path = session.path
        self.encrypted = session.encrypted
        self.on_payload: Optional[Callable[[bytes], None]] = None
        self.bytes_sent = 0
        self.bytes_received = 0

    @property
    def remote_endpoint(self) -> Optional[Endpoint]:
        return self._session.peer_ep

    def send(self, payload: bytes) -> None:
        for i in range(0, len(payload), LINK_CHUNK) or (0,):
            self._session.send_chunk(payload[i:i + LINK_CHUNK])
        self.bytes_sent += len(payload)

    def _deliver(self, chunk: bytes) -> None:
        self.bytes_received += len(chunk)
        if self.on_payload is not None:
            self.on_payload(chunk)


@dataclass
class LinkSession:
    """Internal state for one peer: traversal, handshake, framing."""

    agent: "NodeAgent"
    session_id: bytes
    session_hex: str
    peer_id: str
    role: str
    peer_ep: Optional[Endpoint]
    peer_pubkey: bytes
    encrypted: bool
    cfg: PunchConfig
    ts: TraversalSession
    machine: object = None
    path: Optional[str] = None          # "direct" | "relayed"
    sock: object = None                 # direct path socket
    cipher: Optional[FrameCipher] = None
    link: Optional[OverlayLink] = None
    initiator: bool = False
    handshake: object = None
    handshake_reply: Optional[bytes] = None    # responder M2 cache
    handshake_tries: int = 0
    relay_ready: bool = False
    relay_requested: bool = False
    _rx_buf: bytes = b""
    deadline: object = None

    # -- sending ------------------------------------------------------

    def send_chunk(self, chunk: bytes) -> None:
        if self.link is None:
            raise ProtocolError(f"link to {self.peer_id} is not up")
        if self.encrypted:
            body = self.cipher.seal(chunk)
            wire = body if self.path == "direct" else len(body).to_bytes(2, "big") + body
        else:
            wire = frame_plain(chunk)
        if self.path == "direct":
            self.sock.send(self.peer_ep, wire)
        else:
            self._relay_bytes(wire)

    def send_handshake(self, body: bytes) -> None:
        if self.path == "direct":
            self.sock.send(self.peer_ep, body)
        else:
            self._relay_bytes(len(body).to_bytes(2, "big") + body)

    def _relay_bytes(self, data: bytes) -> None:
        for i in range(0, len(data), MAX_RELAY_CHUNK):
            self.agent.channel.send({
                "type": "relay_data",
                "session_id": self.session_hex,
                "payload_b64": base64.b64encode(data[i:i + MAX_RELAY_CHUNK]).decode(),
            })

    # -- receiving ------------------------------------------------------

    def feed_stream(self, data: bytes) -> None:
        self._rx_buf += data
        while len(self._rx_buf) >= 2:
            n = int.from_bytes(self._rx_buf[:2], "big")
            if len(self._rx_buf) < 2 + n:
                break
            body = self._rx_buf[2:2 + n]
            self._rx_buf = self._rx_buf[2 + n:]
            self.on_body(body, None)

    def on_body(self, body: bytes, src: Optional[Endpoint]) -> None:
        if self.encrypted:
            if is_handshake(body):
                self.agent._on_handshake_body(self, body)
                return
            if self.cipher is None:
                return
            try:
                chunk = self.cipher.open(body)
            except (ProtocolError, ReplayError):
                return
            if self.link is not None:
                self.link._deliver(chunk)
        else:
            if self.link is not None:
                if self.path == "direct":
                    try:
                        body = split_plain(body)
                    except ProtocolError:
                        return
                self.link._deliver(body)


class NodeAgent:
    """One overlay node: registration, traversal, links.

    transport must offer now_us(), call_later(delay_us, fn) -> timer,
    open_socket(handler, port=0) -> socket, and .rng; channel must
    offer send(dict) with writable on_line.  Both the simulator and the
    asyncio backend satisfy these.
    """

    def __init__(self, node_id: str, transport, channel, local_ip: str,
                 identity: Optional[Identity] = None,
                 default_encrypted: bool = True,
                 observers: Optional[list[Endpoint]] = None,
                 on_event: Optional[Callable[[dict], None]] = None):
        self.node_id = node_id
        self.transport = transport
        self.channel = channel
        self.local_ip = local_ip
        self.rng: random.Random = transport.rng
        self.identity = identity or Identity.generate(self.rng)
        self.default_encrypted = default_encrypted
        self.link_encryption: dict[str, bool] = {}
        self.relay_only_peers: set[str] = set()
        self.observers = observers
        self.on_event = on_event

        self.primary = None
        self._classifier = None
        self.nat_class = "unknown"
        self.observed: Optional[Endpoint] = None
        self.ready = False
        self.fatal_error: Optional[str] = None
        self.links: dict[str, OverlayLink] = {}
        self.sessions: dict[bytes, LinkSession] = {}
        self._session_by_peer: dict[str, LinkSession] = {}
        self._routes: dict[tuple[int, Endpoint], LinkSession] = {}
        self._channels: dict[bytes, LinkSession] = {}
        self._registered_count = 0

        channel.on_line = self._on_control

    @classmethod
    def sim(cls, net: Network, host, coord_host, node_id: str, **kw) -> "NodeAgent":
        """Wire an agent to a simulated host and coordinator."""
        transport = HostTransport(host)
        channel = net.connect_channel(host, coord_host, DEFAULT_CONTROL_PORT)
        kw.setdefault("observers",
                      [(coord_host.ip, p) for p in DEFAULT_OBSERVER_PORTS])
        return cls(node_id, transport, channel, local_ip=host.ip, **kw)

    def _emit(self, event: str, **info) -> None:
        if self.on_event is not None:
            self.on_event(dict(info, event=event))

    # -- lifecycle ------------------------------------------------------

    def start(self) -> None:
        self.primary = self.transport.open_socket(self._on_datagram)
        self._register()
        self._classifier = NatClassifier(
            self.transport, self.primary, (self.local_ip, self.primary.local_port),
            self.observers, self._on_classified, rng=self.rng)
        self._classifier.start()
        self.transport.call_later(int(KEEPALIVE_S * 1_000_000), self._keepalive)

    def _register(self) -> None:
        msg = {"type": "register", "node": self.node_id,
               "pubkey_b64": base64.b64encode(self.identity.public_bytes).decode()}
        if self.nat_class != "unknown" or self.observed is not None:
            msg["nat_class"] = self.nat_class
            if self.observed is not None:
                msg["udp_endpoint"] = {"ip": self.observed[0], "port": self.observed[1]}
        self.channel.send(msg)

    def _keepalive(self) -> None:
        self.channel.send({"type": "ping", "nonce": self.rng.getrandbits(32)})
        self.transport.call_later(int(KEEPALIVE_S * 1_000_000), self._keepalive)

    def _on_classified(self, verdict: str, observed: Optional[Endpoint]) -> None:
        self.nat_class = verdict
        self.observed = observed
        self._register()  # report the verdict

    def connect(self, peer_id: str) -> None:
        """Ask the coordinator for an introduction to peer_id."""
        self.channel.send({"type": "introduce_request", "node": self.node_id,
                           "peer": peer_id})

    def encrypted_for(self, peer_id: str) -> bool:
        return self.link_encryption.get(peer_id, self.default_encrypted)

    # -- control channel ---------------------------------------------------

    def _on_control(self, msg: dict) -> None:
        if not isinstance(msg, dict):
            return
        kind = msg.get("type")
        if kind == "registered":
            self._registered_count += 1
            if self._registered_count >= 2:
                self.ready = True
                self._emit("ready", nat_class=self.nat_class)
        elif kind == "observed":
            if self._classifier is not None:
                self._classifier.on_observed(msg)
        elif kind == "introduce":
            self._on_introduce(msg)
        elif kind == "relay_opened":
            self._on_relay_opened(msg)
        elif kind == "relay_data":
            self._on_relay_data(msg)
        elif kind == "error":
            code = msg.get("error")
            if code == "identity-conflict":
                self.fatal_error = code
            self._emit("coordinator_error", error=code, detail=msg.get("detail"))
        # pong and anything else: nothing to do

    # -- traversal ------------------------------------------------------

    def _on_introduce(self, msg: dict) -> None:
        try:
            session_id = bytes.fromhex(msg["session_id"])
            peer_id = msg["peer"]
            ep = msg["peer_endpoint"]
            peer_ep = (ep["ip"], ep["port"])
            peer_pubkey = base64.b64decode(msg["peer_pubkey_b64"])
            role = msg["role"]
            punch = msg.get("punch", {})
        except (KeyError, TypeError, ValueError):
            return
        if len(session_id) != 8 or role not in ("direct", "opener", "prober", "relay"):
            return
        if peer_id in self.relay_only_peers:
            role = "relay"  # plan said this link never punches
        old = self._session_by_peer.get(peer_id)
        if old is not None and not old.ts.terminal:
            return  # one live session per peer
        try:
            cfg = PunchConfig(
                open_ports=int(punch.get("open_ports", 256)),
                probe_rate=float(punch.get("rate", 100.0)),
                max_duration_s=float(punch.get("max_seconds", 20.0)),
            )
        except (InvalidParametersError, ValueError, TypeError) as exc:
            self._emit("session_failed", peer=peer_id, reason=f"bad punch params: {exc}")
            return
        ts = TraversalSession(session_id, peer_id, role)
        ls = LinkSession(
            agent=self, session_id=session_id, session_hex=msg["session_id"],
            peer_id=peer_id, role=role, peer_ep=peer_ep, peer_pubkey=peer_pubkey,
            encrypted=self.encrypted_for(peer_id), cfg=cfg, ts=ts,
        )
        ls.initiator = self.node_id < peer_id
        self.sessions[session_id] = ls
        self._session_by_peer[peer_id] = ls
        now = self.transport.now_us()
        ts.to(SessionState.OBSERVING, now)   # our class is already known
        ts.to(SessionState.EXCHANGING, now)  # the introduce is the exchange
        ts.to(SessionState.PUNCHING, now)
        deadline_us = int((cfg.max_duration_s + SESSION_GRACE_S) * 1_000_000)
        ls.deadline = self.transport.call_later(deadline_us, lambda: self._session_deadline(ls))
        if role == "direct":
            ls.machine = DirectPunch(self.transport, self.primary, session_id, peer_ep,
                                     cfg, self._punch_done(ls), self.rng)
            ls.machine.start()
        elif role == "opener":
            ls.machine = BirthdayOpener(self.transport, session_id, peer_ep, cfg,
                                        self._punch_done(ls), self.rng)
            ls.machine.start()
        elif role == "prober":
            ls.machine = BirthdayProber(self.transport, self.primary, session_id,
                                        peer_ep[0], cfg, self._punch_done(ls), self.rng)
            ls.machine.start()
        else:
            self._request_relay(ls)

    def _punch_done(self, ls: LinkSession):
        def done(ok: bool, sock, peer: Optional[Endpoint], why: str) -> None:
            if ok:
                self._direct_path_up(ls, sock, peer)
            else:
                self._request_relay(ls)
        return done

    def _direct_path_up(self, ls: LinkSession, sock, peer: Endpoint) -> None:
        ls.path = "direct"
        ls.sock = sock
        ls.peer_ep = peer
        ls.ts.to(SessionState.ESTABLISHED_DIRECT, self.transport.now_us())
        ls.ts.probes_sent = ls.machine.probes_sent
        if sock is not self.primary:
            sock.handler = self._on_datagram  # take over an opener pinhole
        self._routes[(id(sock), peer)] = ls
        self._transport_ready(ls)
        if isinstance(ls.machine, BirthdayOpener):
            for data, src in ls.machine.pending_data:
                self._on_datagram(data, src, sock)
            ls.machine.pending_data.clear()

    def _request_relay(self, ls: LinkSession) -> None:
        if ls.relay_requested or ls.ts.terminal:
            return
        ls.relay_requested = True
        self.channel.send({"type": "relay_open", "session_id": ls.session_hex})

    def _on_relay_opened(self, msg: dict) -> None:
        ls = self._session_by_sid_hex(msg.get("session_id"))
        if ls is None or ls.ts.terminal:
            return
        ls.path = "relayed"
        ls.relay_ready = True
        ls.ts.to(SessionState.ESTABLISHED_RELAYED, self.transport.now_us())
        if ls.machine is not None:
            ls.ts.probes_sent = ls.machine.probes_sent
        self._transport_ready(ls)

    def _on_relay_data(self, msg: dict) -> None:
        ls = self._session_by_sid_hex(msg.get("session_id"))
        if ls is None or ls.path != "relayed":
            return
        try:
            data = base64.b64decode(msg.get("payload_b64", ""))
        except (ValueError, TypeError):
            return
        ls.feed_stream(data)

    def _session_by_sid_hex(self, sid) -> Optional[LinkSession]:
        if not isinstance(sid, str):
            return None
        try:
            return self.sessions.get(bytes.fromhex(sid))
        except ValueError:
            return None

    def _session_deadline(self, ls: LinkSession) -> None:
        if ls.ts.terminal and ls.link is not None:
            return
        if not ls.ts.terminal:
            ls.ts.failure = "deadline"
            ls.ts.to(SessionState.FAILED, self.transport.now_us())
        self._emit("session_failed", peer=ls.peer_id,
                   reason=ls.ts.failure or "handshake-timeout")

    # -- link bring-up -----------------------------------------------------

    def _transport_ready(self, ls: LinkSession) -> None:
        ls.ts.finished_us = self.transport.now_us()
        if not ls.encrypted:
            self._link_up(ls)
            return
        if ls.initiator:
            ls.handshake = HandshakeInitiator(self.identity, ls.peer_pubkey, rng=self.rng)
            self._send_m1(ls)
        # The responder waits for M1.

    def _send_m1(self, ls: LinkSession) -> None:
        if ls.link is not None or ls.ts.state is SessionState.FAILED:
            return
        if ls.handshake_tries >= HANDSHAKE_TRIES:
            return  # the session deadline will report the failure
        ls.handshake_tries += 1
        ls.send_handshake(ls.handshake.message1())
        self.transport.call_later(int(HANDSHAKE_RETRY_S * 1_000_000),
                                  lambda: self._send_m1(ls))

    def _on_handshake_body(self, ls: LinkSession, body: bytes) -> None:
        if ls.initiator:
            if ls.link is not None:
                return
            try:
                keys = ls.handshake.consume_message2(body)
            except HandshakeError:
                return
            ls.cipher = FrameCipher(keys)
            self._channels[keys.channel_id] = ls
            self._link_up(ls)
        else:
            if ls.handshake_reply is not None and body == getattr(ls, "_last_m1", None):
                ls.send_handshake(ls.handshake_reply)  # duplicate M1, same M2
                return
            responder = HandshakeResponder(self.identity, ls.peer_pubkey, rng=self.rng)
            try:
                reply = responder.consume_message1(body)
            except HandshakeError:
                return
            ls._last_m1 = body
            ls.handshake_reply = reply
            ls.cipher = FrameCipher(responder.keys)
            self._channels[responder.keys.channel_id] = ls
            ls.send_handshake(reply)
            if ls.link is None:
                self._link_up(ls)

    def _link_up(self, ls: LinkSession) -> None:
        ls.link = OverlayLink(ls)
        self.links[ls.peer_id] = ls.link
        if ls.deadline is not None:
            ls.deadline.cancel()
        self._emit("link_up", peer=ls.peer_id, path=ls.path,
                   encrypted=ls.encrypted, probes=ls.ts.probes_sent)

    # -- datagram demux ---------------------------------------------------

    def _on_datagram(self, data: bytes, src: Endpoint, sock) -> None:
        if len(data) == PROBE_LEN and data.startswith(PROBE_MAGIC):
            parsed = parse_probe(data)
            if parsed is None:
                return
            ls = self.sessions.get(parsed[1])
            if ls is not None and ls.machine is not None and hasattr(ls.machine, "on_datagram"):
                ls.machine.on_datagram(data, src)
            return
        if is_handshake(data):
            ls = self._routes.get((id(sock), src))
            if ls is not None:
                self._on_handshake_body(ls, data)
            return
        ls = self._channels.get(data[:8])
        if ls is not None:
            ls.on_body(data, src)
            return
        ls = self._routes.get((id(sock), src))
        if ls is not None and not ls.encrypted:
            ls.on_body(data, src)
            return
        if data[:1] == b"{":
            try:
                obj = json.loads(data)
            except ValueError:
                return
            if obj.get("type") == "observed":
                self._classifier.on_observed(obj)
