"""End-to-end agent flows over the simulator: classify, introduce,
punch (direct and birthday), relay fallback, handshake, payload."""

import base64
import hashlib
import json

from bdmesh.agent import NodeAgent
from bdmesh.netsim import LinkPolicy, NatProfile, Network
from bdmesh.rendezvous import Coordinator


def make_world(seed=100, punch=None, trace=False):
    net = Network(seed=seed, trace=trace)
    coord_host = net.add_host("coord")
    coord = Coordinator(rng=net.rng, punch=punch, now_fn=lambda: net.now_us / 1e6)
    coord.bind_sim(net, coord_host)
    return net, coord_host, coord


def spawn(net, coord_host, node_id, nat_profile=None, link=None, host_name=None, **kw):
    nat = net.add_nat(nat_profile) if nat_profile is not None else None
    host = net.add_host(host_name or f"h-{node_id}", nat=nat, link=link)
    agent = NodeAgent.sim(net, host, coord_host, node_id, **kw)
    agent.start()
    return agent, host


def wait(net, cond, timeout_s=30.0, step_ms=20):
    deadline = net.now_us + int(timeout_s * 1_000_000)
    while not cond() and net.now_us < deadline:
        net.run_until(min(deadline, net.now_us + step_ms * 1000))
    return cond()


def sniff(net):
    """Record every wire payload; relay lines are base64-expanded."""
    captured = []

    def on_wire(kind, src, dst, payload):
        captured.append(payload)
        if kind == "ctrl":
            try:
                obj = json.loads(payload)
            except ValueError:
                return
            if isinstance(obj, dict) and obj.get("type") == "relay_data":
                captured.append(base64.b64decode(obj.get("payload_b64", "")))

    net.on_wire = on_wire
    return captured


def linked(a, b, peer_a, peer_b):
    return lambda: peer_b in a.links and peer_a in b.links


class TestDirectLink:
    def test_public_pair_direct_encrypted(self):
        net, coord_host, coord = make_world(seed=101)
        a, _ = spawn(net, coord_host, "alpha")
        b, _ = spawn(net, coord_host, "beta")
        assert wait(net, lambda: a.ready and b.ready, 5.0)
        assert a.nat_class == "public" and b.nat_class == "public"
        wire = sniff(net)
        a.connect("beta")
        assert wait(net, linked(a, b, "alpha", "beta"), 10.0)
        link_ab, link_ba = a.links["beta"], b.links["alpha"]
        assert link_ab.path == link_ba.path == "direct"
        assert link_ab.encrypted and link_ba.encrypted
        got = []
        link_ba.on_payload = got.append
        link_ab.send(b"plaintext-marker/0001")
        net.run_for(1_000_000)
        assert got == [b"plaintext-marker/0001"]
        assert not any(b"plaintext-marker" in w for w in wire)

    def test_easy_pair_direct(self):
        net, coord_host, _ = make_world(seed=102)
        a, _ = spawn(net, coord_host, "alpha", NatProfile.easy("na"))
        b, _ = spawn(net, coord_host, "beta", NatProfile.easy("nb"))
        assert wait(net, lambda: a.ready and b.ready, 5.0)
        assert a.nat_class == "easy" and b.nat_class == "easy"
        a.connect("beta")
        assert wait(net, linked(a, b, "alpha", "beta"), 10.0)
        assert a.links["beta"].path == "direct"

    def test_unencrypted_link_shows_plaintext(self):
        net, coord_host, _ = make_world(seed=103)
        a, _ = spawn(net, coord_host, "alpha", default_encrypted=False)
        b, _ = spawn(net, coord_host, "beta", default_encrypted=False)
        assert wait(net, lambda: a.ready and b.ready, 5.0)
        wire = sniff(net)
        a.connect("beta")
        assert wait(net, linked(a, b, "alpha", "beta"), 10.0)
        got = []
        b.links["alpha"].on_payload = got.append
        a.links["beta"].send(b"plaintext-marker/0002")
        net.run_for(1_000_000)
        assert got == [b"plaintext-marker/0002"]
        assert any(b"plaintext-marker/0002" in w for w in wire)
        assert not a.links["beta"].encrypted


class TestBirthdayLink:
    def test_hard_easy_pair_uses_birthday_punch(self):
        net, coord_host, _ = make_world(
            seed=104, punch={"open_ports": 256, "rate": 100.0, "max_seconds": 20.0})
        events = []
        a, _ = spawn(net, coord_host, "alpha", NatProfile.hard("na"),
                     on_event=events.append)
        b, _ = spawn(net, coord_host, "beta", NatProfile.easy("nb"),
                     on_event=events.append)
        assert wait(net, lambda: a.ready and b.ready, 5.0)
        assert a.nat_class == "hard" and b.nat_class == "easy"
        b.connect("alpha")
        assert wait(net, linked(a, b, "alpha", "beta"), 30.0)
        assert a.links["beta"].path == "direct"
        assert b.links["alpha"].path == "direct"
        # The prober reports how many ports it tried.
        prober_up = [e for e in events if e["event"] == "link_up" and e["peer"] == "alpha"]
        assert prober_up and prober_up[0]["probes"] >= 1
        got = []
        a.links["beta"].on_payload = got.append
        b.links["alpha"].send(b"through the pinhole")
        net.run_for(1_000_000)
        assert got == [b"through the pinhole"]

    def test_hard_public_pair(self):
        net, coord_host, _ = make_world(seed=105)
        a, _ = spawn(net, coord_host, "alpha", NatProfile.hard("na"))
        b, _ = spawn(net, coord_host, "beta")
        assert wait(net, lambda: a.ready and b.ready, 5.0)
        a.connect("beta")
        assert wait(net, linked(a, b, "alpha", "beta"), 30.0)
        assert a.links["beta"].path == "direct"


class TestRelayLink:
    def test_hard_hard_pair_is_relayed(self):
        net, coord_host, coord = make_world(seed=106)
        a, _ = spawn(net, coord_host, "alpha", NatProfile.hard("na"))
        b, _ = spawn(net, coord_host, "beta", NatProfile.hard("nb"))
        assert wait(net, lambda: a.ready and b.ready, 5.0)
        wire = sniff(net)
        a.connect("beta")
        assert wait(net, linked(a, b, "alpha", "beta"), 10.0)
        assert a.links["beta"].path == "relayed"
        assert b.links["alpha"].path == "relayed"
        got = []
        b.links["alpha"].on_payload = got.append
        a.links["beta"].send(b"plaintext-marker/0003")
        net.run_for(1_000_000)
        assert got == [b"plaintext-marker/0003"]
        # Encrypted even across the relay: the marker never shows.
        assert not any(b"plaintext-marker" in w for w in wire)
        assert sum(s.relayed_bytes for s in coord.sessions.values()) > 0

    def test_udp_blocked_node_is_relayed(self):
        net, coord_host, _ = make_world(seed=107)
        a, _ = spawn(net, coord_host, "alpha", link=LinkPolicy(udp_blocked=True))
        b, _ = spawn(net, coord_host, "beta")
        assert wait(net, lambda: a.ready and b.ready, 10.0)
        assert a.nat_class == "udp_blocked"
        a.connect("beta")
        assert wait(net, linked(a, b, "alpha", "beta"), 10.0)
        assert a.links["beta"].path == "relayed"

    def test_punch_failure_falls_back_to_relay(self):
        net, coord_host, _ = make_world(seed=108)
        a, host_a = spawn(net, coord_host, "alpha")
        b, host_b = spawn(net, coord_host, "beta")
        assert wait(net, lambda: a.ready and b.ready, 5.0)
        # UDP dies after classification: both direct punches must time
        # out and the session must recover over the relay.
        host_a.link = LinkPolicy(udp_blocked=True)
        host_b.link = LinkPolicy(udp_blocked=True)
        a.connect("beta")
        assert wait(net, linked(a, b, "alpha", "beta"), 30.0)
        assert a.links["beta"].path == "relayed"
        assert b.links["alpha"].path == "relayed"

    def test_large_payload_relayed_intact(self):
        net, coord_host, _ = make_world(seed=109)
        a, _ = spawn(net, coord_host, "alpha", NatProfile.hard("na"))
        b, _ = spawn(net, coord_host, "beta", NatProfile.hard("nb"))
        assert wait(net, lambda: a.ready and b.ready, 5.0)
        a.connect("beta")
        assert wait(net, linked(a, b, "alpha", "beta"), 10.0)
        blob = bytes(i % 251 for i in range(65536))
        chunks = []
        b.links["alpha"].on_payload = chunks.append
        a.links["beta"].send(blob)
        assert wait(net, lambda: sum(len(c) for c in chunks) >= len(blob), 30.0)
        got = b"".join(chunks)
        assert hashlib.sha256(got).hexdigest() == hashlib.sha256(blob).hexdigest()


class TestAgentEdges:
    def test_identity_conflict_is_fatal(self):
        net, coord_host, _ = make_world(seed=110)
        a1, _ = spawn(net, coord_host, "alpha")
        a2, _ = spawn(net, coord_host, "alpha", host_name="h-imposter")  # same id, fresh key
        wait(net, lambda: a1.ready, 5.0)
        net.run_for(3_000_000)
        assert a2.fatal_error == "identity-conflict"

    def test_link_encryption_override(self):
        net, coord_host, _ = make_world(seed=111)
        a, _ = spawn(net, coord_host, "alpha", default_encrypted=True)
        b, _ = spawn(net, coord_host, "beta", default_encrypted=True)
        a.link_encryption["beta"] = False
        b.link_encryption["alpha"] = False
        assert wait(net, lambda: a.ready and b.ready, 5.0)
        a.connect("beta")
        assert wait(net, linked(a, b, "alpha", "beta"), 10.0)
        assert not a.links["beta"].encrypted and not b.links["alpha"].encrypted

    def test_deterministic_event_stream(self):
        def run():
            net, coord_host, _ = make_world(seed=112, trace=True)
            a, _ = spawn(net, coord_host, "alpha", NatProfile.hard("na"))
            b, _ = spawn(net, coord_host, "beta", NatProfile.easy("nb"))
            wait(net, lambda: a.ready and b.ready, 5.0)
            b.connect("alpha")
            wait(net, linked(a, b, "alpha", "beta"), 30.0)
            got = []
            if "alpha" in b.links:
                a.links["beta"].on_payload = got.append
                b.links["alpha"].send(b"ping")
                net.run_for(1_000_000)
            return net.trace.digest(), bool(got)

        first, second = run(), run()
        assert first == second
        assert first[1]

    def test_empty_payload_travels(self):
        net, coord_host, _ = make_world(seed=113)
        a, _ = spawn(net, coord_host, "alpha")
        b, _ = spawn(net, coord_host, "beta")
        assert wait(net, lambda: a.ready and b.ready, 5.0)
        a.connect("beta")
        assert wait(net, linked(a, b, "alpha", "beta"), 10.0)
        got = []
        b.links["alpha"].on_payload = got.append
        a.links["beta"].send(b"")
        net.run_for(1_000_000)
        assert got == [b""]
