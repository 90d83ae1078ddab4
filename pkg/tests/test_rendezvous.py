"""Coordinator protocol: registration, observation, introductions with
role assignment, and the relay path."""

import base64

import pytest

from bdmesh.netsim import NatProfile, Network
from bdmesh.rendezvous import (
    DEFAULT_PUNCH,
    MAX_RELAY_CHUNK,
    Coordinator,
    assign_roles,
)

KEY_A = base64.b64encode(bytes(range(32))).decode()
KEY_B = base64.b64encode(bytes(range(1, 33))).decode()
KEY_C = base64.b64encode(bytes(range(2, 34))).decode()


class TestRoleTable:
    def test_full_matrix(self):
        classes = ("public", "easy", "hard", "udp_blocked", "unknown")
        reachable = {"public", "easy"}
        for a in classes:
            for b in classes:
                roles = assign_roles(a, b)
                if a in ("udp_blocked", "unknown") or b in ("udp_blocked", "unknown"):
                    assert roles == ("relay", "relay"), (a, b)
                elif a == b == "hard":
                    assert roles == ("relay", "relay")
                elif a == "hard":
                    assert roles == ("opener", "prober"), (a, b)
                elif b == "hard":
                    assert roles == ("prober", "opener"), (a, b)
                else:
                    assert a in reachable and b in reachable
                    assert roles == ("direct", "direct"), (a, b)

    def test_symmetry(self):
        classes = ("public", "easy", "hard", "udp_blocked", "unknown")
        for a in classes:
            for b in classes:
                ra, rb = assign_roles(a, b)
                rb2, ra2 = assign_roles(b, a)
                assert (ra, rb) == (ra2, rb2)


class Client:
    def __init__(self, net, host, coord_host, port=4500):
        self.inbox = []
        self.ch = net.connect_channel(host, coord_host, port)
        self.ch.on_line = self.inbox.append

    def send(self, **msg):
        self.ch.send(msg)

    def of_type(self, type_):
        return [m for m in self.inbox if m["type"] == type_]

    def last_error(self):
        errs = self.of_type("error")
        return errs[-1]["error"] if errs else None


def world(ttl_s=60.0, punch=None):
    net = Network(seed=50)
    coord_host = net.add_host("coord")
    coord = Coordinator(rng=net.rng, punch=punch, registration_ttl_s=ttl_s,
                        now_fn=lambda: net.now_us / 1e6)
    coord.bind_sim(net, coord_host)
    return net, coord_host, coord


def register(net, client, node, key, **extra):
    client.send(type="register", node=node, pubkey_b64=key, **extra)
    net.run_for(20_000)


class TestRegistration:
    def test_register_returns_observed_endpoint(self):
        net, coord_host, coord = world()
        nat = net.add_nat(NatProfile.easy("n"))
        host = net.add_host("a", nat=nat)
        client = Client(net, host, coord_host)
        register(net, client, "a", KEY_A)
        reply = client.of_type("registered")[0]
        assert reply["node"] == "a"
        assert reply["observed"]["ip"] == nat.public_ip
        assert coord.nodes["a"].pubkey == base64.b64decode(KEY_A)

    def test_register_with_nat_class_and_udp_endpoint(self):
        net, coord_host, coord = world()
        host = net.add_host("a")
        client = Client(net, host, coord_host)
        register(net, client, "a", KEY_A, nat_class="easy",
                 udp_endpoint={"ip": "198.18.0.1", "port": 4242})
        assert coord.nodes["a"].nat_class == "easy"
        assert coord.nodes["a"].udp_endpoint == ("198.18.0.1", 4242)

    def test_bad_node_or_key_rejected(self):
        net, coord_host, _ = world()
        host = net.add_host("a")
        client = Client(net, host, coord_host)
        register(net, client, "", KEY_A)
        assert client.last_error() == "bad-message"
        register(net, client, "x" * 65, KEY_A)
        assert client.last_error() == "bad-message"
        client.send(type="register", node="a", pubkey_b64="def!!not-base64")
        net.run_for(20_000)
        assert client.last_error() == "bad-message"
        client.send(type="register", node="a", pubkey_b64=base64.b64encode(b"short").decode())
        net.run_for(20_000)
        assert len(client.of_type("error")) == 4

    def test_identity_conflict(self):
        net, coord_host, _ = world()
        a1 = Client(net, net.add_host("h1"), coord_host)
        a2 = Client(net, net.add_host("h2"), coord_host)
        register(net, a1, "a", KEY_A)
        register(net, a2, "a", KEY_B)
        assert a2.last_error() == "identity-conflict"
        # Same key may re-register (reconnect) without conflict.
        register(net, a2, "a", KEY_A)
        assert len(a2.of_type("registered")) == 1

    def test_registration_expires(self):
        net, coord_host, coord = world(ttl_s=1.0)
        a = Client(net, net.add_host("h1"), coord_host)
        b = Client(net, net.add_host("h2"), coord_host)
        register(net, a, "a", KEY_A)
        register(net, b, "b", KEY_B)
        net.run_until(2_000_000)
        a.send(type="introduce_request", peer="b")
        net.run_for(20_000)
        assert a.last_error() == "no-such-node"

    def test_ping_refreshes_registration(self):
        net, coord_host, _ = world(ttl_s=1.0)
        a = Client(net, net.add_host("h1"), coord_host)
        b = Client(net, net.add_host("h2"), coord_host)
        register(net, a, "a", KEY_A)
        register(net, b, "b", KEY_B)
        for _ in range(4):
            net.run_for(600_000)
            b.send(type="ping", nonce=7)
        net.run_for(20_000)
        assert b.of_type("pong")[0]["nonce"] == 7
        a.send(type="introduce_request", peer="b")
        net.run_for(20_000)
        assert a.of_type("introduce")


class TestObservation:
    def test_channel_observe(self):
        net, coord_host, _ = world()
        host = net.add_host("a")
        client = Client(net, host, coord_host)
        client.send(type="observe", token=5)
        net.run_for(20_000)
        assert client.last_error() == "not-registered"
        register(net, client, "a", KEY_A)
        client.send(type="observe", token=6)
        net.run_for(20_000)
        obs = client.of_type("observed")[0]
        assert obs["token"] == 6
        assert obs["endpoint"]["ip"] == host.ip

    def test_udp_observer_reflects_source(self):
        net, coord_host, coord = world()
        host = net.add_host("a")
        got = []
        sock = host.bind(lambda data, src, s: got.append(data), 7000)
        sock.send((coord_host.ip, 3478), b'{"type":"observe","token":9}')
        sock.send((coord_host.ip, 3479), b"not json at all")
        net.run_for(20_000)
        assert len(got) == 1
        import json

        reply = json.loads(got[0])
        assert reply == {"type": "observed", "token": 9,
                         "endpoint": {"ip": host.ip, "port": 7000}}

    def test_unknown_type_keeps_connection(self):
        net, coord_host, _ = world()
        client = Client(net, net.add_host("a"), coord_host)
        client.send(type="teleport")
        net.run_for(20_000)
        assert client.last_error() == "unknown-type"
        register(net, client, "a", KEY_A)
        assert client.of_type("registered")


class TestIntroduce:
    @staticmethod
    def pair(net, coord_host, class_a, class_b, punch=None):
        a = Client(net, net.add_host("ha"), coord_host)
        b = Client(net, net.add_host("hb"), coord_host)
        register(net, a, "a", KEY_A, nat_class=class_a,
                 udp_endpoint={"ip": "198.18.5.1", "port": 1111})
        register(net, b, "b", KEY_B, nat_class=class_b,
                 udp_endpoint={"ip": "198.18.5.2", "port": 2222})
        a.send(type="introduce_request", peer="b")
        net.run_for(20_000)
        return a, b

    def test_introduce_reaches_both_with_mirrored_roles(self):
        net, coord_host, coord = world()
        a, b = self.pair(net, coord_host, "easy", "hard")
        ia, ib = a.of_type("introduce")[0], b.of_type("introduce")[0]
        assert ia["session_id"] == ib["session_id"]
        assert (ia["role"], ib["role"]) == ("prober", "opener")
        assert ia["peer"] == "b" and ib["peer"] == "a"
        assert ia["peer_nat"] == "hard" and ib["peer_nat"] == "easy"
        assert ia["peer_endpoint"] == {"ip": "198.18.5.2", "port": 2222}
        assert ib["peer_endpoint"] == {"ip": "198.18.5.1", "port": 1111}
        assert ia["peer_pubkey_b64"] == KEY_B and ib["peer_pubkey_b64"] == KEY_A
        assert ia["punch"] == DEFAULT_PUNCH == ib["punch"]

    def test_punch_parameters_flow_through(self):
        net, coord_host, _ = world(punch={"open_ports": 512, "max_seconds": 10.0})
        a, b = self.pair(net, coord_host, "easy", "easy")
        punch = a.of_type("introduce")[0]["punch"]
        assert punch == {"open_ports": 512, "rate": 100.0, "max_seconds": 10.0}

    @pytest.mark.parametrize("pair_classes,want", [
        (("public", "public"), ("direct", "direct")),
        (("hard", "easy"), ("opener", "prober")),
        (("hard", "hard"), ("relay", "relay")),
        (("public", "udp_blocked"), ("relay", "relay")),
        (("easy", "unknown"), ("relay", "relay")),
    ])
    def test_role_matrix_applied(self, pair_classes, want):
        net, coord_host, _ = world()
        a, b = self.pair(net, coord_host, *pair_classes)
        assert (a.of_type("introduce")[0]["role"],
                b.of_type("introduce")[0]["role"]) == want

    def test_failures(self):
        net, coord_host, _ = world()
        a = Client(net, net.add_host("ha"), coord_host)
        a.send(type="introduce_request", peer="b")
        net.run_for(20_000)
        assert a.last_error() == "not-registered"
        register(net, a, "a", KEY_A)
        a.send(type="introduce_request", peer="ghost")
        net.run_for(20_000)
        assert a.last_error() == "no-such-node"
        a.send(type="introduce_request", peer="a")
        net.run_for(20_000)
        assert a.last_error() == "bad-message"


def relay_world():
    net, coord_host, coord = world()
    a = Client(net, net.add_host("ha"), coord_host)
    b = Client(net, net.add_host("hb"), coord_host)
    register(net, a, "a", KEY_A, nat_class="hard")
    register(net, b, "b", KEY_B, nat_class="hard")
    a.send(type="introduce_request", peer="b")
    net.run_for(20_000)
    sid = a.of_type("introduce")[0]["session_id"]
    return net, coord, a, b, sid


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode()


class TestRelay:
    def test_opens_when_both_sides_open(self):
        net, coord, a, b, sid = relay_world()
        a.send(type="relay_open", session_id=sid)
        net.run_for(20_000)
        assert a.of_type("relay_opened") == [] and b.of_type("relay_opened") == []
        b.send(type="relay_open", session_id=sid)
        net.run_for(20_000)
        assert a.of_type("relay_opened")[0]["session_id"] == sid
        assert b.of_type("relay_opened")[0]["session_id"] == sid

    def test_data_forwarded_both_ways(self):
        net, coord, a, b, sid = relay_world()
        a.send(type="relay_open", session_id=sid)
        b.send(type="relay_open", session_id=sid)
        net.run_for(20_000)
        a.send(type="relay_data", session_id=sid, payload_b64=b64(b"from a"))
        b.send(type="relay_data", session_id=sid, payload_b64=b64(b"from b"))
        net.run_for(20_000)
        assert base64.b64decode(b.of_type("relay_data")[0]["payload_b64"]) == b"from a"
        assert base64.b64decode(a.of_type("relay_data")[0]["payload_b64"]) == b"from b"
        assert coord.sessions[sid].relayed_bytes == 12

    def test_data_before_open_rejected(self):
        net, coord, a, b, sid = relay_world()
        a.send(type="relay_data", session_id=sid, payload_b64=b64(b"x"))
        net.run_for(20_000)
        assert a.last_error() == "no-such-session"

    def test_unknown_session_and_foreign_session(self):
        net, coord, a, b, sid = relay_world()
        a.send(type="relay_open", session_id="feedfacefeedface")
        net.run_for(20_000)
        assert a.last_error() == "no-such-session"

    def test_oversize_and_bad_base64(self):
        net, coord, a, b, sid = relay_world()
        a.send(type="relay_open", session_id=sid)
        b.send(type="relay_open", session_id=sid)
        net.run_for(20_000)
        a.send(type="relay_data", session_id=sid,
               payload_b64=b64(b"x" * (MAX_RELAY_CHUNK + 1)))
        net.run_for(20_000)
        assert a.last_error() == "bad-message"
        a.send(type="relay_data", session_id=sid, payload_b64="!!!")
        net.run_for(20_000)
        assert len(a.of_type("error")) == 2

    def test_counterpart_disconnect_is_peer_gone(self):
        net, coord, a, b, sid = relay_world()
        a.send(type="relay_open", session_id=sid)
        b.send(type="relay_open", session_id=sid)
        net.run_for(20_000)
        b.ch.close()
        net.run_for(20_000)
        a.send(type="relay_data", session_id=sid, payload_b64=b64(b"x"))
        net.run_for(20_000)
        assert a.last_error() == "peer-gone"

    def test_chunked_transfer_is_order_preserving(self):
        net, coord, a, b, sid = relay_world()
        a.send(type="relay_open", session_id=sid)
        b.send(type="relay_open", session_id=sid)
        net.run_for(20_000)
        blob = bytes(range(256)) * 16  # 4096 bytes
        for i in range(0, len(blob), MAX_RELAY_CHUNK):
            a.send(type="relay_data", session_id=sid,
                   payload_b64=b64(blob[i:i + MAX_RELAY_CHUNK]))
        net.run_for(50_000)
        got = b"".join(base64.b64decode(m["payload_b64"]) for m in b.of_type("relay_data"))
        assert got == blob
