"""Simulator semantics: clock ordering, NAT behavior, impairments,
control channels, and run-to-run determinism."""

import pytest

from bdmesh.errors import InvalidParametersError, PortsExhaustedError, SimulationError
from bdmesh.netsim import (
    FilteringMode,
    LinkPolicy,
    MappingMode,
    NatProfile,
    Network,
    PortAlloc,
    VirtualClock,
)
from bdmesh.probability import PortSpace


def collector():
    got = []

    def handler(payload, src, sock):
        got.append((sock.host.net.now_us, payload, src))

    return got, handler


class TestVirtualClock:
    def test_orders_by_time_then_sequence(self):
        clock = VirtualClock()
        fired = []
        clock.schedule_at(50, lambda: fired.append("b"))
        clock.schedule_at(10, lambda: fired.append("a"))
        clock.schedule_at(50, lambda: fired.append("c"))
        assert clock.run_until(100) == 3
        assert fired == ["a", "b", "c"]

    def test_time_advances_to_target_without_events(self):
        clock = VirtualClock()
        clock.run_until(500)
        assert clock.now_us == 500
        clock.run_until(100)  # never moves backwards
        assert clock.now_us == 500

    def test_events_scheduled_during_run_fire_in_same_run(self):
        clock = VirtualClock()
        fired = []
        clock.schedule_at(10, lambda: clock.schedule(5, lambda: fired.append("nested")))
        clock.run_until(100)
        assert fired == ["nested"]
        assert clock.now_us == 100

    def test_cancelled_timer_does_not_fire_or_count(self):
        clock = VirtualClock()
        fired = []
        timer = clock.call_later(10, lambda: fired.append("x"))
        clock.call_later(20, lambda: fired.append("y"))
        timer.cancel()
        assert not timer.active
        assert clock.run_until(100) == 1
        assert fired == ["y"]


def easy_pair(net):
    """Host behind an easy NAT plus a public peer; returns both."""
    nat = net.add_nat(NatProfile.easy("n1"))
    inside = net.add_host("inside", nat=nat)
    public = net.add_host("pub")
    return inside, public


class TestNatMapping:
    def test_endpoint_independent_reuses_port_across_destinations(self):
        net = Network(seed=1)
        inside, public = easy_pair(net)
        other = net.add_host("other")
        got_a, handler_a = collector()
        got_b, handler_b = collector()
        public.bind(handler_a, 5000)
        other.bind(handler_b, 5000)
        sock = inside.bind(lambda *a: None)
        sock.send((public.ip, 5000), b"one")
        sock.send((other.ip, 5000), b"two")
        net.run_for(10_000)
        assert got_a[0][2] == got_b[0][2]  # same external endpoint seen

    def test_endpoint_dependent_allocates_per_destination(self):
        net = Network(seed=1)
        nat = net.add_nat(NatProfile.hard("n1"))
        inside = net.add_host("inside", nat=nat)
        a, b = net.add_host("a"), net.add_host("b")
        got_a, handler_a = collector()
        got_b, handler_b = collector()
        a.bind(handler_a, 5000)
        b.bind(handler_b, 5000)
        sock = inside.bind(lambda *a: None)
        sock.send((a.ip, 5000), b"one")
        sock.send((b.ip, 5000), b"two")
        net.run_for(10_000)
        assert got_a[0][2][0] == got_b[0][2][0] == nat.public_ip
        assert got_a[0][2][1] != got_b[0][2][1]

    def test_mapping_refresh_and_expiry(self):
        net = Network(seed=2)
        nat = net.add_nat(NatProfile.easy("n1", mapping_ttl_s=1.0))
        inside = net.add_host("inside", nat=nat)
        public = net.add_host("pub")
        got_pub, handler = collector()
        pub_sock = public.bind(handler, 5000)
        got_in, handler_in = collector()
        in_sock = inside.bind(handler_in, 7000)

        in_sock.send((public.ip, 5000), b"hello")
        net.run_for(5_000)
        ext = got_pub[0][2]

        # Refresh at 0.6 s keeps the mapping alive past the original TTL.
        net.run_until(600_000)
        in_sock.send((public.ip, 5000), b"refresh")
        net.run_until(1_200_000)
        pub_sock.send(ext, b"back")
        net.run_for(5_000)
        assert [p for _, p, _ in got_in] == [b"back"]

        # After a full idle TTL the inbound path goes dark.
        net.run_until(2_700_000)
        pub_sock.send(ext, b"late")
        net.run_for(5_000)
        assert len(got_in) == 1
        assert nat.live_mappings(net.now_us) == 0

    def test_expired_mapping_port_is_reusable(self):
        net = Network(seed=3)
        space = PortSpace(2000, 2003)
        nat = net.add_nat(NatProfile.easy("n1", mapping_ttl_s=0.5, alloc_space=space))
        inside = net.add_host("inside", nat=nat)
        public = net.add_host("pub")
        public.bind(lambda *a: None, 5000)
        # Four distinct internal sockets exhaust the 4-port space.
        for i in range(4):
            inside.bind(lambda *a: None, 7000 + i).send((public.ip, 5000), b"x")
        net.run_for(1000)
        with pytest.raises(PortsExhaustedError):
            nat.outbound((inside.ip, 7100), (public.ip, 5000), net.now_us)
        # Once the TTL passes, allocation succeeds again.
        assert space.contains(nat.outbound((inside.ip, 7100), (public.ip, 5000), net.now_us + 600_000))

    def test_sequential_allocation_walks_the_space(self):
        net = Network(seed=4)
        space = PortSpace(3000, 3009)
        nat = net.add_nat(NatProfile("n1", port_alloc=PortAlloc.SEQUENTIAL, alloc_space=space))
        inside = net.add_host("inside", nat=nat)
        ports = [nat.outbound((inside.ip, 7000 + i), ("10.9.9.9", 1), 0) for i in range(4)]
        assert ports == [3000, 3001, 3002, 3003]

    def test_uniform_allocation_spreads_over_space(self):
        # First allocation over many seeds: chi-square against uniform,
        # 15 dof, 99.9th percentile ~ 37.7.
        counts = [0] * 16
        space = PortSpace(1, 16)
        for seed in range(20000):
            net = Network(seed=seed)
            nat = net.add_nat(NatProfile.easy("n1", alloc_space=space))
            inside = net.add_host("inside", nat=nat)
            counts[nat.outbound((inside.ip, 7000), ("10.9.9.9", 1), 0) - 1] += 1
        expected = 20000 / 16
        chi2 = sum((c - expected) ** 2 / expected for c in counts)
        assert chi2 < 37.7, chi2


class TestNatFiltering:
    @staticmethod
    def world(filtering):
        net = Network(seed=5)
        nat = net.add_nat(NatProfile("n1", filtering=filtering))
        inside = net.add_host("inside", nat=nat)
        peer = net.add_host("peer")
        stranger = net.add_host("stranger")
        got, handler = collector()
        in_sock = inside.bind(handler, 7000)
        peer.bind(lambda *a: None, 5000)
        peer.bind(lambda *a: None, 5001)
        stranger.bind(lambda *a: None, 5000)
        in_sock.send((peer.ip, 5000), b"open")
        net.run_for(5_000)
        ext = (nat.public_ip, nat.outbound((inside.ip, 7000), (peer.ip, 5000), net.now_us))
        return net, peer, stranger, ext, got

    def test_endpoint_independent_accepts_anyone(self):
        net, peer, stranger, ext, got = self.world(FilteringMode.ENDPOINT_INDEPENDENT)
        stranger.sockets[5000].send(ext, b"hi")
        net.run_for(5_000)
        assert [p for _, p, _ in got] == [b"hi"]

    def test_address_dependent_requires_known_ip(self):
        net, peer, stranger, ext, got = self.world(FilteringMode.ADDRESS_DEPENDENT)
        stranger.sockets[5000].send(ext, b"nope")
        peer.sockets[5001].send(ext, b"same-ip-new-port")
        net.run_for(5_000)
        assert [p for _, p, _ in got] == [b"same-ip-new-port"]

    def test_address_and_port_dependent_requires_exact_endpoint(self):
        net, peer, stranger, ext, got = self.world(FilteringMode.ADDRESS_AND_PORT_DEPENDENT)
        peer.sockets[5001].send(ext, b"nope")
        stranger.sockets[5000].send(ext, b"nope")
        peer.sockets[5000].send(ext, b"yes")
        net.run_for(5_000)
        assert [p for _, p, _ in got] == [b"yes"]


class TestDatagramPath:
    def test_delivery_time_is_sender_latency(self):
        net = Network(seed=6)
        a = net.add_host("a", link=LinkPolicy(latency_us=7_500))
        b = net.add_host("b")
        got, handler = collector()
        b.bind(handler, 5000)
        a.bind(lambda *a_: None).send((b.ip, 5000), b"x")
        net.run_for(100_000)
        assert got[0][0] == 7_500

    def test_jitter_stays_within_bound(self):
        net = Network(seed=7)
        a = net.add_host("a", link=LinkPolicy(latency_us=1000, jitter_us=500))
        b = net.add_host("b")
        got, handler = collector()
        b.bind(handler, 5000)
        sock = a.bind(lambda *a_: None)
        for _ in range(200):
            sock.send((b.ip, 5000), b"x")
        net.run_for(100_000)
        times = [t for t, _, _ in got]
        assert all(1000 <= t <= 1500 for t in times)
        assert len(set(times)) > 1

    def test_loss_drops_roughly_half_at_fifty_percent(self):
        net = Network(seed=8)
        a = net.add_host("a", link=LinkPolicy(loss=0.5))
        b = net.add_host("b")
        got, handler = collector()
        b.bind(handler, 5000)
        sock = a.bind(lambda *a_: None)
        for _ in range(2000):
            sock.send((b.ip, 5000), b"x")
        net.run_for(100_000)
        assert 880 <= len(got) <= 1120  # ~5 sigma around 1000

    def test_lost_packet_still_creates_mapping(self):
        net = Network(seed=9)
        nat = net.add_nat(NatProfile.easy("n1"))
        inside = net.add_host("inside", nat=nat, link=LinkPolicy(loss=0.999999))
        public = net.add_host("pub")
        public.bind(lambda *a: None, 5000)
        inside.bind(lambda *a: None, 7000).send((public.ip, 5000), b"x")
        net.run_for(10_000)
        assert nat.live_mappings(net.now_us) == 1

    def test_udp_blocked_blocks_both_directions(self):
        net = Network(seed=10)
        a = net.add_host("a", link=LinkPolicy(udp_blocked=True))
        b = net.add_host("b")
        got_a, handler_a = collector()
        got_b, handler_b = collector()
        a.bind(handler_a, 5000)
        b.bind(handler_b, 5000)
        a.sockets[5000].send((b.ip, 5000), b"out")
        b.sockets[5000].send((a.ip, 5000), b"in")
        net.run_for(10_000)
        assert got_a == [] and got_b == []

    def test_dead_letters(self):
        net = Network(seed=11)
        a = net.add_host("a")
        nat = net.add_nat(NatProfile.easy("n1"))
        hidden = net.add_host("hidden", nat=nat)
        sock = a.bind(lambda *a_: None)
        sock.send(("172.16.0.9", 5000), b"unknown ip")
        sock.send((a.ip, 9), b"no socket")
        sock.send((hidden.ip, 5000), b"private address")
        net.run_for(10_000)
        assert net.stats["dead_letters"] == 3

    def test_hairpin_between_hosts_behind_same_nat(self):
        net = Network(seed=12)
        nat = net.add_nat(NatProfile.easy("n1"))
        a = net.add_host("a", nat=nat)
        b = net.add_host("b", nat=nat)
        got_b, handler_b = collector()
        b.bind(handler_b, 7000)
        ext_b = (nat.public_ip, nat.outbound((b.ip, 7000), ("10.99.0.1", 1), 0))
        a.bind(lambda *a_: None).send(ext_b, b"hairpin")
        net.run_for(10_000)
        assert [p for _, p, _ in got_b] == [b"hairpin"]

    def test_oversize_datagram_rejected(self):
        net = Network(seed=13)
        a = net.add_host("a")
        sock = a.bind(lambda *a_: None)
        with pytest.raises(InvalidParametersError):
            sock.send(("10.1.2.3", 1), b"x" * 1201)

    def test_send_on_closed_socket_rejected(self):
        net = Network(seed=14)
        a = net.add_host("a")
        sock = a.bind(lambda *a_: None)
        sock.close()
        with pytest.raises(SimulationError):
            sock.send(("10.1.2.3", 1), b"x")


class TestControlChannels:
    def test_lines_arrive_in_order(self):
        net = Network(seed=15)
        client = net.add_host("c", link=LinkPolicy(latency_us=1000, jitter_us=0))
        server = net.add_host("s")
        seen = []

        def acceptor(end):
            end.on_line = lambda obj: seen.append(obj["n"])

        server.listen_channel(4500, acceptor)
        ch = net.connect_channel(client, server, 4500)
        for n in range(50):
            ch.send({"n": n})
        net.run_for(1_000_000)
        assert seen == list(range(50))

    def test_observed_endpoint_for_natted_client(self):
        net = Network(seed=16)
        nat = net.add_nat(NatProfile.hard("n1"))
        client = net.add_host("c", nat=nat)
        server = net.add_host("s")
        ends = []
        server.listen_channel(4500, ends.append)
        ch = net.connect_channel(client, server, 4500)
        net.run_for(10_000)
        assert ends[0].peer_observed[0] == nat.public_ip
        assert ch.peer_observed == (server.ip, 4500)

    def test_bidirectional_and_close_notification(self):
        net = Network(seed=17)
        client = net.add_host("c")
        server = net.add_host("s")
        server_seen, client_seen, closed = [], [], []

        def acceptor(end):
            end.on_line = server_seen.append
            end.on_close = lambda: closed.append("server")
            end.send({"hello": "from server"})

        server.listen_channel(4500, acceptor)
        ch = net.connect_channel(client, server, 4500)
        ch.on_line = client_seen.append
        ch.send({"hello": "from client"})
        net.run_for(50_000)
        assert server_seen == [{"hello": "from client"}]
        assert client_seen == [{"hello": "from server"}]
        ch.close()
        net.run_for(50_000)
        assert closed == ["server"]
        with pytest.raises(SimulationError):
            ch.send({"too": "late"})

    def test_oversize_line_rejected(self):
        net = Network(seed=18)
        client = net.add_host("c")
        server = net.add_host("s")
        server.listen_channel(4500, lambda end: None)
        ch = net.connect_channel(client, server, 4500)
        with pytest.raises(InvalidParametersError):
            ch.send({"blob": "x" * 9000})


class TestDeterminism:
    @staticmethod
    def run_world(seed):
        net = Network(seed=seed, trace=True)
        nat_a = net.add_nat(NatProfile.hard("na"))
        nat_b = net.add_nat(NatProfile.easy("nb"))
        a = net.add_host("a", nat=nat_a, link=LinkPolicy(loss=0.1, jitter_us=300))
        b = net.add_host("b", nat=nat_b, link=LinkPolicy(loss=0.1, jitter_us=300))
        got, handler = collector()
        sock_b = b.bind(handler, 7000)
        ext_b = (nat_b.public_ip, nat_b.outbound((b.ip, 7000), ("10.50.0.1", 1), 0))
        sock_a = a.bind(lambda *a_: None, 7000)
        for i in range(300):
            sock_a.send(ext_b, b"m%d" % i)
        net.run_for(1_000_000)
        return net.trace.digest(), len(got)

    def test_same_seed_same_trace(self):
        d1, n1 = self.run_world(42)
        d2, n2 = self.run_world(42)
        assert d1 == d2 and n1 == n2

    def test_different_seed_different_trace(self):
        d1, _ = self.run_world(42)
        d2, _ = self.run_world(43)
        assert d1 != d2

    def test_trace_records_drops_with_reasons(self):
        net = Network(seed=19, trace=True)
        a = net.add_host("a", link=LinkPolicy(udp_blocked=True))
        a.bind(lambda *a_: None, 5000).send(("10.2.3.4", 1), b"x")
        net.run_for(10_000)
        kinds = [(e["kind"], e["info"]) for e in net.trace.entries]
        assert ("drop", "udp-blocked") in kinds
