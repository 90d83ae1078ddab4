"""Scenario files: one JSON document describes hosts, NATs, link
impairments, the overlay scheme, subnets and an experiment block; this
module validates it, builds the corresponding simulated world with an
embedded coordinator, realizes the overlay and verifies it end to end.

Verification rides the established overlay links themselves: every up
link carries a marker payload each way (the receiver answers with the
payload's digest), plus an overlay ping addressed by route lookup.  A
wire sniffer watches the same window: on encrypted overlays the marker
must never appear on the wire, on plaintext overlays it must.

Runs are deterministic: the whole world hangs off one seeded RNG and a
virtual clock, so a scenario run twice with the same seed produces a
byte-identical report including the trace digest.  Multi-trial
experiments derive per-trial seeds by hashing (master seed, index),
which makes results independent of execution order.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from typing import Optional

from jsonschema import Draft202012Validator

from .agent import NodeAgent
from .errors import ScenarioError
from .meshplan import (
    MeshPlan,
    NodeSpec,
    RealizationReport,
    classify_scheme,
    plan_links,
    route_lookup,
)
from .netsim import (
    DEFAULT_MAPPING_TTL_S,
    FilteringMode,
    LinkPolicy,
    MappingMode,
    Network,
    NatProfile,
    PortAlloc,
)
from .rendezvous import Coordinator
from .traversal import PunchConfig

COORD_HOST_ID = "coord"
PAYLOAD_MARKER = b"BDMESH-PAYLOAD-MARKER"
_HASH_PREFIX = b"BDMESH-PAYLOAD-HASH|"
_PING_PREFIX = b"BDMESH-PING|"
_PONG_PREFIX = b"BDMESH-PONG|"

__all__ = [
    "SCENARIO_SCHEMA", "COORD_HOST_ID", "PAYLOAD_MARKER", "ScenarioWorld",
    "load_scenario", "validate_scenario", "build_world", "run_scenario",
    "bundled_scenario_path",
]

SCENARIO_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "bdmesh scenario",
    "type": "object",
    "required": ["hosts", "scheme"],
    "additionalProperties": False,
    "properties": {
        "hosts": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string", "minLength": 1, "maxLength": 64},
                    "nat": {"type": ["string", "null"]},
                    "kind": {"enum": ["point", "gateway"]},
                },
            },
        },
        "nats": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id"],
                "additionalProperties": False,
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "mapping": {
                        "enum": ["endpoint_independent", "endpoint_dependent"],
                    },
                    "filtering": {
                        "enum": ["endpoint_independent", "address_dependent",
                                 "address_and_port_dependent"],
                    },
                    "port_alloc": {"enum": ["uniform_random", "sequential"]},
                    "mapping_ttl_s": {"type": "number", "exclusiveMinimum": 0},
                },
            },
        },
        "links": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["host"],
                "additionalProperties": False,
                "properties": {
                    "host": {"type": "string"},
                    "loss": {"type": "number", "minimum": 0, "maximum": 1},
                    "latency_us": {"type": "integer", "minimum": 0},
                    "jitter_us": {"type": "integer", "minimum": 0},
                    "udp_blocked": {"type": "boolean"},
                },
            },
        },
        "scheme": {
            "type": "object",
            "required": ["G", "P", "theta"],
            "additionalProperties": False,
            "properties": {
                "G": {"type": "integer", "enum": [0, 1]},
                "P": {"type": "integer", "enum": [0, 1]},
                "theta": {"type": "integer", "enum": [0, 1]},
            },
        },
        "subnets": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["gateway", "cidr"],
                "additionalProperties": False,
                "properties": {
                    "gateway": {"type": "string"},
                    "cidr": {"type": "string"},
                },
            },
        },
        "experiment": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "trials": {"type": "integer", "minimum": 1, "maximum": 100000},
                "seed": {"type": "integer", "minimum": 0},
                "punch": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "open_ports": {"type": "integer", "minimum": 1},
                        "rate": {"type": "number", "exclusiveMinimum": 0},
                        "max_seconds": {"type": "number", "exclusiveMinimum": 0},
                    },
                },
            },
        },
    },
}

_VALIDATOR = Draft202012Validator(SCENARIO_SCHEMA)


def bundled_scenario_path(name: str):
    """Filesystem path of a scenario shipped with the package."""
    from importlib.resources import files
    return files("bdmesh") / "scenarios" / name


def load_scenario(path) -> dict:
    """Read and fully validate a scenario file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario is not valid JSON: {exc}") from exc
    validate_scenario(doc)
    return doc


def validate_scenario(doc) -> None:
    """Structural (JSON-schema) then referential validation.

    Raises ScenarioError whose message starts with the JSON path of the
    offending field.  The scheme combination itself is NOT classified
    here; an unsupported-but-well-formed triple is a planning concern.
    """
    errors = sorted(_VALIDATOR.iter_errors(doc), key=lambda e: e.json_path)
    if errors:
        first = errors[0]
        raise ScenarioError(f"{first.json_path}: {first.message}")

    host_ids: set[str] = set()
    kinds: dict[str, str] = {}
    for i, hd in enumerate(doc["hosts"]):
        hid = hd["id"]
        if hid == COORD_HOST_ID:
            raise ScenarioError(f"$.hosts[{i}].id: {COORD_HOST_ID!r} is reserved")
        if hid in host_ids:
            raise ScenarioError(f"$.hosts[{i}].id: duplicate host id {hid!r}")
        host_ids.add(hid)
        kinds[hid] = hd.get("kind", "point")

    nat_ids: set[str] = set()
    for i, nd in enumerate(doc.get("nats", [])):
        if nd["id"] in nat_ids:
            raise ScenarioError(f"$.nats[{i}].id: duplicate nat id {nd['id']!r}")
        nat_ids.add(nd["id"])

    for i, hd in enumerate(doc["hosts"]):
        nat = hd.get("nat")
        if nat is not None and nat not in nat_ids:
            raise ScenarioError(f"$.hosts[{i}].nat: unknown nat {nat!r}")

    linked: set[str] = set()
    for i, ld in enumerate(doc.get("links", [])):
        if ld["host"] not in host_ids:
            raise ScenarioError(f"$.links[{i}].host: unknown host {ld['host']!r}")
        if ld["host"] in linked:
            raise ScenarioError(f"$.links[{i}].host: duplicate link policy "
                                f"for {ld['host']!r}")
        linked.add(ld["host"])

    for i, sd in enumerate(doc.get("subnets", [])):
        gw = sd["gateway"]
        if gw not in host_ids:
            raise ScenarioError(f"$.subnets[{i}].gateway: unknown host {gw!r}")
        if kinds[gw] != "gateway":
            raise ScenarioError(f"$.subnets[{i}].gateway: {gw!r} is not a gateway")

    punch = (doc.get("experiment") or {}).get("punch")
    if punch:
        try:
            PunchConfig(open_ports=punch.get("open_ports", 256),
                        probe_rate=punch.get("rate", 100.0),
                        max_duration_s=punch.get("max_seconds", 20.0))
        except Exception as exc:
            raise ScenarioError(f"$.experiment.punch: {exc}") from exc


@dataclass
class ScenarioWorld:
    net: Network
    coord: Coordinator
    coord_host: object
    agents: dict
    plan: MeshPlan
    doc: dict
    seed: int
    punch: dict


def build_world(doc: dict, seed: Optional[int] = None, trace: bool = True) -> ScenarioWorld:
    """Construct the simulated world a validated scenario describes.

    Agents are started but not yet connected; the scheme is classified
    and planned here, so an unsupported combination surfaces before any
    simulated packet moves.
    """
    exp = doc.get("experiment") or {}
    if seed is None:
        seed = exp.get("seed", 0)
    scheme_doc = doc["scheme"]
    scheme = classify_scheme(int(scheme_doc["G"]), int(scheme_doc["P"]),
                             int(scheme_doc["theta"]))

    subnets_by_gw: dict[str, list[str]] = {}
    for sd in doc.get("subnets", []):
        subnets_by_gw.setdefault(sd["gateway"], []).append(sd["cidr"])
    node_specs = [
        NodeSpec(hd["id"], hd.get("kind", "point"),
                 tuple(subnets_by_gw.get(hd["id"], ())))
        for hd in doc["hosts"]
    ]
    plan = plan_links(scheme, node_specs)

    net = Network(seed=seed, trace=trace)
    coord_host = net.add_host(COORD_HOST_ID)
    punch = dict(exp.get("punch") or {})
    coord = Coordinator(rng=net.rng, punch=punch or None,
                        now_fn=lambda: net.now_us / 1e6)
    coord.bind_sim(net, coord_host)

    nats = {}
    for nd in doc.get("nats", []):
        prof = NatProfile(
            nat_id=nd["id"],
            mapping=MappingMode(nd.get("mapping", "endpoint_independent")),
            filtering=FilteringMode(nd.get("filtering", "endpoint_independent")),
            port_alloc=PortAlloc(nd.get("port_alloc", "uniform_random")),
            mapping_ttl_s=nd.get("mapping_ttl_s", DEFAULT_MAPPING_TTL_S),
        )
        nats[nd["id"]] = net.add_nat(prof)

    link_by_host = {ld["host"]: ld for ld in doc.get("links", [])}
    agents = {}
    for hd in doc["hosts"]:
        ld = link_by_host.get(hd["id"])
        pol = None
        if ld is not None:
            pol = LinkPolicy(loss=ld.get("loss", 0.0),
                             latency_us=ld.get("latency_us", 1000),
                             jitter_us=ld.get("jitter_us", 0),
                             udp_blocked=ld.get("udp_blocked", False))
        nat = nats[hd["nat"]] if hd.get("nat") else None
        host = net.add_host(hd["id"], nat=nat, link=pol)
        agent = NodeAgent.sim(net, host, coord_host, hd["id"])
        agent.start()
        agents[hd["id"]] = agent

    return ScenarioWorld(net=net, coord=coord, coord_host=coord_host,
                         agents=agents, plan=plan, doc=doc, seed=seed,
                         punch=dict(coord.punch))


def _verification_payload(seed: int, a: str, b: str) -> bytes:
    base = f"{seed}:{a}->{b}".encode()
    pad = b"".join(hashlib.sha256(base + bytes([i])).digest() for i in range(12))
    return PAYLOAD_MARKER + b"|" + base + b"|" + pad


def _ping_target(plan: MeshPlan, node_id: str) -> str:
    """An address the node is responsible for: the first host of its
    first advertised subnet, else its own overlay address."""
    import ipaddress
    for spec in plan.nodes:
        if spec.node_id == node_id and spec.subnets:
            net = ipaddress.ip_network(spec.subnets[0])
            if net.prefixlen >= net.max_prefixlen - 1:
                return str(net.network_address)
            return str(net.network_address + 1)
    return plan.addresses[node_id]


def _verify_overlay(world: ScenarioWorld, outcome: RealizationReport,
                    settle_s: float = 15.0) -> dict:
    """Exercise every established link: payload digest both ways, one
    overlay ping both ways, and a wire privacy check for the marker."""
    net, plan, agents = world.net, world.plan, world.agents
    up_links = [o for o in outcome.links if o.up]
    expected_hash: dict[tuple[str, str], str] = {}
    got_hash: dict[tuple[str, str], str] = {}
    got_pong: set[tuple[str, str]] = set()
    wire: list[bytes] = []

    prev_on_wire = net.on_wire

    def on_wire(kind, src, dst, payload):
        wire.append(payload)
        if kind == "ctrl":
            try:
                obj = json.loads(payload)
            except ValueError:
                return
            if isinstance(obj, dict) and obj.get("type") == "relay_data":
                try:
                    wire.append(base64.b64decode(obj.get("payload_b64", "")))
                except (ValueError, TypeError):
                    pass

    def receiver(me: str, peer: str):
        def on_payload(data: bytes) -> None:
            link = agents[me].links.get(peer)
            if link is None:
                return
            if data.startswith(PAYLOAD_MARKER + b"|"):
                digest = hashlib.sha256(data).hexdigest()
                link.send(_HASH_PREFIX + digest.encode())
            elif data.startswith(_HASH_PREFIX):
                # confirms the payload this node sent to peer
                got_hash[(me, peer)] = data[len(_HASH_PREFIX):].decode(errors="replace")
            elif data.startswith(_PING_PREFIX):
                dst, nonce = data[len(_PING_PREFIX):].decode(errors="replace").split("|", 1)
                try:
                    owner = route_lookup(plan, dst)
                except Exception:
                    return
                if owner == me:
                    link.send(_PONG_PREFIX + f"{dst}|{nonce}".encode())
            elif data.startswith(_PONG_PREFIX):
                got_pong.add((me, peer))  # confirms the ping this node sent
        return on_payload

    net.on_wire = on_wire
    try:
        for o in up_links:
            for me, peer in ((o.a, o.b), (o.b, o.a)):
                agents[me].links[peer].on_payload = receiver(me, peer)
        for o in up_links:
            for src, dst in ((o.a, o.b), (o.b, o.a)):
                payload = _verification_payload(world.seed, src, dst)
                expected_hash[(src, dst)] = hashlib.sha256(payload).hexdigest()
                link = agents[src].links[dst]
                link.send(payload)
                target = _ping_target(plan, dst)
                link.send(_PING_PREFIX + f"{target}|{src}->{dst}".encode())

        want_pairs = [(o.a, o.b) for o in up_links] + [(o.b, o.a) for o in up_links]

        def done() -> bool:
            return all(p in got_hash for p in want_pairs) and \
                all(p in got_pong for p in want_pairs)

        deadline = net.now_us + int(settle_s * 1_000_000)
        while not done() and net.now_us < deadline:
            net.run_until(min(deadline, net.now_us + 50_000))
    finally:
        net.on_wire = prev_on_wire

    payloads_ok = all(got_hash.get(p) == expected_hash[p] for p in expected_hash)
    pings_ok = all(p in got_pong for p in expected_hash)
    marker_on_wire = any(PAYLOAD_MARKER in w for w in wire)
    encrypted_scheme = bool(up_links) and all(o.encrypted for o in up_links)
    if not up_links:
        encryption_ok = True
    elif encrypted_scheme:
        encryption_ok = not marker_on_wire
    else:
        encryption_ok = marker_on_wire
    return {
        "links_verified": len(up_links),
        "payloads_ok": payloads_ok,
        "pings_ok": pings_ok,
        "marker_on_wire": marker_on_wire,
        "encryption_ok": encryption_ok,
        "all_ok": payloads_ok and pings_ok and encryption_ok,
    }


def _trial_seed(master: int, index: int) -> int:
    h = hashlib.blake2b(f"bdmesh-scenario-trial:{master}:{index}".encode(),
                        digest_size=8)
    return int.from_bytes(h.digest(), "big")


def _run_single(doc: dict, seed: int) -> dict:
    from .meshplan import realize_plan

    world = build_world(doc, seed=seed, trace=True)
    max_seconds = float(world.punch.get("max_seconds", 20.0))
    outcome = realize_plan(world.net, world.agents, world.plan,
                           deadline_s=max_seconds + 20.0)
    checks = _verify_overlay(world, outcome)
    report = outcome.to_dict()
    report["mode"] = "single"
    report["seed"] = seed
    report["checks"] = checks
    report["ok"] = bool(report["connected"] and checks["all_ok"])
    report["stats"] = dict(world.net.stats)
    report["trace_hash"] = world.net.trace.digest()
    return report


def run_scenario(doc_or_path, seed: Optional[int] = None) -> dict:
    """Run a scenario and return its JSON-ready report.

    A dict is validated in place; anything else is treated as a path.
    experiment.trials == 1 yields a full single-run report; more trials
    yield one compact row per trial plus an aggregate block.  ``seed``
    overrides the experiment seed.
    """
    if isinstance(doc_or_path, dict):
        doc = doc_or_path
        validate_scenario(doc)
    else:
        doc = load_scenario(doc_or_path)
    exp = doc.get("experiment") or {}
    trials = int(exp.get("trials", 1))
    master = int(exp.get("seed", 0) if seed is None else seed)
    if trials == 1:
        return _run_single(doc, master)

    plan = build_plan_only(doc)
    planned = len(plan.links)
    rows = []
    for i in range(trials):
        rep = _run_single(doc, _trial_seed(master, i))
        direct = sum(1 for l in rep["links"] if l["path"] == "direct")
        relayed = sum(1 for l in rep["links"] if l["path"] == "relayed")
        rows.append({
            "trial": i,
            "seed": rep["seed"],
            "connected": rep["connected"],
            "direct_links": direct,
            "relayed_links": relayed,
            "ok": rep["ok"],
            "trace_hash": rep["trace_hash"],
        })
    digest = hashlib.sha256(
        "\n".join(json.dumps(r, sort_keys=True) for r in rows).encode()
    ).hexdigest()
    return {
        "scheme": plan.scheme.value,
        "mode": "multi",
        "trials": trials,
        "master_seed": master,
        "planned_links": planned,
        "rows": rows,
        "aggregate": {
            "connected_trials": sum(r["connected"] for r in rows),
            "fully_direct_trials": sum(
                1 for r in rows if r["direct_links"] == planned),
            "ok_trials": sum(r["ok"] for r in rows),
            "rows_digest": digest,
        },
        "ok": all(r["ok"] for r in rows),
    }


def build_plan_only(doc: dict) -> MeshPlan:
    """Classify and plan without touching the simulator."""
    scheme_doc = doc["scheme"]
    scheme = classify_scheme(int(scheme_doc["G"]), int(scheme_doc["P"]),
                             int(scheme_doc["theta"]))
    subnets_by_gw: dict[str, list[str]] = {}
    for sd in doc.get("subnets", []):
        subnets_by_gw.setdefault(sd["gateway"], []).append(sd["cidr"])
    specs = [
        NodeSpec(hd["id"], hd.get("kind", "point"),
                 tuple(subnets_by_gw.get(hd["id"], ())))
        for hd in doc["hosts"]
    ]
    return plan_links(scheme, specs)
