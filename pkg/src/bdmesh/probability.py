"""Collision probability for simultaneous-open NAT traversal.

One side keeps B external ports open out of a space of K candidate
ports; the other side probes A distinct ports chosen uniformly at
random without replacement.  The chance that at least one probe lands
on an open port is

    P(A) = 1 - prod_{i=0}^{A-1} (K - B - i) / (K - i)

which is the birthday-style complement of drawing A misses in a row
from a shrinking pool.  All evaluation happens in log space so the
result stays accurate out to P very close to 0 or 1.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

from .errors import InvalidParametersError

__all__ = [
    "PortSpace",
    "ProbePlan",
    "success_probability",
    "min_probes",
    "probability_curve",
    "schedule_ports",
]


@dataclass(frozen=True)
class PortSpace:
    """Contiguous range of candidate external ports, inclusive on both ends.

    The default covers every non-reserved UDP port, 1025 through 65535,
    which is the space a NAT with no configured restrictions allocates
    from.
    """

    lo: int = 1025
    hi: int = 65535

    def __post_init__(self) -> None:
        if not (0 < self.lo <= self.hi <= 65535):
            raise InvalidParametersError(f"bad port range [{self.lo}, {self.hi}]")

    @property
    def size(self) -> int:
        return self.hi - self.lo + 1

    def contains(self, port: int) -> bool:
        return self.lo <= port <= self.hi


@dataclass(frozen=True)
class ProbePlan:
    """Result of sizing a probe run against a target success probability."""

    probes: int
    probability: float
    open_ports: int
    space: PortSpace


def _check_kba(k: int, b: int, a: int) -> None:
    if k <= 0:
        raise InvalidParametersError(f"port space size must be positive, got {k}")
    if b < 0 or b > k:
        raise InvalidParametersError(f"open ports must lie in [0, {k}], got {b}")
    if a < 0:
        raise InvalidParametersError(f"probe count must be non-negative, got {a}")


def success_probability(k: int, b: int, a: int, delivery_rate: float = 1.0) -> float:
    """P(at least one of `a` distinct probes hits one of `b` open ports).

    `k` is the size of the port space.  Probes beyond k are rejected:
    the prober cannot pick more distinct ports than exist.

    `delivery_rate` scales each probe's hit chance by the probability
    that both the probe and its answer survive the network, i.e.
    (1 - loss)^2 for symmetric independent loss.  At 1.0 the product is
    exact; below 1.0 it treats per-probe survival as independent, which
    holds when losses are drawn per datagram.
    """
    _check_kba(k, b, a)
    if a > k:
        raise InvalidParametersError(f"cannot probe {a} distinct ports out of {k}")
    if not (0.0 <= delivery_rate <= 1.0):
        raise InvalidParametersError(
            f"delivery_rate must lie in [0, 1], got {delivery_rate}")
    if a == 0 or b == 0 or delivery_rate == 0.0:
        return 0.0
    if delivery_rate == 1.0:
        if a > k - b:
            # Pigeonhole: more probes than closed ports, a hit is certain.
            return 1.0
        # log of the miss product, summed with fsum to keep rounding flat.
        log_miss = math.fsum(math.log1p(-b / (k - i)) for i in range(a))
        return -math.expm1(log_miss)
    log_miss = math.fsum(
        math.log1p(-delivery_rate * min(1.0, b / (k - i))) for i in range(a))
    return -math.expm1(log_miss)


def min_probes(k: int, b: int, target: float) -> int:
    """Smallest probe count whose success probability reaches `target`."""
    _check_kba(k, b, 0)
    if not (0.0 < target < 1.0):
        raise InvalidParametersError(f"target must lie in (0, 1), got {target}")
    if b == 0:
        raise InvalidParametersError("no probe count can hit zero open ports")
    log_target_miss = math.log1p(-target)
    log_miss = 0.0
    comp = 0.0  # Kahan compensation; the sum runs long for small b.
    a = 0
    while a < k - b:
        term = math.log1p(-b / (k - a))
        y = term - comp
        t = log_miss + y
        comp = (t - log_miss) - y
        log_miss = t
        a += 1
        if log_miss <= log_target_miss:
            return a
    # Probing every closed port plus one more guarantees a hit.
    return k - b + 1


def probability_curve(k: int, b: int, a_max: int, step: int = 1) -> list[tuple[int, float]]:
    """(probes, probability) pairs for a = 0, step, 2*step, ... up to a_max.

    The final point is always a_max itself so the curve never
    understates the endpoint.  Incremental evaluation keeps the whole
    sweep O(a_max).
    """
    _check_kba(k, b, a_max)
    if a_max > k:
        raise InvalidParametersError(f"cannot probe {a_max} distinct ports out of {k}")
    if step <= 0:
        raise InvalidParametersError(f"step must be positive, got {step}")
    out: list[tuple[int, float]] = []
    log_miss = 0.0
    comp = 0.0
    saturated = False  # set once a > k - b, where the probability pins at 1
    next_a = 0
    for a in range(a_max + 1):
        if a > 0:
            if b == 0:
                pass
            elif a > k - b:
                saturated = True
            else:
                term = math.log1p(-b / (k - (a - 1)))
                y = term - comp
                t = log_miss + y
                comp = (t - log_miss) - y
                log_miss = t
        if a == next_a or a == a_max:
            if b == 0:
                p = 0.0
            elif saturated:
                p = 1.0
            else:
                p = -math.expm1(log_miss) + 0.0  # +0.0 folds -0.0 at a=0
            out.append((a, p))
            while next_a <= a:
                next_a += step
    return out


def schedule_ports(space: PortSpace, count: int, seed: int) -> list[int]:
    """Deterministic sample of `count` distinct ports from `space`.

    A partial Fisher-Yates shuffle over a sparse dict gives O(count)
    time and memory regardless of the size of the space, and a stable
    output for a given seed across runs and platforms.
    """
    k = space.size
    if count < 0 or count > k:
        raise InvalidParametersError(f"cannot schedule {count} distinct ports out of {k}")
    rng = random.Random(seed)
    swapped: dict[int, int] = {}
    out: list[int] = []
    for i in range(count):
        j = rng.randrange(i, k)
        vi = swapped.get(i, i)
        vj = swapped.get(j, j)
        swapped[j] = vi
        out.append(space.lo + vj)
    return out
