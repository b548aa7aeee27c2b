"""Packet-level model of the three-subband radio plan.

Control messages ride two narrow grant-free subbands (action announcements
in subband 1, periodic beacons in subband 2); bulk infotainment data rides
the wide third subband. Grant-free access is modeled as uniform random
codeword choice per slot: a contender succeeds when no other contender in
the same subband slot picked its codeword, otherwise it retries next slot.
Nothing below the packet level (waveforms, decoding) is modeled.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import MessageClass, RoadNetwork

#: Receiver id used for the base station on the global link.
BASE_STATION = -1

SUBBAND_COUNT = 3


class LinkKind(Enum):
    V2V = "v2v"
    V2F = "v2f"
    V2B = "v2b"


@dataclass(frozen=True)
class SubbandConfig:
    """The three-subband bandwidth plan plus access parameters.

    widths are subcarrier counts per subband and must be non-decreasing:
    the announcement subband is the narrowest, the bulk subband the widest.
    loads cap how many queued senders may be scheduled into one slot.
    """

    delta_f: float = 15_000.0  # Hz per subcarrier
    widths: Tuple[int, int, int] = (240, 360, 600)
    loads: Tuple[int, int, int] = (4, 4, 64)
    codebook_size: int = 8
    slot: float = 0.001
    grant_free: Tuple[bool, bool, bool] = (True, True, False)
    grant_rtt: float = 0.010
    spectral_efficiency: float = 1.0  # bit/s/Hz

    def __post_init__(self) -> None:
        m1, m2, m3 = self.widths
        if not (0 < m1 <= m2 <= m3):
            raise ValueError(
                f"subband widths must satisfy 0 < M1 <= M2 <= M3, got {self.widths}")
        if any(k <= 0 for k in self.loads):
            raise ValueError("subband loads must be positive")
        if self.codebook_size < 1:
            raise ValueError("codebook_size must be >= 1")
        if self.slot <= 0 or self.grant_rtt < 0 or self.delta_f <= 0:
            raise ValueError("slot, grant_rtt and delta_f must be positive")
        if self.spectral_efficiency <= 0:
            raise ValueError("spectral_efficiency must be positive")

    def capacity_bps(self, subband: int) -> float:
        """Capacity of a subband (1-based index) in bit/s."""
        return self.widths[subband - 1] * self.delta_f * self.spectral_efficiency

    def slot_capacity_bits(self, subband: int) -> float:
        return self.capacity_bps(subband) * self.slot


@dataclass(frozen=True)
class LinkModel:
    kind: LinkKind
    range: float = 300.0  # meters; ignored for the global link
    base_per: float = 0.0  # in-range packet error probability
    base_latency: float = 0.0  # propagation/core-network seconds

    def __post_init__(self) -> None:
        if not 0.0 <= self.base_per <= 1.0:
            raise ValueError("base_per must be within [0, 1]")
        if self.kind is not LinkKind.V2B and self.range <= 0:
            raise ValueError("range must be > 0 for local links")
        if self.base_latency < 0:
            raise ValueError("base_latency must be >= 0")


_SUBBAND_OF_CLASS = {
    MessageClass.ATM: 1,
    MessageClass.PSM: 2,
    MessageClass.INFOTAINMENT: 3,
}


def assign_subband(msg_class: MessageClass) -> int:
    """Fixed class-to-subband rule: announcements 1, beacons 2, bulk 3."""
    return _SUBBAND_OF_CLASS[msg_class]


def grant_free_contend(n_contenders: int, codebook_size: int,
                       rng) -> List[bool]:
    """One contention slot: each contender picks one of C codewords.

    Returns a per-contender success flag in contender order; a contender
    succeeds iff its codeword was picked by nobody else this slot.
    """
    if n_contenders <= 0:
        return []
    picks = rng.integers(0, codebook_size, size=n_contenders)
    counts = np.bincount(picks, minlength=codebook_size)
    return [counts[c] == 1 for c in picks]


def contention_fractions(n_contenders: int, codebook_size: int,
                         n_slots: int, rng) -> float:
    """Empirical per-contender collision fraction over independent slots.

    Every slot starts fresh with the same contender count, which is the
    regime the closed form below describes.
    """
    if n_contenders <= 1:
        return 0.0
    picks = rng.integers(0, codebook_size, size=(n_slots, n_contenders))
    collided = 0
    for c in range(codebook_size):
        hits = (picks == c).sum(axis=1)
        collided += int(((picks == c) & (hits > 1)[:, None]).sum())
    return collided / (n_slots * n_contenders)


def analytic_collision_probability(n_contenders: int,
                                   codebook_size: int) -> float:
    """Per-contender codeword collision probability: 1 - (1 - 1/C)^(K-1)."""
    if n_contenders <= 1:
        return 0.0
    return 1.0 - (1.0 - 1.0 / codebook_size) ** (n_contenders - 1)


def access_latency(cfg: SubbandConfig, subband: int,
                   outcome_history: Sequence[str]) -> float:
    """Medium-access delay of one message from its slot outcome history.

    The history is one entry per slot the message spent in the scheduler
    ('deferred', 'collision', ... ending in 'success'). Grant-free latency
    is purely those slots; grant-based access pays the signaling round trip
    on top. The result feeds the delivery timestamp.
    """
    return latency_from_slots(cfg, subband, len(outcome_history))


def latency_from_slots(cfg: SubbandConfig, subband: int,
                       n_slots: int) -> float:
    if n_slots < 1:
        raise ValueError("a served message occupies at least one slot")
    if cfg.grant_free[subband - 1]:
        return n_slots * cfg.slot
    return cfg.grant_rtt + n_slots * cfg.slot


def link_distance(network: RoadNetwork, seg_a: int, s_a: float,
                  seg_b: int, s_b: float) -> float:
    """Path distance between two road positions, for range gating.

    Same segment: direct separation (chord distance on ring segments).
    Different segments: finite only around a shared intersection, where the
    distance runs through the crossing; everything else is unreachable for
    local links.
    """
    if seg_a == seg_b:
        segment = network.segment_by_id[seg_a]
        d = abs(s_a - s_b)
        if segment.loop:
            d = min(d, segment.length - d)
        return d
    inter_a = network.intersection_of_incoming.get(seg_a)
    inter_b = network.intersection_of_incoming.get(seg_b)
    len_a = network.segment_by_id[seg_a].length
    len_b = network.segment_by_id[seg_b].length
    if inter_a is not None and inter_b is not None and inter_a.id == inter_b.id:
        # Both approaching the same crossing.
        return (len_a - s_a) + (len_b - s_b)
    if inter_a is not None:
        # a approaches a crossing that b may have just left.
        for turn in inter_a.turns:
            if turn.target == seg_b:
                return (len_a - s_a) + s_b
    if inter_b is not None:
        for turn in inter_b.turns:
            if turn.target == seg_a:
                return (len_b - s_b) + s_a
    return float("inf")


def link_deliver(link: LinkModel, distance: float, rng) -> bool:
    """Per-receiver delivery draw: range gate, then error-rate Bernoulli."""
    if link.kind is not LinkKind.V2B and distance > link.range:
        return False
    if link.base_per <= 0.0:
        return True
    if link.base_per >= 1.0:
        return False
    return rng.random() >= link.base_per


@dataclass
class QueuedMessage:
    """Scheduler bookkeeping for one message awaiting its subband."""

    key: int  # enqueue order, globally unique and ascending
    sender: int
    bits: int
    enqueue_slot: int  # absolute slot index at which it joined the queue
    collisions: int = 0
    ref: object = None  # opaque engine payload carried through


@dataclass(frozen=True)
class ServedMessage:
    item: QueuedMessage
    slots: int  # total slots from enqueue to success, >= 1


class SubbandScheduler:
    """Slot-by-slot service of the three subband queues.

    Admission per slot honors both the configured load cap and the slot's
    bit capacity, in FIFO order. Grant-free subbands then run a codeword
    contention round among the admitted senders; losers keep their queue
    position and retry. Grant-based subbands serve every admitted message.
    The absolute slot counter persists across engine steps so queue waits
    carry over and backlog latency is accounted honestly.
    """

    def __init__(self, cfg: SubbandConfig):
        self.cfg = cfg
        self.queues: Dict[int, deque] = {b: deque() for b in (1, 2, 3)}
        self.abs_slot = 0
        self._next_key = 0

    def enqueue(self, subband: int, sender: int, bits: int,
                ref: object = None) -> QueuedMessage:
        item = QueuedMessage(key=self._next_key, sender=sender, bits=bits,
                             enqueue_slot=self.abs_slot, ref=ref)
        self._next_key += 1
        self.queues[subband].append(item)
        return item

    def backlog(self, subband: int) -> int:
        return len(self.queues[subband])

    def backlog_bits(self, subband: int) -> int:
        return sum(item.bits for item in self.queues[subband])

    def run_slots(self, n_slots: int, rng) -> List[Tuple[int, ServedMessage]]:
        """Advance n slots; return (subband, served) in service order."""
        served: List[Tuple[int, ServedMessage]] = []
        for _ in range(n_slots):
            self.abs_slot += 1
            for band in (1, 2, 3):
                queue = self.queues[band]
                if not queue:
                    continue
                cap_bits = self.cfg.slot_capacity_bits(band)
                load_cap = self.cfg.loads[band - 1]
                cohort = []
                bits_used = 0.0
                for item in queue:
                    if len(cohort) >= load_cap:
                        break
                    if cohort and bits_used + item.bits > cap_bits:
                        break
                    cohort.append(item)
                    bits_used += item.bits
                if not cohort:
                    continue
                if self.cfg.grant_free[band - 1]:
                    flags = grant_free_contend(len(cohort),
                                               self.cfg.codebook_size, rng)
                else:
                    flags = [True] * len(cohort)
                winners = set()
                for item, ok in zip(cohort, flags):
                    if ok:
                        winners.add(item.key)
                    else:
                        item.collisions += 1
                if winners:
                    keep = deque()
                    for item in queue:
                        if item.key in winners:
                            slots = self.abs_slot - item.enqueue_slot
                            served.append((band, ServedMessage(item, slots)))
                        else:
                            keep.append(item)
                    self.queues[band] = keep
        return served
