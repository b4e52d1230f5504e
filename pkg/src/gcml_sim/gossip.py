"""Random sender-receiver pairing over the currently available sites.

Scheduling is logically centralized: one scheduler draws every round's
pairing from its own random stream, which is what makes federation runs a
pure function of the master seed while still reproducing the distributional
behavior of decentralized peer selection.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .numerics import RngStream

__all__ = ["PairSchedule", "select_pairs", "GossipScheduler"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PairSchedule:
    round_index: int
    pairs: tuple  # ordered (sender_id, receiver_id) pairs

    def __post_init__(self):
        for s, r in self.pairs:
            if s == r:
                raise ValueError("self-pair in schedule")


def select_pairs(
    available,
    num_pairs: int,
    rng: RngStream,
    max_incoming: int = 1,
    round_index: int = 0,
) -> PairSchedule:
    """Draw ``num_pairs`` sender->receiver pairs from the available sites.

    While two unused sites remain, pairs are a uniform partial matching
    (2*num_pairs distinct sites, randomly split). With an odd pool and one
    site left over, a random already-chosen sender sends to it as well, so
    every site still participates exactly once as itself. Any further pairs
    reuse receivers up to ``max_incoming``; a receiver's incoming models keep
    schedule order.
    """
    sites = sorted(set(available))
    if len(sites) < 2:
        raise ValueError("insufficient sites: need at least 2 available")
    if num_pairs < 1:
        raise ValueError("num_pairs must be >= 1")
    if max_incoming < 1:
        raise ValueError("max_incoming must be >= 1")

    perm = rng.shuffled(sites)
    pairs = []
    incoming = {s: 0 for s in sites}
    n_matched = min(num_pairs, len(sites) // 2)
    for i in range(n_matched):
        sender, receiver = perm[2 * i], perm[2 * i + 1]
        pairs.append((sender, receiver))
        incoming[receiver] += 1

    leftover = perm[2 * n_matched :]
    if len(pairs) < num_pairs and len(leftover) == 1:
        senders = [s for s, _ in pairs]
        extra_sender = senders[rng.integer(len(senders))]
        pairs.append((extra_sender, leftover[0]))
        incoming[leftover[0]] += 1

    while len(pairs) < num_pairs:
        capacity = [s for s in sites if incoming[s] < max_incoming]
        if not capacity:
            raise ValueError(
                f"num_pairs={num_pairs} exceeds receiver capacity "
                f"({len(sites)} sites x max_incoming={max_incoming})"
            )
        receiver = capacity[rng.integer(len(capacity))]
        others = [s for s in sites if s != receiver]
        sender = others[rng.integer(len(others))]
        pairs.append((sender, receiver))
        incoming[receiver] += 1

    return PairSchedule(round_index, tuple(pairs))


@dataclass
class GossipScheduler:
    """Availability registry plus the pairing stream for one federation run."""

    site_ids: tuple
    rng: RngStream
    _available: dict = field(init=False)
    events: list = field(init=False, default_factory=list)

    def __post_init__(self):
        self.site_ids = tuple(sorted(set(self.site_ids)))
        self._available = {s: True for s in self.site_ids}

    def mark_availability(self, site_id, available: bool, round_index: int):
        """Flip a site's availability; takes effect for subsequent pairings."""
        if site_id not in self._available:
            raise ValueError(f"unknown site {site_id!r}")
        self._available[site_id] = available
        self.events.append((round_index, site_id, available))
        log.info(
            "round %d: site %s %s", round_index, site_id,
            "joined" if available else "departed",
        )

    def is_available(self, site_id) -> bool:
        return self._available[site_id]

    def available_sites(self) -> tuple:
        return tuple(s for s in self.site_ids if self._available[s])

    def schedule_round(
        self, round_index: int, num_pairs: int | None = None, max_incoming: int = 1
    ) -> PairSchedule:
        """Pair up the currently available sites for one round.

        ``num_pairs=None`` defaults to floor(available/2) so that every site
        takes part; explicit values are capped at the receiver capacity.
        """
        avail = self.available_sites()
        if len(avail) < 2:
            raise ValueError("insufficient sites: need at least 2 available")
        wanted = len(avail) // 2 if num_pairs is None else num_pairs
        wanted = min(wanted, len(avail) * max_incoming)
        return select_pairs(avail, wanted, self.rng, max_incoming, round_index)
