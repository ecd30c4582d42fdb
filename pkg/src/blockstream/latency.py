from __future__ import annotations

import random
from dataclasses import dataclass, replace
from typing import Sequence

from .provider import BACKING, MEMCACHE


@dataclass(frozen=True)
class LatencyModel:
    """Per-fault cost model, all values in microseconds.

    A round trip costs ``net_rtt`` plus ``net_per_block`` for every block
    delivered plus the server-side read cost of each block. With
    probability ``loss_rate`` a round trip additionally waits
    ``retransmit_penalty``. A client page-cache hit costs ``mem_read``.

    ``loss_sampling="bernoulli"`` draws every round trip independently.
    ``"systematic"`` keeps the same per-round-trip probability but spaces
    losses evenly from a random phase, which removes sampling noise from
    averages over a fixed number of round trips.
    """

    net_rtt: float = 200.0
    net_per_block: float = 35.0
    disk_read: float = 500.0
    mem_read: float = 5.0
    loss_rate: float = 0.0
    retransmit_penalty: float = 50_000.0
    seed: int = 0
    loss_sampling: str = "bernoulli"

    def __post_init__(self):
        for name in ("net_rtt", "net_per_block", "disk_read", "mem_read", "retransmit_penalty"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError("loss_rate must be a probability")
        if self.loss_sampling not in ("bernoulli", "systematic"):
            raise ValueError(f"unknown loss sampling {self.loss_sampling!r}")

    def rng(self, salt: int = 0) -> random.Random:
        return random.Random(self.seed * 1_000_003 + salt)

    def loss_process(self, salt: int = 0) -> "LossProcess":
        return LossProcess(self.loss_rate, self.loss_sampling, self.rng(salt))

    def with_seed(self, seed: int) -> "LatencyModel":
        return replace(self, seed=seed)

    @property
    def hit_us(self) -> float:
        return self.mem_read

    def read_us(self, source: str) -> float:
        if source == MEMCACHE:
            return self.mem_read
        if source == BACKING:
            return self.disk_read
        raise ValueError(f"unknown block source {source!r}")

    def round_trip_us(self, n_blocks: int, sources: Sequence[str] | None = None,
                      loss: "LossProcess | None" = None) -> tuple[float, bool]:
        """Cost of one round trip and whether it suffered a loss.

        ``sources`` is None when the server-side read path is not visible,
        for instance over a real socket; only network terms are charged.
        """
        cost = self.net_rtt + n_blocks * self.net_per_block
        if sources is not None:
            cost += sum(self.read_us(s) for s in sources)
        lost = loss is not None and loss.draw()
        if lost:
            cost += self.retransmit_penalty
        return cost, lost


class LossProcess:
    """Decides, round trip by round trip, whether a loss occurs."""

    def __init__(self, rate: float, sampling: str, rng: random.Random):
        self.rate = rate
        self.sampling = sampling
        self.rng = rng
        self.losses = 0
        self.draws = 0
        self._phase = rng.random()

    def draw(self) -> bool:
        self.draws += 1
        if self.rate <= 0:
            return False
        if self.sampling == "bernoulli":
            lost = self.rng.random() < self.rate
        else:
            self._phase += self.rate
            lost = self._phase >= 1.0
            if lost:
                self._phase -= 1.0
        self.losses += lost
        return lost
