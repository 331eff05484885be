"""Synthetic participant pool: normal abilities, noisy scores, birth and death."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import ParticipantId
from .rng import SimStreams


@dataclass(frozen=True)
class SimConfig:
    mu_q: float = 0.2
    sigma_q: float = 0.1
    volatility_v: float = 0.2
    p_growth: float = 1e-10
    p_attr: float = 1e-10
    n_init: int = 8
    n_epochs: int = 1000
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.sigma_q > 0:
            raise ValueError(f"sigma_q must be > 0, got {self.sigma_q!r}")
        if not self.volatility_v >= 0:
            raise ValueError(f"volatility_v must be >= 0, got {self.volatility_v!r}")
        if not self.p_growth >= 0:
            raise ValueError(f"p_growth must be >= 0, got {self.p_growth!r}")
        if not 0 < self.p_attr < 1:
            raise ValueError(f"p_attr must lie in (0, 1), got {self.p_attr!r}")
        for name in ("n_init", "n_epochs"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if isinstance(self.seed, bool) or int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")

    def with_seed(self, seed: int) -> "SimConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class SimParticipant:
    id: ParticipantId
    median_quality: float
    join_epoch: int
    lifetime: int

    @property
    def leave_epoch(self) -> int:
        """First epoch in which the participant is no longer present."""
        return self.join_epoch + self.lifetime


@dataclass
class Population:
    """Participants currently in the pool, plus a log of everyone ever seen."""

    members: dict[ParticipantId, SimParticipant] = field(default_factory=dict)
    everyone: dict[ParticipantId, SimParticipant] = field(default_factory=dict)
    next_id: int = 0

    def __len__(self) -> int:
        return len(self.members)

    def ids(self) -> list[ParticipantId]:
        return sorted(self.members)

    def medians(self, ids: list[ParticipantId]) -> np.ndarray:
        return np.array([self.members[i].median_quality for i in ids], dtype=float)


def spawn_participants(
    count: int, cfg: SimConfig, epoch: int, streams: SimStreams, start_id: int = 0
) -> list[SimParticipant]:
    """``count`` fresh participants with ids ``start_id, start_id + 1, ...``."""
    if count == 0:
        return []
    medians = streams.medians.normal(cfg.mu_q, cfg.sigma_q, size=count)
    # numpy's geometric counts trials up to and including the first success: support {1, 2, ...}
    lifetimes = streams.lifetimes.geometric(cfg.p_attr, size=count)
    return [
        SimParticipant(start_id + k, float(m), epoch, int(t))
        for k, (m, t) in enumerate(zip(medians, lifetimes))
    ]


def initial_population(cfg: SimConfig, streams: SimStreams) -> Population:
    pop = Population()
    _admit(pop, spawn_participants(cfg.n_init, cfg, 0, streams, start_id=0))
    return pop


def _admit(pop: Population, joiners: list[SimParticipant]) -> None:
    for p in joiners:
        pop.members[p.id] = p
        pop.everyone[p.id] = p
    pop.next_id += len(joiners)


def draw_instantaneous(p: SimParticipant, cfg: SimConfig, rng: np.random.Generator) -> float:
    return p.median_quality + cfg.volatility_v * float(rng.standard_normal())


def draw_scores(medians: np.ndarray, cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """One instantaneous score per participant, in the order given."""
    return medians + cfg.volatility_v * rng.standard_normal(len(medians))


def advance_population(
    pop: Population, cfg: SimConfig, epoch: int, streams: SimStreams
) -> tuple[Population, list[ParticipantId], list[ParticipantId]]:
    """Attrition, then growth, for ``epoch``.

    Returns the new population together with the departed and joined ids.
    Departures ignore activity: whoever reaches the end of their lifetime leaves.
    """
    departed = sorted(i for i, p in pop.members.items() if p.leave_epoch <= epoch)
    members = {i: p for i, p in pop.members.items() if p.leave_epoch > epoch}
    out = Population(members, dict(pop.everyone), pop.next_id)

    n_new = int(streams.growth.poisson(cfg.p_growth))
    joiners = spawn_participants(n_new, cfg, epoch, streams, start_id=out.next_id)
    _admit(out, joiners)
    return out, departed, [p.id for p in joiners]
