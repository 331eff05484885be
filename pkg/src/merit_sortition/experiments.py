"""Merit versus random sortition on a simulated participant pool."""

from __future__ import annotations

import enum
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats

from .core import (
    EpochContributions,
    ParticipantId,
    SortitionParams,
    SystemState,
    _apply_target_vector,
    _select_mask,
    _target_vector,
    step,
)
from .population import SimConfig, advance_population, draw_scores, initial_population
from .rng import make_streams


class Mode(str, enum.Enum):
    MERIT = "merit"
    RANDOM = "random"


@dataclass(frozen=True)
class ScenarioConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    sortition: SortitionParams = field(default_factory=SortitionParams)
    mode: Mode = Mode.MERIT
    label: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))

    def with_mode(self, mode: Mode | str) -> "ScenarioConfig":
        return replace(self, mode=Mode(mode))

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return replace(self, sim=self.sim.with_seed(seed))

    def with_percentile(self, p: float) -> "ScenarioConfig":
        return replace(self, sortition=replace(self.sortition, percentile_p=p))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    active_ids: frozenset[ParticipantId]
    per_participant_ema: dict[ParticipantId, float]
    mean_t_active: float
    display_ema_mean_t: float
    n_total: int = 0


@dataclass
class ParticipantLog:
    id: ParticipantId
    median_quality: float
    join_epoch: int
    leave_epoch: int | None  # None: still present at the end of the run
    epochs_active: int


@dataclass
class RunSummary:
    config: ScenarioConfig
    activity_fraction: dict[ParticipantId, float]
    median_quality: dict[ParticipantId, float]
    time_avg_mean_t: float
    mean_t: np.ndarray  # unsmoothed per-epoch mean score of the contributors; NaN for an empty pool
    display_ema: np.ndarray
    pool_size: np.ndarray
    n_active: np.ndarray
    participants: list[ParticipantLog]
    epoch_records: list[EpochRecord] = field(default_factory=list)

    @property
    def n_epochs(self) -> int:
        return len(self.mean_t)


def _random_mask(n: int, n_act: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    if n:
        mask[rng.choice(n, size=min(n_act, n), replace=False)] = True
    return mask


def _reselect(state: SystemState, cfg: ScenarioConfig, streams) -> SystemState:
    if cfg.mode is Mode.MERIT:
        mask = _select_mask(state, cfg.sortition, streams.tiebreak)
    else:
        mask = _random_mask(len(state), cfg.sortition.n_act, streams.baseline)
    return state.with_active_mask(mask)


def run_scenario(cfg: ScenarioConfig, keep_records: bool = True) -> RunSummary:
    """Simulate ``cfg.sim.n_epochs`` epochs.

    Per epoch: attrition and growth (from epoch 1 on), one score draw for
    every pool member, then the engine step on the active members' scores.
    In random mode the EMAs are still updated, but the next active set is a
    uniform draw from the pool.  If the active set is emptied by attrition it
    is refilled immediately, since an epoch without contributors is undefined.
    """
    sim, params = cfg.sim, cfg.sortition
    streams = make_streams(sim.seed)
    pop = initial_population(sim, streams)
    state = _reselect(SystemState.initial(pop.ids()), cfg, streams)

    n_epochs = sim.n_epochs
    mean_t = np.full(n_epochs, np.nan)
    display = np.full(n_epochs, np.nan)
    pool_size = np.zeros(n_epochs, dtype=np.int64)
    n_active = np.zeros(n_epochs, dtype=np.int64)
    active_count: dict[ParticipantId, int] = {}
    left_at: dict[ParticipantId, int] = {}
    records: list[EpochRecord] = []
    smoothed = math.nan

    for epoch in range(n_epochs):
        if epoch > 0:
            pop, departed, joined = advance_population(pop, sim, epoch, streams)
            for pid in departed:
                left_at[pid] = epoch
            if departed:
                state = state.remove_participants(departed)
            if joined:
                state = state.add_participants(joined)
        pool_size[epoch] = len(state)
        if len(state) == 0:
            state = state.with_epoch(epoch + 1)
            if keep_records:
                records.append(EpochRecord(epoch, frozenset(), {}, math.nan, smoothed, 0))
            display[epoch] = smoothed
            continue
        if not state.active.any():
            state = _reselect(state, cfg, streams)

        medians = np.array([pop.members[int(i)].median_quality for i in state.ids])
        scores = draw_scores(medians, sim, streams.scores)
        act_ids = state.ids[state.active]
        act_scores = scores[state.active]
        contributions = EpochContributions(
            epoch, {int(i): float(s) for i, s in zip(act_ids, act_scores)}
        )
        for pid in contributions.scores:
            active_count[pid] = active_count.get(pid, 0) + 1

        n_active[epoch] = len(act_ids)
        m = float(np.mean(act_scores))
        mean_t[epoch] = m
        smoothed = m if math.isnan(smoothed) else params.alpha * m + (1 - params.alpha) * smoothed
        display[epoch] = smoothed

        if cfg.mode is Mode.MERIT:
            state = step(state, contributions, params, streams.tiebreak)
        else:
            targets = _target_vector(state, contributions, params)
            updated = _apply_target_vector(state, targets, params)
            mask = _random_mask(len(updated), params.n_act, streams.baseline)
            state = updated.with_active_mask(mask, epoch + 1)

        if keep_records:
            records.append(
                EpochRecord(
                    epoch,
                    frozenset(contributions.scores),
                    {int(i): float(q) for i, q in zip(state.ids, state.ema)},
                    m,
                    smoothed,
                    len(state),
                )
            )

    logs = [
        ParticipantLog(
            p.id, p.median_quality, p.join_epoch, left_at.get(p.id), active_count.get(p.id, 0)
        )
        for p in sorted(pop.everyone.values(), key=lambda p: p.id)
    ]
    return RunSummary(
        config=cfg,
        activity_fraction={p.id: p.epochs_active / n_epochs for p in logs},
        median_quality={p.id: p.median_quality for p in logs},
        time_avg_mean_t=float(np.nanmean(mean_t)) if np.any(np.isfinite(mean_t)) else math.nan,
        mean_t=mean_t,
        display_ema=display,
        pool_size=pool_size,
        n_active=n_active,
        participants=logs,
        epoch_records=records,
    )


def run_paired(cfg: ScenarioConfig, keep_records: bool = True) -> tuple[RunSummary, RunSummary]:
    """Merit and random runs on the same population realization."""
    return (
        run_scenario(cfg.with_mode(Mode.MERIT), keep_records),
        run_scenario(cfg.with_mode(Mode.RANDOM), keep_records),
    )


class RankCorrelation(NamedTuple):
    rho: float
    degenerate: bool


def activity_quality_correlation(summary: RunSummary) -> RankCorrelation:
    """Spearman correlation of median quality against activity fraction.

    Taken over every participant ever present.  When either side has no
    spread the coefficient is undefined; ``(0.0, True)`` is returned.
    """
    ids = sorted(summary.median_quality)
    if len(ids) < 3:
        raise ValueError(f"need at least 3 participants, got {len(ids)}")
    q = np.array([summary.median_quality[i] for i in ids])
    f = np.array([summary.activity_fraction[i] for i in ids])
    if np.all(q == q[0]) or np.all(f == f[0]):
        return RankCorrelation(0.0, True)
    return RankCorrelation(float(stats.spearmanr(q, f).statistic), False)


def z_score(merit: RunSummary, random: RunSummary) -> float:
    """Gap in time-averaged quality, in units of the random run's epoch-to-epoch scatter.

    The denominator is the (population) standard deviation across epochs of
    the random run's unsmoothed per-epoch mean score.
    """
    if merit.n_epochs != random.n_epochs:
        raise ValueError(
            f"epoch counts differ: {merit.n_epochs} (merit) vs {random.n_epochs} (random)"
        )
    gap = abs(merit.time_avg_mean_t - random.time_avg_mean_t)
    if gap == 0.0:
        return 0.0
    scatter = float(np.nanstd(random.mean_t))
    return gap / scatter if scatter > 0 else math.inf


def derive_seed(master: int, index: int) -> int:
    """Independent 64-bit seed for replicate ``index`` of a master seed."""
    return int(np.random.SeedSequence([int(master), int(index)]).generate_state(1, np.uint64)[0])


def replicate_seeds(master: int, n: int) -> list[int]:
    return [derive_seed(master, k) for k in range(n)]


def sweep_grid(n_points: int) -> list[float]:
    """``n_points`` evenly spaced percentiles on (0, 100], ending at 100."""
    if n_points < 1:
        raise ValueError("n_points must be positive")
    return [100.0 * k / n_points for k in range(1, n_points + 1)]


class SeedResult(NamedTuple):
    seed: int
    mean_merit: float
    mean_random: float
    z: float


@dataclass(frozen=True)
class SweepPoint:
    p: float
    mean_merit: float
    mean_random: float
    z: float
    per_seed: tuple[SeedResult, ...]

    @property
    def z_stderr(self) -> float:
        zs = [r.z for r in self.per_seed]
        return float(np.std(zs, ddof=1) / math.sqrt(len(zs))) if len(zs) > 1 else math.nan


def _paired_point(cfg: ScenarioConfig) -> SeedResult:
    merit, rand = run_paired(cfg, keep_records=False)
    return SeedResult(cfg.sim.seed, merit.time_avg_mean_t, rand.time_avg_mean_t, z_score(merit, rand))


def map_ordered(fn, items: Sequence, jobs: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally across processes; order is preserved."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def percentile_sweep(
    base: ScenarioConfig, n_points: int = 50, seeds: int = 1, jobs: int = 1
) -> list[SweepPoint]:
    """Paired merit/random runs over an even percentile grid.

    Every grid point reuses the same ``seeds`` replicate seeds, derived from
    ``base.sim.seed``, so the curves are compared on common populations.
    Seed-averaged columns are plain means over replicates.
    """
    grid = sweep_grid(n_points)
    seed_list = replicate_seeds(base.sim.seed, seeds)
    jobs_list = [base.with_percentile(p).with_seed(s) for p in grid for s in seed_list]
    results = map_ordered(_paired_point, jobs_list, jobs)

    points = []
    for k, p in enumerate(grid):
        chunk = tuple(results[k * seeds : (k + 1) * seeds])
        points.append(
            SweepPoint(
                p,
                float(np.mean([r.mean_merit for r in chunk])),
                float(np.mean([r.mean_random for r in chunk])),
                float(np.mean([r.z for r in chunk])),
                chunk,
            )
        )
    return points
