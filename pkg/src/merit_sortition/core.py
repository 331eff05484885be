"""Merit-based sortition engine.

Participants are ranked by an exponential moving average (EMA) of a
per-epoch target quality.  Each epoch the target is:

* the participant's own instantaneous score, if it is active and contributed;
* ``min(T) - lambda_pen * std(T)`` over the contributed scores, if it is
  active but did not contribute;
* the ``percentile_p``-th percentile of the contributed scores, if inactive.

The top ``n_act`` EMAs form the next epoch's active set.  Everything here is
pure: functions take a :class:`SystemState` and return a new one.  The
only source of randomness is the generator handed in by the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

ParticipantId = int


class SortitionError(ValueError):
    """Raised for inputs the engine refuses to process."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SortitionParams:
    alpha: float = 0.1
    percentile_p: float = 20.0
    lambda_pen: float = 2.0
    n_act: int = 5

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha <= 1.0):
            raise SortitionError(f"alpha must lie in (0, 1], got {self.alpha!r}")
        if not (0.0 < self.percentile_p <= 100.0):
            raise SortitionError(
                f"percentile_p must lie in (0, 100], got {self.percentile_p!r}"
            )
        if not (self.lambda_pen >= 0.0) or math.isinf(self.lambda_pen):
            raise SortitionError(f"lambda_pen must be >= 0, got {self.lambda_pen!r}")
        if isinstance(self.n_act, bool) or int(self.n_act) != self.n_act or self.n_act < 1:
            raise SortitionError(f"n_act must be a positive integer, got {self.n_act!r}")


@dataclass(frozen=True)
class ParticipantState:
    id: ParticipantId
    ema_quality: float
    has_history: bool


@dataclass(frozen=True)
class EpochContributions:
    """Instantaneous scores handed in by (part of) the active set."""

    epoch: int
    scores: Mapping[ParticipantId, float] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class SystemState:
    """Engine state: columnar, sorted by participant id, read-only.

    ``ema`` holds NaN for participants without history.  Between an attrition
    step and the next selection the active set may be smaller than
    ``min(n_act, N)``; the vacancy is filled by the next :func:`select_active`.
    """

    epoch: int
    ids: np.ndarray
    ema: np.ndarray
    has_history: np.ndarray
    active: np.ndarray

    @classmethod
    def initial(cls, ids: Iterable[ParticipantId], epoch: int = 0) -> "SystemState":
        """History-less participants and an empty active set."""
        arr = np.array(sorted(ids), dtype=np.int64)
        if len(np.unique(arr)) != len(arr):
            raise SortitionError("participant ids must be unique")
        n = len(arr)
        return cls(
            epoch,
            _readonly(arr),
            _readonly(np.full(n, np.nan)),
            _readonly(np.zeros(n, dtype=bool)),
            _readonly(np.zeros(n, dtype=bool)),
        )

    @classmethod
    def from_participants(
        cls,
        participants: Iterable[ParticipantState],
        active_set: Iterable[ParticipantId] = (),
        epoch: int = 0,
    ) -> "SystemState":
        ps = sorted(participants, key=lambda p: p.id)
        ids = np.array([p.id for p in ps], dtype=np.int64)
        if len(np.unique(ids)) != len(ids):
            raise SortitionError("participant ids must be unique")
        hist = np.array([p.has_history for p in ps], dtype=bool)
        ema = np.array([p.ema_quality if p.has_history else np.nan for p in ps], dtype=float)
        if not np.all(np.isfinite(ema[hist])):
            raise SortitionError("ema_quality must be finite for participants with history")
        state = cls(
            epoch,
            _readonly(ids),
            _readonly(ema),
            _readonly(hist),
            _readonly(np.zeros(len(ids), dtype=bool)),
        )
        return state.with_active(active_set)

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SystemState):
            return NotImplemented
        return (
            self.epoch == other.epoch
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.ema, other.ema, equal_nan=True)
            and np.array_equal(self.has_history, other.has_history)
            and np.array_equal(self.active, other.active)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def participants(self) -> tuple[ParticipantState, ...]:
        return tuple(
            ParticipantState(int(i), float(q) if h else math.nan, bool(h))
            for i, q, h in zip(self.ids, self.ema, self.has_history)
        )

    @property
    def active_set(self) -> frozenset[ParticipantId]:
        return frozenset(int(i) for i in self.ids[self.active])

    def participant(self, pid: ParticipantId) -> ParticipantState:
        k = self.index_of([pid])[0]
        return ParticipantState(pid, float(self.ema[k]), bool(self.has_history[k]))

    def index_of(self, pids: Iterable[ParticipantId]) -> np.ndarray:
        """Positions of ``pids`` in the columnar arrays."""
        want = np.fromiter(pids, dtype=np.int64)
        pos = np.searchsorted(self.ids, want)
        if len(self.ids):
            ok = (pos < len(self.ids)) & (self.ids[np.minimum(pos, len(self.ids) - 1)] == want)
        else:
            ok = np.zeros(len(want), dtype=bool)
        if not np.all(ok):
            missing = sorted(int(x) for x in want[~ok])
            raise SortitionError(f"unknown participant ids: {missing}")
        return pos

    def with_active(self, active_set: Iterable[ParticipantId]) -> "SystemState":
        mask = np.zeros(len(self.ids), dtype=bool)
        mask[self.index_of(active_set)] = True
        return SystemState(self.epoch, self.ids, self.ema, self.has_history, _readonly(mask))

    def with_active_mask(self, mask: np.ndarray, epoch: int | None = None) -> "SystemState":
        mask = np.array(mask, dtype=bool)
        if mask.shape != self.ids.shape:
            raise SortitionError("active mask does not match the participant count")
        return SystemState(
            self.epoch if epoch is None else epoch, self.ids, self.ema, self.has_history, _readonly(mask)
        )

    def with_epoch(self, epoch: int) -> "SystemState":
        return SystemState(epoch, self.ids, self.ema, self.has_history, self.active)

    def add_participants(self, pids: Iterable[ParticipantId]) -> "SystemState":
        """New, history-less and inactive participants."""
        new = np.fromiter(pids, dtype=np.int64)
        if len(new) == 0:
            return self
        ids = np.concatenate([self.ids, new])
        order = np.argsort(ids, kind="stable")
        ids = ids[order]
        if np.any(ids[1:] == ids[:-1]):
            raise SortitionError("participant ids must be unique")
        n_new = len(new)
        ema = np.concatenate([self.ema, np.full(n_new, np.nan)])[order]
        hist = np.concatenate([self.has_history, np.zeros(n_new, dtype=bool)])[order]
        act = np.concatenate([self.active, np.zeros(n_new, dtype=bool)])[order]
        return SystemState(self.epoch, _readonly(ids), _readonly(ema), _readonly(hist), _readonly(act))

    def remove_participants(self, pids: Iterable[ParticipantId]) -> "SystemState":
        gone = self.index_of(pids)
        if len(gone) == 0:
            return self
        keep = np.ones(len(self.ids), dtype=bool)
        keep[gone] = False
        return SystemState(
            self.epoch,
            _readonly(self.ids[keep]),
            _readonly(self.ema[keep]),
            _readonly(self.has_history[keep]),
            _readonly(self.active[keep]),
        )


def ema_update(prev: float, target: float, alpha: float) -> float:
    """One EMA step: ``alpha * target + (1 - alpha) * prev``."""
    if not (math.isfinite(prev) and math.isfinite(target)):
        raise SortitionError(f"non-finite EMA input (prev={prev!r}, target={target!r})")
    if not (0.0 < alpha <= 1.0):
        raise SortitionError(f"alpha must lie in (0, 1], got {alpha!r}")
    out = alpha * target + (1.0 - alpha) * prev
    # rounding can push the convex combination a hair outside its endpoints
    lo, hi = (prev, target) if prev <= target else (target, prev)
    return min(max(out, lo), hi)


def percentile(values: Iterable[float], p: float) -> float:
    """p-th percentile with linear interpolation between closest ranks.

    The sorted sample ``x[0..n-1]`` is read at fractional rank
    ``h = (n - 1) * p / 100``; the result is ``x[k] + (h - k) * (x[k+1] - x[k])``
    with ``k = floor(h)``.
    """
    if not isinstance(values, np.ndarray):
        values = list(values)
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        raise SortitionError("percentile of an empty sample is undefined")
    if not np.all(np.isfinite(x)):
        raise SortitionError("percentile input must be finite")
    if not (0.0 <= p <= 100.0):
        raise SortitionError(f"p must lie in [0, 100], got {p!r}")
    return _sorted_percentile(x, p)


def _sorted_percentile(x: np.ndarray, p: float) -> float:
    h = (x.size - 1) * (p / 100.0)
    k = math.floor(h)
    if k >= x.size - 1:
        return float(x[-1])
    lo, hi = float(x[k]), float(x[k + 1])
    out = lo + (h - k) * (hi - lo)
    return min(max(out, lo), hi)


def _contribution_arrays(
    state: SystemState, contributions: EpochContributions
) -> tuple[np.ndarray, np.ndarray]:
    scores = contributions.scores
    if len(scores) == 0:
        raise SortitionError(
            f"epoch {contributions.epoch}: no contributions, targets are undefined"
        )
    pos = state.index_of(scores.keys())
    if not np.all(state.active[pos]):
        bad = sorted(int(state.ids[k]) for k in pos[~state.active[pos]])
        raise SortitionError(f"contributions from inactive participants: {bad}")
    vals = np.fromiter(scores.values(), dtype=float, count=len(scores))
    if not np.all(np.isfinite(vals)):
        raise SortitionError("contributed scores must be finite")
    return pos, vals


def _target_vector(
    state: SystemState, contributions: EpochContributions, params: SortitionParams
) -> np.ndarray:
    pos, vals = _contribution_arrays(state, contributions)
    svals = np.sort(vals)
    inactive_target = _sorted_percentile(svals, params.percentile_p)
    # population standard deviation: the contributors are the whole active population
    absent_target = float(svals[0]) - params.lambda_pen * float(np.std(svals))

    targets = np.where(state.active, absent_target, inactive_target)
    targets[pos] = vals
    return targets


def compute_targets(
    state: SystemState, contributions: EpochContributions, params: SortitionParams
) -> dict[ParticipantId, float]:
    """Target quality for every participant in ``state``."""
    t = _target_vector(state, contributions, params)
    return {int(i): float(v) for i, v in zip(state.ids, t)}


def _apply_target_vector(
    state: SystemState, targets: np.ndarray, params: SortitionParams
) -> SystemState:
    if not np.all(np.isfinite(targets)):
        raise SortitionError("targets must be finite")
    a = params.alpha
    prev = np.where(state.has_history, state.ema, targets)
    ema = a * targets + (1.0 - a) * prev
    ema = np.clip(ema, np.minimum(prev, targets), np.maximum(prev, targets))
    ema = np.where(state.has_history, ema, targets)
    return SystemState(
        state.epoch,
        state.ids,
        _readonly(ema),
        _readonly(np.ones(len(state.ids), dtype=bool)),
        state.active,
    )


def apply_targets(
    state: SystemState, targets: Mapping[ParticipantId, float], params: SortitionParams
) -> SystemState:
    """EMA-update every participant toward its target.

    A participant without history is seeded with its target directly.
    """
    missing = [int(i) for i in state.ids if int(i) not in targets]
    if missing:
        raise SortitionError(f"missing targets for participants: {missing}")
    vec = np.array([targets[int(i)] for i in state.ids], dtype=float)
    return _apply_target_vector(state, vec, params)


def select_active(
    state: SystemState, params: SortitionParams, rng: np.random.Generator
) -> frozenset[ParticipantId]:
    """Top-``n_act`` participants by EMA.

    Exact ties straddling the cut are broken by a uniform random subset, and
    a shortfall of ranked participants is filled uniformly from those without
    history.  ``rng`` is consumed only when one of those two cases occurs.
    """
    return frozenset(int(i) for i in state.ids[_select_mask(state, params, rng)])


def _select_mask(
    state: SystemState, params: SortitionParams, rng: np.random.Generator
) -> np.ndarray:
    n = len(state.ids)
    if n == 0:
        raise SortitionError("cannot select from an empty participant pool")
    n_act = min(params.n_act, n)
    mask = np.zeros(n, dtype=bool)
    ranked = np.flatnonzero(state.has_history)

    if len(ranked) <= n_act:
        mask[ranked] = True
        short = n_act - len(ranked)
        if short:
            fresh = np.flatnonzero(~state.has_history)
            mask[rng.choice(fresh, size=short, replace=False)] = True
        return mask

    q = state.ema[ranked]
    cut = np.partition(q, len(q) - n_act)[len(q) - n_act]
    above = ranked[q > cut]
    tied = ranked[q == cut]
    mask[above] = True
    need = n_act - len(above)
    if need == len(tied):
        mask[tied] = True
    else:
        mask[rng.choice(tied, size=need, replace=False)] = True
    return mask


def step(
    state: SystemState,
    contributions: EpochContributions,
    params: SortitionParams,
    rng: np.random.Generator,
) -> SystemState:
    """Targets, EMA update, then selection of the next epoch's active set."""
    if contributions.epoch != state.epoch:
        raise SortitionError(
            f"contributions are for epoch {contributions.epoch}, state is at {state.epoch}"
        )
    updated = _apply_target_vector(state, _target_vector(state, contributions, params), params)
    return updated.with_active_mask(_select_mask(updated, params, rng), state.epoch + 1)
