"""Config files, bundled presets and byte-stable CSV/JSON output."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from .core import SortitionError, SortitionParams
from .experiments import (
    Mode,
    RunSummary,
    ScenarioConfig,
    SweepPoint,
    activity_quality_correlation,
    z_score,
)
from .population import SimConfig

FORMAT = "merit-sortition/1"
SCHEMAS = {
    "epochs.csv": "epochs/1",
    "participants.csv": "participants/1",
    "trajectories.csv": "trajectories/1",
    "summary.json": "summary/1",
    "sweep.csv": "sweep/1",
}
RUN_MODES = ("merit", "random", "paired")


class ConfigError(ValueError):
    """A config file that does not validate; the message names the field."""


@dataclass(frozen=True)
class SweepSettings:
    n_points: int = 50
    seeds: int = 10


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig
    run_mode: str = "paired"
    description: str = ""
    sweep: SweepSettings = field(default_factory=SweepSettings)

    def to_dict(self) -> dict[str, Any]:
        sc = self.scenario
        return {
            "label": sc.label,
            "description": self.description,
            "mode": self.run_mode,
            "sim": dataclasses.asdict(sc.sim),
            "sortition": dataclasses.asdict(sc.sortition),
            "sweep": dataclasses.asdict(self.sweep),
        }


_TOP_KEYS = {"label", "description", "mode", "sim", "sortition", "sweep"}
_INT_FIELDS = {"n_init", "n_epochs", "seed", "n_act", "n_points", "seeds"}


def _section(raw: Any, name: str, cls: type) -> dict[str, Any]:
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in sorted(set(raw) - known):
        raise ConfigError(f"{name}.{key}: unknown key")
    out = {}
    for key, value in raw.items():
        path = f"{name}.{key}"
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        if key in _INT_FIELDS:
            if isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{path}: expected an integer, got {value!r}")
            value = int(value)
        else:
            value = float(value)
            if not math.isfinite(value):
                raise ConfigError(f"{path}: must be finite")
        out[key] = value
    return out


def _build(cls: type, kwargs: dict[str, Any], name: str):
    try:
        return cls(**kwargs)
    except (ValueError, SortitionError) as exc:
        msg = str(exc)
        first = msg.split(" ", 1)[0]
        known = {f.name for f in dataclasses.fields(cls)}
        prefix = f"{name}.{first}" if first in known else name
        raise ConfigError(f"{prefix}: {msg}") from None


def parse_config(raw: Any) -> RunConfig:
    """Validate a decoded config (or a run manifest wrapping one)."""
    if isinstance(raw, dict) and raw.get("format") == FORMAT and "config" in raw:
        raw = raw["config"]
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    for key in sorted(set(raw) - _TOP_KEYS):
        raise ConfigError(f"{key}: unknown key")
    for key in ("sim", "sortition"):
        if key not in raw:
            raise ConfigError(f"{key}: missing section")
    label = raw.get("label", "")
    description = raw.get("description", "")
    if not isinstance(label, str):
        raise ConfigError("label: expected a string")
    if not isinstance(description, str):
        raise ConfigError("description: expected a string")
    mode = raw.get("mode", "paired")
    if mode not in RUN_MODES:
        raise ConfigError(f"mode: expected one of {', '.join(RUN_MODES)}, got {mode!r}")

    sim = _build(SimConfig, _section(raw["sim"], "sim", SimConfig), "sim")
    sortition = _build(
        SortitionParams, _section(raw["sortition"], "sortition", SortitionParams), "sortition"
    )
    sweep = _build(SweepSettings, _section(raw.get("sweep", {}), "sweep", SweepSettings), "sweep")
    if sweep.n_points < 1:
        raise ConfigError("sweep.n_points: must be positive")
    if sweep.seeds < 1:
        raise ConfigError("sweep.seeds: must be positive")

    scenario = ScenarioConfig(sim, sortition, Mode.MERIT, label)
    return RunConfig(scenario, mode, description, sweep)


def preset_names() -> list[str]:
    files = resources.files("merit_sortition").joinpath("presets").iterdir()
    return sorted(f.name[: -len(".json")] for f in files if f.name.endswith(".json"))


def load_preset(name: str) -> RunConfig:
    if name not in preset_names():
        raise ConfigError(f"unknown preset {name!r}")
    text = resources.files("merit_sortition").joinpath("presets", f"{name}.json").read_text("utf-8")
    return parse_config(json.loads(text))


def load_config(path_or_preset: str | Path) -> RunConfig:
    """Read a JSON config or manifest; a bare preset name also works."""
    path = Path(path_or_preset)
    if not path.exists():
        if str(path_or_preset) in preset_names():
            return load_preset(str(path_or_preset))
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw)


# -- serialization ---------------------------------------------------------


def fmt(x: Any) -> str:
    """Locale-independent cell text; floats use the shortest round-trip repr."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        return repr(x)
    return str(x)


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def canonical_json(obj: Any) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        obj = float(obj)
        return obj if math.isfinite(obj) else None
    return obj


def epochs_csv(runs: Sequence[RunSummary]) -> str:
    header = ["mode", "epoch", "n_total", "n_active", "mean_t_active", "display_ema_mean_t"]
    rows = []
    for run in runs:
        mode = run.config.mode.value
        for e in range(run.n_epochs):
            rows.append(
                (mode, e, run.pool_size[e], run.n_active[e], run.mean_t[e], run.display_ema[e])
            )
    return csv_text(header, rows)


def participants_csv(runs: Sequence[RunSummary]) -> str:
    header = [
        "mode", "participant_id", "median_quality", "join_epoch", "leave_epoch",
        "epochs_active", "activity_fraction",
    ]
    rows = [
        (run.config.mode.value, p.id, p.median_quality, p.join_epoch, p.leave_epoch,
         p.epochs_active, run.activity_fraction[p.id])
        for run in runs
        for p in run.participants
    ]
    return csv_text(header, rows)


def trajectories_csv(runs: Sequence[RunSummary]) -> str:
    """Long format: one row per (mode, epoch, participant) with the post-update EMA."""
    header = ["mode", "epoch", "participant_id", "active", "ema"]
    rows = []
    for run in runs:
        mode = run.config.mode.value
        for rec in run.epoch_records:
            for pid in sorted(rec.per_participant_ema):
                rows.append((mode, rec.epoch, pid, pid in rec.active_ids, rec.per_participant_ema[pid]))
    return csv_text(header, rows)


def summary_dict(runs: Sequence[RunSummary]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for run in runs:
        entry: dict[str, Any] = {
            "time_avg_mean_t": run.time_avg_mean_t,
            "final_pool_size": int(run.pool_size[-1]),
            "participants_ever": len(run.participants),
        }
        if len(run.participants) >= 3:
            corr = activity_quality_correlation(run)
            entry["activity_quality_spearman"] = corr.rho
            entry["activity_quality_degenerate"] = corr.degenerate
        out[run.config.mode.value] = entry
    by_mode = {r.config.mode: r for r in runs}
    if Mode.MERIT in by_mode and Mode.RANDOM in by_mode:
        out["z_score"] = z_score(by_mode[Mode.MERIT], by_mode[Mode.RANDOM])
    return out


def sweep_csv(points: Sequence[SweepPoint]) -> str:
    n_seeds = len(points[0].per_seed) if points else 0
    header = ["P", "mean_merit", "mean_random", "z", "z_stderr"]
    for k in range(n_seeds):
        header += [f"merit_s{k}", f"random_s{k}", f"z_s{k}"]
    rows = []
    for pt in points:
        row: list[Any] = [pt.p, pt.mean_merit, pt.mean_random, pt.z, pt.z_stderr]
        for r in pt.per_seed:
            row += [r.mean_merit, r.mean_random, r.z]
        rows.append(row)
    return csv_text(header, rows)


def manifest(command: str, cfg: RunConfig, files: dict[str, str], extra: dict | None = None) -> str:
    """Key-sorted JSON echo of everything that determines the outputs."""
    body = {
        "format": FORMAT,
        "command": command,
        "config": cfg.to_dict(),
        "versions": {"merit_sortition": __version__, "numpy": np.__version__},
        "files": {
            name: {"schema": SCHEMAS[name], "sha256": hashlib.sha256(text.encode()).hexdigest()}
            for name, text in sorted(files.items())
        },
    }
    if extra:
        body.update(extra)
    return canonical_json(body)


def write_bundle(out_dir: Path, files: dict[str, str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out_dir / name).write_text(text, encoding="utf-8", newline="")
