"""Run configuration, metrics sinks, stability analysis, scoring, and plots.

Configs are flat key=value text files so experiment diffs stay readable; every
value round-trips losslessly (floats via repr). Metrics are a fixed-column CSV
per run; evaluation episodes go to a JSON-lines log that the stability
analysis and the `evaluate` command replay from.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigError, DataError

__all__ = [
    "RunConfig",
    "ALPHA_GRID",
    "MetricsWriter",
    "StabilityReport",
    "stability_metrics",
    "NormalizedScore",
    "normalized_score",
    "emit_plot",
    "RunLock",
    "METRIC_FIELDS",
]

ALPHA_GRID = (0.2, 0.5, 2.0, 5.0)
METRIC_FIELDS = ["step", "bc_loss", "fqe_loss", "mmd_loss", "policy_loss",
                 "eval_return_mean", "eval_return_min"]


@dataclass
class RunConfig:
    """All knobs of a training run. Defaults follow the reference recipe
    (gamma 0.99, batch 256, tau 0.005, actor/behavior lr 1e-5, critic/ratio
    lr 1e-4); desk-scale experiments override the rates and step counts."""

    env: str = "gridworld"
    dataset: str = ""
    mode: str = "full"  # full | ablation1 | ablation2
    gamma: float = 0.99
    batch_size: int = 256
    tau: float = 0.005
    lr_actor: float = 1e-5
    lr_behavior: float = 1e-5
    lr_critic: float = 1e-4
    lr_ratio: float = 1e-4
    alpha: float = 0.5
    phase1_steps: int = 20000
    phase2_steps: int = 20000
    seed: int = 0
    eval_every: int = 1000
    eval_episodes: int = 10
    ratio_clip: float = 2.0
    kernel: str = "gaussian"
    bandwidth: float = 0.0  # 0 -> median heuristic on the first batch
    q_hidden: str = "auto"
    policy_hidden: str = "auto"
    ratio_hidden: str = "64,64"
    mu_floor: float = 1e-4
    horizon: int = 0  # 0 -> environment default
    checkpoint_every: int = 0
    ratio_steps_per_iter: int = 1

    def __post_init__(self):
        if self.mode not in ("full", "ablation1", "ablation2"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        for name in ("gamma", "batch_size", "tau", "lr_actor", "lr_behavior",
                     "lr_critic", "lr_ratio", "alpha", "eval_episodes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")

    # -- serialization -------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {v!r}" if isinstance(v, str) else f"{f.name} = {v!r}")
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        typed = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in typed:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            kwargs[key] = _parse_value(typed[key], val, key)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            return cls.from_text(fh.read())

    def with_overrides(self, pairs: list[str]) -> "RunConfig":
        typed = {f.name: f.type for f in fields(self)}
        updates = {}
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override must be key=value, got {pair!r}")
            key, val = (part.strip() for part in pair.split("=", 1))
            if key not in typed:
                raise ConfigError(f"unknown config key {key!r}")
            updates[key] = _parse_value(typed[key], val, key)
        return replace(self, **updates)


def _parse_value(typ, val: str, key: str):
    name = typ if isinstance(typ, str) else typ.__name__
    try:
        if name == "int":
            return int(val)
        if name == "float":
            return float(val)
        return val.strip("'\"")
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key}={val!r} as {name}") from exc


class MetricsWriter:
    """Fixed-column CSV sink; repr-formatted floats keep reruns byte-identical."""

    def __init__(self, path: str | None, fieldnames=METRIC_FIELDS):
        self.fieldnames = list(fieldnames)
        self.rows: list[dict] = []
        self._fh = open(path, "w", newline="") if path else None
        if self._fh:
            self._fh.write(",".join(self.fieldnames) + "\n")

    def write(self, **values) -> None:
        unknown = set(values) - set(self.fieldnames)
        if unknown:
            raise ValueError(f"unknown metric fields {sorted(unknown)}")
        self.rows.append(values)
        if self._fh:
            cells = []
            for name in self.fieldnames:
                v = values.get(name)
                cells.append("" if v is None else repr(v) if isinstance(v, float) else str(v))
            self._fh.write(",".join(cells) + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


@dataclass
class StabilityReport:
    """Worst-case evaluation spread, as percent shortfalls from the mean."""

    worst_episode_pct: float
    worst_eval_pct: float
    evals_used: int
    truncated: bool  # fewer than the requested window of evaluations existed


def _pct_below_mean(values: np.ndarray) -> float:
    mean = float(np.mean(values))
    if abs(mean) < 1e-12:
        return 0.0
    return 100.0 * (mean - float(np.min(values))) / abs(mean)


def stability_metrics(eval_log: list[dict], window: int = 10) -> StabilityReport:
    """eval_log entries are {"step": int, "returns": [per-episode returns]}."""
    if not eval_log:
        raise DataError("no evaluations logged")
    final_returns = np.asarray(eval_log[-1]["returns"], dtype=float)
    worst_episode = _pct_below_mean(final_returns)
    tail = eval_log[-window:]
    means = np.asarray([np.mean(e["returns"]) for e in tail], dtype=float)
    worst_eval = _pct_below_mean(means)
    return StabilityReport(worst_episode_pct=worst_episode, worst_eval_pct=worst_eval,
                           evals_used=len(tail), truncated=len(tail) < window)


@dataclass
class NormalizedScore:
    raw: float
    random_ref: float
    expert_ref: float
    score: float


def normalized_score(raw: float, random_ref: float, expert_ref: float) -> float:
    """100 * (raw - random) / (expert - random); deliberately unclamped."""
    if expert_ref == random_ref:
        raise ValueError("expert and random references must differ")
    return 100.0 * (raw - random_ref) / (expert_ref - random_ref)


class RunLock:
    """One process owns a run directory at a time."""

    def __init__(self, run_dir: str):
        self.path = os.path.join(run_dir, "LOCK")

    def __enter__(self):
        if os.path.exists(self.path):
            raise DataError(f"run directory is locked: {self.path}")
        with open(self.path, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        if os.path.exists(self.path):
            os.remove(self.path)
        return False


# ---------------------------------------------------------------------------
# SVG learning curves (hand-rolled: a polyline per field, mean+-std band
# across seeds when several CSVs are given).
# ---------------------------------------------------------------------------

def _read_metric(path: str, field: str):
    steps, vals = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or field not in reader.fieldnames:
            raise DataError(f"field {field!r} not in {path}")
        for row in reader:
            cell = row.get(field, "")
            if cell not in ("", None):
                steps.append(float(row["step"]))
                vals.append(float(cell))
    if not steps:
        raise DataError(f"no rows with field {field!r} in {path}")
    return np.asarray(steps), np.asarray(vals)


def emit_plot(metrics_csvs: list[str], plot_fields: list[str], out_path: str,
              width: int = 640, height: int = 200) -> None:
    """One chart per field, stacked into a single SVG file."""
    charts = []
    pad = 30
    for fi, field in enumerate(plot_fields):
        series = [_read_metric(p, field) for p in metrics_csvs]
        steps = series[0][0]
        for s, _ in series[1:]:
            if s.shape != steps.shape or not np.array_equal(s, steps):
                raise DataError(f"metric step grids differ across seeds for {field!r}")
        values = np.stack([v for _, v in series])  # (n_seeds, n_rows)
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        lo, hi = mean - std, mean + std
        y_min = float(min(lo.min(), mean.min()))
        y_max = float(max(hi.max(), mean.max()))
        if y_max == y_min:
            y_max = y_min + 1.0
        x_span = float(steps.max() - steps.min()) or 1.0

        def sx(x):
            return pad + (x - steps.min()) / x_span * (width - 2 * pad)

        def sy(y):
            return height - pad - (y - y_min) / (y_max - y_min) * (height - 2 * pad)

        y_off = fi * height
        parts = [f'<g transform="translate(0,{y_off})">']
        parts.append(f'<text x="{pad}" y="14" font-size="11">{field}</text>')
        if len(metrics_csvs) > 1:
            band = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(steps, hi))
            band += " " + " ".join(
                f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(steps[::-1], lo[::-1]))
            parts.append(f'<polygon class="band" points="{band}" fill="#9ecae1" opacity="0.5"/>')
        line = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(steps, mean))
        parts.append(
            f'<polyline class="mean" data-field="{field}" points="{line}" '
            f'fill="none" stroke="#3182bd" stroke-width="1.5"/>')
        parts.append("</g>")
        charts.append("\n".join(parts))
    total_h = height * len(plot_fields)
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{total_h}" '
           f'viewBox="0 0 {width} {total_h}">\n' + "\n".join(charts) + "\n</svg>\n")
    with open(out_path, "w") as fh:
        fh.write(svg)
