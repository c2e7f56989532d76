"""Replay fidelity statistics: executed trajectories compared against ground truth.

Replay action streams are resampled onto the ground-truth tick timeline by
latest-sample association, then reduced per tick and per action dimension to
mean, population variance, and mean absolute deviation from the expert.  The
arithmetic is plain accumulation in replay order so results are reproducible
to the bit and an independent naive recomputation matches exactly.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path

from .core import ConfigError, Episode
from .registry import COMMAND_STREAM_SUFFIX
from .store import StoreError, episode_actions

CSV_HEADER = "tick,dim,gt,mean,var,mad"


@dataclass(frozen=True, eq=False)
class ReplayStats:
    """Per-tick, per-dimension replay spread against a ground-truth episode.

    Tables are tick-major tuples of per-dimension tuples.  global_mad is the
    mean of the mad table; max_deviation is the largest single excursion of
    any replay from ground truth.
    """

    tick_indices: tuple[int, ...]
    tick_ts: tuple[int, ...]
    gt: tuple[tuple[float, ...], ...]
    mean: tuple[tuple[float, ...], ...]
    var: tuple[tuple[float, ...], ...]
    mad: tuple[tuple[float, ...], ...]
    global_mad: float
    max_deviation: float
    replay_count: int

    @property
    def tick_count(self) -> int:
        return len(self.tick_indices)

    @property
    def dim(self) -> int:
        return len(self.gt[0]) if self.gt else 0


def _resample_actions(ep: Episode, ts_list: list[int]) -> list[list[float]]:
    """Action vectors at arbitrary timestamps: latest command at or before
    each instant, backfilled from the first command for earlier instants."""
    cmd_ids = [sid for sid in ep.streams if sid.endswith(COMMAND_STREAM_SUFFIX)]
    if not cmd_ids:
        raise StoreError(f"episode {ep.id!r} has no command streams to use as actions")
    per_stream = []
    for sid in cmd_ids:
        samples = ep.streams[sid]
        if not samples:
            raise StoreError(f"episode {ep.id!r}: empty command stream {sid!r}")
        stamps = [s.capture_ts for s in samples]
        values = []
        for ts in ts_list:
            i = bisect_right(stamps, ts) - 1
            values.append(samples[max(i, 0)].payload.values)
        per_stream.append(values)
    return [[x for vs in row for x in vs] for row in zip(*per_stream)]


def compare_replays(gt: Episode, replays: list[Episode]) -> ReplayStats:
    """Spread of replay executions around the expert, on the expert's ticks.

    Variance is population variance over the replay set; a cell where every
    replay agrees reports exactly zero.  Raises on an empty replay list or
    mismatched action dimensions.
    """
    if not replays:
        raise ConfigError("need at least one replay to compare")
    gt_actions = episode_actions(gt)
    if not gt_actions:
        raise ConfigError(f"ground truth {gt.id!r} has no frames")
    dim = gt_actions[0].dim
    ts_list = [f.tick_ts for f in gt.frames]
    resampled = []
    for ep in replays:
        rows = _resample_actions(ep, ts_list)
        if len(rows[0]) != dim:
            raise ConfigError(
                f"replay {ep.id!r} action dim {len(rows[0])} != ground truth dim {dim}"
            )
        resampled.append(rows)
    n = len(resampled)
    mean_t, var_t, mad_t = [], [], []
    max_dev = 0.0
    for t, gt_row in enumerate(gt_actions):
        means, variances, mads = [], [], []
        for d in range(dim):
            values = [resampled[i][t][d] for i in range(n)]
            g = gt_row.values[d]
            mean = sum(values) / n
            if min(values) == max(values):
                var = 0.0
            else:
                var = sum((v - mean) ** 2 for v in values) / n
            mad = sum(abs(v - g) for v in values) / n
            max_dev = max(max_dev, max(abs(v - g) for v in values))
            means.append(mean)
            variances.append(var)
            mads.append(mad)
        mean_t.append(tuple(means))
        var_t.append(tuple(variances))
        mad_t.append(tuple(mads))
    cells = len(gt_actions) * dim
    return ReplayStats(
        tick_indices=tuple(f.tick_index for f in gt.frames),
        tick_ts=tuple(ts_list),
        gt=tuple(tuple(row.values) for row in gt_actions),
        mean=tuple(mean_t),
        var=tuple(var_t),
        mad=tuple(mad_t),
        global_mad=sum(sum(row) for row in mad_t) / cells,
        max_deviation=max_dev,
        replay_count=n,
    )


def emit_stats_csv(stats: ReplayStats, path) -> int:
    """Write the stats table tick-major; returns the line count written.

    Floats are rendered with repr so re-emitting the same stats is
    byte-identical and values survive a parse round trip.
    """
    lines = [CSV_HEADER]
    for t, tick in enumerate(stats.tick_indices):
        for d in range(stats.dim):
            lines.append(
                f"{tick},{d},{stats.gt[t][d]!r},{stats.mean[t][d]!r},"
                f"{stats.var[t][d]!r},{stats.mad[t][d]!r}"
            )
    Path(path).write_text("\n".join(lines) + "\n")
    return len(lines)
