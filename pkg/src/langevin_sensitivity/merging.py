"""Particle merging: averaging tangent vectors of particles that share a bin.

Replacing ``T`` by its average over particles whose positions fall in the
same cell approximates ``E[T | X]``.  The ensemble estimator keeps its mean
and loses variance.  Bins are the cells ``floor(x / bin_width)`` of a mesh
anchored at the origin.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import UsageError
from .estimators import tangent_estimates

__all__ = ["MergeConfig", "merge_tangents", "merged_ensemble_sensitivity", "merge_compare"]


@dataclass(frozen=True)
class MergeConfig:
    """Merging mesh and schedule.

    ``batch_size`` is the number of interacting particles per independent
    batch; ``None`` merges over the whole ensemble.
    """

    bin_width: float = 0.04
    merge_period_steps: int = 10
    enabled: bool = True
    batch_size: Optional[int] = None

    def __post_init__(self):
        if not self.bin_width > 0:
            raise UsageError("bin_width must be positive")
        if self.merge_period_steps < 1:
            raise UsageError("merge_period_steps must be a positive integer")
        if self.batch_size is not None and self.batch_size < 2:
            raise UsageError("merging needs at least two particles per batch")


def merge_tangents(positions, tangents, bin_width, groups=None, alive=None):
    """Replace each tangent by the mean tangent of its bin.

    ``groups`` (optional labels) keeps particles of different groups apart;
    particles with ``alive`` false are left untouched and ignored.
    """
    x = np.asarray(positions, dtype=float)
    T = np.asarray(tangents, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    squeeze = T.ndim == 1
    if squeeze:
        T = T[:, None]
    if x.shape[0] != T.shape[0]:
        raise UsageError("positions and tangents must have the same length")
    out = T.copy()
    idx = np.arange(x.shape[0]) if alive is None else np.flatnonzero(alive)
    if idx.size == 0:
        return out[:, 0] if squeeze else out
    keys = np.floor(x[idx] / bin_width)
    if groups is not None:
        keys = np.column_stack([np.asarray(groups)[idx], keys])
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.bincount(inv)
    for j in range(T.shape[1]):
        sums = np.bincount(inv, weights=T[idx, j])
        out[idx, j] = sums[inv] / counts[inv]
    return out[:, 0] if squeeze else out


def _merger(merge_config):
    bw = merge_config.bin_width

    def merge(x, T, alive, groups):
        return merge_tangents(x, T, bw, groups=groups, alive=alive)

    return merge


def merged_ensemble_sensitivity(config, merge_config, model, pert, obs):
    """Ensemble sensitivity series with periodic tangent merging.

    With batches, the standard error is computed from the batch means.
    """
    if not merge_config.enabled:
        raise UsageError("merge_config.enabled is false")
    if config.n_replicas < 2:
        raise UsageError("merging needs n_replicas >= 2")
    group = merge_config.batch_size or config.n_replicas
    _, ens = tangent_estimates(
        config, model, pert, obs, merge=_merger(merge_config),
        merge_period=merge_config.merge_period_steps, group_size=group, want_average=False,
    )
    ens.estimator = "merged_ensemble"
    return ens


def merge_compare(config, merge_config, model, pert, obs):
    """Merged and plain ensemble runs with the same replicas and noise.

    Returns ``(rows, merged, plain)`` where rows are
    ``(time, mean_merged, se_merged, mean_plain, se_plain, var_ratio)`` and
    ``var_ratio = se_plain^2 / se_merged^2``.
    """
    merged = merged_ensemble_sensitivity(config, merge_config, model, pert, obs)
    _, plain = tangent_estimates(config, model, pert, obs, want_average=False)
    sm, sp = merged.series, plain.series
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(sm[:, 2] > 0, sp[:, 2] ** 2 / sm[:, 2] ** 2, np.nan)
    rows = np.column_stack([sm[:, 0], sm[:, 1], sm[:, 2], sp[:, 1], sp[:, 2], ratio])
    return rows, merged, plain
