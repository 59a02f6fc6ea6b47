"""Noise filtering via temporal-distribution heatmaps and propeller
segmentation via k-means.

Rotating blades produce dense, polarity-balanced event clumps; sensor
noise is sparse and polarity-skewed. Binning a short window into a
spatial grid and thresholding per-bin count and positive-polarity
fraction removes most noise without touching blade events. The
surviving events are then split into per-propeller tracks with Lloyd's
algorithm on their (x, y) coordinates; the converged centroids are the
rotation-center estimates used by motion compensation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .events import Events


@dataclass(frozen=True)
class HeatmapPair:
    """Per-bin event counts and positive-polarity fractions for one window.

    Bin (i, j) aggregates events with floor(x / bin_size) == i and
    floor(y / bin_size) == j, so axis 0 indexes columns and axis 1 rows.
    Bins with no events carry a fraction of 0.
    """

    bin_size: int
    count_map: np.ndarray
    positive_fraction_map: np.ndarray
    window: tuple[int, int]


def build_heatmaps(events: Events, window: tuple[int, int], bin_size: int) -> HeatmapPair:
    """Bin the windowed events into count and polarity-fraction grids."""
    if bin_size < 1:
        raise ConfigError(f"bin_size must be >= 1, got {bin_size}")
    t_lo, t_hi = window
    if t_hi < t_lo:
        raise ConfigError("window interval is inverted")
    windowed = events.time_slice(t_lo, t_hi)
    if len(windowed) == 0:
        return HeatmapPair(bin_size, np.zeros((1, 1), np.int64), np.zeros((1, 1)), (t_lo, t_hi))
    bx = windowed.x.astype(np.int64) // bin_size
    by = windowed.y.astype(np.int64) // bin_size
    nx, ny = int(bx.max()) + 1, int(by.max()) + 1
    flat = bx * ny + by
    counts = np.bincount(flat, minlength=nx * ny)
    positives = np.bincount(flat, weights=(windowed.p > 0).astype(np.float64), minlength=nx * ny)
    fraction = np.divide(positives, counts, out=np.zeros(nx * ny), where=counts > 0)
    return HeatmapPair(
        bin_size=bin_size,
        count_map=counts.reshape(nx, ny),
        positive_fraction_map=fraction.reshape(nx, ny),
        window=(t_lo, t_hi),
    )


def filter_noise(
    events: Events,
    heatmaps: HeatmapPair,
    count_ratio: float = 1.0 / 3.0,
    polarity_band: tuple[float, float] = (0.3, 0.7),
    return_mask: bool = False,
):
    """Keep events whose bin passes both the count and polarity tests.

    A bin passes when its count is at least count_ratio times the mean
    count over nonzero bins and its positive fraction lies inside
    polarity_band (inclusive). Zero bins are excluded from the mean so
    sparse sensors do not deflate the threshold. Event order is
    preserved. With return_mask the per-event keep mask (over the
    windowed events) comes back alongside.
    """
    lo, hi = polarity_band
    if not 0.0 <= lo <= hi <= 1.0:
        raise ConfigError(f"polarity band must satisfy 0 <= lo <= hi <= 1, got {polarity_band}")
    if count_ratio < 0:
        raise ConfigError("count_ratio must be nonnegative")
    windowed = events.time_slice(*heatmaps.window)
    if len(windowed) == 0:
        keep = np.zeros(0, dtype=bool)
        return (windowed, keep) if return_mask else windowed
    counts = heatmaps.count_map
    nonzero = counts[counts > 0]
    threshold = count_ratio * float(nonzero.mean()) if nonzero.size else 0.0
    passing = (counts >= threshold) & (heatmaps.positive_fraction_map >= lo) & (
        heatmaps.positive_fraction_map <= hi
    )
    nx, ny = counts.shape
    bx = windowed.x.astype(np.int64) // heatmaps.bin_size
    by = windowed.y.astype(np.int64) // heatmaps.bin_size
    inside = (bx < nx) & (by < ny)
    keep = np.zeros(len(windowed), dtype=bool)
    keep[inside] = passing[bx[inside], by[inside]]
    kept = windowed.select(keep)
    return (kept, keep) if return_mask else kept


@dataclass(frozen=True)
class PropellerTrack:
    """One propeller's segmented events and rotation-center estimate."""

    prop_id: int
    events: Events
    centroid: tuple[float, float]

    @property
    def member_count(self) -> int:
        return len(self.events)


def robust_center(events: Events, trim_factor: float = 1.5, iters: int = 3) -> tuple[float, float]:
    """Rotation-center estimate tolerant of residual background noise.

    Starts from the component-wise median and iteratively re-averages the
    events within trim_factor times the median radius, so uniformly
    spread leftover noise far from the rotor cannot drag the center the
    way a plain mean does. Deterministic; falls back to the mean when
    trimming would discard everything.
    """
    if len(events) == 0:
        raise DataError("cannot locate a center from an empty track")
    coords = np.column_stack([events.x, events.y]).astype(np.float64)
    center = np.median(coords, axis=0)
    for _ in range(iters):
        radii = np.hypot(coords[:, 0] - center[0], coords[:, 1] - center[1])
        keep = radii <= trim_factor * np.median(radii)
        if not keep.any():
            break
        center = coords[keep].mean(axis=0)
    return float(center[0]), float(center[1])


def _farthest_point_seeds(coords: np.ndarray, k: int) -> np.ndarray:
    """Deterministic seeding: earliest event first, then repeatedly the
    point farthest from all chosen seeds. Ties break lexicographically
    on (x, y) so shuffled input cannot change the result."""
    seeds = np.empty((k, 2))
    order = np.lexsort((coords[:, 1], coords[:, 0]))
    seeds[0] = coords[order[0]]
    dist = np.sum((coords - seeds[0]) ** 2, axis=1)
    for i in range(1, k):
        best = dist.max()
        candidates = np.flatnonzero(dist == best)
        pick = candidates[np.lexsort((coords[candidates, 1], coords[candidates, 0]))[0]]
        seeds[i] = coords[pick]
        dist = np.minimum(dist, np.sum((coords - seeds[i]) ** 2, axis=1))
    return seeds


def _seed_coords(events: Events) -> np.ndarray:
    """Coordinates ordered so the earliest event (ties: smallest x, y)
    comes first, independent of input order."""
    order = np.lexsort((events.y, events.x, events.t))
    return np.column_stack([events.x[order], events.y[order]]).astype(np.float64)


def segment_propellers(
    events: Events,
    k: int,
    max_iters: int = 100,
    tol: float = 1e-3,
    seed: int | None = None,
) -> list[PropellerTrack]:
    """Split a filtered stream into k per-propeller tracks.

    Lloyd's iteration on spatial coordinates with deterministic
    farthest-point seeding (the seed argument is accepted for interface
    stability but the seeding needs no randomness). An emptied cluster
    is re-seeded at the point currently farthest from its assigned
    centroid. The within-cluster sum of squares is asserted nonincreasing
    every iteration. Tracks come back ordered by centroid (y, x).
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if len(events) == 0:
        raise DataError("cannot segment an empty stream")
    coords = np.column_stack([events.x, events.y]).astype(np.float64)
    n_distinct = np.unique(coords, axis=0).shape[0]
    if k > n_distinct:
        raise DataError(f"k={k} exceeds the {n_distinct} distinct event coordinates")

    centroids = _farthest_point_seeds(_seed_coords(events), k)
    prev_objective = np.inf
    assign = np.zeros(len(events), dtype=np.int64)
    for _ in range(max_iters):
        d2 = np.sum((coords[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        assign = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(len(events)), assign]
        for c in range(k):
            if not np.any(assign == c):
                far = int(np.argmax(point_d2))
                centroids[c] = coords[far]
                assign[far] = c
                point_d2[far] = 0.0
        new_centroids = np.empty_like(centroids)
        for c in range(k):
            new_centroids[c] = coords[assign == c].mean(axis=0)
        objective = float(np.sum((coords - new_centroids[assign]) ** 2))
        assert objective <= prev_objective + 1e-6 * max(1.0, min(prev_objective, objective)), (
            f"k-means objective increased: {prev_objective} -> {objective}"
        )
        shift = float(np.max(np.abs(new_centroids - centroids)))
        centroids = new_centroids
        prev_objective = objective
        if shift < tol:
            break

    # final assignment against converged centroids
    d2 = np.sum((coords[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    assign = np.argmin(d2, axis=1)
    order = np.lexsort((centroids[:, 0], centroids[:, 1]))
    tracks = []
    for new_id, c in enumerate(order):
        members = np.flatnonzero(assign == c)
        sub = events.select(members)
        centroid = coords[members].mean(axis=0) if members.size else centroids[c]
        tracks.append(PropellerTrack(prop_id=new_id, events=sub, centroid=(float(centroid[0]), float(centroid[1]))))
    return tracks
