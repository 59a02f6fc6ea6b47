"""Adaptive batch growth and density-aware downsampling.

Batches grow bundle by bundle while the new bundle's warp objective
stays consistent with the batch tail under the current speed estimate;
a speed change inflates the relative objective gap and stops growth, so
the constant-velocity assumption holds inside every batch. Grown
batches can then be thinned by density importance sampling: events are
kept with probability proportional to their local spatiotemporal
density, which discards isolated noise before the (per-candidate-speed)
warp evaluations run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

from .errors import ConfigError
from .events import EventBatch, EventBundle, Events, concat_events
from .motion import ObjectiveEvaluator, PatchGeometry, patch_for


@dataclass(frozen=True)
class BatchPolicy:
    """Knobs for batch growth and downsampling."""

    dt_us: int = 1000  # bundle interval
    delta: float = 0.3  # consistency threshold
    max_bundles: int = 8
    sample_fraction: float = 1.0
    space_radius_px: float = 2.0
    time_radius_us: float = 200.0  # 2 px at the default 100 us-per-px ratio

    def __post_init__(self) -> None:
        if self.dt_us <= 0:
            raise ConfigError("dt_us must be positive")
        if self.delta <= 0:
            raise ConfigError("delta must be positive")
        if self.max_bundles < 1:
            raise ConfigError("max_bundles must be at least 1")
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ConfigError("sample_fraction must lie in (0, 1]")
        if self.space_radius_px <= 0 or self.time_radius_us <= 0:
            raise ConfigError("neighborhood radii must be positive")

    @property
    def neighborhood_radius(self) -> tuple[float, float]:
        return (self.space_radius_px, self.time_radius_us)


class StopReason(str, Enum):
    CONSISTENCY = "consistency"
    BUNDLE_LIMIT = "bundle_limit"
    STREAM_END = "stream_end"


def consistency_rate(
    last_bundle: EventBundle,
    candidate: EventBundle,
    omega_rad_s: float,
    center: tuple[float, float],
    eps: float = 1.0,
    spin: int = +1,
    patch: PatchGeometry | None = None,
) -> float:
    """Relative alignment-score gap between a candidate bundle and the
    batch tail: |S(candidate) - S(last)| / S(last).

    Both bundles are warped with the same speed to the same reference
    time over identical patch geometry. The score S is the log of the
    combined warp objective: the accumulation reward is exponential in
    per-pixel counts, so on the raw objective a one-event difference in
    the tallest pile swings the ratio by e^+-1 between perfectly
    consistent bundles; the log domain keeps the rate small for
    same-speed bundles and large when the candidate's alignment
    collapses. An empty candidate yields +inf (reject).
    """
    if len(candidate) == 0:
        return math.inf
    if patch is None:
        both = concat_events([last_bundle.events, candidate.events])
        patch = patch_for(both, center)
    t_ref = last_bundle.t_start
    s_last = math.log(
        ObjectiveEvaluator(last_bundle.events, center, t_ref, patch, eps, spin=spin).value(omega_rad_s)
    )
    s_cand = math.log(
        ObjectiveEvaluator(candidate.events, center, t_ref, patch, eps, spin=spin).value(omega_rad_s)
    )
    return abs(s_cand - s_last) / abs(s_last)


@dataclass(frozen=True)
class GrowResult:
    batch: EventBatch
    reason: StopReason
    next_index: int  # first bundle not consumed into the batch


def grow_batch(
    bundles: list[EventBundle],
    policy: BatchPolicy,
    omega_rad_s: float,
    center: tuple[float, float],
    *,
    start: int = 0,
    eps: float = 1.0,
    spin: int = +1,
) -> GrowResult:
    """Grow a batch from bundles[start] under the consistency and
    bundle-count criteria; returns the batch and why growth stopped."""
    if not bundles or start >= len(bundles):
        raise ConfigError("bundle stream is empty at the requested start")

    radius_cache: dict[int, float] = {}

    def radius(idx: int) -> float:
        r = radius_cache.get(idx)
        if r is None:
            ev = bundles[idx].events
            if len(ev) == 0:
                r = 0.0
            else:
                dx = ev.x.astype(np.float64) - center[0]
                dy = ev.y.astype(np.float64) - center[1]
                r = float(np.sqrt(np.max(dx * dx + dy * dy)))
            radius_cache[idx] = r
        return r

    taken = [bundles[start]]
    k = start
    m = start + 1
    reason = StopReason.STREAM_END
    while m < len(bundles):
        if len(taken) >= policy.max_bundles:
            reason = StopReason.BUNDLE_LIMIT
            break
        patch = PatchGeometry(half_size=int(math.ceil(max(radius(k), radius(m)))) + 2)
        rate = consistency_rate(bundles[k], bundles[m], omega_rad_s, center, eps, spin, patch)
        if not rate < policy.delta:
            reason = StopReason.CONSISTENCY
            break
        taken.append(bundles[m])
        k = m
        m += 1
    return GrowResult(batch=EventBatch(tuple(taken)), reason=reason, next_index=m)


if _HAVE_NUMBA:

    @njit(cache=True)
    def _count_column_pairs(
        col_keys, col_starts, col_sizes, xy_offsets, xs, ys, ts, r2, rt, density
    ):  # pragma: no cover - exercised via local_density
        # Events are sorted by (xy cell, t). For each source cell and each of
        # the 9 xy-neighbor columns, a two-pointer sweep tracks the exact
        # [t - rt, t + rt] candidate window, leaving only the disc check.
        n_cols = col_keys.size
        for c in range(n_cols):
            si = col_starts[c]
            se = si + col_sizes[c]
            for o in range(xy_offsets.size):
                target = col_keys[c] + xy_offsets[o]
                lo, hi = 0, n_cols
                while lo < hi:
                    mid = (lo + hi) // 2
                    if col_keys[mid] < target:
                        lo = mid + 1
                    else:
                        hi = mid
                if lo >= n_cols or col_keys[lo] != target:
                    continue
                cni = col_starts[lo]
                cne = cni + col_sizes[lo]
                b_lo = cni
                b_hi = cni
                for a in range(si, se):
                    xa, ya, ta = xs[a], ys[a], ts[a]
                    t_min = ta - rt
                    t_max = ta + rt
                    while b_lo < cne and ts[b_lo] < t_min:
                        b_lo += 1
                    if b_hi < b_lo:
                        b_hi = b_lo
                    while b_hi < cne and ts[b_hi] <= t_max:
                        b_hi += 1
                    hits = 0
                    for b in range(b_lo, b_hi):
                        dx = xa - xs[b]
                        dy = ya - ys[b]
                        if dx * dx + dy * dy <= r2:
                            hits += 1
                    density[a] += hits


def _count_pairs_numpy(
    src_cell, nbr_cell, cell_starts, cell_sizes, xs, ys, ts, r2, rt, density, max_pairs_per_chunk
):
    cum = np.cumsum(cell_sizes[src_cell] * cell_sizes[nbr_cell])
    lo = 0
    while lo < src_cell.size:
        base = int(cum[lo - 1]) if lo > 0 else 0
        hi = int(np.searchsorted(cum, base + max_pairs_per_chunk, side="right"))
        hi = min(max(hi, lo + 1), src_cell.size)
        sc, nc = src_cell[lo:hi], nbr_cell[lo:hi]
        si, ni = cell_starts[sc], cell_starts[nc]
        ss, ns = cell_sizes[sc], cell_sizes[nc]
        counts = ss * ns
        total = int(counts.sum())
        if total:
            rep = np.repeat(np.arange(sc.size, dtype=np.int64), counts)
            shift = np.concatenate([[0], np.cumsum(counts)[:-1]])
            local = np.arange(total, dtype=np.int64) - shift[rep]
            i = si[rep] + local // ns[rep]
            j = ni[rep] + local % ns[rep]
            dx = xs[i] - xs[j]
            dy = ys[i] - ys[j]
            dt = ts[i] - ts[j]
            ok = (dx * dx + dy * dy <= r2) & (np.abs(dt) <= rt)
            density += np.bincount(i[ok], minlength=density.size)
        lo = hi


def local_density(
    events: Events,
    space_radius_px: float,
    time_radius_us: float,
    max_pairs_per_chunk: int = 2_000_000,
) -> np.ndarray:
    """Self-inclusive neighbor count within a spatiotemporal cylinder.

    A neighbor satisfies both dx^2 + dy^2 <= space_radius^2 and
    |dt| <= time_radius. Uses a uniform grid hash with cells at least as
    large as the radii, so only the 27 adjacent cells need exact checks;
    counting is exact, linear-time expected. The pair check runs in a
    compiled kernel when numba is importable, with an equivalent
    vectorized fallback.
    """
    n = len(events)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    x = events.x.astype(np.float32)
    y = events.y.astype(np.float32)
    t_rel = (events.t - events.t[0]).astype(np.int64)
    t = t_rel.astype(np.float32)
    cx = np.floor_divide(events.x.astype(np.int64), int(math.ceil(space_radius_px)))
    cy = np.floor_divide(events.y.astype(np.int64), int(math.ceil(space_radius_px)))
    ky = int(cy.max()) + 2
    xy_key = cx * ky + cy
    r2 = np.float32(space_radius_px * space_radius_px)
    rt_f = np.float32(time_radius_us)
    density_sorted = np.zeros(n, dtype=np.int64)

    if _HAVE_NUMBA:
        # sort by (xy cell, t) so each column is time-ordered
        t_span = int(t_rel.max()) + 1
        order = np.argsort(xy_key * t_span + t_rel, kind="stable")
        skey = xy_key[order]
        xs, ys, ts = x[order], y[order], t[order]
        boundaries = np.flatnonzero(np.diff(skey)) + 1
        col_starts = np.concatenate([[0], boundaries]).astype(np.int64)
        col_sizes = np.diff(np.concatenate([col_starts, [n]])).astype(np.int64)
        col_keys = skey[col_starts]
        xy_offsets = np.array(
            [ox * ky + oy for ox in (-1, 0, 1) for oy in (-1, 0, 1)], dtype=np.int64
        )
        _count_column_pairs(col_keys, col_starts, col_sizes, xy_offsets, xs, ys, ts, r2, rt_f, density_sorted)
    else:
        ct = t_rel // int(math.ceil(time_radius_us))
        kt = int(ct.max()) + 2
        key = xy_key * kt + ct
        order = np.argsort(key, kind="stable")
        skey = key[order]
        xs, ys, ts = x[order], y[order], t[order]
        boundaries = np.flatnonzero(np.diff(skey)) + 1
        cell_starts = np.concatenate([[0], boundaries]).astype(np.int64)
        cell_sizes = np.diff(np.concatenate([cell_starts, [n]])).astype(np.int64)
        cell_keys = skey[cell_starts]
        offsets = np.array(
            [((ox * ky) + oy) * kt + ot for ox in (-1, 0, 1) for oy in (-1, 0, 1) for ot in (-1, 0, 1)],
            dtype=np.int64,
        )
        n_cells = cell_keys.size
        targets = (cell_keys[None, :] + offsets[:, None]).ravel()
        pos = np.searchsorted(cell_keys, targets)
        pos_c = np.minimum(pos, n_cells - 1)
        valid = cell_keys[pos_c] == targets
        src_cell = np.tile(np.arange(n_cells, dtype=np.int64), offsets.size)[valid]
        nbr_cell = pos_c[valid]
        _count_pairs_numpy(
            src_cell, nbr_cell, cell_starts, cell_sizes, xs, ys, ts, r2, rt_f, density_sorted, max_pairs_per_chunk
        )
    density = np.empty(n, dtype=np.int64)
    density[order] = density_sorted
    return density


def density_downsample(
    batch: EventBatch | Events,
    policy: BatchPolicy,
    seed: int,
) -> Events:
    """Keep ceil(sample_fraction * N) events, chosen without replacement
    with probability proportional to local density; time order is
    preserved and the result is deterministic per seed.

    Sampling uses exponential keys: item i survives ranking by
    log(u_i) / w_i with u_i uniform, the standard single-pass weighted
    reservoir scheme.
    """
    events = batch.events() if isinstance(batch, EventBatch) else batch
    n = len(events)
    if policy.sample_fraction >= 1.0 or n == 0:
        return events
    n_keep = math.ceil(policy.sample_fraction * n)
    weights = local_density(events, policy.space_radius_px, policy.time_radius_us).astype(np.float64)
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    keys = np.log(u) / weights  # weights >= 1 by self-inclusion
    keep = np.argpartition(keys, n - n_keep)[n - n_keep:]
    keep.sort()
    return events.select(keep)
