"""Rotational speed estimation by event warping and reward maximization.

Events from one propeller are warped backward to a reference time by
rotating their center-relative coordinates through -omega*(t - t_ref).
At the true angular speed the warped events pile onto the blade
silhouette, which is scored by two complementary rewards on the warped
count image: an accumulation term sum(exp(h)) that favors tall pile-ups
and a sparsity term sum(1/(exp(h)-1+eps)) that favors many empty
pixels. The speed is the argmax of their sum over a bracket, located by
a coarse grid scan followed by bounded Brent refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

from .errors import ConfigError, DegenerateInputError, EstimationError
from .events import EventBatch, Events

if _HAVE_NUMBA:

    @njit(cache=True)
    def _count_and_score(
        flat, counts_buf, touched_buf, acc_table, spa_table, empty_term, area
    ):  # pragma: no cover - exercised via ObjectiveEvaluator
        m = 0
        for k in range(flat.size):
            v = flat[k]
            c = counts_buf[v]
            if c == 0:
                touched_buf[m] = v
                m += 1
            counts_buf[v] = c + 1
        r = (area - m) * empty_term
        cap = acc_table.size - 1
        for k in range(m):
            v = touched_buf[k]
            h = counts_buf[v]
            if h > cap:
                h = cap
            r += acc_table[h] + spa_table[h]
            counts_buf[v] = 0
        return r

    @njit(cache=True)
    def _warp_count_score(
        dx, dy, cos_t, sin_t, x_shift, y_shift, side,
        counts_buf, touched_buf, acc_table, spa_table, empty_term, area,
    ):  # pragma: no cover - exercised via ObjectiveEvaluator
        # one pass: rotate, rasterize, and tally occupied pixels with no
        # intermediate arrays
        m = 0
        for k in range(dx.size):
            wx = cos_t[k] * dx[k] - sin_t[k] * dy[k] + x_shift
            wy = sin_t[k] * dx[k] + cos_t[k] * dy[k] + y_shift
            ix = int(np.floor(wx))
            iy = int(np.floor(wy))
            if 0 <= ix < side and 0 <= iy < side:
                v = ix * side + iy
                c = counts_buf[v]
                if c == 0:
                    touched_buf[m] = v
                    m += 1
                counts_buf[v] = c + 1
        r = (area - m) * empty_term
        cap = acc_table.size - 1
        for k in range(m):
            v = touched_buf[k]
            h = counts_buf[v]
            if h > cap:
                h = cap
            r += acc_table[h] + spa_table[h]
            counts_buf[v] = 0
        return r

    @njit(cache=True)
    def _grid_scan(
        dx, dy, dt, omega0, step, n_steps, x_shift, y_shift, side,
        counts_buf, touched_buf, acc_table, spa_table, empty_term, area, out,
    ):  # pragma: no cover - exercised via ObjectiveEvaluator.value_grid
        # per-event rotations advance by a fixed composition between grid
        # steps, so the whole scan costs one trig pass plus n_steps
        # rasterize-and-score sweeps
        n = dx.size
        c = np.cos(dt * omega0)
        s = np.sin(dt * omega0)
        dc = np.cos(dt * step)
        ds = np.sin(dt * step)
        cap = acc_table.size - 1
        for g in range(n_steps):
            m = 0
            for k in range(n):
                wx = c[k] * dx[k] - s[k] * dy[k] + x_shift
                wy = s[k] * dx[k] + c[k] * dy[k] + y_shift
                ix = int(np.floor(wx))
                iy = int(np.floor(wy))
                if 0 <= ix < side and 0 <= iy < side:
                    v = ix * side + iy
                    cnt = counts_buf[v]
                    if cnt == 0:
                        touched_buf[m] = v
                        m += 1
                    counts_buf[v] = cnt + 1
            r = (area - m) * empty_term
            for k in range(m):
                v = touched_buf[k]
                h = counts_buf[v]
                if h > cap:
                    h = cap
                r += acc_table[h] + spa_table[h]
                counts_buf[v] = 0
            out[g] = r
            if g + 1 < n_steps:
                for k in range(n):
                    ck = c[k] * dc[k] - s[k] * ds[k]
                    s[k] = s[k] * dc[k] + c[k] * ds[k]
                    c[k] = ck

# Cap inside exp(): overflow guard only. Well-aligned desk-scale batches
# stack ~100 events per pixel, so the cap must sit far above that or the
# peak flattens; float64 holds exp(300) comfortably.
H_MAX_DEFAULT = 300.0
US_TO_S = 1e-6


@dataclass(frozen=True)
class MotionParams:
    """Angular rates (rad/s); image-axis rates are held at zero over the
    short windows this estimator operates on."""

    omega_t: float
    omega_x: float = 0.0
    omega_y: float = 0.0

    def __post_init__(self) -> None:
        if self.omega_x != 0.0 or self.omega_y != 0.0:
            raise ConfigError("image-axis rates are fixed at zero in this implementation")


@dataclass(frozen=True)
class PatchGeometry:
    """Square accumulation patch centered on the rotor center.

    Pixel (i, j) of the patch is the sensor pixel
    (x0 + i, y0 + j) with x0 = floor(cx) - half_size.
    """

    half_size: int

    @property
    def side(self) -> int:
        return 2 * self.half_size + 1

    @property
    def area(self) -> int:
        return self.side * self.side


def patch_for(events: Events, center: tuple[float, float], margin: int = 2) -> PatchGeometry:
    """Smallest patch containing every possible warp of these events.

    Warping is a pure rotation about the center, so radii are preserved
    and a patch spanning the maximum event radius plus a margin holds
    every warped point for every candidate speed.
    """
    if len(events) == 0:
        return PatchGeometry(half_size=margin)
    dx = events.x.astype(np.float64) - center[0]
    dy = events.y.astype(np.float64) - center[1]
    r_max = float(np.sqrt(np.max(dx * dx + dy * dy)))
    return PatchGeometry(half_size=int(math.ceil(r_max)) + margin)


@dataclass
class WarpedImage:
    """Accumulated warped-event counts over a patch around the rotor."""

    counts: np.ndarray
    t_ref: int
    origin: tuple[float, float]
    n_dropped: int = 0

    @property
    def n_inside(self) -> int:
        return int(self.counts.sum())


def warp(
    events: Events,
    center: tuple[float, float],
    t_ref_us: int,
    omega_rad_s: float,
) -> np.ndarray:
    """Rotate center-relative event coordinates back to the reference time.

    Returns an (N, 2) float array in event order; an event at t_ref (or
    any event when omega is 0) keeps its coordinates.
    """
    dx = events.x.astype(np.float64) - center[0]
    dy = events.y.astype(np.float64) - center[1]
    dt_s = (events.t.astype(np.int64) - np.int64(t_ref_us)).astype(np.float64) * US_TO_S
    theta = omega_rad_s * dt_s
    c, s = np.cos(theta), np.sin(theta)
    out = np.empty((len(events), 2))
    out[:, 0] = c * dx - s * dy
    out[:, 1] = s * dx + c * dy
    return out


def accumulate(
    warped: np.ndarray,
    patch: PatchGeometry,
    center: tuple[float, float],
    t_ref_us: int = 0,
) -> WarpedImage:
    """Rasterize warped points into integer pixel counts (floor binning).

    Each point increments the sensor pixel containing center + point;
    points outside the patch are dropped and counted.
    """
    half = patch.half_size
    side = patch.side
    x0 = math.floor(center[0]) - half
    y0 = math.floor(center[1]) - half
    counts = np.zeros((side, side), dtype=np.int64)
    if warped.size:
        ix = np.floor(warped[:, 0] + center[0]).astype(np.int64) - x0
        iy = np.floor(warped[:, 1] + center[1]).astype(np.int64) - y0
        inside = (ix >= 0) & (ix < side) & (iy >= 0) & (iy < side)
        flat = np.bincount(ix[inside] * side + iy[inside], minlength=side * side)
        counts += flat.reshape(side, side)
        n_dropped = int((~inside).sum())
    else:
        n_dropped = 0
    return WarpedImage(counts=counts, t_ref=t_ref_us, origin=center, n_dropped=n_dropped)


def _counts_of(image: WarpedImage | np.ndarray) -> np.ndarray:
    return image.counts if isinstance(image, WarpedImage) else np.asarray(image)


def reward_accumulation(image: WarpedImage | np.ndarray, h_max: float = H_MAX_DEFAULT) -> float:
    """sum over pixels of exp(count), count capped at h_max."""
    h = np.minimum(_counts_of(image).astype(np.float64), h_max)
    return float(np.exp(h).sum())


def reward_sparsity(
    image: WarpedImage | np.ndarray, eps: float = 1.0, h_max: float = H_MAX_DEFAULT
) -> float:
    """sum over pixels of 1 / (exp(count) - 1 + eps); empty pixels give 1/eps."""
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    h = np.minimum(_counts_of(image).astype(np.float64), h_max)
    return float((1.0 / (np.exp(h) - 1.0 + eps)).sum())


class ObjectiveEvaluator:
    """Reusable objective R(omega) for one event batch.

    Precomputes center-relative coordinates and time offsets so each
    candidate speed costs one trig pass plus a bincount; a whole grid of
    candidates is evaluated in one flattened pass. Coordinate math runs
    in float32 (sub-micropixel error over a patch), and only occupied
    pixels are exponentiated; empty pixels contribute the closed-form
    constant (1 + 1/eps) each.
    """

    def __init__(
        self,
        events: Events,
        center: tuple[float, float],
        t_ref_us: int,
        patch: PatchGeometry | None = None,
        eps: float = 1.0,
        h_max: float = H_MAX_DEFAULT,
        spin: int = +1,
        accumulation_weight: float = 1.0,
        sparsity_weight: float = 1.0,
    ) -> None:
        if eps <= 0:
            raise ConfigError(f"eps must be positive, got {eps}")
        if spin not in (-1, +1):
            raise ConfigError("spin must be -1 or +1")
        if patch is None:
            patch = patch_for(events, center)
        self.center = center
        self.t_ref_us = int(t_ref_us)
        self.patch = patch
        self.eps = float(eps)
        self.h_max = float(h_max)
        self.w_acc = float(accumulation_weight)
        self.w_spa = float(sparsity_weight)
        self.n_events = len(events)
        half = patch.half_size
        # coordinates pre-shifted into patch frame: pixel = floor(w)
        self._dx = (events.x.astype(np.float64) - center[0]).astype(np.float32)
        self._dy = (events.y.astype(np.float64) - center[1]).astype(np.float32)
        dt_s = (events.t.astype(np.int64) - np.int64(t_ref_us)).astype(np.float64) * US_TO_S
        self._dt = (spin * dt_s).astype(np.float32)
        self._x_shift = np.float32(center[0] - (math.floor(center[0]) - half))
        self._y_shift = np.float32(center[1] - (math.floor(center[1]) - half))
        self._side = patch.side
        self._empty_term = self.w_acc * 1.0 + self.w_spa / self.eps
        n = self.n_events
        self._theta = np.empty(n, np.float32)
        self._cos = np.empty(n, np.float32)
        self._sin = np.empty(n, np.float32)
        self._wx = np.empty(n, np.float32)
        self._wy = np.empty(n, np.float32)
        if _HAVE_NUMBA:
            # integer per-pixel counts index these tables: exp(min(h, h_max))
            # and the matching sparsity term, so scoring never calls exp
            cap = int(math.ceil(self.h_max))
            h = np.minimum(np.arange(cap + 1, dtype=np.float64), self.h_max)
            e = np.exp(h)
            self._acc_table = self.w_acc * e
            self._spa_table = self.w_spa / (e - 1.0 + self.eps)
            self._counts_buf = np.zeros(patch.area, np.int32)
            self._touched_buf = np.empty(max(n, 1), np.int32)

    def _indices_from(self, c: np.ndarray, s: np.ndarray) -> np.ndarray:
        side = self._side
        np.multiply(c, self._dx, out=self._wx)
        self._wx -= s * self._dy
        self._wx += self._x_shift
        np.multiply(s, self._dx, out=self._wy)
        self._wy += c * self._dy
        self._wy += self._y_shift
        ix = np.floor(self._wx).astype(np.int32)
        iy = np.floor(self._wy).astype(np.int32)
        inside = (ix >= 0) & (ix < side) & (iy >= 0) & (iy < side)
        if not inside.all():
            ix, iy = ix[inside], iy[inside]
        return ix * side + iy

    def _flat_indices(self, omega_rad_s: float) -> np.ndarray:
        np.multiply(self._dt, np.float32(omega_rad_s), out=self._theta)
        np.cos(self._theta, out=self._cos)
        np.sin(self._theta, out=self._sin)
        return self._indices_from(self._cos, self._sin)

    def counts(self, omega_rad_s: float) -> np.ndarray:
        """Flat per-pixel counts of the warped image at a candidate speed."""
        side = self._side
        if self.n_events == 0:
            return np.zeros(side * side, dtype=np.int64)
        return np.bincount(self._flat_indices(omega_rad_s), minlength=side * side)

    def _score(self, counts: np.ndarray, area: int) -> float:
        occupied = counts[counts > 0].astype(np.float64)
        np.minimum(occupied, self.h_max, out=occupied)
        e = np.exp(occupied)
        r_acc = float(e.sum())
        r_spa = float((1.0 / (e - 1.0 + self.eps)).sum())
        return self.w_acc * r_acc + self.w_spa * r_spa + (area - occupied.size) * self._empty_term

    def _score_from_flat(self, flat: np.ndarray) -> float:
        if _HAVE_NUMBA:
            return float(
                _count_and_score(
                    flat, self._counts_buf, self._touched_buf,
                    self._acc_table, self._spa_table, self._empty_term, self.patch.area,
                )
            )
        return self._score(np.bincount(flat, minlength=self.patch.area), self.patch.area)

    def _score_at(self, c: np.ndarray, s: np.ndarray) -> float:
        if _HAVE_NUMBA:
            return float(
                _warp_count_score(
                    self._dx, self._dy, c, s, self._x_shift, self._y_shift, self._side,
                    self._counts_buf, self._touched_buf,
                    self._acc_table, self._spa_table, self._empty_term, self.patch.area,
                )
            )
        return self._score_from_flat(self._indices_from(c, s))

    def value(self, omega_rad_s: float) -> float:
        if self.n_events == 0:
            return self.patch.area * self._empty_term
        np.multiply(self._dt, np.float32(omega_rad_s), out=self._theta)
        np.cos(self._theta, out=self._cos)
        np.sin(self._theta, out=self._sin)
        return self._score_at(self._cos, self._sin)

    def value_grid(self, omegas: np.ndarray) -> np.ndarray:
        """R at uniformly spaced candidate speeds.

        The rotation for step k+1 is the step-k rotation composed with a
        fixed per-event increment, so the whole scan costs one trig pass
        total instead of one per candidate.
        """
        omegas = np.asarray(omegas, dtype=np.float64)
        area = self.patch.area
        if self.n_events == 0:
            return np.full(omegas.size, area * self._empty_term)
        steps = np.diff(omegas)
        uniform = omegas.size > 2 and steps.size and np.allclose(steps, steps[0], rtol=1e-9, atol=0.0)
        out = np.empty(omegas.size)
        if not uniform:
            for k, w in enumerate(omegas):
                out[k] = self.value(float(w))
            return out
        if _HAVE_NUMBA:
            _grid_scan(
                self._dx, self._dy, self._dt, np.float32(omegas[0]), np.float32(steps[0]),
                omegas.size, self._x_shift, self._y_shift, self._side,
                self._counts_buf, self._touched_buf,
                self._acc_table, self._spa_table, self._empty_term, self.patch.area, out,
            )
            return out
        c = np.cos(self._dt * np.float32(omegas[0]))
        s = np.sin(self._dt * np.float32(omegas[0]))
        dc = np.cos(self._dt * np.float32(steps[0]))
        ds = np.sin(self._dt * np.float32(steps[0]))
        for k in range(omegas.size):
            out[k] = self._score_at(c, s)
            if k + 1 < omegas.size:
                c, s = c * dc - s * ds, s * dc + c * ds
        return out


def objective(
    batch: EventBatch | Events,
    center: tuple[float, float],
    t_ref_us: int,
    omega_rad_s: float,
    eps: float = 1.0,
    patch: PatchGeometry | None = None,
    h_max: float = H_MAX_DEFAULT,
    accumulation_weight: float = 1.0,
    sparsity_weight: float = 1.0,
) -> float:
    """Combined reward of the batch warped at one speed: the weighted sum
    of the accumulation and sparsity terms (unit weights by default)."""
    events = batch.events() if isinstance(batch, EventBatch) else batch
    evaluator = ObjectiveEvaluator(
        events, center, t_ref_us, patch, eps, h_max,
        accumulation_weight=accumulation_weight, sparsity_weight=sparsity_weight,
    )
    return evaluator.value(omega_rad_s)


@dataclass(frozen=True)
class SpeedEstimate:
    """One speed measurement: the argmax of the objective on a batch."""

    prop_id: int
    t_ref_us: int
    omega_rad_s: float
    objective_value: float
    n_events_used: int

    @property
    def rpm(self) -> float:
        return self.omega_rad_s * 60.0 / (2.0 * math.pi)


def brent_max(f, a: float, b: float, tol: float, max_iter: int = 100) -> tuple[float, float]:
    """Bounded scalar maximization (Brent: golden section + parabolic steps).

    Returns (x, f(x)) with x located to absolute tolerance tol.
    """
    golden = 0.381966011250105
    if b < a:
        a, b = b, a
    x = w = v = a + golden * (b - a)
    fx = fw = fv = -f(x)
    d = e = 0.0
    for _ in range(max_iter):
        mid = 0.5 * (a + b)
        tol1 = 1e-12 * abs(x) + 0.5 * tol
        tol2 = 2.0 * tol1
        if abs(x - mid) <= tol2 - 0.5 * (b - a):
            break
        use_golden = True
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0.0:
                p = -p
            q = abs(q)
            e_prev, e = e, d
            if abs(p) < abs(0.5 * q * e_prev) and q * (a - x) < p < q * (b - x):
                d = p / q
                u = x + d
                if (u - a) < tol2 or (b - u) < tol2:
                    d = tol1 if x < mid else -tol1
                use_golden = False
        if use_golden:
            e = (b - x) if x < mid else (a - x)
            d = golden * e
        u = x + d if abs(d) >= tol1 else x + (tol1 if d > 0 else -tol1)
        fu = -f(u)
        if fu <= fx:
            if u >= x:
                a = x
            else:
                b = x
            v, w, x = w, x, u
            fv, fw, fx = fw, fx, fu
        else:
            if u < x:
                a = u
            else:
                b = u
            if fu <= fw or w == x:
                v, w = w, u
                fv, fw = fw, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return x, -fx


def estimate_speed(
    batch: EventBatch | Events,
    center: tuple[float, float],
    bracket_rad_s: tuple[float, float],
    tol_rad_s: float = 0.05,
    *,
    eps: float = 1.0,
    n_grid: int = 64,
    prop_id: int = 0,
    t_ref_us: int | None = None,
    h_max: float = H_MAX_DEFAULT,
    spin: int = +1,
) -> SpeedEstimate:
    """Locate the speed maximizing the warp objective over a bracket.

    A coarse scan over n_grid equally spaced candidates finds the best
    basin; bounded Brent refinement then polishes the peak to tol_rad_s.
    The refined value never scores below the best grid point. Raises
    EstimationError on an empty batch and DegenerateInputError when the
    objective is flat over the whole bracket (no coherent motion).
    """
    events = batch.events() if isinstance(batch, EventBatch) else batch
    if len(events) == 0:
        raise EstimationError("cannot estimate speed from an empty batch")
    lo, hi = float(bracket_rad_s[0]), float(bracket_rad_s[1])
    if not (hi > lo):
        raise ConfigError(f"bracket must satisfy lo < hi, got {bracket_rad_s}")
    if n_grid < 3:
        raise ConfigError("n_grid must be at least 3")
    if t_ref_us is None:
        t_ref_us = batch.t_start if isinstance(batch, EventBatch) else int(events.t[0])

    evaluator = ObjectiveEvaluator(events, center, t_ref_us, eps=eps, h_max=h_max, spin=spin)
    grid = np.linspace(lo, hi, n_grid)
    values = evaluator.value_grid(grid)
    v_min, v_max = float(values.min()), float(values.max())
    if v_max - v_min <= 64.0 * np.finfo(np.float64).eps * max(abs(v_max), 1.0):
        raise DegenerateInputError(
            f"objective is flat over [{lo:.3g}, {hi:.3g}] rad/s; batch carries no rotation signal"
        )
    best = int(np.argmax(values))
    bracket_lo = grid[max(best - 1, 0)]
    bracket_hi = grid[min(best + 1, n_grid - 1)]
    # refine on log(R): same argmax, but spans of many orders of magnitude
    # would otherwise defeat the parabolic steps
    omega, _ = brent_max(
        lambda w: math.log(evaluator.value(w)), float(bracket_lo), float(bracket_hi), tol=tol_rad_s
    )
    value = evaluator.value(omega)
    if value < values[best]:
        omega, value = float(grid[best]), float(values[best])
    return SpeedEstimate(
        prop_id=prop_id,
        t_ref_us=int(t_ref_us),
        omega_rad_s=float(omega),
        objective_value=float(value),
        n_events_used=len(events),
    )
