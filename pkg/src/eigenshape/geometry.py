"""Random simply connected planar domains bounded by line segments or cubic Beziers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ATTEMPTS_PER_POINT = 10_000
FLATTEN_TOL = 1e-3


class InfeasibleSpacing(Exception):
    """Minimum-distance constraint cannot be met within the attempt budget."""


class SelfIntersecting(Exception):
    """Generated boundary is not a simple closed curve."""


@dataclass(frozen=True)
class PointSet:
    """Centered, argument-sorted points with a pairwise distance floor."""

    points: np.ndarray  # (n, 2)
    min_distance: float

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError("points must be (n, 2)")


@dataclass(frozen=True)
class DomainShape:
    """Closed boundary as a chain of cubic segments (lines stored degree-elevated).

    ``segments[j]`` holds the four control points of segment j; the chain is
    cyclic and endpoint-exact: ``segments[j, 3] == segments[(j + 1) % n, 0]``.
    """

    segments: np.ndarray  # (n_seg, 4, 2)
    kind: str  # "polygon" | "smooth"
    epsilon: float = 0.0
    r: float = 0.0

    @property
    def n_segments(self) -> int:
        return self.segments.shape[0]


def sample_points(n: int, c: float, rng: np.random.Generator) -> PointSet:
    """Draw n uniform points in [0,1]^2 with pairwise distance >= c, center, sort by angle."""
    if n < 3:
        raise ValueError("need at least 3 points")
    if c < 0:
        raise ValueError("min distance must be nonnegative")
    pts = np.empty((n, 2))
    for i in range(n):
        for attempt in range(ATTEMPTS_PER_POINT):
            cand = rng.uniform(0.0, 1.0, size=2)
            if i == 0 or c == 0.0:
                pts[i] = cand
                break
            if np.min(np.hypot(*(pts[:i] - cand).T)) >= c:
                pts[i] = cand
                break
        else:
            raise InfeasibleSpacing(
                f"no point at distance >= {c} after {ATTEMPTS_PER_POINT} attempts "
                f"(placed {i} of {n})"
            )
    pts -= pts.mean(axis=0)
    order = np.argsort(np.arctan2(pts[:, 1], pts[:, 0]), kind="stable")
    return PointSet(points=pts[order], min_distance=c)


def _segments_from_controls(controls: np.ndarray) -> np.ndarray:
    """Stack per-segment control quads, forcing bitwise-equal shared endpoints."""
    n = controls.shape[0]
    segs = controls.copy()
    for j in range(n):
        segs[j, 3] = segs[(j + 1) % n, 0]
    return segs


def polygon_boundary(ps: PointSet) -> DomainShape:
    """Connect adjacent points with straight segments (degree-elevated cubics)."""
    p = ps.points
    n = p.shape[0]
    controls = np.empty((n, 4, 2))
    for j in range(n):
        a, b = p[j], p[(j + 1) % n]
        controls[j, 0] = a
        controls[j, 1] = a + (b - a) / 3.0
        controls[j, 2] = a + 2.0 * (b - a) / 3.0
        controls[j, 3] = b
    shape = DomainShape(segments=_segments_from_controls(controls), kind="polygon")
    ring = np.vstack([p, p[:1]])
    if _polyline_self_intersects(ring):
        raise SelfIntersecting("polygon is not simple")
    return shape


def _bezier_controls(p: np.ndarray, epsilon: float, r: float) -> np.ndarray:
    n = p.shape[0]
    w = np.arctan(epsilon) / np.pi + 0.5
    d = np.roll(p, -1, axis=0) - p
    theta = np.arctan2(d[:, 1], d[:, 0])
    theta_prev = np.roll(theta, 1)
    delta = np.mod(theta - theta_prev + np.pi, 2.0 * np.pi) - np.pi
    theta_star = theta_prev + (1.0 - w) * delta
    chord = np.hypot(d[:, 0], d[:, 1])
    direction = np.stack([np.cos(theta_star), np.sin(theta_star)], axis=1)
    offset = (r * chord)[:, None] * direction
    controls = np.empty((n, 4, 2))
    controls[:, 0] = p
    controls[:, 1] = p + offset
    controls[:, 2] = np.roll(p, -1, axis=0) - offset
    controls[:, 3] = np.roll(p, -1, axis=0)
    return controls


def bezier_boundary(ps: PointSet, epsilon: float, r: float) -> DomainShape:
    """Connect adjacent points with cubic Beziers steered by smoothed segment angles.

    The per-segment angle is the weighted average of the previous and current
    segment directions with w = arctan(epsilon)/pi + 0.5 (wrap-aware); control
    points sit at +-r times the chord length along that direction.
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError("curvature r must be in [0, 1]")
    controls = _bezier_controls(ps.points, epsilon, r)
    shape = DomainShape(
        segments=_segments_from_controls(controls), kind="smooth", epsilon=epsilon, r=r
    )
    if _polyline_self_intersects(flatten_boundary(shape, FLATTEN_TOL)):
        raise SelfIntersecting("smooth boundary self-intersects")
    return shape


def shape_from_points(points, kind: str = "polygon", epsilon: float = 0.0,
                      r: float = 0.5) -> DomainShape:
    """Build a shape from user-supplied boundary points, taken in the given order."""
    p = np.asarray(points, dtype=float)
    if p.ndim != 2 or p.shape[1] != 2 or p.shape[0] < 3:
        raise ValueError("points must be an (n>=3, 2) array")
    if not np.all(np.isfinite(p)):
        raise ValueError("points must be finite")
    if kind == "polygon":
        ring = np.vstack([p, p[:1]])
        if _polyline_self_intersects(ring):
            raise SelfIntersecting("polygon is not simple")
        controls = np.empty((p.shape[0], 4, 2))
        nxt = np.roll(p, -1, axis=0)
        controls[:, 0] = p
        controls[:, 1] = p + (nxt - p) / 3.0
        controls[:, 2] = p + 2.0 * (nxt - p) / 3.0
        controls[:, 3] = nxt
        return DomainShape(segments=_segments_from_controls(controls), kind="polygon")
    if kind == "smooth":
        shape = DomainShape(segments=_segments_from_controls(_bezier_controls(p, epsilon, r)),
                            kind="smooth", epsilon=epsilon, r=r)
        if _polyline_self_intersects(flatten_boundary(shape, FLATTEN_TOL)):
            raise SelfIntersecting("smooth boundary self-intersects")
        return shape
    raise ValueError(f"unknown kind {kind!r}")


def eval_boundary(shape: DomainShape, segment: int, t: float | np.ndarray) -> np.ndarray:
    """Evaluate segment ``segment`` at parameter t in [0, 1] (Bernstein form)."""
    q = shape.segments[segment]
    t = np.asarray(t, dtype=float)
    s = 1.0 - t
    out = (
        (s**3)[..., None] * q[0]
        + (3.0 * s**2 * t)[..., None] * q[1]
        + (3.0 * s * t**2)[..., None] * q[2]
        + (t**3)[..., None] * q[3]
    )
    return out


def _cross2(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def _point_line_dist(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    nrm = np.hypot(*ab)
    if nrm < 1e-300:
        return np.hypot(*(pts - a).T)
    return np.abs(_cross2(ab, pts - a)) / nrm


def _flatten_cubic(q: np.ndarray, tol: float, depth: int, out: list) -> None:
    # flat when inner control points sit within tol of the chord
    if depth >= 48 or np.max(_point_line_dist(q[1:3], q[0], q[3])) <= tol:
        out.append(q[3])
        return
    m01 = 0.5 * (q[0] + q[1])
    m12 = 0.5 * (q[1] + q[2])
    m23 = 0.5 * (q[2] + q[3])
    m012 = 0.5 * (m01 + m12)
    m123 = 0.5 * (m12 + m23)
    mid = 0.5 * (m012 + m123)
    _flatten_cubic(np.array([q[0], m01, m012, mid]), tol, depth + 1, out)
    _flatten_cubic(np.array([mid, m123, m23, q[3]]), tol, depth + 1, out)


def flatten_boundary(shape: DomainShape, tol: float = FLATTEN_TOL) -> np.ndarray:
    """Flatten the boundary to a closed polyline with chord error <= tol.

    Returns an (m, 2) array whose first and last rows are identical. Straight
    segments flatten to their endpoints.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    pts: list = [shape.segments[0, 0]]
    for j in range(shape.n_segments):
        _flatten_cubic(shape.segments[j], tol, 0, pts)
    ring = np.asarray(pts)
    ring[-1] = ring[0]  # chain is cyclic; close bitwise
    return ring


def contains(polyline: np.ndarray, q: np.ndarray) -> bool:
    """Even-odd point-in-polygon test (half-open edges)."""
    return bool(points_inside(polyline, np.asarray(q, dtype=float)[None, :])[0])


def points_inside(polyline: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Vectorized even-odd test for many query points against one closed polyline."""
    a = polyline[:-1]
    b = polyline[1:]
    x, y = pts[:, 0][:, None], pts[:, 1][:, None]
    ya, yb = a[:, 1][None, :], b[:, 1][None, :]
    xa, xb = a[:, 0][None, :], b[:, 0][None, :]
    straddle = (ya > y) != (yb > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xs = xa + (y - ya) * (xb - xa) / (yb - ya)
    crossing = straddle & (x < xs)
    return np.sum(crossing, axis=1) % 2 == 1


def polygon_area(polyline: np.ndarray) -> float:
    """Signed shoelace area of a closed polyline."""
    x, y = polyline[:-1, 0], polyline[:-1, 1]
    xn, yn = polyline[1:, 0], polyline[1:, 1]
    return 0.5 * float(np.sum(x * yn - xn * y))


def _polyline_self_intersects(ring: np.ndarray) -> bool:
    """Exhaustive proper-intersection test between non-adjacent edges."""
    p = ring[:-1]
    n = p.shape[0]
    if n < 4:
        return False
    a = p
    b = np.roll(p, -1, axis=0)
    ii, jj = np.triu_indices(n, k=2)
    # adjacent cyclically: edge 0 and edge n-1 share a vertex
    keep = ~((ii == 0) & (jj == n - 1))
    ii, jj = ii[keep], jj[keep]
    p1, p2 = a[ii], b[ii]
    p3, p4 = a[jj], b[jj]
    d1 = _cross2(p4 - p3, p1 - p3)
    d2 = _cross2(p4 - p3, p2 - p3)
    d3 = _cross2(p2 - p1, p3 - p1)
    d4 = _cross2(p2 - p1, p4 - p1)
    proper = ((d1 > 0) != (d2 > 0)) & ((d3 > 0) != (d4 > 0))
    if np.any(proper):
        return True
    # touching cases: an endpoint exactly on a non-adjacent edge
    def on_segment(p0, q1, q2, d):
        col = d == 0
        within = (
            (np.minimum(q1[:, 0], q2[:, 0]) <= p0[:, 0])
            & (p0[:, 0] <= np.maximum(q1[:, 0], q2[:, 0]))
            & (np.minimum(q1[:, 1], q2[:, 1]) <= p0[:, 1])
            & (p0[:, 1] <= np.maximum(q1[:, 1], q2[:, 1]))
        )
        return col & within

    touch = (
        on_segment(p1, p3, p4, d1)
        | on_segment(p2, p3, p4, d2)
        | on_segment(p3, p1, p2, d3)
        | on_segment(p4, p1, p2, d4)
    )
    return bool(np.any(touch))


def random_shape(
    rng: np.random.Generator,
    kind: str = "smooth",
    n_range: tuple[int, int] = (5, 12),
    c: float = 0.15,
    epsilon: float = 0.0,
    r: float = 0.5,
    max_tries: int = 200,
) -> tuple[DomainShape, int]:
    """Sample a valid shape, resampling on self-intersection.

    Returns the shape and the number of rejected draws.
    """
    rejected = 0
    for _ in range(max_tries):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        try:
            ps = sample_points(n, c, rng)
            if kind == "polygon":
                return polygon_boundary(ps), rejected
            return bezier_boundary(ps, epsilon, r), rejected
        except SelfIntersecting:
            rejected += 1
    raise SelfIntersecting(f"no simple shape after {max_tries} draws")


def resample_closed(polyline: np.ndarray, n: int) -> np.ndarray:
    """n points spaced uniformly by arc length along a closed polyline."""
    seg = np.diff(polyline, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    total = cum[-1]
    if total <= 0:
        raise ValueError("degenerate polyline")
    targets = np.arange(n) * (total / n)
    idx = np.searchsorted(cum, targets, side="right") - 1
    idx = np.clip(idx, 0, len(lengths) - 1)
    frac = (targets - cum[idx]) / np.where(lengths[idx] > 0, lengths[idx], 1.0)
    return polyline[idx] + frac[:, None] * seg[idx]
