"""Planar convex-polytope primitives for collision avoidance.

Polytopes are halfspace intersections {p in R^2 : A p <= b}.  Vehicle bodies
are rotated boxes.  Distances between polytopes are computed by a small
convex QP whose KKT multipliers double as warm starts for the dual
collision-avoidance constraints; a grid-sampling oracle exists only in the
tests.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .qp import solve_qp

logger = logging.getLogger(__name__)

_COMPASS = np.array(
    [
        [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0],
        [1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0],
    ]
)


class GeometryError(ValueError):
    pass


def rotation_matrix(psi: float) -> np.ndarray:
    """Counterclockwise rotation by psi."""
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s], [s, c]])


@dataclass
class Polytope:
    """Halfspace intersection {p : A p <= b} in the plane."""

    A: np.ndarray
    b: np.ndarray
    _vertices: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float).reshape(-1, 2)
        self.b = np.asarray(self.b, dtype=float).ravel()
        if self.A.shape[0] != self.b.shape[0]:
            raise GeometryError("A and b row counts differ")
        if self.A.shape[0] < 3:
            raise GeometryError("a bounded planar polytope needs >= 3 faces")
        norms = np.linalg.norm(self.A, axis=1)
        if np.any(norms < 1e-12):
            raise GeometryError("zero-norm face normal")

    @classmethod
    def from_box(cls, center, half_x: float, half_y: float, psi: float = 0.0):
        """Axis-aligned box of half-extents (half_x, half_y) rotated by psi."""
        if half_x <= 0 or half_y <= 0:
            raise GeometryError("box half-extents must be positive")
        G = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        g = np.array([half_x, half_y, half_x, half_y])
        R = rotation_matrix(psi)
        c = np.asarray(center, dtype=float)
        return cls(G @ R.T, g + G @ (R.T @ c))

    def contains(self, p, tol: float = 1e-9) -> bool:
        return bool(np.all(self.A @ np.asarray(p, float) - self.b <= tol))

    def vertices(self) -> np.ndarray:
        """Vertices by pairwise face intersection, ordered counterclockwise."""
        if self._vertices is not None:
            return self._vertices
        m = self.A.shape[0]
        pts = []
        for i in range(m):
            for j in range(i + 1, m):
                M = self.A[[i, j]]
                det = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
                if abs(det) < 1e-12:
                    continue
                p = np.linalg.solve(M, self.b[[i, j]])
                if np.all(self.A @ p - self.b <= 1e-8):
                    pts.append(p)
        if not pts:
            raise GeometryError("polytope has no vertices (empty or degenerate)")
        pts = np.array(pts)
        # Deduplicate.
        keep: list[int] = []
        for i in range(len(pts)):
            if not any(np.linalg.norm(pts[i] - pts[k]) < 1e-9 for k in keep):
                keep.append(i)
        uniq = pts[keep]
        centroid = uniq.mean(axis=0)
        order = np.argsort(np.arctan2(uniq[:, 1] - centroid[1], uniq[:, 0] - centroid[0]))
        self._vertices = uniq[order]
        return self._vertices

    def support(self, direction) -> float:
        """Support function max_{p in P} d.p via vertex enumeration."""
        d = np.asarray(direction, float)
        return float(np.max(self.vertices() @ d))

    def is_bounded(self) -> bool:
        """Support-function finiteness in 8 compass directions (LP check)."""
        for d in _COMPASS:
            res = linprog(-d, A_ub=self.A, b_ub=self.b, bounds=(None, None), method="highs")
            if res.status == 3:  # unbounded
                return False
            if res.status == 2:  # empty counts as degenerate, not unbounded
                raise GeometryError("polytope is empty")
        return True

    def validate(self) -> None:
        if not self.is_bounded():
            raise GeometryError("polytope is unbounded")


@dataclass
class Halfspace:
    """Constraint w . p >= offset with unit normal w."""

    w: np.ndarray
    offset: float

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float).ravel()
        nrm = np.linalg.norm(self.w)
        if nrm < 1e-12:
            raise GeometryError("halfspace normal must be nonzero")
        self.w = self.w / nrm
        self.offset = float(self.offset) / nrm

    def violation(self, p) -> float:
        """Positive when p is on the wrong side."""
        return self.offset - float(self.w @ np.asarray(p, float))

    def satisfied(self, p, tol: float = 1e-9) -> bool:
        return self.violation(p) <= tol


def body_polytope(z, length: float, width: float) -> Polytope:
    """Vehicle body box at state z = (x, y, psi, ...)."""
    if length <= 0 or width <= 0:
        raise GeometryError("body dimensions must be positive")
    return Polytope.from_box(np.asarray(z, float)[:2], 0.5 * length, 0.5 * width,
                             float(np.asarray(z, float)[2]))


@dataclass
class DistanceResult:
    """Distance QP outcome with witness points and face multipliers."""

    distance: float
    point_p: np.ndarray
    point_q: np.ndarray
    mult_p: np.ndarray
    mult_q: np.ndarray


def distance_witness(P: Polytope, Q: Polytope) -> DistanceResult:
    """Minimum translation distance with witness points and multipliers.

    Solves min 0.5 ||p - q||^2 over p in P, q in Q.  The returned face
    multipliers satisfy (p - q) = -P.A' mult_p = Q.A' mult_q and feed the
    dual warm start of the collision-avoidance controller.
    """
    mp, mq = P.A.shape[0], Q.A.shape[0]
    H = np.zeros((4, 4))
    H[:2, :2] = np.eye(2)
    H[2:, 2:] = np.eye(2)
    H[:2, 2:] = -np.eye(2)
    H[2:, :2] = -np.eye(2)
    A = np.zeros((mp + mq, 4))
    A[:mp, :2] = P.A
    A[mp:, 2:] = Q.A
    b = np.concatenate([P.b, Q.b])
    sol = solve_qp(H, np.zeros(4), A, b)
    if not sol.ok:
        raise GeometryError("distance QP failed: polytope is empty")
    p, q = sol.x[:2], sol.x[2:]
    dist = float(np.linalg.norm(p - q))
    if np.max(np.abs(sol.x)) > 1e6:
        raise GeometryError("distance witness diverged; polytope unbounded?")
    return DistanceResult(dist, p, q, sol.lam[:mp], sol.lam[mp:])


def min_translation_distance(P: Polytope, Q: Polytope) -> float:
    """Distance between two polytopes; 0 iff they intersect."""
    return distance_witness(P, Q).distance


def polytopes_intersect(P: Polytope, Q: Polytope, tol: float = 1e-9) -> bool:
    """Exact separating-axis test for two convex polygons."""
    vp, vq = P.vertices(), Q.vertices()
    for axes in (P.A, Q.A):
        for ax in axes:
            lo_p, hi_p = np.min(vp @ ax), np.max(vp @ ax)
            lo_q, hi_q = np.min(vq @ ax), np.max(vq @ ax)
            if hi_p < lo_q - tol or hi_q < lo_p - tol:
                return False
    return True


def _point_segment_closest(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom < 1e-16 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return a + t * ab


def point_polytope_projection(p, poly: Polytope):
    """(distance, closest point, per-edge candidates) for a point.

    Inside the polytope the distance is 0 and the point projects to itself;
    candidates are the per-edge closest points used for tie handling.
    """
    p = np.asarray(p, dtype=float)
    if poly.contains(p):
        return 0.0, p.copy(), []
    verts = poly.vertices()
    n = len(verts)
    cands = []
    for i in range(n):
        cp = _point_segment_closest(p, verts[i], verts[(i + 1) % n])
        cands.append((float(np.linalg.norm(p - cp)), cp))
    dmin = min(c[0] for c in cands)
    best = next(c[1] for c in cands if c[0] == dmin)
    return dmin, best, cands


def point_polytope_distance(p, poly: Polytope) -> float:
    return point_polytope_projection(p, poly)[0]


@dataclass
class CriticalRegion:
    """A polytope dilated by a disc: {p : dist(p, base) <= radius}."""

    base: Polytope
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise GeometryError("critical region radius must be positive")

    def contains(self, p, tol: float = 1e-9) -> bool:
        return point_polytope_distance(p, self.base) <= self.radius + tol


def project_to_critical_boundary(
    p_ref,
    region: CriticalRegion,
    direction,
    bracket_hint: float = 0.9,
    tol: float = 1e-6,
) -> np.ndarray:
    """Smallest t >= 0 with dist(p_ref + t*d, base) = radius, via bisection.

    p_ref must lie inside the region.  The initial bracket upper end is
    4*radius + bracket_hint (a lane width at desk scale) and grows
    geometrically until the boundary crossing is bracketed.
    """
    p_ref = np.asarray(p_ref, dtype=float)
    d = np.asarray(direction, dtype=float)
    nd = np.linalg.norm(d)
    if nd < 1e-12:
        raise GeometryError("projection direction must be nonzero")
    d = d / nd

    def g(t):
        return point_polytope_distance(p_ref + t * d, region.base) - region.radius

    if g(0.0) > tol:
        raise GeometryError("reference point is outside the critical region")
    t_hi = 4.0 * region.radius + bracket_hint
    expansions = 0
    while g(t_hi) <= 0.0:
        t_hi *= 2.0
        expansions += 1
        if expansions > 40:
            raise GeometryError("no boundary crossing along projection ray")
    t_lo = 0.0
    while t_hi - t_lo > tol:
        mid = 0.5 * (t_lo + t_hi)
        if g(mid) <= 0.0:
            t_lo = mid
        else:
            t_hi = mid
    return p_ref + 0.5 * (t_lo + t_hi) * d


def strategy_halfspace(q_boundary, region: CriticalRegion) -> Halfspace:
    """Supporting hyperplane of the base polytope at a boundary point.

    The outward normal is (q - closest base point) / radius; when q is
    equidistant from several faces the candidate normals are averaged and
    renormalized.  The offset is the base support value, so every base vertex
    satisfies w . v <= offset and the constraint w . p >= offset keeps the
    ego vehicle on the far side.
    """
    q = np.asarray(q_boundary, dtype=float)
    dist, closest, cands = point_polytope_projection(q, region.base)
    if dist < 1e-9:
        raise GeometryError("boundary point lies inside the base polytope")
    tie = [c for c in cands if c[0] <= dist + 1e-9]
    normals = []
    seen = []
    for cd, cp in tie:
        nrm = (q - cp) / cd
        if not any(np.linalg.norm(nrm - s) < 1e-9 for s in seen):
            seen.append(nrm)
            normals.append(nrm)
    w = np.mean(normals, axis=0)
    wn = np.linalg.norm(w)
    if wn < 1e-12:
        raise GeometryError("degenerate averaged normal")
    w = w / wn
    return Halfspace(w, region.base.support(w))
