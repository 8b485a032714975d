"""Point-set utilities: exact k-nearest-neighbour queries and rigid-body
(Kabsch) superposition.

Distances are Euclidean and coordinates are in Angstroms throughout.
Neighbour queries exclude the query point itself and break distance ties
by ascending index.  Everything here is a pure function, safe for
concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .so3 import Rotation

# Rows processed per block in the vectorized neighbour search, bounding
# the transient distance matrix at _KNN_BLOCK x N.
_KNN_BLOCK = 256
# Extra argpartition candidates kept so boundary ties still sort exactly.
_KNN_TIE_MARGIN = 8

_DEGENERATE_REL_TOL = 1e-9


def _as_points(points: np.ndarray, name: str = "points") -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError(f"{name} contains non-finite coordinates")
    return pts


def k_nearest(points: np.ndarray, query_index: int, k: int) -> np.ndarray:
    """Indices of the min(k, N-1) nearest points to ``points[query_index]``.

    The query point is excluded.  Results are sorted by (distance, index),
    so exact distance ties come back in ascending index order.
    """
    pts = _as_points(points)
    n = len(pts)
    if n == 0:
        raise ValueError("empty point set")
    if not 0 <= query_index < n:
        raise IndexError(f"query_index {query_index} out of range for {n} points")
    if k < 1:
        raise ValueError("k must be >= 1")
    dists = np.linalg.norm(pts - pts[query_index], axis=1)
    order = np.lexsort((np.arange(n), dists))
    order = order[order != query_index]
    return order[: min(k, n - 1)]


def knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    """All-atom neighbour lists: row a holds k_nearest(points, a, k).

    Returns an (N, min(k, N-1)) integer array.  Search is exhaustive and
    blocked; beyond an argpartition tie margin of 8 equidistant candidates
    at the neighbourhood boundary the tie order is not guaranteed.
    """
    pts = _as_points(points)
    n = len(pts)
    if n < 2:
        raise ValueError("need at least 2 points for neighbour lists")
    if k < 1:
        raise ValueError("k must be >= 1")
    k_eff = min(k, n - 1)
    out = np.empty((n, k_eff), dtype=np.intp)
    n_cand = min(k_eff + _KNN_TIE_MARGIN, n - 1)
    sq = np.einsum("ij,ij->i", pts, pts)
    for start in range(0, n, _KNN_BLOCK):
        stop = min(start + _KNN_BLOCK, n)
        # Squared distances via the Gram matrix; ordering is unchanged and
        # the matmul keeps the quadratic term cheap.
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (pts[start:stop] @ pts.T)
        d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        if n_cand < n - 1:
            cand = np.argpartition(d2, n_cand, axis=1)[:, :n_cand]
        else:
            cand = np.broadcast_to(np.arange(n), (stop - start, n))
        # Candidate indices ascend, so a stable sort by distance yields the
        # (distance, index) order.
        cand = np.sort(cand, axis=1)
        dc = np.take_along_axis(d2, cand, axis=1)
        order = np.argsort(dc, axis=1, kind="stable")[:, :k_eff]
        out[start:stop] = np.take_along_axis(cand, order, axis=1)
    return out


@dataclass(frozen=True)
class RigidTransform:
    """Rigid motion p -> rotation @ p + translation."""

    rotation: Rotation
    translation: np.ndarray
    degenerate: bool = False

    def __post_init__(self) -> None:
        t = np.array(self.translation, dtype=float).reshape(3)
        t.flags.writeable = False
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(Rotation.identity(), np.zeros(3))

    def apply(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=float) @ self.rotation.matrix.T + self.translation

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """Transform equal to applying ``inner`` first, then ``self``."""
        rot = self.rotation.compose(inner.rotation)
        trans = self.rotation.matrix @ inner.translation + self.translation
        return RigidTransform(rot, trans, self.degenerate or inner.degenerate)


def apply_transform(t: RigidTransform, p: np.ndarray) -> np.ndarray:
    """Apply a rigid transform to one or many 3-vectors."""
    return t.apply(p)


def kabsch_align(mobile: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rigid superposition of ``mobile`` onto ``target``.

    Points correspond 1:1 by index.  The returned transform minimizes the
    sum of squared residuals subject to det(rotation) = +1; a reflection
    optimum is projected back to a proper rotation by flipping the sign of
    the smallest singular direction.  Rank-deficient covariances (e.g.
    collinear point sets) still return a minimizer but are flagged
    ``degenerate``.
    """
    a = _as_points(mobile, "mobile")
    b = _as_points(target, "target")
    if a.shape != b.shape:
        raise ValueError(f"point sets differ in size: {a.shape} vs {b.shape}")
    if len(a) < 3:
        raise ValueError("underdetermined alignment: need at least 3 points")
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, s, vt = np.linalg.svd(h)
    d = float(np.sign(np.linalg.det(u @ vt)))
    if d == 0.0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T

    scale = s[0] if s[0] > 0 else 1.0
    degenerate = bool(
        s[0] <= 0.0
        or s[1] <= _DEGENERATE_REL_TOL * scale
        or (d < 0 and (s[1] - s[2]) <= _DEGENERATE_REL_TOL * scale)
    )
    if s[0] <= 0.0:
        r = np.eye(3)
    return RigidTransform(Rotation(r), cb - r @ ca, degenerate)


def rmsd(a: np.ndarray, b: np.ndarray) -> float:
    """Root-mean-square deviation of corresponding points, in Angstroms."""
    pa = _as_points(a, "a")
    pb = _as_points(b, "b")
    if pa.shape != pb.shape:
        raise ValueError(f"point sets differ in size: {pa.shape} vs {pb.shape}")
    diff = pa - pb
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))
