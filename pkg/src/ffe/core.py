"""Particle containers, exact k-nearest-neighbor indexing, and regular grids."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidFrameError, ShapeError, ConfigError

# Number of extra candidates requested from the tree so that equal-distance
# ties straddling the cutoff can be resolved by index without a re-query.
_TIE_PAD = 8

# Spacing used when every particle coincides and the bounding box has no extent.
DEGENERATE_SPACING = 1e-6

# Default fractional expansion of the bounding box when building a grid.
DEFAULT_GRID_MARGIN = 0.05


def _validate_points(arr, what):
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ShapeError(f"{what} must be an (n, 3) array, got shape {a.shape}")
    if a.shape[0] < 1:
        raise InvalidFrameError(f"{what} must contain at least one row")
    if not np.isfinite(a).all():
        raise InvalidFrameError(f"{what} contains non-finite values")
    return a


class ParticleFrame:
    """An unordered set of n particle positions at one time instant.

    Index order is arbitrary but stays fixed for the lifetime of the frame.
    """

    __slots__ = ("positions",)

    def __init__(self, positions):
        self.positions = _validate_points(positions, "positions")
        self.positions.setflags(write=False)

    def __len__(self):
        return self.positions.shape[0]

    def __repr__(self):
        return f"ParticleFrame(n={len(self)})"


class FlowField:
    """Per-particle displacement vectors, row-aligned with a source frame."""

    __slots__ = ("vectors",)

    def __init__(self, vectors):
        self.vectors = _validate_points(vectors, "vectors")
        self.vectors.setflags(write=False)

    def __len__(self):
        return self.vectors.shape[0]

    def __repr__(self):
        return f"FlowField(n={len(self)})"


class SpatialIndex:
    """Immutable exact k-NN index over a particle frame.

    Queries return min(k, n) results sorted by nondecreasing squared
    Euclidean distance; exact distance ties are broken by lower particle
    index. The index is safe to query concurrently once built.
    """

    def __init__(self, frame):
        if isinstance(frame, ParticleFrame):
            pts = frame.positions
        else:
            pts = _validate_points(frame, "points")
        self.points = pts
        self.n = pts.shape[0]
        self._tree = cKDTree(pts)

    def query(self, point, k):
        """k nearest particles to one 3-vector. Returns (indices, distances)."""
        idx, dist = self.query_batch(np.asarray(point, dtype=np.float64).reshape(1, 3), k)
        return idx[0], dist[0]

    def query_batch(self, points, k):
        """k nearest particles to each row of an (q, 3) array.

        Returns (indices, distances) of shape (q, min(k, n)). Distances are
        Euclidean; ordering is by (squared distance, index) so results are
        deterministic even with coincident particles.
        """
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        q = np.asarray(points, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != 3:
            raise ShapeError(f"query points must be (q, 3), got {q.shape}")
        m = min(k, self.n)
        kq = min(m + _TIE_PAD, self.n)
        cand = self._tree.query(q, k=kq)[1]
        if kq == 1:
            cand = cand[:, None]
        # Re-derive squared distances with plain arithmetic and settle order
        # by (d^2, index); the tree is only trusted for candidate finding.
        d2 = ((self.points[cand] - q[:, None, :]) ** 2).sum(axis=2)
        order = np.lexsort((cand, d2), axis=1)
        cand = np.take_along_axis(cand, order, axis=1)
        d2 = np.take_along_axis(d2, order, axis=1)
        if kq > m:
            # A tie across the cutoff may hide a lower-index candidate that
            # the tree did not return; such rows are resolved exhaustively.
            unsafe = d2[:, m - 1] >= d2[:, kq - 1]
            for row in np.nonzero(unsafe)[0]:
                fi, fd = self._brute_row(q[row], m)
                cand[row, :m] = fi
                d2[row, :m] = fd
        return cand[:, :m].copy(), np.sqrt(d2[:, :m])

    def _brute_row(self, point, m):
        d2 = ((self.points - point[None, :]) ** 2).sum(axis=1)
        order = np.lexsort((np.arange(self.n), d2))
        sel = order[:m]
        return sel, d2[sel]

    def nearest(self, points):
        """Index of the single nearest particle for each query row."""
        return self.query_batch(points, 1)[0][:, 0]


def build_spatial_index(frame):
    """Build an exact k-NN index over a frame."""
    return SpatialIndex(frame)


def knn(index, query, k):
    """k nearest particles to a query point as a list of (index, distance)."""
    idx, dist = index.query(query, k)
    return list(zip(idx.tolist(), dist.tolist()))


def self_excluded_knn(frame, k, index=None):
    """(n, min(k, n-1)) neighbor lists over a frame, self excluded per row."""
    pts = frame.positions if isinstance(frame, ParticleFrame) else frame
    n = pts.shape[0]
    if n < 2:
        raise InvalidFrameError("self-excluded k-NN needs at least 2 particles")
    k_eff = min(k, n - 1)
    if index is None:
        index = SpatialIndex(pts)
    idx, _ = index.query_batch(pts, k_eff + 1)
    out = np.empty((n, k_eff), dtype=np.int64)
    for i in range(n):
        row = idx[i]
        out[i] = row[row != i][:k_eff]
    return out


@dataclass(frozen=True)
class Grid:
    """Cubic lattice: point (j, k, l) sits at origin + spacing * (j, k, l)."""

    origin: np.ndarray
    spacing: float
    counts: tuple

    def lattice_points(self):
        """All grid points, ordered lexicographically by (j, k, l)."""
        axes = [self.origin[d] + self.spacing * np.arange(self.counts[d]) for d in range(3)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1).reshape(-1, 3)

    def interior_mask(self):
        """Flat boolean mask of grid points with all six lattice neighbors."""
        J, K, L = self.counts
        m = np.zeros((J, K, L), dtype=bool)
        if J > 2 and K > 2 and L > 2:
            m[1:-1, 1:-1, 1:-1] = True
        return m.reshape(-1)

    @property
    def size(self):
        J, K, L = self.counts
        return J * K * L


def bounding_grid(frame, grid_points_per_axis=10, margin_fraction=DEFAULT_GRID_MARGIN):
    """Cubic grid covering the frame's bounding box expanded by a margin.

    The spacing is uniform across axes: the longest axis extent of the
    expanded box divided by (G - 1). The grid is centered on the box. A
    degenerate box (all particles coincident) falls back to a tiny fixed
    spacing so downstream stencils stay finite.
    """
    G = int(grid_points_per_axis)
    if G < 2:
        raise ConfigError(f"grid_points_per_axis must be >= 2, got {G}")
    if margin_fraction < 0:
        raise ConfigError(f"margin_fraction must be >= 0, got {margin_fraction}")
    pts = frame.positions if isinstance(frame, ParticleFrame) else _validate_points(frame, "points")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = float((hi - lo).max()) * (1.0 + margin_fraction)
    spacing = extent / (G - 1) if extent > 0 else DEGENERATE_SPACING
    center = (lo + hi) / 2.0
    origin = center - spacing * (G - 1) / 2.0
    return Grid(origin=origin, spacing=spacing, counts=(G, G, G))
