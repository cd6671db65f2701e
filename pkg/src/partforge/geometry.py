"""Point-cloud and mesh-surface primitives.

Clouds are (N, 3) float64 arrays tagged with a frame: ``object`` coordinates
are shape-global, ``centered`` clouds have their centroid at the origin.
Distances between clouds are exact; the uniform-grid predicates used by the
preprocessing pipeline are accelerations that agree with brute force by
construction (cell size equals the query threshold, so any pair within the
threshold lies in adjacent cells).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

CENTERED_TOL = 1e-6


class GeometryError(ValueError):
    pass


class Frame(enum.Enum):
    OBJECT = "object"
    CENTERED = "centered"


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 3) float64
    frame: Frame = Frame.OBJECT

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise GeometryError(f"point cloud must be (N, 3) with N >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud contains non-finite coordinates")
        if self.frame is Frame.CENTERED:
            c = pts.mean(axis=0)
            if float(np.linalg.norm(c)) > CENTERED_TOL:
                raise GeometryError(f"centered cloud has centroid norm {np.linalg.norm(c):.3g}")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def translated(self, offset) -> "PointCloud":
        return PointCloud(self.points + np.asarray(offset, dtype=np.float64), Frame.OBJECT)


@dataclass(frozen=True)
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if np.any(lo > hi):
            raise GeometryError("Aabb min must be <= max component-wise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def of_points(cls, pts: np.ndarray) -> "Aabb":
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def gap_to(self, other: "Aabb") -> float:
        """Lower bound on the distance between points of the two boxes."""
        g = np.maximum(0.0, np.maximum(other.lo - self.hi, self.lo - other.hi))
        return float(np.sqrt((g * g).sum()))


@dataclass(frozen=True)
class ShapeNormalization:
    """Translate bbox center to the origin, scale max radius to 1."""

    center: np.ndarray
    radius: float

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.center) / self.radius


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        t = np.asarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise GeometryError(f"vertices must be (V, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise GeometryError(f"triangles must be (T, 3), got {t.shape}")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise GeometryError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def transformed(self, center, scale: float) -> "TriMesh":
        return TriMesh((self.vertices - np.asarray(center, dtype=np.float64)) / scale, self.triangles)

    @staticmethod
    def union(meshes: list["TriMesh"]) -> "TriMesh":
        if not meshes:
            raise GeometryError("union of zero meshes")
        verts = []
        tris = []
        off = 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + off)
            off += len(m.vertices)
        return TriMesh(np.concatenate(verts), np.concatenate(tris))


def sample_surface(mesh: TriMesh, n: int, rng_seed: int) -> PointCloud:
    """Draw n area-uniform surface points; deterministic for a fixed seed."""
    if n < 1:
        raise GeometryError(f"sample count must be >= 1, got {n}")
    areas = mesh.triangle_areas()
    total = float(areas.sum())
    if total <= 0.0:
        raise GeometryError("degenerate mesh")
    rng = np.random.default_rng(rng_seed)
    cdf = np.cumsum(areas)
    tri_idx = np.searchsorted(cdf, rng.random(n) * total, side="right")
    tri_idx = np.minimum(tri_idx, len(areas) - 1)
    a = mesh.vertices[mesh.triangles[tri_idx, 0]]
    b = mesh.vertices[mesh.triangles[tri_idx, 1]]
    c = mesh.vertices[mesh.triangles[tri_idx, 2]]
    u = rng.random((n, 1))
    v = rng.random((n, 1))
    fold = (u + v) > 1.0
    u = np.where(fold, 1.0 - u, u)
    v = np.where(fold, 1.0 - v, v)
    return PointCloud(a + u * (b - a) + v * (c - a), Frame.OBJECT)


def recenter(pc: PointCloud) -> tuple[PointCloud, np.ndarray]:
    """Shift the centroid to the origin; the returned centroid restores pc."""
    centroid = pc.points.mean(axis=0)
    return PointCloud(pc.points - centroid, Frame.CENTERED), centroid


def _cross_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def directional_hausdorff(a: PointCloud, b: PointCloud) -> float:
    """max over a of the distance to the nearest point of b."""
    worst = 0.0
    bp = b.points
    for chunk in np.array_split(a.points, min(len(a), len(a) * len(b) // 4_000_000 + 1)):
        d2 = _cross_sqdist(chunk, bp).min(axis=1).max()
        worst = max(worst, float(d2))
    return float(np.sqrt(worst))


def min_distance(a: PointCloud, b: PointCloud) -> float:
    """min over all point pairs; symmetric."""
    best = np.inf
    bp = b.points
    for chunk in np.array_split(a.points, min(len(a), len(a) * len(b) // 4_000_000 + 1)):
        best = min(best, float(_cross_sqdist(chunk, bp).min()))
    return float(np.sqrt(best))


@dataclass(frozen=True)
class Obb:
    axes: np.ndarray  # (3, 3), rows are unit vectors, descending eigenvalue order
    extents: np.ndarray  # (3,)
    diagonal: float


def pca_obb(pc: PointCloud) -> Obb:
    """PCA-aligned bounding box.

    Axis signs are fixed by making the largest-magnitude entry of each
    eigenvector positive, so the output is deterministic.
    """
    pts = pc.points
    mean = pts.mean(axis=0)
    x = pts - mean
    cov = (x.T @ x) / len(pts)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    axes = eigvecs[:, order].T
    for i in range(3):
        j = int(np.argmax(np.abs(axes[i])))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    proj = x @ axes.T
    extents = proj.max(axis=0) - proj.min(axis=0) if len(pts) > 1 else np.zeros(3)
    return Obb(axes, extents, float(np.linalg.norm(extents)))


def normalize_shape(clouds: list[PointCloud]) -> ShapeNormalization:
    """Normalization that puts the union bbox center at the origin, max radius 1."""
    if not clouds:
        raise GeometryError("normalize_shape: no clouds")
    pts = np.concatenate([c.points for c in clouds])
    center = Aabb.of_points(pts).center
    radius = float(np.sqrt(((pts - center) ** 2).sum(axis=1).max()))
    if radius <= 0.0:
        raise GeometryError("zero-radius shape")
    return ShapeNormalization(center, radius)


# ---------------------------------------------------------------------------
# Uniform-grid threshold predicates. Cell size = threshold, so any pair of
# points closer than the threshold lands in 3x3x3-adjacent cells; comparing
# exact squared distances over those candidates reproduces brute force.


class UniformGrid:
    """Hash grid over a fixed cloud for radius-bounded queries."""

    def __init__(self, points: np.ndarray, cell: float):
        if cell <= 0:
            raise GeometryError("grid cell size must be positive")
        self.points = points
        self.cell = cell
        keys = np.floor(points / cell).astype(np.int64)
        self.cells: dict[tuple[int, int, int], np.ndarray] = {}
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        sk = keys[order]
        bounds = np.nonzero(np.any(np.diff(sk, axis=0) != 0, axis=1))[0] + 1
        for grp in np.split(order, bounds):
            self.cells[tuple(keys[grp[0]])] = grp

    def candidates(self, point: np.ndarray) -> np.ndarray:
        k = np.floor(point / self.cell).astype(np.int64)
        found = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    grp = self.cells.get((k[0] + dx, k[1] + dy, k[2] + dz))
                    if grp is not None:
                        found.append(grp)
        if not found:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(found)

    def any_within(self, point: np.ndarray, tau_sq: float) -> bool:
        idx = self.candidates(point)
        if idx.size == 0:
            return False
        d = self.points[idx] - point
        return bool((np.einsum("ij,ij->i", d, d) < tau_sq).any())


def clouds_within(a: PointCloud, b: PointCloud, tau: float) -> bool:
    """Exact predicate: min_distance(a, b) < tau."""
    ba, bb = Aabb.of_points(a.points), Aabb.of_points(b.points)
    if ba.gap_to(bb) >= tau:
        return False
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    grid = UniformGrid(big.points, tau)
    tau_sq = tau * tau
    return any(grid.any_within(p, tau_sq) for p in small.points)


def hausdorff_within(a: PointCloud, b: PointCloud, tau: float) -> bool:
    """Exact predicate: directional_hausdorff(a, b) < tau."""
    grid = UniformGrid(b.points, tau)
    tau_sq = tau * tau
    return all(grid.any_within(p, tau_sq) for p in a.points)
