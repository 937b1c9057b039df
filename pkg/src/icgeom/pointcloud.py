"""Meshes, point clouds, file I/O and fixed-budget resampling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

DEFAULT_BUDGET = 1024


class MeshFormatError(ValueError):
    """Malformed OBJ content."""


class FaceIndexError(MeshFormatError):
    """A face references a vertex that does not exist."""


class PointCloudFormatError(ValueError):
    """Malformed XYZ content."""


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float
    triangles: np.ndarray  # (T, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise FaceIndexError("triangle index out of range")

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_corners(self) -> np.ndarray:
        """Corner positions, shape (T, 3, 3)."""
        return self.vertices[self.triangles]

    def triangle_areas(self) -> np.ndarray:
        c = self.triangle_corners()
        return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) float
    label: Optional[int] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.points)


# ---------------------------------------------------------------------------
# File I/O


def parse_obj(text: str) -> TriangleMesh:
    vertices = []
    faces = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        tag = tokens[0]
        if tag == "v":
            if len(tokens) < 4:
                raise MeshFormatError(f"line {lineno}: vertex needs three coordinates")
            try:
                vertices.append([float(t) for t in tokens[1:4]])
            except ValueError as exc:
                raise MeshFormatError(f"line {lineno}: {exc}") from None
        elif tag == "f":
            if len(tokens) < 4:
                raise MeshFormatError(f"line {lineno}: face needs at least three vertices")
            idx = []
            for tok in tokens[1:]:
                head = tok.split("/", 1)[0]
                try:
                    i = int(head)
                except ValueError:
                    raise MeshFormatError(f"line {lineno}: bad face index {tok!r}") from None
                if i <= 0:
                    raise MeshFormatError(f"line {lineno}: non-positive face index {i}")
                idx.append(i - 1)
            faces.append((lineno, idx))
        # vn, vt, usemtl, g, o, s ... are ignored

    triangles = []
    n = len(vertices)
    for lineno, idx in faces:
        bad = [i + 1 for i in idx if i >= n]
        if bad:
            raise FaceIndexError(f"line {lineno}: vertex index {bad[0]} out of range ({n} vertices)")
        # fan triangulation
        for a, b in zip(idx[1:-1], idx[2:]):
            triangles.append((idx[0], a, b))
    return TriangleMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                        np.array(triangles, dtype=np.int64).reshape(-1, 3))


def load_mesh(path) -> TriangleMesh:
    return parse_obj(Path(path).read_text())


def save_mesh(mesh: TriangleMesh, path) -> None:
    lines = [f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(x: float) -> str:
    return np.format_float_positional(float(x), unique=True, trim="0")


def write_xyz(cloud: PointCloud, path) -> None:
    lines = []
    if cloud.label is not None:
        lines.append(f"# label {int(cloud.label)}")
    lines += [f"{_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in cloud.points]
    Path(path).write_text("\n".join(lines) + "\n")


def read_xyz(path) -> PointCloud:
    label = None
    points = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "label":
                try:
                    label = int(parts[1])
                except ValueError:
                    raise PointCloudFormatError(f"line {lineno}: bad label") from None
            continue
        parts = line.split()
        if len(parts) != 3:
            raise PointCloudFormatError(f"line {lineno}: expected 3 values, got {len(parts)}")
        try:
            points.append([float(p) for p in parts])
        except ValueError:
            raise PointCloudFormatError(f"line {lineno}: not a number") from None
    pts = np.array(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise PointCloudFormatError("non-finite coordinate")
    return PointCloud(pts, label)


# ---------------------------------------------------------------------------
# Resampling


def sample_on_triangles(mesh: TriangleMesh, counts: np.ndarray, rng: np.random.Generator):
    """Draw ``counts[t]`` uniform points on triangle ``t``.

    Returns ``(points, source_triangle_ids)``.
    """
    counts = np.asarray(counts, dtype=np.int64)
    tri_ids = np.repeat(np.arange(mesh.n_triangles), counts)
    r1 = np.sqrt(rng.random(len(tri_ids)))
    r2 = rng.random(len(tri_ids))
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    corners = mesh.triangle_corners()[tri_ids]
    pts = np.einsum("nk,nkd->nd", bary, corners)
    return pts, tri_ids


def upsample_counts(n: int, n_triangles: int, areas: np.ndarray, budget: int) -> np.ndarray:
    """Per-triangle quota: floor((budget - n) / t) everywhere, plus one more
    point on each of the ``(budget - n) mod t`` largest triangles."""
    missing = budget - n
    quota, rem = divmod(missing, n_triangles)
    counts = np.full(n_triangles, quota, dtype=np.int64)
    if rem:
        order = np.argsort(-np.asarray(areas), kind="stable")
        counts[order[:rem]] += 1
    return counts


def upsample_on_triangles(mesh: TriangleMesh, current: PointCloud, budget: int = DEFAULT_BUDGET,
                          seed: int = 0, return_sources: bool = False):
    n = len(current)
    if mesh.n_triangles < 1:
        raise ValueError("mesh has no triangles")
    if n >= budget:
        raise ValueError(f"cloud already has {n} >= {budget} points; downsample instead")
    counts = upsample_counts(n, mesh.n_triangles, mesh.triangle_areas(), budget)
    added, src = sample_on_triangles(mesh, counts, np.random.default_rng(seed))
    out = PointCloud(np.concatenate([current.points, added]), current.label)
    if return_sources:
        return out, src
    return out


def downsample_shuffle(cloud: PointCloud, budget: int = DEFAULT_BUDGET, seed: int = 0) -> PointCloud:
    if len(cloud) < budget:
        raise ValueError(f"cloud has {len(cloud)} < {budget} points")
    perm = np.random.default_rng(seed).permutation(len(cloud))
    return PointCloud(cloud.points[perm[:budget]], cloud.label)


def resample_mesh(mesh: TriangleMesh, budget: int = DEFAULT_BUDGET, seed: int = 0,
                  label: Optional[int] = None) -> PointCloud:
    """Force the mesh's point set (its vertices) to exactly ``budget`` points."""
    start = PointCloud(mesh.vertices, label)
    n = len(start)
    if n < budget:
        return upsample_on_triangles(mesh, start, budget, seed)
    if n > budget:
        return downsample_shuffle(start, budget, seed)
    return start


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has norm 1."""
    pts = cloud.points - cloud.points.mean(axis=0)
    radius = np.sqrt((pts * pts).sum(axis=1)).max() if len(pts) else 0.0
    span = np.ptp(cloud.points, axis=0).max() if len(pts) else 0.0
    # all points coincide (up to rounding)
    if radius <= 1e-12 * max(1.0, float(np.abs(cloud.points).max(initial=0.0))) or span == 0.0:
        return PointCloud(np.zeros_like(pts), cloud.label)
    pts = pts / radius
    return PointCloud(pts, cloud.label)
