"""Covariance eigenvalue descriptors.

Each point gets the seven-value vector ``[L, P, S, A, sum, C, O]`` computed
from the sorted eigenvalues of its neighborhood covariance:

    L = (l1 - l2) / l1        linearity
    P = (l2 - l3) / l1        planarity
    S = l3 / l1               sphericity
    A = (l1 - l3) / l1        anisotropy
    sum = l1 + l2 + l3
    C = l3 / sum              curvature
    O = cbrt(l1 * l2 * l3)    omnivariance
"""

from __future__ import annotations

import numpy as np

from .graph import ball_query, knn_graph
from .pointcloud import PointCloud

FEATURE_NAMES = ("L", "P", "S", "A", "sum", "C", "O")
N_FEATURES = len(FEATURE_NAMES)
EPS_DEGENERATE = 1e-12
CLAMP_TOL = 1e-9


def covariance_matrix(points: np.ndarray) -> np.ndarray:
    """Population covariance (divisor M) of an ``(M, 3)`` array.

    Also accepts a batch ``(..., M, 3)`` and returns ``(..., 3, 3)``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-2] == 0:
        raise ValueError("covariance of an empty point set")
    centered = pts - pts.mean(axis=-2, keepdims=True)
    cov = np.einsum("...mi,...mj->...ij", centered, centered) / pts.shape[-2]
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def eigenvalues_sym3(m: np.ndarray) -> np.ndarray:
    """Closed-form eigenvalues of symmetric 3x3 matrices, sorted descending.

    Uses the trigonometric solution of the characteristic cubic. Values in
    ``[-1e-9, 0)`` are clamped to zero. Works on ``(3, 3)`` or ``(..., 3, 3)``.
    """
    a = np.asarray(m, dtype=np.float64)
    batch_shape = a.shape[:-2]
    a = a.reshape(-1, 3, 3)

    scale = np.abs(a).max(axis=(1, 2))
    scale = np.where(scale > 0, scale, 1.0)
    b = a / scale[:, None, None]

    q = np.trace(b, axis1=1, axis2=2) / 3.0
    off = b[:, 0, 1] ** 2 + b[:, 0, 2] ** 2 + b[:, 1, 2] ** 2
    diag = np.stack([b[:, 0, 0], b[:, 1, 1], b[:, 2, 2]], axis=1) - q[:, None]
    p2 = (diag ** 2).sum(axis=1) + 2.0 * off
    p = np.sqrt(p2 / 6.0)

    safe_p = np.where(p > 0, p, 1.0)
    c = (b - q[:, None, None] * np.eye(3)) / safe_p[:, None, None]
    r = np.clip(np.linalg.det(c) / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0

    l1 = q + 2.0 * p * np.cos(phi)
    l3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    l2 = 3.0 * q - l1 - l3
    vals = np.stack([l1, l2, l3], axis=1)

    # p == 0 means b = q * I
    vals = np.where((p > 0)[:, None], vals, q[:, None])
    vals = -np.sort(-vals, axis=1) * scale[:, None]
    vals = np.where((vals < 0) & (vals >= -CLAMP_TOL), 0.0, vals)
    return vals.reshape(batch_shape + (3,))


def geometric_features(eig: np.ndarray) -> np.ndarray:
    """Seven descriptors from descending eigenvalues; ``(..., 3) -> (..., 7)``."""
    e = np.asarray(eig, dtype=np.float64)
    l1, l2, l3 = e[..., 0], e[..., 1], e[..., 2]
    ok = l1 >= EPS_DEGENERATE
    inv1 = np.where(ok, 1.0 / np.where(ok, l1, 1.0), 0.0)
    total = l1 + l2 + l3
    has_total = total >= EPS_DEGENERATE
    curv = np.where(has_total, l3 / np.where(has_total, total, 1.0), 0.0)
    # exact values obey these bounds; clip away last-ulp rounding
    ratios = np.clip(np.stack([l1 - l2, l2 - l3, l3, l1 - l3], axis=-1) * inv1[..., None], 0.0, 1.0)
    feats = np.concatenate([
        ratios,
        np.stack([total, np.clip(curv, 0.0, 1.0 / 3.0), np.cbrt(l1 * l2 * l3)], axis=-1),
    ], axis=-1)
    return np.where(ok[..., None], feats, 0.0)


def per_point_features(cloud, k_geom: int = 20, neighborhood: str = "knn",
                       radius: float | None = None) -> np.ndarray:
    """``(N, 7)`` feature table, one row per point.

    ``neighborhood="knn"`` uses the ``k_geom`` nearest points (self included).
    ``neighborhood="ball"`` uses up to ``k_geom`` points within ``radius``.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if k_geom > n:
        raise ValueError(f"k_geom={k_geom} exceeds cloud size {n}")
    if neighborhood == "knn":
        nbrs = knn_graph(pts, k_geom)
        cov = covariance_matrix(pts[nbrs])
    elif neighborhood == "ball":
        if radius is None:
            raise ValueError("ball neighborhoods need a radius")
        cov = np.stack([covariance_matrix(pts[ball_query(pts, p, radius, k_geom)]) for p in pts])
    else:
        raise ValueError(f"unknown neighborhood {neighborhood!r}")
    return geometric_features(eigenvalues_sym3(cov))
