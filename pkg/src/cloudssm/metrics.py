"""Evaluation-only metrics: exact earth mover's distance, point-to-face
distance against a ground-truth mesh, and the per-shape CSV report.

Reported values are in denormalized mm units (CD in mm^2, EMD/P2F in mm).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .geometry import TriangleMesh
from .losses import chamfer_distance


def chamfer_distance_np(c: np.ndarray, s: np.ndarray) -> float:
    """Evaluation wrapper around the training Chamfer op for numpy arrays."""
    with torch.no_grad():
        return float(
            chamfer_distance(
                torch.as_tensor(c, dtype=torch.float64),
                torch.as_tensor(s, dtype=torch.float64),
            )
        )


def earth_movers_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum mean distance under an optimal bijection of equal-size sets.

    Solved exactly by linear assignment; evaluation-only (no gradients).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != 3 or b.shape[1] != 3:
        raise ValueError("expected (n, 3) point sets")
    if a.shape[0] != b.shape[0]:
        raise ValueError(
            f"point sets must match in size, got {a.shape[0]} vs {b.shape[0]}"
        )
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def _closest_on_triangles(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Squared distance of each point to each triangle, (p, f).

    Region decomposition of the quadratic ||B + s*E0 + t*E1 - P||^2 over the
    simplex (s >= 0, t >= 0, s + t <= 1); handles interior, edge and vertex
    cases exactly.
    """
    tiny = np.finfo(np.float64).tiny
    base = tris[:, 0]                       # (f, 3)
    e0 = tris[:, 1] - base
    e1 = tris[:, 2] - base
    a = np.einsum("fk,fk->f", e0, e0)       # (f,)
    b = np.einsum("fk,fk->f", e0, e1)
    c = np.einsum("fk,fk->f", e1, e1)
    det = np.maximum(a * c - b * b, 0.0)

    dvec = base[None, :, :] - points[:, None, :]      # (p, f, 3)
    d = np.einsum("pfk,fk->pf", dvec, e0)
    e = np.einsum("pfk,fk->pf", dvec, e1)

    s = b * e - c * d
    t = b * d - a * e

    a_s = np.maximum(a, tiny)
    c_s = np.maximum(c, tiny)
    det_s = np.maximum(det, tiny)
    edge_den = np.maximum(a - 2 * b + c, tiny)

    s_edge0 = np.clip(-d / a_s, 0.0, 1.0)             # t = 0 edge
    t_edge1 = np.clip(-e / c_s, 0.0, 1.0)             # s = 0 edge
    s_hyp = np.clip(((c + e) - (b + d)) / edge_den, 0.0, 1.0)   # s + t = 1 edge
    t_hyp = np.clip(((a + d) - (b + e)) / edge_den, 0.0, 1.0)

    inside = s + t <= det
    r0 = inside & (s >= 0) & (t >= 0)
    r3 = inside & (s < 0) & (t >= 0)
    r5 = inside & (s >= 0) & (t < 0)
    r4 = inside & (s < 0) & (t < 0)
    r1 = ~inside & (s >= 0) & (t >= 0)
    r2 = ~inside & (s < 0)
    r6 = ~inside & (s >= 0) & (t < 0)

    s_out = np.where(r0, s / det_s, 0.0)
    t_out = np.where(r0, t / det_s, 0.0)
    s_out = np.where(r3, 0.0, s_out)
    t_out = np.where(r3, t_edge1, t_out)
    s_out = np.where(r5, s_edge0, s_out)
    t_out = np.where(r5, 0.0, t_out)
    # region 4: closest lies on whichever edge the gradient points into
    r4a = r4 & (d < 0)
    r4b = r4 & ~(d < 0)
    s_out = np.where(r4a, s_edge0, s_out)
    t_out = np.where(r4a, 0.0, t_out)
    s_out = np.where(r4b, 0.0, s_out)
    t_out = np.where(r4b, t_edge1, t_out)
    # region 1: hypotenuse edge
    s_out = np.where(r1, s_hyp, s_out)
    t_out = np.where(r1, 1.0 - s_hyp, t_out)
    # region 2: hypotenuse or s = 0 edge
    r2a = r2 & ((c + e) > (b + d))
    r2b = r2 & ~((c + e) > (b + d))
    s_out = np.where(r2a, s_hyp, s_out)
    t_out = np.where(r2a, 1.0 - s_hyp, t_out)
    s_out = np.where(r2b, 0.0, s_out)
    t_out = np.where(r2b, t_edge1, t_out)
    # region 6: hypotenuse or t = 0 edge
    r6a = r6 & ((a + d) > (b + e))
    r6b = r6 & ~((a + d) > (b + e))
    t_out = np.where(r6a, t_hyp, t_out)
    s_out = np.where(r6a, 1.0 - t_hyp, s_out)
    t_out = np.where(r6b, 0.0, t_out)
    s_out = np.where(r6b, s_edge0, s_out)

    closest = (
        base[None, :, :]
        + s_out[:, :, None] * e0[None, :, :]
        + t_out[:, :, None] * e1[None, :, :]
    )
    return ((closest - points[:, None, :]) ** 2).sum(-1)


def point_to_face_distance(
    points: np.ndarray, mesh: TriangleMesh, chunk: int = 256
) -> np.ndarray:
    """Unsigned distance of each point to the nearest mesh triangle."""
    if mesh.faces.shape[0] == 0:
        raise ValueError("mesh has no faces")
    points = np.asarray(points, dtype=np.float64)
    tris = mesh.vertices[mesh.faces]  # (f, 3, 3)
    out = np.empty(points.shape[0])
    for lo in range(0, points.shape[0], chunk):
        d2 = _closest_on_triangles(points[lo : lo + chunk], tris)
        out[lo : lo + chunk] = np.sqrt(d2.min(axis=1))
    return out


@dataclass
class ShapeMetrics:
    shape_id: str
    cd_mm2: float
    emd_mm: float
    p2f_mean_mm: float
    p2f_max_mm: float


METRIC_COLUMNS = ("shape_id", "cd_mm2", "emd_mm", "p2f_mean_mm", "p2f_max_mm")


def write_metrics_csv(rows: list[ShapeMetrics], path: str | Path) -> None:
    """Per-shape metric rows plus a trailing mean row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for r in rows:
            writer.writerow([r.shape_id, r.cd_mm2, r.emd_mm, r.p2f_mean_mm, r.p2f_max_mm])
        if rows:
            writer.writerow(
                ["mean"]
                + [
                    float(np.mean([getattr(r, col) for r in rows]))
                    for col in METRIC_COLUMNS[1:]
                ]
            )


def read_metrics_csv(path: str | Path) -> tuple[list[ShapeMetrics], dict[str, float]]:
    rows: list[ShapeMetrics] = []
    means: dict[str, float] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            vals = {k: float(rec[k]) for k in METRIC_COLUMNS[1:]}
            if rec["shape_id"] == "mean":
                means = vals
            else:
                rows.append(ShapeMetrics(rec["shape_id"], **vals))
    return rows, means
