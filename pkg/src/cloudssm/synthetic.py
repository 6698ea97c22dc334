"""Synthetic shape populations with known modes of variation.

Every shape in a cohort reuses the same icosphere vertex layout, so vertex i
corresponds to the same surface locus on all shapes.  Both families deform
the sphere affinely in their latent factors, which makes the ground-truth
vertex PCA rank equal to the number of latent factors - the end-to-end
oracle used by the statistics tests.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Cohort, CohortShape, RigidTransform, TriangleMesh

FAMILIES = ("ellipsoid", "bumped_sphere")


@dataclass
class CohortSpec:
    family: str = "ellipsoid"
    n_shapes: int = 60
    latent_dims: int = 3
    latent_low: float = 10.0       # mm
    latent_high: float = 25.0      # mm
    mesh_subdivisions: int = 3     # 0/1/2/3 -> 12/42/162/642 vertices
    misalign_deg: float = 0.0      # optional rigid jitter, exercised by ICP
    seed: int = 0

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.latent_dims < 1:
            raise ValueError("latent_dims must be >= 1")
        if self.family == "ellipsoid" and self.latent_dims > 3:
            raise ValueError("ellipsoid family has at most 3 latent factors")
        if self.n_shapes < self.latent_dims + 2:
            raise ValueError("need at least latent_dims + 2 shapes")
        if not self.latent_high > self.latent_low > 0:
            raise ValueError("latent range must satisfy 0 < low < high")
        if self.mesh_subdivisions < 0:
            raise ValueError("mesh_subdivisions must be >= 0")


def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere with a deterministic vertex layout."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
            (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
            (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(map(tuple, verts))
    for _ in range(subdivisions):
        midpoint: dict[tuple[int, int], int] = {}

        def mid(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                p = np.asarray(verts[i]) + np.asarray(verts[j])
                p /= np.linalg.norm(p)
                midpoint[key] = len(verts)
                verts.append(tuple(p))
            return midpoint[key]

        new_faces = []
        for i, j, k in faces:
            a, b, c = mid(i, j), mid(j, k), mid(k, i)
            new_faces += [(i, a, c), (j, b, a), (k, c, b), (a, b, c)]
        faces = new_faces
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def _bump_directions(n: int) -> np.ndarray:
    # fixed, well-spread unit directions (golden-spiral points)
    i = np.arange(n, dtype=np.float64) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    theta = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def shape_vertices(spec: CohortSpec, latents: np.ndarray, unit: np.ndarray) -> np.ndarray:
    """Deform the unit-sphere layout by one shape's latent factors."""
    if spec.family == "ellipsoid":
        semi_axes = np.full(3, 0.5 * (spec.latent_low + spec.latent_high))
        semi_axes[: spec.latent_dims] = latents
        return unit * semi_axes
    # bumped_sphere: base radius modulated by fixed Gaussian bumps whose
    # amplitudes are the latent factors; affine in the latents
    base_radius = spec.latent_high
    directions = _bump_directions(spec.latent_dims)
    sim = unit @ directions.T                       # cosine to each bump center
    bumps = np.exp(-(1.0 - sim) ** 2 / 0.08)        # (n_verts, latent_dims)
    radius = base_radius + bumps @ (latents - spec.latent_low)
    return unit * radius[:, None]


def generate_cohort(spec: CohortSpec) -> tuple[Cohort, np.ndarray]:
    """Sample a cohort of meshes; returns it with the (n_shapes, d) latents."""
    rng = np.random.default_rng(spec.seed)
    unit, faces = icosphere(spec.mesh_subdivisions)
    latents = rng.uniform(
        spec.latent_low, spec.latent_high, size=(spec.n_shapes, spec.latent_dims)
    )
    shapes = []
    width = len(str(spec.n_shapes - 1))
    for i in range(spec.n_shapes):
        verts = shape_vertices(spec, latents[i], unit)
        if spec.misalign_deg > 0:
            verts = _random_rigid_jitter(spec, rng).apply(verts)
        shapes.append(
            CohortShape(id=f"shape_{i:0{width}d}", mesh=TriangleMesh(verts, faces))
        )
    return Cohort(shapes), latents


def _random_rigid_jitter(spec: CohortSpec, rng: np.random.Generator) -> RigidTransform:
    angle = np.deg2rad(rng.uniform(-spec.misalign_deg, spec.misalign_deg))
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
    shift = rng.uniform(-0.1, 0.1, size=3) * spec.latent_high
    return RigidTransform(rot, shift)


def write_latents_csv(latents: np.ndarray, ids: list[str], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["shape_id"] + [f"latent_{d}" for d in range(latents.shape[1])])
        for shape_id, row in zip(ids, latents):
            writer.writerow([shape_id] + [float(v) for v in row])
