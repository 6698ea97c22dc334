"""Input corruption protocols: additive noise, missing regions, train subsets.

Corruptions run in the mm frame, before normalization, so sigma values keep
their physical meaning.  All of them are deterministic under a fixed seed and
are applied identically to train and test shapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import Cohort, PointCloud, knn_indices


@dataclass
class CorruptionSpec:
    """One robustness-protocol cell.

    ``input_size_n`` and ``train_subset_size`` are consumed by the training
    loop (sparsity is an input-size setting, not a point operation).
    """

    noise_sigma_mm: float = 0.0
    partial_fraction: float = 0.0
    input_size_n: int | None = None
    train_subset_size: int | str = "all"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.noise_sigma_mm < 0:
            raise ValueError("noise_sigma_mm must be >= 0")
        if not 0.0 <= self.partial_fraction < 1.0:
            raise ValueError("partial_fraction must be in [0, 1)")
        if self.train_subset_size != "all" and int(self.train_subset_size) < 1:
            raise ValueError("train_subset_size must be positive or 'all'")

    @property
    def is_identity(self) -> bool:
        return self.noise_sigma_mm == 0.0 and self.partial_fraction == 0.0


def add_gaussian_noise(
    cloud: PointCloud, sigma_mm: float, rng: np.random.Generator
) -> PointCloud:
    """Perturb every coordinate with independent zero-mean Gaussian noise."""
    if sigma_mm < 0:
        raise ValueError("sigma must be >= 0")
    if cloud.normalized:
        raise ValueError("noise is applied in mm, before normalization")
    noise = rng.normal(0.0, sigma_mm, size=cloud.points.shape)
    return PointCloud(cloud.points + noise)


def remove_region(
    cloud: PointCloud, fraction: float, rng: np.random.Generator
) -> PointCloud:
    """Drop one contiguous region: the kNN ball around a random seed point.

    Removes ceil(fraction * count) points (seed point included); the survivors
    keep their original order.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must be in [0, 1)")
    n_remove = math.ceil(fraction * cloud.count)
    if n_remove == 0:
        return PointCloud(cloud.points.copy(), normalized=cloud.normalized)
    seed_idx = int(rng.integers(cloud.count))
    removed = {seed_idx}
    if n_remove > 1:
        nn = knn_indices(cloud, cloud, n_remove - 1, exclude_self=True)
        removed.update(int(i) for i in nn[seed_idx])
    keep = np.asarray([i for i in range(cloud.count) if i not in removed])
    return PointCloud(cloud.points[keep], normalized=cloud.normalized)


def corrupt_cloud(
    cloud: PointCloud, spec: CorruptionSpec, rng: np.random.Generator
) -> PointCloud:
    """Apply the spec's noise then region removal to one cloud."""
    out = cloud
    if spec.noise_sigma_mm > 0:
        out = add_gaussian_noise(out, spec.noise_sigma_mm, rng)
    if spec.partial_fraction > 0:
        out = remove_region(out, spec.partial_fraction, rng)
    return out


def corrupt_cohort(cohort: Cohort, spec: CorruptionSpec) -> Cohort:
    """Corrupt every shape's point cloud, once per shape, seed-deterministic.

    Each shape gets an independent stream derived from (spec.seed, position),
    so corruption of one shape does not depend on cohort ordering elsewhere.
    """
    shapes = []
    for pos, shape in enumerate(cohort.shapes):
        rng = np.random.default_rng(np.random.SeedSequence((spec.seed, pos)))
        cloud = corrupt_cloud(shape.full_cloud(), spec, rng)
        shapes.append(replace(shape, cloud=cloud))
    return Cohort(shapes, normalization=cohort.normalization)


def subset_training(cohort: Cohort, size: int | str, seed: int) -> Cohort:
    """Restrict the train split to a nested random subset of ``size`` shapes.

    Subsets are nested across sizes for a fixed seed (a size-25 subset
    contains the size-12 one); val/test shapes are untouched.
    """
    if size == "all":
        return cohort
    size = int(size)
    train_ids = [s.id for s in cohort.split_shapes("train")]
    if size > len(train_ids):
        raise ValueError(f"subset size {size} exceeds train count {len(train_ids)}")
    order = np.random.default_rng(seed).permutation(len(train_ids))
    keep = {train_ids[i] for i in order[:size]}
    shapes = [s for s in cohort.shapes if s.split != "train" or s.id in keep]
    return Cohort(shapes, normalization=cohort.normalization)
