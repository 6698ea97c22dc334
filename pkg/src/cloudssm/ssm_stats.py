"""Population shape statistics over ordered correspondence sets.

PCA runs on flattened 3M-dimensional correspondence vectors (mm).  The three
standard SSM quality metrics are derived from it: compactness (modes needed
for a variance threshold), generalization (reconstruction error of held-out
sets) and specificity (distance of sampled shapes to the training set).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_EIGENVALUE_FLOOR = 1e-12  # relative to the largest eigenvalue


@dataclass
class PCAModel:
    mean: np.ndarray          # (3M,)
    eigenvectors: np.ndarray  # (3M, K), column-orthonormal
    eigenvalues: np.ndarray   # (K,), non-increasing, > 0
    n_train: int

    @property
    def n_points(self) -> int:
        return self.mean.shape[0] // 3

    def retained_count(self, threshold: float) -> int:
        """Smallest number of leading modes reaching the variance threshold."""
        total = self.eigenvalues.sum()
        if total <= 0:
            return 0
        cumulative = np.cumsum(self.eigenvalues) / total
        return int(np.searchsorted(cumulative, threshold - 1e-12) + 1)


@dataclass
class ModeWalk:
    mode_index: int
    t_values: list[float]
    positions: list[np.ndarray]  # (M, 3) per t; t = 0 entry equals the mean


def _as_matrix(sets) -> np.ndarray:
    arr = np.asarray(sets, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (n, M, 3) correspondence sets, got {arr.shape}")
    return arr.reshape(arr.shape[0], -1)


def fit_pca(train_sets) -> PCAModel:
    """Eigendecompose the sample covariance (divisor n-1) of the flattened
    training sets; numerically-zero eigenvalues are dropped.

    Uses the n x n Gram-matrix route when n < 3M; the spectrum is identical.
    """
    x = _as_matrix(train_sets)
    n, dim = x.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 training sets")
    mean = x.mean(axis=0)
    xc = x - mean

    if n < dim:
        gram = (xc @ xc.T) / (n - 1)
        w, u = np.linalg.eigh(gram)
        order = np.argsort(w)[::-1]
        w, u = w[order], u[:, order]
        keep = w > max(w[0], 0.0) * _EIGENVALUE_FLOOR
        w, u = w[keep], u[:, keep]
        vecs = xc.T @ u
        if w.size:
            vecs /= np.sqrt(w * (n - 1))
    else:
        cov = (xc.T @ xc) / (n - 1)
        w, vecs = np.linalg.eigh(cov)
        order = np.argsort(w)[::-1]
        w, vecs = w[order], vecs[:, order]
        keep = w > max(w[0], 0.0) * _EIGENVALUE_FLOOR
        w, vecs = w[keep], vecs[:, keep]
    return PCAModel(mean=mean, eigenvectors=vecs, eigenvalues=w, n_train=n)


def compactness(pca: PCAModel, threshold: float = 0.95) -> tuple[int, np.ndarray]:
    """Modes needed to reach the variance threshold, plus the full curve."""
    total = pca.eigenvalues.sum()
    if total <= 0:
        return 0, np.zeros(0)
    curve = np.cumsum(pca.eigenvalues) / total
    return pca.retained_count(threshold), curve


def _reconstruct(pca: PCAModel, flat: np.ndarray, n_modes: int) -> np.ndarray:
    basis = pca.eigenvectors[:, :n_modes]
    return pca.mean + (flat - pca.mean) @ basis @ basis.T


@dataclass
class GeneralizationResult:
    errors_sq: np.ndarray        # ||C - reconstruction||^2 per test shape
    per_point_mm: np.ndarray     # mean per-point Euclidean error per shape
    mean_sq: float
    mean_per_point_mm: float


def generalization(
    pca: PCAModel, test_sets, threshold: float = 0.95
) -> GeneralizationResult:
    """Reconstruction error of held-out sets from the retained modes."""
    x = _as_matrix(test_sets)
    if x.shape[1] != pca.mean.shape[0]:
        raise ValueError("test sets do not match the PCA point count")
    recon = _reconstruct(pca, x, pca.retained_count(threshold))
    diff = x - recon
    errors_sq = (diff ** 2).sum(axis=1)
    per_point = np.linalg.norm(diff.reshape(x.shape[0], -1, 3), axis=2).mean(axis=1)
    return GeneralizationResult(
        errors_sq=errors_sq,
        per_point_mm=per_point,
        mean_sq=float(errors_sq.mean()),
        mean_per_point_mm=float(per_point.mean()),
    )


@dataclass
class SpecificityResult:
    distances_sq: np.ndarray     # min squared distance to a training set
    mean_sq: float
    mc_stderr: float             # Monte-Carlo standard error of the mean


def specificity(
    pca: PCAModel,
    train_sets,
    n_samples: int = 1000,
    threshold: float = 0.95,
    rng: np.random.Generator | None = None,
) -> SpecificityResult:
    """Distance of SSM-sampled shapes to their nearest training shape.

    Samples coefficients from independent zero-mean Gaussians with the
    retained eigenvalue variances.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = _as_matrix(train_sets)
    k = pca.retained_count(threshold)
    basis = pca.eigenvectors[:, :k]
    sigma = np.sqrt(pca.eigenvalues[:k])
    coeffs = rng.normal(size=(n_samples, k)) * sigma
    samples = pca.mean + coeffs @ basis.T
    d2 = ((samples[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    dists = d2.min(axis=1)
    return SpecificityResult(
        distances_sq=dists,
        mean_sq=float(dists.mean()),
        mc_stderr=float(dists.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0,
    )


def mean_shape(pca: PCAModel) -> np.ndarray:
    return pca.mean.reshape(-1, 3)


def mode_walk(pca: PCAModel, mode: int, t_values=(-1.0, 0.0, 1.0)) -> ModeWalk:
    """Mean shape deformed along one mode by t standard deviations."""
    if not 0 <= mode < pca.eigenvalues.shape[0]:
        raise ValueError(f"mode {mode} out of range")
    sigma = np.sqrt(pca.eigenvalues[mode])
    direction = pca.eigenvectors[:, mode]
    positions = [
        (pca.mean + float(t) * sigma * direction).reshape(-1, 3) for t in t_values
    ]
    return ModeWalk(mode_index=mode, t_values=[float(t) for t in t_values],
                    positions=positions)


# ---------------------------------------------------------------------------
# Persistence


def save_pca(pca: PCAModel, path: str | Path) -> None:
    np.savez(
        path,
        format_version=1,
        mean=pca.mean,
        eigenvectors=pca.eigenvectors,
        eigenvalues=pca.eigenvalues,
        n_train=pca.n_train,
    )


def load_pca(path: str | Path) -> PCAModel:
    with np.load(path) as data:
        if int(data["format_version"]) != 1:
            raise ValueError("unsupported PCA container version")
        return PCAModel(
            mean=data["mean"],
            eigenvectors=data["eigenvectors"],
            eigenvalues=data["eigenvalues"],
            n_train=int(data["n_train"]),
        )


def pca_summary(pca: PCAModel, threshold: float = 0.95) -> dict:
    modes, curve = compactness(pca, threshold)
    return {
        "n_train": pca.n_train,
        "n_points": pca.n_points,
        "n_modes": int(pca.eigenvalues.shape[0]),
        "compactness_threshold": threshold,
        "compactness_modes": modes,
        "total_variance": float(pca.eigenvalues.sum()),
        "cumulative_variance": [float(v) for v in curve],
    }


def write_compactness_csv(curve: np.ndarray, path: str | Path) -> None:
    lines = ["mode,cumulative_variance"]
    lines += [f"{i + 1},{float(v)!r}" for i, v in enumerate(curve)]
    Path(path).write_text("\n".join(lines) + "\n")
