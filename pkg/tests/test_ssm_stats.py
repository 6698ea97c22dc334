import numpy as np
import pytest
from scipy.integrate import quad

from cloudssm.ssm_stats import (
    compactness,
    fit_pca,
    generalization,
    load_pca,
    mean_shape,
    mode_walk,
    pca_summary,
    save_pca,
    specificity,
    write_compactness_csv,
)

M = 12  # points per correspondence set in these tests


def _rank_k_cohort(rng, n, k, scale=1.0):
    """mean + coefficients on k fixed orthonormal directions in 3M space."""
    mean = rng.normal(size=3 * M)
    basis = np.linalg.qr(rng.normal(size=(3 * M, k)))[0]
    coeffs = rng.normal(size=(n, k)) * scale
    flat = mean + coeffs @ basis.T
    return flat.reshape(n, M, 3), mean, basis


def test_identical_sets_give_zero_variance(rng):
    shape = rng.normal(size=(M, 3))
    pca = fit_pca([shape, shape.copy()])
    assert pca.eigenvalues.shape == (0,)
    np.testing.assert_allclose(mean_shape(pca), shape)
    assert compactness(pca)[0] == 0


def test_rank2_cohort_recovers_subspace(rng):
    sets, _, basis = _rank_k_cohort(rng, 20, 2)
    pca = fit_pca(sets)
    assert pca.eigenvalues.shape == (2,)
    # principal angles between recovered and generating subspace ~ 0
    overlap = np.linalg.svd(pca.eigenvectors.T @ basis, compute_uv=False)
    assert np.abs(overlap - 1.0).max() < 1e-6


def test_total_variance_equals_trace(rng):
    sets = rng.normal(size=(9, M, 3))
    pca = fit_pca(sets)
    flat = sets.reshape(9, -1)
    cov_trace = np.trace(np.cov(flat.T, ddof=1))
    assert pca.eigenvalues.sum() == pytest.approx(cov_trace, rel=1e-8)


def test_eigenvectors_orthonormal_and_sorted(rng):
    sets = rng.normal(size=(8, M, 3))
    pca = fit_pca(sets)
    gram = pca.eigenvectors.T @ pca.eigenvectors
    assert np.abs(gram - np.eye(gram.shape[0])).max() < 1e-8
    assert np.all(np.diff(pca.eigenvalues) <= 1e-12)


def test_gram_and_covariance_routes_agree(rng):
    # n > 3M forces the covariance route; subsample forces the Gram route
    sets = rng.normal(size=(3 * M + 5, M, 3))
    direct = fit_pca(sets)
    gram = fit_pca(sets[: M])
    assert direct.eigenvalues.shape[0] == 3 * M  # full rank either way
    assert gram.eigenvalues.shape[0] == M - 1


def test_mismatched_point_count_rejected(rng):
    with pytest.raises(ValueError):
        fit_pca([rng.normal(size=(M, 3)), rng.normal(size=(M + 1, 3))])
    with pytest.raises(ValueError):
        fit_pca([rng.normal(size=(M, 3))])


def test_compactness_rank2():
    rng = np.random.default_rng(0)
    sets, _, _ = _rank_k_cohort(rng, 15, 2)
    assert compactness(fit_pca(sets), 0.95)[0] == 2


def test_compactness_dominant_mode(rng):
    sets, mean, basis = _rank_k_cohort(rng, 40, 2)
    flat = sets.reshape(40, -1)
    # inflate the first direction so it carries > 96% of variance
    coeffs = (flat - mean) @ basis
    coeffs[:, 0] *= 40.0
    sets = (mean + coeffs @ basis.T).reshape(40, M, 3)
    pca = fit_pca(sets)
    assert pca.eigenvalues[0] / pca.eigenvalues.sum() > 0.96
    assert compactness(pca, 0.95)[0] == 1


def test_compactness_equal_eigenvalues():
    # 20 equal modes: at 95% you need 19 of them
    rng = np.random.default_rng(3)
    basis = np.linalg.qr(rng.normal(size=(3 * M, 20)))[0]
    coeffs = np.kron(np.eye(20), [1.0, -1.0]).T  # 40 samples, equal variances
    sets = (coeffs @ basis.T).reshape(40, M, 3)
    pca = fit_pca(sets)
    np.testing.assert_allclose(pca.eigenvalues, pca.eigenvalues[0])
    assert pca.eigenvalues.shape == (20,)
    assert compactness(pca, 0.95)[0] == 19


def test_compactness_monotone_in_threshold(rng):
    sets = rng.normal(size=(10, M, 3))
    pca = fit_pca(sets)
    counts = [compactness(pca, t)[0] for t in (0.5, 0.8, 0.9, 0.95, 0.99)]
    assert counts == sorted(counts)


def test_generalization_in_span_is_zero(rng):
    sets, mean, basis = _rank_k_cohort(rng, 20, 3)
    test = (mean + np.array([[0.3, -1.0, 0.2]]) @ basis.T).reshape(1, M, 3)
    result = generalization(fit_pca(sets), test, 0.95)
    assert result.mean_sq < 1e-8


def test_generalization_orthogonal_unit_residual(rng):
    sets, mean, basis = _rank_k_cohort(rng, 25, 2)
    pca = fit_pca(sets)
    # residual direction orthogonal to the retained modes
    v = rng.normal(size=3 * M)
    v -= pca.eigenvectors @ (pca.eigenvectors.T @ v)
    v /= np.linalg.norm(v)
    test = (pca.mean + v).reshape(1, M, 3)
    result = generalization(pca, test, 0.95)
    assert result.mean_sq == pytest.approx(1.0, rel=1e-9)


def test_generalization_matches_lstsq(rng):
    sets, _, _ = _rank_k_cohort(rng, 12, 3)
    pca = fit_pca(sets)
    held_out = rng.normal(size=(1, M, 3))
    k = pca.retained_count(0.95)
    basis = pca.eigenvectors[:, :k]
    coeff, *_ = np.linalg.lstsq(basis, (held_out.reshape(-1) - pca.mean), rcond=None)
    recon = pca.mean + basis @ coeff
    expected = float(((held_out.reshape(-1) - recon) ** 2).sum())
    result = generalization(pca, held_out, 0.95)
    assert result.mean_sq == pytest.approx(expected, rel=1e-9)


def test_specificity_degenerate_model(rng):
    shape = rng.normal(size=(M, 3))
    pca = fit_pca([shape, shape.copy()])
    result = specificity(pca, [shape, shape.copy()], n_samples=10, rng=rng)
    assert result.mean_sq == pytest.approx(0.0, abs=1e-18)


def test_specificity_one_mode_matches_quadrature(rng):
    # single retained mode: E[min_i (sqrt(l) z - a_i)^2] via 1-D quadrature
    mean = np.zeros(3 * M)
    direction = np.zeros(3 * M)
    direction[0] = 1.0
    coefficients = np.array([-2.0, -0.5, 1.0, 2.5])
    sets = (mean + coefficients[:, None] * direction).reshape(4, M, 3)
    pca = fit_pca(sets)
    assert pca.eigenvalues.shape == (1,)
    sigma = np.sqrt(pca.eigenvalues[0])

    def integrand(z):
        min_d = np.min((sigma * z - coefficients) ** 2)
        return min_d * np.exp(-z * z / 2) / np.sqrt(2 * np.pi)

    analytic, _ = quad(integrand, -8, 8, limit=200)
    result = specificity(pca, sets, n_samples=100_000, rng=np.random.default_rng(5))
    assert result.mean_sq == pytest.approx(analytic, rel=0.02)
    assert abs(result.mean_sq - analytic) < 5 * result.mc_stderr


def test_specificity_reproducible(rng):
    sets, _, _ = _rank_k_cohort(rng, 10, 2)
    pca = fit_pca(sets)
    a = specificity(pca, sets, n_samples=50, rng=np.random.default_rng(7))
    b = specificity(pca, sets, n_samples=50, rng=np.random.default_rng(7))
    np.testing.assert_array_equal(a.distances_sq, b.distances_sq)


def test_mode_walk_centered_at_mean(rng):
    sets, _, _ = _rank_k_cohort(rng, 10, 2)
    pca = fit_pca(sets)
    walk = mode_walk(pca, 0, (-1.0, 0.0, 1.0))
    np.testing.assert_array_equal(walk.positions[1], mean_shape(pca))
    # symmetric about the mean
    np.testing.assert_allclose(
        walk.positions[0] + walk.positions[2], 2 * mean_shape(pca), atol=1e-12
    )


def test_mode_walk_recovers_generator(rng):
    # rank-1 cohort: walking mode 0 moves along the generating direction
    mean = rng.normal(size=3 * M)
    direction = rng.normal(size=3 * M)
    direction /= np.linalg.norm(direction)
    coeffs = rng.normal(size=(10, 1)) * 2.0
    sets = (mean + coeffs * direction).reshape(10, M, 3)
    pca = fit_pca(sets)
    walk = mode_walk(pca, 0, (0.0, 1.0))
    step = (walk.positions[1] - walk.positions[0]).reshape(-1)
    cosine = abs(step @ direction) / np.linalg.norm(step)
    assert cosine > 0.999


def test_mode_walk_out_of_range(rng):
    sets, _, _ = _rank_k_cohort(rng, 8, 2)
    with pytest.raises(ValueError):
        mode_walk(fit_pca(sets), 5)


def test_metrics_invariant_to_consistent_relabeling(rng):
    # permuting point indices identically in every set leaves metrics unchanged
    sets, _, _ = _rank_k_cohort(rng, 14, 3)
    test_sets = sets[10:]
    train_sets = sets[:10]
    perm = rng.permutation(M)
    pca_a = fit_pca(train_sets)
    pca_b = fit_pca(train_sets[:, perm])
    assert compactness(pca_a)[0] == compactness(pca_b)[0]
    np.testing.assert_allclose(pca_a.eigenvalues, pca_b.eigenvalues, rtol=1e-9)
    gen_a = generalization(pca_a, test_sets)
    gen_b = generalization(pca_b, test_sets[:, perm])
    assert gen_a.mean_sq == pytest.approx(gen_b.mean_sq, rel=1e-9)
    spec_a = specificity(pca_a, train_sets, 64, rng=np.random.default_rng(1))
    spec_b = specificity(pca_b, train_sets[:, perm], 64, rng=np.random.default_rng(1))
    assert spec_a.mean_sq == pytest.approx(spec_b.mean_sq, rel=1e-9)


def test_pca_persistence_roundtrip(tmp_path, rng):
    sets, _, _ = _rank_k_cohort(rng, 10, 2)
    pca = fit_pca(sets)
    save_pca(pca, tmp_path / "pca.npz")
    back = load_pca(tmp_path / "pca.npz")
    np.testing.assert_array_equal(back.mean, pca.mean)
    np.testing.assert_array_equal(back.eigenvalues, pca.eigenvalues)
    np.testing.assert_array_equal(back.eigenvectors, pca.eigenvectors)
    assert back.n_train == pca.n_train
    summary = pca_summary(pca)
    assert summary["n_modes"] == 2

    write_compactness_csv(compactness(pca)[1], tmp_path / "curve.csv")
    lines = (tmp_path / "curve.csv").read_text().splitlines()
    assert lines[0] == "mode,cumulative_variance"
    assert len(lines) == 3
