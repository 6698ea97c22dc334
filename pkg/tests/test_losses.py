import math

import numpy as np
import pytest
import torch

from cloudssm.losses import (
    LossConfig,
    chamfer_distance,
    correspondence_loss,
    correspondence_loss_terms,
    mapping_error,
    neighbor_graph,
)


def _brute_chamfer(c, s):
    c, s = np.asarray(c), np.asarray(s)
    d2 = ((c[:, None, :] - s[None, :, :]) ** 2).sum(-1)
    return d2.min(axis=1).mean() + d2.min(axis=0).mean()


def _t(x, dtype=torch.float64):
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def test_chamfer_identity(rng):
    x = _t(rng.normal(size=(14, 3)))
    assert float(chamfer_distance(x, x)) == 0.0


def test_chamfer_singletons():
    assert float(chamfer_distance(_t([[0, 0, 0]]), _t([[1, 0, 0]]))) == pytest.approx(2.0)


def test_chamfer_hand_pair():
    c = _t([[0, 0, 0], [2, 0, 0]])
    s = _t([[0, 0, 0], [3, 0, 0]])
    assert float(chamfer_distance(c, s)) == pytest.approx(1.0)


def test_chamfer_matches_bruteforce(rng):
    for _ in range(20):
        c = rng.normal(size=(rng.integers(1, 12), 3))
        s = rng.normal(size=(rng.integers(1, 12), 3))
        assert float(chamfer_distance(_t(c), _t(s))) == pytest.approx(_brute_chamfer(c, s))


def test_chamfer_permutation_invariant(rng):
    c = rng.normal(size=(9, 3))
    s = rng.normal(size=(13, 3))
    base = float(chamfer_distance(_t(c), _t(s)))
    for _ in range(5):
        cp = c[rng.permutation(9)]
        sp = s[rng.permutation(13)]
        assert float(chamfer_distance(_t(cp), _t(sp))) == pytest.approx(base, abs=1e-12)


def test_chamfer_zero_iff_mutually_contained(rng):
    c = rng.normal(size=(6, 3))
    s = np.concatenate([c, c[:2]])
    assert float(chamfer_distance(_t(c), _t(s))) == 0.0
    s2 = np.concatenate([c, [[10.0, 0, 0]]])
    assert float(chamfer_distance(_t(c), _t(s2))) > 0


def test_chamfer_rejects_empty():
    with pytest.raises(ValueError):
        chamfer_distance(torch.zeros((0, 3)), torch.zeros((3, 3)))


def test_mapping_error_hand_value():
    pts = _t([[0, 0, 0], [1, 0, 0]])
    assert float(mapping_error(pts, pts, 1)) == pytest.approx(math.exp(-1))


def test_mapping_error_zero_for_constant_second_set(rng):
    c1 = _t(rng.normal(size=(8, 3)))
    c2 = torch.ones(8, 3, dtype=torch.float64)
    assert float(mapping_error(c1, c2, 3)) == 0.0


def test_mapping_error_reindexing_invariant(rng):
    c1 = rng.normal(size=(10, 3))
    c2 = rng.normal(size=(10, 3))
    base = float(mapping_error(_t(c1), _t(c2), 4))
    perm = rng.permutation(10)
    assert float(mapping_error(_t(c1[perm]), _t(c2[perm]), 4)) == pytest.approx(base)


def test_mapping_error_not_symmetric(rng):
    c1 = _t(rng.normal(size=(10, 3)))
    c2 = _t(rng.normal(size=(10, 3)))
    assert float(mapping_error(c1, c2, 3)) != pytest.approx(float(mapping_error(c2, c1, 3)))


def test_mapping_error_validation(rng):
    c = _t(rng.normal(size=(5, 3)))
    with pytest.raises(ValueError):
        mapping_error(c, _t(rng.normal(size=(6, 3))), 2)
    with pytest.raises(ValueError):
        mapping_error(c, c, 5)


def test_neighbor_graph_weights_bounds(rng):
    pts = _t(rng.normal(size=(20, 3)))
    graph = neighbor_graph(pts, 5)
    assert torch.all(graph.weights > 0) and torch.all(graph.weights <= 1.0)
    # coincident neighbor gives weight exactly 1
    dup = _t(np.array([[0.0, 0, 0], [0.0, 0, 0], [5.0, 0, 0]]))
    g2 = neighbor_graph(dup, 1)
    assert float(g2.weights[0, 0]) == 1.0
    assert g2.indices[0, 0] == 1  # lowest tied index


def test_loss_alpha_zero_is_mean_chamfer(rng):
    outputs = [_t(rng.normal(size=(8, 3))) for _ in range(3)]
    fulls = [_t(rng.normal(size=(11, 3))) for _ in range(3)]
    loss = correspondence_loss(outputs, fulls, LossConfig(alpha=0.0, k_neighbors=3))
    expected = np.mean([_brute_chamfer(o.numpy(), f.numpy()) for o, f in zip(outputs, fulls)])
    assert float(loss) == pytest.approx(expected)


def test_loss_single_element_batch(rng):
    out = _t(rng.normal(size=(8, 3)))
    full = _t(rng.normal(size=(10, 3)))
    loss = correspondence_loss([out], [full], LossConfig(alpha=0.1, k_neighbors=3))
    assert float(loss) == pytest.approx(_brute_chamfer(out.numpy(), full.numpy()))


def test_loss_composes_cd_and_me(rng):
    # B=2: hand-compose the two oracle terms
    outputs = [_t(rng.normal(size=(6, 3))) for _ in range(2)]
    fulls = [_t(rng.normal(size=(9, 3))) for _ in range(2)]
    config = LossConfig(alpha=0.1, k_neighbors=2)
    cd = np.mean([_brute_chamfer(o.numpy(), f.numpy()) for o, f in zip(outputs, fulls)])
    me = 2 * (
        float(mapping_error(outputs[0], outputs[1], 2))
        + float(mapping_error(outputs[1], outputs[0], 2))
    )
    expected = cd + 0.1 * me / (2 - 1) ** 2
    assert float(correspondence_loss(outputs, fulls, config)) == pytest.approx(expected)


def test_loss_rejects_empty_batch():
    with pytest.raises(ValueError):
        correspondence_loss([], [], LossConfig())


def test_loss_terms_nonnegative(rng):
    outputs = [_t(rng.normal(size=(7, 3))) for _ in range(3)]
    fulls = [_t(rng.normal(size=(7, 3))) for _ in range(3)]
    cd, me = correspondence_loss_terms(outputs, fulls, LossConfig(alpha=0.1, k_neighbors=3))
    assert float(cd) >= 0 and float(me) >= 0


# ---------------------------------------------------------------------------
# gradient checks against central finite differences


def _fd_gradient(fn, x, step=1e-5):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += step
        xm = x.copy()
        xm[idx] -= step
        grad[idx] = (fn(xp) - fn(xm)) / (2 * step)
    return grad


def _check_grad(fn, x, rel_tol=1e-4):
    xt = _t(x).requires_grad_(True)
    fn(xt).backward()
    analytic = xt.grad.numpy()
    numeric = _fd_gradient(lambda a: float(fn(_t(a))), x)
    scale = max(np.abs(numeric).max(), 1e-12)
    assert np.abs(analytic - numeric).max() / scale < rel_tol


def test_chamfer_gradient_wrt_first_arg(rng):
    s = _t(rng.normal(size=(9, 3)))
    _check_grad(lambda c: chamfer_distance(c, s), rng.normal(size=(7, 3)))


def test_chamfer_gradient_wrt_second_arg(rng):
    c = _t(rng.normal(size=(7, 3)))
    _check_grad(lambda s: chamfer_distance(c, s), rng.normal(size=(9, 3)))


def test_mapping_error_gradient_wrt_second_set(rng):
    c1 = _t(rng.normal(size=(8, 3)))
    _check_grad(lambda c2: mapping_error(c1, c2, 3), rng.normal(size=(8, 3)))


def test_mapping_error_gradient_wrt_first_set(rng):
    # gradient through the proximity weights (neighbor choice is fixed)
    c2 = _t(rng.normal(size=(8, 3)))
    _check_grad(lambda c1: mapping_error(c1, c2, 3), rng.normal(size=(8, 3)))
