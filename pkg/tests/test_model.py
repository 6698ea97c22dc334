import csv

import numpy as np
import pytest
import torch

from cloudssm.model import (
    AutoencoderModel,
    CorrespondenceModel,
    DgcnnEncoder,
    ModelConfig,
    NumericalDivergenceError,
    PointNetEncoder,
    build_model,
    export_correspondence_map,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

TINY = dict(n_input=32, m_output=16, feature_dim=16, graph_k=6, attention_heads=4)


def _cfg(**kw):
    merged = {**TINY, **kw}
    return ModelConfig(**merged)


def _params_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return all(torch.equal(sa[k], sb[k]) for k in sa)


def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(encoder_kind="cnn")
    with pytest.raises(ValueError):
        _cfg(graph_k=32)  # must be < n_input
    with pytest.raises(ValueError):
        _cfg(bottleneck_kind="global", head_kind="attn")
    with pytest.raises(ValueError):
        _cfg(feature_dim=0)
    with pytest.raises(ValueError):
        _cfg(feature_dim=18)  # not divisible by heads


def test_init_deterministic_under_seed():
    a = build_model(_cfg(seed=7))
    b = build_model(_cfg(seed=7))
    assert _params_equal(a, b)
    c = build_model(_cfg(seed=8))
    assert not _params_equal(a, c)


def test_init_bounds_and_zero_biases():
    model = build_model(_cfg(seed=0))
    for name, param in model.named_parameters():
        assert torch.isfinite(param).all()
        if name.endswith("bias"):
            assert torch.all(param == 0)
        elif param.ndim >= 2:
            bound = param.shape[1:].numel() ** -0.5
            assert param.abs().max() <= bound


@pytest.mark.parametrize("encoder", ["dgcnn", "pointnet"])
def test_encoder_output_shape(encoder, rng):
    enc = DgcnnEncoder(16, 6) if encoder == "dgcnn" else PointNetEncoder(16)
    init_params(enc, 0)
    x = torch.as_tensor(rng.normal(size=(2, 40, 3)), dtype=torch.float32)
    assert enc(x).shape == (2, 40, 16)


@pytest.mark.parametrize("encoder", ["dgcnn", "pointnet"])
def test_encoder_permutation_equivariance(encoder, rng):
    enc = DgcnnEncoder(16, 6) if encoder == "dgcnn" else PointNetEncoder(16)
    init_params(enc, 3)
    x = torch.as_tensor(rng.normal(size=(1, 48, 3)), dtype=torch.float32)
    perm = torch.randperm(48)
    with torch.no_grad():
        base = enc(x)[0]
        permuted = enc(x[:, perm])[0]
    assert float((permuted - base[perm]).abs().max()) < 1e-4


def test_dgcnn_duplicate_points_share_features(rng):
    enc = DgcnnEncoder(16, 4)
    init_params(enc, 1)
    pts = rng.normal(size=(20, 3))
    pts[5] = pts[11]  # identical rows
    out = enc(torch.as_tensor(pts, dtype=torch.float32).unsqueeze(0))[0]
    assert torch.allclose(out[5], out[11])


def test_dgcnn_rejects_too_few_points():
    enc = DgcnnEncoder(16, 6)
    with pytest.raises(ValueError):
        enc(torch.zeros(1, 6, 3))


def test_pointnet_single_point(rng):
    enc = PointNetEncoder(16)
    init_params(enc, 0)
    out = enc(torch.as_tensor(rng.normal(size=(1, 1, 3)), dtype=torch.float32))
    assert out.shape == (1, 1, 16)
    assert torch.isfinite(out).all()


@pytest.mark.parametrize("head", ["attn", "mlp"])
def test_head_rows_sum_to_one(head, rng):
    model = build_model(_cfg(head_kind=head, seed=2))
    x = torch.as_tensor(rng.normal(size=(3, 32, 3)), dtype=torch.float32)
    _, amap = model(x)
    assert amap.shape == (3, 16, 32)
    assert float((amap.sum(-1) - 1.0).abs().max()) < 1e-5
    assert torch.all(amap >= 0)


@pytest.mark.parametrize("head", ["attn", "mlp"])
def test_head_single_input_point(head):
    # with one input point every output is that point (convex combination)
    model = build_model(_cfg(encoder_kind="pointnet", head_kind=head, seed=0))
    x = torch.tensor([[[0.3, -0.2, 0.9]]])
    out, amap = model(x)
    assert torch.allclose(out, x.expand(1, 16, 3))
    assert torch.allclose(amap, torch.ones(1, 16, 1))


@pytest.mark.parametrize("head", ["attn", "mlp"])
def test_outputs_inside_input_bbox(head, rng):
    model = build_model(_cfg(head_kind=head, seed=1))
    for _ in range(10):
        x = torch.as_tensor(rng.normal(size=(1, 32, 3)), dtype=torch.float32)
        out, _ = model(x)
        lo = x.amin(dim=1) - 1e-6
        hi = x.amax(dim=1) + 1e-6
        assert torch.all(out >= lo.unsqueeze(1)) and torch.all(out <= hi.unsqueeze(1))


def test_forward_permutation_invariance(rng):
    model = build_model(_cfg(seed=4))
    x = torch.as_tensor(rng.normal(size=(32, 3)), dtype=torch.float32)
    out, amap = model(x)
    perm = torch.randperm(32)
    out_p, amap_p = model(x[perm])
    assert float((out - out_p).abs().max()) < 1e-4
    # map columns permute with the inputs
    assert float((amap[:, perm] - amap_p).abs().max()) < 1e-4


def test_forward_deterministic(rng):
    model = build_model(_cfg(seed=5))
    x = torch.as_tensor(rng.normal(size=(32, 3)), dtype=torch.float32)
    a, _ = model(x)
    b, _ = model(x)
    assert torch.equal(a, b)


def test_output_count_independent_of_input_size(rng):
    model = build_model(_cfg(seed=0))
    for n in (16, 32, 57):
        x = torch.as_tensor(rng.normal(size=(n, 3)), dtype=torch.float32)
        out, amap = model(x)
        assert out.shape == (16, 3)
        assert amap.shape == (16, n)


@pytest.mark.parametrize("encoder", ["pointnet", "dgcnn"])
def test_autoencoder_exact_permutation_invariance(encoder, rng):
    config = _cfg(
        encoder_kind=encoder, head_kind="mlp", bottleneck_kind="global", seed=6
    )
    model = build_model(config)
    x = torch.as_tensor(rng.normal(size=(32, 3)), dtype=torch.float32)
    out, none_map = model(x)
    assert none_map is None
    assert out.shape == (16, 3)
    for _ in range(5):
        perm = torch.randperm(32)
        out_p, _ = model(x[perm])
        assert torch.equal(out, out_p)


def test_autoencoder_distinct_latents(rng):
    model = build_model(
        _cfg(encoder_kind="pointnet", head_kind="mlp", bottleneck_kind="global", seed=0)
    )
    a = torch.as_tensor(rng.normal(size=(1, 32, 3)), dtype=torch.float32)
    b = torch.as_tensor(rng.normal(size=(1, 32, 3)) + 2.0, dtype=torch.float32)
    za, zb = model.encode(a), model.encode(b)
    assert float((za - zb).abs().max()) > 1e-4


def test_non_finite_logits_raise():
    model = build_model(_cfg(encoder_kind="pointnet", seed=0))
    with torch.no_grad():
        model.head.out.weight.fill_(torch.inf)
    with pytest.raises(NumericalDivergenceError):
        model(torch.randn(32, 3))


def test_checkpoint_roundtrip(tmp_path, rng):
    model = build_model(_cfg(seed=9))
    path = tmp_path / "ckpt.pt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert isinstance(back, CorrespondenceModel)
    assert back.config == model.config
    x = torch.as_tensor(rng.normal(size=(32, 3)), dtype=torch.float32)
    out_a, _ = model(x)
    out_b, _ = back(x)
    assert torch.equal(out_a, out_b)


def test_checkpoint_roundtrip_autoencoder(tmp_path):
    model = build_model(
        _cfg(encoder_kind="dgcnn", head_kind="mlp", bottleneck_kind="global", seed=3)
    )
    save_checkpoint(model, tmp_path / "ae.pt")
    assert isinstance(load_checkpoint(tmp_path / "ae.pt"), AutoencoderModel)


def test_checkpoint_version_check(tmp_path):
    model = build_model(_cfg(seed=0))
    path = tmp_path / "ckpt.pt"
    save_checkpoint(model, path)
    payload = torch.load(path, weights_only=True)
    payload["format_version"] = 99
    torch.save(payload, path)
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


def test_export_correspondence_map(tmp_path, rng):
    model = build_model(_cfg(seed=0))
    x = torch.as_tensor(rng.normal(size=(32, 3)), dtype=torch.float32)
    _, amap = model(x)
    path = tmp_path / "map.csv"
    export_correspondence_map(amap, path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 16 * 32
    total = sum(float(r["weight"]) for r in rows if r["output_index"] == "0")
    assert total == pytest.approx(1.0, abs=1e-4)

    export_correspondence_map(amap, path, top_k=4)
    with open(path) as fh:
        assert len(list(csv.DictReader(fh))) == 16 * 4
