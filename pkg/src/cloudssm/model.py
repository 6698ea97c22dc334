"""Correspondence network and autoencoder baselines.

The correspondence model maps an unordered (B, N, 3) input to M ordered
output points via a row-stochastic M x N map, so every output point is a
convex combination of input points.  The autoencoder variants pool features
to a global bottleneck and decode a fixed-order (M, 3) output instead.

No cross-point normalization layers are used anywhere: per-point ops plus
set-max/attention keep the encoders exactly permutation-equivariant and the
autoencoders exactly permutation-invariant.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

ENCODER_KINDS = ("dgcnn", "pointnet")
HEAD_KINDS = ("attn", "mlp")
BOTTLENECK_KINDS = ("per_point", "global")

CHECKPOINT_VERSION = 1
INIT_SCHEME = "fan_in_uniform"


class NumericalDivergenceError(RuntimeError):
    """Raised when a forward pass produces non-finite values."""


@dataclass
class ModelConfig:
    encoder_kind: str = "dgcnn"
    head_kind: str = "attn"
    bottleneck_kind: str = "per_point"
    n_input: int = 1024
    m_output: int = 1024
    feature_dim: int = 128
    graph_k: int = 20
    sfa_blocks: int = 2
    attention_heads: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.encoder_kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder_kind {self.encoder_kind!r}")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"unknown head_kind {self.head_kind!r}")
        if self.bottleneck_kind not in BOTTLENECK_KINDS:
            raise ValueError(f"unknown bottleneck_kind {self.bottleneck_kind!r}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.n_input < 1 or self.m_output < 1:
            raise ValueError("n_input and m_output must be >= 1")
        if self.encoder_kind == "dgcnn" and self.graph_k >= self.n_input:
            raise ValueError("graph_k must be < n_input for the dgcnn encoder")
        if self.bottleneck_kind == "global" and self.head_kind != "mlp":
            raise ValueError("global bottleneck pairs with the mlp decoder only")
        if self.feature_dim % self.attention_heads != 0:
            raise ValueError("feature_dim must be divisible by attention_heads")


def _pairwise_sq_dists_bnn(x: torch.Tensor) -> torch.Tensor:
    # (B, N, C) -> (B, N, N); mm form, entry-wise independent of row order
    sq = (x * x).sum(-1)
    d2 = sq.unsqueeze(2) + sq.unsqueeze(1) - 2.0 * (x @ x.transpose(1, 2))
    return d2.clamp_min_(0.0)


def _graph_features(x: torch.Tensor, k: int) -> torch.Tensor:
    """Edge features (neighbor - center, center): (B, N, k, 2C).

    kNN is recomputed on the current features (dynamic graph); the point
    itself counts as a neighbor (self-exclusion off).
    """
    b, n, c = x.shape
    if n <= k:
        raise ValueError(f"need more than graph_k={k} points, got {n}")
    with torch.no_grad():
        idx = _pairwise_sq_dists_bnn(x).topk(k, largest=False).indices  # (B, N, k)
    flat = x.reshape(b * n, c)
    offsets = (torch.arange(b, device=x.device) * n).view(b, 1, 1)
    neighbors = flat[(idx + offsets).reshape(-1)].view(b, n, k, c)
    center = x.unsqueeze(2).expand(b, n, k, c)
    return torch.cat([neighbors - center, center], dim=-1)


class EdgeConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int):
        super().__init__()
        self.k = k
        self.lin = nn.Linear(2 * c_in, c_out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = nn.functional.leaky_relu(self.lin(_graph_features(x, self.k)), 0.2)
        return f.amax(dim=2)


class DgcnnEncoder(nn.Module):
    """Stacked edge convolutions over a dynamically recomputed kNN graph."""

    def __init__(self, feature_dim: int, graph_k: int):
        super().__init__()
        self.conv1 = EdgeConv(3, 64, graph_k)
        self.conv2 = EdgeConv(64, 64, graph_k)
        self.conv3 = EdgeConv(64, 128, graph_k)
        self.project = nn.Linear(64 + 64 + 128, feature_dim)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        x1 = self.conv1(points)
        x2 = self.conv2(x1)
        x3 = self.conv3(x2)
        return self.project(torch.cat([x1, x2, x3], dim=-1))


class PointNetEncoder(nn.Module):
    """Shared per-point MLP; per-point output is local + max-pooled global."""

    def __init__(self, feature_dim: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(3, 64), nn.LeakyReLU(0.2),
            nn.Linear(64, 128), nn.LeakyReLU(0.2),
            nn.Linear(128, 256), nn.LeakyReLU(0.2),
        )
        self.project = nn.Linear(512, feature_dim)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        local = self.mlp(points)                              # (B, N, 256)
        global_feat = local.amax(dim=1, keepdim=True)         # (B, 1, 256)
        fused = torch.cat(
            [local, global_feat.expand_as(local)], dim=-1
        )
        return self.project(fused)


class SelfAttentionBlock(nn.Module):
    """Multi-head self-attention with residual feed-forward, no enc-dec."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        attn_out, _ = self.attn(x, x, x, need_weights=False)
        x = self.norm1(x + attn_out)
        return self.norm2(x + self.ff(x))


def _map_from_logits(
    logits: torch.Tensor, points: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    # logits: (B, N, M) -> row-stochastic (B, M, N) map; outputs = map @ points
    if not torch.isfinite(logits).all():
        raise NumericalDivergenceError("non-finite correspondence logits")
    corr_map = torch.softmax(logits.transpose(1, 2), dim=-1)
    return corr_map @ points, corr_map


class AttentionHead(nn.Module):
    """Self-attention blocks refining features, then per-point M-way logits."""

    def __init__(self, feature_dim: int, m_output: int, blocks: int, heads: int):
        super().__init__()
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(feature_dim, heads) for _ in range(blocks)
        )
        self.out = nn.Linear(feature_dim, m_output)

    def forward(
        self, features: torch.Tensor, points: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        x = features
        for block in self.blocks:
            x = block(x)
        return _map_from_logits(self.out(x), points)


class MlpHead(nn.Module):
    """Three shared per-point blocks, then the same M-way logit projection."""

    def __init__(self, feature_dim: int, m_output: int):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(feature_dim, feature_dim), nn.LeakyReLU(0.2),
            nn.Linear(feature_dim, feature_dim), nn.LeakyReLU(0.2),
            nn.Linear(feature_dim, feature_dim), nn.LeakyReLU(0.2),
        )
        self.out = nn.Linear(feature_dim, m_output)

    def forward(
        self, features: torch.Tensor, points: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        return _map_from_logits(self.out(self.mlp(features)), points)


def _build_encoder(config: ModelConfig) -> nn.Module:
    if config.encoder_kind == "dgcnn":
        return DgcnnEncoder(config.feature_dim, config.graph_k)
    return PointNetEncoder(config.feature_dim)


class CorrespondenceModel(nn.Module):
    """Per-point encoder plus correspondence-map head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.bottleneck_kind != "per_point":
            raise ValueError("CorrespondenceModel requires per_point bottleneck")
        self.config = config
        self.encoder = _build_encoder(config)
        if config.head_kind == "attn":
            self.head = AttentionHead(
                config.feature_dim,
                config.m_output,
                config.sfa_blocks,
                config.attention_heads,
            )
        else:
            self.head = MlpHead(config.feature_dim, config.m_output)

    def forward(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        single = points.ndim == 2
        if single:
            points = points.unsqueeze(0)
        out, corr_map = self.head(self.encoder(points), points)
        if single:
            return out.squeeze(0), corr_map.squeeze(0)
        return out, corr_map


class AutoencoderModel(nn.Module):
    """Global-bottleneck baseline: encoder max-pool + MLP decoder.

    The decoder's fixed weights give a consistent output ordering, so
    correspondence arises as a by-product; output is permutation-invariant.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.bottleneck_kind != "global":
            raise ValueError("AutoencoderModel requires global bottleneck")
        self.config = config
        self.encoder = _build_encoder(config)
        hidden = max(256, config.feature_dim)
        self.decoder = nn.Sequential(
            nn.Linear(config.feature_dim, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, 2 * hidden), nn.LeakyReLU(0.2),
            nn.Linear(2 * hidden, 3 * config.m_output),
        )

    def encode(self, points: torch.Tensor) -> torch.Tensor:
        return self.encoder(points).amax(dim=-2)

    def forward(self, points: torch.Tensor) -> tuple[torch.Tensor, None]:
        single = points.ndim == 2
        if single:
            points = points.unsqueeze(0)
        flat = self.decoder(self.encode(points))
        if not torch.isfinite(flat).all():
            raise NumericalDivergenceError("non-finite decoder output")
        out = flat.view(-1, self.config.m_output, 3)
        if single:
            return out.squeeze(0), None
        return out, None


def init_params(model: nn.Module, seed: int) -> None:
    """Deterministic re-initialization: fan-in-scaled uniform weights, zero
    biases, unit norm gains; bit-identical under a fixed seed."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            elif param.ndim >= 2:
                fan_in = param.shape[1:].numel()
                bound = fan_in ** -0.5
                values = torch.empty(
                    param.shape, dtype=torch.float64
                ).uniform_(-bound, bound, generator=gen)
                param.copy_(values.to(param.dtype))
            else:
                param.fill_(1.0)  # norm gains


def build_model(config: ModelConfig) -> nn.Module:
    if config.bottleneck_kind == "global":
        model = AutoencoderModel(config)
    else:
        model = CorrespondenceModel(config)
    init_params(model, config.seed)
    return model


# ---------------------------------------------------------------------------
# Checkpoints and correspondence-map export


def save_checkpoint(model: nn.Module, path: str | Path) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "model_config": json.dumps(asdict(model.config)),
            "init_scheme": INIT_SCHEME,
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path: str | Path) -> nn.Module:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    config = ModelConfig(**json.loads(payload["model_config"]))
    if config.bottleneck_kind == "global":
        model: nn.Module = AutoencoderModel(config)
    else:
        model = CorrespondenceModel(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def export_correspondence_map(
    corr_map: torch.Tensor, path: str | Path, top_k: int | None = None
) -> None:
    """Write map weights as CSV rows (output_index, input_index, weight).

    ``top_k`` keeps only the strongest inputs per output point; weights are
    written linearly (use a log scale for display).
    """
    weights = corr_map.detach().cpu()
    if weights.ndim != 2:
        raise ValueError("expected a single (M, N) correspondence map")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["output_index", "input_index", "weight"])
        for i in range(weights.shape[0]):
            row = weights[i]
            if top_k is not None and top_k < row.shape[0]:
                vals, idx = row.topk(top_k)
            else:
                vals, idx = row, torch.arange(row.shape[0])
            for j, w in zip(idx.tolist(), vals.tolist()):
                writer.writerow([i, j, w])
