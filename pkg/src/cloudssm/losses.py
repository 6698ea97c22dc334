"""Differentiable training objective: Chamfer reconstruction + neighborhood
consistency regularization over all output pairs in a batch.

All functions accept (n, 3) float tensors and follow the input dtype, so the
same code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch


@dataclass
class LossConfig:
    alpha: float = 0.1       # weight of the neighborhood-consistency term
    k_neighbors: int = 10    # neighborhood size for that term

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")


class NeighborGraph(NamedTuple):
    """k nearest neighbors within one point set, self-excluded.

    ``weights[i, j] = exp(-||p_i - p_nb||^2)`` measures neighbor proximity;
    a weight of 1 means a coincident neighbor.
    """

    indices: torch.Tensor  # (m, k) long
    weights: torch.Tensor  # (m, k), in (0, 1]


def _pairwise_sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # exact (difference) form: accurate near zero and differentiable a.e.
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def chamfer_distance(c: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Symmetric mean-of-min squared distances between two point sets.

    The sets may differ in size.  Nearest-neighbor ties resolve to the lowest
    index (torch.min), which fixes the subgradient at tie points.
    """
    if c.ndim != 2 or c.shape[-1] != 3 or s.ndim != 2 or s.shape[-1] != 3:
        raise ValueError("expected (n, 3) point sets")
    if c.shape[0] == 0 or s.shape[0] == 0:
        raise ValueError("chamfer distance of an empty set is undefined")
    d2 = _pairwise_sq_dists(c, s)
    return d2.min(dim=1).values.mean() + d2.min(dim=0).values.mean()


def neighbor_graph(points: torch.Tensor, k: int) -> NeighborGraph:
    """Self-excluded kNN graph with proximity weights, ties to lowest index."""
    m = points.shape[0]
    if not 1 <= k < m:
        raise ValueError(f"k={k} out of range for {m} points")
    d2 = _pairwise_sq_dists(points, points)
    masked = d2 + torch.diag(
        torch.full((m,), torch.inf, dtype=points.dtype, device=points.device)
    )
    # stable sort keeps the lowest index first among tied distances
    order = masked.argsort(dim=1, stable=True)[:, :k]
    weights = torch.exp(-d2.gather(1, order))
    return NeighborGraph(indices=order, weights=weights)


def mapping_error(
    c_prime: torch.Tensor, c_dblprime: torch.Tensor, k: int
) -> torch.Tensor:
    """Neighborhood-consistency error between two ordered point sets.

    Neighborhoods and proximity weights come from ``c_prime``; the penalized
    squared distances are measured in ``c_dblprime``.  Not symmetric in its
    arguments.  Differentiable w.r.t. ``c_dblprime`` (and w.r.t. ``c_prime``
    through the weights; the discrete neighbor selection carries no gradient).
    """
    if c_prime.shape != c_dblprime.shape:
        raise ValueError("point sets must have identical shape (m, 3)")
    m = c_prime.shape[0]
    graph = neighbor_graph(c_prime, k)
    nb = c_dblprime[graph.indices]                      # (m, k, 3)
    sq = ((c_dblprime[:, None, :] - nb) ** 2).sum(-1)   # (m, k)
    return (graph.weights * sq).sum() / (m * k)


def correspondence_loss_terms(
    outputs: Sequence[torch.Tensor],
    fulls: Sequence[torch.Tensor],
    config: LossConfig,
) -> tuple[torch.Tensor, torch.Tensor]:
    """The two batch-objective terms, before the alpha weighting.

    Returns (mean Chamfer term, normalized pairwise consistency term).  The
    pairwise term sums ME(i, j) + ME(j, i) over all ordered pairs and is
    scaled by 1/(B-1)^2; the double counting is deliberate and absorbed by
    alpha.  With B == 1 there are no pairs and the term is zero.
    """
    b = len(outputs)
    if b == 0:
        raise ValueError("empty batch")
    if len(fulls) != b:
        raise ValueError("outputs and fulls must pair up")
    cd_term = sum(chamfer_distance(c, s) for c, s in zip(outputs, fulls)) / b
    me_term = outputs[0].new_zeros(())
    if config.alpha > 0 and b > 1:
        for i in range(b):
            for j in range(b):
                if i == j:
                    continue
                me_term = me_term + mapping_error(
                    outputs[i], outputs[j], config.k_neighbors
                )
                me_term = me_term + mapping_error(
                    outputs[j], outputs[i], config.k_neighbors
                )
        me_term = me_term / (b - 1) ** 2
    return cd_term, me_term


def correspondence_loss(
    outputs: Sequence[torch.Tensor],
    fulls: Sequence[torch.Tensor],
    config: LossConfig,
) -> torch.Tensor:
    """Batch objective: mean Chamfer term plus alpha-weighted consistency."""
    cd_term, me_term = correspondence_loss_terms(outputs, fulls, config)
    return cd_term + config.alpha * me_term
