"""Point-set primitives: distances, neighbor search, sampling, set distances.

Every function accepts either a single cloud of shape ``(N, 3)`` or, where
noted, a batch ``(B, N, 3)``.  NumPy inputs are converted to float64 tensors;
tensor inputs keep their dtype so gradients flow through the differentiable
operations (:func:`pairwise_sq_dist`, :func:`chamfer`).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .errors import InvalidInputError


class NeighborIndex(NamedTuple):
    indices: torch.Tensor  # (..., N, k) int64, self excluded
    distances: torch.Tensor  # (..., N, k) Euclidean, ascending per row


def as_points(x, name="cloud") -> torch.Tensor:
    """Validate and convert ``x`` to a float tensor of shape (..., N, 3)."""
    if not torch.is_tensor(x):
        x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    elif not x.is_floating_point():
        x = x.double()
    if x.dim() < 2 or x.shape[-1] != 3:
        raise InvalidInputError(f"{name} must have shape (..., N, 3), got {tuple(x.shape)}")
    if x.shape[-2] < 1:
        raise InvalidInputError(f"{name} is empty")
    if not bool(torch.isfinite(x).all()):
        raise InvalidInputError(f"{name} contains non-finite coordinates")
    return x


def pairwise_sq_dist(a, b) -> torch.Tensor:
    """Squared Euclidean distances between every point of ``a`` and of ``b``.

    Computed from explicit differences rather than the ``|a|^2 + |b|^2 - 2ab``
    expansion so identical points give exactly zero.
    """
    a = as_points(a, "a")
    b = as_points(b, "b")
    diff = a.unsqueeze(-2) - b.unsqueeze(-3)
    return (diff * diff).sum(-1)


def knn(cloud, k: int) -> NeighborIndex:
    """Exact k-nearest neighbors of each point, excluding the point itself.

    Ties are broken by the lower point index.
    """
    cloud = as_points(cloud)
    n = cloud.shape[-2]
    if not 1 <= k <= n - 1:
        raise InvalidInputError(f"knn needs 1 <= k <= N-1 (N={n}, k={k})")
    with torch.no_grad():
        d2 = pairwise_sq_dist(cloud, cloud)
        eye = torch.eye(n, dtype=torch.bool, device=d2.device)
        d2 = d2.masked_fill(eye, float("inf"))
        m = min(k + 1, n)
        _, idx = torch.topk(d2, m, dim=-1, largest=False)
        idx = idx.sort(-1).values
        sq = torch.gather(d2, -1, idx)
        sq, order = torch.sort(sq, dim=-1, stable=True)
        idx = torch.gather(idx, -1, order)
        if m > k and bool((sq[..., k - 1] == sq[..., k]).any()):
            # a tie straddles the cut; topk may have dropped a lower index
            sq, idx = torch.sort(d2, dim=-1, stable=True)
    return NeighborIndex(idx[..., :k], sq[..., :k].sqrt())


def gather_points(cloud: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``out[..., i, j, :] = cloud[..., idx[..., i, j], :]`` for a (…, N, k) index."""
    flat = idx.reshape(*idx.shape[:-2], -1)
    picked = torch.gather(cloud, -2, flat.unsqueeze(-1).expand(*flat.shape, 3))
    return picked.reshape(*idx.shape, 3)


def chamfer(a, b) -> torch.Tensor:
    """Symmetric Chamfer distance with squared terms and per-direction means.

    Broadcasts over leading batch dimensions; returns a tensor (0-dim for
    single clouds) that carries gradients when the inputs do.
    """
    d2 = pairwise_sq_dist(a, b)
    return d2.min(-1).values.mean(-1) + d2.min(-2).values.mean(-1)


def emd(a, b) -> float:
    """Exact Earth Mover's Distance between equal-size clouds.

    Mean unsquared Euclidean cost of the optimal bijection, solved as a
    linear assignment problem.
    """
    a = as_points(a, "a")
    b = as_points(b, "b")
    if a.dim() != 2 or b.dim() != 2:
        raise InvalidInputError("emd takes single clouds, not batches")
    if a.shape[0] != b.shape[0]:
        raise InvalidInputError(f"emd needs equal sizes, got {a.shape[0]} and {b.shape[0]}")
    cost = pairwise_sq_dist(a.detach(), b.detach()).double().sqrt().cpu().numpy()
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / a.shape[0])


def farthest_point_sample(cloud, m: int, seed_index: int = 0) -> torch.Tensor:
    """Greedy max-min selection of ``m`` indices starting at ``seed_index``.

    Accepts a batch; ties go to the lower index.
    """
    cloud = as_points(cloud)
    n = cloud.shape[-2]
    if not 1 <= m <= n:
        raise InvalidInputError(f"farthest_point_sample needs 1 <= m <= N (N={n}, m={m})")
    if not 0 <= seed_index < n:
        raise InvalidInputError(f"seed_index {seed_index} out of range")
    pts = cloud.detach()
    batch = pts.shape[:-2]
    chosen = torch.empty(*batch, m, dtype=torch.long)
    chosen[..., 0] = seed_index
    current = torch.full(batch, seed_index, dtype=torch.long)
    mindist = torch.full((*batch, n), float("inf"), dtype=pts.dtype)
    for i in range(1, m):
        last = torch.gather(pts, -2, current[..., None, None].expand(*batch, 1, 3))
        d = ((pts - last) ** 2).sum(-1)
        mindist = torch.minimum(mindist, d)
        current = mindist.argmax(-1)
        chosen[..., i] = current
    return chosen


def ball_query(cloud, center, radius: float) -> torch.Tensor:
    """Sorted indices of points within ``radius`` (inclusive) of ``center``."""
    cloud = as_points(cloud)
    if radius <= 0:
        raise InvalidInputError("radius must be positive")
    center = torch.as_tensor(np.asarray(center, dtype=np.float64) if not torch.is_tensor(center) else center)
    d2 = ((cloud.detach().double() - center.double()) ** 2).sum(-1)
    return torch.nonzero(d2 <= radius * radius).flatten()
