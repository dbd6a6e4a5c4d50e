"""Training objectives for the generator and the critic.

The generator minimizes

    L = L_dis + lambda1 * L_obj + lambda2 * L_out + lambda3 * L_UL

where ``L_dis`` is the Wasserstein term plus the auxiliary-classifier
cross-entropy, ``L_obj`` pushes the frozen victim toward a wrong label,
``L_out`` penalizes stray points and ``L_UL`` rewards even point spacing.
The gradient penalty lives in the critic objective only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import torch
import torch.nn.functional as F

from . import geometry
from .errors import InvalidConfigError, InvalidInputError

MODES = ("targeted", "untargeted")


@dataclass
class LossWeights:
    lambda1: float = 0.01
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda_gp: float = 10.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda_gp"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise InvalidConfigError(f"{name} must be finite and >= 0, got {v}")
            setattr(self, name, v)


@dataclass
class AttackConfig:
    mode: str = "untargeted"
    target_label: Optional[int] = None
    weights: LossWeights = field(default_factory=LossWeights)
    mask_successful: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "targeted" and self.target_label is None:
            raise InvalidConfigError("targeted mode needs target_label")

    def validate(self, n_classes: int):
        if self.mode == "targeted" and not 0 <= self.target_label < n_classes:
            raise InvalidConfigError(f"target_label {self.target_label} outside [0, {n_classes})")


@dataclass
class UniformLossParams:
    n_seeds: int
    radius: float = 0.25
    expected_count: float = 4.0

    def __post_init__(self):
        if self.n_seeds < 1 or self.radius <= 0 or self.expected_count <= 0:
            raise InvalidInputError("uniform loss params must be positive")

    @property
    def expected_nn_dist(self) -> float:
        # hexagonal packing of expected_count points in a disk of this radius
        return math.sqrt(2 * math.pi * self.radius**2 / (math.sqrt(3) * self.expected_count))

    @staticmethod
    def default_seeds(n_points: int) -> int:
        return min(n_points, max(4, n_points // 16))

    @classmethod
    def calibrate(cls, clouds: torch.Tensor, radius: float = 0.25, n_seeds: Optional[int] = None,
                  seed_index: int = 0) -> "UniformLossParams":
        """Set the expected cluster size to the mean observed over ``clouds``."""
        clouds = geometry.as_points(clouds).detach()
        if clouds.dim() == 2:
            clouds = clouds.unsqueeze(0)
        n_seeds = n_seeds or cls.default_seeds(clouds.shape[-2])
        members = _cluster_members(clouds, n_seeds, radius, seed_index)
        return cls(n_seeds, radius, float(members.sum(-1).double().mean()))


def objective_loss(logits: torch.Tensor, labels: torch.Tensor, cfg: AttackConfig
                   ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Masked cross-entropy toward the attack-direction label.

    Returns the loss (mean over samples the victim still classifies
    correctly) and the boolean mask of those samples.
    """
    if logits.dim() != 2 or logits.shape[0] < 1:
        raise InvalidInputError("logits must be (B, M) with B >= 1")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if cfg.mode == "targeted":
        if bool((labels == cfg.target_label).any()):
            raise InvalidConfigError("targeted attack with target_label equal to a true label")
        attack = torch.full_like(labels, cfg.target_label)
    else:
        others = logits.detach().scatter(1, labels[:, None], float("-inf"))
        attack = others.argmax(1)
    if cfg.mask_successful:
        active = logits.detach().argmax(1) == labels
    else:
        active = torch.ones_like(labels, dtype=torch.bool)
    if not bool(active.any()):
        return logits.new_zeros(()), active
    ce = F.cross_entropy(logits[active], attack[active])
    return ce, active


def outlier_loss(cloud, k: int = 4) -> torch.Tensor:
    """Mean distance from each point to its k-th nearest neighbor.

    For a batch the per-cloud values are averaged.  Neighbor indices are
    constants; the distances carry gradients.
    """
    cloud = geometry.as_points(cloud)
    nbr = geometry.knn(cloud, k)
    far = geometry.gather_points(cloud, nbr.indices[..., -1:]).squeeze(-2)
    return torch.linalg.vector_norm(cloud - far, dim=-1).mean()


def _cluster_members(cloud: torch.Tensor, n_seeds: int, radius: float, seed_index: int) -> torch.Tensor:
    seeds = geometry.farthest_point_sample(cloud, n_seeds, seed_index)
    pts = cloud.detach()
    centers = torch.gather(pts, -2, seeds.unsqueeze(-1).expand(*seeds.shape, 3))
    d2 = ((pts.unsqueeze(-3) - centers.unsqueeze(-2)) ** 2).sum(-1)  # (..., S, N)
    return d2 <= radius * radius


def uniform_loss(cloud, params: UniformLossParams, seed_index: int = 0) -> torch.Tensor:
    """Sum over seed clusters of count imbalance times spacing clutter.

    Clusters are balls of ``params.radius`` around farthest-point seeds.
    Membership and counts are constants; only nearest-neighbor distances
    inside each cluster carry gradients.  Batches are averaged.
    """
    cloud = geometry.as_points(cloud)
    n = cloud.shape[-2]
    if params.n_seeds > n:
        raise InvalidInputError(f"n_seeds {params.n_seeds} exceeds point count {n}")
    single = cloud.dim() == 2
    if single:
        cloud = cloud.unsqueeze(0)
    member = _cluster_members(cloud, params.n_seeds, params.radius, seed_index)  # (B, S, N)
    count = member.sum(-1).to(cloud.dtype)
    n_hat, d_hat = params.expected_count, params.expected_nn_dist
    imbalance = (count - n_hat) ** 2 / n_hat

    with torch.no_grad():
        d2 = geometry.pairwise_sq_dist(cloud, cloud)  # (B, N, N)
        both = member.unsqueeze(-1) & member.unsqueeze(-2)  # (B, S, N, N)
        both &= ~torch.eye(n, dtype=torch.bool)
        masked = d2.unsqueeze(1).masked_fill(~both, float("inf"))
        nn_idx = masked.argmin(-1)  # (B, S, N)
    b, s = nn_idx.shape[:2]
    nbr = geometry.gather_points(cloud, nn_idx.reshape(b, s * n, 1)).reshape(b, s, n, 3)
    dist = torch.linalg.vector_norm(cloud.unsqueeze(1) - nbr, dim=-1)
    valid = member & (count >= 2).unsqueeze(-1)
    clutter = (torch.where(valid, (dist - d_hat) ** 2, torch.zeros_like(dist)) / d_hat).sum(-1)
    per_cloud = (imbalance * clutter).sum(-1)
    return per_cloud[0] if single else per_cloud.mean()


Critic = Callable[[torch.Tensor], torch.Tensor]


def gradient_penalty(critic: Critic, real: torch.Tensor, fake: torch.Tensor,
                     epsilons: torch.Tensor) -> torch.Tensor:
    """Mean of (||grad D(x_hat)|| - 1)^2 over interpolates of real and fake.

    ``critic`` maps a (B, N, 3) batch to B scalar scores.  The result is
    differentiable with respect to the critic's parameters.
    """
    if real.shape != fake.shape:
        raise InvalidInputError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ")
    eps = torch.as_tensor(epsilons, dtype=real.dtype).reshape(-1, *([1] * (real.dim() - 1)))
    if eps.shape[0] != real.shape[0]:
        raise InvalidInputError("one epsilon per sample required")
    x_hat = eps * real + (1 - eps) * fake
    if not x_hat.requires_grad:
        x_hat = x_hat.detach().requires_grad_(True)
    scores = critic(x_hat)
    grad = None
    if scores.requires_grad:
        (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True, allow_unused=True)
    if grad is None:  # critic ignores its input
        grad = torch.zeros_like(x_hat)
    norms = torch.linalg.vector_norm(grad.reshape(grad.shape[0], -1), dim=1)
    return ((norms - 1) ** 2).mean()


def generator_loss(fake: torch.Tensor, labels: torch.Tensor, discriminator, cfg: AttackConfig,
                   stage: str = "gan", victim=None, outlier_k: int = 4,
                   uniform_params: Optional[UniformLossParams] = None, uniform_seed: int = 0
                   ) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Total generator objective plus its named components.

    The ``gan`` stage leaves out the objective term; the ``adversarial``
    stage requires ``victim`` and adds ``lambda1 * L_obj``.  Components are
    the unweighted terms ``dis``, ``obj``, ``out``, ``ul`` (detached) and the
    objective mask ``active``.
    """
    if stage not in ("gan", "adversarial"):
        raise InvalidConfigError(f"unknown stage {stage!r}")
    if stage == "adversarial" and victim is None:
        raise InvalidConfigError("adversarial stage needs a victim model")
    w = cfg.weights
    labels = torch.as_tensor(labels, dtype=torch.long)
    score, aux_logits = discriminator(fake)
    dis = -score.mean() + F.cross_entropy(aux_logits, labels)
    out = outlier_loss(fake, outlier_k)
    if uniform_params is None:
        uniform_params = UniformLossParams.calibrate(fake, seed_index=uniform_seed)
    ul = uniform_loss(fake, uniform_params, uniform_seed)
    total = dis + w.lambda2 * out + w.lambda3 * ul
    if stage == "adversarial":
        obj, active = objective_loss(victim(fake), labels, cfg)
        if w.lambda1 != 0:
            total = total + w.lambda1 * obj
    else:
        obj = fake.new_zeros(())
        active = torch.zeros_like(labels, dtype=torch.bool)
    parts = {"dis": dis.detach(), "obj": obj.detach(), "out": out.detach(), "ul": ul.detach(),
             "active": active, "aux_logits": aux_logits.detach()}
    return total, parts


def critic_loss(score_real: torch.Tensor, score_fake: torch.Tensor, logits_real: torch.Tensor,
                logits_fake: torch.Tensor, labels_real, labels_fake, penalty: torch.Tensor,
                lambda_gp: float = 10.0, aux_weight: float = 1.0) -> torch.Tensor:
    """Wasserstein critic loss with gradient penalty and auxiliary classifier."""
    if score_real.shape != score_fake.shape or logits_real.shape != logits_fake.shape:
        raise InvalidInputError("real and fake batches must have matching shapes")
    labels_real = torch.as_tensor(labels_real, dtype=torch.long)
    labels_fake = torch.as_tensor(labels_fake, dtype=torch.long)
    wasserstein = score_fake.mean() - score_real.mean()
    aux = F.cross_entropy(logits_real, labels_real) + F.cross_entropy(logits_fake, labels_fake)
    return wasserstein + lambda_gp * penalty + aux_weight * aux
