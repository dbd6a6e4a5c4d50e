"""Networks: tree graph-convolutional generator, critic with auxiliary
classifier, and two small victim classifiers.

All modules take batches shaped (B, N, 3); a single (N, 3) cloud is also
accepted and the batch axis is dropped from the outputs.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import geometry
from .errors import (CloudFormatError, InvalidInputError, MagicMismatchError,
                     TruncatedFileError, VersionMismatchError)

CKPT_MAGIC = b"PCAD-CKPT"
CKPT_VERSION = 1


# -- spectral normalization ----------------------------------------------------

def _l2normalize(v, eps=1e-12):
    return v / (v.norm() + eps)


def spectral_normalize(weight: torch.Tensor, u: torch.Tensor, v: torch.Tensor, n_iter: int = 1):
    """Power-iteration estimate of the top singular value of ``weight``.

    Returns ``(weight / sigma, u, v, sigma)``.  ``u`` and ``v`` are updated
    without gradient; ``sigma = u^T W v`` stays differentiable in ``weight``.
    A zero matrix is returned unchanged (sigma is floored at 1e-12).
    """
    w2 = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        for _ in range(n_iter):
            v = _l2normalize(w2.t() @ u)
            u = _l2normalize(w2 @ v)
    sigma = torch.dot(u, w2 @ v)
    return weight / sigma.clamp_min(1e-12), u, v, sigma


class SNLinear(nn.Module):
    """Linear map whose weight is divided by its estimated spectral norm.

    The power-iteration vectors persist as buffers and advance one step per
    forward pass in training mode.
    """

    def __init__(self, in_features, out_features, bias=True, n_power_iter=1):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        self.register_buffer("u", torch.ones(out_features) / math.sqrt(out_features))
        self.register_buffer("v", torch.ones(in_features) / math.sqrt(in_features))
        self.n_power_iter = n_power_iter

    def normalized_weight(self, update=None):
        update = self.training if update is None else update
        w, u, v, _ = spectral_normalize(self.weight, self.u, self.v, self.n_power_iter if update else 0)
        if update:
            self.u.copy_(u)
            self.v.copy_(v)
        return w

    def warm_up(self, n_iter=30):
        with torch.no_grad():
            _, u, v, _ = spectral_normalize(self.weight, self.u, self.v, n_iter)
            self.u.copy_(u)
            self.v.copy_(v)

    def exact_normalized_sigma(self) -> float:
        w = self.normalized_weight(update=False).detach().double()
        return float(torch.linalg.matrix_norm(w, ord=2))

    def forward(self, x):
        return F.linear(x, self.normalized_weight(), self.bias)


# -- generator -----------------------------------------------------------------

@dataclass
class GeneratorConfig:
    noise_dim: int = 32
    n_classes: int = 2
    label_embed_dim: int = 8
    branching: Tuple[int, ...] = (2, 2, 2, 2, 2, 2)
    feature_dims: Tuple[int, ...] = (40, 96, 64, 64, 48, 32, 32)
    leaky_slope: float = 0.2

    def __post_init__(self):
        self.branching = tuple(int(b) for b in self.branching)
        self.feature_dims = tuple(int(d) for d in self.feature_dims)
        if len(self.feature_dims) != len(self.branching) + 1:
            raise InvalidInputError("feature_dims needs one entry more than branching")
        if self.feature_dims[0] != self.noise_dim + self.label_embed_dim:
            raise InvalidInputError("feature_dims[0] must equal noise_dim + label_embed_dim")
        if min(self.branching) < 1 or min(self.feature_dims) < 1 or self.n_classes < 1:
            raise InvalidInputError("sizes must be positive")
        if not 0 < self.leaky_slope < 1:
            raise InvalidInputError("leaky_slope must be in (0, 1)")

    @property
    def n_points(self) -> int:
        return math.prod(self.branching)


class TreeGCNLayer(nn.Module):
    """One depth of the tree: branch every node, then aggregate its root path."""

    def __init__(self, depth: int, feature_dims, degree: int, leaky_slope: float):
        super().__init__()
        d_in, d_out = feature_dims[depth - 1], feature_dims[depth]
        self.degree = degree
        self.leaky_slope = leaky_slope
        self.branch = nn.Parameter(torch.empty(degree, d_in, d_in))
        self.loop = nn.Parameter(torch.empty(d_in, d_out))
        self.ancestors = nn.ParameterList(
            [nn.Parameter(torch.empty(feature_dims[j], d_out)) for j in range(depth)])
        self.bias = nn.Parameter(torch.zeros(d_out))

    def forward(self, tree):
        parent = tree[-1]
        b, n, d = parent.shape
        children = torch.einsum("bnd,cde->bnce", parent, self.branch).reshape(b, n * self.degree, d)
        n_out = n * self.degree
        h = children @ self.loop + self.bias
        for feats, w in zip(tree, self.ancestors):
            h = h + torch.repeat_interleave(feats @ w, n_out // feats.shape[1], dim=1)
        return tree + [F.leaky_relu(h, self.leaky_slope)]


class Generator(nn.Module):
    KIND = 1

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.embedding = nn.Embedding(config.n_classes, config.label_embed_dim)
        self.layers = nn.ModuleList([
            TreeGCNLayer(l, config.feature_dims, config.branching[l - 1], config.leaky_slope)
            for l in range(1, len(config.branching) + 1)])
        self.to_points = nn.Linear(config.feature_dims[-1], 3)

    def forward(self, z: torch.Tensor, y) -> torch.Tensor:
        single = z.dim() == 1
        if single:
            z = z.unsqueeze(0)
        y = torch.as_tensor(y, dtype=torch.long).reshape(-1)
        if y.numel() != z.shape[0]:
            raise InvalidInputError("one label per noise vector required")
        if bool(((y < 0) | (y >= self.config.n_classes)).any()):
            raise InvalidInputError(f"labels must lie in [0, {self.config.n_classes})")
        root = torch.cat([z, self.embedding(y).to(z.dtype)], dim=-1).unsqueeze(1)
        tree = [root]
        for layer in self.layers:
            tree = layer(tree)
        pts = self.to_points(tree[-1])
        return pts[0] if single else pts

    def config_dict(self):
        return asdict(self.config)


# -- discriminator -------------------------------------------------------------

@dataclass
class DiscriminatorConfig:
    n_classes: int = 2
    width: int = 64
    n_blocks: int = 2
    pool_dim: int = 128
    leaky_slope: float = 0.2
    power_iterations: int = 3

    def __post_init__(self):
        if min(self.n_classes, self.width, self.n_blocks + 1, self.pool_dim, self.power_iterations) < 1:
            raise InvalidInputError("discriminator sizes must be positive")


class ResidualBlock(nn.Module):
    def __init__(self, width, slope, power_iterations=1):
        super().__init__()
        self.fc1 = SNLinear(width, width, n_power_iter=power_iterations)
        self.fc2 = SNLinear(width, width, n_power_iter=power_iterations)
        self.slope = slope

    def forward(self, x):
        h = self.fc1(F.leaky_relu(x, self.slope))
        return x + self.fc2(F.leaky_relu(h, self.slope))


class Discriminator(nn.Module):
    """Per-point residual trunk, max-pool, critic head and class head.

    All trunk maps and the critic head are spectrally normalized; the
    auxiliary class head is a plain linear map.
    """

    KIND = 2

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        c = config
        it = c.power_iterations
        self.stem = SNLinear(3, c.width, n_power_iter=it)
        self.blocks = nn.ModuleList([ResidualBlock(c.width, c.leaky_slope, it) for _ in range(c.n_blocks)])
        self.lift = SNLinear(c.width, c.pool_dim, n_power_iter=it)
        self.critic_head = SNLinear(c.pool_dim, 1, n_power_iter=it)
        self.class_head = nn.Linear(c.pool_dim, c.n_classes)

    def sn_layers(self):
        return [m for m in self.modules() if isinstance(m, SNLinear)]

    def features(self, cloud):
        h = self.stem(cloud)
        for block in self.blocks:
            h = block(h)
        h = self.lift(F.leaky_relu(h, self.config.leaky_slope))
        return F.leaky_relu(h.max(dim=-2).values, self.config.leaky_slope)

    def forward(self, cloud) -> Tuple[torch.Tensor, torch.Tensor]:
        single = cloud.dim() == 2
        if single:
            cloud = cloud.unsqueeze(0)
        f = self.features(cloud)
        score = self.critic_head(f).squeeze(-1)
        logits = self.class_head(f)
        if single:
            return score[0], logits[0]
        return score, logits

    def critic(self, cloud):
        return self(cloud)[0]

    def classify(self, cloud):
        return self(cloud)[1]

    def config_dict(self):
        return asdict(self.config)


# -- victims -------------------------------------------------------------------

@dataclass
class VictimConfig:
    arch: str = "pointnet_lite"
    n_classes: int = 2
    widths: Tuple[int, ...] = (64, 128)
    head: int = 64
    k: int = 8

    def __post_init__(self):
        if self.arch not in VICTIM_ARCHS:
            raise InvalidInputError(f"unknown victim architecture {self.arch!r}")
        self.widths = tuple(int(w) for w in self.widths)


class PointNetLite(nn.Module):
    """Shared per-point MLP, global max-pool, classifier head."""

    KIND = 3

    def __init__(self, config: VictimConfig):
        super().__init__()
        self.config = config
        dims = (3,) + config.widths
        self.point_mlp = nn.ModuleList([nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:])])
        self.fc1 = nn.Linear(dims[-1], config.head)
        self.fc2 = nn.Linear(config.head, config.n_classes)

    def point_features(self, cloud):
        h = cloud
        for layer in self.point_mlp:
            h = F.relu(layer(h))
        return h

    def forward(self, cloud):
        single = cloud.dim() == 2
        if single:
            cloud = cloud.unsqueeze(0)
        pooled = self.point_features(cloud).max(dim=-2).values
        logits = self.fc2(F.relu(self.fc1(pooled)))
        return logits[0] if single else logits

    def config_dict(self):
        return asdict(self.config)


class EdgeConvLite(nn.Module):
    """Edge convolutions over a static coordinate kNN graph.

    Edge feature of (i, j) is ``act(W [h_i ; h_j - h_i])``, max-reduced over
    the k neighbors of i; block outputs are concatenated and max-pooled.
    """

    KIND = 4

    def __init__(self, config: VictimConfig):
        super().__init__()
        self.config = config
        dims = (3,) + config.widths
        self.edge_maps = nn.ModuleList([nn.Linear(2 * a, b) for a, b in zip(dims[:-1], dims[1:])])
        self.fc1 = nn.Linear(sum(config.widths), config.head)
        self.fc2 = nn.Linear(config.head, config.n_classes)

    def forward(self, cloud):
        single = cloud.dim() == 2
        if single:
            cloud = cloud.unsqueeze(0)
        k = self.config.k
        if cloud.shape[-2] <= k:
            raise InvalidInputError(f"edgeconv_lite needs more than k={k} points")
        idx = geometry.knn(cloud.detach(), k).indices  # (B, N, k)
        h, outs = cloud, []
        for edge_map in self.edge_maps:
            b, n, d = h.shape
            nbr = torch.gather(h, 1, idx.reshape(b, n * k, 1).expand(b, n * k, d)).reshape(b, n, k, d)
            center = h.unsqueeze(2).expand(b, n, k, d)
            e = F.leaky_relu(edge_map(torch.cat([center, nbr - center], dim=-1)), 0.2)
            h = e.max(dim=2).values
            outs.append(h)
        pooled = torch.cat(outs, dim=-1).max(dim=-2).values
        logits = self.fc2(F.relu(self.fc1(pooled)))
        return logits[0] if single else logits

    def config_dict(self):
        return asdict(self.config)


VICTIM_ARCHS = {"pointnet_lite": PointNetLite, "edgeconv_lite": EdgeConvLite}


def build_victim(config: VictimConfig) -> nn.Module:
    return VICTIM_ARCHS[config.arch](config)


# -- initialization ------------------------------------------------------------

def init_parameters(model: nn.Module, seed: int, embed_std: float = 1.0) -> nn.Module:
    """Deterministically (re)initialize ``model`` in place and return it.

    Weight tensors get U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero,
    embeddings N(0, embed_std^2).  Spectral-norm vectors are drawn at random
    and then warmed up with a few power iterations.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif "embedding" in name:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * embed_std)
            else:
                # (out, in) for nn.Linear/SNLinear, (..., in, out) for tree maps
                fan_in = p.shape[1] if isinstance(_owner(model, name), (nn.Linear, SNLinear)) else p.shape[-2]
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
        for m in model.modules():
            if isinstance(m, SNLinear):
                m.u.copy_(_l2normalize(torch.randn(m.u.shape, generator=gen, dtype=torch.float64)))
                m.v.copy_(_l2normalize(torch.randn(m.v.shape, generator=gen, dtype=torch.float64)))
                m.warm_up()
    return model


def _owner(model, param_name):
    mod = model
    for part in param_name.split(".")[:-1]:
        mod = getattr(mod, part)
    return mod


def build_generator(config: GeneratorConfig, seed: int = 0) -> Generator:
    return init_parameters(Generator(config), seed)


def build_discriminator(config: DiscriminatorConfig, seed: int = 0) -> Discriminator:
    return init_parameters(Discriminator(config), seed)


def make_victim(config: VictimConfig, seed: int = 0) -> nn.Module:
    return init_parameters(build_victim(config), seed)


# -- checkpoint format ---------------------------------------------------------

def write_checkpoint(path, tensors: Dict[str, torch.Tensor]) -> None:
    """Write named tensors as float32 little-endian plus a text index sidecar."""
    path = Path(path)
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    index = []
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
        index.append(f"{name}\t{'x'.join(str(s) for s in arr.shape) or 'scalar'}")
    path.write_bytes(b"".join(parts))
    path.with_name(path.name + ".idx").write_text("\n".join(index) + "\n")


def read_checkpoint(path) -> "OrderedDict[str, torch.Tensor]":
    data = Path(path).read_bytes()
    if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise MagicMismatchError(f"{path}: not a PCAD-CKPT file")
    pos = len(CKPT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedFileError(f"{path}: truncated checkpoint")
        chunk = data[pos: pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: unsupported checkpoint version {version}")
    out = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = math.prod(dims)
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims)
        out[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(data):
        raise CloudFormatError(f"{path}: trailing bytes after checkpoint payload")
    return out


_KINDS = {1: "generator", 2: "discriminator", 3: "pointnet_lite", 4: "edgeconv_lite"}


def save_model(path, model: nn.Module) -> None:
    """Checkpoint a model: ``meta.*`` config tensors followed by its state."""
    tensors = OrderedDict()
    tensors["meta.kind"] = torch.tensor([float(model.KIND)])
    for key, val in model.config_dict().items():
        if key == "arch":
            continue
        tensors[f"meta.{key}"] = torch.tensor(np.atleast_1d(np.asarray(val, dtype=np.float64)))
    for name, t in model.state_dict().items():
        tensors[name] = t
    write_checkpoint(path, tensors)


def load_model(path) -> nn.Module:
    tensors = read_checkpoint(path)
    kind = _KINDS.get(int(tensors["meta.kind"][0]))
    if kind is None:
        raise CloudFormatError(f"{path}: unknown model kind")
    meta = {k[5:]: v for k, v in tensors.items() if k.startswith("meta.") and k != "meta.kind"}

    def scalar(key, cast=int):
        val = meta[key][0].item()
        # float32 storage; round back to the configured decimal value
        return round(val, 6) if cast is float else cast(round(val))

    def vector(key):
        return tuple(int(x) for x in meta[key].tolist())

    if kind == "generator":
        model = Generator(GeneratorConfig(
            noise_dim=scalar("noise_dim"), n_classes=scalar("n_classes"),
            label_embed_dim=scalar("label_embed_dim"), branching=vector("branching"),
            feature_dims=vector("feature_dims"), leaky_slope=scalar("leaky_slope", float)))
    elif kind == "discriminator":
        model = Discriminator(DiscriminatorConfig(
            n_classes=scalar("n_classes"), width=scalar("width"), n_blocks=scalar("n_blocks"),
            pool_dim=scalar("pool_dim"), leaky_slope=scalar("leaky_slope", float),
            power_iterations=scalar("power_iterations") if "power_iterations" in meta else 1))
    else:
        model = build_victim(VictimConfig(arch=kind, n_classes=scalar("n_classes"),
                                          widths=vector("widths"), head=scalar("head"), k=scalar("k")))
    state = {k: v for k, v in tensors.items() if not k.startswith("meta.")}
    model.load_state_dict(state)
    return model


def victim_tag(model: nn.Module) -> str:
    return model.config.arch
