"""Set-level generation-quality metrics: MMD, COV and voxel JSD.

MMD and COV take a cloud-to-cloud distance (``"chamfer"`` or ``"emd"``);
JSD compares pooled voxel-occupancy histograms of two sets living in the
cube [-0.5, 0.5]^3.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields
from decimal import Decimal
from typing import Optional, Sequence

import numpy as np
import torch

from . import geometry
from .errors import InvalidInputError

DEFAULT_GRID = 28


@dataclass
class CloudSet:
    clouds: torch.Tensor  # (K, N, 3)
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.clouds = as_cloud_stack(self.clouds)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.clouds):
                raise InvalidInputError("one label per cloud required")

    def __len__(self):
        return self.clouds.shape[0]

    def of_class(self, label: int) -> "CloudSet":
        keep = np.flatnonzero(self.labels == label)
        return CloudSet(self.clouds[torch.as_tensor(keep)], self.labels[keep])


def as_cloud_stack(clouds) -> torch.Tensor:
    if isinstance(clouds, CloudSet):
        return clouds.clouds
    if isinstance(clouds, (list, tuple)):
        if not clouds:
            raise InvalidInputError("cloud set is empty")
        sizes = {np.shape(c)[0] for c in clouds}
        if len(sizes) != 1:
            raise InvalidInputError(f"clouds in a set must share N, got sizes {sorted(sizes)}")
        clouds = torch.stack([geometry.as_points(c) for c in clouds])
    clouds = geometry.as_points(clouds, "cloud set").detach()
    if clouds.dim() != 3:
        raise InvalidInputError("cloud set must be (K, N, 3)")
    if clouds.shape[0] == 0:
        raise InvalidInputError("cloud set is empty")
    return clouds.double()


def distance_matrix(gen, ref, dist: str = "chamfer") -> np.ndarray:
    """|gen| x |ref| matrix of cloud distances."""
    g = as_cloud_stack(gen)
    r = as_cloud_stack(ref)
    out = np.empty((len(g), len(r)))
    if dist == "chamfer":
        for i in range(len(g)):
            out[i] = geometry.chamfer(g[i].unsqueeze(0), r).numpy()
    elif dist == "emd":
        if g.shape[1] != r.shape[1]:
            raise InvalidInputError("emd needs the same point count in both sets")
        for i in range(len(g)):
            for j in range(len(r)):
                out[i, j] = geometry.emd(g[i], r[j])
    else:
        raise InvalidInputError(f"unknown distance {dist!r}")
    return out


def mmd(gen, ref, dist: str = "chamfer", matrix: Optional[np.ndarray] = None) -> float:
    """Minimum matching distance: mean over ref of the closest gen distance."""
    d = distance_matrix(gen, ref, dist) if matrix is None else matrix
    return float(d.min(axis=0).mean())


def coverage(gen, ref, dist: str = "chamfer", matrix: Optional[np.ndarray] = None) -> float:
    """Fraction of ref clouds that are the nearest neighbor of some gen cloud."""
    d = distance_matrix(gen, ref, dist) if matrix is None else matrix
    nearest = d.argmin(axis=1)  # first minimum, i.e. lower ref index on ties
    return len(np.unique(nearest)) / d.shape[1]


def voxel_histogram(clouds, grid_resolution: int = DEFAULT_GRID) -> np.ndarray:
    pts = as_cloud_stack(clouds).reshape(-1, 3).numpy()
    if grid_resolution < 1:
        raise InvalidInputError("grid_resolution must be positive")
    if (np.abs(pts) > 0.5).any():
        raise InvalidInputError("jsd needs all points inside [-0.5, 0.5]^3; normalize first")
    cell = np.floor((pts + 0.5) * grid_resolution).astype(np.int64)
    cell = np.minimum(cell, grid_resolution - 1)
    flat = (cell[:, 0] * grid_resolution + cell[:, 1]) * grid_resolution + cell[:, 2]
    counts = np.bincount(flat, minlength=grid_resolution**3).astype(np.float64)
    return counts / counts.sum()


def jensen_shannon(p: np.ndarray, q: np.ndarray) -> float:
    m = 0.5 * (p + q)

    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))

    return min(max(0.5 * kl(p, m) + 0.5 * kl(q, m), 0.0), math.log(2.0))


def jsd(gen, ref, grid_resolution: int = DEFAULT_GRID) -> float:
    """Jensen-Shannon divergence (natural log) of pooled voxel occupancy."""
    return jensen_shannon(voxel_histogram(gen, grid_resolution), voxel_histogram(ref, grid_resolution))


def fit_half_cube(clouds) -> torch.Tensor:
    """Center each cloud and scale it to max radius 0.5, i.e. into the JSD cube."""
    c = as_cloud_stack(clouds)
    c = c - c.mean(1, keepdim=True)
    radius = c.norm(dim=-1).amax(1, keepdim=True).clamp_min(1e-12)
    return (0.5 * c / radius.unsqueeze(-1)).clamp(-0.5, 0.5)


def _scale100(x: float) -> str:
    # shift the shortest round-trip repr, so parsing back divides exactly
    return format(Decimal(repr(float(x))).scaleb(2).normalize(), "f")


def _unscale100(s: str) -> float:
    return float(Decimal(s).scaleb(-2))


@dataclass
class MetricReport:
    mmd_cd: float
    mmd_emd: float
    cov_cd: float
    cov_emd: float
    jsd: float

    HEADER = ("mmd_cd", "mmd_emd", "cov_cd_x100", "cov_emd_x100", "jsd_x100")

    def row(self) -> list:
        return [
            repr(float(self.mmd_cd)),
            repr(float(self.mmd_emd)),
            _scale100(self.cov_cd),
            _scale100(self.cov_emd),
            _scale100(self.jsd),
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        w.writerow(self.row())
        return buf.getvalue()

    @classmethod
    def from_row(cls, row: Sequence[str]) -> "MetricReport":
        return cls(float(row[0]), float(row[1]), _unscale100(row[2]), _unscale100(row[3]), _unscale100(row[4]))

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        rows = list(csv.reader(io.StringIO(text)))
        if len(rows) != 2 or tuple(rows[0]) != cls.HEADER:
            raise InvalidInputError("malformed metric report")
        return cls.from_row(rows[1])

    def as_tuple(self):
        return tuple(getattr(self, f.name) for f in fields(self))


def metric_report(gen, ref, grid_resolution: int = DEFAULT_GRID, fit_cube: bool = True) -> MetricReport:
    """All five metrics between two sets.

    With ``fit_cube`` each cloud is centered and scaled into the JSD cube
    before voxelization; MMD and COV always use the clouds as given.
    """
    g = as_cloud_stack(gen)
    r = as_cloud_stack(ref)
    d_cd = distance_matrix(g, r, "chamfer")
    d_emd = distance_matrix(g, r, "emd")
    if fit_cube:
        g_j, r_j = fit_half_cube(g), fit_half_cube(r)
    else:
        g_j, r_j = g, r
    return MetricReport(
        mmd_cd=mmd(g, r, matrix=d_cd),
        mmd_emd=mmd(g, r, matrix=d_emd),
        cov_cd=coverage(g, r, matrix=d_cd),
        cov_emd=coverage(g, r, matrix=d_emd),
        jsd=jsd(g_j, r_j, grid_resolution),
    )


def macro_average(reports: Sequence[MetricReport]) -> MetricReport:
    vals = np.array([r.as_tuple() for r in reports], dtype=np.float64)
    return MetricReport(*(float(v) for v in vals.mean(0)))
