"""Synthetic shapes, mesh sampling, normalization and on-disk formats."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import (InvalidConfigError, InvalidInputError, MagicMismatchError,
                     TruncatedFileError, VersionMismatchError, CloudFormatError)
from .rng import numpy_rng

CLOUD_MAGIC = b"PCAD"
CLOUD_VERSION = 1
FAMILIES = ("sphere", "cube", "cylinder", "torus")


@dataclass
class LabeledCloud:
    points: np.ndarray
    label: int
    class_name: str = ""


@dataclass
class ShapeSpec:
    family: str
    scale_jitter: float = 0.0
    rotation_jitter: float = 0.0
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidInputError(f"unknown shape family {self.family!r}; choose from {FAMILIES}")
        if min(self.scale_jitter, self.rotation_jitter, self.noise) < 0:
            raise InvalidInputError("jitters and noise must be >= 0")


def _sphere(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(rng, n):
    face = rng.integers(0, 6, n)
    pts = rng.uniform(-0.5, 0.5, (n, 3))
    axis = face // 2
    pts[np.arange(n), axis] = np.where(face % 2 == 0, -0.5, 0.5)
    return pts


def _cylinder(rng, n, radius=0.5, height=1.0):
    side = 2 * math.pi * radius * height
    cap = math.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * math.pi, n)
    r = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(0, 1, n)))
    z = np.select([part == 0, part == 1], [rng.uniform(-height / 2, height / 2, n), -height / 2], height / 2)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _torus(rng, n, major=0.7, minor=0.3):
    out = np.empty((0, 3))
    while len(out) < n:
        theta = rng.uniform(0, 2 * math.pi, 2 * n)
        phi = rng.uniform(0, 2 * math.pi, 2 * n)
        # area element is proportional to (major + minor cos phi)
        keep = rng.uniform(0, 1, 2 * n) < (major + minor * np.cos(phi)) / (major + minor)
        ring = major + minor * np.cos(phi[keep])
        pts = np.stack([ring * np.cos(theta[keep]), ring * np.sin(theta[keep]), minor * np.sin(phi[keep])], 1)
        out = np.concatenate([out, pts])
    return out[:n]


_SAMPLERS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "torus": _torus}


def _rotation(axis, angle):
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * k @ k


def sample_shape(spec: ShapeSpec, n_points: int, label: int = 0) -> LabeledCloud:
    """Uniform surface sample of a parametric shape, then jitter and noise."""
    if n_points < 8:
        raise InvalidInputError("sample_shape needs n_points >= 8")
    rng = numpy_rng(spec.seed)
    pts = _SAMPLERS[spec.family](rng, n_points)
    if spec.scale_jitter > 0:
        pts = pts * max(1e-3, 1 + rng.uniform(-spec.scale_jitter, spec.scale_jitter))
    if spec.rotation_jitter > 0:
        rot = _rotation(rng.standard_normal(3), rng.uniform(-spec.rotation_jitter, spec.rotation_jitter))
        pts = pts @ rot.T
    if spec.noise > 0:
        pts = pts + rng.normal(0, spec.noise, pts.shape)
    return LabeledCloud(pts, int(label), spec.family)


def read_off(path) -> np.ndarray:
    """Triangles (T, 3, 3) from an ASCII OFF file; polygons are fan-split."""
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.append(line)
    if not tokens or not tokens[0].startswith("OFF"):
        raise CloudFormatError(f"{path}: missing OFF header")
    head = tokens[0][3:].split() or tokens.pop(1).split()
    tokens = tokens[1:]
    n_verts, n_faces = int(head[0]), int(head[1])
    if len(tokens) < n_verts + n_faces:
        raise TruncatedFileError(f"{path}: fewer lines than declared")
    verts = np.array([[float(x) for x in tokens[i].split()[:3]] for i in range(n_verts)])
    tris = []
    for line in tokens[n_verts: n_verts + n_faces]:
        idx = [int(x) for x in line.split()]
        poly = idx[1: 1 + idx[0]]
        for j in range(1, len(poly) - 1):
            tris.append(verts[[poly[0], poly[j], poly[j + 1]]])
    return np.array(tris).reshape(-1, 3, 3)


def sample_mesh_surface(triangles, n_points: int, seed: int = 0) -> np.ndarray:
    """Area-weighted triangle choice, uniform barycentric point per pick."""
    tri = np.asarray(triangles, dtype=np.float64).reshape(-1, 3, 3)
    if len(tri) == 0:
        raise InvalidInputError("mesh has no triangles")
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    total = areas.sum()
    if not total > 0:
        raise InvalidInputError("mesh has zero total area")
    rng = numpy_rng(seed)
    pick = rng.choice(len(tri), size=n_points, p=areas / total)
    r1 = np.sqrt(rng.uniform(0, 1, n_points))[:, None]
    r2 = rng.uniform(0, 1, n_points)[:, None]
    a, b, c = tri[pick, 0], tri[pick, 1], tri[pick, 2]
    return (1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c


def normalize(cloud) -> np.ndarray:
    """Zero centroid, maximum point norm exactly 1."""
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
        raise InvalidInputError("normalize expects an (N, 3) cloud")
    pts = pts - pts.mean(axis=0)
    radius = np.linalg.norm(pts, axis=1).max()
    if radius == 0:
        raise InvalidInputError("cannot normalize a cloud whose points all coincide")
    return pts / radius


# -- PCAD cloud files ----------------------------------------------------------

def write_cloud(path, cloud) -> None:
    pts = np.ascontiguousarray(np.asarray(cloud), dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidInputError("cloud must be (N, 3)")
    header = CLOUD_MAGIC + struct.pack("<III", CLOUD_VERSION, pts.shape[0], 3)
    Path(path).write_bytes(header + pts.tobytes())


def read_cloud(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != CLOUD_MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise TruncatedFileError(f"{path}: truncated header")
    version, count, dim = struct.unpack("<III", data[4:16])
    if version != CLOUD_VERSION:
        raise VersionMismatchError(f"{path}: unsupported version {version}")
    if dim != 3:
        raise CloudFormatError(f"{path}: dimension {dim} != 3")
    expected = 16 + 4 * 3 * count
    if len(data) < expected:
        raise TruncatedFileError(f"{path}: payload has {len(data) - 16} bytes, expected {expected - 16}")
    if len(data) > expected:
        raise CloudFormatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(data[16:], dtype="<f4").reshape(count, 3).astype(np.float32)


# -- manifests -----------------------------------------------------------------

@dataclass
class ManifestEntry:
    path: str
    label: int
    class_name: str


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    root: Path = field(default_factory=Path)

    HEADER = ("path", "label", "class_name")

    @property
    def n_classes(self) -> int:
        return len({e.label for e in self.entries})

    @property
    def class_names(self) -> Dict[int, str]:
        return {e.label: e.class_name for e in self.entries}

    def validate(self):
        labels = sorted({e.label for e in self.entries})
        if labels != list(range(len(labels))):
            raise InvalidInputError(f"manifest labels must be dense from 0, got {labels}")

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HEADER)
            for e in self.entries:
                w.writerow([e.path, e.label, e.class_name])

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != cls.HEADER:
            raise InvalidInputError(f"{path}: not a dataset manifest")
        entries = [ManifestEntry(r[0], int(r[1]), r[2]) for r in rows[1:]]
        if not entries:
            raise InvalidInputError(f"{path}: manifest has no entries")
        return cls(entries, path.parent)

    def load(self):
        """Stack all clouds: returns ``(clouds (K, N, 3) float32, labels (K,))``."""
        clouds = [read_cloud(self.root / e.path) for e in self.entries]
        sizes = {len(c) for c in clouds}
        if len(sizes) != 1:
            raise InvalidInputError(f"manifest clouds have differing sizes {sorted(sizes)}")
        return np.stack(clouds), np.array([e.label for e in self.entries], dtype=np.int64)


def load_cloud_set(path):
    """Clouds and labels from a manifest file or a directory holding one.

    A directory without ``manifest.csv`` is read as unlabeled ``*.pcad`` files.
    """
    path = Path(path)
    if path.is_dir():
        if (path / "manifest.csv").exists():
            path = path / "manifest.csv"
        else:
            files = sorted(path.glob("*.pcad"))
            if not files:
                raise InvalidInputError(f"{path}: no clouds found")
            return np.stack([read_cloud(f) for f in files]), None
    m = DatasetManifest.read(path)
    return m.load()


def write_cloud_set(out_dir, clouds, labels, class_names: Optional[Dict[int, str]] = None) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (c, y) in enumerate(zip(clouds, labels)):
        rel = f"clouds/{i:05d}.pcad"
        write_cloud(out_dir / rel, c)
        name = (class_names or {}).get(int(y), f"class{int(y)}")
        entries.append(ManifestEntry(rel, int(y), name))
    manifest = DatasetManifest(entries, out_dir)
    manifest.write(out_dir / "manifest.csv")
    return out_dir / "manifest.csv"


def make_dataset(families: Sequence[str], n_points: int, count: int, seed: int,
                 scale_jitter=0.0, rotation_jitter=0.0, noise=0.0, normalized=True):
    """``count`` clouds per family; label = position of the family in the list."""
    clouds, labels = [], []
    for label, fam in enumerate(families):
        for i in range(count):
            spec = ShapeSpec(fam, scale_jitter, rotation_jitter, noise,
                             seed=(int(seed) * 1_000_003 + label * 100_003 + i) & 0x7FFFFFFF)
            pts = sample_shape(spec, n_points, label).points
            clouds.append(normalize(pts) if normalized else pts)
            labels.append(label)
    return np.stack(clouds).astype(np.float32), np.array(labels, dtype=np.int64)


def export_xyz(path, cloud) -> None:
    np.savetxt(path, np.asarray(cloud, dtype=np.float64), fmt="%.9g")


# -- key = value configuration -------------------------------------------------

def parse_config_text(text: str) -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"config line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise InvalidConfigError(f"config line {lineno}: empty key")
        if key in out:
            raise InvalidConfigError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def read_config(path) -> Dict[str, str]:
    return parse_config_text(Path(path).read_text())


def apply_config(obj, values: Dict[str, str]):
    """Set dataclass fields of ``obj`` from strings, casting by current type."""
    names = {f.name for f in fields(obj)}
    for key, raw in values.items():
        if key not in names:
            raise InvalidConfigError(f"unknown config key {key!r}")
        current = getattr(obj, key)
        try:
            if isinstance(current, bool):
                val = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                val = int(raw)
            elif isinstance(current, float):
                val = float(raw)
            elif isinstance(current, tuple):
                val = tuple(type(current[0])(x) for x in raw.split(","))
            elif current is None and raw.lower() in ("", "none"):
                val = None
            elif current is None:
                val = float(raw) if any(c in raw for c in ".eE") else int(raw)
            else:
                val = raw
        except ValueError as exc:
            raise InvalidConfigError(f"bad value for {key!r}: {raw!r}") from exc
        setattr(obj, key, val)
    return obj
