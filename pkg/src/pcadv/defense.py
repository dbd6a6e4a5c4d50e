"""Input defenses, the unrestricted-adversarial predicate, and attack scoring."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import geometry
from .errors import InvalidConfigError, InvalidInputError
from .losses import AttackConfig
from .rng import numpy_rng, torch_rng

DEFENSES = ("none", "srs", "sor")


@dataclass
class DefenseConfig:
    method: str = "srs"
    srs_drop_ratio: float = 0.2
    sor_k: int = 2
    sor_alpha: float = 1.1

    def __post_init__(self):
        if self.method not in ("srs", "sor"):
            raise InvalidConfigError(f"defense method must be 'srs' or 'sor', got {self.method!r}")
        if self.method == "srs" and not 0 < self.srs_drop_ratio < 1:
            raise InvalidConfigError("srs_drop_ratio must be in (0, 1)")
        if self.method == "sor" and (self.sor_k < 1 or self.sor_alpha <= 0):
            raise InvalidConfigError("sor needs k >= 1 and alpha > 0")

    def apply(self, cloud, seed: int = 0):
        if self.method == "srs":
            return srs(cloud, self.srs_drop_ratio, seed)
        return sor(cloud, self.sor_k, self.sor_alpha)


def srs(cloud, drop_ratio: float = 0.2, seed: int = 0):
    """Keep a uniform random subset of N - floor(drop_ratio * N) points."""
    if not 0 < drop_ratio < 1:
        raise InvalidInputError("drop_ratio must be in (0, 1)")
    pts = geometry.as_points(cloud)
    n = pts.shape[0]
    keep = n - math.floor(drop_ratio * n)
    if keep < 1:
        raise InvalidInputError("srs would drop every point")
    idx = numpy_rng(seed).choice(n, size=keep, replace=False)
    return pts[torch.as_tensor(np.sort(idx))]


def sor(cloud, k: int = 2, alpha: float = 1.1):
    """Drop points whose mean kNN distance exceeds mean + alpha * std.

    Survivors keep their input order.
    """
    pts = geometry.as_points(cloud)
    if k >= pts.shape[0]:
        raise InvalidInputError(f"sor needs k < N (k={k}, N={pts.shape[0]})")
    d = geometry.knn(pts, k).distances.double().mean(-1)
    mu, sigma = d.mean(), d.std(unbiased=False)
    if float(sigma) == 0.0:
        return pts
    return pts[d <= mu + alpha * sigma]


@dataclass
class AdversarialVerdict:
    adversarial: bool
    success: bool
    valid: bool
    victim_pred: int
    aux_pred: int


def _predict(model, cloud) -> int:
    x = geometry.as_points(cloud).to(next(model.parameters()).dtype)
    model.eval()
    with torch.no_grad():
        out = model(x.unsqueeze(0) if x.dim() == 2 else x)
    if isinstance(out, tuple):  # discriminator: (score, logits)
        out = out[1]
    return int(out.reshape(-1, out.shape[-1])[0].argmax())


def is_unrestricted_adversarial(cloud, true_label: int, victim, aux_classifier, mode: str = "untargeted",
                                target_label: Optional[int] = None) -> AdversarialVerdict:
    """Victim fooled while the auxiliary classifier keeps the intended label."""
    if mode == "targeted" and target_label is None:
        raise InvalidConfigError("targeted mode needs target_label")
    vp = _predict(victim, cloud)
    ap = _predict(aux_classifier, cloud)
    success = vp == target_label if mode == "targeted" else vp != true_label
    valid = ap == true_label
    return AdversarialVerdict(success and valid, success, valid, vp, ap)


def sample_latents(noise_dim: int, n_samples: int, n_classes: int, seed: int,
                   cfg: Optional[AttackConfig] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-sample (z, y) pairs, each from its own stream keyed by (seed, index).

    In targeted mode labels are drawn from the classes other than the target.
    """
    classes = list(range(n_classes))
    if cfg is not None and cfg.mode == "targeted":
        classes.remove(cfg.target_label)
    zs, ys = [], []
    for i in range(n_samples):
        gen = torch_rng(seed, i)
        zs.append(torch.randn(noise_dim, generator=gen))
        ys.append(classes[int(torch.randint(len(classes), (1,), generator=gen))])
    return torch.stack(zs), torch.tensor(ys, dtype=torch.long)


def generate(generator, z, y, batch: int = 256) -> torch.Tensor:
    generator.eval()
    with torch.no_grad():
        return torch.cat([generator(z[i: i + batch], y[i: i + batch]) for i in range(0, len(z), batch)])


@dataclass
class AttackReport:
    total: int
    successes: int
    valid_successes: int
    per_class: Dict[int, Tuple[int, int, int]] = field(default_factory=dict)  # label -> (n, succ, valid succ)
    defense: str = "none"
    victim: str = ""

    @property
    def asr(self) -> float:
        return self.successes / self.total

    @property
    def validity_filtered_asr(self) -> float:
        return self.valid_successes / self.total

    HEADER = ("victim", "defense", "class", "total", "asr_pct", "validity_filtered_asr_pct")

    def rows(self) -> List[list]:
        rows = [[self.victim, self.defense, "all", self.total, f"{100 * self.asr:.2f}",
                 f"{100 * self.validity_filtered_asr:.2f}"]]
        for label in sorted(self.per_class):
            n, s, v = self.per_class[label]
            rows.append([self.victim, self.defense, label, n, f"{100 * s / n:.2f}", f"{100 * v / n:.2f}"])
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        w.writerows(self.rows())
        return buf.getvalue()


def score_clouds(clouds: torch.Tensor, labels: torch.Tensor, victim, aux_classifier, mode: str = "untargeted",
                 target_label: Optional[int] = None, defense: Optional[DefenseConfig] = None,
                 seed: int = 0, victim_tag: str = "") -> AttackReport:
    """Score a fixed sample set; validity is judged on the undefended clouds."""
    if len(clouds) < 1:
        raise InvalidInputError("need at least one sample")
    victim.eval()
    aux_classifier.eval()
    dtype = next(victim.parameters()).dtype
    clouds = clouds.to(dtype)
    with torch.no_grad():
        aux_pred = aux_classifier(clouds.to(next(aux_classifier.parameters()).dtype))[1].argmax(1)
        if defense is None:
            victim_pred = victim(clouds).argmax(1)
        else:
            victim_pred = torch.tensor([
                int(victim(defense.apply(c, seed=(seed * 7919 + i) & 0x7FFFFFFF).unsqueeze(0)).argmax())
                for i, c in enumerate(clouds)])
    labels = torch.as_tensor(labels)
    if mode == "targeted":
        if target_label is None:
            raise InvalidConfigError("targeted mode needs target_label")
        success = victim_pred == target_label
    else:
        success = victim_pred != labels
    valid = aux_pred == labels
    per_class = {}
    for c in sorted(set(labels.tolist())):
        m = labels == c
        per_class[c] = (int(m.sum()), int((success & m).sum()), int((success & valid & m).sum()))
    return AttackReport(len(clouds), int(success.sum()), int((success & valid).sum()), per_class,
                        defense.method if defense else "none", victim_tag)


def attack_success_rate(generator, victim, aux_classifier, n_samples: int, cfg: Optional[AttackConfig] = None,
                        defense: Optional[DefenseConfig] = None, seed: int = 0,
                        victim_tag: str = "") -> AttackReport:
    """Draw ``n_samples`` latent/label pairs, generate, and score the victim."""
    cfg = cfg or AttackConfig()
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    gcfg = generator.config
    z, y = sample_latents(gcfg.noise_dim, n_samples, gcfg.n_classes, seed, cfg)
    clouds = generate(generator, z.to(next(generator.parameters()).dtype), y)
    return score_clouds(clouds, y, victim, aux_classifier, cfg.mode, cfg.target_label, defense, seed, victim_tag)


def transfer_eval(generator, aux_classifier, victims: Sequence[Tuple[str, object]], original: str,
                  n_samples: int, seed: int = 0, cfg: Optional[AttackConfig] = None) -> List[AttackReport]:
    """One shared sample set scored against every victim; rows in input order."""
    cfg = cfg or AttackConfig()
    gcfg = generator.config
    z, y = sample_latents(gcfg.noise_dim, n_samples, gcfg.n_classes, seed, cfg)
    clouds = generate(generator, z.to(next(generator.parameters()).dtype), y)
    return [score_clouds(clouds, y, model, aux_classifier, cfg.mode, cfg.target_label, None, seed, tag)
            for tag, model in victims]


TRANSFER_HEADER = ("victim", "original", "total", "asr_pct", "validity_filtered_asr_pct")


def transfer_table(reports: Sequence[AttackReport], original: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRANSFER_HEADER)
    for r in reports:
        mark = "/" if r.victim == original else ""
        w.writerow([r.victim, mark, r.total, f"{100 * r.asr:.2f}", f"{100 * r.validity_filtered_asr:.2f}"])
    return buf.getvalue()
