"""Optimization: Adam, victim training, and the two generator training stages.

Stage ``gan`` trains generator and critic as an auxiliary-classifier
WGAN-GP with outlier and uniform regularizers.  Stage ``adversarial``
continues from there, adding the masked objective loss against a frozen
victim while the critic keeps training.
"""

from __future__ import annotations

import contextlib
import copy
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import defense, losses, metrics, models
from .errors import InvalidConfigError, InvalidInputError, NonFiniteLossError
from .losses import AttackConfig, LossWeights, UniformLossParams
from .rng import numpy_rng, torch_rng

log = logging.getLogger(__name__)


# -- Adam ----------------------------------------------------------------------

def optimizer_step(param: torch.Tensor, grad: torch.Tensor, m: torch.Tensor, v: torch.Tensor, t: int,
                   lr: float, betas=(0.0, 0.9), eps: float = 1e-8):
    """One bias-corrected Adam update; ``t`` is the 1-based step count.

    Returns ``(new_param, new_m, new_v)`` without touching the inputs.
    """
    if grad.shape != param.shape or m.shape != param.shape or v.shape != param.shape:
        raise InvalidInputError(f"gradient/moment shape mismatch for parameter {tuple(param.shape)}")
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return param - lr * m_hat / (v_hat.sqrt() + eps), m, v


class Adam:
    def __init__(self, params, lr: float, betas=(0.0, 0.9), eps: float = 1e-8):
        self.params = [p for p in params]
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        with torch.no_grad():
            for i, (p, g) in enumerate(zip(self.params, grads)):
                if g is None:
                    g = torch.zeros_like(p)
                new_p, self.m[i], self.v[i] = optimizer_step(p, g, self.m[i], self.v[i], self.t,
                                                             self.lr, self.betas, self.eps)
                p.copy_(new_p)


# -- configuration and logs ----------------------------------------------------

# Stage 2 starts from a converged stage-1 generator; the larger step lets the
# small objective term move it before the critic catches up.
DEFAULT_GENERATOR_LR = {"gan": 2e-4, "adversarial": 1e-3}


@dataclass
class TrainConfig:
    stage: str = "gan"
    steps: int = 500
    batch_size: int = 16
    critic_steps: int = 5
    lr_generator: Optional[float] = None  # None: the stage default below
    lr_critic: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.9
    lambda1: float = 0.01
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda_gp: float = 10.0
    aux_weight: float = 1.0
    outlier_k: int = 4
    uniform_radius: float = 0.25
    rng_seed: int = 0
    checkpoint_interval: int = 100

    def __post_init__(self):
        if self.stage not in ("gan", "adversarial"):
            raise InvalidConfigError(f"unknown stage {self.stage!r}")
        for name in ("batch_size", "critic_steps", "checkpoint_interval", "outlier_k"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be positive")
        if self.steps < 0:
            raise InvalidConfigError("steps must be >= 0")
        if self.generator_lr < 0 or self.lr_critic < 0:
            raise InvalidConfigError("learning rates must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidConfigError("moment coefficients must lie in [0, 1)")

    @property
    def generator_lr(self) -> float:
        if self.lr_generator is not None:
            return self.lr_generator
        return DEFAULT_GENERATOR_LR[self.stage]

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda_gp)


@dataclass
class TrainLogRecord:
    step: int
    l_dis: float
    l_obj: float
    l_out: float
    l_ul: float
    total: float
    critic_loss: float
    gradient_penalty: float
    batch_asr: float
    aux_accuracy: float


@dataclass
class CriticLogRecord:
    step: int
    critic_iter: int
    critic_loss: float
    gradient_penalty: float
    wasserstein: float


def records_to_csv(records: Sequence, cls=None) -> str:
    cls = cls or type(records[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f.name for f in fields(cls)])
    for r in records:
        w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])
    return buf.getvalue()


def records_from_csv(text: str, cls) -> list:
    rows = list(csv.reader(io.StringIO(text)))
    names = [f.name for f in fields(cls)]
    if not rows or rows[0] != names:
        raise InvalidInputError("log header does not match record fields")
    types = [f.type for f in fields(cls)]
    return [cls(*(int(v) if t in (int, "int") else float(v) for v, t in zip(r, types))) for r in rows[1:]]


@dataclass
class TrainResult:
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    log: List[TrainLogRecord] = field(default_factory=list)
    critic_log: List[CriticLogRecord] = field(default_factory=list)
    sn_sigmas: List[Tuple[int, float, float]] = field(default_factory=list)  # (step, min, max)
    uniform_params: Optional[UniformLossParams] = None


# -- helpers -------------------------------------------------------------------

@contextlib.contextmanager
def frozen(model):
    """Evaluation mode with gradients disabled for the model's parameters."""
    flags = [p.requires_grad for p in model.parameters()]
    was_training = model.training
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        yield model
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
        model.train(was_training)


def _as_dataset(clouds, labels, dtype):
    x = torch.as_tensor(np.asarray(clouds), dtype=dtype)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if x.dim() != 3 or x.shape[-1] != 3 or len(x) != len(y) or len(x) == 0:
        raise InvalidInputError("dataset must be (K, N, 3) clouds with K labels")
    return x, y


def _param_dtype(model):
    return next(model.parameters()).dtype


def _check_finite(name, value, record):
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite {name} at step {record.get('step')}", record)


SN_BAND = (0.95, 1.05)


def sn_sigma_range(disc) -> Tuple[float, float]:
    """Smallest and largest exact top singular value over the normalized critic maps."""
    sig = [m.exact_normalized_sigma() for m in disc.sn_layers()]
    return min(sig), max(sig)


def _sample_fake_labels(n, n_classes, cfg: AttackConfig, gen):
    if cfg.mode == "targeted":
        classes = torch.tensor([c for c in range(n_classes) if c != cfg.target_label])
        return classes[torch.randint(len(classes), (n,), generator=gen)]
    return torch.randint(n_classes, (n,), generator=gen)


# -- the two stages ------------------------------------------------------------

def _run_stage(dataset, generator, discriminator, config: TrainConfig, stage: str, victim=None,
               attack_cfg: Optional[AttackConfig] = None, checkpoint_dir=None,
               uniform_params: Optional[UniformLossParams] = None,
               on_step: Optional[Callable[[TrainLogRecord], None]] = None) -> TrainResult:
    dtype = _param_dtype(generator)
    real_x, real_y = _as_dataset(*dataset, dtype)
    n_classes = generator.config.n_classes
    cfg = copy.deepcopy(attack_cfg) if attack_cfg is not None else AttackConfig()
    cfg.weights = config.weights
    cfg.validate(n_classes)
    gen_rng = torch_rng(config.rng_seed, 1)
    b = config.batch_size
    if uniform_params is None:
        first = real_x[torch.randperm(len(real_x), generator=torch_rng(config.rng_seed, 2))[:b]]
        uniform_params = UniformLossParams.calibrate(first, config.uniform_radius)
    result = TrainResult(generator, discriminator, uniform_params=uniform_params)
    opt_g = Adam(generator.parameters(), config.generator_lr, (config.beta1, config.beta2))
    opt_d = Adam(discriminator.parameters(), config.lr_critic, (config.beta1, config.beta2))
    d_params = list(discriminator.parameters())
    g_params = list(generator.parameters())
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    generator.train()
    discriminator.train()
    victim_ctx = frozen(victim) if victim is not None else contextlib.nullcontext()
    with victim_ctx:
        for step in range(1, config.steps + 1):
            record = {"step": step}
            for it in range(config.critic_steps):
                idx = torch.randint(len(real_x), (b,), generator=gen_rng)
                real, real_lab = real_x[idx], real_y[idx]
                z = torch.randn(b, generator.config.noise_dim, generator=gen_rng, dtype=dtype)
                fake_lab = _sample_fake_labels(b, n_classes, cfg, gen_rng)
                eps = torch.rand(b, generator=gen_rng, dtype=dtype)
                with torch.no_grad():
                    fake = generator(z, fake_lab)
                s_real, l_real = discriminator(real)
                s_fake, l_fake = discriminator(fake)
                gp = losses.gradient_penalty(discriminator.critic, real, fake, eps)
                c_loss = losses.critic_loss(s_real, s_fake, l_real, l_fake, real_lab, fake_lab, gp,
                                            config.lambda_gp, config.aux_weight)
                record.update(critic_loss=c_loss.item(), gradient_penalty=gp.item())
                _check_finite("critic loss", record["critic_loss"], record)
                grads = torch.autograd.grad(c_loss, d_params, allow_unused=True)
                opt_d.step(grads)
                result.critic_log.append(CriticLogRecord(step, it, record["critic_loss"], record["gradient_penalty"],
                                                         (s_real.mean() - s_fake.mean()).item()))

            z = torch.randn(b, generator.config.noise_dim, generator=gen_rng, dtype=dtype)
            fake_lab = _sample_fake_labels(b, n_classes, cfg, gen_rng)
            fake = generator(z, fake_lab)
            total, parts = losses.generator_loss(
                fake, fake_lab, discriminator, cfg, stage, victim=victim, outlier_k=config.outlier_k,
                uniform_params=uniform_params)
            record.update(l_dis=parts["dis"].item(), l_obj=parts["obj"].item(), l_out=parts["out"].item(),
                          l_ul=parts["ul"].item(), total=total.item())
            for key in ("l_dis", "l_obj", "l_out", "l_ul", "total"):
                _check_finite(key, record[key], record)
            grads = torch.autograd.grad(total, g_params, allow_unused=True)
            opt_g.step(grads)

            aux_acc = float((parts["aux_logits"].argmax(1) == fake_lab).double().mean())
            if victim is not None:
                with torch.no_grad():
                    pred = victim(fake.detach()).argmax(1)
                hit = pred == cfg.target_label if cfg.mode == "targeted" else pred != fake_lab
                asr = float(hit.double().mean())
            else:
                asr = float("nan")
            rec = TrainLogRecord(step, record["l_dis"], record["l_obj"], record["l_out"], record["l_ul"],
                                 record["total"], record["critic_loss"], record["gradient_penalty"], asr, aux_acc)
            result.log.append(rec)
            if on_step is not None:
                on_step(rec)
            if step % config.checkpoint_interval == 0 or step == config.steps:
                lo, hi = sn_sigma_range(discriminator)
                result.sn_sigmas.append((step, lo, hi))
                if not SN_BAND[0] <= lo <= hi <= SN_BAND[1]:
                    log.warning("step %d: normalized spectral norms span [%.4f, %.4f], outside %s",
                                step, lo, hi, SN_BAND)
                if checkpoint_dir is not None:
                    models.save_model(Path(checkpoint_dir) / f"{stage}_generator_{step:06d}.ckpt", generator)
                    models.save_model(Path(checkpoint_dir) / f"{stage}_discriminator_{step:06d}.ckpt",
                                      discriminator)
                log.info("%s step %d: L_dis=%.4f L_obj=%.4f critic=%.4f asr=%.3f aux=%.3f", stage, step,
                         rec.l_dis, rec.l_obj, rec.critic_loss, rec.batch_asr, rec.aux_accuracy)
    return result


def train_gan_stage(dataset, generator, discriminator, config: TrainConfig, checkpoint_dir=None,
                    on_step=None) -> TrainResult:
    """Stage 1: conditional WGAN-GP training with outlier and uniform terms.

    ``dataset`` is a ``(clouds, labels)`` pair.  Models are updated in place
    and returned inside the result together with the step logs.
    """
    return _run_stage(dataset, generator, discriminator, config, "gan", checkpoint_dir=checkpoint_dir,
                      on_step=on_step)


def train_adversarial_stage(dataset, generator, discriminator, victim, attack_cfg: AttackConfig,
                            config: TrainConfig, checkpoint_dir=None, on_step=None) -> TrainResult:
    """Stage 2: stage 1 plus ``lambda1 * L_obj`` against a frozen victim."""
    if victim is None:
        raise InvalidConfigError("adversarial stage needs a victim model")
    return _run_stage(dataset, generator, discriminator, config, "adversarial", victim=victim,
                      attack_cfg=attack_cfg, checkpoint_dir=checkpoint_dir, on_step=on_step)


# -- victim training -----------------------------------------------------------

@dataclass
class VictimTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    val_fraction: float = 0.2
    rng_seed: int = 0


@dataclass
class VictimReport:
    arch: str
    train_accuracy: float
    val_accuracy: float
    n_train: int
    n_val: int

    def to_csv(self) -> str:
        return ("arch,train_accuracy,val_accuracy,n_train,n_val\n"
                f"{self.arch},{self.train_accuracy!r},{self.val_accuracy!r},{self.n_train},{self.n_val}\n")


def stratified_split(labels, val_fraction: float, seed: int):
    labels = np.asarray(labels)
    rng = numpy_rng(seed, 3)
    train, val = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_val = int(round(val_fraction * len(idx)))
        val.extend(idx[:n_val])
        train.extend(idx[n_val:])
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(val, dtype=np.int64))


def accuracy(model, clouds, labels, batch: int = 256) -> float:
    if len(clouds) == 0:
        return float("nan")
    model.eval()
    with torch.no_grad():
        pred = torch.cat([model(clouds[i: i + batch]).argmax(1) for i in range(0, len(clouds), batch)])
    return float((pred == labels).double().mean())


def train_victim(dataset, arch: str = "pointnet_lite", config: Optional[VictimTrainConfig] = None,
                 dtype=torch.float32, **victim_kwargs):
    """Train a victim classifier with softmax cross-entropy.

    Returns ``(model, VictimReport)``; deterministic for a fixed seed.
    """
    config = config or VictimTrainConfig()
    x_np, y_np = dataset
    y_np = np.asarray(y_np)
    n_classes = len(np.unique(y_np))
    if n_classes < 2:
        raise InvalidInputError("victim training needs at least two classes")
    x, y = _as_dataset(x_np, y_np, dtype)
    tr, va = stratified_split(y_np, config.val_fraction, config.rng_seed)
    model = models.make_victim(models.VictimConfig(arch=arch, n_classes=int(y_np.max()) + 1, **victim_kwargs),
                               config.rng_seed).to(dtype)
    opt = Adam(model.parameters(), config.lr, (0.9, 0.999))
    params = list(model.parameters())
    gen = torch_rng(config.rng_seed, 4)
    tr_t = torch.as_tensor(tr)
    for _ in range(config.epochs):
        model.train()
        order = tr_t[torch.randperm(len(tr_t), generator=gen)]
        for i in range(0, len(order), config.batch_size):
            idx = order[i: i + config.batch_size]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.step(torch.autograd.grad(loss, params))
    report = VictimReport(arch, accuracy(model, x[tr_t], y[tr_t]), accuracy(model, x[torch.as_tensor(va)],
                                                                             y[torch.as_tensor(va)]), len(tr), len(va))
    model.eval()
    return model, report


# -- evaluation helpers --------------------------------------------------------

def generate_per_class(generator, n_per_class: int, seed: int) -> Tuple[torch.Tensor, torch.Tensor]:
    n_classes = generator.config.n_classes
    z, _ = defense.sample_latents(generator.config.noise_dim, n_per_class * n_classes, n_classes, seed)
    y = torch.arange(n_classes).repeat_interleave(n_per_class)
    return defense.generate(generator, z.to(_param_dtype(generator)), y), y


def per_class_mmd_cd(generator, dataset, n_per_class: int = 32, seed: int = 0) -> Dict[int, float]:
    clouds, labels = dataset
    labels = np.asarray(labels)
    fake, fy = generate_per_class(generator, n_per_class, seed)
    out = {}
    for c in range(generator.config.n_classes):
        ref = torch.as_tensor(np.asarray(clouds)[labels == c])
        out[c] = metrics.mmd(fake[fy == c], ref, "chamfer")
    return out


def per_class_reports(generator, dataset, n_per_class: int = 32, seed: int = 0) -> Dict[int, metrics.MetricReport]:
    clouds, labels = dataset
    labels = np.asarray(labels)
    fake, fy = generate_per_class(generator, n_per_class, seed)
    return {c: metrics.metric_report(fake[fy == c], torch.as_tensor(np.asarray(clouds)[labels == c]))
            for c in range(generator.config.n_classes)}


# -- lambda1 sweep -------------------------------------------------------------

SWEEP_HEADER = ("lambda1", "asr_pct", "validity_filtered_asr_pct") + metrics.MetricReport.HEADER


@dataclass
class SweepRow:
    lambda1: float
    attack: defense.AttackReport
    quality: metrics.MetricReport


def lambda1_sweep(values: Sequence[float], dataset, generator, discriminator, victim, attack_cfg: AttackConfig,
                  config: TrainConfig, n_eval: int = 200, n_per_class: int = 32, on_row=None) -> List[SweepRow]:
    """Stage 2 from the same starting point once per lambda1 value.

    The input models are left untouched; each run works on deep copies.
    """
    if not values:
        raise InvalidInputError("sweep needs at least one lambda1 value")
    rows = []
    for lam in values:
        g, d = copy.deepcopy(generator), copy.deepcopy(discriminator)
        cfg = copy.deepcopy(config)
        cfg.lambda1 = float(lam)
        train_adversarial_stage(dataset, g, d, victim, attack_cfg, cfg)
        report = defense.attack_success_rate(g, victim, d, n_eval, attack_cfg, seed=config.rng_seed,
                                             victim_tag=models.victim_tag(victim))
        quality = metrics.macro_average(list(per_class_reports(g, dataset, n_per_class, config.rng_seed).values()))
        row = SweepRow(float(lam), report, quality)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def sweep_table(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in rows:
        w.writerow([repr(r.lambda1), f"{100 * r.attack.asr:.2f}", f"{100 * r.attack.validity_filtered_asr:.2f}"]
                   + r.quality.row())
    return buf.getvalue()
