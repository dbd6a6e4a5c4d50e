"""Command-line entry point: ``pcadv <subcommand> [options]``.

Every subcommand writes its artifacts under ``--out``.  Delimited reports
are accompanied by a PNG rendering of the same numbers.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import dataio, defense, metrics, models, plotting, training
from .errors import InvalidConfigError, InvalidInputError
from .losses import AttackConfig
from .rng import derive_seed

log = logging.getLogger("pcadv")


class UsageError(InvalidInputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _names(text: str) -> List[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


def _config(args, obj):
    if args.config:
        dataio.apply_config(obj, dataio.read_config(args.config))
        if hasattr(obj, "__post_init__"):
            obj.__post_init__()
    return obj


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(path):
    clouds, labels = dataio.load_cloud_set(path)
    if labels is None:
        raise InvalidInputError(f"{path}: labels required (give a manifest)")
    return clouds, labels


def _load(path, kinds):
    model = models.load_model(path)
    if model.KIND not in kinds:
        raise InvalidInputError(f"{path}: wrong model kind for this argument")
    return model


def _load_generator(path):
    return _load(path, {models.Generator.KIND})


def _load_discriminator(path):
    return _load(path, {models.Discriminator.KIND})


def _load_victim(path):
    return _load(path, {models.PointNetLite.KIND, models.EdgeConvLite.KIND})


def _attack_cfg(args) -> AttackConfig:
    return AttackConfig(mode=args.mode, target_label=args.target)


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    log.info("wrote %s", path)
    return path


# -- subcommands ---------------------------------------------------------------

def cmd_gen_data(args):
    out = _out(args)
    shapes = _names(args.shapes)
    for s in shapes:
        if s not in dataio.FAMILIES:
            raise InvalidInputError(f"unknown shape family {s!r}; choose from {', '.join(dataio.FAMILIES)}")
    if args.count < 1:
        raise InvalidInputError("--count must be >= 1")
    clouds, labels = dataio.make_dataset(shapes, args.n_points, args.count, args.seed, args.scale_jitter,
                                         args.rotation_jitter, args.noise)
    names = dict(enumerate(shapes))
    for j, mesh in enumerate(args.mesh or []):
        tri = dataio.read_off(mesh)
        label = len(names)
        names[label] = Path(mesh).stem
        extra = [dataio.normalize(dataio.sample_mesh_surface(tri, args.n_points, derive_seed(args.seed, 50 + j, i)))
                 for i in range(args.count)]
        clouds = np.concatenate([clouds, np.stack(extra).astype(np.float32)])
        labels = np.concatenate([labels, np.full(args.count, label, dtype=np.int64)])
    manifest = dataio.write_cloud_set(out, clouds, labels, names)
    log.info("wrote %d clouds, %d classes to %s", len(clouds), len(names), manifest)


def cmd_train_victim(args):
    out = _out(args)
    cfg = _config(args, training.VictimTrainConfig(rng_seed=args.seed))
    if args.epochs is not None:
        cfg.epochs = args.epochs
    reports = []
    for arch in _names(args.arch):
        if arch not in models.VICTIM_ARCHS:
            raise InvalidInputError(f"unknown victim architecture {arch!r}")
        model, report = training.train_victim(_dataset(args.data), arch, cfg)
        models.save_model(out / f"victim_{arch}.ckpt", model)
        reports.append(report)
        log.info("%s: train %.3f val %.3f", arch, report.train_accuracy, report.val_accuracy)
    header = reports[0].to_csv().splitlines()[0]
    _write(out / "victim_report.csv", "\n".join([header] + [r.to_csv().splitlines()[1] for r in reports]) + "\n")


def _train_config(args, stage) -> training.TrainConfig:
    cfg = _config(args, training.TrainConfig(stage=stage, rng_seed=args.seed))
    if args.steps is not None:
        cfg.steps = args.steps
    if getattr(args, "lambda1", None) is not None:
        cfg.lambda1 = args.lambda1
    cfg.__post_init__()
    return cfg


def _write_train_outputs(out: Path, prefix: str, result):
    _write(out / f"{prefix}_log.csv", training.records_to_csv(result.log, training.TrainLogRecord))
    _write(out / f"{prefix}_critic_log.csv", training.records_to_csv(result.critic_log, training.CriticLogRecord))
    rows = ["step,sigma_min,sigma_max"] + [f"{s},{lo!r},{hi!r}" for s, lo, hi in result.sn_sigmas]
    _write(out / f"{prefix}_sn_sigma.csv", "\n".join(rows) + "\n")
    if result.log:
        plotting.training_curves(result.log, out / f"{prefix}_log.png", prefix)


def cmd_train_gan(args):
    out = _out(args)
    dataset = _dataset(args.data)
    cfg = _train_config(args, "gan")
    n_classes = int(np.max(dataset[1])) + 1
    gcfg = models.GeneratorConfig(n_classes=n_classes)
    if dataset[0].shape[1] != gcfg.n_points:
        raise InvalidInputError(f"generator emits {gcfg.n_points} points, data has {dataset[0].shape[1]}")
    gen = models.build_generator(gcfg, derive_seed(args.seed, 10))
    disc = models.build_discriminator(models.DiscriminatorConfig(n_classes=n_classes), derive_seed(args.seed, 11))
    result = training.train_gan_stage(dataset, gen, disc, cfg, checkpoint_dir=out / "checkpoints")
    models.save_model(out / "generator.ckpt", gen)
    models.save_model(out / "discriminator.ckpt", disc)
    _write_train_outputs(out, "gan", result)


def cmd_train_adv(args):
    out = _out(args)
    dataset = _dataset(args.data)
    cfg = _train_config(args, "adversarial")
    gen, disc = _load_generator(args.generator), _load_discriminator(args.discriminator)
    victim = _load_victim(args.victim)
    result = training.train_adversarial_stage(dataset, gen, disc, victim, _attack_cfg(args), cfg,
                                              checkpoint_dir=out / "checkpoints")
    models.save_model(out / "adv_generator.ckpt", gen)
    models.save_model(out / "adv_discriminator.ckpt", disc)
    _write_train_outputs(out, "adv", result)


def cmd_attack(args):
    out = _out(args)
    gen, disc, victim = (_load_generator(args.generator), _load_discriminator(args.discriminator),
                         _load_victim(args.victim))
    cfg = _attack_cfg(args)
    cfg.validate(gen.config.n_classes)
    dcfg = None if args.defense == "none" else _defense_config(args, args.defense)
    z, y = defense.sample_latents(gen.config.noise_dim, args.n_samples, gen.config.n_classes, args.seed, cfg)
    clouds = defense.generate(gen, z, y)
    report = defense.score_clouds(clouds, y, victim, disc, cfg.mode, cfg.target_label, dcfg, args.seed,
                                  models.victim_tag(victim))
    _write(out / "attack_report.csv", report.to_csv())
    plotting.attack_bars(report, out / "attack_report.png")
    dataio.write_cloud_set(out / "generated", clouds.numpy(), y.numpy())
    plotting.cloud_grid(clouds.numpy(), y.numpy(), out / "generated.png")


def _defense_config(args, method) -> defense.DefenseConfig:
    cfg = defense.DefenseConfig(method=method)
    cfg = _config(args, cfg)
    if args.drop_ratio is not None:
        cfg.srs_drop_ratio = args.drop_ratio
    if args.k is not None:
        cfg.sor_k = args.k
    if args.alpha is not None:
        cfg.sor_alpha = args.alpha
    cfg.__post_init__()
    return cfg


def cmd_defend(args):
    out = _out(args)
    clouds, labels = dataio.load_cloud_set(args.data)
    cfg = _defense_config(args, args.method)
    kept = [cfg.apply(c, seed=derive_seed(args.seed, i)).numpy() for i, c in enumerate(clouds)]
    labels = labels if labels is not None else np.zeros(len(kept), dtype=np.int64)
    src = Path(args.data)
    src = src / "manifest.csv" if src.is_dir() else src
    names = dataio.DatasetManifest.read(src).class_names if src.exists() else None
    dataio.write_cloud_set(out, kept, labels, names)
    rows = ["index,n_in,n_out"] + [f"{i},{len(c)},{len(k)}" for i, (c, k) in enumerate(zip(clouds, kept))]
    _write(out / "defense_summary.csv", "\n".join(rows) + "\n")


def cmd_eval(args):
    out = _out(args)
    gen, gen_y = dataio.load_cloud_set(args.gen)
    ref, ref_y = dataio.load_cloud_set(args.ref)
    fit = not args.no_fit
    if gen_y is not None and ref_y is not None and not args.pooled:
        per_class = {}
        for c in sorted(set(ref_y.tolist())):
            if (gen_y == c).any():
                per_class[c] = metrics.metric_report(gen[gen_y == c], ref[ref_y == c], args.grid, fit)
        if not per_class:
            raise InvalidInputError("generated and reference sets share no class")
        report = metrics.macro_average(list(per_class.values()))
        rows = ["class," + ",".join(metrics.MetricReport.HEADER)]
        rows += [f"{c}," + ",".join(r.row()) for c, r in per_class.items()]
        _write(out / "metrics_per_class.csv", "\n".join(rows) + "\n")
    else:
        report = metrics.metric_report(gen, ref, args.grid, fit)
    _write(out / "metrics.csv", report.to_csv())


def cmd_transfer(args):
    out = _out(args)
    gen, disc = _load_generator(args.generator), _load_discriminator(args.discriminator)
    paths = _names(args.victims)
    if not paths:
        raise InvalidInputError("--victims needs at least one checkpoint")
    tags = [Path(p).stem for p in paths]
    if len(set(tags)) != len(tags):
        raise InvalidInputError("victim checkpoints must have distinct file names")
    victims = [(t, _load_victim(p)) for t, p in zip(tags, paths)]
    original = Path(args.original).stem if args.original else tags[0]
    if original not in tags:
        raise InvalidInputError(f"original victim {original!r} is not among --victims")
    reports = defense.transfer_eval(gen, disc, victims, original, args.n_samples, args.seed, _attack_cfg(args))
    _write(out / "transfer.csv", defense.transfer_table(reports, original))
    plotting.transfer_bars(reports, original, out / "transfer.png")


def cmd_sweep(args):
    out = _out(args)
    dataset = _dataset(args.data)
    cfg = _train_config(args, "adversarial")
    gen, disc = _load_generator(args.generator), _load_discriminator(args.discriminator)
    victim = _load_victim(args.victim)
    values = args.lambdas
    if not values:
        raise InvalidInputError("--lambdas needs at least one value")
    rows = training.lambda1_sweep(values, dataset, gen, disc, victim, _attack_cfg(args), cfg,
                                  n_eval=args.n_samples,
                                  on_row=lambda r: log.info("lambda1=%g asr=%.3f", r.lambda1, r.attack.asr))
    _write(out / "sweep.csv", training.sweep_table(rows))
    plotting.sweep_curve(rows, out / "sweep.png")
    asr = [r.attack.asr for r in rows]
    trend = "non-decreasing" if all(a <= b for a, b in zip(asr, asr[1:])) else "not monotone"
    _write(out / "sweep_trend.txt", f"ASR vs lambda1: {trend} (expected: rises with lambda1)\n")


def cmd_export(args):
    out = _out(args)
    clouds, _ = dataio.load_cloud_set(args.data)
    for i, c in enumerate(clouds):
        dataio.export_xyz(out / f"{i:05d}.xyz", c)
    log.info("exported %d clouds", len(clouds))


# -- parser --------------------------------------------------------------------

def _attack_flags(p):
    p.add_argument("--mode", choices=("untargeted", "targeted"), default="untargeted")
    p.add_argument("--target", type=int, default=None, help="target label for --mode targeted")


def _defense_flags(p):
    p.add_argument("--drop-ratio", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", default=None, help="key = value file for the subcommand's settings")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="pcadv", description="Unrestricted adversarial point-cloud generation.",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "synthesize a labeled dataset")
    p.add_argument("--shapes", default="sphere,cube")
    p.add_argument("--mesh", action="append", help="ASCII OFF mesh added as an extra class (repeatable)")
    p.add_argument("--n-points", type=int, default=64)
    p.add_argument("--count", type=int, default=100, help="clouds per class")
    p.add_argument("--scale-jitter", type=float, default=0.0)
    p.add_argument("--rotation-jitter", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.0)

    p = add("train-victim", cmd_train_victim, "train victim classifiers")
    p.add_argument("--data", required=True)
    p.add_argument("--arch", default="pointnet_lite", help="comma-separated architectures")
    p.add_argument("--epochs", type=int, default=None)

    p = add("train-gan", cmd_train_gan, "stage 1: conditional GAN training")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=None)

    p = add("train-adv", cmd_train_adv, "stage 2: adversarial training against a frozen victim")
    for flag in ("--data", "--generator", "--discriminator", "--victim"):
        p.add_argument(flag, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lambda1", type=float, default=None)
    _attack_flags(p)

    p = add("attack", cmd_attack, "generate samples and score a victim")
    for flag in ("--generator", "--discriminator", "--victim"):
        p.add_argument(flag, required=True)
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--defense", choices=defense.DEFENSES, default="none")
    _attack_flags(p)
    _defense_flags(p)

    p = add("defend", cmd_defend, "apply SRS or SOR to a cloud set")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("srs", "sor"), default="srs")
    _defense_flags(p)

    p = add("eval", cmd_eval, "generation-quality metrics between two cloud sets")
    p.add_argument("--gen", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--grid", type=int, default=metrics.DEFAULT_GRID)
    p.add_argument("--pooled", action="store_true", help="ignore labels and compare the pooled sets")
    p.add_argument("--no-fit", action="store_true", help="skip fitting clouds into the JSD cube")

    p = add("transfer", cmd_transfer, "score one sample set against several victims")
    p.add_argument("--generator", required=True)
    p.add_argument("--discriminator", required=True)
    p.add_argument("--victims", required=True, help="comma-separated victim checkpoints")
    p.add_argument("--original", default=None, help="checkpoint the generator was trained against")
    p.add_argument("--n-samples", type=int, default=200)
    _attack_flags(p)

    p = add("sweep", cmd_sweep, "stage 2 once per lambda1 value")
    for flag in ("--data", "--generator", "--discriminator", "--victim"):
        p.add_argument(flag, required=True)
    p.add_argument("--lambdas", type=_floats, default=[0.001, 0.01, 0.1])
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--n-samples", type=int, default=200)
    _attack_flags(p)

    p = add("export", cmd_export, "write clouds as x y z text files")
    p.add_argument("--data", required=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        args.func(args)
    except (InvalidInputError, InvalidConfigError, FileNotFoundError, IsADirectoryError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except Exception as exc:  # noqa: BLE001
        sys.stderr.write(f"runtime failure: {type(exc).__name__}: {exc}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
