import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from pcadv import defense, models
from pcadv.errors import InvalidConfigError, InvalidInputError
from pcadv.losses import AttackConfig


def sphere_points(n):
    i = np.arange(n) + 0.5
    phi, th = np.arccos(1 - 2 * i / n), math.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], 1)


def grid(n=4):
    g = np.arange(n, dtype=float)
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)


# -- srs -----------------------------------------------------------------------

def test_srs_drops_twenty_percent():
    p = np.random.default_rng(0).normal(size=(100, 3))
    out = defense.srs(p, 0.2, seed=1).numpy()
    assert out.shape == (80, 3)
    rows = {tuple(r) for r in p}
    assert all(tuple(r) in rows for r in out)
    assert len({tuple(r) for r in out}) == 80
    assert torch.equal(defense.srs(p, 0.2, 1), defense.srs(p, 0.2, 1))


def test_srs_null_drop_keeps_everything():
    p = np.random.default_rng(1).normal(size=(4, 3))
    out = defense.srs(p, 0.2, seed=3).numpy()  # floor(0.8) = 0
    assert sorted(map(tuple, out)) == sorted(map(tuple, p))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.floats(0.01, 0.99), st.integers(0, 1000))
def test_srs_size_property(n, ratio, seed):
    p = np.random.default_rng(seed).normal(size=(n, 3))
    keep = n - math.floor(ratio * n)
    if keep < 1:
        with pytest.raises(InvalidInputError):
            defense.srs(p, ratio, seed)
    else:
        assert defense.srs(p, ratio, seed).shape == (keep, 3)


def test_srs_rejects_bad_ratio():
    with pytest.raises(InvalidInputError):
        defense.srs(np.zeros((5, 3)), 1.0)


# -- sor -----------------------------------------------------------------------

def test_sor_removes_planted_outlier():
    s = sphere_points(63)
    p = np.concatenate([s, [[10.0, 10.0, 10.0]]])
    out = defense.sor(p, 2, 1.1).numpy()
    np.testing.assert_array_equal(out, s)
    # direct statistics: only the far point exceeds mu + 1.1 sigma
    d2 = ((p[:, None] - p[None]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    d = np.sort(np.sqrt(d2), 1)[:, :2].mean(1)
    assert np.flatnonzero(d > d.mean() + 1.1 * d.std()).tolist() == [63]


def test_sor_keeps_zero_variance_grid_and_is_idempotent_there():
    g = grid()
    out = defense.sor(g, 2, 1.1)
    np.testing.assert_array_equal(out.numpy(), g)
    np.testing.assert_array_equal(defense.sor(out, 2, 1.1).numpy(), g)


def test_sor_preserves_order_and_rejects_large_k():
    p = np.concatenate([sphere_points(20), [[5.0, 5, 5]], sphere_points(7) * 1.01])
    out = defense.sor(p, 2, 1.1).numpy()
    kept = [i for i in range(len(p)) if any(np.array_equal(p[i], r) for r in out)]
    assert kept == sorted(kept) and 20 not in kept
    with pytest.raises(InvalidInputError):
        defense.sor(np.zeros((3, 3)), 3)


def test_defense_config_validation():
    with pytest.raises(InvalidConfigError):
        defense.DefenseConfig("blur")
    with pytest.raises(InvalidConfigError):
        defense.DefenseConfig("srs", srs_drop_ratio=0)
    with pytest.raises(InvalidConfigError):
        defense.DefenseConfig("sor", sor_k=0)


# -- predicate and attack reports ---------------------------------------------

class Constant(torch.nn.Module):
    def __init__(self, label, n_classes=2):
        super().__init__()
        self.w = torch.nn.Parameter(torch.zeros(1))
        self.label, self.n_classes = label, n_classes

    def forward(self, x):
        b = x.shape[0] if x.dim() == 3 else 1
        out = torch.zeros(b, self.n_classes) + self.w
        out[:, self.label] = 1.0
        return out if x.dim() == 3 else out[0]


def test_predicate_cases():
    cloud = torch.zeros(8, 3)
    v = defense.is_unrestricted_adversarial(cloud, 0, Constant(0), Constant(0))
    assert not v.adversarial and not v.success
    v = defense.is_unrestricted_adversarial(cloud, 0, Constant(1), Constant(0))
    assert v.adversarial and v.success and v.valid
    v = defense.is_unrestricted_adversarial(cloud, 0, Constant(1), Constant(1))
    assert v.success and not v.valid and not v.adversarial
    v = defense.is_unrestricted_adversarial(cloud, 0, Constant(1, 3), Constant(0, 3), "targeted", 2)
    assert not v.success
    with pytest.raises(InvalidConfigError):
        defense.is_unrestricted_adversarial(cloud, 0, Constant(1), Constant(0), "targeted")


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 1))
def test_predicate_false_when_victim_is_aux(seed, label):
    net = models.make_victim(models.VictimConfig("pointnet_lite", 2, widths=(8, 8), head=8), seed)
    cloud = torch.randn(16, 3, generator=torch.Generator().manual_seed(seed))
    assert not defense.is_unrestricted_adversarial(cloud, label, net, net).adversarial


def tiny_generator():
    cfg = models.GeneratorConfig(noise_dim=4, n_classes=2, label_embed_dim=2, branching=(2, 4), feature_dims=(6, 5, 4))
    return models.build_generator(cfg, 0)


class ConstDisc(Constant):
    def forward(self, x):
        out = super().forward(x)
        return out[..., 0], out


def test_attack_success_rate_constant_victims():
    gen = tiny_generator()
    cfg = AttackConfig()
    r = defense.attack_success_rate(gen, Constant(0), ConstDisc(0), 40, cfg, seed=1)
    z, y = defense.sample_latents(4, 40, 2, 1, cfg)
    n_one = int((y == 1).sum())
    assert r.total == 40 and r.successes == n_one and r.valid_successes == 0
    assert r.validity_filtered_asr <= r.asr
    # all-class-1 labels against a class-0 victim: always fooled
    clouds = torch.zeros(5, 8, 3)
    rep = defense.score_clouds(clouds, torch.ones(5, dtype=torch.long), Constant(0), ConstDisc(1))
    assert rep.asr == 1.0 and rep.validity_filtered_asr == 1.0
    rep = defense.score_clouds(clouds, torch.zeros(5, dtype=torch.long), Constant(0), ConstDisc(0))
    assert rep.asr == 0.0


def test_defended_report_differs_only_in_victim_inputs():
    gen = tiny_generator()
    victim = models.make_victim(models.VictimConfig("pointnet_lite", 2, widths=(8, 8), head=8), 2)
    disc = models.build_discriminator(models.DiscriminatorConfig(width=8, pool_dim=8), 2)
    plain = defense.attack_success_rate(gen, victim, disc, 30, seed=5)
    srs = defense.attack_success_rate(gen, victim, disc, 30, defense=defense.DefenseConfig("srs"), seed=5)
    assert plain.total == srs.total
    assert plain.defense == "none" and srs.defense == "srs"
    # the validity half of the verdict comes from undefended clouds in both runs
    z, y = defense.sample_latents(4, 30, 2, 5)
    clouds = defense.generate(gen, z, y)
    aux = disc.eval()(clouds)[1].argmax(1)
    assert srs.valid_successes <= int((aux == y).sum())
    assert srs.valid_successes <= srs.successes


def test_sample_latents_streams_and_targeted_labels():
    z1, y1 = defense.sample_latents(4, 10, 3, 7)
    z2, y2 = defense.sample_latents(4, 20, 3, 7)
    assert torch.equal(z1, z2[:10]) and torch.equal(y1, y2[:10])
    _, yt = defense.sample_latents(4, 50, 3, 7, AttackConfig(mode="targeted", target_label=1))
    assert 1 not in yt.tolist()


def test_attack_report_csv():
    rep = defense.AttackReport(4, 3, 1, {0: (2, 2, 1), 1: (2, 1, 0)}, "sor", "pointnet_lite")
    lines = rep.to_csv().splitlines()
    assert lines[0] == "victim,defense,class,total,asr_pct,validity_filtered_asr_pct"
    assert lines[1] == "pointnet_lite,sor,all,4,75.00,25.00"
    assert lines[2] == "pointnet_lite,sor,0,2,100.00,50.00"


def test_transfer_table():
    gen = tiny_generator()
    disc = models.build_discriminator(models.DiscriminatorConfig(width=8, pool_dim=8), 2)
    va = models.make_victim(models.VictimConfig("pointnet_lite", 2, widths=(8, 8), head=8), 1)
    vb = models.make_victim(models.VictimConfig("edgeconv_lite", 2, widths=(8, 8), head=8, k=4), 1)
    reps = defense.transfer_eval(gen, disc, [("a", va), ("b", vb)], "a", 12, seed=3)
    text = defense.transfer_table(reps, "a").splitlines()
    assert text[0] == "victim,original,total,asr_pct,validity_filtered_asr_pct"
    assert text[1].startswith("a,/,12,") and text[2].startswith("b,,12,")
    single = defense.transfer_eval(gen, disc, [("a", va)], "a", 12, seed=3)
    assert len(single) == 1 and single[0].asr == reps[0].asr
