import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import central_difference, param_central_difference, relative_error, softmax_ce
from pcadv import losses, models
from pcadv.errors import InvalidConfigError, InvalidInputError
from pcadv.losses import AttackConfig, LossWeights, UniformLossParams


def untargeted(**kw):
    return AttackConfig(mode="untargeted", **kw)


# -- objective -----------------------------------------------------------------

def test_objective_single_sample_matches_softmax_oracle():
    loss, active = losses.objective_loss(torch.tensor([[2.0, 0.0]], dtype=torch.float64), [0], untargeted())
    assert float(loss) == pytest.approx(math.log(1 + math.e**2), abs=1e-12)
    assert float(loss) == pytest.approx(softmax_ce([2.0, 0.0], 1), abs=1e-12)
    assert active.tolist() == [True]


def test_objective_masks_successful_samples():
    logits = torch.tensor([[0.0, 3.0], [2.0, 0.0]], dtype=torch.float64)
    loss, active = losses.objective_loss(logits, [0, 0], untargeted())
    assert active.tolist() == [False, True]
    assert float(loss) == pytest.approx(2.1269280110429727, abs=1e-9)


def test_objective_all_fooled_is_exactly_zero():
    logits = torch.tensor([[0.0, 3.0], [5.0, 0.0]], dtype=torch.float64)
    loss, active = losses.objective_loss(logits, [0, 1], untargeted())
    assert float(loss) == 0.0 and not active.any()


def test_objective_untargeted_uses_runner_up_label():
    logits = torch.tensor([[1.0, 4.0, 2.0, 3.0]], dtype=torch.float64)
    loss, _ = losses.objective_loss(logits, [1], untargeted())
    assert float(loss) == pytest.approx(softmax_ce([1, 4, 2, 3], 3))


def test_objective_targeted():
    cfg = AttackConfig(mode="targeted", target_label=2)
    logits = torch.tensor([[3.0, 1.0, 0.0]], dtype=torch.float64)
    loss, _ = losses.objective_loss(logits, [0], cfg)
    assert float(loss) == pytest.approx(softmax_ce([3, 1, 0], 2))
    with pytest.raises(InvalidConfigError):
        losses.objective_loss(logits, [2], cfg)


def test_objective_without_masking_counts_every_sample():
    logits = torch.tensor([[0.0, 3.0], [2.0, 0.0]], dtype=torch.float64)
    loss, active = losses.objective_loss(logits, [0, 0], untargeted(mask_successful=False))
    # runner-up of sample 0 (true 0, argmax 1) is class 1
    assert active.all()
    assert float(loss) == pytest.approx((softmax_ce([0, 3], 1) + softmax_ce([2, 0], 1)) / 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_objective_shift_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    logits = torch.as_tensor(rng.normal(size=(4, 3)))
    labels = torch.as_tensor(rng.integers(0, 3, 4))
    a, ma = losses.objective_loss(logits, labels, untargeted())
    b, mb = losses.objective_loss(logits + shift, labels, untargeted())
    assert torch.equal(ma, mb)
    assert float(a) == pytest.approx(float(b), abs=1e-9)


def test_attack_config_validation():
    with pytest.raises(InvalidConfigError):
        AttackConfig(mode="targeted")
    with pytest.raises(InvalidConfigError):
        AttackConfig(mode="sideways")
    with pytest.raises(InvalidConfigError):
        AttackConfig(mode="targeted", target_label=5).validate(3)
    with pytest.raises(InvalidConfigError):
        LossWeights(lambda1=-1)
    with pytest.raises(InvalidConfigError):
        LossWeights(lambda_gp=float("nan"))


# -- outlier -------------------------------------------------------------------

def test_outlier_examples():
    line = torch.tensor([[0, 0, 0], [0, 0, 1], [0, 0, 3]], dtype=torch.float64)
    assert float(losses.outlier_loss(line, 1)) == pytest.approx(4 / 3)
    square = torch.tensor([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]], dtype=torch.float64)
    assert float(losses.outlier_loss(square, 2)) == pytest.approx(1.0)
    with pytest.raises(InvalidInputError):
        losses.outlier_loss(line, 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10))
def test_outlier_homogeneous(seed, s):
    p = torch.as_tensor(np.random.default_rng(seed).normal(size=(12, 3)))
    assert float(losses.outlier_loss(s * p, 3)) == pytest.approx(s * float(losses.outlier_loss(p, 3)), rel=1e-9)


# -- uniform -------------------------------------------------------------------

def brute_uniform(points, clusters, n_hat, d_hat):
    """Direct term-by-term evaluation for explicitly listed clusters."""
    total = 0.0
    for members in clusters:
        pts = points[members]
        imb = (len(members) - n_hat) ** 2 / n_hat
        clutter = 0.0
        if len(members) >= 2:
            for i in range(len(members)):
                d = min(np.linalg.norm(pts[i] - pts[j]) for j in range(len(members)) if j != i)
                clutter += (d - d_hat) ** 2 / d_hat
        total += imb * clutter
    return total


def test_uniform_three_point_cluster_hand_oracle():
    pts = np.array([[0, 0, 0], [0.05, 0, 0], [0, 0.2, 0]], float)
    params = UniformLossParams(1, radius=0.3, expected_count=2.0)
    got = float(losses.uniform_loss(torch.as_tensor(pts), params))
    assert got == pytest.approx(brute_uniform(pts, [[0, 1, 2]], 2.0, params.expected_nn_dist), rel=1e-12)
    # nearest distances inside the single cluster are 0.05, 0.05 and 0.2
    dh = params.expected_nn_dist
    manual = (3 - 2) ** 2 / 2 * ((0.05 - dh) ** 2 + (0.05 - dh) ** 2 + (0.2 - dh) ** 2) / dh
    assert got == pytest.approx(manual, rel=1e-12)


def test_uniform_zero_when_counts_match():
    rng = np.random.default_rng(0)
    pts = torch.as_tensor(rng.uniform(-1, 1, size=(32, 3)))
    params = UniformLossParams.calibrate(pts, 0.5, n_seeds=1)
    assert float(losses.uniform_loss(pts, params)) == 0.0


def test_uniform_zero_when_spacing_matches():
    params = UniformLossParams(1, radius=1.0, expected_count=3.0)
    d = params.expected_nn_dist
    pts = torch.tensor([[0, 0, 0], [d, 0, 0], [2 * d, 0, 0], [3 * d, 0, 0]], dtype=torch.float64)
    assert float(losses.uniform_loss(pts, params)) == pytest.approx(0.0, abs=1e-24)


def test_uniform_matches_brute_force_on_random_clouds():
    rng = np.random.default_rng(1)
    for _ in range(10):
        pts = rng.uniform(-1, 1, size=(24, 3))
        params = UniformLossParams(3, radius=0.6, expected_count=3.0)
        members = losses._cluster_members(torch.as_tensor(pts)[None], 3, 0.6, 0)[0]
        clusters = [torch.nonzero(m).flatten().tolist() for m in members]
        want = brute_uniform(pts, clusters, 3.0, params.expected_nn_dist)
        assert float(losses.uniform_loss(torch.as_tensor(pts), params)) == pytest.approx(want, rel=1e-10)


def test_uniform_rejects_too_many_seeds():
    with pytest.raises(InvalidInputError):
        losses.uniform_loss(torch.zeros(3, 3, dtype=torch.float64), UniformLossParams(4))


def test_uniform_expected_distance_formula():
    p = UniformLossParams(4, radius=0.25, expected_count=5.0)
    assert p.expected_nn_dist == pytest.approx(math.sqrt(2 * math.pi * 0.0625 / (math.sqrt(3) * 5)))
    assert UniformLossParams.default_seeds(64) == 4
    assert UniformLossParams.default_seeds(2048) == 128


# -- gradient penalty ----------------------------------------------------------

def linear_critic(w):
    return lambda x: (x.reshape(x.shape[0], -1) * w).sum(-1)


def test_gradient_penalty_anchors():
    rng = np.random.default_rng(2)
    real = torch.as_tensor(rng.normal(size=(3, 5, 3)))
    fake = torch.as_tensor(rng.normal(size=(3, 5, 3)))
    eps = torch.as_tensor(rng.uniform(size=3))
    w = torch.as_tensor(rng.normal(size=15))
    w = w / w.norm()
    assert float(losses.gradient_penalty(linear_critic(w), real, fake, eps)) <= 1e-9
    assert float(losses.gradient_penalty(linear_critic(2 * w), real, fake, eps)) == pytest.approx(1.0, abs=1e-9)
    const = lambda x: x.new_ones(x.shape[0]) * 3.0  # noqa: E731
    assert float(losses.gradient_penalty(const, real, fake, eps)) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(InvalidInputError):
        losses.gradient_penalty(const, real, fake[:2], eps)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_gradient_penalty_nonnegative(seed):
    torch.manual_seed(seed)
    disc = models.build_discriminator(models.DiscriminatorConfig(width=8, pool_dim=8), seed).double().eval()
    real, fake = torch.randn(2, 6, 3, dtype=torch.float64), torch.randn(2, 6, 3, dtype=torch.float64)
    gp = losses.gradient_penalty(disc.critic, real, fake, torch.rand(2, dtype=torch.float64))
    assert float(gp.detach()) >= 0


# -- finite-difference gradient checks ----------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_coordinate_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    cloud = torch.as_tensor(rng.uniform(-1, 1, size=(16, 3))).requires_grad_(True)
    victim = models.make_victim(models.VictimConfig("pointnet_lite", 3, widths=(8, 8), head=8), seed).double()
    cfg = untargeted(mask_successful=False)
    labels = torch.tensor([int(victim(cloud[None]).argmax())])
    params = UniformLossParams(2, radius=0.7, expected_count=3.0)
    checks = {
        "objective": lambda x: losses.objective_loss(victim(x[None]), labels, cfg)[0],
        "outlier": lambda x: losses.outlier_loss(x, 3),
        "uniform": lambda x: losses.uniform_loss(x, params),
    }
    for name, f in checks.items():
        (g,) = torch.autograd.grad(f(cloud), cloud)
        fd = central_difference(f, cloud)
        assert relative_error(g, fd) <= 1e-4, name


def test_gradient_penalty_parameter_gradients_match_finite_differences():
    disc = models.build_discriminator(models.DiscriminatorConfig(width=6, n_blocks=1, pool_dim=6), 3).double().eval()
    g = torch.Generator().manual_seed(3)
    real = torch.randn(2, 5, 3, generator=g, dtype=torch.float64)
    fake = torch.randn(2, 5, 3, generator=g, dtype=torch.float64)
    eps = torch.rand(2, generator=g, dtype=torch.float64)
    params = list(disc.parameters())
    f = lambda: losses.gradient_penalty(disc.critic, real, fake, eps)  # noqa: E731
    analytic = torch.autograd.grad(f(), params, allow_unused=True)
    analytic = [torch.zeros_like(p) if a is None else a for p, a in zip(params, analytic)]
    assert relative_error(analytic, param_central_difference(f, params)) <= 1e-4


# -- generator and critic losses ----------------------------------------------

def small_models(seed=0):
    gcfg = models.GeneratorConfig(noise_dim=4, n_classes=2, label_embed_dim=2, branching=(2, 4),
                                  feature_dims=(6, 5, 4))
    gen = models.build_generator(gcfg, seed).double()
    disc = models.build_discriminator(models.DiscriminatorConfig(width=6, n_blocks=1, pool_dim=6), seed).double()
    victim = models.make_victim(models.VictimConfig("pointnet_lite", 2, widths=(6, 6), head=6), seed).double()
    return gen, disc.eval(), victim.eval()


def test_generator_loss_decomposition():
    gen, disc, victim = small_models()
    z = torch.randn(3, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    y = torch.tensor([0, 1, 0])
    fake = gen(z, y)
    params = UniformLossParams(2, 0.5, 2.0)
    cfg = untargeted(mask_successful=False)
    t_gan, p_gan = losses.generator_loss(fake, y, disc, cfg, "gan", uniform_params=params)
    t_adv, p_adv = losses.generator_loss(fake, y, disc, cfg, "adversarial", victim=victim, uniform_params=params)
    w = cfg.weights
    assert (t_adv - t_gan).item() == pytest.approx(w.lambda1 * float(p_adv["obj"]), abs=1e-12)
    recomposed = p_adv["dis"] + w.lambda1 * p_adv["obj"] + w.lambda2 * p_adv["out"] + w.lambda3 * p_adv["ul"]
    assert float(recomposed) == pytest.approx(t_adv.item(), abs=1e-9)
    zero = AttackConfig(weights=LossWeights(0, 0, 0), mask_successful=False)
    t0, p0 = losses.generator_loss(fake, y, disc, zero, "adversarial", victim=victim, uniform_params=params)
    assert t0.item() == float(p0["dis"])
    score, logits = disc(fake)
    want = -score.mean() - torch.log_softmax(logits, 1)[torch.arange(3), y].mean()
    assert float(p0["dis"]) == pytest.approx(want.item(), abs=1e-12)
    with pytest.raises(InvalidConfigError):
        losses.generator_loss(fake, y, disc, cfg, "adversarial")


def test_generator_loss_parameter_gradients_match_finite_differences():
    gen, disc, victim = small_models(1)
    z = torch.randn(2, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    y = torch.tensor([0, 1])
    params = UniformLossParams(2, 0.5, 2.0)
    cfg = AttackConfig(weights=LossWeights(0.5, 1.0, 1.0), mask_successful=False)
    gparams = list(gen.parameters())
    f = lambda: losses.generator_loss(gen(z, y), y, disc, cfg, "adversarial", victim=victim,  # noqa: E731
                                      outlier_k=2, uniform_params=params)[0]
    analytic = torch.autograd.grad(f(), gparams)
    assert relative_error(list(analytic), param_central_difference(f, gparams)) <= 1e-4


def test_critic_loss_formula():
    s_real = torch.tensor([1.0, 3.0], dtype=torch.float64)
    s_fake = torch.tensor([0.5, -0.5], dtype=torch.float64)
    l_real = torch.tensor([[2.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    l_fake = torch.tensor([[1.0, 1.0], [3.0, 0.0]], dtype=torch.float64)
    gp = torch.tensor(0.3, dtype=torch.float64)
    got = losses.critic_loss(s_real, s_fake, l_real, l_fake, [0, 1], [1, 0], gp, lambda_gp=10, aux_weight=0.5)
    ce_r = (softmax_ce([2, 0], 0) + softmax_ce([0, 1], 1)) / 2
    ce_f = (softmax_ce([1, 1], 1) + softmax_ce([3, 0], 0)) / 2
    want = (0.0 - 2.0) + 10 * 0.3 + 0.5 * (ce_r + ce_f)
    assert float(got) == pytest.approx(want, abs=1e-12)
    same = losses.critic_loss(s_real, s_real, l_real, l_real, [0, 1], [0, 1], gp, lambda_gp=0, aux_weight=0)
    assert float(same) == 0.0
    with pytest.raises(InvalidInputError):
        losses.critic_loss(s_real, s_fake[:1], l_real, l_fake, [0, 1], [1, 0], gp)
