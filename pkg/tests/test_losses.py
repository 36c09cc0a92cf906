import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from gantruth.losses import (
    AllIgnoredWarning,
    InstancePrediction,
    InstanceTargets,
    LossWeights,
    cycle_consistency_loss,
    cycle_terms,
    gan_loss_discriminator,
    gan_loss_generator,
    gantruth_objective,
    gt_disparity_loss,
    gt_instance_loss,
    gt_semseg_loss,
    kl_to_standard_normal,
    reconstruction_nll,
    semantic_consistency_loss,
    unit_gantruth_objective,
    unit_objective,
    vae_loss,
)

from .gradcheck import finite_difference_check


def full(v, shape=(1, 1, 4, 4)):
    return torch.full(shape, float(v))


# -- GAN ----------------------------------------------------------------------

def test_gan_discriminator_closed_forms():
    assert float(gan_loss_discriminator(full(1), full(0))) == pytest.approx(0.0, abs=1e-6)
    assert float(gan_loss_discriminator(full(0.5), full(0.5))) == pytest.approx(math.log(2), abs=1e-6)
    assert float(gan_loss_discriminator(full(0.9), full(0.1))) == pytest.approx(-math.log(0.9), abs=1e-6)


def test_gan_generator_closed_forms():
    assert float(gan_loss_generator(full(1))) == pytest.approx(0.0, abs=1e-6)
    assert float(gan_loss_generator(full(0.5))) == pytest.approx(0.5 * math.log(2), abs=1e-6)
    v = float(gan_loss_generator(full(0.0, (1, 1, 2, 2)).double()))
    assert math.isfinite(v) and v == pytest.approx(-0.5 * math.log(1e-7), rel=1e-6)


def test_gan_scales_average_uniformly():
    grids = [full(0.5, (1, 1, 4, 4)), full(0.9, (1, 1, 2, 2)), full(0.2, (1, 1, 1, 1))]
    expected = np.mean([-0.5 * math.log(p) for p in (0.5, 0.9, 0.2)])
    assert float(gan_loss_generator(grids)) == pytest.approx(expected, abs=1e-6)


def test_gan_empty_input_rejected():
    with pytest.raises(ValueError):
        gan_loss_generator([])
    with pytest.raises(ValueError):
        gan_loss_discriminator(torch.zeros(0), full(0.5))


# -- KL / VAE / cycle ----------------------------------------------------------

def monte_carlo_kl(mean: np.ndarray, n: int = 1_000_000, seed: int = 0) -> float:
    """E_q[log q(z) - log p(z)] with q = N(mean, I), p = N(0, I)."""
    rng = np.random.default_rng(seed)
    z = mean + rng.standard_normal((n, mean.size))
    return float(np.mean(0.5 * (z**2).sum(1) - 0.5 * ((z - mean) ** 2).sum(1)))


def test_kl_closed_forms():
    assert float(kl_to_standard_normal(torch.zeros(3, 4))) == 0.0
    assert float(kl_to_standard_normal(torch.tensor([0.6, 0.8]))) == pytest.approx(0.5, abs=1e-7)
    assert float(kl_to_standard_normal(torch.ones(1, 7))) == pytest.approx(3.5)
    assert monte_carlo_kl(np.array([0.6, 0.8])) == pytest.approx(0.5, abs=1e-2)
    assert monte_carlo_kl(np.ones(7)) == pytest.approx(3.5, abs=1e-2)


def test_kl_matches_monte_carlo_on_random_means():
    rng = np.random.default_rng(1)
    for trial in range(5):
        m = rng.normal(0, 0.7, size=4)
        closed = float(kl_to_standard_normal(torch.from_numpy(m)))
        assert abs(closed - monte_carlo_kl(m, seed=trial)) < 1e-2


def test_kl_batch_average_and_errors():
    m = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
    assert float(kl_to_standard_normal(m)) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        kl_to_standard_normal(torch.tensor([float("nan")]))


def _zero_encoder(x):
    return torch.zeros(x.shape[0], 2, 2, 2, dtype=x.dtype)


def test_vae_examples():
    x = torch.rand(2, 3, 4, 4)
    w = LossWeights(kl=0.3, ll=1.0)
    assert float(vae_loss(_zero_encoder, lambda z: x, x, w, sample=False)) == pytest.approx(0.0)
    assert float(vae_loss(_zero_encoder, lambda z: x + 0.1, x, w, sample=False)) == pytest.approx(0.1, abs=1e-6)
    zero = LossWeights(kl=0.0, ll=0.0)
    assert float(vae_loss(lambda t: torch.randn(1, 5), lambda z: torch.rand_like(x), x, zero)) == 0.0


def test_cycle_examples():
    x = torch.rand(1, 3, 4, 4)
    ident = lambda t: t  # noqa: E731
    assert float(cycle_consistency_loss(ident, ident, ident, ident, x, LossWeights(kl=0.0, ll=1.0),
                                        sample=False)) == pytest.approx(0.0)
    terms = cycle_terms(ident, ident, ident, ident, x, LossWeights(kl=2.0, ll=0.0), sample=False)
    assert float(terms.total) == pytest.approx(2.0 * float(terms.kl_first + terms.kl_second))


def test_cycle_matches_hand_composition():
    torch.manual_seed(0)
    E_s, E_t = torch.nn.Conv2d(3, 2, 3, padding=1), torch.nn.Conv2d(3, 2, 3, padding=1)
    G_s, G_t = torch.nn.Conv2d(2, 3, 3, padding=1), torch.nn.Conv2d(2, 3, 3, padding=1)
    x = torch.rand(2, 3, 5, 5)
    w = LossWeights(kl=0.3, ll=7.0)
    got = cycle_consistency_loss(E_s, G_s, E_t, G_t, x, w, generator=torch.Generator().manual_seed(4))

    g = torch.Generator().manual_seed(4)
    m1 = E_s(x)
    x_t = G_t(m1 + torch.randn(m1.shape, generator=g))
    m2 = E_t(x_t)
    x_back = G_s(m2 + torch.randn(m2.shape, generator=g))
    kl1 = 0.5 * (m1**2).sum() / 2
    kl2 = 0.5 * (m2**2).sum() / 2
    expected = 0.3 * kl1 + 0.3 * kl2 + 7.0 * (x_back - x).abs().mean()
    assert float(got.detach()) == pytest.approx(float(expected.detach()), rel=1e-6)


# -- ground-truth preservation -------------------------------------------------------

def test_semseg_examples():
    y = torch.randint(0, 6, (2, 4, 4))
    assert float(gt_semseg_loss(torch.zeros(2, 6, 4, 4), y)) == pytest.approx(math.log(6), abs=1e-6)
    sharp = F.one_hot(y, 6).permute(0, 3, 1, 2).float() * 100
    assert float(gt_semseg_loss(sharp, y)) == pytest.approx(0.0, abs=1e-6)
    with pytest.warns(AllIgnoredWarning):
        assert float(gt_semseg_loss(torch.randn(1, 6, 4, 4), torch.full((1, 4, 4), 255))) == 0.0
    with pytest.raises(ValueError, match="classes"):
        gt_semseg_loss(torch.zeros(1, 6, 4, 4), y[:1], num_classes=5)


def test_semseg_ignores_ignored_pixels():
    logits = torch.randn(1, 3, 2, 2)
    y = torch.tensor([[[0, 255], [2, 255]]])
    expected = F.cross_entropy(logits[0, :, [0, 1], [0, 0]].T, torch.tensor([0, 2]))
    assert float(gt_semseg_loss(logits, y)) == pytest.approx(float(expected), rel=1e-6)


def test_disparity_examples():
    gt = torch.rand(2, 4, 4) + 0.5
    assert float(gt_disparity_loss(gt, gt)) == 0.0
    assert float(gt_disparity_loss(gt / 3, gt, 3.0)) == pytest.approx(0.0, abs=1e-6)
    assert float(gt_disparity_loss(gt + 0.5, gt)) == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(ValueError):
        gt_disparity_loss(gt, gt, 0.0)
    with pytest.raises(ValueError, match="shape"):
        gt_disparity_loss(gt[:, :2], gt)


def test_disparity_skips_sky():
    gt = torch.tensor([[0.0, 2.0]])
    assert float(gt_disparity_loss(torch.tensor([[9.0, 1.0]]), gt)) == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 10), st.floats(0.1, 10), st.integers(0, 1000))
def test_disparity_scale_compensation_invariance(k, c, seed):
    g = torch.Generator().manual_seed(seed)
    pred = torch.rand(1, 3, 3, generator=g, dtype=torch.float64) + 0.1
    gt = torch.rand(1, 3, 3, generator=g, dtype=torch.float64) + 0.1
    a = gt_disparity_loss(pred * k, gt, c / k)
    b = gt_disparity_loss(pred, gt, c)
    assert float(a) == pytest.approx(float(b), rel=1e-9, abs=1e-12)


def _instance_case(n=2, c=3, h=6, w=6, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    boxes = torch.tensor([[0, 0, 3, 4], [2, 1, 6, 6]], dtype=dtype)[:n]
    masks = torch.rand(n, h, w, generator=g) > 0.5
    labels = torch.arange(n) % c
    return InstanceTargets(labels, boxes, masks)


def test_instance_perfect_prediction_is_zero():
    t = _instance_case()
    pred = InstancePrediction(F.one_hot(t.labels, 3).double() * 200, t.boxes.clone(),
                              (t.masks.double() * 2 - 1) * 200)
    assert float(gt_instance_loss(pred, t, [True, True])) == pytest.approx(0.0, abs=1e-8)


def test_instance_all_null_is_zero_with_no_gradient():
    t = _instance_case()
    pred = InstancePrediction(torch.randn(2, 3, requires_grad=True), torch.rand(2, 4, requires_grad=True) * 0 + t.boxes,
                              torch.randn(2, 6, 6, requires_grad=True))
    loss = gt_instance_loss(pred, t, [False, False])
    assert float(loss) == 0.0
    loss.backward()


def test_instance_uniform_mask_term_is_ln2():
    t = _instance_case(n=1)
    pred = InstancePrediction(F.one_hot(t.labels, 3).double() * 200, t.boxes.clone(), torch.zeros(1, 6, 6))
    assert float(gt_instance_loss(pred, t, [True])) == pytest.approx(math.log(2), abs=1e-6)


def test_instance_dropped_instance_gets_no_gradient():
    t = _instance_case()
    logits = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)
    masks = torch.randn(2, 6, 6, dtype=torch.float64, requires_grad=True)
    boxes = (t.boxes + 0.3).requires_grad_(True)
    gt_instance_loss(InstancePrediction(logits, boxes, masks), t, [True, False]).backward()
    assert logits.grad[1].abs().max() == 0 and masks.grad[1].abs().max() == 0 and boxes.grad[1].abs().max() == 0
    assert logits.grad[0].abs().max() > 0


def test_instance_malformed_box():
    t = _instance_case()
    t.boxes[0] = torch.tensor([3.0, 0, 3, 4])
    pred = InstancePrediction(torch.zeros(2, 3), torch.ones(2, 4), torch.zeros(2, 6, 6))
    with pytest.raises(ValueError, match="malformed"):
        gt_instance_loss(pred, t, [True, True])


# -- semantic consistency --------------------------------------------------------------

def test_semantic_consistency():
    torch.manual_seed(2)
    f_S = torch.nn.Conv2d(3, 4, 1)
    x = torch.randn(2, 3, 4, 4)
    self_value = semantic_consistency_loss(f_S, x, x)
    assert float(self_value) >= 0
    uniform = semantic_consistency_loss(lambda t: f_S(t) if t is x else torch.zeros(2, 4, 4, 4), x, x * 2)
    assert float(uniform) == pytest.approx(math.log(4), abs=1e-6)
    t = torch.randn(2, 3, 4, 4)
    expected = F.cross_entropy(f_S(t), f_S(x).argmax(1))
    assert float(semantic_consistency_loss(f_S, x, t)) == pytest.approx(float(expected), rel=1e-6)


# -- objectives ---------------------------------------------------------------

def _scalars(n, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.rand((), generator=g, dtype=torch.float64) for _ in range(n)]


def test_gantruth_objective_reductions():
    gan_d, gan_g, s, d, i = _scalars(5)
    gt = {"S": s, "D": d, "I": i}
    base = LossWeights()
    no_gt = LossWeights(semseg=0, disp=0, instseg=0)
    obj = gantruth_objective(gan_d, gan_g, gt, no_gt)
    assert float(obj.generator) == pytest.approx(10 * float(gan_g))
    assert float(obj.discriminator) == pytest.approx(10 * float(gan_d))
    only_gt = gantruth_objective(gan_d, gan_g, gt, LossWeights(gan=0))
    assert float(only_gt.generator) == pytest.approx(40 * float(s) + 0.4 * float(d) + 1.0 * float(i))
    full_obj = gantruth_objective(gan_d, gan_g, gt, base)
    for task, field in (("S", "semseg"), ("D", "disp"), ("I", "instseg")):
        w = LossWeights(**{**base.__dict__, field: 0.0})
        diff = float(full_obj.generator - gantruth_objective(gan_d, gan_g, gt, w).generator)
        assert diff == pytest.approx(base.gt_weight(task) * float(gt[task]))
    assert float(full_obj.total) == pytest.approx(float(full_obj.generator + full_obj.discriminator))


def test_unit_gantruth_reduces_to_unit():
    parts = _scalars(8, seed=1)
    gt = dict(zip("SDI", _scalars(3, seed=2)))
    w = LossWeights(semseg=0, disp=0, instseg=0)
    a = unit_objective(*parts, w)
    b = unit_gantruth_objective(*parts, gt, w)
    assert float(a.generator) == float(b.generator) and float(a.discriminator) == float(b.discriminator)
    vae_S, vae_T, cc_S, cc_T, gd_S, gg_S, gd_T, gg_T = parts
    assert float(a.generator) == pytest.approx(float(vae_S + vae_T + cc_S + cc_T + 10 * (gg_S + gg_T)))
    c = unit_gantruth_objective(*parts, gt, LossWeights())
    assert float(c.generator - a.generator) == pytest.approx(float(40 * gt["S"] + 0.4 * gt["D"] + gt["I"]))


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(gan=-1)
    with pytest.raises(ValueError):
        LossWeights(kl=float("inf"))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_losses_nonnegative_and_finite(seed):
    g = torch.Generator().manual_seed(seed)
    p = torch.rand(1, 1, 3, 3, generator=g)
    q = torch.rand(1, 1, 3, 3, generator=g)
    logits = torch.randn(1, 4, 3, 3, generator=g) * 5
    y = torch.randint(0, 4, (1, 3, 3), generator=g)
    values = [gan_loss_discriminator(p, q), gan_loss_generator(q), kl_to_standard_normal(logits),
              reconstruction_nll(p, q), gt_semseg_loss(logits, y), gt_disparity_loss(p[:, 0], q[:, 0] + 0.1)]
    for v in values:
        assert torch.isfinite(v) and float(v) >= 0


# -- gradient checks ------------------------------------------------------------------

N_INSTANCES = 20


def _away_from_zero(t, margin=1e-3):
    return torch.where(t.abs() < margin, t + 2 * margin * torch.sign(t + 1e-12), t)


def _rng(i):
    return torch.Generator().manual_seed(1000 + i)


def _cases():
    def gan_d(i):
        g = _rng(i)
        real = [torch.rand(1, 1, 4, 4, generator=g, dtype=torch.float64) * 0.9 + 0.05,
                torch.rand(1, 1, 2, 2, generator=g, dtype=torch.float64) * 0.9 + 0.05]
        fake = [torch.rand(1, 1, 4, 4, generator=g, dtype=torch.float64) * 0.9 + 0.05,
                torch.rand(1, 1, 2, 2, generator=g, dtype=torch.float64) * 0.9 + 0.05]
        return (lambda r0, r1, f0, f1: gan_loss_discriminator([r0, r1], [f0, f1])), real + fake

    def gan_g(i):
        g = _rng(i)
        return (lambda a, b: gan_loss_generator([a, b])), [
            torch.rand(1, 1, 4, 4, generator=g, dtype=torch.float64) * 0.9 + 0.05,
            torch.rand(1, 1, 2, 2, generator=g, dtype=torch.float64) * 0.9 + 0.05]

    def kl(i):
        return kl_to_standard_normal, [torch.randn(2, 3, 2, 2, generator=_rng(i), dtype=torch.float64)]

    def nll(i):
        g = _rng(i)
        x = torch.randn(2, 3, 3, generator=g, dtype=torch.float64)
        d = _away_from_zero(torch.randn(2, 3, 3, generator=g, dtype=torch.float64))
        return reconstruction_nll, [x + d, x]

    def vae(i):
        g = _rng(i)
        W_e = torch.randn(2, 3, 1, 1, generator=g, dtype=torch.float64) * 0.5
        W_g = torch.randn(3, 2, 1, 1, generator=g, dtype=torch.float64) * 0.5
        x = torch.randn(1, 3, 3, 3, generator=g, dtype=torch.float64)
        w = LossWeights(kl=0.3, ll=2.0)

        def fn(x, W_e, W_g):
            return vae_loss(lambda t: F.conv2d(t, W_e), lambda z: F.conv2d(z, W_g), x, w,
                            generator=torch.Generator().manual_seed(i))
        return fn, [x, W_e, W_g]

    def cycle(i):
        g = _rng(i)
        Ws = [torch.randn(*s, 1, 1, generator=g, dtype=torch.float64) * 0.5
              for s in ((2, 3), (3, 2), (2, 3), (3, 2))]
        x = torch.randn(1, 3, 3, 3, generator=g, dtype=torch.float64)
        w = LossWeights(kl=0.2, ll=3.0)

        def fn(x, a, b, c, d):
            return cycle_consistency_loss(lambda t: F.conv2d(t, a), lambda z: F.conv2d(z, b),
                                          lambda t: F.conv2d(t, c), lambda z: F.conv2d(z, d), x, w,
                                          generator=torch.Generator().manual_seed(i))
        return fn, [x, *Ws]

    def semseg(i):
        g = _rng(i)
        y = torch.randint(0, 4, (2, 3, 3), generator=g)
        y[0, 0, 0] = 255
        return (lambda lg: gt_semseg_loss(lg, y)), [torch.randn(2, 4, 3, 3, generator=g, dtype=torch.float64)]

    def disparity(i):
        g = _rng(i)
        gt = torch.rand(2, 3, 3, generator=g, dtype=torch.float64) + 0.5
        gt[0, 0] = 0
        d = _away_from_zero(torch.randn(2, 3, 3, generator=g, dtype=torch.float64) * 0.3)
        return (lambda p: gt_disparity_loss(p, gt, 1.7)), [(gt + d) / 1.7]

    def instance(i):
        g = _rng(i)
        t = _instance_case(seed=i)
        keep = [True, i % 3 != 0]
        boxes = t.boxes + (torch.rand(2, 4, generator=g, dtype=torch.float64) - 0.5) * 1.5
        return (lambda cl, bx, mk: gt_instance_loss(InstancePrediction(cl, bx, mk), t, keep)), [
            torch.randn(2, 3, generator=g, dtype=torch.float64), boxes,
            torch.randn(2, 6, 6, generator=g, dtype=torch.float64)]

    def consistency(i):
        g = _rng(i)
        W = torch.randn(4, 3, 1, 1, generator=g, dtype=torch.float64)
        x = torch.randn(1, 3, 3, 3, generator=g, dtype=torch.float64)
        return (lambda t, W: semantic_consistency_loss(lambda u: F.conv2d(u, W), x, t)), [
            torch.randn(1, 3, 3, 3, generator=g, dtype=torch.float64), W]

    def objective(i):
        scal = _scalars(5, seed=i)
        return (lambda a, b, c, d, e: gantruth_objective(a, b, {"S": c, "D": d, "I": e}, LossWeights()).total), scal

    def unit_obj(i):
        return (lambda *a: unit_gantruth_objective(*a[:8], {"S": a[8]}, LossWeights()).total), _scalars(9, seed=i)

    return {"gan_d": gan_d, "gan_g": gan_g, "kl": kl, "nll": nll, "vae": vae, "cycle": cycle,
            "semseg": semseg, "disparity": disparity, "instance": instance, "consistency": consistency,
            "gantruth_objective": objective, "unit_gantruth_objective": unit_obj}


@pytest.mark.parametrize("name", sorted(_cases()))
def test_gradients_match_central_differences(name):
    make = _cases()[name]
    for i in range(N_INSTANCES):
        fn, inputs = make(i)
        err = finite_difference_check(fn, inputs, step=1e-5)
        assert err < 1e-4, f"{name} instance {i}: relative error {err:.2e}"


class _WrongGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return (x**2).sum()

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return g * 2.02 * x


def test_gradient_oracle_detects_a_wrong_gradient():
    x = torch.randn(5, dtype=torch.float64)
    assert finite_difference_check(lambda t: (t**2).sum(), [x]) < 1e-8
    assert finite_difference_check(_WrongGrad.apply, [x]) > 5e-3
