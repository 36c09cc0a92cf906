import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gantruth.nets import (
    ArchConfig,
    MultiScaleDiscriminator,
    build_discriminators,
    build_translator_pair,
    count_parameters,
    discriminate,
    encode,
    parameter_report,
    translate,
)


@pytest.fixture(scope="module")
def pair():
    return build_translator_pair(ArchConfig())


def _conv_out(n, k=4, s=2, p=1):
    return (n + 2 * p - k) // s + 1


def test_latent_shape(pair):
    z = encode(pair.E_S, torch.zeros(2, 3, 64, 64))
    assert tuple(z.mean.shape) == (2, ArchConfig().latent_channels, 16, 16)


def test_batch_independence(pair):
    x = torch.rand(1, 3, 64, 64) * 2 - 1
    with torch.no_grad():
        one = encode(pair.E_S, x).mean
        two = encode(pair.E_S, torch.cat([x, x])).mean
    assert torch.allclose(two[0], one[0], atol=1e-6) and torch.allclose(two[1], one[0], atol=1e-6)


def test_indivisible_input_rejected(pair):
    with pytest.raises(ValueError, match="divisible"):
        encode(pair.E_S, torch.zeros(1, 3, 63, 63))


def test_translate_modes(pair):
    x = torch.rand(2, 3, 64, 64) * 2 - 1
    with torch.no_grad():
        a = translate(pair.E_S, pair.G_T, x)
        b = translate(pair.E_S, pair.G_T, x)
        s1 = translate(pair.E_S, pair.G_T, x, "sampled", torch.Generator().manual_seed(3))
        s2 = translate(pair.E_S, pair.G_T, x, "sampled", torch.Generator().manual_seed(3))
    assert torch.equal(a, b) and torch.equal(s1, s2)
    assert not torch.equal(a, s1)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([16, 32, 48, 64]))
def test_translate_range_and_shape(seed, size):
    pair = build_translator_pair(ArchConfig(image_size=(size, size), base_channels=4))
    x = (torch.rand(1, 3, size, size, generator=torch.Generator().manual_seed(seed)) * 6) - 3
    with torch.no_grad():
        y = translate(pair.E_S, pair.G_T, x, "sampled", torch.Generator().manual_seed(seed))
    assert y.shape == x.shape
    assert y.min() >= -1 and y.max() <= 1


def test_discriminator_grid_shapes():
    _, d = build_discriminators(ArchConfig())
    grids = discriminate(d, torch.zeros(1, 3, 64, 64))
    expected = []
    for side in (64, 32, 16):
        n = side
        for _ in range(4):
            n = _conv_out(n)
        expected.append((n, n))
    assert [tuple(g.shape[-2:]) for g in grids] == expected == d.grid_shapes(64, 64)
    for g in grids:
        assert ((g > 0) & (g < 1)).all()


def test_constant_image_probabilities_inside_unit_interval():
    _, d = build_discriminators(ArchConfig())
    for v in (-1.0, 0.0, 1.0):
        for g in discriminate(d, torch.full((1, 3, 64, 64), v)):
            assert torch.isfinite(g).all() and ((g > 0) & (g < 1)).all()


def test_too_small_for_coarsest_scale():
    d = MultiScaleDiscriminator(ArchConfig())
    with pytest.raises(ValueError, match="minimal resolution"):
        d(torch.zeros(1, 3, 32, 32))
    with pytest.raises(ValueError):
        build_discriminators(ArchConfig(image_size=(8, 8)))


def test_no_fully_connected_layers():
    _, d = build_discriminators(ArchConfig())
    assert not any(isinstance(m, torch.nn.Linear) for m in d.modules())


def test_shared_parameters_alias(pair):
    pairs = pair.shared_parameter_pairs()
    assert pairs and all(a is b for a, b in pairs)
    enc_ids = {id(p) for p in pair.E_S.shared.parameters()}
    assert enc_ids == {id(p) for p in pair.E_T.shared.parameters()}
    p = next(pair.E_S.shared.parameters())
    with torch.no_grad():
        p.add_(1.0)
        seen = next(pair.E_T.shared.parameters()).clone()
        p.sub_(1.0)
    assert torch.equal(seen, p + 1.0)


def test_private_parameters_are_distinct(pair):
    s = {id(p) for p in pair.E_S.private.parameters()}
    t = {id(p) for p in pair.E_T.private.parameters()}
    assert not s & t


def test_one_directional_pair():
    p = build_translator_pair(ArchConfig(), bidirectional=False)
    assert p.E_T is None and p.G_S is None
    assert set(p.networks()) == {"E_S", "G_T"}
    d_s, d_t = build_discriminators(ArchConfig(), bidirectional=False)
    assert d_s is None and d_t is not None


def test_parameter_budget(pair):
    d_s, d_t = build_discriminators(ArchConfig())
    report = parameter_report({**pair.networks(), "D_S": d_s, "D_T": d_t})
    assert report["total_unique"] < 5_000_000
    assert report["total_unique"] < sum(v for k, v in report.items() if k != "total_unique")
    assert count_parameters(d_t) > 0


def test_init_is_seeded():
    a = build_translator_pair(ArchConfig(seed=4))
    b = build_translator_pair(ArchConfig(seed=4))
    c = build_translator_pair(ArchConfig(seed=5))
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)
    w = a.E_S.private[0].weight
    assert abs(float(w.detach().std()) - 0.02) < 0.005 and float(a.E_S.private[0].bias.detach().abs().max()) == 0.0


def test_invalid_arch():
    with pytest.raises(ValueError):
        ArchConfig(n_shared_blocks=4, n_res_blocks=3)
    with pytest.raises(ValueError, match="divisible"):
        build_translator_pair(ArchConfig(image_size=(66, 66)))
