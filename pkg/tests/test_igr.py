import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptgs.encoder import FeatureBundle
from adaptgs.igr import (DeformableAttention, IgrConfig, Refiner, apply_deltas, clamp_sh,
                         decode_gaussians, deformable_attention, embed_gaussians, igr_block, refine)
from adaptgs.scene import S_MAX, S_MIN, Camera, GaussianSet, look_at
from adaptgs.tensor import Tensor, bilinear_sample, gradcheck

from conftest import random_gaussians

N_PARAMS = 23


def _bundle(rng, n=2, res=32, d=8, stride=4):
    c = (res - 1) / 2
    cams = [Camera(res * 1.2, res * 1.2, c, c, res, res, look_at((0.2 * i - 0.1, 0, -0.2), (0, 0, 2)))
            for i in range(n)]
    maps = [Tensor(rng.standard_normal((d, res // stride, res // stride))) for _ in range(n)]
    return FeatureBundle(maps, stride, cams)


def _randomize(module, rng, scale=0.3):
    for p in module.parameters():
        p.data[:] = rng.standard_normal(p.shape) * scale


def test_config_validation():
    with pytest.raises(ValueError):
        IgrConfig(blocks=0)
    with pytest.raises(ValueError):
        IgrConfig(d_model=10, heads=4)


def test_embed_shapes_and_identical_rows(rng):
    ref = Refiner(IgrConfig(d_model=16, heads=2), N_PARAMS, 8, rng)
    g = random_gaussians(rng, 5)
    g = g.select([0, 1, 1, 2, 0])
    q = embed_gaussians(g, ref)
    assert q.shape == (5, 16)
    assert np.array_equal(q.data[1], q.data[2]) and np.array_equal(q.data[0], q.data[4])
    with pytest.raises(ValueError):
        embed_gaussians(GaussianSet.empty(), ref)


def test_embed_gradcheck(rng):
    ref = Refiner(IgrConfig(d_model=8, heads=2), N_PARAMS, 8, rng)
    g = random_gaussians(rng, 4)
    params = ref.embed.parameters()
    assert gradcheck(lambda *_: embed_gaussians(g, ref), params) < 1e-4


def test_deformable_attention_single_point(rng):
    da = DeformableAttention(8, 5, rng, heads=2, points=1)
    F = Tensor(rng.standard_normal((5, 6, 7)))
    q = Tensor(rng.standard_normal((4, 8)))
    ref = rng.uniform(0, 5, (4, 2))
    vis = np.array([True, True, False, True])
    out = deformable_attention(q, F, ref, vis, da).data
    expect = da.value(bilinear_sample(F, Tensor(ref))).data
    assert np.allclose(out[vis], expect[vis])
    assert np.all(out[2] == 0)


def test_deformable_attention_zero_features(rng):
    for points in (1, 3):
        da = DeformableAttention(8, 5, rng, heads=2, points=points)
        da.value.b.data[:] = 0
        out = deformable_attention(Tensor(rng.standard_normal((3, 8))), Tensor(np.zeros((5, 6, 6))),
                                   rng.uniform(0, 5, (3, 2)), np.ones(3, bool), da)
        assert np.all(out.data == 0)


def test_deformable_attention_gradcheck(rng):
    da = DeformableAttention(8, 5, rng, heads=2, points=3)
    _randomize(da, rng)
    F = Tensor(rng.standard_normal((5, 8, 8)), requires_grad=True)
    q = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    ref = rng.uniform(1.3, 5.7, (4, 2)) + 0.01
    vis = np.array([True, False, True, True])
    assert gradcheck(lambda q, F: deformable_attention(q, F, ref, vis, da), [q, F]) < 1e-4
    named = da.named_parameters()
    key_bias = named.pop("key.b")  # shifts all logits of a head equally: exact zero gradient
    assert gradcheck(lambda *_: deformable_attention(q, F, ref, vis, da), list(named.values())) < 1e-4
    deformable_attention(q, F, ref, vis, da).sum().backward()
    assert np.abs(key_bias.grad).max() < 1e-12


def test_block_zero_init_is_identity(rng):
    ref = Refiner(IgrConfig(d_model=16, heads=2), N_PARAMS, 8, rng)
    f = _bundle(rng)
    g = random_gaussians(rng, 12)
    q = embed_gaussians(g, ref)
    out = igr_block(q, f, g.mu, Tensor(np.array([0.5, 0.5])), ref.blocks[0])
    assert np.array_equal(out.data, q.data)


def test_block_gradcheck(rng):
    cfg = IgrConfig(d_model=8, heads=2, points=2)
    ref = Refiner(cfg, N_PARAMS, 4, rng)
    _randomize(ref.blocks[0], rng)
    f = _bundle(rng, d=4)
    g = random_gaussians(rng, 5)
    q = Tensor(rng.standard_normal((5, 8)), requires_grad=True)
    w = Tensor(np.array([0.3, 0.7]))
    fn = lambda q: igr_block(q, f, g.mu, w, ref.blocks[0])
    assert gradcheck(fn, [q]) < 1e-4
    named = ref.blocks[0].named_parameters()
    named.pop("attn.key.b")
    params = list(named.values())
    assert gradcheck(lambda *_: igr_block(q, f, g.mu, w, ref.blocks[0]), params) < 1e-4


def test_zero_decoder_reproduces_base(rng):
    ref = Refiner(IgrConfig(d_model=16, heads=2), N_PARAMS, 8, rng)
    g = random_gaussians(rng, 10, scale=(0.5, 15.0))
    out = decode_gaussians(Tensor(rng.standard_normal((10, 16))), g, ref)
    for f in ("mu", "s", "r", "alpha", "sh"):
        assert np.allclose(getattr(out, f).data, getattr(g, f).data, rtol=1e-14, atol=1e-14), f
    with pytest.raises(ValueError):
        decode_gaussians(Tensor(np.zeros((3, 16))), g, ref)


@given(st.integers(0, 100_000), st.floats(0.1, 50.0))
@settings(max_examples=100, deadline=None)
def test_decode_always_valid(seed, magnitude):
    rng = np.random.default_rng(seed)
    g = random_gaussians(rng, 20, scale=(S_MIN, S_MAX))
    raw = Tensor(rng.standard_normal((20, N_PARAMS)) * magnitude)
    out = apply_deltas(g, raw, 4.0)
    s = out.s.data
    assert s.min() >= S_MIN and s.max() <= S_MAX
    assert np.abs(np.linalg.norm(out.r.data, axis=1) - 1).max() <= 1e-9
    assert out.alpha.data.min() >= 0 and out.alpha.data.max() <= 1
    assert np.all(np.abs(out.sh.data[:, :, 1:]) <= np.abs(out.sh.data[:, :, :1]))
    assert np.all(np.abs(out.mu.data - g.mu.data) <= 4.0 * 0.01 * g.s.data + 1e-12)


def test_decode_is_permutation_equivariant(rng):
    ref = Refiner(IgrConfig(d_model=16, heads=2), N_PARAMS, 8, rng)
    _randomize(ref.decoder, rng)
    g = random_gaussians(rng, 8)
    q = Tensor(rng.standard_normal((8, 16)))
    perm = rng.permutation(8)
    a = decode_gaussians(q, g, ref)
    b = decode_gaussians(Tensor(q.data[perm]), g.select(perm), ref)
    for f in ("mu", "s", "r", "alpha", "sh"):
        assert np.allclose(getattr(b, f).data, getattr(a, f).data[perm], atol=1e-14)


def test_clamp_sh(rng):
    sh = Tensor(np.array([[[0.5, 2.0, -3.0, 0.1]] * 3]))
    out = clamp_sh(sh).data
    assert np.allclose(out[0, 0], [0.5, 0.5, -0.5, 0.1])


def test_refine_preserves_counts(rng):
    cfg = IgrConfig(d_model=16, heads=2)
    ref = Refiner(cfg, N_PARAMS, 8, rng)
    for b in ref.blocks:
        _randomize(b, rng, 0.1)
    _randomize(ref.decoder, rng, 0.05)
    f = _bundle(rng)
    g = random_gaussians(rng, 30)
    trace = []
    out = refine(g, f, Tensor(np.array([0.5, 0.5])), ref, trace)
    assert trace == [30, 30, 30] and len(out) == 30
    out.validate()
