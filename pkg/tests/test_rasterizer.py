import numpy as np
import pytest

from adaptgs.rasterizer import (RenderSettings, center_transmittance, density_map, preprocess, render,
                                render_backward, write_raw)
from adaptgs.scene import Camera, GaussianSet, look_at
from adaptgs.tensor import Tensor
from adaptgs.tensor.gradcheck import rel_error

from conftest import random_gaussians
from oracles import dense_render

NO_CULL = RenderSettings(cull=False, eps_alpha=0.0)


def _cam(res=32):
    c = (res - 1) / 2
    return Camera(res * 1.2, res * 1.2, c, c, res, res, look_at((0.1, -0.05, -0.1), (0, 0, 2)))


def _with(g, **kw):
    f = {k: getattr(g, k).data for k in ("mu", "s", "r", "alpha", "sh")}
    f.update(kw)
    return GaussianSet(**f)


def test_empty_and_transparent_render_background(rng):
    cam = _cam()
    st = RenderSettings(background=(0.2, 0.4, 0.6))
    img = render(GaussianSet.empty(), cam, st).data
    assert np.allclose(img, np.array([0.2, 0.4, 0.6])[:, None, None])
    g = _with(random_gaussians(rng, 10), alpha=np.zeros(10))
    assert np.allclose(render(g, cam, st).data, img)


def test_single_gaussian_peak_and_monotone_falloff():
    cam = Camera(40.0, 40.0, 15.0, 15.0, 31, 31)
    sh = np.zeros((1, 3, 4))
    sh[0, :, 0] = 1.0
    g = GaussianSet([[0.0, 0, 2]], [[10.0, 10, 10]], [[1.0, 0, 0, 0]], [0.9], sh)
    img = render(g, cam).data[0]
    assert np.unravel_index(np.argmax(img), img.shape) == (15, 15)
    oracle = dense_render(g, cam, eps_alpha=1 / 255)
    assert np.abs(img - oracle[0]).max() < 1e-12
    row = img[15, 15:]
    assert np.all(np.diff(row) <= 1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_tiled_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    cam = _cam(40)
    g = random_gaussians(rng, 60)
    img = render(g, cam, RenderSettings(cull=False, eps_alpha=0.0, background=(0.1, 0.2, 0.3))).data
    ref = dense_render(g, cam, background=(0.1, 0.2, 0.3))
    assert np.abs(img - ref).max() < 1e-9


def test_culling_changes_little(rng):
    cam = _cam(48)
    g = random_gaussians(rng, 80)
    culled = render(g, cam).data
    ref = dense_render(g, cam, eps_alpha=1 / 255)
    assert np.abs(culled - ref).max() < 0.02


def test_depth_ties_broken_by_index():
    cam = Camera(40.0, 40.0, 15.5, 15.5, 32, 32)
    sh = np.zeros((2, 3, 1))
    sh[0, 0, 0], sh[1, 1, 0] = 1.5, 1.5
    g = GaussianSet([[0.0, 0, 2], [0.0, 0, 2]], [[8.0] * 3] * 2, [[1.0, 0, 0, 0]] * 2, [0.8, 0.8], sh)
    img = render(g, cam, NO_CULL).data
    assert img[0, 16, 16] > img[1, 16, 16]  # index 0 is in front
    swapped = g.select([1, 0])
    img2 = render(swapped, cam, NO_CULL).data
    assert img2[1, 16, 16] > img2[0, 16, 16]


def test_weights_sum_with_transmittance_to_one(rng):
    cam = _cam(24)
    g = random_gaussians(rng, 30)
    g1 = _with(g, sh=np.concatenate([np.full((30, 3, 1), 0.5 / 0.28209479177387814),
                                     np.zeros((30, 3, 3))], axis=2))  # every colour exactly 1
    white = render(g1, cam, RenderSettings(background=(1.0, 1.0, 1.0))).data
    assert np.abs(white - 1.0).max() < 1e-9
    black = render(g1, cam, RenderSettings(background=(0.0, 0.0, 0.0))).data
    assert black.min() >= 0 and black.max() <= 1 + 1e-12


def test_render_is_deterministic_across_workers(rng):
    cam = _cam(64)
    g = random_gaussians(rng, 100)
    a = render(g, cam, RenderSettings(workers=1)).data
    b = render(g, cam, RenderSettings(workers=8)).data
    assert np.array_equal(a, b)
    up = rng.standard_normal((3, 64, 64))
    ga = render_backward(g, cam, RenderSettings(workers=1), up)
    gb = render_backward(g, cam, RenderSettings(workers=8), up)
    for k in ga:
        assert np.array_equal(ga[k], gb[k])


def test_backward_zero_upstream_and_offscreen(rng):
    cam = _cam(16)
    g = random_gaussians(rng, 4)
    grads = render_backward(g, cam, None, np.zeros((3, 16, 16)))
    assert all(not np.any(v) for v in grads.values())
    mu = g.mu.data.copy()
    mu[0] = [50.0, 0.0, 2.0]
    grads = render_backward(_with(g, mu=mu), cam, None, rng.standard_normal((3, 16, 16)))
    for v in grads.values():
        assert not np.any(v[0])
    with pytest.raises(ValueError):
        render_backward(g, cam, None, np.zeros((3, 8, 8)))


def _fd_check(g, cam, settings, up, h=1e-6):
    grads = render_backward(g, cam, settings, up)
    worst = 0.0
    for k in ("mu", "s", "r", "alpha", "sh"):
        base = getattr(g, k).data
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            hi, lo = base.copy(), base.copy()
            hi[idx] += h
            lo[idx] -= h
            fh = np.sum(render(_with(g, **{k: hi}), cam, settings).data * up)
            fl = np.sum(render(_with(g, **{k: lo}), cam, settings).data * up)
            num[idx] = (fh - fl) / (2 * h)
        worst = max(worst, rel_error(grads[k], num))
    return worst


def test_backward_matches_finite_differences(rng):
    cam = Camera(18.0, 18.0, 7.5, 7.5, 16, 16, look_at((0.05, 0, 0), (0, 0, 2)))
    g = random_gaussians(rng, 6, spread=0.25, scale=(8.0, 20.0))
    g = _with(g, s=np.clip(g.s.data, 0.5, 15.0), alpha=rng.uniform(0.2, 0.7, 6))
    up = rng.standard_normal((3, 16, 16))
    assert _fd_check(g, cam, RenderSettings(cull=False, eps_alpha=0.0), up) < 1e-3


def test_density_map_examples(rng):
    cam = Camera(100.0, 100.0, 64.0, 64.0, 128, 128)
    assert not np.any(density_map(GaussianSet.empty(), cam))
    g = random_gaussians(rng, 1)
    g = _with(g, mu=np.array([[0.0, 0.0, 2.0]]))
    d = density_map(g, cam)
    assert d[64, 64] == 1 and d.sum() == 1
    g = random_gaussians(rng, 200, spread=1.5)
    d = density_map(g, cam)
    from adaptgs.geometry import project_points
    assert d.sum() == project_points(g.mu.data, cam)[2].sum()


def test_center_transmittance(rng):
    cam = Camera(40.0, 40.0, 15.5, 15.5, 32, 32)
    sh = np.zeros((2, 3, 4))
    g = GaussianSet([[0.0, 0, 2], [0.0, 0, 3]], [[10.0] * 3] * 2, [[1.0, 0, 0, 0]] * 2, [0.9, 0.9], sh)
    t = center_transmittance(g, cam)
    assert t[0] == 1.0 and 0 < t[1] < 0.2
    far = _with(g, mu=np.array([[0.0, 0, 2], [10.0, 0, 2]]))
    assert center_transmittance(far, cam)[1] == 0.0


def test_preprocess_sorted_front_to_back(rng):
    g = random_gaussians(rng, 50)
    sp = preprocess(g, _cam(), RenderSettings())
    assert np.all(np.diff(sp.depth) >= 0)
    a, b, c = sp.conics.data.T
    assert np.all(a > 0) and np.all(a * c - b * b > 0)


def test_write_raw(tmp_path, rng):
    img = rng.uniform(0, 1, (3, 4, 5))
    write_raw(img, tmp_path / "x.raw")
    back = np.fromfile(tmp_path / "x.raw", dtype="<f4").reshape(3, 4, 5)
    assert np.allclose(back, img, atol=1e-7)
