import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import identity_camera, orbit_camera, random_splats, rel_err
from splitgs.gaussians import Splats, project_splats
from splitgs.rasterizer import T_EPSILON, bin_splats, render, render_backward, render_reference, splat_extents

FIELDS = ("positions", "rotations", "log_scales", "colors", "opacity", "omega", "mu")


def _splat(pos, color, opacity, log_scale=0.0):
    return Splats(np.array([pos], float), np.array([[1.0, 0, 0, 0]]), np.full((1, 3), log_scale),
                  np.array([color], float), np.array([opacity], float), np.zeros(1), np.zeros(1))


def _replace(s: Splats, name, value) -> Splats:
    return dataclasses.replace(s, **{name: value})


def test_empty_set_renders_black():
    cam = identity_camera(20, 10, f=10.0, cx=10, cy=5)
    for fn in (render, render_reference):
        out = fn(Splats.empty(), cam, 0.0)
        assert out.rgb.shape == (10, 20, 3) and not out.rgb.any() and not out.alpha.any()
    grads = render_backward(render(Splats.empty(), cam, 0.0), np.ones((10, 20, 3)))
    assert grads.positions.shape == (0, 3)


def test_single_splat_saturates_at_clamp():
    cam = identity_camera(32, 32, f=32.0, cx=16, cy=16)
    out = render(_splat([0, 0, 2], [1, 0, 0], 1.0, np.log(0.05)), cam, 0.0)
    np.testing.assert_allclose(out.rgb[16, 16], [0.99, 0, 0])
    assert out.alpha[16, 16] == pytest.approx(0.99)


def test_two_coincident_splats():
    cam = identity_camera(32, 32, f=32.0, cx=16, cy=16)
    front = _splat([0, 0, 2], [1, 1, 1], 0.5, np.log(0.05))
    back = _splat([0, 0, 2], [0, 0, 0], 0.5, np.log(0.05))
    out = render([front, back], cam, 0.0)
    np.testing.assert_allclose(out.rgb[16, 16], [0.5, 0.5, 0.5])
    assert out.alpha[16, 16] == pytest.approx(0.75)
    # index order breaks the depth tie
    swapped = render([back, front], cam, 0.0)
    np.testing.assert_allclose(swapped.rgb[16, 16], [0.25, 0.25, 0.25])


def test_opaque_splat_covering_frame_is_uniform():
    cam = identity_camera(16, 16, f=16.0, cx=8, cy=8)
    s = _splat([0, 0, 1], [0.2, 0.4, 0.6], 1.0, np.log(1000.0))
    for fn in (render, render_reference):
        np.testing.assert_allclose(fn(s, cam, 0.0).rgb, np.broadcast_to([0.198, 0.396, 0.594], (16, 16, 3)),
                                   atol=1e-6)


def _random_scene(rng, max_n=20):
    n = int(rng.integers(1, max_n + 1))
    size = int(rng.integers(8, 33))
    return random_splats(rng, n), orbit_camera(rng, size, int(rng.integers(8, 33))), float(rng.uniform())


def test_oracle_equivalence_without_culling(rng):
    for _ in range(100):
        splats, cam, t = _random_scene(rng)
        splats.opacity = np.minimum(splats.opacity, 0.3)  # never reach the termination threshold
        ref = render_reference(splats, cam, t)
        out = render(splats, cam, t, alpha_floor=0)
        assert np.abs(out.rgb - ref.rgb).max() < 1e-5
        assert np.abs(out.alpha - ref.alpha).max() < 1e-5


def test_oracle_equivalence_with_early_termination(rng):
    worst = 0.0
    for _ in range(100):
        splats, cam, t = _random_scene(rng)
        splats.opacity = rng.uniform(0.5, 1.0, len(splats))
        ref = render_reference(splats, cam, t)
        out = render(splats, cam, t)
        worst = max(worst, np.abs(out.rgb - ref.rgb).max(), np.abs(out.alpha - ref.alpha).max())
    assert worst < 1e-4


def test_early_termination_fires():
    cam = identity_camera(16, 16, f=16.0, cx=8, cy=8)
    stack = [_splat([0, 0, 1 + 0.1 * k], [1, 1, 1], 1.0, np.log(1000.0)) for k in range(5)]
    out = render(stack, cam, 0.0)
    # transmittance is 0.01**2 (not below the threshold) after two layers, 0.01**3 after three
    assert 0.01 ** 3 < T_EPSILON <= 0.01 ** 2
    assert np.all(out.n_contrib == 3)


def test_alpha_and_rgb_ranges(rng):
    for _ in range(20):
        splats, cam, t = _random_scene(rng)
        out = render(splats, cam, t)
        assert np.all((out.alpha >= 0) & (out.alpha <= 1))
        assert np.all(np.isfinite(out.rgb)) and out.rgb.max() <= 1 + 1e-12


@given(seed=st.integers(0, 2**32 - 1))
def test_permutation_without_ties_is_bit_identical(seed):
    rng = np.random.default_rng(seed)
    splats, cam, t = _random_scene(rng, 12)
    perm = rng.permutation(len(splats))
    shuffled = Splats(**{f: getattr(splats, f)[perm] for f in FIELDS})
    a, b = render(splats, cam, t), render(shuffled, cam, t)
    np.testing.assert_array_equal(a.rgb, b.rgb)
    np.testing.assert_array_equal(a.alpha, b.alpha)


@given(seed=st.integers(0, 2**32 - 1))
def test_alpha_monotone_in_opacity(seed):
    rng = np.random.default_rng(seed)
    splats, cam, t = _random_scene(rng, 10)
    k = int(rng.integers(len(splats)))
    before = render(splats, cam, t, alpha_floor=0).alpha
    splats.opacity[k] = min(1.0, splats.opacity[k] + rng.uniform(0.01, 0.5))
    after = render(splats, cam, t, alpha_floor=0).alpha
    assert np.all(after >= before - 1e-12)


def test_three_sigma_binning_is_available(rng):
    splats, cam, t = _random_scene(rng)
    proj = project_splats(splats, cam, t)
    ex, ey = splat_extents(proj, extent_sigmas=3.0)
    np.testing.assert_array_equal(ex, ey)
    ranges, ids = bin_splats(proj, cam.image_width, cam.image_height, extent_sigmas=3.0)
    assert ranges[-1, 1] == len(ids)


def test_tile_lists_sorted_by_depth(rng):
    splats, cam, t = _random_scene(rng)
    proj = project_splats(splats, cam, t)
    ranges, ids = bin_splats(proj, cam.image_width, cam.image_height)
    for lo, hi in ranges:
        d = proj.depths[ids[lo:hi]]
        assert np.all(np.diff(d) >= 0)


# ------------------------------------------------------------- backward

def _loss(splats, cam, t, w_rgb, w_alpha):
    out = render(splats, cam, t, alpha_floor=0)
    return float(np.sum(w_rgb * out.rgb) + np.sum(w_alpha * out.alpha))


def _fd_field(splats, name, cam, t, w_rgb, w_alpha, h=1e-6):
    base = getattr(splats, name)
    grad = np.zeros_like(base, dtype=np.float64)
    for idx in np.ndindex(base.shape):
        vals = []
        for sign in (1, -1):
            v = base.astype(np.float64).copy()
            v[idx] += sign * h
            vals.append(_loss(_replace(splats, name, v), cam, t, w_rgb, w_alpha))
        grad[idx] = (vals[0] - vals[1]) / (2 * h)
    return grad


def test_zero_upstream_gives_zero_gradients(rng):
    splats, cam, t = _random_scene(rng)
    out = render(splats, cam, t)
    g = render_backward(out, np.zeros_like(out.rgb), np.zeros_like(out.alpha))
    for f in FIELDS:
        assert not getattr(g, f).any()


def test_color_gradient_equals_alpha():
    cam = identity_camera(16, 16, f=16.0, cx=8, cy=8)
    s = _splat([0, 0, 2], [0.3, 0.3, 0.3], 0.7, np.log(0.2))
    out = render(s, cam, 0.0, alpha_floor=0)
    d_rgb = np.zeros((16, 16, 3))
    d_rgb[8, 8, 0] = 1.0
    g = render_backward(out, d_rgb)
    assert g.colors[0, 0] == pytest.approx(out.alpha[8, 8])
    assert g.colors[0, 1] == 0


def test_shape_mismatch_raises(rng):
    splats, cam, t = _random_scene(rng)
    out = render(splats, cam, t)
    with pytest.raises(ValueError):
        render_backward(out, np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        render_backward(out, np.zeros_like(out.rgb), np.zeros((2, 2)))


def test_gradients_match_finite_differences(rng):
    """Every splat parameter class on 20 random 8x8 micro-scenes."""
    worst = dict.fromkeys(FIELDS, 0.0)
    for _ in range(20):
        n = int(rng.integers(1, 6))
        splats = random_splats(rng, n, spread=0.5, scale=(-1.8, -1.0), opacity=(0.2, 0.8))
        cam = orbit_camera(rng, 8, 8)
        t = float(rng.uniform())
        w_rgb, w_alpha = rng.normal(size=(8, 8, 3)), rng.normal(size=(8, 8))
        g = render_backward(render(splats, cam, t, alpha_floor=0), w_rgb, w_alpha)
        for name in FIELDS:
            fd = _fd_field(splats, name, cam, t, w_rgb, w_alpha)
            worst[name] = max(worst[name], rel_err(getattr(g, name), fd))
    for name, err in worst.items():
        assert err < 1e-3, (name, err)


def test_non_contributing_splats_get_zero_gradient(rng):
    cam = identity_camera(16, 16, f=16.0, cx=8, cy=8)
    visible = _splat([0, 0, 2], [1, 0, 0], 0.5, np.log(0.2))
    behind = _splat([0, 0, -2], [0, 1, 0], 0.5, np.log(0.2))
    g = render_backward(render([visible, behind], cam, 0.0), rng.normal(size=(16, 16, 3)))
    for f in FIELDS:
        assert not getattr(g, f)[1].any()
    assert np.abs(g.colors[0]).sum() > 0


def test_backward_is_deterministic(rng):
    splats, cam, t = _random_scene(rng)
    w = rng.normal(size=(cam.image_height, cam.image_width, 3))
    a = render_backward(render(splats, cam, t), w)
    b = render_backward(render(splats, cam, t), w)
    for f in FIELDS:
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
