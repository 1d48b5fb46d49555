import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from freestyle.errors import ConfigError
from freestyle.spectral import (ModulationConfig, fourier_filter, modulate_content, modulate_style, radial_mask,
                                resolve_n)


def test_mask_s1_all_ones():
    assert (radial_mask(7, 10, 3.0, 1.0).gains == 1).all()


def test_mask_4x4_single_dc_bin():
    g = radial_mask(4, 4, 1.0, 2.0).gains
    # enumerate radii from the shifted centre (2, 2)
    expected = np.ones((4, 4))
    for u in range(4):
        for v in range(4):
            if ((u - 2) ** 2 + (v - 2) ** 2) ** 0.5 < 1.0:
                expected[u, v] = 2.0
    assert (g == expected).all() and (g == 2).sum() == 1 and g[2, 2] == 2


@pytest.mark.parametrize("h,w", [(1, 1), (3, 5), (8, 8), (9, 4)])
def test_mask_dc_value_and_two_valued(h, w):
    g = radial_mask(h, w, 1.5, 0.4).gains
    assert g[h // 2, w // 2] == 0.4
    assert set(np.unique(g)) <= {0.4, 1.0}


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 33), st.integers(1, 33), st.floats(0, 20), st.floats(0.1, 5))
def test_mask_rotational_symmetry(h, w, r, s):
    g = radial_mask(h, w, r, s).gains
    cu, cv = h // 2, w // 2
    for u in range(h):
        for v in range(w):
            assert g[u, v] == g[(2 * cu - u) % h, (2 * cv - v) % w]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(0, 2 ** 31))
def test_style_identity_when_s_is_one(h, w, seed):
    x = torch.randn(2, 3, h, w, generator=torch.Generator().manual_seed(seed))
    assert (modulate_style(x, 1.0, 1.0) - x).abs().max() <= 1e-5
    # the explicit roundtrip (all-ones mask) is also within the bound
    assert (fourier_filter(x, np.ones((h, w))) - x).abs().max() <= 1e-5


def test_constant_plane_is_pure_dc():
    x = torch.full((1, 2, 8, 8), 0.75)
    assert torch.allclose(modulate_style(x, 2.0, 1.0), 2 * x, atol=1e-5)


def test_checkerboard_untouched():
    yy, xx = np.mgrid[0:8, 0:8]
    plane = torch.from_numpy(np.where((yy + xx) % 2, 1.0, -1.0).astype(np.float32))[None, None]
    spec = np.fft.fft2(plane[0, 0].double().numpy())
    assert abs(spec[0, 0]) < 1e-9
    assert (modulate_style(plane, 2.0, 1.0) - plane).abs().max() < 1e-5


def test_style_energy_parseval():
    g = torch.Generator().manual_seed(2)
    x = torch.randn(1, 4, 12, 10, generator=g) + 0.5
    for s in (1.0, 1.5, 3.0):
        y = modulate_style(x, s, 2.0).double()
        spatial = (y ** 2).sum()
        spectral = (torch.fft.fft2(y).abs() ** 2).sum() / (12 * 10)
        assert abs(spatial / spectral - 1) < 1e-4
        assert spatial >= (x.double() ** 2).sum() * (1 - 1e-6)
    zero_dc = x - x.mean(dim=(2, 3), keepdim=True)
    y = modulate_style(zero_dc, 3.0, 1.0)
    assert torch.allclose((y ** 2).sum(), (zero_dc ** 2).sum(), rtol=1e-4)


def test_content_examples():
    x = torch.ones(1, 4, 2, 2)
    out = modulate_content(x, 2.5, 2)
    assert (out[:, :2] == 2.5).all() and (out[:, 2:] == 1.0).all()
    y = torch.randn(2, 6, 3, 3)
    assert torch.equal(modulate_content(y, 1.0, 4), y)
    assert torch.equal(modulate_content(y, 7.0, 0), y)
    with pytest.raises(ConfigError):
        modulate_content(y, 2.0, 7)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.integers(0, 6), st.floats(0.5, 4))
def test_content_linearity(a, n, b):
    g = torch.Generator().manual_seed(n)
    x, y = torch.randn(2, 6, 4, 4, generator=g), torch.randn(2, 6, 4, 4, generator=g)
    lhs = modulate_content(a * x + y, b, n)
    rhs = a * modulate_content(x, b, n) + modulate_content(y, b, n)
    assert (lhs - rhs).abs().max() < 1e-5


def test_resolve_n():
    assert resolve_n(0.25, 1280) == 320
    assert resolve_n(0.0, 17) == 0
    assert resolve_n(1.0, 64) == 64


def test_config_defaults_and_validation():
    m = ModulationConfig()
    assert (m.b, m.s, m.n_fraction, m.r_thresh) == (2.5, 1.0, 0.25, 1.0)
    for bad in ({"b": 0}, {"s": -1}, {"n_fraction": 1.5}, {"r_thresh": -0.1}):
        with pytest.raises(ConfigError):
            ModulationConfig(**bad)


@pytest.mark.parametrize("num_levels,expected", [(1, {0}), (2, {1}), (3, {1, 2}), (4, {2, 3}), (5, {2, 3, 4})])
def test_default_levels_are_the_deeper_half(num_levels, expected):
    m = ModulationConfig()
    assert {i for i in range(num_levels) if m.applies_to(i, num_levels)} == expected
    explicit = ModulationConfig(apply_levels=[0])
    assert [explicit.applies_to(i, num_levels) for i in range(num_levels)] == [i == 0 for i in range(num_levels)]
