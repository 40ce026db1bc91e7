import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from wbsde.core import GeneratorSpec, alpha_constant
from wbsde.errors import ConfigurationError
from wbsde.transforms import (ball_rule, bump_mass, clamp_q, clamped_data_generator, estimate_envelope,
                              exp_gap, mollify_generator, truncated_generator, truncation_theta)


def _gen(fn, k=1, **kw):
    return GeneratorSpec(fn, lambda t, x: (0.0, 0.0), k=k, **kw)


def test_clamp_examples():
    np.testing.assert_allclose(clamp_q([3.0, 4.0], 10), [3, 4])
    np.testing.assert_allclose(clamp_q([3.0, 4.0], 5), [3, 4])
    np.testing.assert_allclose(clamp_q([3.0, 4.0], 1), [0.6, 0.8])
    np.testing.assert_allclose(clamp_q([3.0, 4.0], 0), [0, 0])


vec = st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=4)


@given(vec, st.floats(0, 1e3))
def test_clamp_norm_and_fixed_ball(x, r):
    x = np.array(x)
    out = clamp_q(x, r)
    assert math.hypot(*out) <= r * (1 + 1e-12)
    if math.hypot(*x) <= r:
        np.testing.assert_array_equal(out, x)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=2), st.lists(st.floats(-100, 100), min_size=2, max_size=2),
       st.floats(0.01, 50))
def test_clamp_one_lipschitz(a, b, r):
    a, b = np.array(a), np.array(b)
    assert np.linalg.norm(clamp_q(a, r) - clamp_q(b, r)) <= np.linalg.norm(a - b) * (1 + 1e-12) + 1e-12


def test_theta_examples():
    assert truncation_theta(0.0, 2.0, 0.5) == 0.5
    assert truncation_theta(3 * 0.5, 2.0, 0.5) == 0.0
    assert truncation_theta(1.2, 2.0, 0.5) == pytest.approx(0.3)
    with pytest.raises(ConfigurationError):
        truncation_theta(-0.1, 1.0, 0.5)


@given(st.floats(0, 100), st.floats(0, 100), st.floats(1e-3, 20), st.floats(1e-6, 1))
def test_theta_bounds_and_lipschitz(u1, u2, r, alpha):
    t1, t2 = truncation_theta(u1, r, alpha), truncation_theta(u2, r, alpha)
    assert 0 <= t1 <= alpha
    assert abs(t1 - t2) <= abs(u1 - u2) + 1e-12


def test_exp_gap_examples():
    assert exp_gap(0.0, 3.0) == (0.0, 0.0)
    lhs, rhs = exp_gap(1.0, 1.0)
    assert lhs == pytest.approx(math.e - 1) and rhs == pytest.approx(math.e)
    lhs, rhs = exp_gap(0.5, -2.0)
    assert lhs == pytest.approx(1 - math.exp(-1)) and rhs == pytest.approx(0.5 * (math.exp(2) + 1))
    with pytest.raises(ConfigurationError):
        exp_gap(1.5, 0.0)


@given(st.floats(0, 1), st.floats(-10, 10))
def test_exp_gap_inequality(lam, x):
    lhs, rhs = exp_gap(lam, x)
    assert lhs <= rhs + 1e-12 * max(1.0, rhs)


def test_exp_gap_equality_only_at_zero_product():
    rng = np.random.default_rng(0)
    lam = rng.uniform(0, 1, 100_000)
    x = rng.uniform(-10, 10, 100_000)
    lam[:100] = 0.0
    x[100:200] = 0.0
    lhs, rhs = exp_gap(lam, x)
    tight = np.abs(rhs - lhs) <= 1e-12
    assert np.all(np.abs(lam[tight] * x[tight]) <= 1e-12)


@pytest.mark.parametrize("k", [1, 2])
def test_ball_rule_weights(k):
    nodes, weights, raw = ball_rule(k, 32)
    assert abs(weights.sum() - 1) <= 1e-12
    assert np.all(np.sum(nodes ** 2, axis=1) < 1)
    # symmetric rule: first moment vanishes
    assert np.abs(weights @ nodes).max() < 1e-14
    assert abs(raw) < 1e-5


def test_bump_mass_dimension_limit():
    assert bump_mass(1) == pytest.approx(integrate.quad(lambda u: math.exp(-1 / (1 - u * u)), -1, 1)[0], rel=1e-10)
    with pytest.raises(ConfigurationError):
        bump_mass(4)


def test_mollify_affine_identity():
    g = _gen(lambda t, x, y, z: 2.0 * y + 1.0 + z[:, :, 0])
    gm = mollify_generator(g, 3)
    y = np.linspace(-2, 2, 9)[:, None]
    z = np.ones((9, 1, 1)) * 0.5
    x = np.zeros((9, 1))
    np.testing.assert_allclose(gm.eval(0.0, x, y, z), g.eval(0.0, x, y, z), atol=1e-10)


def test_mollify_affine_identity_2d():
    A = np.array([[1.0, -2.0], [0.5, 3.0]])
    g = _gen(lambda t, x, y, z: y @ A.T + 1.0, k=2)
    y = np.random.default_rng(0).normal(size=(6, 2))
    args = (0.0, np.zeros((6, 1)), y, np.zeros((6, 2, 1)))
    np.testing.assert_allclose(mollify_generator(g, 2).eval(*args), g.eval(*args), atol=1e-10)


def test_mollify_abs_value_scales_like_one_over_n():
    g = _gen(lambda t, x, y, z: np.abs(y))
    mass = integrate.quad(lambda u: math.exp(-1 / (1 - u * u)), -1, 1, epsabs=1e-14)[0]
    first = integrate.quad(lambda u: abs(u) * math.exp(-1 / (1 - u * u)), -1, 1, epsabs=1e-14)[0] / mass
    args = (0.0, np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1, 1)))
    vals = [mollify_generator(g, n).eval(*args)[0, 0] for n in (1, 2, 4, 8)]
    for n, v in zip((1, 2, 4, 8), vals):
        # the kink of |u| at the origin limits Gauss-Legendre to about 3 digits
        assert v == pytest.approx(first / n, rel=5e-3)
        assert v * n == pytest.approx(vals[0], rel=1e-12)
    assert all(a > b > 0 for a, b in zip(vals, vals[1:]))


def test_mollify_uniform_convergence_for_lipschitz_driver():
    g = _gen(lambda t, x, y, z: np.abs(y) + np.sin(3 * y) / 3)     # Lipschitz constant 2
    y = np.linspace(-3, 3, 301)[:, None]
    args = (0.0, np.zeros((301, 1)), y, np.zeros((301, 1, 1)))
    base = g.eval(*args)
    dists = [np.abs(mollify_generator(g, n).eval(*args) - base).max() for n in (1, 2, 4, 8, 16)]
    for n, d in zip((1, 2, 4, 8, 16), dists):
        assert d < 2 * 2 / n
    assert all(b <= a + 1e-12 for a, b in zip(dists, dists[1:]))


def _alpha_gen(fn, **kw):
    return GeneratorSpec(fn, lambda t, x: (0.0, 0.0), alpha=alpha_constant(1.0, rescale=False), **kw)


def test_truncated_generator_examples():
    g = _alpha_gen(lambda t, x, y, z: y ** 3 + 2.0)
    tg = truncated_generator(g, r=1.0, n=5.0)
    x = np.zeros((3, 1))
    z = np.zeros((3, 1, 1))
    alpha = np.full(3, 0.5)
    y = np.array([[1.2], [-3.0], [10.0]])       # all beyond (r + 1) alpha = 1
    np.testing.assert_allclose(tg.eval(0.3, x, y, z, alpha), 2.0)
    const = _alpha_gen(lambda t, x, y, z: np.full_like(y, 4.0))
    np.testing.assert_allclose(truncated_generator(const, 1.0, 2.0).eval(0.0, x, y, z, alpha), 4.0)
    ident = _alpha_gen(lambda t, x, y, z: y.copy())
    ys = np.linspace(-1, 1, 7)[:, None]
    one = np.ones(7)
    out = truncated_generator(ident, 1.0, 100.0).eval(0.0, np.zeros((7, 1)), ys, np.zeros((7, 1, 1)), one)
    np.testing.assert_allclose(out, ys, atol=1e-14)


@given(st.floats(0.1, 5), st.floats(0.5, 50), st.floats(0.01, 1), st.floats(-20, 20), st.floats(0, 3))
def test_truncated_generator_bound(r, n, alpha, y, t):
    g = _alpha_gen(lambda t, x, y, z: np.exp(y) - 0.5 + z[:, :, 0])
    tg = truncated_generator(g, r, n)
    args = (t, np.zeros((1, 1)), np.array([[y]]), np.array([[[0.3]]]))
    g0 = g.eval(t, np.zeros((1, 1)), np.zeros((1, 1)), np.array([[[0.3]]]))
    val = tg.eval(*args, np.array([alpha]))
    assert abs(val[0, 0] - g0[0, 0]) <= n * math.exp(-t) * alpha * (1 + 1e-9)


def test_truncated_generator_requires_alpha_and_envelope():
    g = GeneratorSpec(lambda t, x, y, z: y, lambda t, x: (0.0, 0.0))
    with pytest.raises(ConfigurationError):
        truncated_generator(g, 1.0, 1.0)
    with pytest.raises(ConfigurationError):
        truncated_generator(_alpha_gen(lambda t, x, y, z: y), 1.0, 1.0, envelope_samples=0)


def test_envelope_estimate_is_lower_bound():
    g = _gen(lambda t, x, y, z: y ** 2)
    env = estimate_envelope(g, 0.0, np.zeros((2, 1)), np.zeros((2, 1, 1)), np.array([1.0, 2.0]))
    np.testing.assert_allclose(env, [1.0, 4.0])


def test_clamped_data_generator_caps_value_at_zero():
    g = _alpha_gen(lambda t, x, y, z: y + 10.0)
    cg = clamped_data_generator(g, 2.0)
    out = cg.eval(0.0, np.zeros((1, 1)), np.array([[0.0]]), np.zeros((1, 1, 1)), np.array([0.5]))
    assert out[0, 0] == pytest.approx(2.0 * 0.25)
