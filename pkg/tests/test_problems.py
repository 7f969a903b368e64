import math
import warnings

import numpy as np
import pytest

from qfbsde.problems import (
    BUILTIN_NAMES,
    builtin,
    kpz_sigma,
    make_burgers_backward,
    make_burgers_coupled,
    make_kpz,
    make_porous_differentiated,
    make_porous_media,
    validate,
)

L_BENCH = 2 * math.sqrt(2) * math.pi


def test_burgers_coupled_coefficients():
    p = make_burgers_coupled(0.15, "sine")
    x = np.array([[0.1], [0.4]])
    y = np.array([0.5, -2.0])
    for z in (np.zeros((2, 1)), np.full((2, 1), 7.0)):
        assert p.b(x, y, z).tolist() == [[-0.5], [2.0]]
        assert p.f(x, y, z).tolist() == [0.0, 0.0]
    assert np.allclose(p.sigma(x, y), 0.15)
    assert not p.drift_depends_on_z
    assert p.H(np.array([[0.25]]))[0] == pytest.approx(1.0)
    assert make_burgers_coupled(0.15, "gaussian").H(np.array([[0.0]]))[0] == 1.0


def test_burgers_backward_coefficients():
    p = make_burgers_backward(1.0)
    assert p.f(np.zeros((1, 1)), np.array([2.0]), np.array([[3.0]]))[0] == -6.0
    assert np.all(p.b(np.ones((3, 1)), np.ones(3), np.ones((3, 1))) == 0)
    assert p.driver_depends_on_z and not p.assumption_a


def test_constructors_reject_bad_parameters():
    with pytest.raises(ValueError):
        make_burgers_coupled(0.0)
    with pytest.raises(ValueError):
        make_kpz(0.3, [[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(ValueError):
        make_kpz(-1.0, kpz_sigma(0.8))
    with pytest.raises(ValueError):
        make_porous_media(L=-1.0)
    with pytest.raises(ValueError):
        builtin("heat")


def test_kpz_driver():
    p = make_kpz(0.3, kpz_sigma(0.8))
    s = p.sigma(np.zeros((1, 2)), np.zeros(1))[0]
    assert np.allclose(s @ s.T, [[1.0, 0.8], [0.8, 1.0]])
    z = np.random.default_rng(0).normal(size=(50, 2))
    x, y = np.zeros((50, 2)), np.zeros(50)
    assert np.all(p.f(x, y, np.zeros((50, 2))) == 0)
    assert np.array_equal(p.f(x, y, z), p.f(x, y, -z))
    assert p.H(np.array([[0.25, 0.25]]))[0] == pytest.approx(1.0)


def test_porous_terminal_and_sigma():
    p = make_porous_media(L_BENCH, T=1.0)
    assert p.H(np.array([[0.0]]))[0] == pytest.approx(4 / 3)
    assert np.allclose(p.H(np.array([[L_BENCH / 2], [-L_BENCH / 2]])), 0.0, atol=1e-15)
    assert p.sigma(np.zeros((2, 1)), np.array([-1.0, 2.0]))[:, 0, 0].tolist() == [0.0, 2.0]
    # the drift equals du/dx: z / sigma with z = u_x sigma
    x = np.array([[0.3]])
    u = p.H(x)
    z = p.grad_H(x)[:, 0] * p.sigma(x, u)[:, 0, 0]
    assert p.b(x, u, z[:, None])[0, 0] == pytest.approx(p.grad_H(x)[0, 0])


def test_porous_differentiated_system():
    q = make_porous_differentiated(L_BENCH, 1.0)
    x = np.array([[0.0], [1.0]])
    u = np.array([1.0, 0.5])
    w = np.array([[0.2], [-0.4]])
    assert np.array_equal(q.drift_w(x, u, w), 3 * w)
    assert np.allclose(q.driver_w(x, u, w), [[0.4], [-0.4]])
    assert np.allclose(q.driver_u(x, u, w), [1.0, 0.25])


def test_validate_burgers_passes():
    rep = validate(make_burgers_coupled(0.15), samples=5000)
    assert rep.ok
    assert rep.estimates["b_y"] == pytest.approx(1.0)


def test_validate_porous_reports_ellipticity():
    with pytest.warns(UserWarning):
        rep = validate(make_porous_media())
    assert any("ellipticity" in v for v in rep.violations)


def test_validate_kpz_reports_quadratic_growth():
    with pytest.warns(UserWarning):
        rep = validate(make_kpz(0.3, kpz_sigma(0.8)))
    assert any("f_z" in v for v in rep.violations)


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_builtins_are_finite_on_sample_box(name):
    p = builtin(name)
    rng = np.random.default_rng(1)
    n, d = 10_000, p.dimension
    x = rng.uniform(-10, 10, (n, d))
    y = rng.uniform(-10, 10, n)
    z = rng.uniform(-10, 10, (n, d))
    for out in (p.b(x, y, z), p.f(x, y, z), p.sigma(x, y), p.H(x)):
        assert np.all(np.isfinite(out))


def test_builtins_are_deterministic():
    x = np.linspace(-1, 1, 7)[:, None]
    assert np.array_equal(builtin("burgers_periodic").H(x), builtin("burgers_periodic").H(x))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert validate(builtin("porous")).estimates == validate(builtin("porous")).estimates
