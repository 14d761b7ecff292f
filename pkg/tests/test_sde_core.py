import numpy as np
import pytest
from hypothesis import given, strategies as st

from periodicsde.errors import NumericalError
from periodicsde.sde_core import (PolyDriftSpec, PolyPotential, PotentialSpec, SdeModel,
                                  TrigPoly, apply_generator, build_duffing, build_gradient_model,
                                  build_langevin_model, build_poly_drift_model, eval_trig_poly,
                                  generic_model, periodicity_defect)

coef = st.floats(-3, 3, allow_nan=False)
trig = st.builds(
    lambda T, a0, a, b: TrigPoly(T, a0, a, b),
    st.floats(0.1, 10), coef, st.lists(coef, max_size=4), st.lists(coef, max_size=4),
)


# --- TrigPoly -------------------------------------------------------------

def test_eval_examples():
    assert eval_trig_poly(TrigPoly(3.0, 2 * 0.7), 1.234) == pytest.approx(0.7)
    f = TrigPoly(1.0, 0.0, [1.0], [0.0])
    assert eval_trig_poly(f, 0.0) == pytest.approx(-1.0, abs=1e-15)
    assert eval_trig_poly(f, 0.5) == pytest.approx(1.0, abs=1e-15)


def test_standard_convention():
    # standard cos(2 pi n t / T) coefficients pick up (-1)^n in the shifted form
    f = TrigPoly.from_standard(2.0, 0.4, [1.0, 0.5, -0.3], [0.2, 0.0, 0.7])
    t = np.linspace(0, 4, 37)
    w = np.pi * t
    ref = 0.2 + np.cos(w) + 0.5 * np.cos(2 * w) - 0.3 * np.cos(3 * w) + 0.2 * np.sin(w) + 0.7 * np.sin(3 * w)
    np.testing.assert_allclose(f(t), ref, atol=1e-13)
    np.testing.assert_allclose(TrigPoly.cosine(2.0, 0.5)(t), 2 * np.cos(4 * np.pi * t), atol=1e-13)


def test_from_function_roundtrip():
    f = TrigPoly(1.5, 0.3, [0.2, -1.0], [0.5, 0.1])
    g = TrigPoly.from_function(f, 1.5, 4)
    np.testing.assert_allclose(g.cos_coeffs[:2], f.cos_coeffs, atol=1e-13)
    np.testing.assert_allclose(g.sin_coeffs[:2], f.sin_coeffs, atol=1e-13)
    assert abs(g.a0 - f.a0) < 1e-13 and np.allclose(g.cos_coeffs[2:], 0, atol=1e-13)


@given(trig, st.floats(-50, 50))
def test_periodic(f, t):
    assert f(t + f.period) == pytest.approx(f(t), rel=1e-12, abs=1e-12 * (1 + f.sup_bound()))


@given(trig, st.floats(0, 10))
def test_derivative_matches_differences(f, t):
    # central differences are O(h^2): the error drops ~4x when h halves
    d = f.derivative()(t)
    scale = 1 + f.sup_bound() * (2 * np.pi * max(1, f.n_harmonics) / f.period) ** 3
    for h in (1e-3 * f.period, 5e-4 * f.period):
        fd = (f(t + h) - f(t - h)) / (2 * h)
        assert abs(fd - d) <= scale * h * h + 1e-9


@given(trig, st.floats(0, 10))
def test_sup_bound(f, t):
    assert abs(f(t)) <= f.sup_bound() + 1e-12


@given(trig, trig, st.floats(-2, 2), st.floats(0, 5))
def test_algebra(f, g, c, t):
    g = TrigPoly(f.period, g.a0, g.cos_coeffs, g.sin_coeffs)
    assert (f + g)(t) == pytest.approx(f(t) + g(t), abs=1e-10)
    assert (c * f - g)(t) == pytest.approx(c * f(t) - g(t), abs=1e-10)
    assert (f + c)(t) == pytest.approx(f(t) + c, abs=1e-10)


def test_mismatched_periods_rejected():
    with pytest.raises(ValueError):
        TrigPoly(1.0, 1.0) + TrigPoly(2.0, 1.0)
    with pytest.raises(ValueError):
        TrigPoly(0.0)


# --- builders -------------------------------------------------------------

def test_duffing_examples():
    m = build_duffing(0.0, 0.7, 1.0)
    assert m.drift(1.3, np.array([0.0]))[0] == 0.0
    m = build_duffing(0.12, 0.001, 0.285)
    assert m.drift(0.0, np.array([1.0]))[0] == pytest.approx(0.12, abs=1e-15)
    assert m.period == pytest.approx(2 * np.pi / 0.001)
    x = np.array([[0.3], [-1.7]])
    np.testing.assert_allclose(m.drift(5.0 + m.period, x), m.drift(5.0, x), atol=1e-10)
    assert build_duffing(0.5, 0.0, 1.0).period == 1.0
    with pytest.raises(ValueError):
        build_duffing(0.3, 1.0, 0.0)


def test_poly_drift_examples():
    m = build_poly_drift_model(PolyDriftSpec(1.0, ((0.0, -1.0),)), 1.0)
    np.testing.assert_allclose(m.drift(0.3, np.array([[2.0], [-0.5]])), [[-2.0], [0.5]])
    # Duffing as a generic spec agrees with the dedicated builder on a grid
    A, w = 0.4, 2.0
    T = 2 * np.pi / w
    spec = PolyDriftSpec(T, ((TrigPoly.cosine(A, T), 1.0, 0.0, -1.0),))
    a, b = build_poly_drift_model(spec, 0.5), build_duffing(A, w, 0.5)
    x = np.linspace(-3, 3, 41)[:, None]
    for t in np.linspace(0, 2 * T, 17):
        np.testing.assert_allclose(a.drift(t, x), b.drift(t, x), atol=1e-13)
    # coordinates do not talk to each other
    spec2 = PolyDriftSpec(1.0, ((1.0, -2.0), (0.0, 1.0, 0.0, -1.0)))
    m2 = build_poly_drift_model(spec2, np.eye(2))
    base = m2.drift(0.1, np.array([0.5, 0.5]))
    moved = m2.drift(0.1, np.array([0.5, 3.0]))
    assert base[0] == moved[0] and base[1] != moved[1]


def test_poly_spec_validation():
    with pytest.raises(ValueError):
        PolyDriftSpec(1.0, ((0.0, 1.0, -1.0),))  # odd number of entries
    with pytest.raises(ValueError):
        PolyDriftSpec(1.0, ((0.0, TrigPoly.cosine(1.0, 1.0)),))  # non-constant leading
    with pytest.raises(ValueError):
        build_poly_drift_model(PolyDriftSpec(1.0, ((0.0, -1.0),)), np.eye(2))


def test_gradient_examples():
    alpha, T = 2.0, 1.0
    S = TrigPoly.cosine(1.0, T)
    # V = alpha/2 (x - S/alpha)^2 = alpha/2 x^2 - S x + const
    pot = PolyPotential([[0.0, -S, alpha / 2]], T)
    m = build_gradient_model(pot, 1.0)
    x = np.linspace(-2, 2, 9)[:, None]
    for t in (0.0, 0.3):
        np.testing.assert_allclose(m.drift(t, x)[:, 0], S(t) - alpha * x[:, 0], atol=1e-13)
    # double well with forcing: drift = -x^3 + x - A cos(wt), opposite sign to build_duffing
    A, w = 0.3, 1.0
    Tw = 2 * np.pi / w
    dw = build_gradient_model(PolyPotential([[0.0, TrigPoly.cosine(A, Tw), -0.5, 0.0, 0.25]], Tw), 1.0)
    duff = build_duffing(A, w, 1.0)
    for t in (0.0, 1.0, 2.5):
        np.testing.assert_allclose(dw.drift(t, x), -x**3 + x - A * np.cos(w * t), atol=1e-13)
        np.testing.assert_allclose(dw.drift(t, x) + A * np.cos(w * t),
                                   duff.drift(t, x) - A * np.cos(w * t), atol=1e-13)
    flat = build_gradient_model(PolyPotential([[3.0], [1.5]], T), 1.0)
    np.testing.assert_array_equal(flat.drift(0.2, np.ones((4, 2))), 0.0)


@given(st.floats(0, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_matches_value_differences(t, x0, x1):
    pot = PotentialSpec(lambda t, x: np.cos(t) * x[..., 0] ** 3 + x[..., 0] * np.sin(x[..., 1]) + x[..., 1] ** 4,
                        period=2 * np.pi)
    m = build_gradient_model(pot, np.eye(2), dim=2)
    x = np.array([x0, x1])
    exact = -np.array([3 * np.cos(t) * x0**2 + np.sin(x1), x0 * np.cos(x1) + 4 * x1**3])
    assert np.allclose(m.drift(t, x), exact, rtol=1e-6, atol=1e-6)


def test_langevin_examples():
    m = build_langevin_model(lambda t, q: 0 * q, 0.0, 1.0, 1.0)
    np.testing.assert_allclose(m.drift(0.0, np.array([1.0, 2.0])), [2.0, 0.0])
    m = build_langevin_model(lambda t, q: -q + np.cos(t), 1.0, 0.5, 2 * np.pi)
    t = 0.7
    np.testing.assert_allclose(m.drift(t, np.array([1.0, 2.0])), [2.0, -2.0 - 1.0 + np.cos(t)])
    sig = m.diffusion(0.0, np.zeros(2))
    assert sig[0, 0] == 0 and sig[0, 1] == 0 and sig[1, 0] == 0 and sig[1, 1] == 0.5
    with pytest.raises(ValueError):
        build_langevin_model(lambda t, q: q, 1.0, np.zeros((1, 1)), 1.0)


@given(st.integers(1, 3), st.floats(0.1, 2))
def test_langevin_noise_rank(d, scale):
    rng = np.random.default_rng(d)
    s = scale * np.eye(d) + 0.1 * rng.normal(size=(d, d))
    m = build_langevin_model(lambda t, q: -q, 0.5, s, 1.0, dim=d)
    a = m.diffusion_matrix(0.0, np.zeros(2 * d))
    assert np.linalg.matrix_rank(a) == d


def test_models_are_periodic(ou, duffing):
    lang = build_langevin_model(lambda t, q: -q + np.cos(t), 1.0, 0.5, 2 * np.pi)
    for m in (ou.to_sde_model(), duffing, lang):
        assert periodicity_defect(m) < 1e-10


def test_model_shape_checks():
    with pytest.raises(ValueError):
        SdeModel(2, 1.0, lambda t, x: x, lambda t, x: np.eye(3))
    with pytest.raises(ValueError):
        SdeModel(1, -1.0, lambda t, x: x, lambda t, x: np.eye(1))
    m = generic_model(2, 1.0, lambda t, x: -x, lambda t, x: np.diag(1 + x**2), vectorized=False)
    assert m.diffusion(0.0, np.ones((5, 2))).shape == (5, 2, 2)


# --- generator ------------------------------------------------------------

def test_generator_examples(ou):
    const = PolyPotential([[4.2]], 1.0)
    assert apply_generator(ou.to_sde_model(), const, 0.3, np.array([1.5])) == 0.0
    alpha, sigma = 1.7, 0.6
    from periodicsde.ou_analytic import OuModel
    m = OuModel.scalar(alpha, sigma, TrigPoly(1.0)).to_sde_model()
    for x in (-2.0, 0.0, 0.5, 3.0):
        val = apply_generator(m, PolyPotential.squared_norm(1, 1.0), 0.2, np.array([x]))
        assert val == pytest.approx(-2 * alpha * x * x + sigma**2, abs=1e-12)


def test_generator_gradient_form():
    T = 2 * np.pi
    pot = PolyPotential([[0.0, TrigPoly.cosine(0.4, T), -0.5, 0.0, 0.25]], T)
    m = build_gradient_model(pot, 0.7)
    for t, x in [(0.3, 1.2), (2.0, -0.4), (5.5, 2.2)]:
        X = np.array([x])
        g = pot.gradient(t, X)
        expect = pot.time_derivative(t, X) - g @ g + 0.5 * 0.49 * pot.hessian(t, X)[0, 0]
        assert apply_generator(m, pot, t, X) == pytest.approx(float(expect), rel=1e-12)


def _lang_hessian(t, z):
    q, p = z[..., 0], z[..., 1]
    return np.stack([np.stack([2 * p, 2 * q], -1), np.stack([2 * q, np.ones_like(q)], -1)], -2)


def test_generator_langevin_form():
    gamma, s = 0.8, 0.5
    m = build_langevin_model(lambda t, q: -q**3 + np.cos(t), gamma, s, 2 * np.pi)
    # f(q, p) = q^2 p + p^2 / 2
    f = PotentialSpec(lambda t, z: z[..., 0] ** 2 * z[..., 1] + 0.5 * z[..., 1] ** 2,
                      gradient=lambda t, z: np.stack([2 * z[..., 0] * z[..., 1], z[..., 0] ** 2 + z[..., 1]], -1),
                      time_derivative=lambda t, z: 0 * z[..., 0],
                      hessian=_lang_hessian)
    t, q, p = 0.4, 0.9, -0.3
    # p d_q f + (-gamma p + F) d_p f + s^2/2 d_pp f
    F = -q**3 + np.cos(t)
    expect = p * 2 * q * p + (-gamma * p + F) * (q * q + p) + 0.5 * s * s
    assert apply_generator(m, f, t, np.array([q, p])) == pytest.approx(expect, rel=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 6), st.floats(-2, 2), st.floats(-2, 2))
def test_generator_linear(x0, x1, t, a, b):
    m = generic_model(2, 2 * np.pi,
                      lambda t, x: np.stack([-x[..., 0] ** 3 + np.sin(t), -x[..., 1] + x[..., 0]], -1),
                      lambda t, x: np.broadcast_to(np.array([[1.0, 0.2], [0.0, 0.5]]), x.shape[:-1] + (2, 2)))
    f = PotentialSpec(lambda t, x: np.cos(t) * x[..., 0] ** 2 + x[..., 0] * x[..., 1])
    g = PotentialSpec(lambda t, x: np.exp(0.1 * x[..., 1]) + x[..., 0] ** 4)
    h = PotentialSpec(lambda t, x: a * f.value(t, x) + b * g.value(t, x))
    x = np.array([x0, x1])
    lhs = apply_generator(m, h, t, x)
    rhs = a * apply_generator(m, f, t, x) + b * apply_generator(m, g, t, x)
    # finite-difference fallbacks are exact to rounding only on polynomials; allow FD noise
    assert lhs == pytest.approx(rhs, rel=1e-6, abs=1e-5)


def test_generator_linear_exact_derivatives():
    # with analytic derivatives the identity holds to 1e-9 relative
    T = 1.0
    f = PolyPotential([[0.0, TrigPoly.cosine(1.0, T), 2.0, 0.0, 0.5], [1.0, 0.0, 3.0]], T)
    g = PolyPotential([[0.0, 0.0, 0.0, 1.0], [0.0, TrigPoly.cosine(0.5, T, 2), 1.0]], T)
    m = build_poly_drift_model(PolyDriftSpec(T, ((TrigPoly.cosine(0.3, T), 1.0, 0.0, -1.0), (0.0, -2.0))),
                               np.diag([0.4, 0.9]))
    rng = np.random.default_rng(5)
    for _ in range(200):
        t, x = rng.uniform(0, 2), rng.normal(scale=2, size=2)
        a, b = rng.normal(size=2)
        rows = [[a * u + b * v for u, v in zip(_pad(r1, 5), _pad(r2, 5))] for r1, r2 in zip(f.coeffs, g.coeffs)]
        h = PolyPotential(rows, T)
        lhs = apply_generator(m, h, t, x)
        rhs = a * apply_generator(m, f, t, x) + b * apply_generator(m, g, t, x)
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


def _pad(row, n):
    return list(row) + [0.0] * (n - len(row))


def test_generator_rejects_nonfinite(ou):
    bad = PotentialSpec(lambda t, x: np.sqrt(-1.0 - x[..., 0] ** 2))
    with np.errstate(invalid="ignore"):
        with pytest.raises(NumericalError):
            apply_generator(ou.to_sde_model(), bad, 0.0, np.array([0.0]))
