import numpy as np
import pytest
from hypothesis import given, strategies as st

from periodicsde import fokker_planck as fp
from periodicsde.ergodicity import HistGrid, gaussian_cell_masses, tv_distance
from periodicsde.errors import ConvergenceError
from periodicsde.ou_analytic import periodic_measure
from periodicsde.sde_core import build_duffing, generic_model

from conftest import make_ou


def gauss(x, m, v):
    return np.exp(-0.5 * (x - m) ** 2 / v) / np.sqrt(2 * np.pi * v)


@pytest.fixture(scope="module")
def ou_solution():
    ou = make_ou()
    grid = fp.FpGrid(-5.0, 5.0, 400, 200, 1.0)
    return ou, fp.solve_periodic(ou.to_sde_model(), grid, tol=1e-10)


def test_stationary_gaussian_operator():
    m = make_ou(amp=0.0).to_sde_model()  # invariant law N(0, 1/2)
    errs = []
    for nx in (200, 400):
        g = fp.FpGrid(-5, 5, nx, 16, 1.0)
        errs.append(np.abs(fp.fp_operator_apply(m, 0.3, gauss(g.centers, 0, 0.5), g)).max())
    assert errs[0] < 1e-3
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.1)


@given(st.integers(0, 10_000), st.floats(0, 1))
def test_operator_conserves_mass(seed, t):
    g = fp.FpGrid(-4, 4, 64, 16, 2 * np.pi)
    q = np.random.default_rng(seed).uniform(0, 1, 64)
    dq = fp.fp_operator_apply(build_duffing(0.3, 1.0, 0.8), t, q, g)
    assert abs(dq.sum() * g.dx) <= 1e-12 * np.abs(dq).sum() * g.dx + 1e-14


def test_evolve_examples():
    m = make_ou(amp=0.0).to_sde_model()
    g = fp.FpGrid(-6, 6, 480, 200, 1.0)
    res = fp.evolve_one_period(m, gauss(g.centers, 0, 0.5), g)
    assert abs(res.q.sum() * g.dx - 1) < 1e-10
    assert np.abs(res.q - gauss(g.centers, 0, 0.5)).sum() * g.dx < 1e-3
    # a point mass spreads to the transition variance (1 - e^{-2})/2
    q0 = np.zeros(g.nx)
    q0[g.nx // 2] = 1 / g.dx
    q = fp.evolve_one_period(m, q0, g).q
    x = g.centers
    mean = (x * q).sum() * g.dx
    var = ((x - mean) ** 2 * q).sum() * g.dx
    assert mean == pytest.approx(x[g.nx // 2] * np.exp(-1), abs=1e-4)
    assert var == pytest.approx((1 - np.exp(-2)) / 2, abs=5e-3)
    with pytest.raises(ValueError):
        fp.evolve_one_period(m, -q0, g)
    with pytest.raises(ValueError):
        fp.evolve_one_period(m, np.zeros(5), g)


def test_ou_matches_analytic(ou_solution):
    ou, pd = ou_solution
    x = pd.grid.centers
    for s in (0.0, 0.25, 0.6):
        rho = periodic_measure(ou, s)
        q = fp.density_at(pd, s)
        assert np.abs(q - gauss(x, rho.mean[0], rho.cov[0, 0])).sum() * pd.grid.dx < 1e-2
    assert np.abs(pd.values[0] - pd.values[-1]).sum() * pd.grid.dx < 2e-10


def test_fixed_point_and_contraction(ou_solution):
    ou, pd = ou_solution
    g = pd.grid
    again = fp.evolve_one_period(ou.to_sde_model(), pd.values[0], g).q
    assert np.abs(again - pd.values[0]).sum() * g.dx < 2e-10
    h = np.array(pd.history)
    assert np.all(np.diff(h) <= 1e-12)
    assert pd.clip_events < 1e-3 * g.nx * g.nt * pd.iterations
    assert pd.boundary_mass < 1e-8
    assert pd.mass(0) == pytest.approx(1.0, abs=1e-10)
    assert pd.trapezoid_mass(0) == pytest.approx(1.0, abs=1e-6)


def test_lifted_residual_shrinks():
    m = make_ou().to_sde_model()
    res = []
    for nx, nt in ((100, 50), (200, 200)):
        pd = fp.solve_periodic(m, fp.FpGrid(-5, 5, nx, nt, 1.0), tol=1e-10)
        res.append(fp.lifted_residual(m, pd))
    assert res[1] < res[0] / 3


def test_initialisation_independent():
    m = make_ou().to_sde_model()
    g = fp.FpGrid(-5, 5, 200, 100, 1.0)
    tol = 1e-9
    rng = np.random.default_rng(0)
    sols = [fp.solve_periodic(m, g, tol=tol).values[0]]
    for _ in range(3):
        sols.append(fp.solve_periodic(m, g, init=rng.uniform(0, 1, g.nx), tol=tol).values[0])
    for q in sols[1:]:
        assert np.abs(q - sols[0]).sum() * g.dx < 3 * tol


def test_autonomous_stationary():
    m = make_ou(amp=0.0).to_sde_model()
    pd = fp.solve_periodic(m, fp.FpGrid(-5, 5, 200, 32, 1.0), tol=1e-11)
    assert np.abs(pd.values - pd.values[0]).max() < 1e-9
    assert np.abs(pd.values[0] - gauss(pd.grid.centers, 0, 0.5)).sum() * pd.grid.dx < 1e-3


def test_unforced_duffing_symmetric_bimodal():
    m = build_duffing(0.0, 1.0, 0.8)
    pd = fp.solve_periodic(m, fp.FpGrid(-3.5, 3.5, 280, 64, m.period), tol=1e-10)
    q = pd.values[0]
    assert np.abs(q - q[::-1]).max() < 1e-8 * q.max()
    x = pd.grid.centers
    peak = np.argmax(q)
    assert abs(abs(x[peak]) - 1.0) < 0.1
    assert q[pd.grid.nx // 2] < 0.9 * q.max()


def test_errors():
    flat = generic_model(1, 1.0, lambda t, x: -x, lambda t, x: np.zeros(np.shape(x)[:-1] + (1, 1)))
    with pytest.raises(ValueError, match="elliptic"):
        fp.solve_periodic(flat, fp.FpGrid(-2, 2, 32, 16, 1.0))
    with pytest.raises(ConvergenceError):
        fp.solve_periodic(make_ou().to_sde_model(), fp.FpGrid(-5, 5, 64, 16, 1.0), max_iters=2)
    with pytest.raises(ValueError):
        fp.solve_periodic(make_ou().to_sde_model(), fp.FpGrid(-5, 5, 64, 16, 2.0))
    with pytest.raises(ValueError):
        fp.FpGrid(1, 0, 64, 16, 1.0)
    with pytest.raises(ValueError):
        fp.FpGrid(0, 1, 8, 16, 1.0)


def test_density_to_measures(ou_solution):
    ou, pd = ou_solution
    native = fp.density_to_measures(pd, [0.0, 0.5])
    assert native[0.5].masses.sum() == pytest.approx(1.0)
    coarse = HistGrid(-4, 4, 40)
    mu = fp.density_to_measures(pd, [0.5], coarse)[0.5]
    exact = gaussian_cell_masses(periodic_measure(ou, 0.5), coarse)
    assert tv_distance(mu, exact) < 5e-3
    with pytest.raises(ValueError):
        fp.density_at(pd, 1.0)
