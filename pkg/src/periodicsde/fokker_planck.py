"""Periodic Fokker-Planck solver in one space dimension.

Finite volumes on cell centres with zero-flux walls. Interface flux

    F_{j+1/2} = b_{j+1/2} (q_j + q_{j+1}) / 2 - (D_{j+1} q_{j+1} - D_j q_j) / (2 dx),

D = sigma^2, so dq_j/dt = -(F_{j+1/2} - F_{j-1/2}) / dx. Time stepping is
Crank-Nicolson; the periodic density is the fixed point of the period map,
found by power iteration.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded

from .errors import ConvergenceError, NumericalError
from .ergodicity import EmpiricalMeasure, HistGrid

log = logging.getLogger(__name__)

MASS_DRIFT_LIMIT = 1e-6
CLIP_LEVEL = -1e-12


@dataclass(frozen=True)
class FpGrid:
    x_lo: float
    x_hi: float
    nx: int
    nt: int
    period: float

    def __post_init__(self):
        if not self.x_hi > self.x_lo:
            raise ValueError("need x_hi > x_lo")
        if self.nx < 16 or self.nt < 16:
            raise ValueError("nx and nt must be at least 16")
        if not self.period > 0:
            raise ValueError("period must be positive")

    @property
    def dx(self):
        return (self.x_hi - self.x_lo) / self.nx

    @property
    def dt(self):
        return self.period / self.nt

    @property
    def centers(self):
        return self.x_lo + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def interfaces(self):
        return self.x_lo + np.arange(1, self.nx) * self.dx

    def to_dict(self):
        return {"x_lo": self.x_lo, "x_hi": self.x_hi, "nx": self.nx, "nt": self.nt,
                "period": self.period}


def _coefficients(model, t, grid):
    if model.dim != 1:
        raise ValueError("Fokker-Planck solver is one-dimensional")
    xc = grid.centers[:, None]
    D = np.asarray(model.diffusion_matrix(t, xc), float)[:, 0, 0]
    if not np.all(D > 0):
        j = int(np.argmin(D))
        raise ValueError(f"fokker_planck: diffusion not elliptic at x={xc[j, 0]:g} (sigma^2={D[j]:g})")
    b = np.asarray(model.drift(t, grid.interfaces[:, None]), float)[:, 0]
    return b, D


def _bands(model, t, grid):
    """Tridiagonal L*(t) as (lower, diag, upper) with lower[j] = L[j, j-1]."""
    b, D = _coefficients(model, t, grid)
    dx = grid.dx
    alpha = 0.5 * b + 0.5 * D[:-1] / dx  # F_{j+1/2} = alpha_j q_j + beta_j q_{j+1}
    beta = 0.5 * b - 0.5 * D[1:] / dx
    n = grid.nx
    lower = np.zeros(n)
    diag = np.zeros(n)
    upper = np.zeros(n)
    lower[1:] = alpha / dx
    upper[:-1] = -beta / dx
    diag[1:] += beta / dx
    diag[:-1] -= alpha / dx
    return lower, diag, upper


def _tri_apply(bands, q):
    lower, diag, upper = bands
    out = diag * q
    out[1:] += lower[1:] * q[:-1]
    out[:-1] += upper[:-1] * q[1:]
    return out


def fp_operator_apply(model, t, q, grid: FpGrid):
    """Discrete L*(t) q on the grid (density units)."""
    q = np.asarray(q, float)
    if q.shape != (grid.nx,):
        raise ValueError(f"density must have shape ({grid.nx},)")
    return _tri_apply(_bands(model, t, grid), q)


@dataclass
class _PeriodOps:
    rhs: list  # bands of L*(t_k), k = 0..nt
    lhs: list  # banded (3, nx) matrices I - dt/2 L*(t_{k+1})


def _period_operators(model, grid):
    dt = grid.dt
    bands = [_bands(model, k * dt, grid) for k in range(grid.nt + 1)]
    lhs = []
    for k in range(1, grid.nt + 1):
        lower, diag, upper = bands[k]
        ab = np.zeros((3, grid.nx))
        ab[0, 1:] = -0.5 * dt * upper[:-1]
        ab[1] = 1.0 - 0.5 * dt * diag
        ab[2, :-1] = -0.5 * dt * lower[1:]
        lhs.append(ab)
    return _PeriodOps(bands, lhs)


@dataclass
class PeriodResult:
    q: np.ndarray
    slices: np.ndarray  # (nt+1, nx)
    clip_events: int
    mass_drift: float


def evolve_one_period(model, q0, grid: FpGrid, ops=None):
    """Crank-Nicolson march of dq/dt = L*(t) q over [0, T]."""
    q = np.array(q0, dtype=float)
    if q.shape != (grid.nx,):
        raise ValueError(f"density must have shape ({grid.nx},)")
    if np.any(q < CLIP_LEVEL):
        raise ValueError("initial density must be nonnegative")
    ops = ops or _period_operators(model, grid)
    dt, dx = grid.dt, grid.dx
    mass0 = q.sum() * dx
    if not mass0 > 0:
        raise ValueError("initial density has no mass")
    peak0 = np.abs(q).max()
    slices = np.empty((grid.nt + 1, grid.nx))
    slices[0] = q
    clips = 0
    drift = 0.0
    for k in range(grid.nt):
        rhs = q + 0.5 * dt * _tri_apply(ops.rhs[k], q)
        q = solve_banded((1, 1), ops.lhs[k], rhs, check_finite=False)
        mass = q.sum() * dx
        drift = max(drift, abs(mass - mass0) / mass0)
        if drift > MASS_DRIFT_LIMIT or not np.isfinite(mass) or np.abs(q).max() > 1e3 * peak0:
            raise NumericalError(
                f"fokker_planck: unstable time march at step {k + 1} (mass drift {drift:.3g}); "
                "refine nx/nt or enlarge the domain"
            )
        neg = q < 0
        if neg.any():
            clips += int((q < CLIP_LEVEL).sum())
            q[neg] = 0.0
            q *= mass0 / (q.sum() * dx)
        slices[k + 1] = q
    return PeriodResult(q, slices, clips, drift)


@dataclass
class PeriodicDensity:
    values: np.ndarray  # (nt+1, nx) density slices over one period
    grid: FpGrid
    iterations: int
    residual: float
    history: list = field(default_factory=list)
    clip_events: int = 0
    mass_drift: float = 0.0
    boundary_mass: float = 0.0

    def mass(self, k):
        return float(self.values[k].sum() * self.grid.dx)

    def trapezoid_mass(self, k):
        return float(np.trapezoid(self.values[k], dx=self.grid.dx))

    def log(self):
        return {"iterations": self.iterations, "residual": self.residual,
                "history": list(self.history), "clip_events": self.clip_events,
                "mass_drift": self.mass_drift, "boundary_mass": self.boundary_mass,
                "grid": self.grid.to_dict()}


def default_initial_density(grid: FpGrid):
    """Broad Gaussian centred in the box with std = width / 8."""
    xc = grid.centers
    mid = 0.5 * (grid.x_lo + grid.x_hi)
    sd = (grid.x_hi - grid.x_lo) / 8
    q = np.exp(-0.5 * ((xc - mid) / sd) ** 2)
    return q / (q.sum() * grid.dx)


def solve_periodic(model, grid: FpGrid, init=None, max_iters=500, tol=1e-8):
    """Fixed point q(0) = q(T) of the period map by power iteration."""
    if model.dim != 1:
        raise ValueError("Fokker-Planck solver is one-dimensional")
    if not np.isclose(grid.period, model.period, rtol=1e-12, atol=0):
        raise ValueError("grid period must equal the model period")
    q = default_initial_density(grid) if init is None else np.asarray(init, float)
    q = q / (q.sum() * grid.dx)
    ops = _period_operators(model, grid)
    history = []
    clips, drift = 0, 0.0
    for it in range(1, max_iters + 1):
        res = evolve_one_period(model, q, grid, ops)
        clips += res.clip_events
        drift = max(drift, res.mass_drift)
        dist = float(np.abs(res.q - q).sum() * grid.dx)
        history.append(dist)
        q = res.q
        if dist < tol:
            edge = float(max(res.slices[:, 0].max(), res.slices[:, -1].max()) * grid.dx)
            if edge > 1e-8:
                log.warning("boundary cell mass %.3g exceeds 1e-8; enlarge the domain", edge)
            return PeriodicDensity(res.slices, grid, it, dist, history, clips, drift, edge)
    raise ConvergenceError(
        f"fokker_planck: no fixed point after {max_iters} periods (last L1 change {dist:.3g})",
        residual=dist,
    )


def lifted_residual(model, pd: PeriodicDensity):
    """max_k L1 norm of (q_{k+1} - q_k)/dt - L*(t_{k+1/2}) (q_k + q_{k+1})/2."""
    g = pd.grid
    worst = 0.0
    for k in range(g.nt):
        qm = 0.5 * (pd.values[k] + pd.values[k + 1])
        r = (pd.values[k + 1] - pd.values[k]) / g.dt - fp_operator_apply(model, (k + 0.5) * g.dt, qm, g)
        worst = max(worst, float(np.abs(r).sum() * g.dx))
    return worst


def density_at(pd: PeriodicDensity, phase):
    """Density at ``phase`` in [0, T), linear in t between stored slices."""
    g = pd.grid
    if not 0 <= phase < g.period:
        raise ValueError(f"phase must lie in [0, {g.period})")
    tau = phase / g.dt
    k = min(int(np.floor(tau)), g.nt - 1)
    w = tau - k
    return (1 - w) * pd.values[k] + w * pd.values[k + 1]


def density_to_measures(pd: PeriodicDensity, phases, grid: HistGrid = None):
    """phase -> EmpiricalMeasure, optionally rebinned onto ``grid``."""
    g = pd.grid
    out = {}
    for p in phases:
        q = np.clip(density_at(pd, p), 0.0, None)
        mass = q * g.dx
        mass = mass / mass.sum()
        if grid is None:
            out[p] = EmpiricalMeasure(HistGrid(g.x_lo, g.x_hi, g.nx), mass, 0.0, 0)
            continue
        if grid.dim != 1:
            raise ValueError("rebinning grid must be one-dimensional")
        edges = g.x_lo + g.dx * np.arange(g.nx + 1)
        cdf = np.concatenate([[0.0], np.cumsum(mass)])
        cdf[-1] = 1.0
        F = np.interp(grid.edges(0), edges, cdf)
        m = np.clip(np.diff(F), 0.0, None)
        out[p] = EmpiricalMeasure(grid, m, max(0.0, 1.0 - m.sum()), 0)
    return out
