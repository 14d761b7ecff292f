"""Histogram measures, total variation, rate fits, periodicity and Doeblin checks.

TV is the sup-over-sets convention, i.e. half the L1 distance between the
bin masses (out-of-box mass counts as one extra cell).
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from . import rng
from .integrators import (_check_explosions, run_ensemble, sample_grid_chain,
                          sample_phase_ensemble, snap_dt)
from .ou_analytic import GaussianMeasure

log = logging.getLogger(__name__)

MIN_BINS, MAX_BINS = 20, 400
BOX_STDS = 8.0


@dataclass(frozen=True)
class HistGrid:
    lower: tuple
    upper: tuple
    bins: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        nb = tuple(int(v) for v in np.atleast_1d(self.bins))
        if len(nb) == 1 and len(lo) > 1:
            nb = nb * len(lo)
        if not len(lo) == len(hi) == len(nb):
            raise ValueError("grid corners and bin counts must have one entry per axis")
        if any(b < 1 for b in nb) or any(not h > l for l, h in zip(lo, hi)):
            raise ValueError("grid needs upper > lower and at least one bin per axis")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "bins", nb)

    @property
    def dim(self):
        return len(self.bins)

    def edges(self, i):
        return np.linspace(self.lower[i], self.upper[i], self.bins[i] + 1)

    def centers(self, i):
        e = self.edges(i)
        return 0.5 * (e[1:] + e[:-1])

    def to_dict(self):
        return {"lower": list(self.lower), "upper": list(self.upper), "bins": list(self.bins)}


@dataclass
class EmpiricalMeasure:
    """Bin masses on a box plus the mass that fell outside it.

    ``n_samples`` is 0 for measures obtained by exact integration.
    """

    grid: HistGrid
    masses: np.ndarray
    out_of_box: float
    n_samples: int

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float)
        if m.shape != self.grid.bins:
            raise ValueError(f"masses shape {m.shape} does not match bins {self.grid.bins}")
        if np.any(m < 0) or self.out_of_box < -1e-15:
            raise ValueError("masses must be nonnegative")
        total = m.sum() + self.out_of_box
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"masses sum to {total!r}, expected 1")
        self.masses = m
        self.out_of_box = max(0.0, float(self.out_of_box))

    def rows(self):
        """(center coordinates..., mass) per bin, C order."""
        mesh = np.meshgrid(*[self.grid.centers(i) for i in range(self.grid.dim)], indexing="ij")
        return np.column_stack([m.ravel() for m in mesh] + [self.masses.ravel()])


def _as_samples(samples, dim=None):
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if dim in (None, 1) else x[None, :]
    if x.shape[0] == 0:
        raise ValueError("empty sample set")
    return x


def empirical_measure(samples, grid: HistGrid):
    x = _as_samples(samples, grid.dim)
    if x.shape[1] != grid.dim:
        raise ValueError(f"samples have dimension {x.shape[1]}, grid has {grid.dim}")
    counts, _ = np.histogramdd(x, bins=[grid.edges(i) for i in range(grid.dim)])
    n = x.shape[0]
    inside = counts.sum()
    return EmpiricalMeasure(grid, counts / n, (n - inside) / n, n)


def fd_bins(width_scale, span, n):
    """Freedman-Diaconis bin count for IQR ``width_scale`` over ``span``, clamped."""
    if n < 2 or width_scale <= 0:
        return MIN_BINS
    h = 2.0 * width_scale * n ** (-1.0 / 3.0)
    return int(np.clip(np.ceil(span / h), MIN_BINS, MAX_BINS))


def grid_for_gaussian(g: GaussianMeasure, n_samples, bins=None):
    """Box mean +- 8 std; Freedman-Diaconis bins for ``n_samples`` draws."""
    sd = g.std
    if np.any(sd <= 0) or not np.all(np.isfinite(sd)):
        raise ValueError("Gaussian needs positive finite variances")
    lo, hi = g.mean - BOX_STDS * sd, g.mean + BOX_STDS * sd
    if bins is None:
        bins = [fd_bins(stats.norm.ppf(0.75) * 2 * s, h - l, n_samples)
                for s, l, h in zip(sd, lo, hi)]
    return HistGrid(lo, hi, bins)


def grid_for_samples(*sample_sets, bins=None):
    """Common grid for several sample sets: pooled mean +- 8 pooled std."""
    x = np.concatenate([_as_samples(s) for s in sample_sets])
    mean, sd = x.mean(axis=0), x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    lo, hi = mean - BOX_STDS * sd, mean + BOX_STDS * sd
    if bins is None:
        n = min(len(_as_samples(s)) for s in sample_sets)
        q75, q25 = np.percentile(x, [75, 25], axis=0)
        iqr = np.where(q75 > q25, q75 - q25, sd)
        bins = [fd_bins(i, h - l, n) for i, l, h in zip(iqr, lo, hi)]
    return HistGrid(lo, hi, bins)


def tv_distance(mu: EmpiricalMeasure, nu: EmpiricalMeasure):
    if mu.grid != nu.grid:
        raise ValueError("tv_distance: measures live on different grids")
    d = np.abs(mu.masses - nu.masses).sum() + abs(mu.out_of_box - nu.out_of_box)
    return float(min(1.0, 0.5 * d))


def _tv_masses(p, q):
    """Row-wise TV between flattened mass vectors (last entry = out of box)."""
    return 0.5 * np.abs(p - q).sum(axis=-1)


def _flat(mu):
    return np.append(mu.masses.ravel(), mu.out_of_box)


def gaussian_cell_masses(g: GaussianMeasure, grid: HistGrid):
    """Exact bin probabilities of a Gaussian on the grid."""
    if not np.all(np.isfinite(g.cov)) or not np.all(np.isfinite(g.mean)):
        raise ValueError("Gaussian has non-finite parameters")
    if g.dim != grid.dim:
        raise ValueError(f"dimension mismatch: measure {g.dim}, grid {grid.dim}")
    if np.any(np.diag(g.cov) <= 0):
        raise ValueError("degenerate Gaussian (zero variance) has no cell masses")
    cov = g.cov
    if np.allclose(cov, np.diag(np.diag(cov)), rtol=0, atol=0):
        out = np.ones(())
        for i in range(grid.dim):
            cdf = special.ndtr((grid.edges(i) - g.mean[i]) / np.sqrt(cov[i, i]))
            out = np.multiply.outer(out, np.diff(cdf))
        masses = np.asarray(out, dtype=float)
    else:
        # inclusion-exclusion on the corner CDFs
        mesh = np.meshgrid(*[grid.edges(i) for i in range(grid.dim)], indexing="ij")
        corners = np.stack([m.ravel() for m in mesh], axis=-1)
        F = stats.multivariate_normal(g.mean, cov, allow_singular=False).cdf(corners)
        F = np.reshape(F, tuple(b + 1 for b in grid.bins))
        masses = F
        for ax in range(grid.dim):
            masses = np.diff(masses, axis=ax)
    masses = np.clip(masses, 0.0, None)
    return EmpiricalMeasure(grid, masses, max(0.0, 1.0 - masses.sum()), 0)


def tv_to_gaussian(mu: EmpiricalMeasure, g: GaussianMeasure):
    return tv_distance(mu, gaussian_cell_masses(g, mu.grid))


def tv_noise_floor(reference: EmpiricalMeasure, n, n_boot=200, seed=0, quantile=None):
    """TV between an n-sample histogram and ``reference`` itself (parametric bootstrap).

    Returns the bootstrap mean, or the given quantile.
    """
    p = _flat(reference)
    p = p / p.sum()
    g = rng.numpy_generator(seed, "noise-floor")
    tv = _tv_masses(g.multinomial(n, p, size=n_boot) / n, p)
    return float(np.quantile(tv, quantile) if quantile is not None else tv.mean())


def two_sample_threshold(mu: EmpiricalMeasure, nu: EmpiricalMeasure, n_boot=500, seed=0,
                         quantile=0.99):
    """Quantile of the TV between two independent histograms drawn from the pooled law."""
    n1, n2 = mu.n_samples, nu.n_samples
    if n1 < 1 or n2 < 1:
        raise ValueError("two-sample threshold needs sampled measures")
    p = (n1 * _flat(mu) + n2 * _flat(nu)) / (n1 + n2)
    p = p / p.sum()
    g = rng.numpy_generator(seed, "two-sample")
    a = g.multinomial(n1, p, size=n_boot) / n1
    b = g.multinomial(n2, p, size=n_boot) / n2
    return float(np.quantile(_tv_masses(a, b), quantile))


@dataclass
class ConvergenceCurve:
    ns: list
    tv_values: np.ndarray
    mc_error: np.ndarray
    noise_floor: float
    fitted_R: float
    fitted_r: float
    fit_residual: float
    fit_mask: np.ndarray
    verdict: str
    grid: HistGrid = None
    meta: dict = field(default_factory=dict)

    def rows(self):
        return [(int(n), float(v), float(e)) for n, v, e in zip(self.ns, self.tv_values, self.mc_error)]

    def summary(self):
        return {
            "fitted_R": self.fitted_R, "fitted_r": self.fitted_r,
            "fit_residual": self.fit_residual, "verdict": self.verdict,
            "noise_floor": self.noise_floor,
            "fit_ns": [int(n) for n, m in zip(self.ns, self.fit_mask) if m],
            "grid": self.grid.to_dict() if self.grid else None, **self.meta,
        }


def fit_geometric(ns, tv, mask, residual_tol=0.25):
    """Least squares of log tv = log R + n log r over ``mask``; returns (R, r, rms, verdict)."""
    ns = np.asarray(ns, float)
    tv = np.asarray(tv, float)
    mask = np.asarray(mask, bool) & (tv > 0)
    if mask.sum() == 0:
        return float("nan"), float("nan"), float("nan"), "inconclusive-converged"
    if mask.sum() < 2:
        return float("nan"), float("nan"), float("nan"), "inconclusive"
    slope, icpt = np.polyfit(ns[mask], np.log(tv[mask]), 1)
    resid = np.log(tv[mask]) - (icpt + slope * ns[mask])
    rms = float(np.sqrt(np.mean(resid ** 2)))
    r = float(np.exp(slope))
    verdict = "geometric" if (r < 1 and rms < residual_tol) else "inconclusive"
    return float(np.exp(icpt)), r, rms, verdict


def convergence_curve(model, s, x0, ns, dt, n_paths, seed, target, bins=None, n_boot=200,
                      workers=1, floor_factor=3.0):
    """TV(P(s, s+nT, x0, .), target) for each n in ``ns`` and a geometric fit.

    ``target`` is a GaussianMeasure (exact cell masses) or an EmpiricalMeasure
    (its grid is reused and the floor accounts for its own sampling noise).
    """
    ns = [int(n) for n in ns]
    if any(b <= a for a, b in zip(ns, ns[1:])) or ns[0] < 1:
        raise ValueError("ns must be strictly increasing positive integers")
    if isinstance(target, GaussianMeasure):
        grid = grid_for_gaussian(target, n_paths, bins=bins)
        ref = gaussian_cell_masses(target, grid)
    elif isinstance(target, EmpiricalMeasure):
        ref = target
        grid = target.grid
    else:
        raise TypeError("target must be a GaussianMeasure or EmpiricalMeasure")
    chain = sample_grid_chain(model, s, x0, ns[-1], dt, n_paths, seed, recorded_ns=ns,
                              workers=workers)
    n_kept = chain.samples.shape[1]
    g = rng.numpy_generator(seed, "curve-bootstrap")
    tv, err = [], []
    for n in ns:
        emp = empirical_measure(chain.at(n), grid)
        tv.append(tv_distance(emp, ref))
        # resample the histogram to get the spread of the TV estimate
        p = _flat(emp)
        boot = _tv_masses(g.multinomial(n_kept, p / p.sum(), size=n_boot) / n_kept, _flat(ref))
        err.append(float(boot.std(ddof=1)))
    tv, err = np.array(tv), np.array(err)
    floor = tv_noise_floor(ref, n_kept, n_boot, seed)
    if ref.n_samples:
        # empirical target: two independent histograms of the same law
        floor = float(np.hypot(floor, tv_noise_floor(ref, ref.n_samples, n_boot, seed + 1)))
    mask = tv > floor_factor * floor
    R, r, rms, verdict = fit_geometric(ns, tv, mask)
    if not mask.any():
        verdict = "inconclusive-converged"
    return ConvergenceCurve(ns, tv, err, floor, R, r, rms, mask, verdict, grid,
                            {"dt_snapped": chain.dt_snapped, "n_paths": n_kept,
                             "n_exploded": chain.n_exploded, "phase": chain.phase})


@dataclass
class PeriodicityReport:
    phases: list
    means: np.ndarray  # (n_phases, d)
    stderr: np.ndarray
    period_tv: list  # TV(rho_s, rho_{s+T}) per phase
    period_threshold: list
    push_tv: list  # TV(P*(s_j, s_{j+1}) rho_s_j, rho_s_{j+1}) per consecutive pair
    push_threshold: list
    phase_z: np.ndarray  # paired z-scores of consecutive phase mean differences
    phase_p_value: float
    meta: dict = field(default_factory=dict)
    measures: dict = field(default_factory=dict)  # phase -> rho_hat_s histogram

    @property
    def periodic(self):
        return all(a <= b for a, b in zip(self.period_tv, self.period_threshold))

    @property
    def push_consistent(self):
        return all(a <= b for a, b in zip(self.push_tv, self.push_threshold))

    def phase_dependent(self, alpha=0.01):
        return self.phase_p_value < alpha

    def to_dict(self):
        return {
            "phases": list(self.phases), "means": self.means.tolist(),
            "stderr": self.stderr.tolist(), "period_tv": self.period_tv,
            "period_threshold": self.period_threshold, "push_tv": self.push_tv,
            "push_threshold": self.push_threshold, "phase_z": self.phase_z.tolist(),
            "phase_p_value": self.phase_p_value, "periodic": self.periodic,
            "push_consistent": self.push_consistent, **self.meta,
        }


def check_periodicity(model, phases, burn_in, n_paths, dt, seed, x0=None, bins=None,
                      quantile=0.99, workers=1, push=True):
    """Compare rho_s with rho_{s+T} per phase and test push-forward consistency.

    The rho_s and rho_{s+T} samples come from the same paths one period apart.
    Their positive correlation only makes the histograms closer, so the
    independent two-sample threshold is conservative.
    """
    if len(phases) < 2:
        raise ValueError("need at least two phases")
    T = model.period
    ens = sample_phase_ensemble(model, phases, burn_in, n_paths, dt, seed, x0=x0,
                                extra_periods=1, workers=workers)
    keys = sorted(k for k in ens.samples if not isinstance(k, tuple))
    means, errs, ptv, pthr = [], [], [], []
    measures = {}
    for j, p in enumerate(keys):
        a, b = ens[p], ens[(p, 1)]
        grid = grid_for_samples(a, b, bins=bins)
        mu, nu = empirical_measure(a, grid), empirical_measure(b, grid)
        measures[p] = mu
        ptv.append(tv_distance(mu, nu))
        pthr.append(two_sample_threshold(mu, nu, seed=seed + j, quantile=quantile))
        means.append(a.mean(axis=0))
        errs.append(a.std(axis=0, ddof=1) / np.sqrt(len(a)))
    # consecutive-phase mean differences, paired on the same paths
    z = []
    for p, q in zip(keys, keys[1:]):
        n = min(len(ens[p]), len(ens[q]))
        d = ens[p][:n] - ens[q][:n]
        se = d.std(axis=0, ddof=1) / np.sqrt(n)
        z.append(np.where(se > 0, d.mean(axis=0) / np.where(se > 0, se, 1.0), 0.0))
    z = np.array(z)
    n_tests = max(1, z.size)
    p_value = float(min(1.0, n_tests * 2 * special.ndtr(-np.max(np.abs(z))))) if z.size else 1.0
    push_tv, push_thr = [], []
    if push:
        dt_s, _ = snap_dt(T, dt)
        targets = [ens[q] for q in keys[1:]] + [ens[(keys[0], 1)]]
        for j, (p, q) in enumerate(zip(keys, keys[1:] + [keys[0] + T])):
            start = ens[p]
            m = max(1, int(round((q - p) / dt_s)))
            times = p + (q - p) * np.arange(m + 1) / m
            out, alive = run_ensemble(model, start, times, [m], len(start), seed,
                                      workers=workers, tag=f"push-{j}")
            _check_explosions(alive, len(start))
            moved = out[0, alive]
            grid = grid_for_samples(moved, targets[j], bins=bins)
            mu, nu = empirical_measure(moved, grid), empirical_measure(targets[j], grid)
            push_tv.append(tv_distance(mu, nu))
            push_thr.append(two_sample_threshold(mu, nu, seed=seed + 1000 + j, quantile=quantile))
    return PeriodicityReport(keys, np.array(means), np.array(errs), ptv, pthr, push_tv, push_thr,
                             z, p_value, {"burn_in": burn_in, "n_paths": n_paths,
                                          "dt_snapped": ens.dt_snapped}, measures)


def silverman_bandwidth(samples):
    x = _as_samples(samples)
    n, d = x.shape
    sd = x.std(axis=0, ddof=1)
    q75, q25 = np.percentile(x, [75, 25], axis=0)
    spread = np.minimum(sd, (q75 - q25) / 1.349) if d == 1 else sd
    spread = np.where(spread > 0, spread, sd)
    return spread * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def kde_cell_masses(samples, grid: HistGrid, bandwidth):
    """Exact bin masses of a product-Gaussian KDE (mass outside the grid dropped)."""
    x = _as_samples(samples, grid.dim)
    h = np.broadcast_to(np.asarray(bandwidth, float), (grid.dim,))
    if np.any(h <= 0):
        raise ValueError("bandwidth must be positive")
    out = None
    letters = "abcdefgh"
    for i in range(grid.dim):
        cdf = special.ndtr((grid.edges(i)[None, :] - x[:, i:i + 1]) / h[i])
        w = np.diff(cdf, axis=1)  # (n, bins_i)
        if out is None:
            out = w
        else:
            sub = "z" + letters[:i]
            out = np.einsum(f"{sub},z{letters[i]}->{sub}{letters[i]}", out, w)
    return out.sum(axis=0) / x.shape[0]


@dataclass
class DoeblinResult:
    eta: float
    phi: EmpiricalMeasure
    cell_masses: np.ndarray  # (n_starts, *bins)
    bandwidths: np.ndarray  # (n_starts, d)
    eta_sweep: dict
    degenerate: bool = False
    meta: dict = field(default_factory=dict)

    def minorization_gap(self):
        """min over starts and bins of p_hat - eta * phi (>= 0 by construction)."""
        if self.phi is None:
            return float("nan")
        return float((self.cell_masses - self.eta * self.phi.masses[None]).min())

    def summary(self):
        return {"eta": self.eta, "eta_sweep": self.eta_sweep, "degenerate": self.degenerate,
                "minorization_gap": self.minorization_gap(),
                "bandwidths": self.bandwidths.tolist(), **self.meta}


def _eta_phi(masses, grid):
    mins = masses.min(axis=0)
    eta = float(mins.sum())
    if eta <= 0:
        return eta, None
    phi = mins / eta
    return eta, EmpiricalMeasure(grid, phi / phi.sum(), 0.0, 0)


def doeblin_estimate(model, s, lower, upper, start_points, dt, n_paths, seed, bins=100,
                     bandwidth="silverman", workers=1):
    """KDE estimate of eta = int_K min_i p(s, s+T, x_i, y) dy and the minorizing phi."""
    lower = np.atleast_1d(np.asarray(lower, float))
    upper = np.atleast_1d(np.asarray(upper, float))
    if lower.size != model.dim or upper.size != model.dim:
        raise ValueError("K must have one bound per coordinate")
    pts = np.atleast_2d(np.asarray(start_points, float))
    if model.dim == 1 and pts.shape[0] == 1 and pts.shape[1] != 1:
        pts = pts.T
    if pts.shape[0] == 0:
        raise ValueError("start grid is empty")
    if np.any(pts < lower - 1e-12) or np.any(pts > upper + 1e-12):
        raise ValueError("all start points must lie in K")
    grid = HistGrid(lower, upper, bins)
    samples = []
    for i, x in enumerate(pts):
        chain = sample_grid_chain(model, s, x, 1, dt, n_paths, seed, recorded_ns=[1],
                                  workers=workers, path_offset=i * n_paths)
        samples.append(chain.at(1))
    if bandwidth == "silverman":
        hs = np.array([silverman_bandwidth(y) for y in samples])
    else:
        hs = np.broadcast_to(np.asarray(bandwidth, float), (len(samples), model.dim)).copy()
    masses = np.array([kde_cell_masses(y, grid, h) for y, h in zip(samples, hs)])
    eta, phi = _eta_phi(masses, grid)
    sweep = {}
    for f in (0.5, 2.0):
        m = np.array([kde_cell_masses(y, grid, f * h) for y, h in zip(samples, hs)])
        sweep[str(f)] = _eta_phi(m, grid)[0]
    if phi is None:
        log.warning("doeblin estimate degenerate: eta_hat = %g", eta)
    return DoeblinResult(eta, phi, masses, hs, sweep, degenerate=phi is None,
                         meta={"n_starts": len(pts), "n_paths": n_paths, "grid": grid.to_dict()})
