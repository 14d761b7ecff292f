"""Closed forms for the periodically forced Ornstein-Uhlenbeck process

    dX = (S(t) - A X) dt + sigma dW,   A = M^{-1} D M,  D = diag(lambda_i) > 0.

Matrix exponentials use the supplied eigendecomposition, so every quantity
here is exact up to floating point.
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from .sde_core import SdeModel, TrigPoly, constant_diffusion_fn


@dataclass(frozen=True)
class GaussianMeasure:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean size {mean.size}")
        scale = max(1.0, float(np.max(np.abs(cov))))
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * scale):
            raise ValueError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov).min() < -1e-12 * scale:
            raise ValueError("covariance must be positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.size

    @property
    def std(self):
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))

    def pdf(self, x):
        """Density for 1D measures (vectorized over x)."""
        if self.dim != 1:
            raise ValueError("pdf is implemented for 1D measures")
        v = self.cov[0, 0]
        if v <= 0:
            raise ValueError("zero variance has no density")
        return np.exp(-0.5 * (np.asarray(x) - self.mean[0]) ** 2 / v) / np.sqrt(2 * np.pi * v)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "cov": self.cov.ravel().tolist(), "dim": self.dim}

    @classmethod
    def from_dict(cls, data):
        d = int(data.get("dim", len(data["mean"])))
        return cls(np.array(data["mean"]), np.array(data["cov"]).reshape(d, d))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class OuModel:
    eigvecs: np.ndarray  # M, with A = M^{-1} D M
    eigvals: np.ndarray  # diagonal of D
    sigma: np.ndarray
    forcing: tuple  # one TrigPoly (or T-periodic callable) per coordinate
    period: float = None

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.eigvals, dtype=float))
        d = lam.size
        M = np.atleast_2d(np.asarray(self.eigvecs, dtype=float))
        if M.shape != (d, d):
            raise ValueError(f"eigvecs must be {d}x{d}")
        if np.any(lam <= 0):
            raise ValueError("all eigenvalues must be strictly positive")
        if np.linalg.cond(M) > 1e12:
            raise ValueError("eigenvector matrix is numerically singular")
        _, sig = constant_diffusion_fn(self.sigma, d)
        if np.linalg.cond(sig) > 1e12:
            raise ValueError("sigma must be invertible")
        forcing = tuple(self.forcing)
        if len(forcing) != d:
            raise ValueError(f"need {d} forcing components, got {len(forcing)}")
        period = self.period
        trig = [f for f in forcing if isinstance(f, TrigPoly)]
        if period is None:
            if not trig:
                raise ValueError("period required when forcing is not a TrigPoly")
            period = trig[0].period
        for f in trig:
            if not np.isclose(f.period, period, rtol=1e-12, atol=0):
                raise ValueError("forcing components must share one period")
        object.__setattr__(self, "eigvals", lam)
        object.__setattr__(self, "eigvecs", M)
        object.__setattr__(self, "sigma", sig)
        object.__setattr__(self, "forcing", forcing)
        object.__setattr__(self, "period", float(period))

    @classmethod
    def scalar(cls, alpha, sigma, forcing, period=None):
        if not isinstance(forcing, (TrigPoly,)) and not callable(forcing):
            raise TypeError("forcing must be a TrigPoly or callable")
        if period is None and isinstance(forcing, TrigPoly):
            period = forcing.period
        return cls(np.eye(1), np.array([alpha]), np.array([[sigma]]), (forcing,), period)

    @property
    def dim(self):
        return self.eigvals.size

    @property
    def M_inv(self):
        return np.linalg.inv(self.eigvecs)

    @property
    def drift_matrix(self):
        return self.M_inv @ np.diag(self.eigvals) @ self.eigvecs

    @property
    def is_trig(self):
        return all(isinstance(f, TrigPoly) for f in self.forcing)

    def expm(self, tau):
        """e^{-tau A}."""
        return self.M_inv @ np.diag(np.exp(-tau * self.eigvals)) @ self.eigvecs

    def forcing_value(self, t):
        return np.array([float(f(t)) for f in self.forcing])

    def to_sde_model(self):
        A = self.drift_matrix
        diff, const = constant_diffusion_fn(self.sigma, self.dim)

        if self.dim == 1:
            a, f = float(A[0, 0]), self.forcing[0]

            def drift(t, x):
                return float(f(t)) - a * np.asarray(x, dtype=float)
        else:
            def drift(t, x):
                return self.forcing_value(t) - np.asarray(x, dtype=float) @ A.T

        poly = None
        if self.dim == 1 or np.allclose(A, np.diag(np.diag(A)), atol=1e-14):
            poly = tuple((self.forcing[i], -A[i, i]) for i in range(self.dim))
        return SdeModel(self.dim, self.period, drift, diff, kind="ou",
                        constant_diffusion=const, poly_coeffs=poly)


def _eigen_forcing(model):
    """Forcing rotated into the eigenbasis: (M S)_i as TrigPolys."""
    M = model.eigvecs
    out = []
    for i in range(model.dim):
        acc = TrigPoly(model.period)
        for j, f in enumerate(model.forcing):
            if M[i, j] != 0.0:
                acc = acc + M[i, j] * f
        out.append(acc)
    return out


def _xi_scalar(lam, f: TrigPoly, t):
    """Periodic solution of y' = -lam y + f(t) for one eigenvalue."""
    T = f.period
    phi = 2 * np.pi * np.mod(t, T) / T - np.pi
    out = 0.5 * f.a0 / lam
    for n, (a, b) in enumerate(zip(f.cos_coeffs, f.sin_coeffs), start=1):
        w = 2 * np.pi * n / T
        den = lam * lam + w * w
        c, s = np.cos(n * phi), np.sin(n * phi)
        out = out + a * (lam * c + w * s) / den + b * (lam * s - w * c) / den
    return out


def xi(model: OuModel, t):
    """Long-term periodic mean xi(t) = int_{-inf}^t e^{-A(t-r)} S(r) dr."""
    if model.is_trig:
        eta = np.array([
            _xi_scalar(lam, g, t) for lam, g in zip(model.eigvals, _eigen_forcing(model))
        ])
        return model.M_inv @ eta
    # truncate the improper integral once e^{-K T min lambda} < 1e-12
    K = int(np.ceil(np.log(1e12) / (model.period * model.eigvals.min())))
    lo = t - K * model.period
    res, _ = integrate.quad_vec(
        lambda r: model.expm(t - r) @ model.forcing_value(r), lo, t,
        epsabs=1e-13, epsrel=1e-11, points=[t - k * model.period for k in range(1, K)],
    )
    return res


def xi_derivative(model: OuModel, t):
    """d/dt xi(t) from the harmonic representation (TrigPoly forcing only)."""
    if not model.is_trig:
        raise ValueError("xi_derivative needs TrigPoly forcing")
    eta = []
    for lam, g in zip(model.eigvals, _eigen_forcing(model)):
        eta.append(float(g(t)) - lam * _xi_scalar(lam, g, t))
    return model.M_inv @ np.array(eta)


def j_integral(model: OuModel, s, t):
    """J(s,t) = int_s^t e^{-(t-r)A} S(r) dr = xi(t) - e^{-(t-s)A} xi(s)."""
    if t < s:
        raise ValueError("j_integral requires s <= t")
    return xi(model, t) - model.expm(t - s) @ xi(model, s)


def _eigen_cov(model, tau=None):
    lam = model.eigvals
    N = model.eigvecs @ model.sigma
    Q = N @ N.T
    ssum = lam[:, None] + lam[None, :]
    C = Q / ssum
    if tau is not None:
        C = C * -np.expm1(-tau * ssum)
    return C


def _to_state_cov(model, C):
    # Cov(M^{-1} Y) = M^{-1} C M^{-T}; equals M^{-1} C M for orthogonal M
    Mi = model.M_inv
    return Mi @ C @ Mi.T


def transition_kernel(model: OuModel, s, t, x):
    """P(s, t, x, .) = N(e^{-(t-s)A} x + J(s,t), M^{-1} C(s,t) M^{-T})."""
    if t < s:
        raise ValueError("transition_kernel requires s <= t")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    tau = t - s
    mean = model.expm(tau) @ x + j_integral(model, s, t)
    return GaussianMeasure(mean, _to_state_cov(model, _eigen_cov(model, tau)))


def periodic_measure(model: OuModel, s):
    """rho_s = N(xi(s), M^{-1} C M^{-T})."""
    return GaussianMeasure(xi(model, s), _to_state_cov(model, _eigen_cov(model)))


def push_forward(model: OuModel, mu: GaussianMeasure, s, t):
    """P^*(s,t) mu for a Gaussian initial law (exact: the kernel is affine-Gaussian)."""
    E = model.expm(t - s)
    K = transition_kernel(model, s, t, np.zeros(model.dim))
    return GaussianMeasure(E @ mu.mean + K.mean, E @ mu.cov @ E.T + K.cov)


def kl_gaussian(P: GaussianMeasure, Q: GaussianMeasure):
    """D_KL(P || Q) for multivariate normals."""
    if P.dim != Q.dim:
        raise ValueError("dimension mismatch")
    try:
        L = np.linalg.cholesky(Q.cov)
    except np.linalg.LinAlgError:
        raise ValueError("Q covariance must be positive definite") from None
    if np.linalg.cond(Q.cov) > 1e14:
        raise ValueError("Q covariance is numerically singular")
    Qi = np.linalg.inv(Q.cov)
    diff = Q.mean - P.mean
    sign1, logdet1 = np.linalg.slogdet(P.cov)
    if sign1 <= 0:
        return np.inf
    logdet2 = 2 * np.log(np.diag(L)).sum()
    val = 0.5 * (np.trace(Qi @ P.cov) + diff @ Qi @ diff - P.dim + logdet2 - logdet1)
    return max(float(val), 0.0)


def pinsker_tv_bound(P, Q):
    """sqrt(KL/2) >= TV."""
    return float(np.sqrt(kl_gaussian(P, Q) / 2))


def _crossings_1d(m1, v1, m2, v2):
    """Points where two normal densities are equal."""
    if np.isclose(v1, v2, rtol=1e-14, atol=0):
        return [] if m1 == m2 else [0.5 * (m1 + m2)]
    # log p1 = log p2  <=>  a x^2 + b x + c = 0
    a = 0.5 / v2 - 0.5 / v1
    b = m1 / v1 - m2 / v2
    c = 0.5 * m2**2 / v2 - 0.5 * m1**2 / v1 + 0.5 * np.log(v2 / v1)
    disc = b * b - 4 * a * c
    if disc < 0:
        return []
    r = np.sqrt(disc)
    q = -0.5 * (b + np.copysign(r, b))
    roots = [q / a] if q != 0 else []
    if q != 0:
        roots.append(c / q)
    elif a != 0:
        roots = [-b / (2 * a)]
    return sorted(roots)


def tv_gaussian_1d(P: GaussianMeasure, Q: GaussianMeasure):
    """TV = 1/2 int |p - q| by adaptive quadrature over mean +- 10 std."""
    if P.dim != 1 or Q.dim != 1:
        raise ValueError("tv_gaussian_1d needs 1D measures")
    m1, v1, m2, v2 = P.mean[0], P.cov[0, 0], Q.mean[0], Q.cov[0, 0]
    if v1 <= 0 or v2 <= 0:
        raise ValueError("zero variance: total variation oracle undefined")
    s1, s2 = np.sqrt(v1), np.sqrt(v2)
    lo = min(m1 - 10 * s1, m2 - 10 * s2)
    hi = max(m1 + 10 * s1, m2 + 10 * s2)
    # the integrand changes sign only at crossings; split there and at the modes
    cuts = [lo, hi, m1, m2] + [x for x in _crossings_1d(m1, v1, m2, v2) if lo < x < hi]
    cuts = np.unique(np.clip(cuts, lo, hi))
    integrand = lambda x: abs(P.pdf(x) - Q.pdf(x))
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        val, _ = integrate.quad(integrand, a, b, epsabs=1e-14, epsrel=1e-11, limit=200)
        total += val
    return float(min(max(0.5 * total, 0.0), 1.0))


def tv_gaussian_1d_closed(P: GaussianMeasure, Q: GaussianMeasure):
    """Same quantity from the crossing points and normal CDFs (cross-check only)."""
    m1, v1, m2, v2 = P.mean[0], P.cov[0, 0], Q.mean[0], Q.cov[0, 0]
    s1, s2 = np.sqrt(v1), np.sqrt(v2)
    pts = [-np.inf] + _crossings_1d(m1, v1, m2, v2) + [np.inf]
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        mass1 = special.ndtr((b - m1) / s1) - special.ndtr((a - m1) / s1)
        mass2 = special.ndtr((b - m2) / s2) - special.ndtr((a - m2) / s2)
        total += abs(mass1 - mass2)
    return float(0.5 * total)


def geometric_tv_bound(model: OuModel, s, x, n, delta=None, gamma=1.0):
    """Explicit bound on ||P(s, s+nT, x, .) - rho_s||_TV for the 1D model.

    e^{-nTa} sqrt(a/2) (R_s / sigma) (x^2 + 1) with
    R_s = max(1 + gamma, r_s + sigma^2 / (4a (1 - e^{-2 a delta}))),
    r_s = xi(s)^2 (1 + gamma) / gamma.
    """
    if model.dim != 1:
        raise ValueError("geometric_tv_bound is only available in one dimension")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if n < 1:
        raise ValueError("n must be >= 1")
    T = model.period
    delta = T if delta is None else delta
    if not 0 < delta <= T:
        raise ValueError("delta must lie in (0, T]")
    a = float(model.eigvals[0])
    sig = abs(float(model.sigma[0, 0]))
    xs = float(xi(model, s)[0])
    r_s = xs * xs * (1 + gamma) / gamma
    R_s = max(1 + gamma, r_s + sig**2 / (4 * a) / -np.expm1(-2 * a * delta))
    return float(np.exp(-n * T * a) * np.sqrt(a / 2) * R_s / sig * (x * x + 1))


def doeblin_eta_exact(model: OuModel, s, start_points, lower, upper):
    """int_K min_i p(s, s+T, x_i, y) dy for a 1D model and K = [lower, upper]."""
    if model.dim != 1:
        raise ValueError("exact Doeblin constant implemented for 1D only")
    kernels = [transition_kernel(model, s, s + model.period, [x]) for x in start_points]
    f = lambda y: min(k.pdf(y) for k in kernels)
    cuts = sorted({lower, upper, *[k.mean[0] for k in kernels if lower < k.mean[0] < upper]})
    for i, ki in enumerate(kernels):
        for kj in kernels[i + 1:]:
            cuts += [c for c in _crossings_1d(ki.mean[0], ki.cov[0, 0], kj.mean[0], kj.cov[0, 0])
                     if lower < c < upper]
    cuts = sorted(set(cuts))
    total = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        total += integrate.quad(f, a, b, epsabs=1e-13, epsrel=1e-11, limit=200)[0]
    return total
