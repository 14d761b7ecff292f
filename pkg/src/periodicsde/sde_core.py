"""T-periodic SDE models, periodic coefficient functions and the generator.

Models follow the batch convention used throughout the package: ``drift(t, x)``
takes a state array of shape ``(..., d)`` and returns ``(..., d)``;
``diffusion(t, x)`` returns ``(..., d, d)``. Time is always a scalar.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericalError

KINDS = ("generic", "ou", "polynomial", "gradient", "langevin")


@dataclass(frozen=True)
class TrigPoly:
    """Truncated Fourier series with the shifted harmonic convention

        f(t) = a0/2 + sum_n A_n cos(2n pi t/T - n pi) + B_n sin(2n pi t/T - n pi).

    Standard coefficients of cos(2n pi t/T) differ from A_n by (-1)^n; see
    :meth:`from_standard`.
    """

    period: float
    a0: float = 0.0
    cos_coeffs: tuple = ()
    sin_coeffs: tuple = ()

    def __post_init__(self):
        if not (np.isfinite(self.period) and self.period > 0):
            raise ValueError(f"period must be positive, got {self.period}")
        a = [float(v) for v in self.cos_coeffs]
        b = [float(v) for v in self.sin_coeffs]
        n = max(len(a), len(b))
        a += [0.0] * (n - len(a))
        b += [0.0] * (n - len(b))
        object.__setattr__(self, "period", float(self.period))
        object.__setattr__(self, "a0", float(self.a0))
        object.__setattr__(self, "cos_coeffs", tuple(a))
        object.__setattr__(self, "sin_coeffs", tuple(b))

    @classmethod
    def constant(cls, value, period):
        return cls(period, 2.0 * value)

    @classmethod
    def from_standard(cls, period, a0=0.0, cos=(), sin=()):
        """Build from coefficients of cos(2n pi t/T) and sin(2n pi t/T)."""
        sign = lambda n: -1.0 if n % 2 else 1.0
        return cls(
            period,
            a0,
            [sign(n + 1) * c for n, c in enumerate(cos)],
            [sign(n + 1) * c for n, c in enumerate(sin)],
        )

    @classmethod
    def cosine(cls, amplitude, period, harmonic=1):
        """amplitude * cos(2 pi harmonic t / T)."""
        coeffs = [0.0] * harmonic
        coeffs[-1] = amplitude
        return cls.from_standard(period, 0.0, coeffs)

    @classmethod
    def from_function(cls, fn, period, n_harmonics, n_points=None):
        """Fourier coefficients of a T-periodic callable by the uniform-grid rule."""
        m = n_points or max(64, 4 * n_harmonics + 8)
        t = period * np.arange(m) / m
        y = np.asarray(fn(t), dtype=float) * np.ones(m)
        n = np.arange(1, n_harmonics + 1)[:, None]
        arg = 2 * np.pi * n * t / period - n * np.pi
        a = 2.0 / m * (np.cos(arg) @ y)
        b = 2.0 / m * (np.sin(arg) @ y)
        return cls(period, 2.0 / m * y.sum(), a, b)

    @property
    def n_harmonics(self):
        return len(self.cos_coeffs)

    @property
    def is_constant(self):
        return not any(self.cos_coeffs) and not any(self.sin_coeffs)

    def _phase(self, t):
        t = np.asarray(t, dtype=float)
        return 2 * np.pi * np.mod(t, self.period) / self.period - np.pi

    def __call__(self, t):
        phi = self._phase(t)
        out = np.full(phi.shape, 0.5 * self.a0)
        for n, (a, b) in enumerate(zip(self.cos_coeffs, self.sin_coeffs), start=1):
            if a:
                out = out + a * np.cos(n * phi)
            if b:
                out = out + b * np.sin(n * phi)
        return out if out.ndim else float(out)

    def derivative(self, order=1):
        w = 2 * np.pi / self.period
        a, b = np.array(self.cos_coeffs), np.array(self.sin_coeffs)
        for _ in range(order):
            n = np.arange(1, len(a) + 1) * w
            a, b = n * b, -n * a
        return TrigPoly(self.period, 0.0, a, b)

    def sup_bound(self):
        """Upper bound on sup_t |f(t)|."""
        return 0.5 * abs(self.a0) + float(np.hypot(self.cos_coeffs, self.sin_coeffs).sum())

    def _coerce(self, other):
        if isinstance(other, TrigPoly):
            if not np.isclose(other.period, self.period, rtol=1e-12, atol=0):
                raise ValueError("cannot combine TrigPolys of different periods")
            return other
        return TrigPoly.constant(float(other), self.period)

    def __add__(self, other):
        o = self._coerce(other)
        n = max(self.n_harmonics, o.n_harmonics)
        pad = lambda v: np.pad(np.array(v, dtype=float), (0, n - len(v)))
        return TrigPoly(
            self.period,
            self.a0 + o.a0,
            pad(self.cos_coeffs) + pad(o.cos_coeffs),
            pad(self.sin_coeffs) + pad(o.sin_coeffs),
        )

    __radd__ = __add__

    def __mul__(self, scalar):
        if isinstance(scalar, TrigPoly):
            raise TypeError("TrigPoly products are not supported")
        c = float(scalar)
        return TrigPoly(
            self.period, c * self.a0,
            [c * v for v in self.cos_coeffs], [c * v for v in self.sin_coeffs],
        )

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def to_dict(self):
        return {
            "period": self.period, "a0": self.a0,
            "cos": list(self.cos_coeffs), "sin": list(self.sin_coeffs),
        }


def eval_trig_poly(f: TrigPoly, t):
    return f(t)


def coef_value(c, t):
    """Evaluate a coefficient that is either a TrigPoly or a plain number."""
    if isinstance(c, TrigPoly):
        return c(t)
    return float(c)


def coef_derivative(c, t):
    if isinstance(c, TrigPoly):
        return c.derivative()(t)
    return 0.0


def coef_sup(c):
    return c.sup_bound() if isinstance(c, TrigPoly) else abs(float(c))


def _horner(coeffs, x):
    out = np.zeros_like(x)
    for c in reversed(coeffs):
        out = out * x + c
    return out


@dataclass(frozen=True)
class PolyDriftSpec:
    """Coordinatewise odd-degree polynomial drift.

    ``coeffs[i][k]`` multiplies ``x_i**k``; coordinate ``i`` has ``2 p_i``
    entries and a constant leading entry.
    """

    period: float
    coeffs: tuple

    def __post_init__(self):
        rows = []
        for i, row in enumerate(self.coeffs):
            row = list(row)
            if len(row) < 2 or len(row) % 2:
                raise ValueError(
                    f"coordinate {i}: need 2p coefficients (p >= 1), got {len(row)}"
                )
            lead = row[-1]
            if isinstance(lead, TrigPoly):
                if not lead.is_constant:
                    raise ValueError(f"coordinate {i}: leading coefficient must be constant")
                lead = 0.5 * lead.a0
            row[-1] = float(lead)
            for c in row[:-1]:
                if isinstance(c, TrigPoly) and not np.isclose(c.period, self.period):
                    raise ValueError(f"coordinate {i}: coefficient period mismatch")
            rows.append(tuple(row))
        if not rows:
            raise ValueError("empty drift specification")
        object.__setattr__(self, "coeffs", tuple(rows))

    @property
    def dim(self):
        return len(self.coeffs)

    @property
    def degrees(self):
        return [len(r) // 2 for r in self.coeffs]

    @property
    def leading(self):
        return [r[-1] for r in self.coeffs]

    def drift(self, t, x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        for i, row in enumerate(self.coeffs):
            out[..., i] = _horner([coef_value(c, t) for c in row], x[..., i])
        return out


class PotentialSpec:
    """Scalar field V(t, x) with optional analytic derivatives.

    Missing derivatives fall back to central differences with step
    ``max(1e-5, 1e-5 |x_i|)``; a Hessian built from values alone uses the
    larger step ``max(1e-4, 1e-4 |x_i|)`` to keep rounding error in check.
    """

    def __init__(self, value, gradient=None, time_derivative=None, hessian=None,
                 period=None):
        self._value = value
        self._gradient = gradient
        self._time_derivative = time_derivative
        self._hessian = hessian
        self.period = period

    @property
    def has_gradient(self):
        return self._gradient is not None

    def value(self, t, x):
        return np.asarray(self._value(t, np.asarray(x, dtype=float)), dtype=float)

    def gradient(self, t, x):
        x = np.asarray(x, dtype=float)
        if self._gradient is not None:
            return np.asarray(self._gradient(t, x), dtype=float)
        out = np.empty_like(x)
        for i in range(x.shape[-1]):
            h = np.maximum(1e-5, 1e-5 * np.abs(x[..., i]))
            e = np.zeros_like(x)
            e[..., i] = h
            out[..., i] = (self.value(t, x + e) - self.value(t, x - e)) / (2 * h)
        return out

    def time_derivative(self, t, x):
        x = np.asarray(x, dtype=float)
        if self._time_derivative is not None:
            return np.asarray(self._time_derivative(t, x), dtype=float)
        h = max(1e-5, 1e-5 * abs(t))
        return (self.value(t + h, x) - self.value(t - h, x)) / (2 * h)

    def hessian(self, t, x):
        x = np.asarray(x, dtype=float)
        if self._hessian is not None:
            return np.asarray(self._hessian(t, x), dtype=float)
        d = x.shape[-1]
        out = np.empty(x.shape + (d,))
        if self._gradient is not None:
            for i in range(d):
                h = np.maximum(1e-5, 1e-5 * np.abs(x[..., i]))
                e = np.zeros_like(x)
                e[..., i] = h
                out[..., i, :] = (self.gradient(t, x + e) - self.gradient(t, x - e)) / (
                    2 * h[..., None]
                )
            return 0.5 * (out + np.swapaxes(out, -1, -2))
        steps = [np.maximum(1e-4, 1e-4 * np.abs(x[..., i])) for i in range(d)]
        f0 = self.value(t, x)
        for i in range(d):
            ei = np.zeros_like(x)
            ei[..., i] = steps[i]
            out[..., i, i] = (self.value(t, x + ei) - 2 * f0 + self.value(t, x - ei)) / steps[i] ** 2
            for j in range(i + 1, d):
                ej = np.zeros_like(x)
                ej[..., j] = steps[j]
                v = (
                    self.value(t, x + ei + ej) - self.value(t, x + ei - ej)
                    - self.value(t, x - ei + ej) + self.value(t, x - ei - ej)
                ) / (4 * steps[i] * steps[j])
                out[..., i, j] = out[..., j, i] = v
        return out


class PolyPotential(PotentialSpec):
    """Separable polynomial field V(t, x) = sum_i sum_k c_ik(t) x_i^k.

    Coefficients are TrigPolys or numbers. All derivatives are exact, which is
    what lets the drift verifier bound the tail analytically.
    """

    def __init__(self, coeffs, period):
        self.coeffs = tuple(tuple(row) for row in coeffs)
        super().__init__(self._eval_value, self._eval_gradient,
                         self._eval_time_derivative, self._eval_hessian, period)

    @classmethod
    def squared_norm(cls, dim, period, scale=1.0):
        return cls([[0.0, 0.0, scale]] * dim, period)

    @property
    def dim(self):
        return len(self.coeffs)

    def row_values(self, i, t):
        return [coef_value(c, t) for c in self.coeffs[i]]

    def row_time_derivatives(self, i, t):
        return [coef_derivative(c, t) for c in self.coeffs[i]]

    def _eval_value(self, t, x):
        return sum(_horner(self.row_values(i, t), x[..., i]) for i in range(self.dim))

    def _eval_time_derivative(self, t, x):
        return sum(_horner(self.row_time_derivatives(i, t), x[..., i]) for i in range(self.dim))

    def _eval_gradient(self, t, x):
        out = np.empty_like(x)
        for i in range(self.dim):
            c = np.polynomial.polynomial.polyder(self.row_values(i, t))
            out[..., i] = _horner(list(c), x[..., i])
        return out

    def _eval_hessian(self, t, x):
        out = np.zeros(x.shape + (self.dim,))
        for i in range(self.dim):
            c = np.polynomial.polynomial.polyder(self.row_values(i, t), 2)
            out[..., i, i] = _horner(list(c), x[..., i])
        return out


@dataclass(frozen=True)
class SdeModel:
    """dX = b(t, X) dt + sigma(t, X) dW with T-periodic coefficients."""

    dim: int
    period: float
    drift: Callable
    diffusion: Callable
    kind: str = "generic"
    constant_diffusion: Optional[np.ndarray] = None
    poly_coeffs: Optional[tuple] = None
    potential: Optional[PotentialSpec] = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")
        if not (np.isfinite(self.period) and self.period > 0):
            raise ValueError(f"period must be positive, got {self.period}")
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.constant_diffusion is not None:
            s = np.array(self.constant_diffusion, dtype=float)
            if s.shape != (self.dim, self.dim):
                raise ValueError(f"diffusion must be {self.dim}x{self.dim}, got {s.shape}")
            s.setflags(write=False)
            object.__setattr__(self, "constant_diffusion", s)
        sig = np.asarray(self.diffusion(0.0, np.zeros(self.dim)))
        if sig.shape != (self.dim, self.dim):
            raise ValueError(f"diffusion output must be {self.dim}x{self.dim}, got {sig.shape}")

    def diffusion_matrix(self, t, x):
        """sigma sigma^T at (t, x), batched like ``diffusion``."""
        s = np.asarray(self.diffusion(t, x))
        return s @ np.swapaxes(s, -1, -2)


def generic_model(dim, period, drift, diffusion, vectorized=True, **kw):
    """Wrap user callables; non-vectorized ones are looped over the batch axis."""
    if not vectorized:
        drift = _batched(drift, (dim,))
        diffusion = _batched(diffusion, (dim, dim))
    return SdeModel(dim, period, drift, diffusion, **kw)


def _batched(fn, out_shape):
    def wrapped(t, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return np.asarray(fn(t, x), dtype=float).reshape(out_shape)
        flat = x.reshape(-1, x.shape[-1])
        out = np.array([np.asarray(fn(t, xi), dtype=float).reshape(out_shape) for xi in flat])
        return out.reshape(x.shape[:-1] + out_shape)

    return wrapped


def constant_diffusion_fn(sigma, dim):
    """Normalize a scalar / vector / matrix noise amplitude into (callable, matrix)."""
    s = np.asarray(sigma, dtype=float)
    if s.ndim == 0:
        s = s * np.eye(dim)
    elif s.ndim == 1:
        s = np.diag(s)
    if s.shape != (dim, dim):
        raise ValueError(f"diffusion must be {dim}x{dim}, got shape {s.shape}")
    s = s.copy()
    s.setflags(write=False)

    def diffusion(t, x):
        x = np.asarray(x)
        return np.broadcast_to(s, x.shape[:-1] + (dim, dim))

    return diffusion, s


def _diffusion_arg(diffusion, dim):
    if callable(diffusion):
        return diffusion, None
    return constant_diffusion_fn(diffusion, dim)


def build_duffing(A, omega, sigma):
    """Overdamped Duffing oscillator dX = (-X^3 + X + A cos(omega t)) dt + sigma dW.

    Forcing enters with a plus sign. The autonomous case omega == 0 gets
    period 1.
    """
    if sigma == 0:
        raise ValueError("Duffing noise amplitude sigma must be nonzero")
    period = 2 * np.pi / abs(omega) if omega != 0 else 1.0
    if omega == 0:
        forcing = TrigPoly.constant(A, period)
    else:
        forcing = TrigPoly.cosine(A, period)
    spec = PolyDriftSpec(period, ((forcing, 1.0, 0.0, -1.0),))
    model = build_poly_drift_model(spec, sigma)
    return SdeModel(
        1, period, model.drift, model.diffusion, kind="polynomial",
        constant_diffusion=model.constant_diffusion, poly_coeffs=spec.coeffs,
        params={"kind": "duffing", "A": A, "omega": omega, "sigma": sigma},
    )


def build_poly_drift_model(spec: PolyDriftSpec, diffusion):
    """Model with drift_i = sum_k S_k^i(t) x_i^k; diffusion is a callable or constant."""
    diff, const = _diffusion_arg(diffusion, spec.dim)
    sig = np.asarray(diff(0.0, np.zeros(spec.dim)))
    if sig.shape != (spec.dim, spec.dim):
        raise ValueError(
            f"diffusion output {sig.shape} does not match drift dimension {spec.dim}"
        )
    return SdeModel(
        spec.dim, spec.period, spec.drift, diff, kind="polynomial",
        constant_diffusion=const, poly_coeffs=spec.coeffs,
    )


def build_gradient_model(pot: PotentialSpec, diffusion, period=None, dim=None):
    """dX = -grad V(t, X) dt + sigma dW."""
    period = period or pot.period
    if period is None:
        raise ValueError("period required (neither argument nor potential provides one)")
    if dim is None:
        if not isinstance(pot, PolyPotential):
            raise ValueError("dim required for a non-polynomial potential")
        dim = pot.dim
    diff, const = _diffusion_arg(diffusion, dim)

    def drift(t, x):
        return -pot.gradient(t, x)

    poly = None
    if isinstance(pot, PolyPotential):
        poly = tuple(
            tuple(-k * c for k, c in enumerate(row) if k >= 1) or (0.0,)
            for row in pot.coeffs
        )
    return SdeModel(dim, period, drift, diff, kind="gradient",
                    constant_diffusion=const, poly_coeffs=poly, potential=pot)


def build_langevin_model(force, gamma, sigma, period, dim=None):
    """Phase-space Langevin model in coordinates (q, p):

        dq = p dt,  dp = (-gamma p + F(t, q)) dt + sigma dW.

    Noise acts on momenta only, so sigma sigma^T has rank d in dimension 2d.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    s = np.atleast_2d(np.asarray(sigma, dtype=float))
    if dim is None:
        dim = s.shape[0]
    if s.shape == (1, 1) and dim > 1:
        s = s[0, 0] * np.eye(dim)
    if s.shape != (dim, dim):
        raise ValueError(f"sigma must be {dim}x{dim}")
    if not np.isfinite(np.linalg.cond(s)) or np.linalg.cond(s) > 1e12:
        raise ValueError("Langevin sigma must be invertible")
    full = np.zeros((2 * dim, 2 * dim))
    full[dim:, dim:] = s
    diff, const = constant_diffusion_fn(full, 2 * dim)

    def drift(t, z):
        z = np.asarray(z, dtype=float)
        q, p = z[..., :dim], z[..., dim:]
        return np.concatenate([p, -gamma * p + np.asarray(force(t, q), dtype=float)], axis=-1)

    return SdeModel(2 * dim, period, drift, diff, kind="langevin", constant_diffusion=const,
                    params={"gamma": gamma})


def apply_generator(model: SdeModel, f: PotentialSpec, t, x):
    """(L(t) f)(x) = d_t f + b . grad f + 1/2 sum_ij (sigma sigma^T)_ij d_ij f."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None] if single else x
    ft = f.time_derivative(t, X)
    g = f.gradient(t, X)
    H = f.hessian(t, X)
    for name, arr in (("time derivative", ft), ("gradient", g), ("Hessian", H)):
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"generator: non-finite {name} of test function")
    b = np.asarray(model.drift(t, X))
    a = model.diffusion_matrix(t, X)
    out = ft + np.einsum("...i,...i->...", b, g) + 0.5 * np.einsum("...ij,...ij->...", a, H)
    return float(out[0]) if single else out


def periodicity_defect(model: SdeModel, n_samples=100, scale=3.0, seed=0):
    """Largest |drift(t+T,x) - drift(t,x)| and diffusion analogue on random (t, x)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_samples):
        t = rng.uniform(0, 10 * model.period)
        x = rng.normal(scale=scale, size=model.dim)
        worst = max(
            worst,
            float(np.max(np.abs(model.drift(t + model.period, x) - model.drift(t, x)))),
            float(np.max(np.abs(model.diffusion(t + model.period, x) - model.diffusion(t, x)))),
        )
    return worst
