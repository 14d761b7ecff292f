"""Euler-Maruyama simulation and grid-chain sampling.

Noise for path ``i`` at step ``k`` comes from a counter-based stream keyed by
the seed, so ensembles are identical for any worker count or chunking.
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng
from .errors import ExplodedPathError
from .sde_core import SdeModel

log = logging.getLogger(__name__)

EXPLOSION_NORM = 1e12
MAX_EXPLODED_FRACTION = 0.01
CHUNK = 16384


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    seed: int
    dt: float
    exploded_index: Optional[int] = None

    @property
    def exploded(self):
        return self.exploded_index is not None


@dataclass
class GridChainSample:
    phase: float
    n_periods: int
    samples: np.ndarray  # (len(recorded_ns), n_kept, d)
    recorded_ns: list
    seed: int
    dt: float
    dt_snapped: float
    n_exploded: int = 0
    kept_paths: Optional[np.ndarray] = None

    def at(self, n):
        return self.samples[self.recorded_ns.index(n)]

    def metadata(self):
        return {
            "phase": self.phase, "n_periods": self.n_periods,
            "recorded_ns": list(self.recorded_ns), "seed": self.seed, "dt": self.dt,
            "dt_snapped": self.dt_snapped, "n_exploded": self.n_exploded,
            "n_paths_kept": int(self.samples.shape[1]),
        }


@dataclass
class PhaseEnsemble:
    samples: dict  # phase -> (n_kept, d)
    record_times: dict  # phase -> absolute recording time
    burn_in_periods: int
    seed: int
    dt: float
    dt_snapped: float
    n_exploded: int = 0

    def __getitem__(self, phase):
        return self.samples[phase]

    def metadata(self):
        return {
            "phases": list(self.samples), "burn_in_periods": self.burn_in_periods,
            "seed": self.seed, "dt": self.dt, "dt_snapped": self.dt_snapped,
            "n_exploded": self.n_exploded,
        }


def em_step(model: SdeModel, t, x, dt, dW):
    """x + b(t,x) dt + sigma(t,x) dW (batched over leading axes)."""
    x = np.asarray(x, dtype=float)
    dW = np.asarray(dW, dtype=float)
    if model.constant_diffusion is not None:
        noise = dW @ model.constant_diffusion.T
    else:
        noise = np.einsum("...ij,...j->...i", model.diffusion(t, x), dW)
    return x + np.asarray(model.drift(t, x)) * dt + noise


def exploded_mask(x):
    """Rows that are non-finite or beyond the explosion radius."""
    with np.errstate(over="ignore", invalid="ignore"):
        norm = np.sqrt(np.sum(np.square(x), axis=-1))
    return ~(norm <= EXPLOSION_NORM)


def snap_dt(period, dt):
    """Snap dt to the nearest exact divisor T/m of the period; returns (T/m, m)."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    m = max(1, int(round(period / dt)))
    return period / m, m


def reduce_phase(p, period):
    """p mod T, with the few-ulp residue of the reduction snapped to a short decimal or to 0."""
    r = float(np.mod(p, period))
    ulp = 4 * np.spacing(max(abs(float(p)), float(period)))
    if period - r <= ulp:
        return 0.0
    q = round(r, 12)
    return q if abs(q - r) <= ulp else r


def simulate_path(model: SdeModel, s, x0, t_end, dt, seed, path_index=0):
    """Single Euler-Maruyama path on [s, t_end]; the last step may be shorter."""
    if t_end < s:
        raise ValueError("t_end must be >= s")
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    if x.shape != (model.dim,):
        raise ValueError(f"x0 must have shape ({model.dim},)")
    n_full = int(np.floor((t_end - s) / dt * (1 + 1e-12)))
    times = [s + k * dt for k in range(n_full + 1)]
    if t_end - times[-1] > 1e-12 * max(1.0, abs(t_end)):
        times.append(t_end)
    times = np.array(times)
    key = rng.stream_key(seed, "paths")
    states = np.empty((len(times), model.dim))
    states[0] = x
    buf = np.empty((1, model.dim))
    for k in range(len(times) - 1):
        h = times[k + 1] - times[k]
        z = rng.standard_normals(key, path_index, 1, k, model.dim, buf)[0]
        with np.errstate(over="ignore", invalid="ignore"):
            x = em_step(model, times[k], x, h, np.sqrt(h) * z)
        states[k + 1] = x
        if exploded_mask(x[None])[0]:
            log.warning("path exploded at index %d (t=%g)", k + 1, times[k + 1])
            return Trajectory(times[: k + 2], states[: k + 2], seed, dt, exploded_index=k + 1)
    return Trajectory(times, states, seed, dt)


def _initial_states(x0, n_paths, dim):
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim <= 1:
        x0 = np.atleast_1d(x0)
        if x0.shape != (dim,):
            raise ValueError(f"x0 must have shape ({dim},) or ({n_paths}, {dim})")
        return np.broadcast_to(x0, (n_paths, dim))
    if x0.shape != (n_paths, dim):
        raise ValueError(f"x0 must have shape ({dim},) or ({n_paths}, {dim})")
    return x0


def _run_chunk(model, key, x0, path_start, times, record_at, out, rows):
    """Integrate rows ``rows`` of the ensemble along ``times``; fill ``out``."""
    x = np.array(x0[rows], dtype=float)
    n, d = x.shape
    alive = np.ones(n, dtype=bool)
    z = np.empty((n, d))
    sig = model.constant_diffusion
    scalar_noise = sig is not None and d == 1
    if 0 in record_at:
        out[record_at[0], rows] = x
    for k in range(len(times) - 1):
        h = times[k + 1] - times[k]
        rng.standard_normals(key, path_start + rows.start, n, k, d, z)
        with np.errstate(over="ignore", invalid="ignore"):
            if scalar_noise:
                # same update as em_step, without the generic matmul
                x += np.asarray(model.drift(times[k], x)) * h
                x += z * (np.sqrt(h) * sig[0, 0])
            else:
                x = em_step(model, times[k], x, h, np.sqrt(h) * z)
            bad = ~(np.abs(x) <= EXPLOSION_NORM).all(axis=1) if d == 1 else exploded_mask(x)
        if bad.any():
            alive &= ~bad
            x[bad] = 0.0
        j = record_at.get(k + 1)
        if j is not None:
            out[j, rows] = x
    return alive


def run_ensemble(model, x0, times, record_steps, n_paths, seed, path_offset=0, workers=1,
                 tag="paths"):
    """Integrate ``n_paths`` paths along the time grid ``times``.

    Returns (records of shape (len(record_steps), n_paths, d), alive mask).
    Paths are processed in fixed chunks; the result does not depend on
    ``workers``.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    x0 = _initial_states(x0, n_paths, model.dim)
    key = rng.stream_key(seed, tag)
    record_at = {int(k): j for j, k in enumerate(record_steps)}
    out = np.empty((len(record_steps), n_paths, model.dim))
    chunks = [slice(a, min(a + CHUNK, n_paths)) for a in range(0, n_paths, CHUNK)]
    args = (model, key, x0, path_offset, np.asarray(times, dtype=float), record_at, out)
    if workers <= 1 or len(chunks) == 1:
        alive = [_run_chunk(*args, c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            alive = list(ex.map(lambda c: _run_chunk(*args, c), chunks))
    return out, np.concatenate(alive)


def _check_explosions(alive, n_paths):
    n_bad = int((~alive).sum())
    if n_bad:
        first = int(np.flatnonzero(~alive)[0])
        log.warning("%d of %d paths exploded (first: path %d)", n_bad, n_paths, first)
        if n_bad > MAX_EXPLODED_FRACTION * n_paths:
            raise ExplodedPathError(
                f"integrators: {n_bad}/{n_paths} paths exploded; reduce dt",
                n_exploded=n_bad, first_index=first,
            )
    return n_bad


def sample_grid_chain(model: SdeModel, s, x0, n_periods, dt, n_paths, seed, record_every=1,
                      recorded_ns=None, workers=1, path_offset=0):
    """Sample Z_n = X_{s + nT} for n in ``recorded_ns`` (default every
    ``record_every`` periods up to ``n_periods``)."""
    if n_periods < 0:
        raise ValueError("n_periods must be >= 0")
    dt_snapped, m = snap_dt(model.period, dt)
    if recorded_ns is None:
        if record_every < 1:
            raise ValueError("record_every must be >= 1")
        recorded_ns = list(range(record_every, n_periods + 1, record_every))
        if not recorded_ns or recorded_ns[-1] != n_periods:
            recorded_ns.append(n_periods)
    recorded_ns = sorted(int(n) for n in recorded_ns)
    if recorded_ns[0] < 0 or recorded_ns[-1] > n_periods:
        raise ValueError("recorded_ns must lie in [0, n_periods]")
    n_steps = n_periods * m
    times = s + dt_snapped * np.arange(n_steps + 1)
    out, alive = run_ensemble(model, x0, times, [n * m for n in recorded_ns], n_paths, seed,
                              path_offset=path_offset, workers=workers)
    n_bad = _check_explosions(alive, n_paths)
    return GridChainSample(
        phase=reduce_phase(s, model.period), n_periods=n_periods, samples=out[:, alive],
        recorded_ns=recorded_ns, seed=seed, dt=dt, dt_snapped=dt_snapped, n_exploded=n_bad,
        kept_paths=np.flatnonzero(alive),
    )


def sample_phase_ensemble(model: SdeModel, phases, burn_in_periods, n_paths, dt, seed,
                          x0=None, extra_periods=0, workers=1, path_offset=0):
    """Samples approximating rho_s for each phase s, from one path ensemble.

    Paths start at time 0 from ``x0`` and are recorded at
    s_j + burn_in * T (and, with ``extra_periods``, at s_j + (burn_in + k) T).
    Phases are reduced modulo T, so s and s + T give identical samples.
    """
    if burn_in_periods < 1:
        raise ValueError("burn_in_periods must be >= 1")
    T = model.period
    x0 = np.zeros(model.dim) if x0 is None else x0
    dt_snapped, m = snap_dt(T, dt)
    reduced = [reduce_phase(p, T) for p in phases]
    srt = np.sort(reduced)
    if np.any(np.diff(srt) <= 1e-9 * T) or (len(srt) > 1 and srt[0] + T - srt[-1] <= 1e-9 * T):
        raise ValueError("phases must be distinct modulo the period")
    keys = [(p, k) for k in range(extra_periods + 1) for p in reduced]
    targets = {key: key[0] + (burn_in_periods + key[1]) * T for key in keys}
    t_end = max(targets.values())
    grid = dt_snapped * np.arange(int(np.ceil(t_end / dt_snapped - 1e-9)) + 1)
    times = np.unique(np.concatenate([grid[grid <= t_end + 1e-12], list(targets.values())]))
    # merge grid points within rounding distance of a recording time
    keep = np.concatenate([[True], np.diff(times) > 1e-9 * max(1.0, T)])
    times = times[keep]
    steps = {key: int(np.argmin(np.abs(times - tt))) for key, tt in targets.items()}
    for key, tt in targets.items():
        times[steps[key]] = tt
    order = list(steps)
    out, alive = run_ensemble(model, x0, times, [steps[k] for k in order], n_paths, seed,
                              path_offset=path_offset, workers=workers)
    n_bad = _check_explosions(alive, n_paths)
    samples = {}
    record_times = {}
    for j, key in enumerate(order):
        name = key[0] if key[1] == 0 else (key[0], key[1])
        samples[name] = out[j, alive]
        record_times[name] = targets[key]
    return PhaseEnsemble(samples, record_times, burn_in_periods, seed, dt, dt_snapped, n_bad)


def save_samples_csv(path, samples):
    """One row per path, one column per coordinate, 17 significant digits."""
    samples = np.atleast_2d(samples)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(samples.shape[1])])
        for row in samples:
            w.writerow([f"{v:.17g}" for v in row])
    return path


def load_samples_csv(path):
    return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2))


def save_samples_binary(path, samples):
    """Column-major .npz: one float64 array per coordinate (x0, x1, ...)."""
    samples = np.atleast_2d(samples)
    path = Path(path)
    np.savez(path, **{f"x{i}": np.ascontiguousarray(samples[:, i]) for i in range(samples.shape[1])})
    return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")


def load_samples_binary(path):
    with np.load(path) as data:
        cols = sorted(data.files, key=lambda k: int(k[1:]))
        return np.column_stack([data[k] for k in cols])


def write_sidecar(path, metadata):
    Path(path).write_text(json.dumps(metadata, indent=2, sort_keys=True))
    return Path(path)
