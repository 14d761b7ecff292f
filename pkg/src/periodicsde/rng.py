"""Counter-based Gaussian streams.

Every normal draw is a pure function of ``(seed, path, step, slot)`` through
Philox4x32-10, so an ensemble can be split across any number of workers and
still produce bit-identical paths.
"""

import hashlib

import numba
import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_INV_2_53 = 1.0 / 9007199254740992.0


@numba.njit(cache=True, nogil=True)
def _philox4x32(c0, c1, c2, c3, k0, k1):
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> np.uint64(32)
        lo0 = p0 & _MASK
        hi1 = p1 >> np.uint64(32)
        lo1 = p1 & _MASK
        c0, c1, c2, c3 = (hi1 ^ c1 ^ k0) & _MASK, lo1, (hi0 ^ c3 ^ k1) & _MASK, lo0
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


def philox4x32(counter, key):
    """Raw Philox4x32-10 block for a 4-word counter and 2-word key."""
    c = [np.uint64(int(v) & 0xFFFFFFFF) for v in counter]
    k = [np.uint64(int(v) & 0xFFFFFFFF) for v in key]
    return tuple(int(v) for v in _philox4x32(c[0], c[1], c[2], c[3], k[0], k[1]))


# Wichura's AS241 (PPND16) rational approximations to the normal quantile
_A = np.array([3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
               1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
               3.3430575583588128105e4, 2.5090809287301226727e3])
_B = np.array([1.0, 4.2313330701600911252e1, 6.8718700749205790830e2, 5.3941960214247511077e3,
               2.1213794301586595867e4, 3.9307895800092710610e4, 2.8729085735721942674e4,
               5.2264952788528545610e3])
_C = np.array([1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
               3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
               2.27238449892691845833e-2, 7.74545014278341407640e-4])
_D = np.array([1.0, 2.05319162663775882187e0, 1.67638483018380384940e0, 6.89767334985100004550e-1,
               1.48103976427480074590e-1, 1.51986665636164571966e-2, 5.47593808499534494600e-4,
               1.05075007164441684324e-9])
_E = np.array([6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
               2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
               2.71155556874348757815e-5, 2.01033439929228813265e-7])
_F = np.array([1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1, 1.48753612908506148525e-2,
               7.86869131145613259100e-4, 1.84631831751005468180e-5, 1.42151175831644588870e-7,
               2.04426310338993978564e-15])


@numba.njit(cache=True, nogil=True, inline="always")
def _poly(c, x):
    acc = c[7]
    for i in range(6, -1, -1):
        acc = acc * x + c[i]
    return acc


@numba.njit(cache=True, nogil=True)
def ndtri(p):
    """Normal quantile for p in (0, 1)."""
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_A, r) / _poly(_B, r)
    r = p if q < 0 else 1.0 - p
    r = np.sqrt(-np.log(r))
    if r <= 5.0:
        r -= 1.6
        z = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        z = _poly(_E, r) / _poly(_F, r)
    return -z if q < 0 else z


@numba.njit(cache=True, nogil=True)
def _fill_normals(k0, k1, path_start, step, out):
    n, d = out.shape
    flat = out.reshape(n * d)
    s_lo = np.uint64(step) & _MASK
    s_hi = (np.uint64(step) >> np.uint64(32)) & np.uint64(0xFFFFFF)
    # one Philox block -> two 53-bit uniforms -> two normals, for the
    # consecutive (path, coord) slots 2j and 2j + 1
    first = np.uint64(path_start) * np.uint64(d)
    total = n * d
    m = 0
    while m < total:
        slot = first + np.uint64(m)
        pair = slot >> np.uint64(1)
        c0, c1, c2, c3 = _philox4x32(
            pair & _MASK, (s_hi << np.uint64(8)) | (pair >> np.uint64(32)), s_lo,
            np.uint64(0x5DE), k0, k1,
        )
        if slot & np.uint64(1):
            b = np.int64(((c2 << np.uint64(32)) | c3) >> np.uint64(11))
            flat[m] = ndtri((float(b) + 0.5) * _INV_2_53)
            m += 1
        else:
            a = np.int64(((c0 << np.uint64(32)) | c1) >> np.uint64(11))
            flat[m] = ndtri((float(a) + 0.5) * _INV_2_53)
            if m + 1 < total:
                b = np.int64(((c2 << np.uint64(32)) | c3) >> np.uint64(11))
                flat[m + 1] = ndtri((float(b) + 0.5) * _INV_2_53)
            m += 2


def stream_key(seed, tag=""):
    """Derive a 64-bit Philox key from a user seed and a purpose tag."""
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    digest = hashlib.blake2b(f"{seed}:{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def standard_normals(key, path_start, n_paths, step, dim, out=None):
    """N(0,1) draws of shape (n_paths, dim) for paths path_start.. at one step."""
    if out is None:
        out = np.empty((n_paths, dim))
    elif not out.flags.c_contiguous:
        raise ValueError("output buffer must be C-contiguous")
    if path_start < 0 or (path_start + n_paths) * dim > 2**39:
        raise ValueError("path index space exhausted")
    _fill_normals(np.uint64(key & 0xFFFFFFFF), np.uint64(key >> 32), path_start, step, out)
    return out


def numpy_generator(seed, tag):
    """Plain numpy Generator for auxiliary randomness (bootstraps, permutations)."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, tag)))
