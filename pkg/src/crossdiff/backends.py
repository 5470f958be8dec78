"""Numba-accelerated hot loops with pure-numpy fallbacks.

The accelerated path is the default.  Set the environment variable
``CROSSDIFF_DISABLE_NUMBA=1`` before import to force the numpy fallbacks
(useful for debugging and for the backend benchmark).  Both paths compute
the same direct sums; only the summation order differs, so results agree
to roundoff but are each individually deterministic.

Hot loops kept here:
  * direct circular convolution in 1D and 2D (the reference semantics for
    every kernel application in the solvers -- direct summation commutes
    with grid shifts bit-for-bit, which the spectral shortcut does not),
  * the Gillespie event loop for the lattice particle model.

Everything else in the package is either vectorised numpy or sparse linear
algebra, where numba buys nothing.
"""

from __future__ import annotations

import os

import numpy as np

_env = os.environ.get("CROSSDIFF_DISABLE_NUMBA", "").strip().lower()
NUMBA_REQUESTED = _env in ("", "0", "false", "no")

USING_NUMBA = False
if NUMBA_REQUESTED:
    try:
        from numba import njit

        USING_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USING_NUMBA = False

if not USING_NUMBA:
    def njit(*args, **kwargs):
        """Identity decorator standing in for numba.njit."""
        if args and callable(args[0]) and not kwargs:
            return args[0]

        def wrap(func):
            return func

        return wrap


# ---------------------------------------------------------------------------
# direct circular convolution
# ---------------------------------------------------------------------------

@njit(cache=True)
def _conv1_jit(f, k):
    n = f.shape[0]
    out = np.zeros(n)
    for j in range(n):
        w = k[j]
        if w == 0.0:
            continue
        for m in range(n):
            out[m] += w * f[(m - j) % n]
    return out


def _conv1_numpy(f, k):
    out = np.zeros_like(f)
    for j in np.flatnonzero(k != 0.0):
        out += k[j] * np.roll(f, j)
    return out


@njit(cache=True)
def _conv2_jit(f, k):
    n0, n1 = f.shape
    out = np.zeros((n0, n1))
    for j0 in range(n0):
        for j1 in range(n1):
            w = k[j0, j1]
            if w == 0.0:
                continue
            for m0 in range(n0):
                for m1 in range(n1):
                    out[m0, m1] += w * f[(m0 - j0) % n0, (m1 - j1) % n1]
    return out


def _conv2_numpy(f, k):
    out = np.zeros_like(f)
    idx0, idx1 = np.nonzero(k)
    for j0, j1 in zip(idx0, idx1):
        out += k[j0, j1] * np.roll(f, (j0, j1), axis=(0, 1))
    return out


def circular_convolve_values(f: np.ndarray, k: np.ndarray) -> np.ndarray:
    """(f * k)[m] = sum_j f[m-j] k[j] with periodic indices.

    ``k`` is in weights form: no grid spacing factor is applied here.
    """
    f = np.ascontiguousarray(f, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    if f.shape != k.shape:
        raise ValueError(f"field shape {f.shape} != kernel shape {k.shape}")
    if f.ndim == 1:
        return _conv1_jit(f, k) if USING_NUMBA else _conv1_numpy(f, k)
    if f.ndim == 2:
        return _conv2_jit(f, k) if USING_NUMBA else _conv2_numpy(f, k)
    raise ValueError("only 1D and 2D fields are supported")


# ---------------------------------------------------------------------------
# Gillespie event loop
# ---------------------------------------------------------------------------
#
# State: counts n1[i], n2[j] on a periodic lattice of n_sites.  A pair
# (species-1 particle at i, species-2 particle at j) jumps right with rate
# rate_right[i, j] (both move +1) and left with rate_left[i, j] (both move
# -1).  Total propensity Lambda = sum_ij (R_r + R_l)[i,j] n1[i] n2[j].
#
# Uniform random numbers are drawn ahead of the loop in one block so the
# jit path and the python path consume the identical stream for the same
# seed.  Event selection accumulates the propensities in the exact order
# used for the total and picks the first entry with running sum strictly
# above u * total, so zero-propensity entries can never fire.


@njit(cache=True)
def _gillespie_jit(n1, n2, rate_right, rate_left, t_end, max_events, uniforms):
    n_sites = n1.shape[0]
    times = np.empty(max_events)
    kinds = np.empty(max_events, dtype=np.int64)
    sites_i = np.empty(max_events, dtype=np.int64)
    sites_j = np.empty(max_events, dtype=np.int64)

    t = 0.0
    n_events = 0
    u_pos = 0
    n_pairs = 2 * n_sites * n_sites
    prop = np.empty(n_pairs)

    while n_events < max_events:
        idx = 0
        for i in range(n_sites):
            c1 = float(n1[i])
            for j in range(n_sites):
                pair = c1 * float(n2[j])
                prop[idx] = rate_right[i, j] * pair
                prop[idx + 1] = rate_left[i, j] * pair
                idx += 2
        total = 0.0
        for m in range(n_pairs):
            total += prop[m]
        if total <= 0.0:
            break
        if u_pos + 2 > uniforms.shape[0]:
            break
        u1 = uniforms[u_pos]
        u2 = uniforms[u_pos + 1]
        u_pos += 2
        if u1 <= 0.0:
            t = t_end
            break
        dt = -np.log(u1) / total
        if t + dt > t_end:
            t = t_end
            break
        t += dt
        target = u2 * total
        acc = 0.0
        chosen = -1
        for m in range(n_pairs):
            acc += prop[m]
            if acc > target:
                chosen = m
                break
        if chosen < 0:  # unreachable: u2 < 1 so target < total exactly
            break
        pair_index = chosen // 2
        right = (chosen % 2) == 0
        i = pair_index // n_sites
        j = pair_index % n_sites
        shift = 1 if right else -1
        n1[i] -= 1
        n1[(i + shift) % n_sites] += 1
        n2[j] -= 1
        n2[(j + shift) % n_sites] += 1
        times[n_events] = t
        kinds[n_events] = 1 if right else -1
        sites_i[n_events] = i
        sites_j[n_events] = j
        n_events += 1

    return times[:n_events], kinds[:n_events], sites_i[:n_events], sites_j[:n_events], t, u_pos


def _gillespie_numpy(n1, n2, rate_right, rate_left, t_end, max_events, uniforms):
    n_sites = n1.shape[0]
    times = np.empty(max_events)
    kinds = np.empty(max_events, dtype=np.int64)
    sites_i = np.empty(max_events, dtype=np.int64)
    sites_j = np.empty(max_events, dtype=np.int64)

    t = 0.0
    n_events = 0
    u_pos = 0
    n_pairs = 2 * n_sites * n_sites
    prop = np.empty(n_pairs)

    while n_events < max_events:
        pair = np.outer(n1, n2).astype(np.float64)
        prop[0::2] = (rate_right * pair).ravel()
        prop[1::2] = (rate_left * pair).ravel()
        cum = np.cumsum(prop)
        total = cum[-1]
        if total <= 0.0:
            break
        if u_pos + 2 > uniforms.shape[0]:
            break
        u1 = uniforms[u_pos]
        u2 = uniforms[u_pos + 1]
        u_pos += 2
        if u1 <= 0.0:
            t = t_end
            break
        dt = -np.log(u1) / total
        if t + dt > t_end:
            t = t_end
            break
        t += dt
        chosen = int(np.searchsorted(cum, u2 * total, side="right"))
        if chosen >= n_pairs:  # unreachable, see jit path
            break
        pair_index = chosen // 2
        right = (chosen % 2) == 0
        i = pair_index // n_sites
        j = pair_index % n_sites
        shift = 1 if right else -1
        n1[i] -= 1
        n1[(i + shift) % n_sites] += 1
        n2[j] -= 1
        n2[(j + shift) % n_sites] += 1
        times[n_events] = t
        kinds[n_events] = 1 if right else -1
        sites_i[n_events] = i
        sites_j[n_events] = j
        n_events += 1

    return times[:n_events], kinds[:n_events], sites_i[:n_events], sites_j[:n_events], t, u_pos


def gillespie_loop(n1, n2, rate_right, rate_left, t_end, max_events, uniforms):
    """Run the event loop in place on count arrays ``n1``, ``n2``.

    Returns (times, kinds, sites_i, sites_j, t_final, uniforms_consumed);
    kinds are +1 for right pair jumps, -1 for left.
    """
    n1 = np.ascontiguousarray(n1, dtype=np.int64)
    n2 = np.ascontiguousarray(n2, dtype=np.int64)
    args = (
        n1,
        n2,
        np.ascontiguousarray(rate_right, dtype=np.float64),
        np.ascontiguousarray(rate_left, dtype=np.float64),
        float(t_end),
        int(max_events),
        np.ascontiguousarray(uniforms, dtype=np.float64),
    )
    if USING_NUMBA:
        return _gillespie_jit(*args) + (n1, n2)
    return _gillespie_numpy(*args) + (n1, n2)
