"""Reversible pair-jump lattice model and its mean-field equations.

Two species live on a periodic 1D lattice of ``n_sites``.  A pair made of a
species-1 particle at site i and a species-2 particle at site j jumps right
with rate ``rate_right[i, j]`` (both particles move +1) and left with
``rate_left[i, j]`` (both move -1).  Tables built here satisfy the shift
identity rate_right(i, j) = rate_left(i+1, j+1) exactly; that reversibility
is what makes the mean-field entropy H = sum h(u_1) + h(u_2), h' = log,
dissipate — the bilinear route in :func:`discrete_entropy_dissipation` is
nonpositive term by term.

The mean-field system can be reassembled as a centred second difference of
(rate-averaged) products plus first-order corrector sums
(:func:`discrete_laplace_form`); for convolution-structure tables the
correctors vanish and the result is the lattice version of the
kernel-smoothed continuum systems solved elsewhere in this package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .backends import gillespie_loop

__all__ = [
    "RateTable",
    "ParticleState",
    "MeanFieldState",
    "GillespieResult",
    "ErrorTable",
    "make_rate_table",
    "convolution_rate_table",
    "save_rate_table_csv",
    "load_rate_table_csv",
    "sample_counts",
    "gillespie_run",
    "event_log_csv_text",
    "save_event_log_csv",
    "meanfield_rhs",
    "integrate_meanfield",
    "discrete_entropy_dissipation",
    "discrete_laplace_form",
    "particle_vs_meanfield",
]


# ---------------------------------------------------------------------------
# rate tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateTable:
    """Nonnegative pair-jump rates on a periodic lattice.

    ``rate_right[i, j]`` moves the pair (i, j) to (i+1, j+1); ``rate_left``
    to (i-1, j-1).  Construction requires the exact shift identity
    rate_right(i, j) == rate_left(i+1, j+1) (periodic indices).
    """

    n_sites: int
    rate_right: np.ndarray
    rate_left: np.ndarray

    def __post_init__(self):
        n = self.n_sites
        if n < 2:
            raise ValueError("need at least 2 lattice sites")
        for name in ("rate_right", "rate_left"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n, n):
                raise ValueError(f"{name} must have shape ({n}, {n}), got {arr.shape}")
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite and nonnegative")
            object.__setattr__(self, name, arr)
        # rate_left(i+1, j+1) laid out at (i, j):
        shifted = np.roll(self.rate_left, (-1, -1), axis=(0, 1))
        if not np.array_equal(self.rate_right, shifted):
            k = np.unravel_index(
                np.argmax(np.abs(self.rate_right - shifted)), shifted.shape
            )
            raise ValueError(
                "reversibility violated: rate_right(i, j) != rate_left(i+1, j+1) "
                f"at (i, j) = {tuple(int(v) for v in k)}"
            )

    def scaled(self, factor: float) -> "RateTable":
        """Same table with every rate multiplied by ``factor`` (> 0)."""
        if not factor > 0:
            raise ValueError("scale factor must be positive")
        return replace(self, rate_right=self.rate_right * factor,
                       rate_left=self.rate_left * factor)


def make_rate_table(n_sites: int, generator: Callable[[int, int], float]) -> RateTable:
    """Build the right-jump rates from ``generator(i, j)`` and derive the
    left-jump rates by the shift rate_left(i, j) = rate_right(i-1, j-1)."""
    n = int(n_sites)
    right = np.empty((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(n):
            v = float(generator(i, j))
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"generator({i}, {j}) = {v} is not a nonnegative rate")
            right[i, j] = v
    left = np.roll(right, (1, 1), axis=(0, 1))
    return RateTable(n_sites=n, rate_right=right, rate_left=left)


def convolution_rate_table(weights: np.ndarray) -> RateTable:
    """Shift-invariant table rate_right(i, j) = weights[(i - j) mod n].

    Such tables have rate_left == rate_right, so the corrector sums of the
    Laplace reassembly vanish and the mean-field system is exactly the
    lattice form of the kernel-smoothed torus system (species-1 coefficient
    convolves with ``weights``, species-2 with its reflection).
    """
    w = np.ascontiguousarray(weights, dtype=np.float64)
    if w.ndim != 1:
        raise ValueError("weights must be one-dimensional")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    n = w.shape[0]
    i = np.arange(n).reshape(-1, 1)
    j = np.arange(n).reshape(1, -1)
    right = w[(i - j) % n]
    return RateTable(n_sites=n, rate_right=right, rate_left=right.copy())


def save_rate_table_csv(table: RateTable, path) -> None:
    lines = ["i,j,rate_right,rate_left"]
    for i in range(table.n_sites):
        for j in range(table.n_sites):
            lines.append(
                f"{i},{j},{float(table.rate_right[i, j])!r},{float(table.rate_left[i, j])!r}"
            )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_rate_table_csv(path) -> RateTable:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != "i,j,rate_right,rate_left":
        raise ValueError(f"{path}: expected header 'i,j,rate_right,rate_left'")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 4:
            raise ValueError(f"{path}: malformed row {ln!r}")
        rows.append((int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])))
    n = max(max(r[0], r[1]) for r in rows) + 1
    if len(rows) != n * n:
        raise ValueError(f"{path}: expected {n * n} rows for {n} sites, got {len(rows)}")
    right = np.zeros((n, n))
    left = np.zeros((n, n))
    for i, j, rr, rl in rows:
        right[i, j] = rr
        left[i, j] = rl
    return RateTable(n_sites=n, rate_right=right, rate_left=left)


# ---------------------------------------------------------------------------
# particle state and exact stochastic simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParticleState:
    """Integer site occupancies of both species."""

    counts_1: np.ndarray
    counts_2: np.ndarray

    def __post_init__(self):
        for name in ("counts_1", "counts_2"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            if arr.ndim != 1:
                raise ValueError(f"{name} must be one-dimensional")
            if np.any(arr < 0):
                raise ValueError(f"{name} must be nonnegative")
            object.__setattr__(self, name, arr)
        if self.counts_1.shape != self.counts_2.shape:
            raise ValueError("both species need the same lattice")

    @property
    def n_sites(self) -> int:
        return self.counts_1.shape[0]

    @property
    def total_1(self) -> int:
        return int(self.counts_1.sum())

    @property
    def total_2(self) -> int:
        return int(self.counts_2.sum())


def sample_counts(profile: np.ndarray, total: int, rng: np.random.Generator) -> np.ndarray:
    """Multinomial allocation of ``total`` particles along ``profile``."""
    p = np.ascontiguousarray(profile, dtype=np.float64)
    if np.any(p < 0) or p.sum() <= 0:
        raise ValueError("profile must be nonnegative with positive mass")
    return rng.multinomial(int(total), p / p.sum()).astype(np.int64)


@dataclass
class GillespieResult:
    """Event log plus derived summaries of one exact simulation.

    ``kinds`` is +1 for right pair jumps, -1 for left.  ``time_avg_density``
    holds the time average over [0, horizon] of counts/total per species
    (the frozen tail after an absorbing state counts toward the average).
    """

    horizon: float
    t_final: float
    times: np.ndarray
    kinds: np.ndarray
    sites_i: np.ndarray
    sites_j: np.ndarray
    initial: ParticleState
    final: ParticleState
    time_avg_density: tuple
    absorbed: bool

    @property
    def n_events(self) -> int:
        return self.times.shape[0]


_BLOCK_EVENTS = 1 << 16


def gillespie_run(initial: ParticleState, rates: RateTable, T: float,
                  seed=None) -> GillespieResult:
    """Exact simulation of the pair-jump chain over [0, T].

    ``seed`` is anything ``numpy.random.default_rng`` accepts, or an existing
    Generator (consumed).  Both particle counts are conserved by every event;
    a zero-propensity (absorbing) state ends the run early but still counts
    toward the time averages.
    """
    if rates.n_sites != initial.n_sites:
        raise ValueError("rate table and state have different lattices")
    T = float(T)
    if T < 0:
        raise ValueError("horizon must be nonnegative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    n1 = initial.counts_1.copy()
    n2 = initial.counts_2.copy()
    chunks = {"times": [], "kinds": [], "sites_i": [], "sites_j": []}
    t_abs = 0.0
    absorbed = False
    while T > 0.0:
        uniforms = rng.random(2 * _BLOCK_EVENTS)
        # each call's clock starts at 0, so pass the remaining horizon and
        # shift the returned event times into absolute time
        times, kinds, sites_i, sites_j, t_local, consumed, n1, n2 = gillespie_loop(
            n1, n2, rates.rate_right, rates.rate_left, T - t_abs, _BLOCK_EVENTS, uniforms
        )
        chunks["times"].append(times + t_abs)
        chunks["kinds"].append(kinds)
        chunks["sites_i"].append(sites_i)
        chunks["sites_j"].append(sites_j)
        t_abs += t_local
        if t_abs >= T:
            t_abs = T
            break
        if times.shape[0] < _BLOCK_EVENTS and consumed + 2 <= uniforms.shape[0]:
            absorbed = True  # propensity hit zero with event and draw budget to spare
            break
        # otherwise the block ran out of events or uniforms: draw a new block
        # and resume (memorylessness makes the redrawn waiting time exact)
    times = np.concatenate(chunks["times"]) if chunks["times"] else np.empty(0)
    kinds = np.concatenate(chunks["kinds"]) if chunks["kinds"] else np.empty(0, dtype=np.int64)
    sites_i = np.concatenate(chunks["sites_i"]) if chunks["sites_i"] else np.empty(0, dtype=np.int64)
    sites_j = np.concatenate(chunks["sites_j"]) if chunks["sites_j"] else np.empty(0, dtype=np.int64)

    final = ParticleState(counts_1=n1, counts_2=n2)
    time_avg = _time_average_densities(initial, times, kinds, sites_i, sites_j, T)
    return GillespieResult(
        horizon=T, t_final=t_abs,
        times=times, kinds=kinds, sites_i=sites_i, sites_j=sites_j,
        initial=initial, final=final, time_avg_density=time_avg, absorbed=absorbed,
    )


def _time_average_densities(initial: ParticleState, times, kinds, sites_i, sites_j,
                            T: float) -> tuple:
    """Time average of counts/total over [0, T].

    Each event at time t_m shifts one particle per species; its contribution
    to the time integral is (T - t_m) times the occupancy increment, added to
    the constant initial contribution T * counts_0.
    """
    k1 = max(initial.total_1, 1)
    k2 = max(initial.total_2, 1)
    if T <= 0:
        return (initial.counts_1 / k1, initial.counts_2 / k2)
    n = initial.n_sites
    avg1 = initial.counts_1.astype(np.float64) * T
    avg2 = initial.counts_2.astype(np.float64) * T
    if times.size:
        w = T - times
        np.add.at(avg1, sites_i, -w)
        np.add.at(avg1, (sites_i + kinds) % n, w)
        np.add.at(avg2, sites_j, -w)
        np.add.at(avg2, (sites_j + kinds) % n, w)
    return (avg1 / (T * k1), avg2 / (T * k2))


def event_log_csv_text(result: GillespieResult) -> str:
    lines = ["t,type,i,j"]
    for m in range(result.n_events):
        lines.append(
            f"{float(result.times[m])!r},{int(result.kinds[m])},"
            f"{int(result.sites_i[m])},{int(result.sites_j[m])}"
        )
    return "\n".join(lines) + "\n"


def save_event_log_csv(result: GillespieResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(event_log_csv_text(result))


# ---------------------------------------------------------------------------
# mean-field system
# ---------------------------------------------------------------------------

@dataclass
class MeanFieldState:
    u_1: np.ndarray
    u_2: np.ndarray
    t: float = 0.0


def _as_density_pair(u) -> tuple:
    if isinstance(u, MeanFieldState):
        pair = (u.u_1, u.u_2)
    else:
        pair = tuple(u)
    out = tuple(np.ascontiguousarray(v, dtype=np.float64) for v in pair)
    if len(out) != 2 or out[0].shape != out[1].shape or out[0].ndim != 1:
        raise ValueError("expected two equal-length 1D density arrays")
    return out


def meanfield_rhs(u, rates: RateTable) -> tuple:
    """Time derivatives of both densities under the pair-jump mean field.

    Species 1 at site i gains from right jumps out of i-1 and left jumps out
    of i+1, each summed against the partner density, and loses at rate
    (right + left) summed the same way; species 2 mirrors this in the second
    table index.  Both outputs sum to zero exactly (telescoping).
    """
    u1, u2 = _as_density_pair(u)
    if u1.shape[0] != rates.n_sites:
        raise ValueError("state and rate table have different lattices")
    if np.any(u1 < 0) or np.any(u2 < 0):
        raise ValueError("densities must be nonnegative")
    a = rates.rate_right @ u2
    b = rates.rate_left @ u2
    f1 = np.roll(u1 * a, 1) + np.roll(u1 * b, -1) - u1 * (a + b)
    c = rates.rate_right.T @ u1
    d = rates.rate_left.T @ u1
    f2 = np.roll(u2 * c, 1) + np.roll(u2 * d, -1) - u2 * (c + d)
    return f1, f2


def _entropy_value(u1: np.ndarray, u2: np.ndarray) -> float:
    def h(z):
        return float(np.sum(z * np.log(z) - z + 1.0))

    return h(u1) + h(u2)


def integrate_meanfield(u, rates: RateTable, T: float, dt: Optional[float] = None,
                        record_entropy: bool = False):
    """Classical fourth-order one-step integration with fixed dt (default
    T/1000).  Returns the final MeanFieldState, plus the per-step entropy
    series when ``record_entropy`` (requires strictly positive iterates)."""
    u1, u2 = _as_density_pair(u)
    T = float(T)
    if T < 0:
        raise ValueError("horizon must be nonnegative")
    if dt is None:
        dt = 1e-3 * T
    if T > 0 and not 0 < dt <= T:
        raise ValueError("need 0 < dt <= T")
    n_steps = int(round(T / dt)) if T > 0 else 0

    def F(v1, v2):
        return meanfield_rhs((np.maximum(v1, 0.0), np.maximum(v2, 0.0)), rates)

    entropies = []
    if record_entropy:
        entropies.append(_entropy_value(u1, u2))
    for _ in range(n_steps):
        k1 = F(u1, u2)
        k2 = F(u1 + 0.5 * dt * k1[0], u2 + 0.5 * dt * k1[1])
        k3 = F(u1 + 0.5 * dt * k2[0], u2 + 0.5 * dt * k2[1])
        k4 = F(u1 + dt * k3[0], u2 + dt * k3[1])
        u1 = u1 + (dt / 6.0) * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        u2 = u2 + (dt / 6.0) * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
        if record_entropy:
            entropies.append(_entropy_value(u1, u2))
    state = MeanFieldState(u_1=u1, u_2=u2, t=n_steps * dt if T > 0 else 0.0)
    return (state, entropies) if record_entropy else state


def discrete_entropy_dissipation(u, rates: RateTable) -> tuple:
    """(H, dH/dt by the chain rule, dH/dt by the bilinear route).

    Route 1 pairs log(u_s) with the mean-field derivatives.  Route 2 is the
    sum over pairs of -rate_right(i,j) (p' - p)(log p' - log p) with
    p = u_1(i) u_2(j) and p' the right-shifted product; each term is
    nonpositive, so route 2 certifies dissipation by inspection.  The two
    routes agree identically — their numerical gap is pure roundoff.
    """
    u1, u2 = _as_density_pair(u)
    if np.any(u1 <= 0) or np.any(u2 <= 0):
        raise ValueError("entropy dissipation needs strictly positive densities")
    H = _entropy_value(u1, u2)
    f1, f2 = meanfield_rhs((u1, u2), rates)
    route1 = float(np.sum(np.log(u1) * f1) + np.sum(np.log(u2) * f2))
    p = np.outer(u1, u2)
    p_shift = np.outer(np.roll(u1, -1), np.roll(u2, -1))
    route2 = -float(np.sum(rates.rate_right * (p_shift - p) * (np.log(p_shift) - np.log(p))))
    return H, route1, route2


def discrete_laplace_form(u, rates: RateTable) -> tuple:
    """Reassemble the mean-field derivatives as a centred second difference
    of the rate-averaged product plus first-order corrector sums.

    For species 1: Delta_d( sum_j (R_l + R_r)/2 (i, j) u_1(i) u_2(j) ) plus
    (1/2) sum_j u_2(j) { u_1(i+1) [R_l - R_r](i+1, j)
                         + u_1(i-1) [R_r - R_l](i-1, j) },
    and the mirror image for species 2.  Returns ((g_1, g_2), residual),
    the residual being the largest deviation from :func:`meanfield_rhs`
    relative to 1 + the derivative scale — an algebraic identity, so it is
    roundoff-sized for every reversible table.
    """
    u1, u2 = _as_density_pair(u)
    a = rates.rate_right @ u2
    b = rates.rate_left @ u2
    s1 = 0.5 * u1 * (a + b)
    lap1 = np.roll(s1, -1) + np.roll(s1, 1) - 2.0 * s1
    corr1 = 0.5 * (np.roll(u1 * (b - a), -1) + np.roll(u1 * (a - b), 1))
    g1 = lap1 + corr1

    c = rates.rate_right.T @ u1
    d = rates.rate_left.T @ u1
    s2 = 0.5 * u2 * (c + d)
    lap2 = np.roll(s2, -1) + np.roll(s2, 1) - 2.0 * s2
    corr2 = 0.5 * (np.roll(u2 * (d - c), -1) + np.roll(u2 * (c - d), 1))
    g2 = lap2 + corr2

    f1, f2 = meanfield_rhs((u1, u2), rates)
    scale = 1.0 + max(float(np.max(np.abs(f1))), float(np.max(np.abs(f2))))
    residual = max(float(np.max(np.abs(g1 - f1))), float(np.max(np.abs(g2 - f2)))) / scale
    return (g1, g2), residual


# ---------------------------------------------------------------------------
# particle vs mean-field comparison
# ---------------------------------------------------------------------------

@dataclass
class ErrorTable:
    """L1 errors between empirical particle densities and the mean-field
    solution at the horizon, one row (particles, seed, error) per run."""

    rows: list = dataclass_field(default_factory=list)

    def csv_text(self) -> str:
        lines = ["K,seed,L1_error"]
        for k, seed, err in self.rows:
            lines.append(f"{k},{seed},{float(err)!r}")
        return "\n".join(lines) + "\n"

    def mean_by_k(self) -> dict:
        sums: dict = {}
        counts: dict = {}
        for k, _, err in self.rows:
            sums[k] = sums.get(k, 0.0) + err
            counts[k] = counts.get(k, 0) + 1
        return {k: sums[k] / counts[k] for k in sorted(sums)}

    def errors_for(self, k: int) -> list:
        return [err for kk, _, err in self.rows if kk == k]


def particle_vs_meanfield(rates: RateTable, profile_1: np.ndarray, profile_2: np.ndarray,
                          k_values: Sequence[int], T: float,
                          seeds: Sequence[int]) -> ErrorTable:
    """Compare finite-particle runs against the mean-field solution.

    For each particle count K (strictly increasing) and each seed: allocate K
    particles per species multinomially along the profiles, simulate the
    chain with the rate table scaled by 1/K (the pairwise propensities then
    drive the per-particle densities on the mean-field clock), and record the
    L1 distance between final empirical densities and the mean-field solution
    started from the exact profiles.  The same seed list is reused for every
    K, so rows are paired across K.
    """
    ks = [int(k) for k in k_values]
    if any(k2 <= k1 for k1, k2 in zip(ks, ks[1:])):
        raise ValueError("particle counts must be strictly increasing")
    if any(k < 1 for k in ks):
        raise ValueError("particle counts must be at least 1")
    p1 = np.ascontiguousarray(profile_1, dtype=np.float64)
    p2 = np.ascontiguousarray(profile_2, dtype=np.float64)
    for p in (p1, p2):
        if p.shape != (rates.n_sites,) or np.any(p < 0) or p.sum() <= 0:
            raise ValueError("profiles must be nonnegative over the lattice with positive mass")
    p1 = p1 / p1.sum()
    p2 = p2 / p2.sum()

    reference = integrate_meanfield((p1, p2), rates, T)
    table = ErrorTable()
    for k in ks:
        scaled = rates.scaled(1.0 / k)
        for seed in seeds:
            rng = np.random.default_rng(seed)
            counts = ParticleState(
                counts_1=rng.multinomial(k, p1).astype(np.int64),
                counts_2=rng.multinomial(k, p2).astype(np.int64),
            )
            result = gillespie_run(counts, scaled, T, seed=rng)
            err = float(
                np.sum(np.abs(result.final.counts_1 / k - reference.u_1))
                + np.sum(np.abs(result.final.counts_2 / k - reference.u_2))
            )
            table.rows.append((k, int(seed), err))
    return table
