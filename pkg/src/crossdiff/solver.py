"""Semi-implicit steppers for local, nonlocal-torus, general-domain,
Kolmogorov, and penalised cross-diffusion systems.

All torus steppers share one backbone: freeze the diffusion coefficients at
the old state, then take one implicit linear step

    (I - dt * Delta_d(c .)) u_new = u_old ,

where Delta_d(c .) is the conservative discrete operator u -> div_h grad_h(c u).
The matrix has unit column sums and nonpositive off-diagonal entries, so mass
is conserved exactly (up to the linear-solve residual) and strictly positive
input stays strictly positive (M-matrix inverse).  Convexity of the entropy
densities then gives per-step entropy dissipation up to the coefficient-lag
error, which the run loop monitors.

The general-domain stepper advances the kernel system in conservative flux
form: implicit (eps + bar_a_i) diffusion plus a cross drift assembled at faces
by face-face kernel quadrature against the partner's face differences.  For
convolution-structure kernels on the torus the flux form coincides with the
torus stepper (plus eps-diffusion) as an exact matrix identity whenever the
self-diffusion vanishes, and on the instantaneous right-hand side in general.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field as dataclass_field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .entropy import DiffusionRates, EntropyStructure, total_entropy
from .grids import Field, Grid, TorusGrid, circular_convolve, reflect_kernel
from .kernels import DomainKernel, TorusMollifier

__all__ = [
    "SolverError",
    "LinearSolveError",
    "SolverAbort",
    "Penalisation",
    "SystemSpec",
    "SolverState",
    "TrajectoryRecord",
    "GeneralCoefficients",
    "step_kolmogorov",
    "step_torus_nonlocal",
    "step_local",
    "apply_dirichlet_penalisation",
    "assemble_general_coefficients",
    "step_general_domain",
    "general_rhs_operators",
    "torus_coefficient_fields",
    "kernel_sup_norms",
    "run",
]

LINEAR_SOLVE_TOL = 1e-12


class SolverError(RuntimeError):
    pass


class LinearSolveError(SolverError):
    pass


class SolverAbort(SolverError):
    """Structured abort raised by the run loop when an invariant fails."""

    def __init__(self, step: int, time: float, reason: str, report: dict):
        self.step = step
        self.time = time
        self.reason = reason
        self.report = report
        super().__init__(f"aborted at step {step} (t = {time:.6g}): {reason}")


@dataclass(frozen=True)
class Penalisation:
    """Implicit relaxation -(1/epsilon)(u_i - target_i) on the masked region."""

    epsilon: float
    targets: tuple
    mask: Field

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("penalisation strength parameter must be positive")
        m = self.mask.values
        if np.any(m < 0) or np.any(m > 1):
            raise ValueError("mask values must lie in [0, 1]")


@dataclass(frozen=True)
class SystemSpec:
    """Everything needed to advance one system: rates, entropy, kernel, boundary.

    ``antiderivatives`` optionally supplies vectorised closures for non-SKT
    general-domain runs: keys ("a_diag", i) -> f(own, *others) and
    ("tilde", i, j) -> f(v_i, v_j).  The SKT family fills these automatically.
    """

    n: int
    rates: DiffusionRates
    structure: EntropyStructure
    kernel: object = None  # TorusMollifier | Field (weights) | DomainKernel | None
    epsilon_viscosity: float = 0.0
    boundary: str = "periodic"
    penalisation: Optional[Penalisation] = None
    antiderivatives: Optional[dict] = None

    def __post_init__(self):
        if self.boundary not in ("periodic", "neumann"):
            raise ValueError("boundary must be 'periodic' or 'neumann'")
        if self.epsilon_viscosity < 0:
            raise ValueError("epsilon_viscosity must be nonnegative")
        if self.boundary == "neumann":
            k = self.kernel
            if not (isinstance(k, DomainKernel) and k.boundary_margin > 0):
                raise ValueError(
                    "neumann boundary requires a DomainKernel with a positive boundary margin"
                )
        if self.rates.n != self.n or self.structure.n != self.n:
            raise ValueError("rates/structure species count must match n")


@dataclass(frozen=True)
class SolverState:
    t: float
    fields: tuple
    step: int = 0

    def __post_init__(self):
        grid = self.fields[0].grid
        for f in self.fields:
            if f.grid != grid:
                raise ValueError("species fields live on different grids")
            if not np.all(np.isfinite(f.values)):
                raise ValueError("state contains non-finite values")

    @property
    def grid(self) -> Grid:
        return self.fields[0].grid

    def min_value(self) -> float:
        return min(float(f.values.min()) for f in self.fields)

    def max_value(self) -> float:
        return max(float(f.values.max()) for f in self.fields)

    def masses(self) -> list:
        return [self.grid.cell_volume * float(f.values.sum()) for f in self.fields]


@dataclass
class TrajectoryRecord:
    """Snapshots, diagnostics records, and per-step entropies of one run."""

    spec: SystemSpec
    dt: float
    horizon: float
    gamma: float
    times: list = dataclass_field(default_factory=list)
    snapshots: list = dataclass_field(default_factory=list)
    records: list = dataclass_field(default_factory=list)
    step_entropies: list = dataclass_field(default_factory=list)

    @property
    def final_fields(self) -> tuple:
        return self.snapshots[-1]


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def _solve(A, b, context: str) -> np.ndarray:
    x = spla.spsolve(sp.csc_matrix(A), b)
    scale = float(np.linalg.norm(b))
    res = float(np.linalg.norm(A @ x - b)) / (scale if scale > 0 else 1.0)
    if not np.isfinite(res) or res > LINEAR_SOLVE_TOL:
        raise LinearSolveError(f"{context}: relative residual {res:.3e} exceeds {LINEAR_SOLVE_TOL}")
    return x


def _neighbor_pairs(grid: TorusGrid):
    """Flat (site, neighbor) index arrays, one pair set per axis direction."""
    n = grid.n
    if grid.dim == 1:
        k = np.arange(n)
        return [(k, (k + 1) % n), (k, (k - 1) % n)]
    idx = np.arange(n * n).reshape(n, n)
    pairs = []
    for shift, axis in ((-1, 0), (1, 0), (-1, 1), (1, 1)):
        pairs.append((idx.ravel(), np.roll(idx, shift, axis=axis).ravel()))
    return pairs


def _kolmogorov_matrix(grid: TorusGrid, c: np.ndarray, dt: float, extra_diag=None):
    """I - dt * Delta_d(c .) (+ diag(extra)) on the periodic grid, sparse CSR.

    Unit column sums (exact mass conservation) and M-matrix structure
    (positivity) hold for any strictly positive coefficient vector c.
    """
    h2 = grid.h**2
    m = c.size
    rows = [np.arange(m)]
    cols = [np.arange(m)]
    diag = 1.0 + 2.0 * grid.dim * dt * c / h2
    if extra_diag is not None:
        diag = diag + extra_diag
    data = [diag]
    for site, nbr in _neighbor_pairs(grid):
        rows.append(site)
        cols.append(nbr)
        data.append(-dt * c[nbr] / h2)
    A = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)
    )
    return A.tocsr()


def step_kolmogorov(z: Field, mu: Field, dt: float, source: Optional[Field] = None) -> Field:
    """One implicit step of dz/dt = Delta_d(mu z) + G.

    Mass changes exactly by dt * integral(G); nonnegative z and G give a
    nonnegative result (M-matrix maximum principle).
    """
    grid = z.grid
    if not grid.periodic:
        raise ValueError("step_kolmogorov runs on torus grids")
    if mu.grid != grid or (source is not None and source.grid != grid):
        raise ValueError("fields live on different grids")
    if dt <= 0:
        raise ValueError("dt must be positive")
    muv = mu.values.ravel()
    if not np.all(muv > 0) or not np.all(np.isfinite(muv)):
        raise ValueError("mu must be strictly positive and finite")
    rhs = z.values.ravel().copy()
    if source is not None:
        rhs = rhs + dt * source.values.ravel()
    A = _kolmogorov_matrix(grid, muv, dt)
    x = _solve(A, rhs, "kolmogorov step")
    return Field(grid, x.reshape(grid.shape))


# ---------------------------------------------------------------------------
# torus steppers
# ---------------------------------------------------------------------------

def _kernel_weight_fields(spec: SystemSpec, grid: TorusGrid):
    """(forward, reflected) weight fields of the torus kernel, or (None, None)."""
    k = spec.kernel
    if k is None:
        return None, None
    if isinstance(k, TorusMollifier):
        w = k.weights
    elif isinstance(k, Field):
        w = k
    else:
        raise SolverError("torus steppers take a TorusMollifier, a weights field, or no kernel")
    if w.grid != grid:
        raise SolverError("kernel grid does not match the state grid")
    return w, reflect_kernel(w)


def _conv(u_values: np.ndarray, weights: Optional[Field], grid: TorusGrid) -> np.ndarray:
    if weights is None:
        return u_values
    return circular_convolve(Field(grid, u_values), weights).values


def torus_coefficient_fields(state: SolverState, spec: SystemSpec) -> list:
    """Frozen Laplace-form multipliers c_i, including the viscosity shift.

    SKT pattern for n species: c_i = d_i + d_ii u_i + sum_{j != i} d_ij
    (u_j * rho_ij), where rho_ij is the kernel for i < j and its reflection
    for i > j.  Split two-species rates use c_1 = (mu_1(u_2)) * rho +
    kappa_1(u_1), with the reflected kernel for species 2.  Two-argument
    rates average mu_i(u_i(x), u_j(x - y)) over the kernel weights.
    """
    grid = state.grid
    rates = spec.rates
    u = [f.values for f in state.fields]
    w, w_refl = _kernel_weight_fields(spec, grid)
    coeffs = []
    if rates.skt is not None:
        c = rates.skt
        cross = np.asarray(c.d_cross)
        for i in range(spec.n):
            ci = np.full(grid.shape, float(c.d[i])) + cross[i, i] * u[i]
            for j in range(spec.n):
                if j == i or cross[i, j] == 0.0:
                    continue
                ci = ci + cross[i, j] * _conv(u[j], w if i < j else w_refl, grid)
            coeffs.append(ci)
    elif rates.mu_pair is not None:
        if spec.n != 2:
            raise SolverError("two-argument rates are a two-species feature")
        for i, wk in ((0, w), (1, w_refl)):
            own, other = u[i], u[1 - i]
            fn = rates.mu_pair[i]
            if wk is None:
                ci = np.asarray(fn(own, other), dtype=np.float64)
            else:
                ci = np.zeros(grid.shape)
                wv = wk.values
                for flat in np.flatnonzero(wv):
                    idx = np.unravel_index(flat, grid.shape)
                    shifted = np.roll(other, idx, axis=tuple(range(grid.dim)))
                    ci = ci + wv[idx] * np.asarray(fn(own, shifted), dtype=np.float64)
            coeffs.append(ci)
    elif rates.mu is not None:
        if spec.n != 2:
            raise SolverError("split multiplier rates are a two-species feature")
        for i, wk in ((0, w), (1, w_refl)):
            ci = _conv(np.asarray(rates.mu[i](u[1 - i]), dtype=np.float64), wk, grid)
            if rates.kappa is not None:
                ci = ci + np.asarray(rates.kappa[i](u[i]), dtype=np.float64)
            coeffs.append(ci)
    else:
        raise SolverError("rates must carry an SKT table or split multipliers")

    out = []
    for i, ci in enumerate(coeffs):
        ci = ci + spec.epsilon_viscosity
        if not np.all(ci > 0):
            raise SolverError(f"species {i + 1}: frozen coefficient not strictly positive")
        out.append(ci)
    return out


def _check_step_inputs(state: SolverState, dt: float):
    if dt <= 0:
        raise ValueError("dt must be positive")
    if state.min_value() <= 0:
        raise SolverError("state must be strictly positive")


def step_torus_nonlocal(state: SolverState, spec: SystemSpec, dt: float) -> SolverState:
    """Lagged-coefficient implicit step of the (non)local torus system."""
    grid = state.grid
    if not grid.periodic:
        raise SolverError("torus stepper requires a periodic grid")
    _check_step_inputs(state, dt)
    coeffs = torus_coefficient_fields(state, spec)
    new_fields = []
    for i in range(spec.n):
        A = _kolmogorov_matrix(grid, coeffs[i].ravel(), dt)
        x = _solve(A, state.fields[i].values.ravel(), f"species {i + 1} torus step")
        new_fields.append(Field(grid, x.reshape(grid.shape)))
    return SolverState(t=state.t + dt, fields=tuple(new_fields), step=state.step + 1)


def step_local(state: SolverState, spec: SystemSpec, dt: float) -> SolverState:
    """Local stepper: the torus scheme with the identity (delta) kernel."""
    local_spec = dataclasses.replace(spec, kernel=None, boundary="periodic", penalisation=None)
    return step_torus_nonlocal(state, local_spec, dt)


def apply_dirichlet_penalisation(state: SolverState, spec: SystemSpec, dt: float) -> SolverState:
    """Torus step plus implicit relaxation toward target values on the mask."""
    pen = spec.penalisation
    if pen is None:
        raise SolverError("spec has no penalisation record")
    grid = state.grid
    if not grid.periodic:
        raise SolverError("penalisation embeds the domain in a torus grid")
    _check_step_inputs(state, dt)
    if pen.mask.grid != grid:
        raise SolverError("mask grid does not match the state grid")
    mask = pen.mask.values.ravel()
    coeffs = torus_coefficient_fields(state, spec)
    strength = dt / pen.epsilon
    new_fields = []
    for i in range(spec.n):
        target = pen.targets[i]
        tv = target.values.ravel() if isinstance(target, Field) else float(target) * np.ones_like(mask)
        A = _kolmogorov_matrix(grid, coeffs[i].ravel(), dt, extra_diag=strength * mask)
        rhs = state.fields[i].values.ravel() + strength * mask * tv
        x = _solve(A, rhs, f"species {i + 1} penalised step")
        new_fields.append(Field(grid, x.reshape(grid.shape)))
    return SolverState(t=state.t + dt, fields=tuple(new_fields), step=state.step + 1)


# ---------------------------------------------------------------------------
# general-domain scheme: kernel quadrature helpers
# ---------------------------------------------------------------------------
#
# Kernel arguments are ordered by species index: species 1 owns the first
# slot, species 2 the second.  Every evaluated block puts the OWN point index
# on axis 0 and the partner index on axis 1, regardless of the slot order.

_CHUNK_BUDGET = 4_000_000


def _slice_points(pts, sl):
    if isinstance(pts, tuple):
        return tuple(p[sl] for p in pts)
    return pts[sl]


def _pair_blocks(pts_own, sl, pts_partner, species: int):
    """Kernel argument blocks: own points as rows, partner points as columns."""

    def shaped(p, shape):
        return tuple(q.reshape(shape) for q in p) if isinstance(p, tuple) else p.reshape(shape)

    own = shaped(_slice_points(pts_own, sl), (-1, 1))
    partner = shaped(pts_partner, (1, -1))
    return (own, partner) if species == 0 else (partner, own)


def _pair_rows(kernel: DomainKernel, pts_own, pts_partner, species: int, row_fn):
    """Feed row_fn(K_block, row_slice) with K_block[r, c] = K at own point r,
    partner point c, chunked over the own points."""
    first = pts_own[0] if isinstance(pts_own, tuple) else pts_own
    m_own = first.size
    m_partner = (pts_partner[0] if isinstance(pts_partner, tuple) else pts_partner).size
    step = max(1, _CHUNK_BUDGET // max(m_partner, 1))
    for start in range(0, m_own, step):
        sl = slice(start, min(start + step, m_own))
        args = _pair_blocks(pts_own, sl, pts_partner, species)
        row_fn(kernel.value(*args), sl)


def _pair_matvec(kernel: DomainKernel, pts_own, pts_partner, species: int,
                 vec: np.ndarray) -> np.ndarray:
    """Sum over partner points of K * vec, chunked over the own points."""
    first = pts_own[0] if isinstance(pts_own, tuple) else pts_own
    out = np.empty(first.size)

    def accumulate(K, sl):
        out[sl] = K @ vec

    _pair_rows(kernel, pts_own, pts_partner, species, accumulate)
    return out


def _cell_points(grid: Grid):
    if grid.dim == 1:
        return grid.axis_points()
    xx, yy = grid.coords()
    return (xx.ravel(), yy.ravel())


def _axis_faces(grid: Grid, axis: int):
    """(face coordinates, left-cell flat index, right-cell flat index).

    Torus grids enumerate all N faces per axis line; box grids only the
    interior ones (boundary faces carry zero flux).
    """
    n = grid.n
    h = grid.h
    if grid.dim == 1:
        if grid.periodic:
            k = np.arange(n)
            return (k + 0.5) * h, k, (k + 1) % n
        k = np.arange(1, n)
        return k * h, k - 1, k
    idx = np.arange(n * n).reshape(n, n)
    centers = grid.axis_points()
    if grid.periodic:
        locs = (np.arange(n) + 0.5) * h
        left = idx
        right = np.roll(idx, -1, axis=axis)
    else:
        locs = np.arange(1, n) * h
        if axis == 0:
            left, right = idx[:-1, :], idx[1:, :]
        else:
            left, right = idx[:, :-1], idx[:, 1:]
    if axis == 0:
        xf, yf = np.meshgrid(locs, centers, indexing="ij")
    else:
        xf, yf = np.meshgrid(centers, locs, indexing="ij")
    return (xf.ravel(), yf.ravel()), left.ravel(), right.ravel()


def _rate_closures(spec: SystemSpec) -> dict:
    """("a_diag", i) and ("tilde", i, j) closures; SKT closed forms built in."""
    table = {}
    skt = spec.rates.skt
    if skt is not None:
        cross = np.asarray(skt.d_cross)
        d = np.asarray(skt.d)
        for i in range(spec.n):
            others = tuple(j for j in range(spec.n) if j != i)

            def a_diag(own, *rest, _i=i, _others=others):
                out = d[_i] + 2.0 * cross[_i, _i] * np.asarray(own, dtype=np.float64)
                for j, uj in zip(_others, rest):
                    out = out + cross[_i, j] * np.asarray(uj, dtype=np.float64)
                return out

            table[("a_diag", i)] = a_diag
            for j in others:
                table[("tilde", i, j)] = (
                    lambda vi, vj, _c=float(cross[i, j]): _c * np.asarray(vi) * np.asarray(vj)
                )
    if spec.antiderivatives:
        table.update(spec.antiderivatives)
    return table


def _require(table: dict, key, what: str):
    if key not in table:
        raise SolverError(
            f"general-domain runs need {what}; supply it via SystemSpec.antiderivatives[{key!r}] "
            "(the SKT family provides closed forms automatically)"
        )
    return table[key]


def _is_affine_in_partner(fn, own: np.ndarray, n_others: int = 1) -> bool:
    """True when fn(own, *others) is affine in each partner argument."""
    zeros = [np.zeros_like(own) for _ in range(n_others)]
    base = np.asarray(fn(own, *zeros), dtype=np.float64)
    for k in range(n_others):
        args1 = [np.zeros_like(own) for _ in range(n_others)]
        args1[k] = np.ones_like(own)
        args2 = [np.zeros_like(own) for _ in range(n_others)]
        args2[k] = 2.0 * np.ones_like(own)
        v1 = np.asarray(fn(own, *args1), dtype=np.float64)
        v2 = np.asarray(fn(own, *args2), dtype=np.float64)
        if not np.allclose(v2 - base, 2.0 * (v1 - base), rtol=1e-10, atol=1e-12):
            return False
    return True


def _tilde_linear_in_own(tilde) -> bool:
    probe = np.array([0.7, 1.9])
    v1 = np.asarray(tilde(1.0, probe), dtype=np.float64)
    v2 = np.asarray(tilde(2.0, probe), dtype=np.float64)
    return bool(np.allclose(v2, 2.0 * v1, rtol=1e-10, atol=1e-14))


def _bar_a_cells(state: SolverState, spec: SystemSpec, table: dict) -> list:
    """Quadrature of K against a_ii over the partner arguments, at each cell.

    Diagonal rates affine in the partners (the SKT family) reduce to one
    kernel mat-vec per partner; general rates take the chunked direct loop.
    """
    grid = state.grid
    kernel: DomainKernel = spec.kernel
    u = [f.values.ravel() for f in state.fields]
    pts = _cell_points(grid)
    vol = grid.cell_volume
    out = []
    if spec.n == 2:
        for i in range(2):
            j = 1 - i
            a_diag = _require(table, ("a_diag", i), f"the diagonal rate a_{i + 1}{i + 1}")
            own = u[i]
            if _is_affine_in_partner(a_diag, own):
                base = np.asarray(a_diag(own, np.zeros_like(own)), dtype=np.float64)
                slope = np.asarray(a_diag(own, np.ones_like(own)), dtype=np.float64) - base
                w = _pair_matvec(kernel, pts, pts, i, np.ones(own.size))
                conv = _pair_matvec(kernel, pts, pts, i, u[j])
                bar = (base * w + slope * conv) * vol
            else:
                bar = np.zeros(own.size)

                def accumulate(K, sl, _own=own, _uj=u[j], _fn=a_diag, _bar=bar):
                    vals = np.asarray(
                        _fn(_own[sl].reshape(-1, 1), _uj.reshape(1, -1)), dtype=np.float64
                    )
                    _bar[sl] = (K * vals).sum(axis=1)

                _pair_rows(kernel, pts, pts, i, accumulate)
                bar = bar * vol
            out.append(bar.reshape(grid.shape))
        return out
    # three species, one dimension: full tensor quadrature
    x = pts
    N = x.size
    K = kernel.value(x.reshape(-1, 1, 1), x.reshape(1, -1, 1), x.reshape(1, 1, -1))
    ones = np.ones(N)
    for i in range(3):
        js = [j for j in range(3) if j != i]
        a_diag = _require(table, ("a_diag", i), f"the diagonal rate a_{i + 1}{i + 1}")
        Ki = np.moveaxis(K, i, 0)
        own = u[i]
        if not _is_affine_in_partner(a_diag, own, n_others=2):
            raise SolverError("three-species quadrature needs rates affine in the partners")
        base = np.asarray(a_diag(own, np.zeros(N), np.zeros(N)), dtype=np.float64)
        s1 = np.asarray(a_diag(own, ones, np.zeros(N)), dtype=np.float64) - base
        s2 = np.asarray(a_diag(own, np.zeros(N), ones), dtype=np.float64) - base
        w = np.einsum("abc,b,c->a", Ki, ones, ones)
        c1 = np.einsum("abc,b,c->a", Ki, u[js[0]], ones)
        c2 = np.einsum("abc,b,c->a", Ki, ones, u[js[1]])
        bar = (base * w + s1 * c1 + s2 * c2) * vol**2
        out.append(bar.reshape(grid.shape))
    return out


def _drift_at_faces(state: SolverState, spec: SystemSpec, table: dict, axis: int) -> list:
    """Cross drifts q_i at the axis faces, one array per species.

    q_i(f) = sum_{j != i} quadrature over partner faces f' of K(x_f, x_f')
    times the face difference quotient of tilde_a_ij in the partner slot,
    divided by the own value when tilde_a_ij is not linear in it.  For SKT
    this is exactly the kernel-weighted d_ij D+ u_j.  The flux contribution
    is q_i times the face mean of the (new) u_i.
    """
    grid = state.grid
    kernel: DomainKernel = spec.kernel
    h = grid.h
    vol = grid.cell_volume
    faces, left, right = _axis_faces(grid, axis)
    u = [f.values.ravel() for f in state.fields]
    ubar = [0.5 * (ui[left] + ui[right]) for ui in u]
    out = []
    for i in range(spec.n):
        q = np.zeros(left.size)
        for j in range(spec.n):
            if j == i:
                continue
            tilde = _require(table, ("tilde", i, j), f"the antiderivative of a_{i + 1}{j + 1}")
            linear = _tilde_linear_in_own(tilde)
            if spec.n == 2:
                if linear:
                    dtilde = (
                        np.asarray(tilde(1.0, u[j][right]), dtype=np.float64)
                        - np.asarray(tilde(1.0, u[j][left]), dtype=np.float64)
                    ) / h
                    q = q + _pair_matvec(kernel, faces, faces, i, dtilde) * vol
                else:
                    acc = np.zeros(left.size)
                    uj_r = u[j][right].reshape(1, -1)
                    uj_l = u[j][left].reshape(1, -1)

                    def accumulate(K, sl, _own=ubar[i], _fn=tilde, _acc=acc,
                                   _r=uj_r, _l=uj_l):
                        o = _own[sl].reshape(-1, 1)
                        dblk = (
                            np.asarray(_fn(o, _r), dtype=np.float64)
                            - np.asarray(_fn(o, _l), dtype=np.float64)
                        ) / (h * o)
                        _acc[sl] = (K * dblk).sum(axis=1)

                    _pair_rows(kernel, faces, faces, i, accumulate)
                    q = q + acc * vol
            else:
                if not linear:
                    raise SolverError(
                        "three-species quadrature needs antiderivatives linear in the own argument"
                    )
                dtilde = (
                    np.asarray(tilde(1.0, u[j][right]), dtype=np.float64)
                    - np.asarray(tilde(1.0, u[j][left]), dtype=np.float64)
                ) / h
                q = q + _three_species_face_contract(kernel, grid, faces, i, j, dtilde) * vol**2
        out.append(q)
    return out


def _three_species_face_contract(kernel, grid, faces, i, j, vec) -> np.ndarray:
    """One-dimensional three-species contraction: own and partner arguments
    at faces, the bystander integrated over cells."""
    cells = grid.axis_points()
    k = [s for s in range(3) if s not in (i, j)][0]
    shapes = {i: (-1, 1, 1), j: (1, -1, 1), k: (1, 1, -1)}
    args = [None, None, None]
    args[i] = faces.reshape(shapes[i])
    args[j] = faces.reshape(shapes[j])
    args[k] = cells.reshape(shapes[k])
    K = kernel.value(*args)
    return np.einsum("fgc,g,c->f", K, vec, np.ones(cells.size))


def general_rhs_operators(state: SolverState, spec: SystemSpec) -> list:
    """Per-species sparse operators A_i with du_i/dt = A_i u_i at frozen
    coefficients: flux form (eps + mean(bar_a)) D+ u + q ubar at faces.

    Column sums vanish, so the implicit step conserves mass exactly.
    """
    grid = state.grid
    kernel = spec.kernel
    if not isinstance(kernel, DomainKernel):
        raise SolverError("general-domain scheme requires a DomainKernel")
    if spec.epsilon_viscosity <= 0:
        raise SolverError(
            "general-domain scheme needs epsilon_viscosity > 0 (uniform parabolicity)"
        )
    if grid.periodic and not kernel.translation_invariant:
        raise SolverError("periodic general-domain runs take a translation-invariant kernel")
    if state.min_value() <= 0:
        raise SolverError("state must be strictly positive")

    table = _rate_closures(spec)
    bar_a = _bar_a_cells(state, spec, table)
    eps = spec.epsilon_viscosity
    h = grid.h
    m = grid.n**grid.dim

    per_axis = []
    for axis in range(grid.dim):
        _, left, right = _axis_faces(grid, axis)
        per_axis.append((left, right, _drift_at_faces(state, spec, table, axis)))

    ops = []
    for i in range(spec.n):
        rows, cols, data = [], [], []
        abar = bar_a[i].ravel()
        for left, right, drifts in per_axis:
            q = drifts[i]
            dcoef = (eps + 0.5 * (abar[left] + abar[right])) / h**2
            drift = q / (2.0 * h)
            # flux F(f)/h contributes +F/h to the left row, -F/h to the right
            rows += [left, left, right, right]
            cols += [right, left, right, left]
            data += [dcoef + drift, -dcoef + drift, -dcoef - drift, dcoef - drift]
        A = sp.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)
        ).tocsr()
        ops.append(A)
    return ops


def step_general_domain(state: SolverState, spec: SystemSpec, dt: float) -> SolverState:
    """Conservative semi-implicit step of the kernel-regularised system."""
    _check_step_inputs(state, dt)
    grid = state.grid
    ops = general_rhs_operators(state, spec)
    m = grid.n**grid.dim
    eye = sp.eye(m, format="csr")
    new_fields = []
    for i in range(spec.n):
        B = eye - dt * ops[i]
        x = _solve(B, state.fields[i].values.ravel(), f"species {i + 1} general-domain step")
        new_fields.append(Field(grid, x.reshape(grid.shape)))
    return SolverState(t=state.t + dt, fields=tuple(new_fields), step=state.step + 1)


@dataclass
class GeneralCoefficients:
    """bar_a (diffusion), bar_b (advection, tuple per axis), bar_c (reaction)
    fields of the parabolic rewriting, plus sampled kernel sup-norms."""

    bar_a: tuple
    bar_b: tuple
    bar_c: tuple
    kernel_sup_norms: dict


def kernel_sup_norms(kernel: DomainKernel, grid: Grid, n: int) -> dict:
    """Sampled sup-norms of K, its first derivatives, and its mixed second
    derivatives across distinct arguments (the block the reaction coefficient
    integrates against)."""
    if kernel.translation_invariant:
        rho = kernel.source_field.values
        h = kernel.source_field.grid.h
        dim = kernel.source_field.grid.dim
        d1 = max(
            float(np.max(np.abs((np.roll(rho, -1, a) - np.roll(rho, 1, a)) / (2 * h))))
            for a in range(dim)
        )
        d2 = max(
            float(np.max(np.abs((np.roll(rho, -1, a) - 2 * rho + np.roll(rho, 1, a)) / h**2)))
            for a in range(dim)
        )
        return {"K": float(np.max(np.abs(rho))), "dK": d1, "d2K": d2}
    pts = _cell_points(grid)
    norms = {"K": 0.0, "dK": 0.0, "d2K": 0.0}
    if n == 2:
        first = pts[0] if isinstance(pts, tuple) else pts
        m = first.size
        step = max(1, _CHUNK_BUDGET // max(m, 1))
        dim = grid.dim
        for start in range(0, m, step):
            sl = slice(start, min(start + step, m))
            args = _pair_blocks(pts, sl, pts, 0)
            norms["K"] = max(norms["K"], float(np.max(np.abs(kernel.value(*args)))))
            for arg in range(2):
                for comp in range(dim):
                    dv = kernel.partial(arg, comp, *args)
                    norms["dK"] = max(norms["dK"], float(np.max(np.abs(dv))))
                    for arg2 in range(arg + 1, 2):
                        for comp2 in range(dim):
                            d2v = kernel.partial2(arg, comp, arg2, comp2, *args)
                            norms["d2K"] = max(norms["d2K"], float(np.max(np.abs(d2v))))
        return norms
    x = pts
    a1, a2, a3 = x.reshape(-1, 1, 1), x.reshape(1, -1, 1), x.reshape(1, 1, -1)
    norms["K"] = float(np.max(np.abs(kernel.value(a1, a2, a3))))
    for arg in range(3):
        norms["dK"] = max(norms["dK"], float(np.max(np.abs(kernel.partial(arg, 0, a1, a2, a3)))))
        for arg2 in range(arg + 1, 3):
            norms["d2K"] = max(
                norms["d2K"], float(np.max(np.abs(kernel.partial2(arg, 0, arg2, 0, a1, a2, a3))))
            )
    return norms


def assemble_general_coefficients(state: SolverState, spec: SystemSpec) -> GeneralCoefficients:
    """Tensor quadrature of K, dK, d2K against a_ii, d_own tilde_a_ij, and
    tilde_a_ij / u_i.

    bar_b_i component c: sum_{j != i} quadrature of (dK / d partner_c) *
    d_own tilde_a_ij; bar_c_i: sum_{j != i} quadrature of (sum_c d2K /
    d own_c d partner_c) * tilde_a_ij / u_i.  The parabolic form then reads
    du_i/dt = div((eps + bar_a_i) grad u_i) - bar_b_i . grad u_i - bar_c_i u_i.
    Translation-invariant kernels have bar_b = bar_c = 0 identically.
    """
    grid = state.grid
    kernel = spec.kernel
    if not isinstance(kernel, DomainKernel):
        raise SolverError("general coefficients require a DomainKernel")
    if state.min_value() <= 0:
        raise SolverError("state must be strictly positive (bar_c divides by u_i)")
    table = _rate_closures(spec)
    bar_a = tuple(Field(grid, a) for a in _bar_a_cells(state, spec, table))
    norms = kernel_sup_norms(kernel, grid, spec.n)

    def zeros():
        return Field(grid, np.zeros(grid.shape))

    if kernel.translation_invariant:
        bar_b = tuple(tuple(zeros() for _ in range(grid.dim)) for _ in range(spec.n))
        bar_c = tuple(zeros() for _ in range(spec.n))
        return GeneralCoefficients(bar_a, bar_b, bar_c, norms)

    if spec.n != 2:
        raise SolverError("analytic corrector assembly is implemented for two species")
    pts = _cell_points(grid)
    u = [f.values.ravel() for f in state.fields]
    vol = grid.cell_volume
    dim = grid.dim
    m = u[0].size

    bar_b = []
    bar_c = []
    for i in range(2):
        j = 1 - i
        tilde = _require(table, ("tilde", i, j), f"the antiderivative of a_{i + 1}{j + 1}")
        own = u[i]
        linear_own = _tilde_linear_in_own(tilde)
        own_arg, partner_arg = (0, 1) if i == 0 else (1, 0)
        bcomps = [np.zeros(m) for _ in range(dim)]
        ci = np.zeros(m)
        step = max(1, _CHUNK_BUDGET // max(m, 1))
        for start in range(0, m, step):
            sl = slice(start, min(start + step, m))
            args = _pair_blocks(pts, sl, pts, i)
            if linear_own:
                d_own = np.asarray(tilde(1.0, u[j].reshape(1, -1)), dtype=np.float64)
                t_over = d_own
            else:
                eps_fd = 1e-6
                o = own[sl].reshape(-1, 1)
                t_over = np.asarray(tilde(o, u[j].reshape(1, -1)), dtype=np.float64) / o
                d_own = (
                    np.asarray(tilde(o + eps_fd, u[j].reshape(1, -1)), dtype=np.float64)
                    - np.asarray(tilde(o - eps_fd, u[j].reshape(1, -1)), dtype=np.float64)
                ) / (2 * eps_fd)
            for comp in range(dim):
                dK = kernel.partial(partner_arg, comp, *args)
                d2K = kernel.partial2(own_arg, comp, partner_arg, comp, *args)
                bcomps[comp][sl] = (dK * d_own).sum(axis=1) * vol
                ci[sl] += (d2K * t_over).sum(axis=1) * vol
        bar_b.append(tuple(Field(grid, b.reshape(grid.shape)) for b in bcomps))
        bar_c.append(Field(grid, ci.reshape(grid.shape)))
    return GeneralCoefficients(bar_a, tuple(bar_b), tuple(bar_c), norms)


# ---------------------------------------------------------------------------
# run loop
# ---------------------------------------------------------------------------

def _select_stepper(spec: SystemSpec):
    if spec.penalisation is not None:
        return apply_dirichlet_penalisation, "penalised-torus"
    if isinstance(spec.kernel, DomainKernel):
        return step_general_domain, "general-domain"
    return step_torus_nonlocal, "torus"


def _safe_exp(x: float) -> float:
    try:
        return math.exp(x)
    except OverflowError:
        return float("inf")


def run(spec: SystemSpec, initial_fields: Sequence[Field], T: float,
        dt: Optional[float] = None, cadence: int = 10) -> TrajectoryRecord:
    """Advance to time T, recording diagnostics every ``cadence`` steps
    (plus the initial and final states).

    Aborts (SolverAbort) if positivity fails, if the entropy increases by
    more than 1e-8 (1 + |H0|) in a step (penalised runs excepted: the
    relaxation injects entropy by design), or if the state or the assembled
    diffusion coefficients exceed twice their a-priori growth bounds.
    """
    from . import diagnostics as _diag

    if dt is None:
        dt = T / 1000.0
    if not (0 < dt <= T):
        raise ValueError("need 0 < dt <= T")
    if cadence < 1:
        raise ValueError("cadence must be >= 1")
    fields = tuple(Field(f.grid, f.values.copy()) for f in initial_fields)
    if len(fields) != spec.n:
        raise ValueError(f"expected {spec.n} species fields")
    state = SolverState(t=0.0, fields=fields, step=0)
    umin, umax = state.min_value(), state.max_value()
    if umin <= 0:
        raise SolverError("initial data must be strictly positive")
    gamma = min(umin, 1.0 / umax)

    stepper, kind = _select_stepper(spec)
    check_entropy = spec.penalisation is None

    H0 = total_entropy(spec.structure, [f.values for f in fields], state.grid.cell_volume)
    step_tol = 1e-8 * (1.0 + abs(H0))

    envelope = None
    state_bound = None
    abar_bound = None
    if kind == "torus" and isinstance(spec.kernel, TorusMollifier) and spec.rates.mu is not None:
        A_const = _diag.growth_constant(spec)
        lap_rho = _diag.kernel_laplacian_sup(spec.kernel)
        envelope = _diag.max_principle_envelope(gamma, A_const, T, H0, lap_rho)
        state_bound = 2.0 * envelope[1]
    elif kind == "general-domain":
        A_const = _diag.growth_constant_general(spec)
        norms = kernel_sup_norms(spec.kernel, state.grid, spec.n)
        volume = state.grid.length**state.grid.dim
        M = 2.0 * A_const * max(norms.values()) * (volume + H0)
        envelope = (gamma * _safe_exp(-M * T), (1.0 / gamma) * _safe_exp(M * T))
        state_bound = 2.0 * envelope[1]
        abar_bound = 2.0 * A_const * norms["K"] * (volume + H0)

    weights_cache = _diag.dissipation_weights(spec, state.grid)
    traj = TrajectoryRecord(spec=spec, dt=dt, horizon=T, gamma=gamma)

    def record(st: SolverState):
        rec = _diag.compute_record(st.fields, st.t, spec, weights=weights_cache,
                                   envelope=envelope)
        traj.times.append(st.t)
        traj.snapshots.append(st.fields)
        traj.records.append(rec)
        if abar_bound is not None and np.isfinite(abar_bound):
            bar_a = _bar_a_cells(st, spec, _rate_closures(spec))
            worst = max(float(np.max(np.abs(a))) for a in bar_a)
            if worst > abar_bound:
                raise SolverAbort(st.step, st.t,
                                  "diffusion coefficient exceeded twice its a-priori bound",
                                  {"bar_a_max": worst, "bound": abar_bound})

    record(state)
    traj.step_entropies.append(H0)
    H_prev = H0

    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(T, 1.0):
        n_steps = int(np.ceil(T / dt - 1e-12))

    for k in range(1, n_steps + 1):
        try:
            state = stepper(state, spec, dt)
        except SolverAbort:
            raise
        except SolverError as exc:
            raise SolverAbort(k, state.t, "stepper failure", {"error": str(exc)}) from exc
        if state.min_value() <= 0:
            raise SolverAbort(k, state.t, "positivity lost", {"min_value": state.min_value()})
        H = total_entropy(spec.structure, [f.values for f in state.fields],
                          state.grid.cell_volume)
        traj.step_entropies.append(H)
        if check_entropy and H > H_prev + step_tol:
            raise SolverAbort(k, state.t, "entropy increased beyond tolerance",
                              {"H_prev": H_prev, "H": H, "tolerance": step_tol})
        if state_bound is not None and np.isfinite(state_bound) and state.max_value() > state_bound:
            raise SolverAbort(k, state.t, "state exceeded twice the growth envelope",
                              {"max_value": state.max_value(), "bound": state_bound})
        H_prev = H
        if k % cadence == 0 or k == n_steps:
            record(state)

    return traj
