"""Quantitative checks for cross-diffusion runs: entropy and dissipation,
the entropy inequality, maximum-principle envelopes, the duality functional,
kernel-width convergence studies, and the Laplace-form consistency residual.

This module only reads trajectory data (duck-typed: ``times``, ``snapshots``,
``records``, ``dt``, ``horizon``, ``spec``).  The solver module is imported
lazily inside the study functions, never at import time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dataclass_field
from typing import Optional, Sequence

import numpy as np

from .entropy import total_entropy
from .grids import Field, Grid, circular_convolve, integrate, reflect_kernel
from .kernels import DomainKernel, TorusMollifier, kernel_weights, make_torus_mollifier, unit_delta_kernel

__all__ = [
    "DiagnosticsRecord",
    "EntropyCheck",
    "DualityReport",
    "ConvergenceReport",
    "DissipationWeights",
    "dissipation_weights",
    "entropy_and_dissipation",
    "compute_record",
    "check_entropy_inequality",
    "max_principle_envelope",
    "growth_constant",
    "growth_constant_general",
    "kernel_laplacian_sup",
    "duality_functional",
    "l1_qt_distance",
    "l2_final_distance",
    "convergence_study",
    "laplace_form_consistency",
    "trajectory_csv_text",
]

ENVELOPE_SLACK = 0.1
STEP_TOL_SCALE = 1e-8


# ---------------------------------------------------------------------------
# gradients and dissipation weights
# ---------------------------------------------------------------------------

def _gradient_components(values: np.ndarray, grid: Grid) -> list:
    """Centred differences per axis; periodic wrap on the torus, reflected
    ghost cells on boxes (consistent with the zero-flux boundary)."""
    h = grid.h
    comps = []
    for ax in range(grid.dim):
        if grid.periodic:
            g = (np.roll(values, -1, axis=ax) - np.roll(values, 1, axis=ax)) / (2.0 * h)
        else:
            pad = [(1, 1) if a == ax else (0, 0) for a in range(grid.dim)]
            padded = np.pad(values, pad, mode="edge")
            fwd = [slice(None)] * grid.dim
            bwd = [slice(None)] * grid.dim
            fwd[ax] = slice(2, None)
            bwd[ax] = slice(0, -2)
            g = (padded[tuple(fwd)] - padded[tuple(bwd)]) / (2.0 * h)
        comps.append(g)
    return comps


def _gradient_squared(values: np.ndarray, grid: Grid) -> np.ndarray:
    out = np.zeros_like(values)
    for g in _gradient_components(values, grid):
        out += g * g
    return out


@dataclass(frozen=True)
class DissipationWeights:
    """Precomputed ingredients of the dissipation functional.

    mode "torus": D = sum_i int alpha_i(u_i)^2 |grad u_i|^2.
    mode "general": D = sum_i int [eps h_i''(u_i) + alpha_i(u_i)^2 w_i] |grad u_i|^2
    with the kernel mass weights w_i.
    """

    mode: str
    weight_arrays: Optional[tuple] = None


def dissipation_weights(spec, grid: Grid) -> DissipationWeights:
    if isinstance(spec.kernel, DomainKernel):
        kw = kernel_weights(spec.kernel, grid)
        return DissipationWeights("general", tuple(f.values for f in kw.fields))
    return DissipationWeights("torus")


def _as_fields(state) -> tuple:
    if hasattr(state, "fields"):
        return tuple(state.fields)
    return tuple(state)


def entropy_and_dissipation(state, spec, weights: Optional[DissipationWeights] = None):
    """(H, D) of a state: total entropy and the dissipation functional.

    Gradients are centred differences, which slightly under-resolve the true
    grid dissipation — the safe side for checking H(t) + sum dt D <= H0.
    """
    fields = _as_fields(state)
    grid = fields[0].grid
    values = [f.values for f in fields]
    for v in values:
        if np.any(v <= 0):
            raise ValueError("entropy diagnostics need a strictly positive state")
    if weights is None:
        weights = dissipation_weights(spec, grid)
    H = total_entropy(spec.structure, values, grid.cell_volume)
    D = 0.0
    for i, v in enumerate(values):
        alpha = np.asarray(spec.structure.dissipations[i](v), dtype=np.float64)
        grad2 = _gradient_squared(v, grid)
        if weights.mode == "general":
            hpp = np.asarray(spec.structure.densities[i].second_derivative(v), dtype=np.float64)
            integrand = (spec.epsilon_viscosity * hpp + alpha**2 * weights.weight_arrays[i]) * grad2
        else:
            integrand = alpha**2 * grad2
        D += grid.cell_volume * float(np.sum(integrand))
    return H, D


# ---------------------------------------------------------------------------
# per-snapshot record
# ---------------------------------------------------------------------------

@dataclass
class DiagnosticsRecord:
    t: float
    masses: tuple
    entropy: float
    dissipation: float
    mins: tuple
    maxs: tuple
    duality_integrand: float
    envelope_lower: Optional[float]
    envelope_upper: Optional[float]
    flags: dict = dataclass_field(default_factory=dict)


def _duality_weight_fields(spec, grid):
    k = spec.kernel
    if k is None:
        return None, None
    if isinstance(k, TorusMollifier):
        w = k.weights
    elif isinstance(k, Field):
        w = k
    else:
        return None, None
    return w, reflect_kernel(w)


def _duality_integrand(fields, spec) -> Optional[float]:
    """int ([mu_1(u_2) * rho] u_1 + [mu_2(u_1) * rho_check] u_2)(u_1 + u_2),
    or None when the run has no two-species split-rate torus structure."""
    if spec.n != 2 or spec.rates.mu is None:
        return None
    grid = fields[0].grid
    if not grid.periodic:
        return None
    if isinstance(spec.kernel, DomainKernel):
        return None
    w, w_refl = _duality_weight_fields(spec, grid)
    u1, u2 = fields[0].values, fields[1].values

    def smooth(raw, wk):
        raw = np.asarray(raw, dtype=np.float64)
        if wk is None:
            return raw
        return circular_convolve(Field(grid, raw), wk).values

    c1 = smooth(spec.rates.mu[0](u2), w)
    c2 = smooth(spec.rates.mu[1](u1), w_refl)
    return grid.cell_volume * float(np.sum((c1 * u1 + c2 * u2) * (u1 + u2)))


def compute_record(fields, t: float, spec, weights: Optional[DissipationWeights] = None,
                   envelope: Optional[tuple] = None) -> DiagnosticsRecord:
    fields = _as_fields(fields)
    grid = fields[0].grid
    masses = tuple(grid.cell_volume * float(f.values.sum()) for f in fields)
    mins = tuple(float(f.values.min()) for f in fields)
    maxs = tuple(float(f.values.max()) for f in fields)
    H, D = entropy_and_dissipation(fields, spec, weights)
    dual = _duality_integrand(fields, spec)
    lower, upper = (envelope if envelope is not None else (None, None))
    flags = {
        "positive": min(mins) > 0.0,
        "finite": bool(np.isfinite(H) and np.isfinite(D) and all(map(np.isfinite, masses))),
        "duality_defined": dual is not None,
    }
    if envelope is not None:
        ok_low = min(mins) >= lower * (1.0 - ENVELOPE_SLACK)
        ok_high = (not np.isfinite(upper)) or max(maxs) <= upper * (1.0 + ENVELOPE_SLACK)
        flags["within_envelope"] = bool(ok_low and ok_high)
    return DiagnosticsRecord(
        t=t, masses=masses, entropy=H, dissipation=D, mins=mins, maxs=maxs,
        duality_integrand=0.0 if dual is None else dual,
        envelope_lower=lower, envelope_upper=upper, flags=flags,
    )


# ---------------------------------------------------------------------------
# trajectory-level checks
# ---------------------------------------------------------------------------

@dataclass
class EntropyCheck:
    passed: bool
    worst_margin: float
    worst_time: float
    tolerance_per_step: float


def check_entropy_inequality(trajectory) -> EntropyCheck:
    """H(t_k) + sum_{r<=k} (t_r - t_{r-1}) D(t_r) <= H(0) + steps_k * tol,
    with tol = 1e-8 (1 + |H(0)|); D is taken at the right endpoint of each
    interval (the side the discrete estimate controls).  Reports the largest
    margin LHS - RHS over the recorded times."""
    recs = trajectory.records
    H0 = recs[0].entropy
    tol = STEP_TOL_SCALE * (1.0 + abs(H0))
    dt = trajectory.dt
    cum = 0.0
    worst = 0.0
    worst_t = recs[0].t
    dissipation_ok = True
    for prev, rec in zip(recs, recs[1:]):
        if rec.dissipation < 0.0:
            # the functional is a sum of squares; a negative value means the
            # record was corrupted, and the inequality is vacuous against it
            dissipation_ok = False
        cum += (rec.t - prev.t) * rec.dissipation
        steps = int(round(rec.t / dt))
        margin = rec.entropy + cum - H0 - steps * tol
        if margin > worst:
            worst = margin
            worst_t = rec.t
    return EntropyCheck(passed=(worst <= 0.0 and dissipation_ok),
                        worst_margin=worst, worst_time=worst_t,
                        tolerance_per_step=tol)


def max_principle_envelope(gamma: float, A_const: float, T: float, H_init: float,
                           lap_rho_inf: float):
    """(gamma exp(-A B |lap rho|), gamma^-1 exp(+A B |lap rho|)), B = T (1 + H_init)."""
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must lie in (0, 1]")
    if min(A_const, T, lap_rho_inf) < 0 or H_init < 0:
        raise ValueError("A, T, H_init, and the kernel Laplacian bound must be nonnegative")
    B = T * (1.0 + H_init)
    expo = A_const * B * lap_rho_inf
    try:
        upper = math.exp(expo) / gamma
    except OverflowError:
        upper = float("inf")
    return gamma * math.exp(-min(expo, 745.0)), upper


_GROWTH_GRID = np.logspace(-3.0, 3.0, 400)


def growth_constant(spec) -> float:
    """Smallest A with mu_1(z) <= A (1 + h_2(z)) and mu_2(z) <= A (1 + h_1(z)),
    estimated on a logarithmic grid."""
    if spec.n != 2 or spec.rates.mu is None:
        raise ValueError("the growth constant needs two species with split rates")
    z = _GROWTH_GRID
    A = 0.0
    for i in range(2):
        mu = np.asarray(spec.rates.mu[i](z), dtype=np.float64)
        h_other = np.asarray(spec.structure.densities[1 - i].value(z), dtype=np.float64)
        A = max(A, float(np.max(mu / (1.0 + h_other))))
    return A


def growth_constant_general(spec) -> float:
    """Smallest A bounding a_ii, d_own tilde_a_ij, and tilde_a_ij / v_i by
    A (1 + sum_k h_k(v_k)) on the default logarithmic sample grid."""
    from . import solver as _solver
    from .entropy import default_sample_grid

    table = _solver._rate_closures(spec)
    n = spec.n
    samples = default_sample_grid(n)
    dens = spec.structure.densities
    denom = 1.0 + sum(
        np.asarray(dens[k].value(samples[:, k]), dtype=np.float64) for k in range(n)
    )
    A = 0.0
    for i in range(n):
        others = [j for j in range(n) if j != i]
        a_diag = table.get(("a_diag", i))
        if a_diag is not None:
            vals = np.asarray(
                a_diag(samples[:, i], *[samples[:, j] for j in others]), dtype=np.float64
            )
            A = max(A, float(np.max(np.abs(vals) / denom)))
        for j in others:
            tilde = table.get(("tilde", i, j))
            if tilde is None:
                continue
            vi = samples[:, i]
            vj = samples[:, j]
            tv = np.asarray(tilde(vi, vj), dtype=np.float64)
            A = max(A, float(np.max(np.abs(tv / vi) / denom)))
            eps_fd = 1e-6 * (1.0 + vi)
            dv = (
                np.asarray(tilde(vi + eps_fd, vj), dtype=np.float64)
                - np.asarray(tilde(vi - eps_fd, vj), dtype=np.float64)
            ) / (2.0 * eps_fd)
            A = max(A, float(np.max(np.abs(dv) / denom)))
    return A


def kernel_laplacian_sup(moll: TorusMollifier) -> float:
    """Sup-norm of the discrete Laplacian of the mollifier density."""
    rho = moll.field.values
    h = moll.field.grid.h
    lap = np.zeros_like(rho)
    for ax in range(rho.ndim):
        lap += (np.roll(rho, -1, axis=ax) - 2.0 * rho + np.roll(rho, 1, axis=ax)) / h**2
    return float(np.max(np.abs(lap)))


# ---------------------------------------------------------------------------
# duality functional
# ---------------------------------------------------------------------------

@dataclass
class DualityReport:
    lhs: float
    rhs_bound: float

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs_bound


def duality_functional(trajectory, spec=None) -> DualityReport:
    """Time quadrature (left endpoints) of the duality integrand, together
    with the a-priori bound (1 + 2 A B_{T,init})(int (u_1^0)^2 + int (u_2^0)^2).

    Only the stability of lhs/rhs_bound under grid refinement is meaningful;
    the dimensional constant relating them is not pinned down.
    """
    if spec is None:
        spec = trajectory.spec
    if spec.n != 2 or spec.rates.mu is None:
        raise ValueError("the duality functional needs two species with split rates")
    lhs = 0.0
    for k in range(len(trajectory.times) - 1):
        dt_k = trajectory.times[k + 1] - trajectory.times[k]
        val = _duality_integrand(trajectory.snapshots[k], spec)
        if val is None:
            raise ValueError("duality integrand undefined for this run (torus split-rate only)")
        lhs += dt_k * val
    first = trajectory.snapshots[0]
    grid = first[0].grid
    l2_init = sum(grid.cell_volume * float(np.sum(f.values**2)) for f in first)
    H0 = total_entropy(spec.structure, [f.values for f in first], grid.cell_volume)
    A = growth_constant(spec)
    B = trajectory.horizon * (1.0 + H0)
    return DualityReport(lhs=lhs, rhs_bound=(1.0 + 2.0 * A * B) * l2_init)


def kolmogorov_duality(z0, mu, T: float, dt: float) -> DualityReport:
    """Implicit steps of dz/dt = Delta(mu z) scored against the dual bound.

    lhs  = sum over steps of dt * int mu z_k^2   (right endpoints),
    rhs  = (1 + int_0^T int mu) * int z0^2.

    Only lhs/rhs stability under grid refinement is meaningful; the constant
    itself is fitted from one run and rechecked on finer grids.
    """
    from . import solver as _solver

    if dt <= 0:
        raise ValueError("need at least one positive step")
    steps = int(round(T / dt))
    if steps < 1:
        raise ValueError("need at least one positive step")
    grid = z0.grid
    z = z0
    lhs = 0.0
    for _ in range(steps):
        z = _solver.step_kolmogorov(z, mu, dt)
        lhs += dt * grid.cell_volume * float(np.sum(mu.values * z.values**2))
    qt_mass = T * grid.cell_volume * float(np.sum(mu.values))
    rhs = (1.0 + qt_mass) * grid.cell_volume * float(np.sum(z0.values**2))
    return DualityReport(lhs=lhs, rhs_bound=rhs)


# ---------------------------------------------------------------------------
# distances and the kernel-width convergence study
# ---------------------------------------------------------------------------

def _check_comparable(a, b):
    if len(a.times) != len(b.times) or any(
        abs(s - t) > 1e-12 * (1.0 + abs(t)) for s, t in zip(a.times, b.times)
    ):
        raise ValueError("trajectories were recorded at different times")


def l1_qt_distance(traj_a, traj_b) -> float:
    """Space-time L1 distance, summed over species: interval-weighted sums of
    |difference| over the recorded snapshots."""
    _check_comparable(traj_a, traj_b)
    grid = traj_a.snapshots[0][0].grid
    total = 0.0
    for k in range(1, len(traj_a.times)):
        dt_k = traj_a.times[k] - traj_a.times[k - 1]
        diff = sum(
            float(np.sum(np.abs(fa.values - fb.values)))
            for fa, fb in zip(traj_a.snapshots[k], traj_b.snapshots[k])
        )
        total += dt_k * grid.cell_volume * diff
    return total


def l2_final_distance(traj_a, traj_b) -> float:
    _check_comparable(traj_a, traj_b)
    grid = traj_a.snapshots[0][0].grid
    sq = sum(
        grid.cell_volume * float(np.sum((fa.values - fb.values) ** 2))
        for fa, fb in zip(traj_a.snapshots[-1], traj_b.snapshots[-1])
    )
    return math.sqrt(sq)


@dataclass
class ConvergenceReport:
    """(width, L1(Q_T), final L2) rows against the local reference, plus the
    monotonicity verdict (nonincreasing L1 within the slack factor)."""

    rows: list
    monotone: bool
    slack: float = 0.05

    def csv_text(self) -> str:
        lines = ["width,L1_QT,L2_final"]
        for w, l1, l2 in self.rows:
            lines.append(f"{w!r},{l1!r},{l2!r}")
        return "\n".join(lines) + "\n"

    def verdict_text(self) -> str:
        lines = [
            "Kernel-width convergence study",
            "==============================",
            "",
            "Distances to the local reference run (same grid, same time step):",
            "",
            f"  {'width':>12}  {'L1(Q_T)':>16}  {'L2 at T':>16}",
        ]
        for w, l1, l2 in self.rows:
            lines.append(f"  {w:>12.6g}  {l1:>16.8e}  {l2:>16.8e}")
        lines.append("")
        verdict = "monotone nonincreasing" if self.monotone else "NOT monotone"
        lines.append(
            f"Verdict: L1(Q_T) distances are {verdict} within a {self.slack:.0%} slack "
            "as the kernel width shrinks."
        )
        if len(self.rows) >= 2 and self.rows[0][1] > 0:
            lines.append(
                f"Last/first L1 ratio: {self.rows[-1][1] / self.rows[0][1]:.6g}."
            )
        return "\n".join(lines) + "\n"

    def gnuplot_script(self, csv_name: str = "convergence.csv") -> str:
        return "\n".join([
            "set datafile separator ','",
            "set logscale xy",
            "set xlabel 'kernel width'",
            "set ylabel 'distance to local reference'",
            "set key left top",
            f"plot '{csv_name}' every ::1 using 1:2 with linespoints title 'L1(Q_T)', \\",
            f"     '{csv_name}' every ::1 using 1:3 with linespoints title 'L2 at T'",
            "",
        ])


def convergence_study(spec, widths: Sequence[float], initial_fields, T: float,
                      dt: Optional[float] = None, cadence: int = 10,
                      shape: str = "smooth-bump") -> ConvergenceReport:
    """Run the nonlocal system for each kernel width plus the local reference
    and report distances.  A width of 0 means the discrete delta kernel."""
    from . import solver as _solver
    import dataclasses as _dc

    widths = list(widths)
    if any(w2 >= w1 for w1, w2 in zip(widths, widths[1:])):
        raise ValueError("widths must be strictly decreasing")
    grid = initial_fields[0].grid
    positive = [w for w in widths if w > 0]
    if positive and min(positive) < 2.0 * grid.h - 1e-12:
        raise ValueError("smallest positive width must be at least two grid spacings")

    reference = _solver.run(_dc.replace(spec, kernel=None), initial_fields, T,
                            dt=dt, cadence=cadence)
    rows = []
    for w in widths:
        kern = unit_delta_kernel(grid) if w == 0 else make_torus_mollifier(grid, w, shape)
        traj = _solver.run(_dc.replace(spec, kernel=kern), initial_fields, T,
                           dt=dt, cadence=cadence)
        rows.append((w, l1_qt_distance(traj, reference), l2_final_distance(traj, reference)))
    monotone = all(
        rows[k + 1][1] <= rows[k][1] * 1.05 + 1e-15 for k in range(len(rows) - 1)
    )
    return ConvergenceReport(rows=rows, monotone=monotone)


# ---------------------------------------------------------------------------
# Laplace-form consistency of the general-domain scheme
# ---------------------------------------------------------------------------

def _pair_rate_mu(spec):
    """Two-argument multipliers mu_i(own, partner) of the Laplace writing."""
    rates = spec.rates
    if rates.mu_pair is not None:
        return rates.mu_pair
    if rates.skt is not None:
        c = rates.skt
        if c.n != 2:
            raise ValueError("Laplace-form check is a two-species diagnostic")
        cross = np.asarray(c.d_cross)

        def make(i):
            j = 1 - i
            d0, ds, dc = float(c.d[i]), float(cross[i, i]), float(cross[i, j])

            def mu(own, partner, _d0=d0, _ds=ds, _dc=dc):
                return _d0 + _ds * np.asarray(own, dtype=np.float64) + _dc * np.asarray(
                    partner, dtype=np.float64
                )

            return mu

        return (make(0), make(1))
    if rates.mu is not None:
        kap = rates.kappa

        def make(i):
            def mu(own, partner, _i=i):
                out = np.asarray(rates.mu[_i](partner), dtype=np.float64)
                if kap is not None:
                    out = out + np.asarray(kap[_i](own), dtype=np.float64)
                return out

            return mu

        return (make(0), make(1))
    raise ValueError("Laplace-form check needs split or two-argument multipliers")


def _lap_reflected(g: np.ndarray, grid: Grid) -> np.ndarray:
    h2 = grid.h**2
    if grid.periodic:
        return (np.roll(g, -1) - 2.0 * g + np.roll(g, 1)) / h2
    p = np.pad(g, 1, mode="edge")
    return (p[2:] - 2.0 * p[1:-1] + p[:-2]) / h2


def _div_centred(g: np.ndarray, grid: Grid) -> np.ndarray:
    h = grid.h
    if grid.periodic:
        return (np.roll(g, -1) - np.roll(g, 1)) / (2.0 * h)
    p = np.pad(g, 1, mode="edge")
    return (p[2:] - p[:-2]) / (2.0 * h)


def laplace_form_consistency(state, spec) -> float:
    """L2 norm of (flux-form RHS) - (Laplace-form RHS with corrector drifts)
    on one state: eps lap u_i + lap(mbar_i u_i) - div(r_i u_i), where mbar_i
    integrates K against mu_i and r_i against the slot-gradient sum of K.

    Both assemblies discretise the same operator, so the residual vanishes at
    second order in h — and to rounding for convolution-structure kernels,
    whose corrector integrand is identically zero.
    """
    from . import solver as _solver

    kernel = spec.kernel
    if not isinstance(kernel, DomainKernel):
        raise ValueError("Laplace-form check needs a general-domain kernel")
    grid = _as_fields(state)[0].grid
    if spec.n != 2 or grid.dim != 1:
        raise ValueError("Laplace-form check supports two species in one dimension")
    fields = _as_fields(state)
    if hasattr(state, "fields"):
        sol_state = state
    else:
        sol_state = _solver.SolverState(t=0.0, fields=tuple(fields))

    ops = _solver.general_rhs_operators(sol_state, spec)
    u = [f.values for f in fields]
    mu = _pair_rate_mu(spec)
    x = grid.axis_points()
    h = grid.h
    K = kernel.value(x.reshape(-1, 1), x.reshape(1, -1))
    if kernel.translation_invariant:
        dKsum = None
    else:
        dKsum = (
            kernel.partial(0, 0, x.reshape(-1, 1), x.reshape(1, -1))
            + kernel.partial(1, 0, x.reshape(-1, 1), x.reshape(1, -1))
        )

    sq = 0.0
    for i in range(2):
        j = 1 - i
        own = u[i].reshape(-1, 1) if i == 0 else u[i].reshape(1, -1)
        partner = u[j].reshape(1, -1) if i == 0 else u[j].reshape(-1, 1)
        mu_vals = np.asarray(mu[i](own, partner), dtype=np.float64)
        axis = 1 if i == 0 else 0
        mbar = (K * mu_vals).sum(axis=axis) * h
        lap_side = spec.epsilon_viscosity * _lap_reflected(u[i], grid)
        lap_side = lap_side + _lap_reflected(mbar * u[i], grid)
        if dKsum is not None:
            r = (dKsum * mu_vals).sum(axis=axis) * h
            lap_side = lap_side - _div_centred(r * u[i], grid)
        flux_side = (ops[i] @ u[i].ravel()).reshape(grid.shape)
        sq += grid.cell_volume * float(np.sum((flux_side - lap_side) ** 2))
    return math.sqrt(sq)


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def trajectory_csv_text(trajectory) -> str:
    """Deterministic CSV of the diagnostics records (one row per record)."""
    n = len(trajectory.records[0].masses)
    cols = ["t"]
    cols += [f"mass_{i + 1}" for i in range(n)]
    cols += ["entropy", "dissipation"]
    cols += [f"min_{i + 1}" for i in range(n)]
    cols += [f"max_{i + 1}" for i in range(n)]
    cols += ["duality_integrand", "envelope_lower", "envelope_upper"]
    lines = [",".join(cols)]
    for rec in trajectory.records:
        row = [repr(rec.t)]
        row += [repr(m) for m in rec.masses]
        row += [repr(rec.entropy), repr(rec.dissipation)]
        row += [repr(v) for v in rec.mins]
        row += [repr(v) for v in rec.maxs]
        row.append(repr(rec.duality_integrand))
        row.append("" if rec.envelope_lower is None else repr(rec.envelope_lower))
        row.append("" if rec.envelope_upper is None else repr(rec.envelope_upper))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
