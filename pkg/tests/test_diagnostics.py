"""Entropy/dissipation accounting, envelopes, duality, convergence studies."""

import copy
import math

import numpy as np
import pytest
from scipy.integrate import quad

from crossdiff.entropy import SktCoefficients, make_skt_structure, psi, skt_rates
from crossdiff.grids import BoxGrid, Field, TorusGrid, reflect_kernel
from crossdiff.kernels import DomainKernel, convolution_domain_kernel, make_domain_kernel, make_torus_mollifier
from crossdiff.solver import SolverState, SystemSpec, TrajectoryRecord, run
from crossdiff.diagnostics import (
    check_entropy_inequality,
    convergence_study,
    duality_functional,
    entropy_and_dissipation,
    kolmogorov_duality,
    l1_qt_distance,
    l2_final_distance,
    laplace_form_consistency,
    max_principle_envelope,
    trajectory_csv_text,
)

from conftest import build_system, cosine_pair


def torus_spec(grid=None, d=(0.1, 0.1), cross=((0.0, 1.0), (1.0, 0.0)),
               pi=(1.0, 1.0), width=0.2, **kw):
    _, structure, rates = build_system(d, cross, pi)
    kernel = None if grid is None else make_torus_mollifier(grid, width, "smooth-bump")
    return SystemSpec(n=2, rates=rates, structure=structure, kernel=kernel, **kw)


# ---------------------------------------------------------------------------
# entropy and dissipation
# ---------------------------------------------------------------------------

def test_uniform_state_has_zero_entropy_and_dissipation():
    g = TorusGrid(1, 32)
    spec = torus_spec()
    st = SolverState(t=0.0, fields=(g.constant(1.0), g.constant(1.0)))
    H, D = entropy_and_dissipation(st, spec)
    assert H == pytest.approx(0.0, abs=1e-14)
    assert D == pytest.approx(0.0, abs=1e-14)


def test_entropy_matches_quadrature_oracle():
    g = TorusGrid(1, 64)
    spec = torus_spec()
    x = g.axis_points()
    u1 = Field(g, 1.0 + 0.5 * np.cos(2 * np.pi * x))
    st = SolverState(t=0.0, fields=(u1, g.constant(1.0)))
    H, _ = entropy_and_dissipation(st, spec)
    oracle, err = quad(lambda y: psi(1.0 + 0.5 * math.cos(2 * math.pi * y)), 0.0, 1.0)
    assert err < 1e-9
    assert H == pytest.approx(oracle, abs=1e-6)


def test_doubling_density_weights_doubles_entropy():
    g = TorusGrid(1, 64)
    u1, u2 = cosine_pair(g)
    st = SolverState(t=0.0, fields=(u1, u2))
    H1, _ = entropy_and_dissipation(st, torus_spec(pi=(1.0, 1.0)))
    H2, _ = entropy_and_dissipation(st, torus_spec(pi=(2.0, 2.0)))
    assert H2 == pytest.approx(2.0 * H1, rel=1e-14)


def test_dissipation_nonnegative_and_positive_with_self_diffusion(rng):
    g = TorusGrid(1, 64)
    with_self = torus_spec(d=(0.1, 0.1), cross=((0.5, 1.0), (1.0, 0.5)))
    for _ in range(20):
        st = SolverState(t=0.0, fields=(Field(g, rng.uniform(0.2, 2.0, 64)),
                                        Field(g, rng.uniform(0.2, 2.0, 64))))
        _, D = entropy_and_dissipation(st, with_self)
        assert D > 0.0
    no_self = torus_spec(cross=((0.0, 1.0), (1.0, 0.0)))
    u1, u2 = cosine_pair(g)
    _, D = entropy_and_dissipation(SolverState(t=0.0, fields=(u1, u2)), no_self)
    assert D >= 0.0


def test_entropy_requires_positive_state():
    g = TorusGrid(1, 16)
    spec = torus_spec()
    st = SolverState(t=0.0, fields=(g.zeros(), g.constant(1.0)))
    with pytest.raises(ValueError):
        entropy_and_dissipation(st, spec)


def test_general_domain_dissipation_includes_viscosity_term():
    g = BoxGrid(1, 32, length=1.0)
    K = make_domain_kernel(g, 2, diag_radius=0.2, boundary_margin=0.05)
    _, structure, rates = build_system((0.05, 0.05), ((0.0, 0.5), (0.5, 0.0)), (1.0, 1.0))
    spec = SystemSpec(n=2, rates=rates, structure=structure, kernel=K,
                      epsilon_viscosity=1e-2, boundary="neumann")
    x = g.axis_points()
    st = SolverState(t=0.0, fields=(Field(g, 1.0 + 0.3 * np.cos(np.pi * x)),
                                    Field(g, 1.0 - 0.3 * np.cos(np.pi * x))))
    _, D = entropy_and_dissipation(st, spec)
    assert D > 0.0  # eps h'' |grad u|^2 alone is positive for nonconstant data


# ---------------------------------------------------------------------------
# entropy inequality over a trajectory
# ---------------------------------------------------------------------------

def _short_run(n=64, T=0.05, dt=1e-3, cadence=5):
    # self-diffusion switched on so the dissipation functional is nonzero
    g = TorusGrid(1, n)
    spec = torus_spec(g, cross=((0.5, 1.0), (1.0, 0.5)))
    u1, u2 = cosine_pair(g)
    return run(spec, [u1, u2], T=T, dt=dt, cadence=cadence)


def test_constant_trajectory_passes_with_equality():
    g = TorusGrid(1, 32)
    spec = torus_spec(g)
    traj = run(spec, [g.constant(1.0), g.constant(1.0)], T=0.01, dt=1e-3)
    check = check_entropy_inequality(traj)
    assert check.passed
    assert check.worst_margin == 0.0


def test_dissipative_run_passes_strictly():
    traj = _short_run()
    check = check_entropy_inequality(traj)
    assert check.passed
    assert check.tolerance_per_step == pytest.approx(
        1e-8 * (1.0 + abs(traj.records[0].entropy)))
    entropies = [r.entropy for r in traj.records]
    assert all(b <= a + check.tolerance_per_step for a, b in zip(entropies, entropies[1:]))


def test_negated_dissipation_is_flagged():
    traj = _short_run()
    bad = copy.deepcopy(traj)
    for rec in bad.records[1:]:
        rec.dissipation = -rec.dissipation
    assert check_entropy_inequality(traj).passed
    assert not check_entropy_inequality(bad).passed


def test_inflated_entropy_is_flagged_with_margin():
    traj = _short_run()
    bad = copy.deepcopy(traj)
    bad.records[-1].entropy = bad.records[0].entropy + 1.0
    check = check_entropy_inequality(bad)
    assert not check.passed
    assert check.worst_margin > 0.0
    assert check.worst_time == pytest.approx(bad.records[-1].t)


# ---------------------------------------------------------------------------
# maximum-principle envelope
# ---------------------------------------------------------------------------

def test_envelope_trivial_exponent():
    lo, hi = max_principle_envelope(0.5, 3.0, 2.0, 1.0, 0.0)
    assert lo == pytest.approx(0.5)
    assert hi == pytest.approx(2.0)


def test_envelope_unit_parameters():
    lo, hi = max_principle_envelope(1.0, 1.0, 1.0, 0.0, 1.0)
    assert lo == pytest.approx(math.exp(-1.0))
    assert hi == pytest.approx(math.exp(1.0))


@pytest.mark.parametrize("arg_index", [1, 2, 3, 4])
def test_envelope_widens_monotonically(arg_index):
    base = [0.5, 1.0, 1.0, 1.0, 1.0]
    bigger = list(base)
    bigger[arg_index] *= 2.0
    lo0, hi0 = max_principle_envelope(*base)
    lo1, hi1 = max_principle_envelope(*bigger)
    assert lo1 < lo0
    assert hi1 > hi0


def test_envelope_validation():
    with pytest.raises(ValueError):
        max_principle_envelope(0.0, 1.0, 1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        max_principle_envelope(1.5, 1.0, 1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        max_principle_envelope(0.5, -1.0, 1.0, 0.0, 1.0)


def test_run_stays_within_envelope():
    traj = _short_run(n=32, T=0.05, dt=1e-3, cadence=10)
    for rec in traj.records:
        assert rec.envelope_lower is not None
        assert rec.envelope_upper is not None
        assert rec.flags["within_envelope"]
        assert rec.flags["positive"]
        assert rec.flags["finite"]
        assert rec.flags["duality_defined"]


# ---------------------------------------------------------------------------
# duality functional
# ---------------------------------------------------------------------------

def test_duality_constant_fields_closed_form():
    # mu_i = 1, u_i = 1 on the unit torus for T = 1: the integrand is
    # (1*1 + 1*1)*(1+1) = 4 at every recorded time
    g = TorusGrid(1, 32)
    spec = torus_spec(d=(1.0, 1.0), cross=((0.0, 0.0), (0.0, 0.0)))
    traj = run(spec, [g.constant(1.0), g.constant(1.0)], T=1.0, dt=0.25, cadence=1)
    rep = duality_functional(traj)
    assert rep.lhs == pytest.approx(4.0, abs=1e-12)
    assert rep.rhs_bound > 0.0
    assert rep.ratio == pytest.approx(4.0 / rep.rhs_bound)


def test_duality_zero_duration_is_zero():
    g = TorusGrid(1, 32)
    spec = torus_spec(g)
    u1, u2 = cosine_pair(g)
    traj = TrajectoryRecord(spec=spec, dt=1e-3, horizon=0.0, gamma=0.7,
                            times=[0.0], snapshots=[(u1, u2)], records=[],
                            step_entropies=[])
    assert duality_functional(traj).lhs == 0.0


def test_duality_invariant_under_species_relabelling(rng):
    g = TorusGrid(1, 32)
    w_vals = rng.uniform(0.0, 1.0, 32)
    w_vals /= w_vals.sum()
    w = Field(g, w_vals)  # deliberately asymmetric kernel
    d, cross = (0.1, 0.2), ((0.0, 0.8), (1.2, 0.0))
    pi = (1.2, 0.8)  # detailed balance: 1.2*0.8 = 0.8*1.2
    _, s_a, r_a = build_system(d, cross, pi)
    spec_a = SystemSpec(n=2, rates=r_a, structure=s_a, kernel=w)
    d_sw, cross_sw = (0.2, 0.1), ((0.0, 1.2), (0.8, 0.0))
    _, s_b, r_b = build_system(d_sw, cross_sw, (0.8, 1.2))
    spec_b = SystemSpec(n=2, rates=r_b, structure=s_b, kernel=reflect_kernel(w))
    u1, u2 = cosine_pair(g)
    traj_a = run(spec_a, [u1, u2], T=0.02, dt=1e-3, cadence=2)
    traj_b = run(spec_b, [u2, u1], T=0.02, dt=1e-3, cadence=2)
    rep_a = duality_functional(traj_a)
    rep_b = duality_functional(traj_b)
    assert rep_a.lhs == pytest.approx(rep_b.lhs, rel=1e-12)
    assert rep_a.rhs_bound == pytest.approx(rep_b.rhs_bound, rel=1e-12)


def test_duality_requires_two_species_split_rates():
    g = TorusGrid(1, 16)
    coeffs = SktCoefficients(d=(0.1,), d_cross=((0.2,),), pi=(1.0,))
    solo = SystemSpec(n=1, rates=skt_rates(coeffs), structure=make_skt_structure(coeffs))
    traj = run(solo, [g.constant(1.0)], T=0.01, dt=1e-3)
    with pytest.raises(ValueError):
        duality_functional(traj)


def test_duality_ratio_stable_under_refinement():
    ratios = []
    for n in (32, 64, 128):
        g = TorusGrid(1, n)
        spec = torus_spec(g)
        u1, u2 = cosine_pair(g)
        traj = run(spec, [u1, u2], T=0.2, dt=2e-3, cadence=5)
        ratios.append(duality_functional(traj).ratio)
    r = np.array(ratios)
    assert (r.max() - r.min()) / r.mean() < 0.5


# ---------------------------------------------------------------------------
# Kolmogorov duality
# ---------------------------------------------------------------------------

def test_kolmogorov_duality_ratio_stable():
    ratios = []
    for n in (32, 64, 128):
        g = TorusGrid(1, n)
        x = g.axis_points()
        mu = Field(g, 1.0 + 0.5 * np.cos(2 * np.pi * x))
        z0 = Field(g, 1.0 + 0.5 * np.cos(4 * np.pi * x))
        rep = kolmogorov_duality(z0, mu, T=0.5, dt=5e-3)
        assert rep.lhs > 0.0
        assert rep.rhs_bound > 0.0
        ratios.append(rep.ratio)
    r = np.array(ratios)
    assert (r.max() - r.min()) / r.mean() < 0.2


def test_kolmogorov_duality_validation():
    g = TorusGrid(1, 16)
    with pytest.raises(ValueError):
        kolmogorov_duality(g.constant(1.0), g.constant(1.0), T=1.0, dt=0.0)
    with pytest.raises(ValueError):
        kolmogorov_duality(g.constant(1.0), g.constant(1.0), T=0.1, dt=1.0)


# ---------------------------------------------------------------------------
# trajectory distances
# ---------------------------------------------------------------------------

def _manual_traj(grid, times, per_time_values):
    snaps = [tuple(Field(grid, np.asarray(v, dtype=float)) for v in vals)
             for vals in per_time_values]
    return TrajectoryRecord(spec=None, dt=times[1] - times[0] if len(times) > 1 else 1.0,
                            horizon=times[-1], gamma=1.0, times=list(times),
                            snapshots=snaps, records=[], step_entropies=[])


def test_distances_of_identical_trajectories_vanish():
    traj = _short_run(n=32)
    assert l1_qt_distance(traj, traj) == 0.0
    assert l2_final_distance(traj, traj) == 0.0


def test_distances_hand_oracle():
    g = TorusGrid(1, 4)  # h = 0.25
    a = _manual_traj(g, [0.0, 0.5, 1.0],
                     [([0, 0, 0, 0],), ([1, 1, 1, 1],), ([2, 2, 2, 2],)])
    b = _manual_traj(g, [0.0, 0.5, 1.0],
                     [([0, 0, 0, 0],), ([0, 0, 0, 0],), ([0, 0, 0, 0],)])
    # L1: 0.5*0.25*(4*1) + 0.5*0.25*(4*2) = 0.5 + 1.0
    assert l1_qt_distance(a, b) == pytest.approx(1.5)
    # L2 at T: sqrt(0.25 * 4 * 2^2) = 2
    assert l2_final_distance(a, b) == pytest.approx(2.0)


def test_distances_require_matching_times():
    g = TorusGrid(1, 4)
    a = _manual_traj(g, [0.0, 1.0], [([0] * 4,), ([1] * 4,)])
    b = _manual_traj(g, [0.0, 0.5], [([0] * 4,), ([1] * 4,)])
    with pytest.raises(ValueError):
        l1_qt_distance(a, b)


# ---------------------------------------------------------------------------
# convergence study
# ---------------------------------------------------------------------------

def test_study_with_delta_kernel_last_hits_reference():
    g = TorusGrid(1, 32)
    spec = torus_spec()
    u1, u2 = cosine_pair(g)
    report = convergence_study(spec, [0.4, 0.2, 0.0], [u1, u2], T=0.05, dt=2e-3)
    assert len(report.rows) == 3
    assert report.rows[-1][0] == 0.0
    assert report.rows[-1][1] <= 1e-10
    assert report.rows[-1][2] <= 1e-10
    assert report.monotone


def test_study_is_deterministic():
    g = TorusGrid(1, 32)
    spec = torus_spec()
    u1, u2 = cosine_pair(g)
    r1 = convergence_study(spec, [0.4, 0.2], [u1, u2], T=0.02, dt=2e-3)
    r2 = convergence_study(spec, [0.4, 0.2], [u1, u2], T=0.02, dt=2e-3)
    assert r1.rows == r2.rows


def test_study_validates_widths():
    g = TorusGrid(1, 32)
    spec = torus_spec()
    u1, u2 = cosine_pair(g)
    with pytest.raises(ValueError):
        convergence_study(spec, [0.2, 0.2], [u1, u2], T=0.01)
    with pytest.raises(ValueError):
        convergence_study(spec, [0.2, 0.4], [u1, u2], T=0.01)
    with pytest.raises(ValueError):
        convergence_study(spec, [0.2, 0.01], [u1, u2], T=0.01)  # below 2h


def test_report_text_outputs():
    g = TorusGrid(1, 32)
    spec = torus_spec()
    u1, u2 = cosine_pair(g)
    report = convergence_study(spec, [0.4, 0.2], [u1, u2], T=0.02, dt=2e-3)
    csv = report.csv_text()
    lines = csv.strip().splitlines()
    assert lines[0] == "width,L1_QT,L2_final"
    assert len(lines) == 3
    w, l1, l2 = lines[1].split(",")
    assert float(w) == 0.4
    assert float(l1) == report.rows[0][1]
    assert "monotone" in report.verdict_text()
    assert "convergence.csv" in report.gnuplot_script("convergence.csv")


# ---------------------------------------------------------------------------
# Laplace-form consistency
# ---------------------------------------------------------------------------

def _box_state(n):
    g = BoxGrid(1, n, length=1.0)
    x = g.axis_points()
    return g, SolverState(t=0.0, fields=(Field(g, 1.0 + 0.3 * np.cos(np.pi * x)),
                                         Field(g, 1.0 - 0.3 * np.cos(np.pi * x))))


def _box_spec(g, normalisation=None):
    if normalisation is None:
        K = make_domain_kernel(g, 2, diag_radius=0.3, boundary_margin=0.05)
    else:
        K = DomainKernel(n=2, grid=g, diag_radius=0.3, boundary_margin=0.05,
                         normalisation=normalisation)
    _, structure, rates = build_system((0.05, 0.05), ((0.05, 0.5), (0.5, 0.05)), (1.0, 1.0))
    return SystemSpec(n=2, rates=rates, structure=structure, kernel=K,
                      epsilon_viscosity=1e-2, boundary="neumann")


def test_laplace_consistency_convolution_kernel_exact():
    g = TorusGrid(1, 32)
    moll = make_torus_mollifier(g, 0.2, "smooth-bump")
    _, structure, rates = build_system((0.1, 0.1), ((0.2, 1.0), (1.0, 0.2)), (1.0, 1.0))
    spec = SystemSpec(n=2, rates=rates, structure=structure,
                      kernel=convolution_domain_kernel(moll, 2), epsilon_viscosity=1e-2)
    u1, u2 = cosine_pair(g)
    st = SolverState(t=0.0, fields=(u1, u2))
    assert laplace_form_consistency(st, spec) <= 1e-10


def test_laplace_consistency_zero_kernel():
    g, st = _box_state(32)
    spec = _box_spec(g, normalisation=0.0)
    assert laplace_form_consistency(st, spec) == pytest.approx(0.0, abs=1e-13)


def test_laplace_consistency_second_order_refinement():
    residuals = {}
    for n in (32, 64):
        g, st = _box_state(n)
        residuals[n] = laplace_form_consistency(st, _box_spec(g))
    ratio = residuals[32] / residuals[64]
    assert 3.0 <= ratio <= 5.0


def test_laplace_consistency_validation():
    g = TorusGrid(1, 16)
    spec = torus_spec(g)
    u1, u2 = cosine_pair(g)
    st = SolverState(t=0.0, fields=(u1, u2))
    with pytest.raises(ValueError):
        laplace_form_consistency(st, spec)  # mollifier, not a domain kernel


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def test_trajectory_csv_layout():
    traj = _short_run(n=32, T=0.01, dt=1e-3, cadence=5)
    text = trajectory_csv_text(traj)
    lines = text.strip().splitlines()
    header = lines[0].split(",")
    assert header == ["t", "mass_1", "mass_2", "entropy", "dissipation",
                      "min_1", "min_2", "max_1", "max_2",
                      "duality_integrand", "envelope_lower", "envelope_upper"]
    assert len(lines) == 1 + len(traj.records)
    first = lines[1].split(",")
    assert float(first[0]) == 0.0
    assert float(first[1]) == pytest.approx(traj.records[0].masses[0])
    # repr round-trips exactly
    assert float(first[3]) == traj.records[0].entropy
