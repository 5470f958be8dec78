"""Reversible pair-jump chain, mean-field ODEs, and the discrete entropy identity."""

import numpy as np
import pytest

from crossdiff.entropy import SktCoefficients, make_skt_structure, skt_rates
from crossdiff.grids import Field, TorusGrid, laplacian_periodic
from crossdiff.particles import (
    ErrorTable,
    MeanFieldState,
    ParticleState,
    RateTable,
    convolution_rate_table,
    discrete_entropy_dissipation,
    discrete_laplace_form,
    event_log_csv_text,
    gillespie_run,
    integrate_meanfield,
    load_rate_table_csv,
    make_rate_table,
    meanfield_rhs,
    particle_vs_meanfield,
    sample_counts,
    save_rate_table_csv,
)
from crossdiff.solver import SolverState, SystemSpec, torus_coefficient_fields


def random_table(rng, n=8, low=0.2, high=1.0):
    vals = rng.uniform(low, high, (n, n))
    return make_rate_table(n, lambda i, j: vals[i, j])


# ---------------------------------------------------------------------------
# rate tables
# ---------------------------------------------------------------------------

def test_constant_generator_gives_constant_left_rates():
    t = make_rate_table(5, lambda i, j: 0.7)
    assert np.all(t.rate_right == 0.7)
    assert np.all(t.rate_left == 0.7)


def test_delta_generator_shifts_by_one():
    t = make_rate_table(4, lambda i, j: 1.0 if (i, j) == (0, 0) else 0.0)
    expected_left = np.zeros((4, 4))
    expected_left[1, 1] = 1.0
    assert np.array_equal(t.rate_left, expected_left)


def test_reversibility_identity_exhaustive(rng):
    t = random_table(rng, n=32)
    for i in range(32):
        for j in range(32):
            assert t.rate_right[i, j] == t.rate_left[(i + 1) % 32, (j + 1) % 32]


def test_rate_table_rejects_violation_naming_pair(rng):
    right = rng.uniform(0.1, 1.0, (4, 4))
    left = np.roll(right, (1, 1), axis=(0, 1))
    RateTable(n_sites=4, rate_right=right, rate_left=left)  # consistent
    bad = left.copy()
    bad[2, 3] += 0.5
    with pytest.raises(ValueError, match=r"\(1, 2\)"):
        RateTable(n_sites=4, rate_right=right, rate_left=bad)


def test_rate_table_validation(rng):
    with pytest.raises(ValueError):
        make_rate_table(4, lambda i, j: -1.0)
    with pytest.raises(ValueError):
        make_rate_table(1, lambda i, j: 1.0)
    with pytest.raises(ValueError):
        RateTable(n_sites=4, rate_right=np.ones((3, 3)), rate_left=np.ones((3, 3)))


def test_convolution_table_is_shift_invariant_and_symmetric():
    w = np.array([0.5, 0.3, 0.0, 0.2])
    t = convolution_rate_table(w)
    assert np.array_equal(t.rate_left, t.rate_right)
    for i in range(4):
        for j in range(4):
            assert t.rate_right[i, j] == w[(i - j) % 4]
    with pytest.raises(ValueError):
        convolution_rate_table(np.array([0.5, -0.1]))


def test_scaled_table():
    t = make_rate_table(4, lambda i, j: 1.0 + i + j)
    s = t.scaled(2.0)
    assert np.array_equal(s.rate_right, 2.0 * t.rate_right)
    with pytest.raises(ValueError):
        t.scaled(0.0)


def test_rate_table_csv_roundtrip(tmp_path, rng):
    t = random_table(rng, n=6)
    path = tmp_path / "rates.csv"
    save_rate_table_csv(t, path)
    back = load_rate_table_csv(path)
    assert back.n_sites == 6
    assert np.array_equal(back.rate_right, t.rate_right)
    assert np.array_equal(back.rate_left, t.rate_left)


# ---------------------------------------------------------------------------
# particle states and sampling
# ---------------------------------------------------------------------------

def test_particle_state_validation():
    with pytest.raises(ValueError):
        ParticleState(counts_1=np.array([-1, 2]), counts_2=np.array([1, 1]))
    with pytest.raises(ValueError):
        ParticleState(counts_1=np.array([1, 2]), counts_2=np.array([1, 1, 1]))
    st = ParticleState(counts_1=np.array([3, 2]), counts_2=np.array([0, 4]))
    assert st.total_1 == 5
    assert st.total_2 == 4
    assert st.n_sites == 2


def test_sample_counts_total_and_determinism():
    profile = np.array([0.5, 0.25, 0.25])
    a = sample_counts(profile, 100, np.random.default_rng(3))
    b = sample_counts(profile, 100, np.random.default_rng(3))
    assert a.sum() == 100
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        sample_counts(np.array([0.0, 0.0]), 10, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# Gillespie simulation
# ---------------------------------------------------------------------------

def test_no_partner_species_means_no_events():
    t = make_rate_table(4, lambda i, j: 1.0)
    st = ParticleState(counts_1=np.array([5, 5, 5, 5]), counts_2=np.zeros(4, dtype=int))
    res = gillespie_run(st, t, T=10.0, seed=1)
    assert res.n_events == 0
    assert res.absorbed
    assert np.array_equal(res.final.counts_1, st.counts_1)


def test_gillespie_conserves_masses_along_the_whole_log(rng):
    t = random_table(rng, n=6)
    st = ParticleState(counts_1=sample_counts(np.ones(6), 40, rng),
                       counts_2=sample_counts(np.ones(6), 30, rng))
    res = gillespie_run(st, t, T=2.0, seed=42)
    assert res.n_events > 0
    c1, c2 = st.counts_1.copy(), st.counts_2.copy()
    for kind, i, j in zip(res.kinds, res.sites_i, res.sites_j):
        c1[i] -= 1
        c1[(i + kind) % 6] += 1
        c2[j] -= 1
        c2[(j + kind) % 6] += 1
        assert c1.sum() == 40
        assert c2.sum() == 30
        assert np.all(c1 >= 0)
        assert np.all(c2 >= 0)
    assert np.array_equal(c1, res.final.counts_1)
    assert np.array_equal(c2, res.final.counts_2)


def test_gillespie_reproducible_for_seed(rng):
    t = random_table(rng, n=5)
    st = ParticleState(counts_1=sample_counts(np.ones(5), 25, rng),
                       counts_2=sample_counts(np.ones(5), 25, rng))
    a = gillespie_run(st, t, T=1.0, seed=99)
    b = gillespie_run(st, t, T=1.0, seed=99)
    assert np.array_equal(a.times, b.times)
    assert np.array_equal(a.kinds, b.kinds)
    assert np.array_equal(a.sites_i, b.sites_i)
    assert np.array_equal(a.sites_j, b.sites_j)
    c = gillespie_run(st, t, T=1.0, seed=100)
    assert not (len(c.times) == len(a.times) and np.array_equal(c.times, a.times))


def test_two_site_constant_rates_time_average_is_uniform():
    t = make_rate_table(2, lambda i, j: 1.0)
    st = ParticleState(counts_1=np.array([50, 0]), counts_2=np.array([0, 50]))
    res = gillespie_run(st, t, T=40.0, seed=7)
    assert res.n_events > 1e5
    avg1, avg2 = res.time_avg_density
    # symmetric chain: both species spread to (1/2, 1/2); generous margin
    # over the Monte Carlo fluctuation scale of this seeded run
    assert np.allclose(avg1, 0.5, atol=0.05)
    assert np.allclose(avg2, 0.5, atol=0.05)


def test_event_log_csv():
    t = make_rate_table(3, lambda i, j: 1.0)
    st = ParticleState(counts_1=np.array([3, 0, 0]), counts_2=np.array([3, 0, 0]))
    res = gillespie_run(st, t, T=0.5, seed=5)
    text = event_log_csv_text(res)
    lines = text.strip().splitlines()
    assert lines[0] == "t,type,i,j"
    assert len(lines) == 1 + res.n_events
    if res.n_events:
        cols = lines[1].split(",")
        assert float(cols[0]) == res.times[0]
        assert int(cols[1]) in (-1, 1)


# ---------------------------------------------------------------------------
# mean-field system
# ---------------------------------------------------------------------------

def brute_force_rhs(u1, u2, t):
    n = len(u1)
    f1 = np.zeros(n)
    f2 = np.zeros(n)
    for i in range(n):
        for j in range(n):
            f1[i] += t.rate_right[(i - 1) % n, j] * u1[(i - 1) % n] * u2[j]
            f1[i] += t.rate_left[(i + 1) % n, j] * u1[(i + 1) % n] * u2[j]
            f1[i] -= (t.rate_right[i, j] + t.rate_left[i, j]) * u1[i] * u2[j]
        for k in range(n):
            f2[i] += t.rate_right[k, (i - 1) % n] * u1[k] * u2[(i - 1) % n]
            f2[i] += t.rate_left[k, (i + 1) % n] * u1[k] * u2[(i + 1) % n]
            f2[i] -= (t.rate_right[k, i] + t.rate_left[k, i]) * u1[k] * u2[i]
    return f1, f2


def test_constant_state_constant_rates_is_stationary():
    t = make_rate_table(6, lambda i, j: 0.8)
    f1, f2 = meanfield_rhs((np.full(6, 1.3), np.full(6, 0.4)), t)
    assert np.allclose(f1, 0.0, atol=1e-14)
    assert np.allclose(f2, 0.0, atol=1e-14)


def test_absent_partner_freezes_species_one(rng):
    t = random_table(rng, n=5)
    u1 = rng.uniform(0.1, 1.0, 5)
    f1, f2 = meanfield_rhs((u1, np.zeros(5)), t)
    assert np.all(f1 == 0.0)
    assert np.all(f2 == 0.0)


def test_rhs_matches_brute_force_oracle(rng):
    t = random_table(rng, n=4)
    u1 = rng.uniform(0.1, 2.0, 4)
    u2 = rng.uniform(0.1, 2.0, 4)
    f1, f2 = meanfield_rhs((u1, u2), t)
    b1, b2 = brute_force_rhs(u1, u2, t)
    assert np.allclose(f1, b1, atol=1e-12)
    assert np.allclose(f2, b2, atol=1e-12)


def test_rhs_telescopes_to_zero_mass(rng):
    for _ in range(20):
        t = random_table(rng, n=7)
        u1 = rng.uniform(0.0, 3.0, 7)
        u2 = rng.uniform(0.0, 3.0, 7)
        f1, f2 = meanfield_rhs((u1, u2), t)
        scale = 1.0 + float(np.max(np.abs(f1)) + np.max(np.abs(f2)))
        assert abs(f1.sum()) <= 1e-13 * scale
        assert abs(f2.sum()) <= 1e-13 * scale


def test_rhs_validation(rng):
    t = random_table(rng, n=4)
    with pytest.raises(ValueError):
        meanfield_rhs((np.ones(5), np.ones(5)), t)
    with pytest.raises(ValueError):
        meanfield_rhs((np.array([1.0, -0.1, 1, 1]), np.ones(4)), t)


def test_integrate_meanfield_conserves_mass_and_dissipates_entropy(rng):
    t = random_table(rng, n=8)
    u1 = rng.uniform(0.5, 1.5, 8)
    u2 = rng.uniform(0.5, 1.5, 8)
    state, entropies = integrate_meanfield((u1, u2), t, T=0.5, dt=1e-3,
                                           record_entropy=True)
    assert state.u_1.sum() == pytest.approx(u1.sum(), rel=1e-12)
    assert state.u_2.sum() == pytest.approx(u2.sum(), rel=1e-12)
    tol = 1e-6 * (1.0 + abs(entropies[0]))
    assert all(b <= a + tol for a, b in zip(entropies, entropies[1:]))
    assert state.t == pytest.approx(0.5)


def test_integrate_meanfield_zero_horizon(rng):
    t = random_table(rng, n=4)
    u1 = rng.uniform(0.5, 1.5, 4)
    state = integrate_meanfield((u1, u1), t, T=0.0)
    assert np.array_equal(state.u_1, u1)
    with pytest.raises(ValueError):
        integrate_meanfield((u1, u1), t, T=0.1, dt=0.2)


# ---------------------------------------------------------------------------
# discrete entropy identity
# ---------------------------------------------------------------------------

def test_entropy_routes_vanish_at_uniform_state():
    t = make_rate_table(5, lambda i, j: 1.0)
    H, r1, r2 = discrete_entropy_dissipation((np.ones(5), np.ones(5)), t)
    assert H == pytest.approx(0.0, abs=1e-14)
    assert r1 == pytest.approx(0.0, abs=1e-14)
    assert r2 == pytest.approx(0.0, abs=1e-14)


def test_entropy_routes_agree_on_random_states(rng):
    for _ in range(100):
        t = random_table(rng, n=4)
        u1 = rng.uniform(0.1, 3.0, 4)
        u2 = rng.uniform(0.1, 3.0, 4)
        H, r1, r2 = discrete_entropy_dissipation((u1, u2), t)
        assert abs(r1 - r2) <= 1e-12 * (1.0 + abs(r1))
        assert r2 <= 0.0


def test_route_two_nonpositive_on_many_states(rng):
    t = random_table(rng, n=6)
    for _ in range(1000):
        u1 = rng.uniform(0.05, 5.0, 6)
        u2 = rng.uniform(0.05, 5.0, 6)
        _, _, r2 = discrete_entropy_dissipation((u1, u2), t)
        assert r2 <= 0.0


def test_entropy_requires_positive_densities(rng):
    t = random_table(rng, n=4)
    with pytest.raises(ValueError):
        discrete_entropy_dissipation((np.array([1.0, 0.0, 1, 1]), np.ones(4)), t)


# ---------------------------------------------------------------------------
# Laplace reassembly
# ---------------------------------------------------------------------------

def test_laplace_form_residual_roundoff_for_reversible_tables(rng):
    for _ in range(20):
        t = random_table(rng, n=8)
        u1 = rng.uniform(0.1, 2.0, 8)
        u2 = rng.uniform(0.1, 2.0, 8)
        (g1, g2), residual = discrete_laplace_form((u1, u2), t)
        assert residual <= 1e-12


def test_constant_rates_reduce_to_pure_second_difference(rng):
    t = make_rate_table(6, lambda i, j: 0.9)
    u1 = rng.uniform(0.2, 2.0, 6)
    u2 = rng.uniform(0.2, 2.0, 6)
    (g1, g2), residual = discrete_laplace_form((u1, u2), t)
    s1 = 0.9 * u1 * u2.sum()
    lap1 = np.roll(s1, -1) + np.roll(s1, 1) - 2.0 * s1
    assert np.allclose(g1, lap1, atol=1e-12)
    assert residual <= 1e-12


def test_convolution_table_matches_torus_assembly(rng):
    # the mean-field system of a shift-invariant table is the unit-spacing
    # lattice form of the kernel-smoothed torus system
    n = 16
    w = rng.uniform(0.0, 1.0, n)
    w[5:] = 0.0  # short-range kernel
    table = convolution_rate_table(w)
    u1 = rng.uniform(0.5, 1.5, n)
    u2 = rng.uniform(0.5, 1.5, n)
    f1, f2 = meanfield_rhs((u1, u2), table)

    g = TorusGrid(1, n, length=1.0)
    c = SktCoefficients(d=(0.0, 0.0), d_cross=((0.0, 1.0), (1.0, 0.0)), pi=(1.0, 1.0))
    spec = SystemSpec(n=2, rates=skt_rates(c), structure=make_skt_structure(c),
                      kernel=Field(g, w))
    st = SolverState(t=0.0, fields=(Field(g, u1), Field(g, u2)))
    coeffs = torus_coefficient_fields(st, spec)
    for f, coeff, dens in ((f1, coeffs[0], u1), (f2, coeffs[1], u2)):
        assembled = g.h**2 * laplacian_periodic(Field(g, coeff * dens)).values
        assert np.allclose(f, assembled, atol=1e-12)


# ---------------------------------------------------------------------------
# particle vs mean-field comparison
# ---------------------------------------------------------------------------

def test_errors_shrink_with_more_particles(rng):
    t = random_table(rng, n=8, low=0.3, high=1.0)
    profile = 1.0 + 0.5 * np.cos(2 * np.pi * np.arange(8) / 8)
    table = particle_vs_meanfield(t, profile, profile[::-1].copy(),
                                  k_values=(200, 2000), T=0.5,
                                  seeds=range(6))
    means = table.mean_by_k()
    assert set(means) == {200, 2000}
    assert means[2000] < means[200]
    assert len(table.errors_for(200)) == 6


def test_uniform_profile_leaves_only_sampling_noise():
    t = make_rate_table(2, lambda i, j: 1.0)
    table = particle_vs_meanfield(t, np.ones(2), np.ones(2),
                                  k_values=(500,), T=0.5, seeds=range(4))
    assert all(err < 0.15 for _, _, err in table.rows)


def test_comparison_reproducible():
    t = make_rate_table(4, lambda i, j: 0.5 + 0.1 * ((i + j) % 3))
    args = dict(profile_1=np.array([2.0, 1.0, 1.0, 2.0]),
                profile_2=np.ones(4), k_values=(100, 300), T=0.3,
                seeds=[11, 12])
    a = particle_vs_meanfield(t, **args)
    b = particle_vs_meanfield(t, **args)
    assert a.rows == b.rows


def test_comparison_validation(rng):
    t = random_table(rng, n=4)
    with pytest.raises(ValueError):
        particle_vs_meanfield(t, np.ones(4), np.ones(4), k_values=(100, 100),
                              T=0.1, seeds=[0])
    with pytest.raises(ValueError):
        particle_vs_meanfield(t, np.ones(3), np.ones(4), k_values=(100,),
                              T=0.1, seeds=[0])


def test_error_table_csv():
    table = ErrorTable(rows=[(100, 0, 0.25), (100, 1, 0.3), (200, 0, 0.125)])
    lines = table.csv_text().strip().splitlines()
    assert lines[0] == "K,seed,L1_error"
    assert lines[1] == "100,0,0.25"
    assert table.mean_by_k() == {100: pytest.approx(0.275), 200: pytest.approx(0.125)}
