"""Entropy structures and positivity certificates for cross-diffusion systems.

A system u_t = div(A(u) grad-stack) carries an entropy H(u) = sum_i int h_i(u_i)
precisely when M(v) = diag(h_i''(v_i)) A(v) has positive-semidefinite symmetric
part on the positive orthant.  This module houses the entropy densities h_i,
the rate matrices A, the M-matrix algebra, and sampling-based certificates for
the cone condition and its quantised strengthening

    z . M(v) z  >=  sum_i alpha_i(v_i)^2 z_i^2 .

Everything here is a pure function of its inputs; certificates sample a finite
grid of states and report eigenvalues rather than attempting symbolic proofs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "EntropyDensity",
    "EntropyStructure",
    "DiffusionRates",
    "SktCoefficients",
    "psi",
    "log_entropy",
    "power_entropy",
    "quadratic_entropy",
    "build_M",
    "default_sample_grid",
    "StructureCertificate",
    "certify_structure",
    "make_skt_structure",
    "skt_rates",
    "CompatResult",
    "check_self_diffusion_compat",
    "total_entropy",
]


def _match_scalar(z, out):
    if np.isscalar(z) or getattr(z, "ndim", 1) == 0:
        return float(out)
    return out


def psi(z):
    """psi(z) = z log z - z + 1, continuously extended by psi(0) = 1.

    Nonnegative, strictly convex, vanishing only at z = 1.
    """
    arr = np.asarray(z, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("psi is defined on z >= 0")
    safe = np.where(arr > 0, arr, 1.0)
    out = np.where(arr > 0, arr * np.log(safe) - arr + 1.0, 1.0)
    return _match_scalar(z, out)


@dataclass(frozen=True)
class EntropyDensity:
    """A convex scalar density h with h'' > 0 on the positive axis.

    ``value_at_zero`` stores the continuous extension h(0+); derivatives are
    only ever evaluated at strictly positive arguments.
    """

    value: Callable
    first_derivative: Callable
    second_derivative: Callable
    value_at_zero: float


def log_entropy(weight: float = 1.0) -> EntropyDensity:
    """h(z) = weight * (z log z - z + 1): the Boltzmann-type density."""
    w = float(weight)
    return EntropyDensity(
        value=lambda z: w * psi(z),
        first_derivative=lambda z: w * np.log(z),
        second_derivative=lambda z: w / np.asarray(z, dtype=np.float64),
        value_at_zero=w,
    )


def power_entropy(exponent: float, weight: float = 1.0) -> EntropyDensity:
    """h(z) = weight * (z^b - b z + b - 1) / (b (b - 1)) with h'' = weight z^(b-2).

    The b -> 1 limit is ``log_entropy``; both are normalised so h(1) = 0,
    h'(1) = 0.
    """
    b = float(exponent)
    if b <= 0:
        raise ValueError("exponent must be positive")
    if b == 1.0:
        return log_entropy(weight)
    w = float(weight)

    def value(z):
        arr = np.asarray(z, dtype=np.float64)
        return _match_scalar(z, w * (arr**b - b * arr + b - 1.0) / (b * (b - 1.0)))

    def first(z):
        arr = np.asarray(z, dtype=np.float64)
        return _match_scalar(z, w * (arr ** (b - 1.0) - 1.0) / (b - 1.0))

    def second(z):
        arr = np.asarray(z, dtype=np.float64)
        return _match_scalar(z, w * arr ** (b - 2.0))

    return EntropyDensity(value, first, second, value_at_zero=w / b)


def quadratic_entropy(weight: float = 1.0) -> EntropyDensity:
    """h(z) = weight * (z - 1)^2 / 2, so h'' is the constant weight."""
    w = float(weight)
    return EntropyDensity(
        value=lambda z: w * 0.5 * (np.asarray(z, float) - 1.0) ** 2,
        first_derivative=lambda z: w * (np.asarray(z, float) - 1.0),
        second_derivative=lambda z: w * np.ones_like(np.asarray(z, float)),
        value_at_zero=w * 0.5,
    )


@dataclass(frozen=True)
class EntropyStructure:
    """Species count, entropy densities, and dissipation maps alpha_i.

    ``alt_dissipations`` optionally carries a second candidate family for the
    quantised bound; certificates report both side by side when present.
    """

    n: int
    densities: tuple
    dissipations: tuple
    alt_dissipations: Optional[tuple] = None

    def __post_init__(self):
        if len(self.densities) != self.n or len(self.dissipations) != self.n:
            raise ValueError("densities and dissipations must both have length n")
        if self.alt_dissipations is not None and len(self.alt_dissipations) != self.n:
            raise ValueError("alt_dissipations must have length n")


@dataclass(frozen=True)
class DiffusionRates:
    """Rate matrix A(v) of the system u_t = div(A(u) grad u), entrywise.

    ``a(i, j, v)`` returns A_ij(v).  For Laplace-form systems the split form
    is available: cross multipliers mu[i] (applied to the other species in
    the two-species case) and self multipliers kappa[i], so that species i
    evolves by Delta((mu_i + kappa_i) u_i).  ``skt`` carries the coefficient
    table when the rates come from the SKT family.
    """

    n: int
    a: Callable
    mu: Optional[tuple] = None
    kappa: Optional[tuple] = None
    mu_pair: Optional[tuple] = None  # two-argument cross rates mu_i(own, partner)
    skt: Optional["SktCoefficients"] = None

    def matrix(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        return np.array(
            [[float(self.a(i, j, v)) for j in range(self.n)] for i in range(self.n)]
        )


@dataclass(frozen=True)
class SktCoefficients:
    """Coefficients of the SKT family: u_i evolves by
    Delta((d_i + sum_j d_cross[i,j] u_j) u_i).

    ``d_cross`` includes the self-interaction entries on its diagonal.
    ``pi`` are the entropy weights; detailed balance pi_i d_ij = pi_j d_ji
    (off-diagonal) is what makes the weighted Boltzmann entropy work, and is
    checked by the structure builder rather than at construction.
    """

    d: tuple
    d_cross: np.ndarray
    pi: tuple

    def __post_init__(self):
        d = tuple(float(x) for x in self.d)
        pi = tuple(float(x) for x in self.pi)
        cross = np.asarray(self.d_cross, dtype=np.float64)
        n = len(d)
        if cross.shape != (n, n):
            raise ValueError(f"d_cross must be {n}x{n}, got {cross.shape}")
        if len(pi) != n:
            raise ValueError("pi must have one weight per species")
        if min(d) < 0 or np.min(cross) < 0 or min(pi) < 0:
            raise ValueError("coefficients must be nonnegative")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "pi", pi)
        cross = cross.copy()
        cross.setflags(write=False)
        object.__setattr__(self, "d_cross", cross)

    @property
    def n(self) -> int:
        return len(self.d)

    def balance_offenders(self, rtol: float = 1e-12) -> list:
        """Index pairs (i, j), i < j, where pi_i d_ij != pi_j d_ji."""
        bad = []
        for i in range(self.n):
            for j in range(i + 1, self.n):
                lhs = self.pi[i] * self.d_cross[i, j]
                rhs = self.pi[j] * self.d_cross[j, i]
                if abs(lhs - rhs) > rtol * (1.0 + abs(lhs) + abs(rhs)):
                    bad.append((i, j))
        return bad


def build_M(structure: EntropyStructure, rates: DiffusionRates, v) -> np.ndarray:
    """M(v) = diag(h_1''(v_1), ..., h_n''(v_n)) . A(v), at a strictly positive state."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (structure.n,):
        raise ValueError(f"state must have shape ({structure.n},)")
    if not np.all(v > 0) or not np.all(np.isfinite(v)):
        raise ValueError("state must be strictly positive and finite")
    second = np.array(
        [float(structure.densities[i].second_derivative(v[i])) for i in range(structure.n)]
    )
    return second[:, None] * rates.matrix(v)


def default_sample_grid(n: int, lo: float = 1e-3, hi: float = 1e3, points_per_axis: int = 10) -> np.ndarray:
    """Logarithmic tensor grid of strictly positive states, one row per point."""
    axis = np.logspace(np.log10(lo), np.log10(hi), points_per_axis)
    mesh = np.meshgrid(*([axis] * n), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class StructureCertificate:
    """Sampling certificate for the PSD cone condition and its quantised form.

    ``rows`` holds one tuple per sample: (state, min eig of sym(M),
    min eig of sym(M) - diag(alpha_i^2), same for the alternative dissipation
    family or None, tolerance at that state).
    """

    n: int
    passed_cone: bool
    passed_quantised: bool
    passed_quantised_alt: Optional[bool]
    worst_cone: tuple
    worst_quantised: tuple
    rows: list

    @property
    def passed(self) -> bool:
        return self.passed_cone and self.passed_quantised

    def report_text(self) -> str:
        lines = [
            "entropy structure certificate",
            f"samples: {len(self.rows)}",
            f"cone condition (sym M PSD): {'PASS' if self.passed_cone else 'FAIL'}",
            f"  worst min-eigenvalue {self.worst_cone[1]:.6e} at state {tuple(self.worst_cone[0])}",
            f"quantised bound (sym M - diag(alpha^2) PSD): {'PASS' if self.passed_quantised else 'FAIL'}",
            f"  worst min-eigenvalue {self.worst_quantised[1]:.6e} at state {tuple(self.worst_quantised[0])}",
        ]
        if self.passed_quantised_alt is not None:
            lines.append(
                "quantised bound, alternative dissipation family: "
                + ("PASS" if self.passed_quantised_alt else "FAIL")
            )
            blurb = {
                (True, True): "both dissipation families satisfy the quantised bound on this grid",
                (False, True): "only the alternative (square-root) family satisfies the quantised bound",
                (True, False): "only the stated family satisfies the quantised bound",
                (False, False): "neither dissipation family satisfies the quantised bound",
            }[(self.passed_quantised, self.passed_quantised_alt)]
            lines.append(f"  -> {blurb}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def csv_text(self) -> str:
        cols = [f"v{i+1}" for i in range(self.n)] + ["min_eig_sym", "min_eig_quantised"]
        has_alt = self.passed_quantised_alt is not None
        if has_alt:
            cols.append("min_eig_quantised_alt")
        out = [",".join(cols)]
        for state, eig_a, eig_b, eig_b_alt, _tol in self.rows:
            vals = [repr(float(x)) for x in state] + [repr(float(eig_a)), repr(float(eig_b))]
            if has_alt:
                vals.append(repr(float(eig_b_alt)))
            out.append(",".join(vals))
        return "\n".join(out) + "\n"


def certify_structure(structure: EntropyStructure, rates: DiffusionRates, sample_set=None) -> StructureCertificate:
    """Check sym(M(v)) >= 0 and sym(M(v)) - diag(alpha_i(v_i)^2) >= -tol on samples.

    tol = 1e-10 (1 + max|M|) per sample, absorbing eigensolver roundoff.
    """
    if sample_set is None:
        sample_set = default_sample_grid(structure.n)
    samples = np.atleast_2d(np.asarray(sample_set, dtype=np.float64))
    if samples.size == 0:
        raise ValueError("sample set must be nonempty")
    if samples.shape[1] != structure.n:
        raise ValueError(f"samples must have {structure.n} components")
    if not np.all(samples > 0):
        raise ValueError("samples must be strictly positive")

    has_alt = structure.alt_dissipations is not None
    rows = []
    passed_cone = True
    passed_quant = True
    passed_alt = True if has_alt else None
    worst_cone = (samples[0], np.inf)
    worst_quant = (samples[0], np.inf)

    for v in samples:
        M = build_M(structure, rates, v)
        if not np.all(np.isfinite(M)):
            raise FloatingPointError(f"non-finite M at state {tuple(v)}")
        sym = 0.5 * (M + M.T)
        tol = 1e-10 * (1.0 + float(np.max(np.abs(M))))
        eig_a = float(np.linalg.eigvalsh(sym)[0])
        alpha = np.array([float(structure.dissipations[i](v[i])) for i in range(structure.n)])
        eig_b = float(np.linalg.eigvalsh(sym - np.diag(alpha**2))[0])
        eig_b_alt = None
        if has_alt:
            alpha2 = np.array(
                [float(structure.alt_dissipations[i](v[i])) for i in range(structure.n)]
            )
            eig_b_alt = float(np.linalg.eigvalsh(sym - np.diag(alpha2**2))[0])
            if eig_b_alt < -tol:
                passed_alt = False
        if eig_a < -tol:
            passed_cone = False
        if eig_b < -tol:
            passed_quant = False
        if eig_a < worst_cone[1]:
            worst_cone = (v.copy(), eig_a)
        if eig_b < worst_quant[1]:
            worst_quant = (v.copy(), eig_b)
        rows.append((v.copy(), eig_a, eig_b, eig_b_alt, tol))

    return StructureCertificate(
        n=structure.n,
        passed_cone=passed_cone,
        passed_quantised=passed_quant,
        passed_quantised_alt=passed_alt,
        worst_cone=worst_cone,
        worst_quantised=worst_quant,
        rows=rows,
    )


def make_skt_structure(c: SktCoefficients) -> EntropyStructure:
    """Entropy structure of the SKT family under detailed balance.

    Densities h_i = pi_i psi.  Dissipations are stored as the constants
    pi_i d_ii; the square-root variant sqrt(pi_i d_ii) rides along as the
    alternative family so certificates can report which of the two satisfies
    the quantised bound (the constant form does iff pi_i d_ii <= 2).
    """
    bad = c.balance_offenders()
    if bad:
        i, j = bad[0]
        raise ValueError(
            f"detailed balance violated at species pair ({i + 1}, {j + 1}): "
            f"pi_{i + 1} * d_{i + 1}{j + 1} = {float(c.pi[i] * c.d_cross[i, j])!r} but "
            f"pi_{j + 1} * d_{j + 1}{i + 1} = {float(c.pi[j] * c.d_cross[j, i])!r}"
        )

    def const(val):
        v = float(val)
        return lambda z, _v=v: _v

    densities = tuple(log_entropy(c.pi[i]) for i in range(c.n))
    dissipations = tuple(const(c.pi[i] * c.d_cross[i, i]) for i in range(c.n))
    alt = tuple(const(np.sqrt(c.pi[i] * c.d_cross[i, i])) for i in range(c.n))
    return EntropyStructure(n=c.n, densities=densities, dissipations=dissipations, alt_dissipations=alt)


def skt_rates(c: SktCoefficients) -> DiffusionRates:
    """Rate matrix of the SKT family.

    A_ij(v) is the Jacobian of the Laplace arguments (d_i + sum_k d_ik v_k) v_i:
    diagonal d_i + 2 d_ii v_i + sum_{k != i} d_ik v_k, off-diagonal d_ij v_i.
    The split multiplier form is attached for two-species systems.
    """
    bad = c.balance_offenders()
    if bad:
        i, j = bad[0]
        raise ValueError(
            f"detailed balance violated at species pair ({i + 1}, {j + 1})"
        )
    d = np.array(c.d)
    cross = np.asarray(c.d_cross)
    n = c.n

    def a(i, j, v):
        v = np.asarray(v, dtype=np.float64)
        if i == j:
            off = sum(cross[i, k] * v[k] for k in range(n) if k != i)
            return d[i] + 2.0 * cross[i, i] * v[i] + off
        return cross[i, j] * v[i]

    mu = None
    kappa = None
    if n == 2:
        def mu_1(z, d0=float(d[0]), dc=float(cross[0, 1])):
            return d0 + dc * np.asarray(z, dtype=np.float64)

        def mu_2(z, d0=float(d[1]), dc=float(cross[1, 0])):
            return d0 + dc * np.asarray(z, dtype=np.float64)

        def kap_1(z, ds=float(cross[0, 0])):
            return ds * np.asarray(z, dtype=np.float64)

        def kap_2(z, ds=float(cross[1, 1])):
            return ds * np.asarray(z, dtype=np.float64)

        mu = (mu_1, mu_2)
        kappa = (kap_1, kap_2)

    return DiffusionRates(n=n, a=a, mu=mu, kappa=kappa, skt=c)


@dataclass
class CompatResult:
    """Outcome of the self-diffusion compatibility sweep."""

    passed: bool
    offenders: list  # (a, b, min eigenvalue) triples that failed
    worst: tuple     # (a, b, min eigenvalue) across all samples
    n_samples: int


def check_self_diffusion_compat(h: EntropyDensity, kappa, kappa_prime=None, sample_pairs=None) -> CompatResult:
    """PSD sweep of N(a,b) = diag(h''(a), h''(b)) . [[k(b), a k'(b)], [b k'(a), k(a)]].

    This is the condition under which a self-diffusion rate kappa fits the
    entropy density h without breaking the symmetrised structure.  kappa' is
    taken numerically (central difference) when not supplied.
    """
    if kappa_prime is None:
        def kappa_prime(z):
            step = 1e-6 * (1.0 + abs(float(z)))
            return (float(kappa(z + step)) - float(kappa(z - step))) / (2.0 * step)

    if sample_pairs is None:
        axis = np.logspace(-1, 1, 10)
        sample_pairs = [(a, b) for a in axis for b in axis]

    offenders = []
    worst = (None, None, np.inf)
    count = 0
    for a, b in sample_pairs:
        a = float(a)
        b = float(b)
        if a <= 0 or b <= 0:
            raise ValueError("sample pairs must be strictly positive")
        count += 1
        ha = float(h.second_derivative(a))
        hb = float(h.second_derivative(b))
        N = np.array(
            [
                [ha * float(kappa(b)), ha * a * float(kappa_prime(b))],
                [hb * b * float(kappa_prime(a)), hb * float(kappa(a))],
            ]
        )
        sym = 0.5 * (N + N.T)
        tol = 1e-10 * (1.0 + float(np.max(np.abs(N))))
        eig = float(np.linalg.eigvalsh(sym)[0])
        if eig < worst[2]:
            worst = (a, b, eig)
        if eig < -tol:
            offenders.append((a, b, eig))
    return CompatResult(passed=not offenders, offenders=offenders, worst=worst, n_samples=count)


def total_entropy(structure: EntropyStructure, value_arrays: Sequence[np.ndarray], cell_volume: float) -> float:
    """H = sum_i cell_volume * sum_x h_i(u_i(x)) for nonnegative fields."""
    total = 0.0
    for i in range(structure.n):
        u = np.asarray(value_arrays[i], dtype=np.float64)
        hdens = structure.densities[i]
        if np.any(u < 0):
            raise ValueError("entropy evaluated at a negative state")
        pos = u > 0
        vals = np.empty_like(u)
        vals[pos] = np.asarray(hdens.value(u[pos]), dtype=np.float64)
        vals[~pos] = hdens.value_at_zero
        total += cell_volume * float(np.sum(vals))
    return float(total)
