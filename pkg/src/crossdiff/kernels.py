"""Mollifier families on the torus and multi-argument domain kernels.

Torus mollifiers are nonnegative grid kernels of integral one; shrinking the
width gives weak convergence to the Dirac mass.  Domain kernels K(x_1..x_n)
concentrate near the diagonal (zero when any two arguments are farther apart
than ``diag_radius``) and vanish whenever any argument comes within
``boundary_margin`` of the boundary, which is what rules out boundary terms
in the integrated-by-parts coefficient assembly.

Width conventions:
  * smooth-bump: ``width`` is the support radius, profile (1 - (d/width)^2)^3;
  * gaussian-periodised: sigma = width/5, so >= 99.99% of the mass sits within
    radius ``width`` in 1D and 2D alike;
  * uniform-cap: ``width`` is the window length; uniform over grid offsets in
    [-width/2, width/2) per axis (half-open so an even number of cells tiles
    the window exactly; this shape is one cell short of symmetric).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import numpy as np

from .grids import BoxGrid, Field, Grid, TorusGrid, integrate

__all__ = [
    "TorusMollifier",
    "make_torus_mollifier",
    "unit_delta_kernel",
    "DomainKernel",
    "make_domain_kernel",
    "convolution_domain_kernel",
    "KernelWeights",
    "kernel_weights",
]

MOLLIFIER_SHAPES = ("smooth-bump", "gaussian-periodised", "uniform-cap")


def _signed_offsets(grid: TorusGrid) -> list:
    """Per-axis signed torus offsets of each grid point from the origin, in [-L/2, L/2)."""
    L = grid.length
    pts = grid.axis_points()
    return [((pts + L / 2.0) % L) - L / 2.0 for _ in range(grid.dim)]


@dataclass(frozen=True)
class TorusMollifier:
    """Normalised nonnegative kernel on a torus grid.

    ``field`` stores the density (integrate = 1); ``weights`` is the same
    kernel with the quadrature factor folded in (values sum to 1), which is
    the form ``circular_convolve`` expects.
    """

    width: float
    shape: str
    field: Field

    @property
    def grid(self) -> TorusGrid:
        return self.field.grid

    @property
    def weights(self) -> Field:
        return Field(self.grid, self.field.values * self.grid.cell_volume)


def make_torus_mollifier(grid: TorusGrid, width: float, shape: str = "smooth-bump") -> TorusMollifier:
    """Build a mollifier resolvable on the grid (width >= 2h required)."""
    if not isinstance(grid, TorusGrid):
        raise TypeError("mollifiers live on torus grids")
    width = float(width)
    if width < 2.0 * grid.h:
        raise ValueError(f"width {width} below resolution 2h = {2.0 * grid.h}")
    if shape not in MOLLIFIER_SHAPES:
        raise ValueError(f"unknown shape {shape!r}; choose from {MOLLIFIER_SHAPES}")

    offs = _signed_offsets(grid)
    mesh = np.meshgrid(*offs, indexing="ij") if grid.dim == 2 else [offs[0]]
    if shape == "uniform-cap":
        half = width / 2.0
        vals = np.ones(grid.shape)
        for d in mesh:
            vals = vals * ((d >= -half) & (d < half))
    else:
        r2 = sum(d * d for d in mesh)
        if shape == "smooth-bump":
            s2 = r2 / width**2
            vals = np.where(s2 < 1.0, (1.0 - np.minimum(s2, 1.0)) ** 3, 0.0)
        else:  # gaussian-periodised
            sigma = width / 5.0
            vals = np.exp(-r2 / (2.0 * sigma**2))
    total = float(np.sum(vals))
    if total <= 0:
        raise ValueError("degenerate kernel: no mass on the grid")
    density = vals / (total * grid.cell_volume)
    return TorusMollifier(width=width, shape=shape, field=Field(grid, density))


def unit_delta_kernel(grid: TorusGrid) -> Field:
    """Weights-form identity element for circular convolution."""
    vals = np.zeros(grid.shape)
    vals[(0,) * grid.dim] = 1.0
    return Field(grid, vals)


# ---------------------------------------------------------------------------
# domain kernels
# ---------------------------------------------------------------------------
#
# Product construction: K = C * prod_{i<j} B(|x_i-x_j|^2 / r^2)
#                              * prod_i prod_d cut(x_i^d) ,
# where B(t) = (1-t)^3 on t < 1 (a C^2 even bump, so K is smooth across
# coincident arguments) and cut is a per-coordinate C^4 ramp that is exactly
# 0 within boundary_margin of either end and exactly 1 beyond
# (1 + CUT_RAMP_FACTOR) * margin.  The wide, extra-smooth ramp keeps the
# boundary factor resolvable on coarse grids, which is what makes second-order
# agreement between the flux and Laplace assemblies observable there.

CUT_RAMP_FACTOR = 5.0


def _bump_even(t):
    return np.where(t < 1.0, (1.0 - np.minimum(t, 1.0)) ** 3, 0.0)


def _bump_even_d1(t):
    return np.where(t < 1.0, -3.0 * (1.0 - np.minimum(t, 1.0)) ** 2, 0.0)


def _bump_even_d2(t):
    return np.where(t < 1.0, 6.0 * (1.0 - np.minimum(t, 1.0)), 0.0)


def _smoothstep9(s):
    # C^4 step: derivative proportional to s^4 (1-s)^4.
    s = np.clip(s, 0.0, 1.0)
    return s**5 * (126.0 + s * (-420.0 + s * (540.0 + s * (-315.0 + 70.0 * s))))


def _smoothstep9_d1(s):
    inside = (s > 0.0) & (s < 1.0)
    s = np.clip(s, 0.0, 1.0)
    return np.where(inside, 630.0 * s**4 * (1.0 - s) ** 4, 0.0)


@dataclass(frozen=True)
class DomainKernel:
    """n-argument kernel on a grid's domain.

    Concentrates on the diagonal within ``diag_radius`` and (when
    ``boundary_margin`` > 0) vanishes whenever any argument is within the
    margin of the boundary.  ``translation_invariant`` kernels are built from
    a torus mollifier and evaluated by grid lookup; they have no boundary
    factor and their coefficient correctors vanish identically.
    """

    n: int
    grid: Grid
    diag_radius: float
    boundary_margin: float
    normalisation: float = 1.0
    translation_invariant: bool = False
    source_field: Optional[Field] = None

    # -- scalar building blocks -------------------------------------------
    def _cut(self, coord):
        m = self.boundary_margin
        if m == 0.0:
            return np.ones_like(np.asarray(coord, dtype=np.float64))
        dist = np.minimum(coord, self.grid.length - np.asarray(coord, dtype=np.float64))
        return _smoothstep9((dist - m) / (CUT_RAMP_FACTOR * m))

    def _cut_d1(self, coord):
        m = self.boundary_margin
        coord = np.asarray(coord, dtype=np.float64)
        if m == 0.0:
            return np.zeros_like(coord)
        left = coord <= self.grid.length - coord
        dist = np.where(left, coord, self.grid.length - coord)
        sign = np.where(left, 1.0, -1.0)
        return _smoothstep9_d1((dist - m) / (CUT_RAMP_FACTOR * m)) * sign / (CUT_RAMP_FACTOR * m)

    def _diff(self, a, b):
        """Componentwise difference, minimal-image on periodic grids."""
        d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
        if self.translation_invariant or self.grid.periodic:
            L = self.grid.length
            d = ((d + L / 2.0) % L) - L / 2.0
        return d

    def _components(self, point):
        if self.grid.dim == 1:
            return (np.asarray(point, dtype=np.float64),)
        return tuple(np.asarray(c, dtype=np.float64) for c in point)

    # -- factor values and derivatives ------------------------------------
    def _pair_value(self, pa, pb):
        if self.translation_invariant:
            return self._lookup(pa, pb)
        r2 = sum(self._diff(ca, cb) ** 2 for ca, cb in zip(self._components(pa), self._components(pb)))
        return _bump_even(r2 / self.diag_radius**2)

    def _lookup(self, pa, pb):
        dens = self.source_field.values
        h = self.grid.h
        n = self.grid.n
        idx = []
        for ca, cb in zip(self._components(pa), self._components(pb)):
            k = np.rint((np.asarray(ca, dtype=np.float64) - np.asarray(cb, dtype=np.float64)) / h).astype(int) % n
            idx.append(k)
        return dens[tuple(idx)] if self.grid.dim == 2 else dens[idx[0]]

    def _pair_grad(self, pa, pb, comp):
        """d/d(pa component comp) of the pair bump."""
        r = self.diag_radius
        comps_a = self._components(pa)
        comps_b = self._components(pb)
        deltas = [self._diff(ca, cb) for ca, cb in zip(comps_a, comps_b)]
        t = sum(d * d for d in deltas) / r**2
        return _bump_even_d1(t) * 2.0 * deltas[comp] / r**2

    def _pair_cross_hess(self, pa, pb, comp_a, comp_b):
        """d^2/d(pa comp_a) d(pb comp_b) of the pair bump (note pb enters with -delta)."""
        r = self.diag_radius
        deltas = [self._diff(ca, cb) for ca, cb in zip(self._components(pa), self._components(pb))]
        t = sum(d * d for d in deltas) / r**2
        term = _bump_even_d2(t) * 4.0 * deltas[comp_a] * deltas[comp_b] / r**4
        if comp_a == comp_b:
            term = term + _bump_even_d1(t) * 2.0 / r**2
        return -term

    def _cut_value(self, p):
        comps = self._components(p)
        out = np.ones_like(comps[0])
        for c in comps:
            out = out * self._cut(c)
        return out

    def _cut_grad(self, p, comp):
        comps = self._components(p)
        out = self._cut_d1(comps[comp])
        for d, c in enumerate(comps):
            if d != comp:
                out = out * self._cut(c)
        return out

    # -- public evaluation --------------------------------------------------
    def value(self, *points):
        """K at n points; each point is an array (1D) or a (x, y) pair (2D),
        numpy-broadcastable against the others."""
        if len(points) != self.n:
            raise ValueError(f"kernel takes {self.n} arguments")
        if self.translation_invariant:
            out = self.normalisation * np.ones_like(self._components(points[0])[0])
            for i in range(self.n):
                for j in range(i + 1, self.n):
                    out = out * self._pair_value(points[i], points[j])
            return out
        out = None
        for i in range(self.n):
            for j in range(i + 1, self.n):
                pv = self._pair_value(points[i], points[j])
                out = pv if out is None else out * pv
        for i in range(self.n):
            out = out * self._cut_value(points[i])
        return self.normalisation * out

    def partial(self, arg: int, comp: int, *points):
        """d K / d(points[arg], component comp)."""
        if self.translation_invariant:
            raise NotImplementedError("lookup kernels do not expose analytic derivatives")
        factors = self._factor_table(points)
        total = np.zeros_like(factors[0][1])
        for key, val, grads in factors:
            if arg not in grads:
                continue
            term = grads[arg][comp]
            for key2, val2, _ in factors:
                if key2 != key:
                    term = term * val2
            total = total + term
        return self.normalisation * total

    def partial2(self, arg_a: int, comp_a: int, arg_b: int, comp_b: int, *points):
        """Mixed second derivative across two distinct arguments."""
        if arg_a == arg_b:
            raise ValueError("mixed derivative requires distinct arguments")
        if self.translation_invariant:
            raise NotImplementedError("lookup kernels do not expose analytic derivatives")
        factors = self._factor_table(points)
        total = np.zeros_like(factors[0][1])
        for idx, (key, val, grads) in enumerate(factors):
            # both derivatives on the same (pair) factor
            if arg_a in grads and arg_b in grads:
                i, j = key[1], key[2]
                pa, pb = (points[i], points[j])
                if arg_a == i:
                    hess = self._pair_cross_hess(pa, pb, comp_a, comp_b)
                else:
                    hess = self._pair_cross_hess(pa, pb, comp_b, comp_a)
                term = hess
                for key2, val2, _ in factors:
                    if key2 != key:
                        term = term * val2
                total = total + term
            # derivatives on two different factors
            if arg_a in grads:
                ga = grads[arg_a][comp_a]
                for key2, val2, grads2 in factors:
                    if key2 == key or arg_b not in grads2:
                        continue
                    term = ga * grads2[arg_b][comp_b]
                    for key3, val3, _ in factors:
                        if key3 not in (key, key2):
                            term = term * val3
                    total = total + term
        return self.normalisation * total

    def _factor_table(self, points):
        """List of (key, value, {arg: [grad per component]}) over all factors."""
        dim = self.grid.dim
        table = []
        for i in range(self.n):
            for j in range(i + 1, self.n):
                val = self._pair_value(points[i], points[j])
                grads = {
                    i: [self._pair_grad(points[i], points[j], c) for c in range(dim)],
                    j: [-self._pair_grad(points[i], points[j], c) for c in range(dim)],
                }
                table.append((("pair", i, j), val, grads))
        if self.boundary_margin > 0.0:
            for i in range(self.n):
                val = self._cut_value(points[i])
                grads = {i: [self._cut_grad(points[i], c) for c in range(dim)]}
                table.append((("cut", i, -1), val, grads))
        return table

    def params(self) -> dict:
        return {
            "n": self.n,
            "diag_radius": self.diag_radius,
            "boundary_margin": self.boundary_margin,
            "normalisation": self.normalisation,
            "translation_invariant": self.translation_invariant,
        }


def _grid_point_list(grid: Grid):
    if grid.dim == 1:
        return grid.axis_points()
    xx, yy = grid.coords()
    return (xx.ravel(), yy.ravel())


def _point_slice(points, sl):
    if isinstance(points, tuple):
        return tuple(p[sl] for p in points)
    return points[sl]


def _raw_weight(kernel: DomainKernel, grid: Grid, species: int) -> np.ndarray:
    """(n-1)-fold midpoint quadrature of K over all arguments but ``species``."""
    pts = _grid_point_list(grid)
    m = grid.n**grid.dim
    vol = grid.cell_volume

    def broadcast_point(axis_position):
        # place the point list along a fresh axis for tensor quadrature
        if isinstance(pts, tuple):
            shape = [1] * (kernel.n)
            shape[axis_position] = m
            return tuple(p.reshape(shape) for p in pts)
        shape = [1] * kernel.n
        shape[axis_position] = m
        return pts.reshape(shape)

    if kernel.n == 2 and m > 2048:
        # chunk the kept axis so the pair tensor stays small
        other_axis = 1 if species == 0 else 0
        other = broadcast_point(other_axis)
        kept_shape = (-1, 1) if species == 0 else (1, -1)
        w = np.empty(m)
        step = 512
        for start in range(0, m, step):
            sl = slice(start, start + step)
            kept = _point_slice(pts, sl)
            if isinstance(kept, tuple):
                kept = tuple(p.reshape(kept_shape) for p in kept)
            else:
                kept = kept.reshape(kept_shape)
            args = [kept, other] if species == 0 else [other, kept]
            w[sl] = kernel.value(*args).sum(axis=other_axis) * vol
        return w.reshape(grid.shape)

    args = [broadcast_point(i) for i in range(kernel.n)]
    vals = kernel.value(*args)
    sum_axes = tuple(ax for ax in range(kernel.n) if ax != species)
    w = vals.sum(axis=sum_axes) * vol ** (kernel.n - 1)
    return w.reshape(grid.shape)


def make_domain_kernel(grid: Grid, n: int, diag_radius: float, boundary_margin: float) -> DomainKernel:
    """Product-bump kernel, normalised so the largest interior weight is 1.

    Requires diag_radius >= 2h and margin >= h (resolvable), margin <= L/4
    (so the cutoff saturates before the domain midpoint and K stays C^2).
    """
    if n < 2:
        raise ValueError("need at least two species")
    if grid.dim == 1 and n > 3 or grid.dim == 2 and n > 2:
        raise ValueError("quadrature cost gates kernels to n <= 3 in 1D, n = 2 in 2D")
    diag_radius = float(diag_radius)
    boundary_margin = float(boundary_margin)
    if diag_radius < 2.0 * grid.h:
        raise ValueError(f"diag_radius {diag_radius} below resolution 2h = {2.0 * grid.h}")
    if boundary_margin > 0.0 and boundary_margin < grid.h:
        raise ValueError(f"boundary_margin {boundary_margin} below cell size {grid.h}")
    if boundary_margin > grid.length / 4.0:
        raise ValueError("boundary_margin must not exceed a quarter of the domain side")

    raw = DomainKernel(
        n=n,
        grid=grid,
        diag_radius=diag_radius,
        boundary_margin=boundary_margin,
        normalisation=1.0,
    )
    peak = 0.0
    for i in range(n):
        peak = max(peak, float(np.max(_raw_weight(raw, grid, i))))
    if peak <= 0.0:
        raise ValueError("kernel has no interior mass; enlarge diag_radius or shrink margin")
    return DomainKernel(
        n=n,
        grid=grid,
        diag_radius=diag_radius,
        boundary_margin=boundary_margin,
        normalisation=1.0 / peak,
    )


def convolution_domain_kernel(moll: TorusMollifier, n: int = 2) -> DomainKernel:
    """Torus wrapper K(x_1..x_n) built from pairwise mollifier lookups.

    For n = 2 this is K(x, y) = rho(x - y) sampled on the grid; coefficient
    correctors vanish identically for such kernels.
    """
    return DomainKernel(
        n=n,
        grid=moll.grid,
        diag_radius=moll.width,
        boundary_margin=0.0,
        normalisation=1.0,
        translation_invariant=True,
        source_field=moll.field,
    )


@dataclass(frozen=True)
class KernelWeights:
    """Per-species weight fields w_i(x) = integral of K over the other arguments.

    ``interior_masks`` marks where w_i >= 1 - 1e-6; ``sup_interior_gap`` is
    sup |1 - w_i| over that region (the kernel normalisation makes the region
    approximate rather than exactly weight-one).
    """

    fields: tuple
    interior_masks: tuple
    sup_interior_gap: float


def kernel_weights(kernel: DomainKernel, grid: Grid = None) -> KernelWeights:
    grid = grid or kernel.grid
    fields = []
    masks = []
    gap = 0.0
    for i in range(kernel.n):
        w = _raw_weight(kernel, grid, i)
        mask = w >= 1.0 - 1e-6
        if np.any(mask):
            gap = max(gap, float(np.max(np.abs(1.0 - w[mask]))))
        fields.append(Field(grid, w))
        masks.append(mask)
    return KernelWeights(fields=tuple(fields), interior_masks=tuple(masks), sup_interior_gap=gap)
