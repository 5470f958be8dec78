"""Uniform periodic (torus) and boxed grids with conservative discrete operators.

Torus grids are vertex-centred (x_k = k h, k = 0..N-1, periodic); box grids
are cell-centred (x_k = (k + 1/2) h) for zero-flux boundaries.  All operators
that move mass are written in flux form so their output telescopes to zero
integral exactly.

Convolution semantics: ``circular_convolve(f, k)`` is the plain circular sum
sum_j f[m-j] k[j]; kernels are passed in *weights* form, i.e. the quadrature
factor h^dim is already folded into the kernel values so a normalised kernel
sums to 1 and the unit discrete delta is the identity element.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .backends import circular_convolve_values

__all__ = [
    "TorusGrid",
    "BoxGrid",
    "Field",
    "integrate",
    "laplacian_periodic",
    "flux_divergence",
    "circular_convolve",
    "reflect_kernel",
    "save_field_csv",
    "load_field_csv",
    "save_field_raw",
    "load_field_raw",
]


@dataclass(frozen=True)
class TorusGrid:
    """Periodic uniform grid on [0, L)^dim with N points per axis."""

    dim: int
    n: int
    length: float = 1.0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        if self.n < 4:
            raise ValueError("need at least 4 points per axis")
        if not self.length > 0:
            raise ValueError("period must be positive")

    @property
    def h(self) -> float:
        return self.length / self.n

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @property
    def periodic(self) -> bool:
        return True

    def axis_points(self) -> np.ndarray:
        return np.arange(self.n) * self.h

    def coords(self) -> tuple:
        axes = [self.axis_points()] * self.dim
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def field(self, values) -> "Field":
        return Field(self, np.asarray(values, dtype=np.float64))

    def zeros(self) -> "Field":
        return Field(self, np.zeros(self.shape))

    def constant(self, c: float) -> "Field":
        return Field(self, np.full(self.shape, float(c)))

    def from_function(self, fn) -> "Field":
        return Field(self, np.asarray(fn(*self.coords()), dtype=np.float64))


@dataclass(frozen=True)
class BoxGrid:
    """Cell-centred uniform grid on (0, L)^dim with N cells per axis.

    Centres sit at (k + 1/2) h; interior faces at k h, k = 1..N-1.  Used with
    zero-flux (reflecting) boundaries.
    """

    dim: int
    n: int
    length: float = 1.0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        if self.n < 4:
            raise ValueError("need at least 4 cells per axis")
        if not self.length > 0:
            raise ValueError("side length must be positive")

    @property
    def h(self) -> float:
        return self.length / self.n

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @property
    def periodic(self) -> bool:
        return False

    def axis_points(self) -> np.ndarray:
        return (np.arange(self.n) + 0.5) * self.h

    def interior_face_points(self) -> np.ndarray:
        return np.arange(1, self.n) * self.h

    def coords(self) -> tuple:
        axes = [self.axis_points()] * self.dim
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def field(self, values) -> "Field":
        return Field(self, np.asarray(values, dtype=np.float64))

    def zeros(self) -> "Field":
        return Field(self, np.zeros(self.shape))

    def constant(self, c: float) -> "Field":
        return Field(self, np.full(self.shape, float(c)))

    def from_function(self, fn) -> "Field":
        return Field(self, np.asarray(fn(*self.coords()), dtype=np.float64))


Grid = Union[TorusGrid, BoxGrid]


@dataclass(frozen=True)
class Field:
    """Values attached to a grid.  Treated as immutable by all operations."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.grid.shape:
            raise ValueError(f"values shape {values.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "values", values)

    def copy(self) -> "Field":
        return Field(self.grid, self.values.copy())


def _same_grid(*fields: Field) -> Grid:
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise ValueError("fields live on different grids")
    return grid


def integrate(f: Field) -> float:
    """h^dim times the sum of values (midpoint/rectangle rule)."""
    return f.grid.cell_volume * float(np.sum(f.values))


def _face_flux_divergence(grid: TorusGrid, pairs) -> np.ndarray:
    """div(sum_j c_j grad g_j) with arithmetic-mean face coefficients, periodic."""
    h = grid.h
    out = np.zeros(grid.shape)
    for c, g in pairs:
        for axis in range(grid.dim):
            c_face = 0.5 * (c + np.roll(c, -1, axis=axis))
            grad_face = (np.roll(g, -1, axis=axis) - g) / h
            flux = c_face * grad_face
            out += (flux - np.roll(flux, 1, axis=axis)) / h
    return out


def laplacian_periodic(f: Field) -> Field:
    """Centred discrete Laplacian with periodic wraparound (flux form)."""
    grid = f.grid
    if not grid.periodic:
        raise ValueError("laplacian_periodic requires a torus grid")
    ones = np.ones(grid.shape)
    return Field(grid, _face_flux_divergence(grid, [(ones, f.values)]))


def flux_divergence(coeff_fields: Sequence[Field], grad_targets: Sequence[Field]) -> Field:
    """Conservative div(sum_j c_j grad g_j) on the torus.

    Coefficients are averaged to faces (arithmetic mean), gradients are
    two-point differences; with c = 1 this reproduces laplacian_periodic
    bit for bit.
    """
    if len(coeff_fields) != len(grad_targets):
        raise ValueError("need one coefficient field per gradient target")
    if not coeff_fields:
        raise ValueError("need at least one coefficient/target pair")
    grid = _same_grid(*coeff_fields, *grad_targets)
    if not grid.periodic:
        raise ValueError("flux_divergence requires a torus grid")
    pairs = [(c.values, g.values) for c, g in zip(coeff_fields, grad_targets)]
    return Field(grid, _face_flux_divergence(grid, pairs))


def _kernel_values(k, grid: Grid) -> np.ndarray:
    if isinstance(k, Field):
        if k.grid != grid:
            raise ValueError("fields live on different grids")
        return k.values
    arr = np.asarray(k, dtype=np.float64)
    if arr.shape != grid.shape:
        raise ValueError(f"kernel shape {arr.shape} does not match grid {grid.shape}")
    return arr


def circular_convolve(f: Field, k) -> Field:
    """(f * k)[m] = sum_j f[m-j] k[j], periodic indices; k in weights form."""
    grid = f.grid
    if not grid.periodic:
        raise ValueError("circular convolution requires a torus grid")
    kv = _kernel_values(k, grid)
    return Field(grid, circular_convolve_values(f.values, kv))


def reflect_kernel(k: Field) -> Field:
    """k-check[m] = k[-m mod N] per axis; an involution."""
    grid = k.grid
    if not grid.periodic:
        raise ValueError("kernel reflection requires a torus grid")
    v = k.values
    for axis in range(grid.dim):
        v = np.roll(np.flip(v, axis=axis), 1, axis=axis)
    return Field(grid, v)


# ---------------------------------------------------------------------------
# field I/O
# ---------------------------------------------------------------------------

def _coord_rows(grid: Grid):
    if grid.dim == 1:
        for x in grid.axis_points():
            yield (x,)
    else:
        ax = grid.axis_points()
        for x in ax:
            for y in ax:
                yield (x, y)


def save_field_csv(f: Field, path) -> None:
    """One row per grid point: coordinate column(s) then the value."""
    grid = f.grid
    header = "x,value" if grid.dim == 1 else "x,y,value"
    flat = f.values.ravel()
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for coords, v in zip(_coord_rows(grid), flat):
            fh.write(",".join(repr(float(c)) for c in coords) + "," + repr(float(v)) + "\n")


def load_field_csv(path, grid: Grid = None) -> Field:
    """Read a field written by save_field_csv.

    When ``grid`` is omitted it is inferred from the coordinate columns
    (vertex-centred columns starting at 0 give a torus grid, cell-centred a
    box grid).
    """
    with open(path, "r", newline="") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    dim = len(header) - 1
    if dim not in (1, 2):
        raise ValueError(f"unsupported column layout {header}")
    values = np.array([float(r[-1]) for r in rows])
    first = np.array([float(r[0]) for r in rows])
    if grid is None:
        if dim == 1:
            n = len(rows)
            h = first[1] - first[0]
        else:
            second = np.array([float(r[1]) for r in rows])
            n = int(round(np.sqrt(len(rows))))
            h = second[1] - second[0]
        length = n * h
        if abs(first[0]) < 0.25 * h:
            grid = TorusGrid(dim, n, length)
        else:
            grid = BoxGrid(dim, n, length)
    return Field(grid, values.reshape(grid.shape))


def save_field_raw(f: Field, path) -> None:
    """One-line text header (dim, N, L, layout) then little-endian float64 values."""
    grid = f.grid
    layout = "torus" if grid.periodic else "box"
    header = f"field dim={grid.dim} n={grid.n} length={grid.length!r} layout={layout}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(f.values.astype("<f8").tobytes())


def load_field_raw(path) -> Field:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip()
        blob = fh.read()
    parts = dict(item.split("=", 1) for item in header.split()[1:])
    dim = int(parts["dim"])
    n = int(parts["n"])
    length = float(parts["length"])
    layout = parts.get("layout", "torus")
    grid = TorusGrid(dim, n, length) if layout == "torus" else BoxGrid(dim, n, length)
    values = np.frombuffer(blob, dtype="<f8").reshape(grid.shape)
    return Field(grid, values.copy())
