"""Uniform grids, sampled functions and discrete norms.

Everything downstream (base semigroups, perturbations, the Duhamel engine)
works on bounded functions sampled on a fixed uniform window.  A sampled
function carries an *extension policy* describing its values outside the
window: ``Extension.ZERO`` for compactly supported data and
``Extension.CONSTANT`` for functions that level off at the boundary (the
constant function, smoothed steps, ...).  Convolution against sub-probability
kernels respects the policy, so that mass leaving the window is either lost
(zero extension) or credited with the boundary value (constant extension).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

__all__ = [
    "Extension",
    "Grid",
    "GridFunction",
    "make_grid",
    "default_grid",
    "grid_function",
    "sup_norm",
    "holder_seminorm",
    "holder_norm",
    "fft_convolve",
    "indicator",
    "bump",
    "one",
    "step",
    "write_csv",
    "read_csv",
]


class Extension(enum.Enum):
    """How a grid function continues outside the window."""

    ZERO = "zero"
    CONSTANT = "constant"


@dataclass(frozen=True)
class Grid:
    """Uniform grid with ``n`` nodes on ``[x_min, x_max]``.

    ``n`` must be a power of two (and at least 8) so that FFT sizes stay
    friendly; the spacing is ``h = (x_max - x_min) / (n - 1)``.
    """

    x_min: float
    x_max: float
    n: int

    def __post_init__(self) -> None:
        if self.x_max <= self.x_min:
            raise ValueError(f"reversed or empty window [{self.x_min}, {self.x_max}]")
        if self.n < 8 or (self.n & (self.n - 1)) != 0:
            raise ValueError(f"n must be a power of two >= 8, got {self.n}")

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / (self.n - 1)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    def nodes(self) -> np.ndarray:
        return self.x_min + self.h * np.arange(self.n)

    def displacements(self) -> np.ndarray:
        """Displacement nodes ``j*h`` for ``j = -(n-1) .. n-1``.

        Kernel tables for convolution live on this symmetric grid of
        ``2n - 1`` points; it covers every displacement between two window
        nodes.
        """
        return self.h * np.arange(-(self.n - 1), self.n)


def make_grid(x_min: float, x_max: float, n: int) -> Grid:
    return Grid(float(x_min), float(x_max), int(n))


def default_grid(n: int = 1024) -> Grid:
    """The default window [-20, 20]; wide enough that the base kernels of
    interest keep essentially all of their mass inside at the times used."""
    return make_grid(-20.0, 20.0, n)


@dataclass(frozen=True)
class GridFunction:
    """A function sampled on a :class:`Grid`, with an extension policy.

    ``values`` may be real or complex; it is copied and frozen on
    construction so instances can be shared safely.
    """

    grid: Grid
    values: np.ndarray = field(repr=False)
    extension: Extension = Extension.ZERO

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if v.shape != (self.grid.n,):
            raise ValueError(f"values shape {v.shape} does not match grid n={self.grid.n}")
        if not (np.issubdtype(v.dtype, np.floating) or np.issubdtype(v.dtype, np.complexfloating)):
            v = v.astype(float)
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    # -- evaluation ------------------------------------------------------

    def boundary_values(self) -> tuple[complex, complex]:
        if self.extension is Extension.CONSTANT:
            return self.values[0], self.values[-1]
        return 0.0, 0.0

    def eval_at(self, x) -> np.ndarray:
        """Linear interpolation at arbitrary points, honouring the
        extension policy outside the window."""
        x = np.asarray(x, dtype=float)
        left, right = self.boundary_values()
        if np.iscomplexobj(self.values):
            re = np.interp(x, self.grid.nodes(), self.values.real,
                           left=np.real(left), right=np.real(right))
            im = np.interp(x, self.grid.nodes(), self.values.imag,
                           left=np.imag(left), right=np.imag(right))
            return re + 1j * im
        return np.interp(x, self.grid.nodes(), self.values, left=left, right=right)

    def gradient(self) -> np.ndarray:
        """Central-difference gradient proxy (one-sided at the boundary)."""
        return np.gradient(self.values, self.grid.h)

    def second_difference(self) -> np.ndarray:
        v = self.values
        out = np.zeros_like(v)
        out[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / self.grid.h**2
        out[0] = out[1]
        out[-1] = out[-2]
        return out

    def with_values(self, values, extension: Extension | None = None) -> "GridFunction":
        return GridFunction(self.grid, np.asarray(values),
                            self.extension if extension is None else extension)

    # -- small algebra, convenient in tests and demos --------------------

    def __add__(self, other: "GridFunction") -> "GridFunction":
        self._check_compatible(other)
        ext = self.extension if self.extension is other.extension else Extension.ZERO
        return GridFunction(self.grid, self.values + other.values, ext)

    def __sub__(self, other: "GridFunction") -> "GridFunction":
        self._check_compatible(other)
        ext = self.extension if self.extension is other.extension else Extension.ZERO
        return GridFunction(self.grid, self.values - other.values, ext)

    def __mul__(self, c) -> "GridFunction":
        return GridFunction(self.grid, self.values * c, self.extension)

    __rmul__ = __mul__

    def _check_compatible(self, other: "GridFunction") -> None:
        if self.grid != other.grid:
            raise ValueError("grid mismatch")


def grid_function(grid: Grid, values, extension: Extension = Extension.ZERO) -> GridFunction:
    """Wrap raw node values, or a callable evaluated on the nodes."""
    if callable(values):
        values = values(grid.nodes())
    return GridFunction(grid, np.broadcast_to(np.asarray(values), (grid.n,)), extension)


# -- norms ---------------------------------------------------------------


def sup_norm(f: GridFunction) -> float:
    return float(np.abs(f.values).max())


def _pair_seminorm(values: np.ndarray, rho: float, h: float) -> float:
    """max over node pairs within distance 1 of |v(x)-v(y)| / |x-y|^rho."""
    k_max = max(1, int(np.floor(1.0 / h)))
    k_max = min(k_max, len(values) - 1)
    best = 0.0
    for k in range(1, k_max + 1):
        d = np.abs(values[k:] - values[:-k]).max()
        best = max(best, d / (k * h) ** rho)
    return float(best)


def holder_seminorm(f: GridFunction, rho: float) -> float:
    """The t -> 0 singular part of the Hoelder norm of order ``rho``.

    For ``rho < 1`` this is the rho-Hoelder seminorm of ``f``; for
    ``rho = 1`` the sup of the central-difference gradient; for
    ``rho in (1, 2)`` that sup plus the (rho-1)-seminorm of the gradient.
    Node pairs further than 1 apart are ignored, matching the
    ``min(1, |y|^rho)`` weight the perturbation bound uses.
    """
    if not 0.0 < rho < 2.0:
        raise ValueError(f"rho must lie in (0, 2), got {rho}")
    h = f.grid.h
    v = np.abs(f.values) if np.iscomplexobj(f.values) else f.values
    if rho < 1.0:
        return _pair_seminorm(v, rho, h)
    df = np.gradient(v, h)
    out = float(np.abs(df).max())
    if rho > 1.0:
        out += _pair_seminorm(df, rho - 1.0, h)
    return out


def holder_norm(f: GridFunction, rho: float) -> float:
    """Discrete Hoelder norm: sup norm plus :func:`holder_seminorm`."""
    return sup_norm(f) + holder_seminorm(f, rho)


# -- convolution ---------------------------------------------------------


def fft_convolve(f: GridFunction, kernel_values: np.ndarray,
                 tail_mass: tuple[float, float] = (0.0, 0.0)) -> GridFunction:
    """Apply a kernel table to ``f``: ``g(x_i) = h * sum_j k_j f(x_i + d_j)``.

    ``kernel_values`` must be sampled on ``grid.displacements()`` (length
    ``2n - 1``), nonnegative, with ``h * sum <= 1 + 1e-6``.  Values of ``f``
    beyond the window are supplied by its extension policy.  ``tail_mass``
    gives kernel mass beyond the largest displacement on each side
    (left, right); for constant extension it is credited with the matching
    boundary value, for zero extension it is dropped.
    """
    k = np.asarray(kernel_values, dtype=float)
    n = f.grid.n
    if k.shape != (2 * n - 1,):
        raise ValueError(f"kernel length {k.shape} does not match displacement grid {2 * n - 1}")
    if k.min() < -1e-15:
        raise ValueError("kernel has negative entries")
    h = f.grid.h
    mass = h * k.sum() + tail_mass[0] + tail_mass[1]
    if mass > 1.0 + 1e-6:
        raise ValueError(f"kernel mass {mass} exceeds 1 + 1e-6")

    m = n - 1
    if f.extension is Extension.CONSTANT:
        pad_l = np.full(m, f.values[0])
        pad_r = np.full(m, f.values[-1])
    else:
        pad_l = np.zeros(m, dtype=f.values.dtype)
        pad_r = np.zeros(m, dtype=f.values.dtype)
    f_ext = np.concatenate([pad_l, f.values, pad_r])
    # correlation of f_ext with k, valid part: sum_j f_ext[i + j] k[j]
    out = fftconvolve(f_ext, k[::-1], mode="valid") * h
    if f.extension is Extension.CONSTANT:
        out = out + f.values[0] * tail_mass[0] + f.values[-1] * tail_mass[1]
    if not np.iscomplexobj(f.values):
        out = out.real
    return GridFunction(f.grid, out, f.extension)


# -- standard test functions ----------------------------------------------


def indicator(grid: Grid, a: float, b: float) -> GridFunction:
    """Finite-volume indicator of ``[a, b]``: each node carries the overlap
    fraction of its grid cell with the interval, so quadratures against the
    function see the interval with O(h^2) accuracy instead of O(h)."""
    if b <= a:
        raise ValueError(f"need a < b, got [{a}, {b}]")
    x = grid.nodes()
    h = grid.h
    frac = np.clip((np.minimum(x + 0.5 * h, b) - np.maximum(x - 0.5 * h, a)) / h, 0.0, 1.0)
    frac[frac > 1.0 - 1e-12] = 1.0
    frac[frac < 1e-12] = 0.0
    return GridFunction(grid, frac, Extension.ZERO)


def bump(grid: Grid, center: float = 0.0, halfwidth: float = 2.0) -> GridFunction:
    """Smooth bump supported on [center - halfwidth, center + halfwidth],
    normalised to peak value 1."""
    u = (grid.nodes() - center) / halfwidth
    v = np.zeros(grid.n)
    inside = np.abs(u) < 1.0
    v[inside] = np.exp(1.0 - 1.0 / (1.0 - u[inside] ** 2))
    return GridFunction(grid, v, Extension.ZERO)


def one(grid: Grid) -> GridFunction:
    return GridFunction(grid, np.ones(grid.n), Extension.CONSTANT)


def step(grid: Grid) -> GridFunction:
    return GridFunction(grid, (grid.nodes() >= 0.0).astype(float), Extension.CONSTANT)


# -- serialisation --------------------------------------------------------


def write_csv(f: GridFunction, path) -> None:
    """Two columns ``x,value`` with 17 significant digits."""
    with open(path, "w") as fh:
        fh.write("x,value\n")
        for x, v in zip(f.grid.nodes(), f.values):
            fh.write(f"{x:.17g},{v:.17g}\n")


def read_csv(path, extension: Extension = Extension.ZERO) -> GridFunction:
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    x, v = data[:, 0], data[:, 1]
    n = len(x)
    grid = make_grid(x[0], x[-1], n)
    if not np.allclose(np.diff(x), grid.h, rtol=1e-9, atol=1e-12):
        raise ValueError("nodes in file are not uniformly spaced")
    return GridFunction(grid, v, extension)
