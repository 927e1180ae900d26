"""Translation-invariant base semigroups from negative definite exponents.

A base semigroup ``T(t) f(x) = int f(x + y) p_t(y) dy`` is specified through
the exponent ``psi`` of its characteristic function ``exp(-t psi(xi))``.
Supported exponents: ``Heat`` (``psi = xi^2``, mass-one Gaussian kernel with
variance ``2t``), symmetric ``Stable(alpha)`` (``psi = |xi|^alpha``),
``Cauchy = Stable(1)`` and user-supplied ``Custom`` exponents (which may
include a killing rate ``psi(0) > 0``).

Kernels are tabulated on the displacement grid.  Two regimes are used:

* *resolved* times, where the density varies slowly on the grid scale, use
  pointwise kernel values;
* smaller times use exact cell averages (CDF differences), which keep the
  tables sub-probability down to ``t -> 0`` where they degenerate to the
  discrete delta.

Stable laws are built once per ``alpha`` from a high-resolution Fourier
inversion at ``t = 1`` plus the exact power tail, and rescaled by
self-similarity ``p_t(x) = t^{-1/alpha} p_1(t^{-1/alpha} x)``.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.special import erf, erfc

from .gridfn import Extension, Grid, GridFunction, fft_convolve, holder_seminorm, indicator, sup_norm

__all__ = [
    "LevyExponent",
    "KernelTable",
    "BaseSemigroup",
    "build_base",
    "apply_base",
    "base_resolvent",
    "estimate_regularity",
]

# mass-defect thresholds: a kernel is pointwise-resolved on spacing h when
# aliasing of exp(-t psi) at the lattice frequency 2 pi / h is below 5e-10
_LN_ALIAS = math.log(2e9)
_HW_SAMPLES = (1e2, 1e3, 1e4)


@dataclass(frozen=True)
class LevyExponent:
    """Negative definite exponent ``psi`` of a Levy process.

    ``index`` is the power governing the small-time spatial scale
    ``t^(1/index)`` (2 for Heat, ``alpha`` for stable laws); for custom
    exponents it is a hint used by mesh-grading heuristics.
    """

    kind: str
    alpha: float | None = None
    psi_fn: Callable[[np.ndarray], np.ndarray] | None = None
    index: float = 2.0

    @staticmethod
    def heat() -> "LevyExponent":
        return LevyExponent("heat", index=2.0)

    @staticmethod
    def stable(alpha: float) -> "LevyExponent":
        # below 0.5 the master-table tail series converges too slowly for
        # the mass tolerances the kernel tables promise
        if not 0.5 <= alpha <= 2.0:
            raise ValueError(f"stable index must lie in [0.5, 2], got {alpha}")
        return LevyExponent("stable", alpha=float(alpha), index=float(alpha))

    @staticmethod
    def cauchy() -> "LevyExponent":
        return LevyExponent.stable(1.0)

    @staticmethod
    def custom(psi: Callable[[np.ndarray], np.ndarray], index: float = 2.0) -> "LevyExponent":
        return LevyExponent("custom", psi_fn=psi, index=float(index))

    def psi(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if self.kind == "heat":
            return xi**2 + 0.0j
        if self.kind == "stable":
            return np.abs(xi) ** self.alpha + 0.0j
        return np.asarray(self.psi_fn(xi), dtype=complex)

    @property
    def rho_max(self) -> float:
        """Largest Hoelder exponent the regularity majorant supports."""
        if self.kind == "heat":
            return 2.0
        if self.kind == "stable":
            return self.alpha
        return min(2.0, self.index)

    def validate(self) -> None:
        xi = np.array([0.5, 1.0, 2.0, 5.0, 10.0])
        v_pos = self.psi(xi)
        v_neg = self.psi(-xi)
        scale = 1.0 + np.abs(v_pos)
        if np.any(np.abs(v_neg - np.conj(v_pos)) > 1e-9 * scale):
            raise ValueError("exponent lacks conjugate symmetry psi(-xi) = conj(psi(xi))")
        if np.any(v_pos.real < -1e-12):
            raise ValueError("exponent has negative real part")
        p0 = self.psi(np.array([0.0]))[0]
        if abs(p0.imag) > 1e-12 or p0.real < -1e-12:
            raise ValueError("psi(0) must be a nonnegative real (killing rate)")
        if self.kind in ("heat", "stable") and abs(p0) > 1e-12:
            raise ValueError("psi(0) must vanish for heat/stable exponents")
        # Hartman-Wintner growth: Re psi(xi)/log xi increasing along 1e2,1e3,1e4
        ratios = [self.psi(np.array([x]))[0].real / math.log(x) for x in _HW_SAMPLES]
        if not (ratios[0] < ratios[1] < ratios[2]):
            raise ValueError(
                "exponent fails the Hartman-Wintner growth check; "
                "the base kernel would not smooth bounded data")


@dataclass(frozen=True)
class KernelTable:
    """Kernel values on the displacement grid plus tail masses beyond it."""

    t: float
    values: np.ndarray
    tail_left: float
    tail_right: float
    pointwise: bool

    def mass(self, h: float) -> float:
        return float(h * self.values.sum() + self.tail_left + self.tail_right)


# ---------------------------------------------------------------------------
# master tables for symmetric stable laws (one per alpha, process-wide)
# ---------------------------------------------------------------------------

_STABLE_CACHE: dict[float, "_StableLaw"] = {}
_STABLE_LOCK = threading.Lock()


class _StableLaw:
    """Normalised symmetric alpha-stable law at unit time.

    Density and CDF are tabulated on a fine grid out to ``x_far`` and
    continued by the exact first-order tail ``c_alpha |x|^(-1-alpha)``
    (the constant also appears in the Levy measure of the law).  The whole
    object is normalised so its total mass is exactly one.
    """

    def __init__(self, alpha: float):
        self.alpha = alpha
        # coefficients of the density tail series sum_k a_k x^(-k alpha - 1)
        self._a = tuple(
            (-1.0) ** (k + 1) * math.gamma(k * alpha + 1.0)
            * math.sin(k * math.pi * alpha / 2.0) / (math.factorial(k) * math.pi)
            for k in (1, 2, 3))
        self.c_tail = self._a[0]
        if alpha == 2.0:
            # Gaussian with variance 2 (exp(-xi^2) characteristic function)
            self.x_far = 40.0
            self._analytic = "gauss"
            return
        if alpha == 1.0:
            self.x_far = np.inf
            self._analytic = "cauchy"
            return
        self._analytic = None
        delta = 1.0 / 2048.0
        m = 1 << 19
        period = m * delta  # 256
        self.x_far = 64.0
        x = (np.arange(m) - m // 2) * delta
        dxi = 2.0 * math.pi / period
        xi = (np.arange(m) - m // 2) * dxi
        ghat = np.exp(-np.abs(xi) ** alpha)
        pdf = _invert_fft(ghat, dxi)
        # Subtract periodisation images using the two-term tail expansion.
        # Individual far images are pointwise negligible but their window
        # masses decay slowly, so the k > K remainder is folded in through
        # a midpoint integral.
        corr = np.zeros_like(pdf)
        k_top = 32
        for k in range(1, k_top + 1):
            for s in (x, -x):
                corr += self._density_far(k * period - s)
        for s in (x, -x):
            corr += self._tail_mass_raw((k_top + 0.5) * period - s) / period
        pdf = np.clip(pdf - corr, 0.0, None)
        cdf = np.concatenate([[0.0], cumulative_trapezoid(pdf, x)])
        tail = self._tail_mass_raw(-x[0])  # mass below x[0]
        total = tail + cdf[-1] + tail
        self._x = x
        self._pdf = pdf / total
        self._cdf = (tail + cdf) / total
        self._a = tuple(a / total for a in self._a)
        self.c_tail = self._a[0]

    def _density_far(self, big_x):
        """Three-term series expansion of the density beyond ``x_far``;
        relative error O(x^(-4 alpha))."""
        a = self.alpha
        return sum(ak * big_x ** (-k * a - 1.0) for k, ak in enumerate(self._a, start=1))

    def _tail_mass_raw(self, big_x):
        """Mass above ``big_x``, integrated from the tail series."""
        a = self.alpha
        return sum(ak * big_x ** (-k * a) / (k * a) for k, ak in enumerate(self._a, start=1))

    def density(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self._analytic == "gauss":
            return np.exp(-(u**2) / 4.0) / math.sqrt(4.0 * math.pi)
        if self._analytic == "cauchy":
            return 1.0 / (math.pi * (1.0 + u**2))
        au = np.abs(u)
        out = np.interp(au, self._x[self._x >= 0], self._pdf[self._x >= 0])
        far = au > self.x_far
        if np.any(far):
            out[far] = self._density_far(au[far])
        return out

    def cdf(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self._analytic == "gauss":
            return 0.5 * (1.0 + erf(u / 2.0))
        if self._analytic == "cauchy":
            return 0.5 + np.arctan(u) / math.pi
        out = np.interp(u, self._x, self._cdf)
        far_r = u > self.x_far
        far_l = u < -self.x_far
        if np.any(far_r):
            out[far_r] = 1.0 - self._tail_mass_raw(u[far_r])
        if np.any(far_l):
            out[far_l] = self._tail_mass_raw(-u[far_l])
        return out


def _stable_law(alpha: float) -> _StableLaw:
    with _STABLE_LOCK:
        law = _STABLE_CACHE.get(alpha)
        if law is None:
            law = _StableLaw(alpha)
            _STABLE_CACHE[alpha] = law
        return law


def _invert_fft(ghat: np.ndarray, dxi: float) -> np.ndarray:
    """Fourier inversion ``(1/2pi) int ghat(xi) exp(-i x xi) dxi`` for
    ``ghat`` sampled on the centred grid ``(m - M/2) dxi``; returns values on
    the matching centred x grid."""
    m = len(ghat)
    signs = np.where(np.arange(m) % 2 == 0, 1.0, -1.0)
    p = np.fft.fft(ghat * signs) * signs
    if (m // 2) % 2 == 1:
        p = -p
    return (dxi / (2.0 * math.pi)) * p.real


# ---------------------------------------------------------------------------
# semigroup object
# ---------------------------------------------------------------------------


class BaseSemigroup:
    """Kernel operator family ``T(t)`` for a fixed exponent and grid.

    Tables are cached per time (keyed at 12 significant digits) behind a
    lock, so a semigroup instance can be shared.
    """

    def __init__(self, exponent: LevyExponent, grid: Grid):
        exponent.validate()
        self.exponent = exponent
        self.grid = grid
        self._tables: dict[str, KernelTable] = {}
        self._lock = threading.Lock()
        self._phi_constants: dict[float, float] = {}

    # -- kernel tables ---------------------------------------------------

    def kernel_table(self, t: float) -> KernelTable:
        if t <= 0.0:
            raise ValueError(f"time must be positive, got {t}")
        key = f"{t:.12e}"
        with self._lock:
            tab = self._tables.get(key)
        if tab is not None:
            return tab
        tab = self._build_table(float(t))
        with self._lock:
            self._tables[key] = tab
        return tab

    def _resolved(self, t: float) -> bool:
        xi_alias = 2.0 * math.pi / self.grid.h
        return t * float(self.exponent.psi(np.array([xi_alias]))[0].real) >= _LN_ALIAS

    def _build_table(self, t: float) -> KernelTable:
        kind = self.exponent.kind
        if kind == "heat":
            tab = self._heat_table(t)
        elif kind == "stable":
            tab = self._stable_table(t)
        else:
            tab = self._custom_table(t)
        h = self.grid.h
        if tab.values.min() < -1e-10:
            raise ArithmeticError(f"kernel table at t={t} has negative entries")
        if tab.mass(h) > 1.0 + 1e-6:
            raise ArithmeticError(f"kernel table at t={t} has mass {tab.mass(h)} > 1 + 1e-6")
        return tab

    def _heat_table(self, t: float) -> KernelTable:
        d = self.grid.displacements()
        h = self.grid.h
        half_w = d[-1]
        s = math.sqrt(4.0 * t)
        if self._resolved(t):
            vals = np.exp(-(d**2) / (4.0 * t)) / math.sqrt(4.0 * math.pi * t)
            tail = 0.5 * erfc(half_w / s)
            return KernelTable(t, vals, tail, tail, True)
        edges_hi = (d + 0.5 * h) / s
        edges_lo = (d - 0.5 * h) / s
        vals = 0.5 * (erf(edges_hi) - erf(edges_lo)) / h
        tail = 0.5 * erfc((half_w + 0.5 * h) / s)
        return KernelTable(t, np.clip(vals, 0.0, None), tail, tail, False)

    def _stable_table(self, t: float) -> KernelTable:
        law = _stable_law(self.exponent.alpha)
        d = self.grid.displacements()
        h = self.grid.h
        sigma = t ** (1.0 / self.exponent.alpha)
        edge = (d[-1] + 0.5 * h) / sigma
        tail = float(1.0 - law.cdf(np.array([edge]))[0])
        if self._resolved(t):
            vals = law.density(d / sigma) / sigma
            return KernelTable(t, np.clip(vals, 0.0, None), tail, tail, True)
        cdf_hi = law.cdf((d + 0.5 * h) / sigma)
        cdf_lo = law.cdf((d - 0.5 * h) / sigma)
        vals = (cdf_hi - cdf_lo) / h
        return KernelTable(t, np.clip(vals, 0.0, None), tail, tail, False)

    def _custom_table(self, t: float) -> KernelTable:
        grid = self.grid
        h = grid.h
        if not self._resolved(t):
            raise ValueError(
                f"time {t} is not resolvable for the custom exponent on h={h}; "
                "refine the grid or keep custom bases away from very small times")
        # oversample until the truncated frequencies are negligible
        r = 1
        while r <= 64:
            xi_max = math.pi * r / h
            if t * float(self.exponent.psi(np.array([xi_max]))[0].real) >= math.log(1e12):
                break
            r *= 2
        delta = h / r
        span = 4.0 * grid.width
        m = 1 << max(12, int(math.ceil(math.log2(span / delta))))
        dxi = 2.0 * math.pi / (m * delta)
        xi = (np.arange(m) - m // 2) * dxi
        pdf = _invert_fft(np.exp(-t * self.exponent.psi(xi)), dxi)
        # displacement nodes sit at multiples of r around the centre
        j = np.arange(-(grid.n - 1), grid.n) * r + m // 2
        vals = np.clip(pdf[j], 0.0, None)
        total = math.exp(-t * float(self.exponent.psi(np.array([0.0]))[0].real))
        tail = max(0.0, total - h * float(vals.sum())) / 2.0
        return KernelTable(t, vals, tail, tail, True)

    # -- operator actions --------------------------------------------------

    def apply(self, t: float, f: GridFunction) -> GridFunction:
        if t == 0.0:
            return f
        tab = self.kernel_table(t)
        out = fft_convolve(f, tab.values, tail_mass=(tab.tail_left, tab.tail_right))
        if sup_norm(out) > sup_norm(f) * (1.0 + 1e-6) + 1e-300:
            raise ArithmeticError("base semigroup violated the sup-norm contraction")
        return out

    def resolvent(self, lam: float, f: GridFunction, n_intervals: int = 512) -> GridFunction:
        """Laplace-transform quadrature ``int_0^inf exp(-lam t) T(t) f dt``.

        The integral is truncated at ``t_max = 40 / lam`` (relative tail
        below 1e-17) and evaluated after substituting ``t = v^2``, which
        grades the mesh quadratically into the short-time singularity;
        composite Simpson in ``v``.
        """
        if lam <= 0.0:
            raise ValueError("resolvent requires lam > 0")
        if n_intervals % 2 != 0:
            n_intervals += 1
        v_max = math.sqrt(40.0 / lam)
        v = np.linspace(0.0, v_max, n_intervals + 1)
        acc = np.zeros(self.grid.n, dtype=complex if np.iscomplexobj(f.values) else float)
        w = np.ones(n_intervals + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        w *= (v_max / n_intervals) / 3.0
        for vi, wi in zip(v[1:], w[1:]):  # integrand vanishes at v = 0
            ti = vi * vi
            g = self.apply(ti, f)
            acc = acc + (wi * 2.0 * vi * math.exp(-lam * ti)) * g.values
        return GridFunction(self.grid, acc, f.extension)

    # -- diagnostics -------------------------------------------------------

    def chapman_defect(self, s: float, t: float) -> float:
        """Sup distance between the convolved tables ``p_s * p_t`` and
        ``p_{s+t}`` over the central half of the displacement grid."""
        a = self.kernel_table(s).values
        b = self.kernel_table(t).values
        c = self.kernel_table(s + t).values
        n = self.grid.n
        conv = np.convolve(a, b)[n - 1 : 3 * n - 2] * self.grid.h
        lo = (n - 1) - (n - 1) // 2
        hi = (n - 1) + (n - 1) // 2 + 1
        return float(np.abs(conv[lo:hi] - c[lo:hi]).max())

    def phi_constant(self, rho: float) -> float:
        """Fitted constant ``C`` so that ``phi(t) = (1 + C) t^(-rho/index)``
        majorises the Hoelder-rho norm of ``T(t)`` applied to sup-norm-one
        data, for t in (0, 1]."""
        key = round(rho, 12)
        c = self._phi_constants.get(key)
        if c is None:
            fit = estimate_regularity(self, rho, list(np.geomspace(0.02, 0.64, 6)))
            c = float(fit["constant"])
            self._phi_constants[key] = c
        return c

    def phi(self, t: float, rho: float) -> float:
        return (1.0 + self.phi_constant(rho)) * t ** (-rho / self.exponent.index)


# ---------------------------------------------------------------------------
# module-level operations
# ---------------------------------------------------------------------------


def build_base(exponent: LevyExponent, grid: Grid) -> BaseSemigroup:
    return BaseSemigroup(exponent, grid)


def apply_base(base: BaseSemigroup, t: float, f: GridFunction) -> GridFunction:
    return base.apply(t, f)


def base_resolvent(base: BaseSemigroup, lam: float, f: GridFunction,
                   n_intervals: int = 512) -> GridFunction:
    return base.resolvent(lam, f, n_intervals)


def estimate_regularity(base: BaseSemigroup, rho: float, times) -> dict:
    """Power-law fit of the short-time Hoelder-rho smoothing of the base.

    Applies ``T(t)`` to the indicator of [-1, 1] and least-squares fits
    ``log(seminorm)`` against ``log(t)``.  The fit uses the Hoelder
    *seminorm* (the part of the norm that blows up as ``t -> 0``); the
    bounded sup-norm part would flatten the slope over any practical range
    of times.  Expected exponent: ``-rho/2`` for Heat, ``-rho/alpha`` for
    stable bases.
    """
    times = sorted(float(t) for t in times)
    if len(times) < 2:
        raise ValueError("need at least two times to fit")
    f = indicator(base.grid, -1.0, 1.0)
    seminorms = []
    norms = []
    for t in times:
        g = base.apply(t, f)
        s = holder_seminorm(g, rho)
        seminorms.append(s)
        norms.append(s + sup_norm(g))
    coeffs = np.polyfit(np.log(times), np.log(seminorms), 1)
    return {
        "exponent": float(coeffs[0]),
        "constant": float(math.exp(coeffs[1])),
        "times": times,
        "seminorms": seminorms,
        "norms": norms,
    }
