"""Perturbation engine: series, time stepping, matrices, resolvents.

The perturbed semigroup is assembled from the Duhamel identity

    S(t) f = T(t) f + int_0^t T(t - s) Bhat S(s) f ds,

expanded as the series S = sum_n S_n with S_0(t) = T(t) and

    S_{n+1}(t) f = int_0^t T(t - s) Bhat S_n(s) f ds.

Each time integral runs over one graded mesh on [0, t] with cell boundaries
tau_k = t (k/M)^p and midpoint-in-parameter nodes, which soaks up the
integrable blow-up phi(s) ~ s^{-rho/index} of ||Bhat T(s)|| at s = 0.  The
key economy is that every level is evaluated *at all mesh nodes at once*,
so level n + 1 needs M applications of Bhat plus ~M^2/2 kernel
convolutions, instead of a fresh nested quadrature per level.

Long times are reached by stepping: the series is only summed on intervals
of length <= cfg.step where it contracts geometrically, and S(t) is the
composition of those steps (semigroup law).  The same recursion, run on a
block of basis columns instead of a single function, assembles the
one-step matrix that the property checks inspect entrywise.

Constants are handled exactly: Bhat annihilates constants to rounding
error and the base tables carry their tail masses, so S(step) applied to
the all-ones function is computed separately (constant extension) and the
difference to the matrix row sums is stored as a correction column.  The
matrix plus correction therefore propagates both compactly supported data
and the constant function without boundary artefacts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy import fft as sfft
from scipy.linalg import toeplitz

from .basesg import BaseSemigroup
from .gridfn import Extension, Grid, GridFunction, one, sup_norm
from .levyop import (
    DEFAULT_APPLY_TOL,
    LevyCharacteristics,
    RankOnePerturbation,
    apply_perturbation,
    perturbation_bound_constant,
    perturbation_matrix,
)

Perturbation = Union[LevyCharacteristics, RankOnePerturbation]


@dataclass(frozen=True)
class DysonConfig:
    """Knobs of the series evaluation.

    ``step`` is the largest interval on which the series itself is summed;
    longer times are reached by composing steps.  ``time_nodes`` is the
    graded-mesh size M, ``grading_power`` the exponent p (``None`` picks
    ceil(1/(1 - rho/index)) + 1, which removes the phi singularity from
    the product rule).  ``series_tol`` stops the sum once the next term's
    sup norm falls below it relative to the data, ``max_order`` caps the
    number of terms.
    """

    series_tol: float = 1e-8
    time_nodes: int = 64
    grading_power: Optional[float] = None
    max_order: int = 30
    step: float = 0.05

    def __post_init__(self) -> None:
        if self.series_tol <= 0.0:
            raise ValueError("series_tol must be positive")
        if self.time_nodes < 8:
            raise ValueError("need at least 8 time nodes")
        if self.max_order < 1:
            raise ValueError("max_order must be at least 1")
        if self.step <= 0.0:
            raise ValueError("step must be positive")
        if self.grading_power is not None and self.grading_power < 1.0:
            raise ValueError("grading_power must be >= 1")


class SeriesDivergence(ValueError):
    """The correction series (or Neumann iteration) failed to decay.

    Kept a ValueError so callers that treat it as a bad-parameter problem
    keep working, but distinguishable for exit-code purposes."""


@dataclass
class OperatorMatrix:
    """Dense one-step (or resolvent) operator in nodal coordinates.

    ``entries`` acts on node values with zero extension; ``ones_correction``
    is the column that restores the action on the constant function (and,
    linearly interpolated through the boundary values, on anything with a
    constant far field):  S f  ~  entries @ f + ones_correction * (f_l + f_r)/2.
    ``step_meta`` records t (or lam), truncation_order, residual (series
    truncation) and quadrature_error (graded-mesh estimate).
    """

    grid: Grid
    entries: np.ndarray
    step_meta: dict
    ones_correction: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.entries = np.asarray(self.entries, dtype=float)
        n = self.grid.n
        if self.entries.shape != (n, n):
            raise ValueError(f"entries shape {self.entries.shape} != ({n}, {n})")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("operator matrix has non-finite entries")
        if self.ones_correction is None:
            self.ones_correction = np.zeros(n)
        self.ones_correction = np.asarray(self.ones_correction, dtype=float)

    def apply(self, f: GridFunction) -> GridFunction:
        v = f.values
        boundary = 0.5 * (v[0] + v[-1])
        out = self.entries @ v + self.ones_correction * boundary
        return GridFunction(self.grid, out, f.extension)

    def row_sums(self) -> np.ndarray:
        """Row sums including the constant correction (action on ones)."""
        return self.entries.sum(axis=1) + self.ones_correction

    def dump_csv(self, path) -> None:
        meta = " ".join(f"{k}={v!r}" for k, v in sorted(self.step_meta.items()))
        corr = " ".join(f"{v:.17g}" for v in self.ones_correction)
        header = (f"operator-matrix n={self.grid.n} "
                  f"x_min={self.grid.x_min:.17g} x_max={self.grid.x_max:.17g}\n"
                  f"meta {meta}\n"
                  f"correction {corr}")
        np.savetxt(path, self.entries, delimiter=",", header=header)


def load_operator_matrix(path) -> OperatorMatrix:
    meta: dict = {}
    corr = None
    shape = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            text = line[1:].strip()
            if text.startswith("operator-matrix"):
                for tok in text.split()[1:]:
                    k, v = tok.split("=")
                    shape[k] = float(v)
            elif text.startswith("meta"):
                for tok in text[4:].strip().split():
                    k, v = tok.split("=", 1)
                    try:
                        meta[k] = eval(v, {}, {})  # noqa: S307 - literals we wrote
                    except Exception:
                        meta[k] = v
            elif text.startswith("correction"):
                corr = np.fromstring(text[10:], sep=" ")
    entries = np.loadtxt(path, delimiter=",")
    grid = Grid(shape["x_min"], shape["x_max"], int(shape["n"]))
    return OperatorMatrix(grid, entries, meta, corr)


# ---------------------------------------------------------------------------
# perturbation dispatch
# ---------------------------------------------------------------------------

def _is_zero(B: Perturbation) -> bool:
    return (isinstance(B, LevyCharacteristics) and B.b is None
            and not B.has_density and not B.atoms)


def _b_apply(B: Perturbation, f: GridFunction, rho: float) -> GridFunction:
    if isinstance(B, RankOnePerturbation):
        return B.apply(f)
    return apply_perturbation(B, f, rho, holder_est=1.0)


def _b_matrix(B: Perturbation, grid: Grid, rho: float) -> np.ndarray:
    if isinstance(B, RankOnePerturbation):
        return np.tile(B.weights(grid), (grid.n, 1))
    return perturbation_matrix(B, grid, rho, holder_est=1.0)


def _b_norm_constant(B: Perturbation, rho: float) -> float:
    if isinstance(B, RankOnePerturbation):
        return 1.0
    return perturbation_bound_constant(B, rho)


def _default_rho(B: Perturbation, T: BaseSemigroup) -> float:
    """Regularity order used inside the engine when none is requested.

    Drift terms demand rho > 1; below that the operator falls back to its
    pure-jump form.  The midpoint between the lowest admissible order and
    the base's smoothing ceiling keeps both the phi singularity and the
    jump index at a safe distance.
    """
    hi = T.exponent.rho_max
    if isinstance(B, RankOnePerturbation):
        return min(1.5, hi)
    lo = max(B.beta, 1.0)
    if lo >= hi:
        lo = B.beta
    if lo >= hi:
        raise ValueError(
            f"no admissible regularity order: jump index {B.beta} meets the "
            f"base smoothing ceiling {hi}")
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# graded mesh
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Mesh:
    t: float
    nodes: np.ndarray        # (M,) evaluation times sigma_q
    weights: np.ndarray      # (M,) full cell widths, sum = t
    clipped: np.ndarray      # (M, M) clipped widths: row i integrates [0, sigma_i]


def _build_mesh(t: float, m: int, p: float) -> _Mesh:
    k = np.arange(m + 1, dtype=float)
    tau = t * (k / m) ** p
    sig = t * ((k[:-1] + 0.5) / m) ** p
    w = np.diff(tau)
    clipped = np.minimum(tau[1:][None, :], sig[:, None]) - tau[:-1][None, :]
    np.clip(clipped, 0.0, None, out=clipped)
    return _Mesh(t, sig, w, clipped)


# ---------------------------------------------------------------------------
# batched convolution helper (matrix route)
# ---------------------------------------------------------------------------

class _BatchConv:
    """Zero-extension kernel-table convolution of many columns at once.

    Mirrors the single-function path: out(x_i) = h * sum_j k_j f(x_i + d_j)
    with f continued by zero, evaluated through one shared real FFT of
    length next_fast_len(4n - 3) (large enough that the linear convolution
    never wraps into the extracted window).
    """

    def __init__(self, base: BaseSemigroup, grid: Grid):
        self.base = base
        self.grid = grid
        n = grid.n
        self.L = sfft.next_fast_len(4 * n - 3, real=True)
        self._khat: dict[str, np.ndarray] = {}

    def khat(self, t: float) -> np.ndarray:
        """h-scaled spectrum of the reversed kernel table at time t."""
        key = f"{t:.12e}"
        got = self._khat.get(key)
        if got is None:
            k = self.base.kernel_table(t).values[::-1]
            got = sfft.rfft(k * self.grid.h, n=self.L)
            self._khat[key] = got
        return got

    def fhat(self, cols: np.ndarray) -> np.ndarray:
        """Spectrum of zero-padded columns, shape (L//2 + 1, k)."""
        n = self.grid.n
        padded = np.zeros((2 * n - 1, cols.shape[1]))
        padded[n - 1:] = cols
        return sfft.rfft(padded, n=self.L, axis=0)

    def unpack(self, spec: np.ndarray) -> np.ndarray:
        """Inverse transform and extraction of the n on-grid values."""
        n = self.grid.n
        full = sfft.irfft(spec, n=self.L, axis=0)
        return full[2 * n - 2: 3 * n - 2]

    def toeplitz_matrix(self, t: float) -> np.ndarray:
        k = self.base.kernel_table(t).values * self.grid.h
        n = self.grid.n
        return toeplitz(k[n - 1::-1][:n], k[n - 1:])


# ---------------------------------------------------------------------------
# the engine
# ---------------------------------------------------------------------------

class _Engine:
    def __init__(self, B: Perturbation, T: BaseSemigroup, cfg: DysonConfig,
                 rho: Optional[float]):
        self.B = B
        self.T = T
        self.cfg = cfg
        self.grid = T.grid
        self.rho = _default_rho(B, T) if rho is None else float(rho)
        if isinstance(B, RankOnePerturbation):
            self.power = 1.0
            self._phi = lambda s: 1.0
            self._phi_int = lambda t: t
        else:
            exponent = self.rho / T.exponent.index
            if exponent >= 1.0:
                raise ValueError("rho must stay below the base index for the "
                                 "series integrals to converge")
            auto = math.ceil(1.0 / (1.0 - exponent)) + 1
            self.power = cfg.grading_power if cfg.grading_power is not None else float(auto)
            if self.power < 1.0 / (1.0 - exponent):
                raise ValueError(
                    f"grading power {self.power} too small for rho/index={exponent:.3f}")
            c = 1.0 + T.phi_constant(self.rho)
            self._phi = lambda s, c=c, e=exponent: c * s ** (-e)
            self._phi_int = lambda t, c=c, e=exponent: c * t ** (1.0 - e) / (1.0 - e)
        self.bound_const = _b_norm_constant(B, self.rho)
        self._meshes: dict = {}
        self.conv = _BatchConv(T, self.grid)
        self._bmat: Optional[np.ndarray] = None
        self._quad_est: dict = {}
        self._ones_step: dict = {}
        self.last_info: dict = {}

    # -- setup ---------------------------------------------------------------

    def contraction_integral(self, t: float) -> float:
        return self._phi_int(t) * self.bound_const

    def check_contraction(self, t: float) -> None:
        """A-priori sanity bound on the step size.

        The first-term majorant is q = int_0^t phi(s) ||B|| ds; iterated
        integrals gain 1/Gamma(1 + n(1 - rho/index)) factors, so the series
        is summable for every q (Mittag-Leffler growth) and q < 1 is *not*
        required.  A large q only means early terms may grow before the
        factorial decay wins; the empirical non-decay detector in the
        summation loop handles genuine divergence.  Only absurd values,
        where the majorant peak would swamp double precision, are rejected
        outright.
        """
        q = self.contraction_integral(t)
        if q >= 50.0:
            raise SeriesDivergence(
                f"series majorant int phi * ||B|| = {q:.1f} over a step of {t} "
                "is far beyond the workable range; use a smaller cfg.step")

    def mesh(self, t: float) -> _Mesh:
        key = f"{t:.12e}"
        got = self._meshes.get(key)
        if got is None:
            m = self.cfg.time_nodes
            if t < self.cfg.step * (1.0 - 1e-12):
                m = min(m, max(8, int(math.ceil(m * t / self.cfg.step))))
            got = _build_mesh(t, m, self.power)
            self._meshes[key] = got
        return got

    def bmat(self) -> np.ndarray:
        if self._bmat is None:
            self._bmat = _b_matrix(self.B, self.grid, self.rho)
        return self._bmat

    # -- function-route series ------------------------------------------------

    def series_terms(self, t: float, f: GridFunction, n_terms: Optional[int],
                     capture_mesh: bool = False) -> dict:
        """Sum the series at time t; one step, t <= cfg.step.

        Returns a dict with the summed GridFunction, per-term sup norms,
        and (optionally) the summed S(sigma_q) f values at every mesh node.
        When ``n_terms`` is given, exactly that many correction terms are
        computed; otherwise the sum stops at cfg.series_tol.
        """
        cfg = self.cfg
        if _is_zero(self.B):
            base = self.T.apply(t, f)
            zero = GridFunction(self.grid, np.zeros(self.grid.n), f.extension)
            n_z = n_terms if n_terms is not None else 1
            out = {"sum": base, "terms": [base] + [zero] * n_z,
                   "norms": [sup_norm(base)] + [0.0] * n_z,
                   "order": 0, "residual": 0.0, "ratios": []}
            if capture_mesh:
                mesh = self.mesh(t)
                out["mesh_nodes"] = mesh.nodes
                out["mesh_weights"] = mesh.weights
                out["mesh_values"] = np.stack(
                    [self.T.apply(s, f).values for s in mesh.nodes])
            return out
        mesh = self.mesh(t)
        sig, w_full, w_clip = mesh.nodes, mesh.weights, mesh.clipped
        m = sig.size

        scale = max(sup_norm(f), 1e-300)
        term = self.T.apply(t, f)
        total = term.values.copy()
        norms = [sup_norm(term)]
        terms = [term]

        level = [self.T.apply(s, f) for s in sig]
        if capture_mesh:
            mesh_sum = np.stack([g.values for g in level]).astype(float)
        n = 0
        while True:
            if n_terms is not None and n >= n_terms:
                break
            if n_terms is None and norms[-1] < cfg.series_tol * scale and n >= 1:
                break
            if n >= cfg.max_order:
                raise SeriesDivergence(
                    f"series did not reach tolerance within {cfg.max_order} terms "
                    f"(last norm {norms[-1]:.2e}); reduce cfg.step")
            g = [_b_apply(self.B, lv, self.rho) for lv in level]
            vals = np.zeros_like(total)
            for q in range(m):
                if w_full[q] == 0.0:
                    continue
                vals += w_full[q] * self.T.apply(t - sig[q], g[q]).values
            term = GridFunction(self.grid, vals, f.extension)
            terms.append(term)
            norms.append(sup_norm(term))
            total += vals
            n += 1
            # early terms may grow (the majorant allows a hump before the
            # factorial decay wins); only genuine blow-up aborts here, while
            # stagnation runs into the max_order error above
            if norms[-1] > 100.0 * max(scale, norms[0]):
                raise SeriesDivergence(
                    f"series terms blowing up at step {t} "
                    f"(term {n} norm {norms[-1]:.3e} vs data {scale:.3e}); "
                    "use a smaller cfg.step")
            stop_now = (n_terms is not None and n >= n_terms) or \
                       (n_terms is None and norms[-1] < cfg.series_tol * scale)
            if not stop_now or capture_mesh:
                nxt = []
                for i in range(m):
                    acc = np.zeros_like(total)
                    for q in range(i + 1):
                        wq = w_clip[i, q]
                        if wq == 0.0:
                            continue
                        acc += wq * self.T.apply(sig[i] - sig[q], g[q]).values
                    nxt.append(GridFunction(self.grid, acc, f.extension))
                if capture_mesh:
                    mesh_sum += np.stack([gf.values for gf in nxt])
                level = nxt
            if stop_now:
                break

        q_rates = [norms[k] / norms[k - 1] for k in range(2, len(norms))
                   if norms[k - 1] > 0.0]
        out = {
            "sum": GridFunction(self.grid, total, f.extension),
            "terms": terms,
            "norms": norms,
            "order": len(norms) - 1,
            "residual": norms[-1] if len(norms) > 1 else 0.0,
            "ratios": q_rates,
        }
        if capture_mesh:
            out["mesh_nodes"] = sig
            out["mesh_weights"] = w_full
            out["mesh_values"] = mesh_sum
        return out

    def quad_estimate(self, t: float) -> float:
        """First-term graded-mesh error estimate: M vs M/2 on a bump probe."""
        if _is_zero(self.B):
            return 0.0
        key = f"{t:.12e}"
        got = self._quad_est.get(key)
        if got is not None:
            return got
        from .gridfn import bump

        f = bump(self.grid)
        fine = self.series_terms(t, f, n_terms=1)["terms"][1]
        m_half = max(8, self.cfg.time_nodes // 2)
        mesh = _build_mesh(t, m_half, self.power)
        g = [_b_apply(self.B, self.T.apply(s, f), self.rho) for s in mesh.nodes]
        vals = np.zeros(self.grid.n)
        for q in range(m_half):
            vals += mesh.weights[q] * self.T.apply(t - mesh.nodes[q], g[q]).values
        est = float(np.abs(fine.values - vals).max())
        self._quad_est[key] = est
        return est

    # -- stepping -------------------------------------------------------------

    def ones_step(self, dt: float, capture: bool) -> dict:
        """Series applied to the constant function over one step (cached).

        Constants pass through the step exactly — the base tables carry
        their tail masses and the perturbation of a constant is evaluated
        in closed form — so the compact/constant split below loses nothing.
        """
        key = f"{dt:.12e}"
        got = self._ones_step.get(key)
        if got is None or (capture and "mesh_values" not in got):
            res = self.series_terms(dt, one(self.grid), None, capture_mesh=capture)
            got = {"sum": res["sum"].values, "residual": res["residual"],
                   "order": res["order"], "ratios": res["ratios"]}
            if capture:
                got["mesh_values"] = res["mesh_values"]
            self._ones_step[key] = got
        return got

    def solve(self, t: float, f: GridFunction,
              laplace: Optional[float] = None) -> GridFunction:
        """S(t) f by composing series steps; optionally accumulates the
        Laplace integral int_0^t exp(-lam s) S(s) f ds along the way.

        Each step splits its input into a compact part (zero extension)
        and the boundary-average constant; the constant component is
        propagated through the cached series-on-ones, exactly like the
        ones-correction column of the matrix route.
        """
        if t < 0.0:
            raise ValueError("time must be nonnegative")
        cfg = self.cfg
        if _is_zero(self.B) and laplace is None:
            # no perturbation: the semigroup law is exact, skip the stepping
            g = self.T.apply(t, f) if t > 0.0 else f
            self.last_info = {"t": t, "steps": 0, "residual": 0.0,
                              "quadrature_error": 0.0, "truncation_order": 0,
                              "ratios": []}
            return g
        self.check_contraction(min(t, cfg.step) if t > 0 else cfg.step)
        steps: List[float] = []
        remaining = t
        while remaining > cfg.step * (1.0 + 1e-12):
            steps.append(cfg.step)
            remaining -= cfg.step
        if remaining > 1e-14 * max(t, 1.0):
            steps.append(remaining)

        info = {"t": t, "steps": len(steps), "residual": 0.0,
                "quadrature_error": 0.0, "truncation_order": 0, "ratios": []}
        lap = np.zeros(self.grid.n) if laplace is not None else None
        capture = laplace is not None
        vals = f.values.astype(float)
        ext = f.extension
        elapsed = 0.0
        for dt_step in steps:
            c = 0.5 * (vals[0] + vals[-1]) if ext is Extension.CONSTANT or \
                max(abs(vals[0]), abs(vals[-1])) > 1e-13 * max(1.0, np.abs(vals).max()) \
                else 0.0
            gc = GridFunction(self.grid, vals - c, Extension.ZERO)
            res = self.series_terms(dt_step, gc, None, capture_mesh=capture)
            vals = res["sum"].values
            mesh_vals = res.get("mesh_values")
            info["residual"] += res["residual"]
            info["truncation_order"] = max(info["truncation_order"], res["order"])
            info["ratios"] = res["ratios"]
            if c != 0.0:
                ones = self.ones_step(dt_step, capture)
                vals = vals + c * ones["sum"]
                info["residual"] += abs(c) * ones["residual"]
                info["truncation_order"] = max(info["truncation_order"], ones["order"])
                if capture:
                    mesh_vals = mesh_vals + c * ones["mesh_values"]
                ext = Extension.CONSTANT
            elif ext is not Extension.CONSTANT:
                ext = f.extension
            if capture:
                ew = np.exp(-laplace * (elapsed + res["mesh_nodes"]))
                lap += (res["mesh_weights"] * ew) @ mesh_vals
            info["quadrature_error"] += self.quad_estimate(dt_step)
            elapsed += dt_step
        g = GridFunction(self.grid, vals, ext)
        self.last_info = info
        if laplace is not None:
            info["laplace_values"] = lap
            info["laplace_truncation"] = math.exp(-laplace * t) / laplace * sup_norm(g)
        return g

    # -- matrix route -----------------------------------------------------------

    def step_matrix(self, delta: float) -> OperatorMatrix:
        self.check_contraction(delta)
        cfg = self.cfg
        conv = self.conv
        if _is_zero(self.B):
            entries = conv.toeplitz_matrix(delta)
            ones_vals = self.T.apply(delta, one(self.grid)).values
            meta = {"t": delta, "truncation_order": 0, "residual": 0.0,
                    "quadrature_error": 0.0, "rho": self.rho}
            return OperatorMatrix(self.grid, entries, meta,
                                  ones_vals - entries.sum(axis=1))
        mesh = self.mesh(delta)
        sig, w_full, w_clip = mesh.nodes, mesh.weights, mesh.clipped
        m = sig.size
        n = self.grid.n
        lb = conv.L // 2 + 1
        bm = self.bmat()

        # spectra of the propagators, weights folded in; diagonal (the
        # T(0) = identity contribution) handled separately in physical space
        k_target = np.empty((lb, m), dtype=complex)
        for q in range(m):
            k_target[:, q] = w_full[q] * conv.khat(delta - sig[q])
        k_pair = np.zeros((lb, m, m), dtype=complex)
        for i in range(m):
            for q in range(i):
                k_pair[:, i, q] = w_clip[i, q] * conv.khat(sig[i] - sig[q])
        diag_w = np.diag(w_clip).copy()

        entries = conv.toeplitz_matrix(delta)
        op_norms = [float(np.abs(entries).sum(axis=1).max())]

        block = max(32, min(n, int(8.0e8 / (lb * m * 32))))
        order_used = 0
        residual = 0.0
        for c0 in range(0, n, block):
            c1 = min(n, c0 + block)
            cols = np.zeros((n, c1 - c0))
            cols[np.arange(c0, c1), np.arange(c1 - c0)] = 1.0
            level = np.empty((m, n, c1 - c0))
            for q in range(m):
                level[q] = conv.toeplitz_matrix(sig[q]) @ cols
            scale = 1.0
            nlev = 0
            while True:
                g = np.empty_like(level)
                for q in range(m):
                    g[q] = bm @ level[q]
                ghat = np.empty((lb, m, c1 - c0), dtype=complex)
                for q in range(m):
                    ghat[:, q, :] = conv.fhat(g[q])
                term = conv.unpack(np.einsum("fq,fqk->fk", k_target, ghat))
                entries[:, c0:c1] += term
                tn = float(np.abs(term).sum(axis=1).max())
                if c0 == 0:
                    op_norms.append(tn)
                nlev += 1
                if tn > 100.0 * op_norms[0]:
                    raise SeriesDivergence(
                        f"matrix series blowing up at step {delta} "
                        f"(term {nlev} operator norm {tn:.3e}); use a smaller cfg.step")
                if tn < cfg.series_tol * scale or nlev >= cfg.max_order:
                    if nlev >= cfg.max_order and tn >= cfg.series_tol * scale:
                        raise SeriesDivergence(
                            "matrix series did not converge; reduce cfg.step")
                    order_used = max(order_used, nlev)
                    residual = max(residual, tn)
                    break
                nxt = conv.unpack(np.matmul(k_pair, ghat).reshape(lb, -1))
                level = nxt.reshape(n, m, c1 - c0).transpose(1, 0, 2).copy()
                level += diag_w[:, None, None] * g

        ones_fn = one(self.grid)
        s_one = self.solve(delta, ones_fn)
        correction = s_one.values - entries.sum(axis=1)
        meta = {
            "t": delta,
            "truncation_order": order_used,
            "residual": residual,
            "quadrature_error": self.quad_estimate(delta),
            "rho": self.rho,
        }
        return OperatorMatrix(self.grid, entries, meta, correction)


_ENGINES: dict = {}


def _engine(B: Perturbation, T: BaseSemigroup, cfg: Optional[DysonConfig],
            rho: Optional[float]) -> _Engine:
    cfg = cfg if cfg is not None else DysonConfig()
    key = (id(B), id(T), cfg, rho)
    eng = _ENGINES.get(key)
    if eng is None or eng.B is not B or eng.T is not T:
        eng = _Engine(B, T, cfg, rho)
        _ENGINES[key] = eng
        if len(_ENGINES) > 16:
            _ENGINES.pop(next(iter(_ENGINES)))
    return eng


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def bt_apply(B: Perturbation, T: BaseSemigroup, s: float, f: GridFunction,
             rho: float) -> GridFunction:
    """Bhat T(s) f, with the smoothing bound asserted.

    The result must obey ||Bhat T(s) f|| <= 2 C_B phi(s) ||f|| where C_B is
    the declared-coefficient constant and phi the fitted smoothing
    majorant: a violation means the declared bounds or the fitted phi are
    wrong, and raises instead of silently returning.
    """
    if s <= 0.0:
        raise ValueError("s must be positive")
    out = _b_apply(B, T.apply(s, f), rho)
    eng = _engine(B, T, None, rho)
    limit = 2.0 * eng.bound_const * eng._phi(s) * sup_norm(f) + 1e-12
    got = sup_norm(out)
    if got > limit:
        raise ArithmeticError(
            f"||B T({s}) f|| = {got:.3e} exceeds the smoothing bound {limit:.3e}")
    return out


def dyson_phillips_terms(B: Perturbation, T: BaseSemigroup, t: float,
                         f: GridFunction, N: int,
                         cfg: Optional[DysonConfig] = None,
                         rho: Optional[float] = None) -> List[GridFunction]:
    """The first N + 1 series terms S_0(t) f ... S_N(t) f.

    t must lie within one contraction step; per-term sup norms are simply
    sup_norm of each entry of the returned list.
    """
    cfg = cfg if cfg is not None else DysonConfig()
    if t <= 0.0:
        raise ValueError("t must be positive")
    if t > cfg.step * (1.0 + 1e-12):
        raise ValueError(f"t={t} exceeds the series step {cfg.step}; "
                         "use duhamel_solve for long times")
    eng = _engine(B, T, cfg, rho)
    eng.check_contraction(t)
    res = eng.series_terms(t, f, n_terms=N)
    return res["terms"]


def duhamel_solve(B: Perturbation, T: BaseSemigroup, t: float, f: GridFunction,
                  cfg: Optional[DysonConfig] = None,
                  rho: Optional[float] = None) -> GridFunction:
    """S(t) f: series summation per step, steps composed to reach t.

    Diagnostics of the last call (declared residual, quadrature-error
    estimate, truncation order, contraction ratios) are available through
    :func:`last_solve_info`.
    """
    eng = _engine(B, T, cfg, rho)
    return eng.solve(t, f)


def last_solve_info(B: Perturbation, T: BaseSemigroup,
                    cfg: Optional[DysonConfig] = None,
                    rho: Optional[float] = None) -> dict:
    return dict(_engine(B, T, cfg, rho).last_info)


def one_step_matrix(B: Perturbation, T: BaseSemigroup, delta: float,
                    cfg: Optional[DysonConfig] = None,
                    rho: Optional[float] = None) -> OperatorMatrix:
    """Dense matrix of S(delta) on nodal values, plus the ones-correction.

    Columns are the series applied to the nodal hat functions (zero
    extension), assembled in blocks through batched FFT convolutions; the
    correction column is S(delta) 1 minus the matrix row sums, so the pair
    reproduces both compact data and the constant function exactly.

    One caveat: intermediate series products are zero-extended too.  For
    perturbations that send compact data to functions with a constant far
    field (the rank-one evaluation functional), the few edge rows lose
    tail mass that the function route retains; row sums and the interior
    stay exact, but state evolution near the window edge should use
    :func:`duhamel_solve` for that family.
    """
    eng = _engine(B, T, cfg, rho)
    return eng.step_matrix(delta)


def propagate(M: OperatorMatrix, m: int, f: GridFunction) -> GridFunction:
    """M^m f with the constant correction applied at every step."""
    if m < 1:
        raise ValueError("m must be at least 1")
    g = f
    for _ in range(m):
        g = M.apply(g)
    return g


def semigroup_laplace(B: Perturbation, T: BaseSemigroup, lam: float,
                      f: GridFunction, cfg: Optional[DysonConfig] = None,
                      rho: Optional[float] = None,
                      t_max: Optional[float] = None):
    """Time-quadrature Laplace transform int_0^t_max exp(-lam t) S(t) f dt.

    Returns (GridFunction, info); info carries the recorded truncation
    bound exp(-lam t_max)/lam * ||S(t_max) f||.  The quadrature reuses the
    graded mesh values of every propagation step, so the integrable
    short-time behaviour is resolved without extra solves.
    """
    if lam <= 0.0:
        raise ValueError("lam must be positive")
    if t_max is None:
        # exp(-16) keeps the tail below 1e-7/lam; two time units cap the
        # step count when lam is small (then the tail bound in the returned
        # info is the thing to watch)
        t_max = min(16.0 / lam, 2.0)
    eng = _engine(B, T, cfg, rho)
    eng.solve(t_max, f, laplace=lam)
    info = dict(eng.last_info)
    vals = info.pop("laplace_values")
    return GridFunction(T.grid, vals, f.extension), info


def estimate_BR_norm(B: Perturbation, T: BaseSemigroup, lam: float,
                     probes: Sequence[GridFunction],
                     rho: Optional[float] = None) -> float:
    """max over probes of ||Bhat R(lam) probe|| / ||probe|| — a lower bound
    for the Neumann contraction factor of the perturbed resolvent."""
    if not probes:
        raise ValueError("need at least one probe")
    eng = _engine(B, T, None, rho)
    worst = 0.0
    for p in probes:
        denom = sup_norm(p)
        if denom == 0.0:
            raise ValueError("probes must be nonzero")
        img = _b_apply(B, T.resolvent(lam, p), eng.rho)
        worst = max(worst, sup_norm(img) / denom)
    return worst


def perturbed_resolvent(B: Perturbation, T: BaseSemigroup, lam: float,
                        f: GridFunction, tol: float = 1e-8,
                        rho: Optional[float] = None,
                        max_terms: int = 200) -> GridFunction:
    """(lam - (A + Bhat))^{-1} f by the Neumann series R(lam) sum_k (Bhat R(lam))^k f.

    Raises when the contraction estimate on f is >= 1 (suggesting a larger
    lam) or when three consecutive term ratios fail to decrease.
    """
    if lam <= 0.0:
        raise ValueError("lam must be positive")
    eng = _engine(B, T, None, rho)
    q0 = estimate_BR_norm(B, T, lam, [f], rho=eng.rho)
    if q0 >= 1.0:
        raise ValueError(
            f"Neumann contraction estimate {q0:.3f} >= 1 at lam={lam}; "
            "increase lam")
    g = f
    acc = f.values.copy().astype(float)
    norms = [sup_norm(f)]
    for _ in range(max_terms):
        g = _b_apply(eng.B, T.resolvent(lam, g), eng.rho)
        nm = sup_norm(g)
        norms.append(nm)
        qhat = max(q0, norms[-1] / norms[-2] if norms[-2] > 0 else 0.0)
        acc += g.values
        if nm < tol * max(1.0 - qhat, 1e-3):
            break
        if (len(norms) >= 4 and norms[-1] >= norms[-2] >= norms[-3]
                and norms[-1] > tol):
            raise SeriesDivergence(
                f"Neumann series diverging at lam={lam} "
                f"(norms {norms[-3]:.3e}, {norms[-2]:.3e}, {norms[-1]:.3e})")
    else:
        raise ValueError("Neumann series did not reach tolerance; increase lam")
    summed = GridFunction(T.grid, acc, f.extension)
    return T.resolvent(lam, summed)


__all__ = [
    "DysonConfig",
    "OperatorMatrix",
    "SeriesDivergence",
    "bt_apply",
    "duhamel_solve",
    "dyson_phillips_terms",
    "estimate_BR_norm",
    "last_solve_info",
    "load_operator_matrix",
    "one_step_matrix",
    "perturbed_resolvent",
    "propagate",
    "semigroup_laplace",
]
