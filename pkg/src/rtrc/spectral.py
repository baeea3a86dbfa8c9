"""Frequency-space physics in rescaled units: B_nu(T) = nu^3 / (exp(nu/T) - 1).

Band integrals use the closed form T^4 [F(nu_hi/T) - F(nu_lo/T)] with
F(x) = int_0^x t^3/(e^t - 1) dt, summed from its Bernoulli series near zero
and from the exponential series sum_k e^{-kx} (x^3/k + 3x^2/k^2 + 6x/k^3 + 6/k^4)
in the tail. Both are accurate to rounding, which makes the truncation of
the spectrum at a finite nu_max unnecessary.

Band intensities are band-integrated: ``J[b]`` holds int_band J_nu dnu.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import AbsorptionModel

SIGMA = math.pi ** 4 / 15.0

# Bernoulli numbers B_0..B_40 (B_1 = -1/2, odd ones beyond vanish)
_BERNOULLI = [
    1.0, -0.5, 1 / 6, 0.0, -1 / 30, 0.0, 1 / 42, 0.0, -1 / 30, 0.0, 5 / 66, 0.0, -691 / 2730, 0.0, 7 / 6, 0.0,
    -3617 / 510, 0.0, 43867 / 798, 0.0, -174611 / 330, 0.0, 854513 / 138, 0.0, -236364091 / 2730, 0.0,
    8553103 / 6, 0.0, -23749461029 / 870, 0.0, 8615841276005 / 14322, 0.0, -7709321041217 / 510, 0.0,
    2577687858367 / 6, 0.0, -26315271553053477373 / 1919190, 0.0, 2929993913841559 / 6, 0.0,
    -261082718496449122051 / 13530,
]
_SERIES_COEF = np.array([_BERNOULLI[n] / (math.factorial(n) * (n + 3)) for n in range(len(_BERNOULLI))])
_SWITCH = 2.0  # below: Bernoulli series (radius 2 pi); above: exponential series


def planck(nu, T):
    """B_nu(T), zero at T = 0, stable for large and small nu/T."""
    nu = np.asarray(nu, dtype=float)
    T = np.asarray(T, dtype=float)
    nu, T = np.broadcast_arrays(nu, T)
    out = np.zeros(nu.shape)
    pos = T > 0
    x = np.where(pos, nu / np.where(pos, T, 1.0), np.inf)
    small = pos & (x < 1e-4)
    big = pos & ~small
    # expm1 keeps precision for moderate x and overflows cleanly to inf for large x
    with np.errstate(over="ignore"):
        out[big] = nu[big] ** 3 / np.expm1(x[big])
    xs = x[small]
    out[small] = nu[small] ** 2 * T[small] * (1.0 - xs / 2.0 + xs * xs / 12.0)
    return out if out.ndim else float(out)


def planck_cumulative(x):
    """F(x) = int_0^x t^3/(e^t - 1) dt, with F(inf) = pi^4/15."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape)
    lo = x <= _SWITCH
    xl = x[lo]
    # F(x) = sum_n B_n x^(n+3) / (n! (n+3))
    acc = np.zeros(xl.shape)
    for c in _SERIES_COEF[::-1]:
        acc = acc * xl + c
    out[lo] = acc * xl ** 3
    xh = x[~lo]
    tail = np.zeros(xh.shape)
    # beyond x ~ 745 every exp(-k x) underflows and F(x) = sigma to rounding
    finite = xh < 745.0
    xf = xh[finite]
    t = np.zeros(xf.shape)
    for k in range(1, 40):
        e = np.exp(-k * xf)
        t += e * (xf ** 3 / k + 3 * xf ** 2 / k ** 2 + 6 * xf / k ** 3 + 6 / k ** 4)
        if np.all(e < 1e-18):
            break
    tail[finite] = t
    out[~lo] = SIGMA - tail
    return out if out.ndim else float(out)


def _planck_x4(x):
    """x^4 / (e^x - 1) = x F'(x); 0 at 0 and at inf."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape)
    ok = (x > 0) & (x < 745.0)
    with np.errstate(over="ignore"):
        out[ok] = x[ok] ** 4 / np.expm1(x[ok])
    return out


def band_planck(band, T):
    """int_{nu_lo}^{nu_hi} B_nu(T) dnu; ``T`` may be an array."""
    lo, hi = float(band[0]), float(band[1])
    if not 0 <= lo <= hi:
        raise ValueError(f"ill-formed band ({lo}, {hi})")
    T = np.asarray(T, dtype=float)
    out = np.zeros(T.shape)
    pos = T > 0
    if hi > lo and np.any(pos):
        Tp = T[pos]
        out[pos] = Tp ** 4 * (planck_cumulative(hi / Tp) - planck_cumulative(lo / Tp))
    return out if out.ndim else float(out)


def band_planck_dT(band, T):
    """d/dT of :func:`band_planck`."""
    lo, hi = float(band[0]), float(band[1])
    T = np.asarray(T, dtype=float)
    out = np.zeros(T.shape)
    pos = T > 0
    if hi > lo and np.any(pos):
        Tp = T[pos]
        xl, xh = lo / Tp, hi / Tp
        diff = planck_cumulative(xh) - planck_cumulative(xl)
        # d/dT F(nu/T) = -F'(nu/T) nu / T^2, and x F'(x) = x^4/(e^x - 1)
        out[pos] = 4 * Tp ** 3 * diff - Tp ** 3 * (_planck_x4(xh) - _planck_x4(xl))
    return out if out.ndim else float(out)


def grey_temperature(jbar):
    """T = (Jbar / sigma)^(1/4)."""
    jbar = np.asarray(jbar, dtype=float)
    if np.any(jbar < 0):
        raise ValueError("Jbar must be >= 0")
    out = (jbar / SIGMA) ** 0.25
    return out if out.ndim else float(out)


@dataclass
class SpectralGrid:
    """Bands and their nodal coefficients.

    ``absorb[b]`` is kappa (1 - a) of band b at each node and ``albedo[b]``
    the scattering albedo a; nodes on a region interface get the
    volume-weighted average of the regions around them.
    """

    bands: list
    absorb: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        self.bands = [(float(lo), float(hi)) for lo, hi in self.bands]
        self.absorb = np.atleast_2d(np.asarray(self.absorb, dtype=float))
        self.albedo = np.atleast_2d(np.asarray(self.albedo, dtype=float))
        if self.absorb.shape[0] != len(self.bands) or self.albedo.shape != self.absorb.shape:
            raise ValueError("absorb/albedo must have one row per band and matching shapes")

    @property
    def n_bands(self) -> int:
        return len(self.bands)

    @property
    def n_nodes(self) -> int:
        return self.absorb.shape[1]

    @property
    def is_grey(self) -> bool:
        return self.n_bands == 1 and self.bands[0] == (0.0, math.inf) and not np.any(self.albedo)

    def band_planck(self, T) -> np.ndarray:
        """(n_bands, n_nodes) band integrals of B(T)."""
        return np.stack([band_planck(b, T) for b in self.bands])

    @classmethod
    def from_model(cls, model: AbsorptionModel, mesh) -> "SpectralGrid":
        """Nodal coefficients of ``model`` on ``mesh`` (volume-weighted over adjacent regions)."""
        weight = np.zeros(mesh.n_vertices)
        np.add.at(weight, mesh.tets.ravel(), np.repeat(mesh.volumes, 4))
        absorb, albedo = [], []
        for b in range(model.n_bands):
            kap = model.kappa_by_tag(b)[mesh.regions]
            a = model.scatter_by_tag(b)[mesh.regions]
            rows = []
            for cell in (kap * (1 - a), a):
                acc = np.zeros(mesh.n_vertices)
                np.add.at(acc, mesh.tets.ravel(), np.repeat(cell * mesh.volumes, 4))
                rows.append(acc / np.maximum(weight, 1e-300))
            absorb.append(rows[0])
            albedo.append(rows[1])
        return cls(model.bands, np.array(absorb), np.array(albedo))


@dataclass
class SpectralState:
    """Band-integrated nodal mean intensity J (n_bands, n_nodes) and nodal temperature T."""

    J: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        self.J = np.atleast_2d(np.asarray(self.J, dtype=float))
        self.T = np.asarray(self.T, dtype=float)
        if self.J.shape[1] != self.T.shape[0]:
            raise ValueError("J and T disagree on the node count")

    def copy(self) -> "SpectralState":
        return SpectralState(self.J.copy(), self.T.copy())


def _residual(grid, J, T, idx):
    r = np.zeros(len(idx))
    d = np.zeros(len(idx))
    for b, band in enumerate(grid.bands):
        c = grid.absorb[b, idx]
        r += c * (J[b] - band_planck(band, T))
        d -= c * band_planck_dT(band, T)
    return r, d


def solve_temperature(J, grid: SpectralGrid, nodes=None, max_newton: int = 50) -> np.ndarray:
    """Nodal T >= 0 with sum_b kappa_b (1 - a_b) (J_b - int_band B(T)) = 0.

    ``J`` is (n_bands, n) or (n_bands,) for one node; ``nodes`` selects the grid
    columns that go with it (default: all). Newton from the grey estimate,
    kept inside a bracket [lo, hi] that always contains the root; a step that
    leaves the bracket is replaced by bisection.
    """
    J = np.asarray(J, dtype=float)
    single = J.ndim == 1
    J = J.reshape(grid.n_bands, -1)
    idx = np.arange(J.shape[1]) if nodes is None else np.asarray(nodes)
    if len(idx) != J.shape[1]:
        raise ValueError("J columns and nodes disagree")
    c = grid.absorb[:, idx]
    if np.any(c.sum(axis=0) <= 0):
        raise ValueError("temperature undetermined: kappa (1 - a) vanishes in every band (pure scattering)")
    drive = (c * J).sum(axis=0)
    if np.any(drive < -1e-300):
        raise ValueError("sum_b kappa_b (1 - a_b) J_b must be >= 0")
    if grid.is_grey:
        T = grey_temperature(np.maximum(J[0], 0.0))
        return T[0] if single else T
    # grey start: the band weights collapse to sigma T^4 when all bands share kappa
    guess = (np.maximum(drive, 0.0) / (SIGMA * c.max(axis=0))) ** 0.25
    lo = np.zeros_like(guess)
    hi = np.maximum(10.0 * guess, 1e-300)
    # widen until the bracket holds the root (needed only for narrow bands)
    for _ in range(200):
        r_hi, _ = _residual(grid, J, hi, idx)
        bad = r_hi > 0
        if not bad.any():
            break
        hi[bad] *= 4.0
    T = np.clip(guess, lo, hi)
    scale = np.maximum(np.abs(drive), 1e-300)
    done = drive <= 0
    T[done] = 0.0
    for _ in range(max_newton):
        r, d = _residual(grid, J, T, idx)
        done |= np.abs(r) <= 1e-12 * scale
        if done.all():
            break
        lo = np.where(r > 0, T, lo)
        hi = np.where(r < 0, T, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = T - r / d
        inside = np.isfinite(step) & (step > lo) & (step < hi)
        T = np.where(done, T, np.where(inside, step, 0.5 * (lo + hi)))
    else:
        # bisection fallback for whatever Newton left unconverged
        for _ in range(200):
            r, _ = _residual(grid, J, T, idx)
            todo = (np.abs(r) > 1e-12 * scale) & ~done
            if not todo.any() or np.all(hi[todo] - lo[todo] <= 1e-15 * hi[todo]):
                break
            lo = np.where(todo & (r > 0), T, lo)
            hi = np.where(todo & (r < 0), T, hi)
            T = np.where(todo, 0.5 * (lo + hi), T)
    return T[0] if single else T


__all__ = [
    "SIGMA", "planck", "planck_cumulative", "band_planck", "band_planck_dT", "grey_temperature",
    "SpectralGrid", "SpectralState", "solve_temperature",
]
