"""Grid-accelerated pair sums for the mollified Yukawa interaction.

``Phi_eps`` is split in Fourier space as

    chi j(eps k) / (1 + k^2) = chi j(eps k) e^{-a (1 + k^2)} / (1 + k^2)        (long range)
                             + chi j(eps k) (1 - e^{-a (1 + k^2)}) / (1 + k^2)  (short range)

The long-range part is smooth.  Particles are spread onto a periodic grid
with a gaussian of variance ``a`` per axis, convolved spectrally and
gathered back with the same gaussian.  The short-range part is
``int_0^a e^{-s} (heat kernel at time s) ds`` mollified, so it decays like
``exp(-r^2 / 4a)`` and is summed directly over neighbouring cells.
"""

import math

import numba
import numpy as np
from scipy import special

from . import field as fld
from .potential import mollifier_symbol

# periodic images are at least 2 * PAD apart; K0(2 * PAD) ~ 1e-11
PAD = 12.0
# gaussian spreading is cut where the weight falls below exp(-CUT^2 / 2)
CUT = 7.0
SHORT_TOL = 1e-12


def long_range_profile(table, a, r, n_nodes=4000):
    """Radial profile of the long-range kernel by Hankel quadrature."""
    k_max = 7.0 / math.sqrt(a)
    t, w = np.polynomial.legendre.leggauss(n_nodes)
    k = 0.5 * k_max * (t + 1.0)
    w = 0.5 * k_max * w
    sym = mollifier_symbol(table.spec, k) * np.exp(-a * (1.0 + k * k)) / (1.0 + k * k)
    r = np.asarray(r, dtype=float)
    out = np.empty(r.shape)
    flat = r.ravel()
    res = out.ravel()
    for start in range(0, flat.size, 512):
        block = flat[start:start + 512]
        res[start:start + 512] = special.j0(np.outer(block, k)) @ (w * k * sym)
    return table.chi * out / (2.0 * np.pi)


class ShortRangeTable:
    """``Phi_eps - long range`` on the table radii, truncated where negligible."""

    def __init__(self, table, a):
        self.a = a
        full = np.asarray(table.values) - long_range_profile(table, a, table.radii)
        big = np.nonzero(np.abs(full) > SHORT_TOL * max(table.center_value, 1e-300))[0]
        last = min(int(big[-1]) + 2, full.size - 1) if big.size else 1
        self.radii = np.ascontiguousarray(table.radii[:last + 1])
        self.values = np.ascontiguousarray(full[:last + 1])
        self.values[-1] = 0.0
        self.cutoff = float(self.radii[-1])


@numba.njit(cache=True)
def _short_sums(pos, cell_start, cell_order, ncell, origin, width, radii, values):
    n = pos.shape[0]
    out = np.zeros(n)
    m = radii.shape[0]
    rc = radii[m - 1]
    for i in range(n):
        cx = int((pos[i, 0] - origin) / width)
        cy = int((pos[i, 1] - origin) / width)
        acc = 0.0
        for gx in range(max(cx - 1, 0), min(cx + 2, ncell)):
            for gy in range(max(cy - 1, 0), min(cy + 2, ncell)):
                c = gx * ncell + gy
                for q in range(cell_start[c], cell_start[c + 1]):
                    j = cell_order[q]
                    r = math.hypot(pos[i, 0] - pos[j, 0], pos[i, 1] - pos[j, 1])
                    if r >= rc:
                        continue
                    lo, hi = 0, m - 1
                    while hi - lo > 1:
                        mid = (lo + hi) // 2
                        if radii[mid] <= r:
                            lo = mid
                        else:
                            hi = mid
                    slope = (values[lo + 1] - values[lo]) / (radii[lo + 1] - radii[lo])
                    acc += slope * (r - radii[lo]) + values[lo]
        out[i] = acc
    return out


def _cell_lists(pos, width):
    origin = float(pos.min()) - 1e-9
    extent = float(pos.max()) - origin
    ncell = max(1, int(extent / width) + 1)
    cx = ((pos[:, 0] - origin) / width).astype(np.int64)
    cy = ((pos[:, 1] - origin) / width).astype(np.int64)
    cell = cx * ncell + cy
    order = np.argsort(cell, kind="stable")
    counts = np.bincount(cell, minlength=ncell * ncell)
    start = np.zeros(ncell * ncell + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    return start, order.astype(np.int64), ncell, origin


def _spread_weights(coord, grid, sd, w):
    # gaussian weights of each particle on its 2w+2 nearest nodes along one axis
    h = grid.h
    base = np.floor((coord + grid.half_width) / h).astype(np.int64) - w
    idx = base[:, None] + np.arange(2 * w + 2)
    x = -grid.half_width + idx * h
    g = np.exp(-0.5 * ((x - coord[:, None]) / sd) ** 2) / (math.sqrt(2 * math.pi) * sd)
    return idx % grid.n, g


class GridSummer:
    """Reusable pair-sum evaluator for one potential table.

    Parameters
    ----------
    table : PotentialTable
    a : float
        Splitting parameter; the long-range kernel carries ``exp(-a (1 + k^2))``.
    """

    def __init__(self, table, a=0.01):
        if not a > 0:
            raise ValueError("splitting parameter must be positive")
        self.table = table
        self.a = a
        self.short = ShortRangeTable(table, a)
        self._grid = None
        self._symbol = None

    def _grid_for(self, pos):
        half = float(np.max(np.abs(pos))) + PAD
        h_target = 0.5 * math.sqrt(self.a)
        n = 64
        while 2 * half / n > h_target:
            n *= 2
        grid = fld.Grid2D(half_width=half, n=n)
        if self._grid is None or self._grid.n != n or self._grid.half_width < half \
                or self._grid.half_width > 1.5 * half:
            k = np.sqrt(grid.k2)
            sym = (self.table.chi * math.exp(-self.a) * mollifier_symbol(self.table.spec, k)
                   / (1.0 + grid.k2))
            self._grid, self._symbol = grid, sym
        return self._grid

    def long_range(self, pos):
        grid = self._grid_for(pos)
        sd = math.sqrt(self.a)
        w = int(math.ceil(CUT * sd / grid.h))
        ix, gx = _spread_weights(pos[:, 0], grid, sd, w)
        iy, gy = _spread_weights(pos[:, 1], grid, sd, w)
        flat = (ix[:, :, None] * grid.n + iy[:, None, :]).ravel()
        wts = (gx[:, :, None] * gy[:, None, :]).ravel()
        rho = np.bincount(flat, weights=wts, minlength=grid.n * grid.n).reshape(grid.n, grid.n)
        # rho is a density, so the spectral product is already the convolution integral
        pot = fld.inverse(fld.forward(rho) * self._symbol, grid.n)
        vals = (pot.ravel()[flat] * wts).reshape(pos.shape[0], -1)
        return grid.h**2 * vals.sum(axis=1)

    def short_range(self, pos):
        start, order, ncell, origin = _cell_lists(pos, self.short.cutoff)
        return _short_sums(pos, start, order, ncell, origin, self.short.cutoff,
                           self.short.radii, self.short.values)

    def __call__(self, pos, exclude_self=False):
        pos = np.ascontiguousarray(pos, dtype=float)
        n = pos.shape[0]
        total = self.long_range(pos) + self.short_range(pos)
        if exclude_self:
            total = total - self.table.center_value
        return total / n


_CACHE = {}


def grid_pair_sums(ens, table, exclude_self=False, a=0.01):
    """Fast-path counterpart of ``particles.pair_sums``."""
    key = (id(table), a)
    summer = _CACHE.get(key)
    if summer is None or summer.table is not table:
        _CACHE.clear()
        summer = GridSummer(table, a)
        _CACHE[key] = summer
    return summer(ens.positions, exclude_self)
