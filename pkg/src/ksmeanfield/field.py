"""Scalar fields on a periodic square grid and the spectral toolbox around them.

The box is ``[-L, L)^2`` with ``n`` nodes per axis, node ``i`` at ``-L + i h``.
Array index ``[i, j]`` addresses the node ``(x1_i, x2_j)``.  Transforms are real
FFTs, so symbols live on the ``(n, n // 2 + 1)`` half-spectrum.
"""

from dataclasses import dataclass, field, replace
from functools import cached_property
import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np
import scipy.fft as sfft

from .potential import mollifier_eval, mollifier_symbol

DENSITY = "density"
CONCENTRATION = "concentration"
GENERIC = "generic"
ROLES = (DENSITY, CONCENTRATION, GENERIC)

SNAPSHOT_FORMAT = "ksmeanfield-field/1"

_workers = 1


def set_workers(k):
    """Cap the FFT worker count.  Results do not depend on it."""
    global _workers
    _workers = max(1, int(k))


class GridMismatchError(ValueError):
    pass


class SnapshotError(OSError):
    """Unreadable, inconsistent or corrupted snapshot on disk."""


@dataclass(frozen=True)
class Grid2D:
    half_width: float = 16.0
    n: int = 256

    def __post_init__(self):
        n = self.n
        if n < 64 or n & (n - 1):
            raise ValueError(f"n must be a power of two >= 64, got {n}")
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")

    @property
    def h(self):
        return 2.0 * self.half_width / self.n

    @property
    def area(self):
        return (2.0 * self.half_width) ** 2

    @cached_property
    def x(self):
        return -self.half_width + self.h * np.arange(self.n)

    @cached_property
    def mesh(self):
        return np.meshgrid(self.x, self.x, indexing="ij")

    @cached_property
    def r2(self):
        x1, x2 = self.mesh
        return x1**2 + x2**2

    @cached_property
    def kx(self):
        return (2.0 * np.pi * np.fft.fftfreq(self.n, d=self.h))[:, None]

    @cached_property
    def ky(self):
        return (2.0 * np.pi * np.fft.rfftfreq(self.n, d=self.h))[None, :]

    @cached_property
    def k2(self):
        return self.kx**2 + self.ky**2

    @cached_property
    def kx_deriv(self):
        # odd derivatives drop the unpaired Nyquist mode
        k = self.kx.copy()
        k[self.n // 2, 0] = 0.0
        return k

    @cached_property
    def ky_deriv(self):
        k = self.ky.copy()
        k[0, -1] = 0.0
        return k

    def to_dict(self):
        return {"half_width": self.half_width, "n": self.n}


@dataclass(frozen=True)
class DensityField:
    grid: Grid2D
    values: np.ndarray = field(repr=False)
    role: str = GENERIC

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.values.shape != (self.grid.n, self.grid.n):
            raise ValueError(f"values shape {self.values.shape} does not match grid")

    def with_values(self, values, role=None):
        return replace(self, values=values, role=role or self.role)

    def __add__(self, other):
        _check_same_grid(self, other)
        return self.with_values(self.values + other.values, GENERIC)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return self.with_values(self.values - other.values, GENERIC)

    def __mul__(self, scalar):
        return self.with_values(self.values * scalar)

    __rmul__ = __mul__


@dataclass(frozen=True)
class SpectralSymbol:
    """A Fourier multiplier on the half-spectrum of a grid."""

    grid: Grid2D
    values: np.ndarray = field(repr=False)


def _check_same_grid(*items):
    g = items[0].grid
    for it in items[1:]:
        if it.grid != g:
            raise GridMismatchError(f"grid {it.grid} differs from {g}")


def forward(values):
    return sfft.rfft2(values, workers=_workers)


def inverse(coeffs, n):
    return sfft.irfft2(coeffs, s=(n, n), workers=_workers)


def constant(grid, c, role=GENERIC):
    return DensityField(grid, np.full((grid.n, grid.n), float(c)), role)


def sample(grid, func, role=GENERIC):
    """Sample ``func(x1, x2)`` on the grid nodes."""
    x1, x2 = grid.mesh
    return DensityField(grid, np.asarray(func(x1, x2), dtype=float), role)


def gaussian(grid, variance, center=(0.0, 0.0), role=DENSITY):
    """Isotropic gaussian density ``N(center, variance I)`` sampled on the nodes."""
    x1, x2 = grid.mesh
    d2 = (x1 - center[0]) ** 2 + (x2 - center[1]) ** 2
    vals = np.exp(-0.5 * d2 / variance) / (2.0 * np.pi * variance)
    return DensityField(grid, vals, role)


def periodic_offsets(grid):
    """Minimum-image coordinates of every node relative to the origin node."""
    x = grid.x
    d = np.where(x < 0, x + 2 * grid.half_width, x)
    d = np.where(d >= grid.half_width, d - 2 * grid.half_width, d)
    return np.meshgrid(d, d, indexing="ij")


def kernel_symbol_from_samples(grid, kernel_values):
    """Symbol of a kernel given by its samples with the origin at the box center."""
    shifted = np.fft.ifftshift(kernel_values)
    return SpectralSymbol(grid, grid.h**2 * forward(shifted))


def mollifier_kernel(spec, grid, method="analytic"):
    """Fourier multiplier of ``j_eps``.

    ``analytic`` uses the exact Hankel transform, which mollifies the band-limited
    interpolant exactly at any ``eps``.  ``sampled`` uses the discrete kernel
    normalized to unit discrete mass; it needs ``eps >= 4 h`` to resolve ``j_eps``.
    """
    if method == "analytic":
        return SpectralSymbol(grid, mollifier_symbol(spec, np.sqrt(grid.k2)))
    if method == "sampled":
        x1, x2 = grid.mesh
        vals = mollifier_eval(spec, np.stack([x1, x2], axis=-1))
        mass = grid.h**2 * vals.sum()
        if mass <= 0:
            raise ValueError("mollifier not resolved by the grid")
        return kernel_symbol_from_samples(grid, vals / mass)
    raise ValueError(f"unknown symbol method {method!r}")


def helmholtz_kernel(grid, chi=1.0):
    """Multiplier ``chi / (1 + |k|^2)`` of the periodic screened-Poisson solve."""
    return SpectralSymbol(grid, chi / (1.0 + grid.k2))


def gaussian_kernel(grid, variance):
    return SpectralSymbol(grid, np.exp(-0.5 * variance * grid.k2))


def convolve(f, kernel):
    """Periodic convolution ``f * kernel`` through the FFT."""
    _check_same_grid(f, kernel)
    out = inverse(forward(f.values) * kernel.values, f.grid.n)
    return f.with_values(out)


def helmholtz_solve(rhs):
    """Solve ``-Laplace v + v = rhs`` on the periodic grid."""
    grid = rhs.grid
    out = inverse(forward(rhs.values) / (1.0 + grid.k2), grid.n)
    return DensityField(grid, out, CONCENTRATION)


def gradient(f):
    """Spectral partial derivatives ``(d/dx1 f, d/dx2 f)``."""
    grid = f.grid
    fh = forward(f.values)
    d1 = inverse(1j * grid.kx_deriv * fh, grid.n)
    d2 = inverse(1j * grid.ky_deriv * fh, grid.n)
    return f.with_values(d1, GENERIC), f.with_values(d2, GENERIC)


def laplacian(f):
    grid = f.grid
    return f.with_values(inverse(-grid.k2 * forward(f.values), grid.n), GENERIC)


def wrap(grid, points):
    """Map planar points into the periodic box ``[-L, L)^2``."""
    L = grid.half_width
    return np.mod(np.asarray(points, dtype=float) + L, 2.0 * L) - L


def interpolate(f, points):
    """Bilinear interpolation of ``f`` at planar point(s), periodic wrap-around."""
    grid = f.grid
    p = np.asarray(points, dtype=float)
    s = np.mod(p + grid.half_width, 2.0 * grid.half_width) / grid.h
    i0 = np.floor(s).astype(np.int64)
    w = s - i0
    n = grid.n
    i0 %= n
    i1 = (i0 + 1) % n
    a, b = i0[..., 0], i0[..., 1]
    a1, b1 = i1[..., 0], i1[..., 1]
    wx, wy = w[..., 0], w[..., 1]
    v = f.values
    out = ((1.0 - wx) * ((1.0 - wy) * v[a, b] + wy * v[a, b1])
           + wx * ((1.0 - wy) * v[a1, b] + wy * v[a1, b1]))
    return out if out.ndim else float(out)


def kde(points, bandwidth, grid, clamp=False, chunk=8192):
    """Gaussian kernel density estimate deposited on the grid nodes.

    The kernel is separable, so the deposit is ``G1^T G2`` with ``G1, G2`` the
    per-axis kernel weights of every point (minimum-image distances).  The result
    is normalized to unit discrete mass.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("kde of an empty ensemble")
    if bandwidth < 2.0 * grid.h * (1.0 - 1e-12):
        raise ValueError(f"bandwidth {bandwidth} below 2h = {2 * grid.h}")
    L = grid.half_width
    x = grid.x
    acc = np.zeros((grid.n, grid.n))
    for start in range(0, pts.shape[0], chunk):
        block = pts[start:start + chunk]
        g = []
        for axis in (0, 1):
            d = x[None, :] - block[:, axis:axis + 1]
            d = np.mod(d + L, 2.0 * L) - L
            g.append(np.exp(-0.5 * (d / bandwidth) ** 2))
        acc += g[0].T @ g[1]
    mass = grid.h**2 * acc.sum()
    vals = acc / mass
    if clamp:
        vals = np.maximum(vals, 0.0)
    return DensityField(grid, vals, DENSITY)


def integral(f):
    """Midpoint (periodic trapezoid) rule ``h^2 * sum``."""
    return f.grid.h**2 * float(np.sum(f.values))


def tail_mass(f):
    """Mass outside the inner square ``|x|_inf <= L / 2``."""
    x1, x2 = f.grid.mesh
    outer = np.maximum(np.abs(x1), np.abs(x2)) > 0.5 * f.grid.half_width
    return f.grid.h**2 * float(np.sum(np.abs(f.values[outer])))


# ---------------------------------------------------------------- snapshots


def save_field(stem, f, t=0.0, meta=None):
    """Write ``stem.json`` (header) and ``stem.f64`` (row-major little-endian data)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(f.values, dtype="<f8").tobytes()
    data_path = stem.with_suffix(".f64")
    header = {
        "format": SNAPSHOT_FORMAT,
        "grid": f.grid.to_dict(),
        "role": f.role,
        "t": float(t),
        "endianness": "little",
        "dtype": "float64",
        "order": "row-major",
        "shape": [f.grid.n, f.grid.n],
        "data_file": data_path.name,
        "sha256": hashlib.sha256(data).hexdigest(),
        "meta": meta or {},
    }
    _atomic_write(data_path, data)
    _atomic_write(stem.with_suffix(".json"), json.dumps(header, indent=2).encode())
    return stem.with_suffix(".json")


def load_field(header_path):
    """Read a snapshot written by :func:`save_field`; returns ``(field, header)``."""
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text())
        if header.get("format") != SNAPSHOT_FORMAT or header.get("endianness") != "little":
            raise SnapshotError(f"{header_path}: not a little-endian field snapshot")
        grid = Grid2D(float(header["grid"]["half_width"]), int(header["grid"]["n"]))
        raw = (header_path.parent / header["data_file"]).read_bytes()
    except SnapshotError:
        raise
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise SnapshotError(f"{header_path}: {exc}") from exc
    if len(raw) != 8 * grid.n * grid.n:
        raise SnapshotError(f"{header_path}: data size {len(raw)} does not match grid")
    if "sha256" in header and hashlib.sha256(raw).hexdigest() != header["sha256"]:
        raise SnapshotError(f"{header_path}: checksum mismatch")
    vals = np.frombuffer(raw, dtype="<f8").reshape(grid.n, grid.n).astype(np.float64)
    try:
        f = DensityField(grid, vals, header["role"])
    except ValueError as exc:
        raise SnapshotError(f"{header_path}: {exc}") from exc
    return f, header


def _atomic_write(path, payload):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def gaussian_mixture_density(grid, weights, centers, variances):
    """Sample a mixture of isotropic gaussians and renormalize to unit discrete mass."""
    vals = np.zeros((grid.n, grid.n))
    for w, c, var in zip(weights, centers, variances):
        vals += w * gaussian(grid, var, c).values
    mass = grid.h**2 * vals.sum()
    if not math.isfinite(mass) or mass <= 0:
        raise ValueError("mixture has no mass on the grid")
    return DensityField(grid, vals / mass, DENSITY)
