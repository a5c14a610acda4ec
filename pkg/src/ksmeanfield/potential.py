"""Yukawa interaction, mollifiers and the tabulated mollified potential.

The interaction is ``Phi = chi * K0(|x|) / (2 pi)``, the Green function of
``-Laplace + 1`` on the plane.  Particle pair sums use ``Phi_eps = Phi * j_eps``
stored as a radial table.
"""

from dataclasses import dataclass, field
from functools import lru_cache
import math

import numpy as np
from scipy import integrate, optimize, special

SMOOTH_BUMP = "smooth-bump"
TRUNCATED_GAUSSIAN = "truncated-gaussian"
MOLLIFIER_KINDS = (SMOOTH_BUMP, TRUNCATED_GAUSSIAN)

# width of the truncated gaussian in units of the support radius
_TG_SIGMA = 1.0 / 3.0
# tail criterion for the table truncation radius
TAIL_RATIO = 1e-12


class QuadratureError(RuntimeError):
    """Raised when the convolution quadrature misses its tolerance."""


@dataclass(frozen=True)
class MollifierSpec:
    kind: str = SMOOTH_BUMP
    epsilon: float = 0.1

    def __post_init__(self):
        if self.kind not in MOLLIFIER_KINDS:
            raise ValueError(f"unknown mollifier kind {self.kind!r}")
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def _raw_profile(kind, s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = s < 1.0
    if kind == SMOOTH_BUMP:
        out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    else:
        out[inside] = np.exp(-0.5 * (s[inside] / _TG_SIGMA) ** 2)
    return out


@lru_cache(maxsize=None)
def _normalization(kind):
    # c such that 2 pi c int_0^1 s j_raw(s) ds = 1
    val, _ = integrate.quad(lambda s: s * _raw_profile(kind, s), 0.0, 1.0,
                            epsabs=1e-15, epsrel=1e-13, limit=200)
    return 1.0 / (2.0 * np.pi * val)


def base_profile(kind, s):
    """Radial profile of the unit-scale mollifier, ``j(x) = profile(|x|)``."""
    return _normalization(kind) * _raw_profile(kind, s)


def mollifier_eval(spec, x):
    """Evaluate ``j_eps(x) = eps^-2 j(x / eps)`` at planar point(s) ``x``."""
    x = np.asarray(x, dtype=float)
    r = np.hypot(x[..., 0], x[..., 1])
    return base_profile(spec.kind, r / spec.epsilon) / spec.epsilon**2


@lru_cache(maxsize=None)
def _gauss_nodes(kind, n=400):
    t, w = np.polynomial.legendre.leggauss(n)
    s = 0.5 * (t + 1.0)
    w = 0.5 * w
    weights = 2.0 * np.pi * w * s * base_profile(kind, s)
    return s, weights / weights.sum()


def mollifier_symbol(spec, k):
    """Fourier transform of ``j_eps`` at wavenumber magnitude(s) ``k``.

    Hankel transform of the radial profile by Gauss-Legendre quadrature,
    normalized so the value at ``k = 0`` is exactly 1.
    """
    k = np.asarray(k, dtype=float)
    s, w = _gauss_nodes(spec.kind)
    xi = (spec.epsilon * k).ravel()
    out = np.empty_like(xi)
    chunk = 4096
    for start in range(0, xi.size, chunk):
        block = xi[start:start + chunk]
        out[start:start + chunk] = special.j0(np.outer(block, s)) @ w
    return out.reshape(k.shape)


def bessel_k0(x):
    """Modified Bessel function of the second kind, order zero.

    Raises
    ------
    ValueError
        If any argument is not strictly positive.
    """
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("bessel_k0 requires x > 0")
    out = special.k0(x)
    return out if out.ndim else float(out)


def yukawa_eval(chi, r):
    """``chi * K0(r) / (2 pi)``."""
    if not chi > 0:
        raise ValueError("chi must be positive")
    return chi * bessel_k0(r) / (2.0 * np.pi)


def yukawa_gradient_norm(chi, r):
    """``|grad Phi|`` at radius ``r``; ``K0' = -K1``."""
    r = np.asarray(r, dtype=float)
    if np.any(~(r > 0)):
        raise ValueError("r must be positive")
    return chi * special.k1(r) / (2.0 * np.pi)


@dataclass(frozen=True)
class PotentialTable:
    """Radial samples of ``Phi_eps``; values vanish beyond ``r_max``."""

    chi: float
    spec: MollifierSpec
    radii: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    r_max: float = 0.0
    # geometric-offset mapping r_k = scale * expm1(k * rate), used by fast kernels
    scale: float = 0.0
    rate: float = 0.0

    @property
    def center_value(self):
        return float(self.values[0])

    def to_csv(self, path):
        data = np.column_stack([self.radii, self.values])
        np.savetxt(path, data, delimiter=",", header="radius,value", comments="", fmt="%.17g")


def _outer_factor(spec):
    # Phi_eps / K0 for |x| >= eps: int j_eps(y) I0(|y|) dy / (2 pi)
    s, w = _gauss_nodes(spec.kind)
    return float(w @ special.i0(spec.epsilon * s)) / (2.0 * np.pi)


def _inner_values(kind, eps, r, tol):
    """Unit-chi ``Phi_eps(r)`` for ``0 <= r < eps``.

    Angular averaging of K0 around a circle gives ``K0(max) I0(min)`` (Graf's
    addition theorem), reducing the planar convolution to a radial integral
    split at the kink ``s = r``.
    """
    r = np.asarray(r, dtype=float)
    rho = r / eps
    norm = _normalization(kind)
    k0_r = np.where(r > 0, special.k0(np.where(r > 0, r, 1.0)), 0.0)
    i0_r = special.i0(r)

    def integrand(t):
        s1 = rho * t
        first = rho * s1 * _raw_profile(kind, s1) * special.i0(eps * s1) * k0_r
        s2 = rho + (1.0 - rho) * t
        arg = np.maximum(eps * s2, 1e-300)
        second = (1.0 - rho) * s2 * _raw_profile(kind, s2) * special.k0(arg) * i0_r
        return norm * (first + second)

    vals, err = integrate.quad_vec(integrand, 0.0, 1.0, epsabs=0.0, epsrel=tol,
                                   norm="max", limit=2000)
    if not np.all(np.isfinite(vals)) or err > 10 * tol * np.max(np.abs(vals)):
        raise QuadratureError(f"Phi_eps quadrature error {err:.3g} above tolerance")
    return vals


def phi_eps_exact(chi, spec, r, tol=1e-11):
    """``Phi_eps`` at arbitrary radii without tabulation."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    out = np.empty_like(r)
    inner = r < spec.epsilon
    if inner.any():
        out[inner] = _inner_values(spec.kind, spec.epsilon, r[inner], tol)
    if (~inner).any():
        out[~inner] = _outer_factor(spec) * special.k0(r[~inner])
    return chi * out


def build_potential_table(chi, spec, n_samples=8192):
    """Tabulate ``Phi_eps = Phi * j_eps`` on a radial grid from 0 to ``r_max``.

    Radii follow ``r_k = a * (exp(k * rate) - 1)`` with ``a = eps / 32`` so the
    spacing is fine inside the mollifier support and grows geometrically in the
    exponential tail.  ``r_max`` is the smallest radius where the value drops
    below ``TAIL_RATIO`` times the central value.
    """
    if not chi > 0:
        raise ValueError("chi must be positive")
    if n_samples < 256:
        raise ValueError("n_samples must be >= 256")
    eps = spec.epsilon
    center = phi_eps_exact(1.0, spec, [0.0])[0]
    outer = _outer_factor(spec)
    target = TAIL_RATIO * center / outer
    lo = max(eps, 1.0)
    r_max = optimize.brentq(lambda r: math.log(special.k0e(r)) - r - math.log(target),
                            lo, 800.0, xtol=1e-12)
    r_max = r_max * (1.0 + 1e-9)
    scale = eps / 32.0
    rate = math.log1p(r_max / scale) / (n_samples - 1)
    radii = scale * np.expm1(rate * np.arange(n_samples))
    radii[0] = 0.0
    radii[-1] = r_max
    base = phi_eps_exact(1.0, spec, radii)
    values = chi * base
    if not (np.all(np.isfinite(values)) and np.all(values > 0)):
        raise QuadratureError("non-finite or non-positive potential values")
    # monotone by construction of the kernel; enforce against round-off ties
    values = np.minimum.accumulate(values)
    values.setflags(write=False)
    radii.setflags(write=False)
    return PotentialTable(chi=float(chi), spec=spec, radii=radii, values=values,
                          r_max=float(r_max), scale=scale, rate=rate)


def scaled_table(table, chi):
    """Same table for another coupling strength (values are linear in chi)."""
    values = table.values / table.chi * chi
    values.setflags(write=False)
    return PotentialTable(chi=float(chi), spec=table.spec, radii=table.radii, values=values,
                          r_max=table.r_max, scale=table.scale, rate=table.rate)


def zero_table(spec, n_samples=256, r_max=1.0):
    """A table of zeros (the chi -> 0 limit), used for reduction checks."""
    radii = np.linspace(0.0, r_max, n_samples)
    values = np.zeros(n_samples)
    return PotentialTable(chi=0.0, spec=spec, radii=radii, values=values, r_max=r_max)


def phi_eps_lookup(table, x):
    """Piecewise-linear radial lookup of the table at planar point(s) ``x``."""
    x = np.asarray(x, dtype=float)
    r = np.hypot(x[..., 0], x[..., 1])
    out = np.interp(r, table.radii, table.values, right=0.0)
    return out if out.ndim else float(out)
