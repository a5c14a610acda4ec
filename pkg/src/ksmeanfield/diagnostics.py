"""Discrete functionals, norms, relative entropy and rate fitting.

All integrals use the periodic midpoint rule ``h^2 * sum`` with numpy's fixed
summation order, so values do not depend on thread count.
"""

from dataclasses import dataclass, asdict
import csv
import math
import warnings

import numpy as np

from .field import (GridMismatchError, convolve, gradient, integral,
                    tail_mass as _tail_mass)

ENTROPY_FLOOR = 1e-30
LOG_FLOOR = 1e-12
TAIL_LIMIT = 1e-6
MASK_COVERAGE = 1.0 - 1e-6

CSV_COLUMNS = ("t", "mass", "m2", "ulogu", "F_lyap", "F_weighted", "l2", "l4", "sup",
               "dissipation", "min_u")


class TailMassWarning(UserWarning):
    """Mass close to the periodic boundary; moment functionals are unreliable."""


class MaskTooSmallError(ValueError):
    pass


def _same_grid(*fields):
    g = fields[0].grid
    for f in fields[1:]:
        if f.grid != g:
            raise GridMismatchError("fields live on different grids")


def mass(f):
    return integral(f)


def tail_mass(f):
    return _tail_mass(f)


def second_moment(f):
    """``int |x|^2 f`` about the box center."""
    tm = _tail_mass(f)
    if tm > TAIL_LIMIT:
        warnings.warn(f"tail mass {tm:.3g} exceeds {TAIL_LIMIT}", TailMassWarning, stacklevel=2)
    return f.grid.h**2 * float(np.sum(f.grid.r2 * f.values))


def _xlogx(v, floor):
    out = np.zeros_like(v)
    keep = v >= floor
    out[keep] = v[keep] * np.log(v[keep])
    return out


def entropy(f):
    """``int f log f`` with nodes below ``1e-30`` treated as zero."""
    return f.grid.h**2 * float(np.sum(_xlogx(f.values, ENTROPY_FLOOR)))


def _dirichlet_energy(v):
    g1, g2 = gradient(v)
    return g1.values**2 + g2.values**2


def lyapunov_F(u, v, chi, eps=0.0, mollified_v=None):
    """Free energy ``int u log u + |grad v|^2/2 + v^2/2 - u v/2 - chi u (v*j_eps)/2``.

    ``mollified_v`` is ``v * j_eps``; it defaults to ``v`` (local system).
    """
    _same_grid(u, v)
    vj = v if mollified_v is None else mollified_v
    _same_grid(u, vj)
    dens = (_xlogx(u.values, ENTROPY_FLOOR) + 0.5 * _dirichlet_energy(v) + 0.5 * v.values**2
            - 0.5 * u.values * v.values - 0.5 * chi * u.values * vj.values)
    return u.grid.h**2 * float(np.sum(dens))


def log_weight(grid):
    """``log H`` with ``H(x) = 1 / (pi (1 + |x|^2)^2)``."""
    return -math.log(math.pi) - 2.0 * np.log1p(grid.r2)


def weighted_F(u, v, chi, eps=0.0, mollified_v=None):
    """``F = lyapunov_F - int u log H``."""
    base = lyapunov_F(u, v, chi, eps, mollified_v)
    return base - u.grid.h**2 * float(np.sum(u.values * log_weight(u.grid)))


def _log_mask(u):
    keep = u.values >= LOG_FLOOR
    total = float(np.sum(u.values[u.values > 0]))
    covered = float(np.sum(u.values[keep]))
    if total <= 0 or covered < MASK_COVERAGE * total:
        raise MaskTooSmallError(f"mask covers {covered / max(total, 1e-300):.8f} of the mass")
    return keep


def dissipation(u, v, weighted=False):
    """``int u e^{-v} |grad log u - grad v|^2`` over nodes where ``u >= 1e-12``.

    ``weighted=True`` adds ``grad log(1 + |x|^2)`` inside the square.
    """
    _same_grid(u, v)
    keep = _log_mask(u)
    gu1, gu2 = gradient(u)
    gv1, gv2 = gradient(v)
    uu = np.where(keep, u.values, 1.0)
    a1 = gu1.values / uu - gv1.values
    a2 = gu2.values / uu - gv2.values
    if weighted:
        x1, x2 = u.grid.mesh
        denom = 1.0 + u.grid.r2
        a1 = a1 + 2.0 * x1 / denom
        a2 = a2 + 2.0 * x2 / denom
    dens = u.values * np.exp(-v.values) * (a1**2 + a2**2)
    return u.grid.h**2 * float(np.sum(np.where(keep, dens, 0.0)))


def lp_norm(f, p):
    if p == np.inf:
        return sup_norm(f)
    return (f.grid.h**2 * float(np.sum(np.abs(f.values) ** p))) ** (1.0 / p)


def sup_norm(f):
    return float(np.max(np.abs(f.values)))


def l1_distance(f, g):
    _same_grid(f, g)
    return f.grid.h**2 * float(np.sum(np.abs(f.values - g.values)))


def l2_distance(f, g):
    _same_grid(f, g)
    return math.sqrt(f.grid.h**2 * float(np.sum((f.values - g.values) ** 2)))


def h1_seminorm_sq(f):
    """``int |grad f|^2``."""
    return f.grid.h**2 * float(np.sum(_dirichlet_energy(f)))


@dataclass(frozen=True)
class RelativeEntropy:
    value: float
    ckp_slack: float
    l1: float
    masked_mass: float


def relative_entropy(f, g):
    """``int f log(f / g)`` over nodes with ``g >= 1e-12``, plus the
    Csiszar-Kullback-Pinsker slack ``2 H(f|g) - ||f - g||_1^2``."""
    _same_grid(f, g)
    h2 = f.grid.h**2
    keep = g.values >= LOG_FLOOR
    fpos = np.maximum(f.values, 0.0)
    total = float(np.sum(fpos))
    covered = float(np.sum(fpos[keep]))
    if total <= 0 or covered < MASK_COVERAGE * total:
        raise MaskTooSmallError(f"mask covers {covered / max(total, 1e-300):.8f} of f's mass")
    ff = fpos[keep]
    gg = g.values[keep]
    pos = ff > 0
    val = h2 * float(np.sum(ff[pos] * np.log(ff[pos] / gg[pos])))
    l1 = l1_distance(f, g)
    return RelativeEntropy(value=val, ckp_slack=2.0 * val - l1**2, l1=l1,
                           masked_mass=h2 * (total - covered))


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    residual: float


def fit_rate(points):
    """Least-squares line through ``(log scale, log error)``.

    ``residual`` is the root-mean-square deviation in log space.
    """
    pts = [(float(s), float(e)) for s, e in points]
    if len(pts) < 2:
        raise ValueError("rate fit needs at least two points")
    if any(not (s > 0 and e > 0) for s, e in pts):
        raise ValueError("rate fit needs positive scales and errors")
    x = np.log([s for s, _ in pts])
    y = np.log([e for _, e in pts])
    if np.ptp(x) == 0:
        raise ValueError("rate fit needs at least two distinct scales")
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - (slope * x + intercept)
    return RateFit(float(slope), float(intercept), float(np.sqrt(np.mean(res**2))))


@dataclass(frozen=True)
class DiagnosticsRecord:
    t: float
    mass: float
    m2: float
    ulogu: float
    F_lyap: float
    F_weighted: float
    l2: float
    l4: float
    sup: float
    dissipation: float
    min_u: float

    @property
    def lp(self):
        return {2: self.l2, 4: self.l4}

    def as_row(self):
        return [getattr(self, c) for c in CSV_COLUMNS]

    def is_finite(self):
        return all(math.isfinite(x) for x in self.as_row())


def evaluate(u, v, chi, t=0.0, mollifier=None):
    """Full record for a state; ``mollifier`` is the ``j_eps`` symbol (nonlocal mode)."""
    vj = None if mollifier is None else convolve(v, mollifier)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TailMassWarning)
        m2 = second_moment(u)
    F = lyapunov_F(u, v, chi, mollified_v=vj)
    Fw = F - u.grid.h**2 * float(np.sum(u.values * log_weight(u.grid)))
    return DiagnosticsRecord(
        t=float(t), mass=mass(u), m2=m2, ulogu=entropy(u), F_lyap=F, F_weighted=Fw,
        l2=lp_norm(u, 2), l4=lp_norm(u, 4), sup=sup_norm(u), dissipation=dissipation(u, v),
        min_u=float(np.min(u.values)))


def format_float(x):
    return f"{x:.17g}"


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([format_float(x) if isinstance(x, float) else x for x in row])


def write_records(path, records):
    write_csv(path, CSV_COLUMNS, (r.as_row() for r in records))


def read_records(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [DiagnosticsRecord(**{k: float(row[k]) for k in CSV_COLUMNS}) for row in rows]


def record_dict(record):
    return asdict(record)
