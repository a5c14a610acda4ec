"""Euler-Maruyama ensembles for the interacting, intermediate and limiting systems.

All three systems are driven by the same counter-based Brownian increments, so
running them side by side gives a pathwise coupling:

* interacting:  dX_i = sqrt(2 exp(-(1/N) sum_j Phi_eps(X_i - X_j)) + 2) dB_i
* intermediate: dX_i = sqrt(2 exp(-v_eps(t, X_i)) + 2) dB_i   (nonlocal PDE)
* limiting:     dX_i = sqrt(2 exp(-v(t, X_i)) + 2) dB_i       (local PDE)
"""

from dataclasses import dataclass, field, replace
import hashlib
import json
import math
from pathlib import Path

import numba
import numpy as np

from . import rng
from .field import SnapshotError, interpolate, kde, _atomic_write
from .diagnostics import l1_distance, mass
from .fastsum import grid_pair_sums

INTERACTING = "interacting"
INTERMEDIATE = "intermediate"
LIMITING = "limiting"
SYSTEM_TAGS = (INTERACTING, INTERMEDIATE, LIMITING)

SQRT2 = math.sqrt(2.0)
# tolerance on the upper coefficient bound for spectral ringing in v
_COEF_SLACK = 1e-9

ENSEMBLE_FORMAT = "ksmeanfield-ensemble/1"


class CoefficientBoundError(ArithmeticError):
    pass


class NonFinitePositionError(ArithmeticError):
    pass


class TimeGridError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture of isotropic gaussians: ``sum_c w_c N(center_c, var_c I)``."""

    weights: tuple = (1.0,)
    centers: tuple = ((0.0, 0.0),)
    variances: tuple = (0.5,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if not (len(self.weights) == len(self.centers) == len(self.variances)) or w.size == 0:
            raise ValueError("mixture components have inconsistent lengths")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if any(not v > 0 for v in self.variances):
            raise ValueError("mixture variances must be positive")
        if any(len(c) != 2 for c in self.centers):
            raise ValueError("mixture centers must be planar points")

    def density(self, grid):
        from .field import gaussian_mixture_density
        return gaussian_mixture_density(grid, self.weights, self.centers, self.variances)

    def to_dict(self):
        return {"weights": list(self.weights), "centers": [list(c) for c in self.centers],
                "variances": list(self.variances)}


@dataclass(frozen=True)
class SdeConfig:
    n_particles: int
    epsilon: float | None = 0.3
    chi: float = 1.0
    dt: float = 5e-3
    t_end: float = 0.5
    seed: int = 0
    lam: float | None = None
    n_replicas: int = 1
    exclude_self: bool = False
    pair_sum: str = "direct"

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if not (self.dt > 0 and self.t_end > 0):
            raise ValueError("dt and t_end must be positive")
        steps = self.t_end / self.dt
        if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
            raise ValueError("t_end must be an integer multiple of dt")
        if self.lam is None and not (self.epsilon and self.epsilon > 0):
            raise ValueError("either epsilon > 0 or lam must be given")
        if self.lam is not None:
            if not self.lam > 0:
                raise ValueError("lam must be positive")
            if self.n_particles < 2:
                raise ValueError("the logarithmic cut-off needs N >= 2")
        if self.n_replicas < 1:
            raise ValueError("n_replicas must be >= 1")
        if self.pair_sum not in ("direct", "grid"):
            raise ValueError(f"unknown pair_sum {self.pair_sum!r}")

    @property
    def effective_epsilon(self):
        if self.lam is not None:
            return cutoff_epsilon(self.lam, self.n_particles)
        return float(self.epsilon)

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))


def cutoff_epsilon(lam, n):
    """Logarithmic cut-off ``eps = (lam * ln N)^(-1/4)``."""
    return (lam * math.log(n)) ** -0.25


@dataclass(frozen=True)
class ParticleEnsemble:
    positions: np.ndarray = field(repr=False)
    ids: np.ndarray = field(repr=False)
    t: float = 0.0
    system_tag: str = INTERACTING
    seed: int = 0
    step: int = 0

    def __post_init__(self):
        if self.system_tag not in SYSTEM_TAGS:
            raise ValueError(f"unknown system tag {self.system_tag!r}")
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValueError("positions must have shape (N, 2)")
        if self.ids.shape != (self.positions.shape[0],):
            raise ValueError("one stream id per particle required")

    @property
    def n(self):
        return self.positions.shape[0]

    def retag(self, tag):
        return replace(self, system_tag=tag)

    def max_abs_coordinate(self):
        return float(np.max(np.abs(self.positions)))


def sample_initial(mixture, n, seed, system_tag=INTERACTING):
    """``n`` i.i.d. draws from the mixture (component choice + Box-Muller)."""
    if n < 1:
        raise ValueError("need at least one particle")
    ids = np.arange(n, dtype=np.int64)
    u_comp, _ = rng.uniform_pairs(seed, ids, rng.INITIAL, 0)
    z = rng.standard_normal_pairs(seed, ids, rng.INITIAL, 1)
    cum = np.cumsum(mixture.weights)
    cum[-1] = 1.0
    comp = np.searchsorted(cum, u_comp, side="right")
    comp = np.minimum(comp, len(cum) - 1)
    centers = np.asarray(mixture.centers, dtype=float)[comp]
    sd = np.sqrt(np.asarray(mixture.variances, dtype=float))[comp]
    pos = centers + sd[:, None] * z
    return ParticleEnsemble(pos, ids, 0.0, system_tag, int(seed), 0)


# ------------------------------------------------------------- pair sums


@numba.njit(cache=True, inline="always")
def _lookup(r, radii, values, scale, rate):
    m = radii.shape[0]
    if r > radii[m - 1]:
        return 0.0
    if rate > 0.0:
        k = int(math.log1p(r / scale) / rate)
        if k > m - 2:
            k = m - 2
        while k > 0 and r < radii[k]:
            k -= 1
        while k < m - 2 and r >= radii[k + 1]:
            k += 1
    else:
        lo, hi = 0, m - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if radii[mid] <= r:
                lo = mid
            else:
                hi = mid
        k = lo
    slope = (values[k + 1] - values[k]) / (radii[k + 1] - radii[k])
    return slope * (r - radii[k]) + values[k]


@numba.njit(parallel=True, cache=True)
def _pair_sums_kernel(pos, radii, values, scale, rate, exclude_self):
    n = pos.shape[0]
    out = np.empty(n)
    for i in numba.prange(n):
        xi = pos[i, 0]
        yi = pos[i, 1]
        acc = 0.0
        for j in range(n):
            if exclude_self and j == i:
                continue
            r = math.hypot(xi - pos[j, 0], yi - pos[j, 1])
            acc += _lookup(r, radii, values, scale, rate)
        out[i] = acc / n
    return out


def pair_sums(ens, table, exclude_self=False):
    """``S_i = (1/N) sum_j Phi_eps(X_i - X_j)`` by direct summation.

    The inner sum runs over particles in ascending stream-id order, so results
    are reproducible bit for bit and permute exactly with the labels.
    """
    order = np.argsort(ens.ids, kind="stable")
    pos = np.ascontiguousarray(ens.positions[order])
    sums = _pair_sums_kernel(pos, np.asarray(table.radii), np.asarray(table.values),
                             float(table.scale), float(table.rate), bool(exclude_self))
    out = np.empty_like(sums)
    out[order] = sums
    return out


def coefficient(s):
    """``sqrt(2 exp(-s) + 2)``."""
    return np.sqrt(2.0 * np.exp(-np.asarray(s)) + 2.0)


def _check_coefficients(sigma):
    if sigma.size and not (np.all(sigma > SQRT2) and np.all(sigma <= 2.0 + _COEF_SLACK)):
        raise CoefficientBoundError(
            f"diffusion coefficient outside (sqrt 2, 2]: [{sigma.min()}, {sigma.max()}]")


def diffusion_coeff_interacting(ens, table, i=None, exclude_self=False, sums=None):
    """Diffusion coefficient of particle ``i`` (or all particles when ``i`` is None)."""
    s = pair_sums(ens, table, exclude_self) if sums is None else sums
    sigma = coefficient(s)
    return float(sigma[i]) if i is not None else sigma


def _advance(ens, sigma, dt, step_index):
    k = ens.step if step_index is None else int(step_index)
    _check_coefficients(sigma)
    db = rng.brownian_increments(ens.seed, ens.ids, k, dt)
    pos = ens.positions + sigma[:, None] * db
    if not np.all(np.isfinite(pos)):
        raise NonFinitePositionError(f"non-finite positions after step {k}")
    return replace(ens, positions=pos, t=ens.t + dt, step=k + 1)


def step_interacting(ens, table, dt, step_index=None, exclude_self=False, sums=None):
    """One Euler-Maruyama step of the N-particle system with frozen coefficients."""
    sigma = diffusion_coeff_interacting(ens, table, exclude_self=exclude_self, sums=sums)
    return _advance(ens, sigma, dt, step_index)


def step_meanfield(ens, v_field, dt, step_index=None):
    """One Euler-Maruyama step driven by a concentration field (bilinear lookup)."""
    sigma = coefficient(interpolate(v_field, ens.positions))
    return _advance(ens, sigma, dt, step_index)


def marginal_l1_distance(ens, reference, bandwidth):
    """``||kde(positions) - reference||_1`` on the reference grid."""
    m = mass(reference)
    if abs(m - 1.0) > 1e-6:
        raise ValueError(f"reference mass {m} is not 1")
    return l1_distance(kde(ens.positions, bandwidth, reference.grid), reference)


# ----------------------------------------------------------- coupled runs


@dataclass
class CouplingResult:
    times: np.ndarray
    err_int_vs_mid: np.ndarray
    err_mid_vs_lim: np.ndarray
    sup_int_mid: np.ndarray = field(repr=False)   # (replicas, N) running sup at T
    sup_mid_lim: np.ndarray = field(repr=False)
    final: list = field(repr=False)               # per replica {tag: ensemble}
    epsilon: float = 0.0
    escaped: bool = False
    max_abs_coordinate: float = 0.0

    @property
    def valid(self):
        return not self.escaped

    def max_mean_int_mid(self):
        """``max_i`` of the replica mean, with the standard error at the maximizer."""
        return _max_mean(self.sup_int_mid)

    def mean_mid_lim(self):
        """Particle-and-replica mean, with the standard error over replicas."""
        per_rep = self.sup_mid_lim.mean(axis=1)
        return float(per_rep.mean()), _se(per_rep)

    def rows(self):
        return [(float(t), float(a), float(b))
                for t, a, b in zip(self.times, self.err_int_vs_mid, self.err_mid_vs_lim)]


def _se(x):
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


def _max_mean(sups):
    mean_i = sups.mean(axis=0)
    i = int(np.argmax(mean_i))
    return float(mean_i[i]), _se(sups[:, i])


def _check_time_grid(traj, t_end, name):
    if traj is None:
        return
    times = np.asarray(traj.times)
    if times[0] > 1e-12 or times[-1] < t_end - 1e-9 * max(1.0, t_end):
        raise TimeGridError(f"{name} trajectory covers [{times[0]}, {times[-1]}], need [0, {t_end}]")
    if not traj.v:
        raise TimeGridError(f"{name} trajectory has no stored concentration fields")


def coupled_run(config, pde_local_traj, pde_nonlocal_traj, table, initial,
                include_interacting=True, box_half_width=None):
    """Advance the three systems from identical initial data with identical noise.

    Records the running ``sup_t |X - Xbar|^2`` and ``sup_t |Xbar - Xhat|^2``.  The
    time series report ``max_i E(.)`` for interacting vs intermediate and the
    particle mean of ``E(.)`` for intermediate vs limiting, expectations being
    replica averages.
    """
    T = config.t_end
    _check_time_grid(pde_nonlocal_traj, T, "nonlocal")
    _check_time_grid(pde_local_traj, T, "local")
    if pde_local_traj is not None and pde_nonlocal_traj is not None:
        a, b = np.asarray(pde_local_traj.times), np.asarray(pde_nonlocal_traj.times)
        if a.shape != b.shape or np.max(np.abs(a - b)) > 1e-12:
            raise TimeGridError("local and nonlocal trajectories use different time grids")
    if box_half_width is None and pde_nonlocal_traj is not None:
        box_half_width = pde_nonlocal_traj.config.grid.half_width
    N, R, n = config.n_particles, config.n_replicas, config.n_steps
    dt = config.dt
    times = dt * np.arange(n + 1)
    sup_a = np.zeros((R, N))
    sup_b = np.zeros((R, N))
    curve_a = np.zeros((n + 1, R, N))
    curve_b = np.zeros((n + 1, R))
    finals = []
    escaped = False
    max_coord = 0.0
    for r in range(R):
        seed = rng.replica_seed(config.seed, r)
        x0 = sample_initial(initial, N, seed)
        ens = {INTERACTING: x0, INTERMEDIATE: x0.retag(INTERMEDIATE), LIMITING: x0.retag(LIMITING)}
        for k in range(n):
            t = times[k]
            if include_interacting:
                if config.pair_sum == "grid":
                    sums = grid_pair_sums(ens[INTERACTING], table, exclude_self=config.exclude_self)
                else:
                    sums = None
                ens[INTERACTING] = step_interacting(ens[INTERACTING], table, dt, k,
                                                    config.exclude_self, sums)
            if pde_nonlocal_traj is not None:
                ens[INTERMEDIATE] = step_meanfield(ens[INTERMEDIATE], pde_nonlocal_traj.v_at(t), dt, k)
            if pde_local_traj is not None:
                ens[LIMITING] = step_meanfield(ens[LIMITING], pde_local_traj.v_at(t), dt, k)
            if include_interacting:
                d = ens[INTERACTING].positions - ens[INTERMEDIATE].positions
                np.maximum(sup_a[r], np.einsum("ij,ij->i", d, d), out=sup_a[r])
            d = ens[INTERMEDIATE].positions - ens[LIMITING].positions
            np.maximum(sup_b[r], np.einsum("ij,ij->i", d, d), out=sup_b[r])
            curve_a[k + 1, r] = sup_a[r]
            curve_b[k + 1, r] = sup_b[r].mean()
        for e in ens.values():
            max_coord = max(max_coord, e.max_abs_coordinate())
        finals.append(ens)
    if box_half_width is not None and max_coord > 0.5 * box_half_width:
        escaped = True
    err_a = curve_a.mean(axis=1).max(axis=1)
    err_b = curve_b.mean(axis=1)
    return CouplingResult(times=times, err_int_vs_mid=err_a, err_mid_vs_lim=err_b,
                          sup_int_mid=sup_a, sup_mid_lim=sup_b, final=finals,
                          epsilon=float(table.spec.epsilon) if table is not None else 0.0,
                          escaped=escaped, max_abs_coordinate=max_coord)


# ------------------------------------------------------------- snapshots


def save_ensemble(stem, ens):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(ens.positions, dtype="<f8").tobytes()
    data_path = stem.with_suffix(".f64")
    header = {"format": ENSEMBLE_FORMAT, "N": ens.n, "t": float(ens.t), "seed": int(ens.seed),
              "system_tag": ens.system_tag, "step": int(ens.step), "endianness": "little",
              "data_file": data_path.name, "sha256": hashlib.sha256(data).hexdigest()}
    if not np.array_equal(ens.ids, np.arange(ens.n)):
        header["ids"] = [int(i) for i in ens.ids]
    _atomic_write(data_path, data)
    _atomic_write(stem.with_suffix(".json"), json.dumps(header, indent=2).encode())
    return stem.with_suffix(".json")


def load_ensemble(header_path):
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text())
        if header.get("format") != ENSEMBLE_FORMAT:
            raise SnapshotError(f"{header_path}: not an ensemble snapshot")
        n = int(header["N"])
        raw = (header_path.parent / header["data_file"]).read_bytes()
    except SnapshotError:
        raise
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise SnapshotError(f"{header_path}: {exc}") from exc
    if len(raw) != 16 * n or hashlib.sha256(raw).hexdigest() != header.get("sha256"):
        raise SnapshotError(f"{header_path}: data does not match header")
    pos = np.frombuffer(raw, dtype="<f8").reshape(n, 2).astype(np.float64)
    ids = np.asarray(header.get("ids", range(n)), dtype=np.int64)
    return ParticleEnsemble(pos, ids, float(header["t"]), header["system_tag"],
                            int(header["seed"]), int(header.get("step", 0)))
