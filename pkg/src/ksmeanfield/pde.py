"""Time integration of the signal-dependent Keller-Segel system.

    d_t u = Laplace((e^{-v} + 1) u),    -Laplace v + v = chi * (u * j_eps)

``epsilon = 0`` gives the local system (no mollification).  The default scheme
splits ``Laplace(m u) = 2 Laplace u + Laplace((m - 2) u)`` and integrates the
constant-coefficient part exactly in Fourier space (exponential Euler), the
remainder explicitly.  It is first order, unconditionally stable and mass
conserving, and it reproduces the heat flow ``d_t u = 2 Laplace u`` exactly
when ``v = 0``.
"""

from dataclasses import dataclass, field, replace
import logging
import math

import numpy as np

from . import diagnostics as diag
from .field import (CONCENTRATION, DENSITY, DensityField, Grid2D, forward, inverse,
                    mollifier_kernel, tail_mass)
from .potential import MollifierSpec, SMOOTH_BUMP

log = logging.getLogger(__name__)

SCHEMES = ("imex", "explicit-rk2")
BLOWUP_THRESHOLD = 1e6
TAIL_LIMIT = 1e-6
MASS_TOL = 1e-6


def rk2_dt_limit(grid):
    """Largest stable explicit-rk2 step for diffusivity 2.

    The spectral Laplacian reaches ``2 pi^2 / h^2`` at the corner mode and
    RK2 needs ``dt * 2 * lambda <= 2``.
    """
    return grid.h**2 / (2.0 * np.pi**2)


class InitialDataError(ValueError):
    pass


class BlowUpError(ArithmeticError):
    """The discrete solution left the admissible range (non-finite or huge)."""


@dataclass(frozen=True)
class PdeConfig:
    chi: float = 1.0
    epsilon: float = 0.0
    dt: float = 2e-4
    t_end: float = 0.5
    grid: Grid2D = field(default_factory=Grid2D)
    scheme: str = "imex"
    snapshot_stride: int = 25
    mollifier_kind: str = SMOOTH_BUMP
    symbol_method: str = "analytic"

    def __post_init__(self):
        if not self.chi > 0:
            raise ValueError("chi must be positive")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if not (self.dt > 0 and self.t_end > 0):
            raise ValueError("dt and t_end must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be >= 1")
        steps = self.t_end / self.dt
        if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
            raise ValueError("t_end must be an integer multiple of dt")
        if self.scheme == "explicit-rk2" and self.dt > rk2_dt_limit(self.grid) * (1 + 1e-12):
            raise ValueError(f"explicit-rk2 needs dt <= h^2/(2 pi^2) = {rk2_dt_limit(self.grid):.3g}")
        if self.epsilon > 0:
            MollifierSpec(self.mollifier_kind, self.epsilon)

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))

    @property
    def local(self):
        return self.epsilon == 0

    @property
    def mollifier(self):
        return None if self.local else MollifierSpec(self.mollifier_kind, self.epsilon)

    def hypothesis_notes(self):
        # the optimal Gagliardo-Nirenberg constant is not available numerically
        return [f"chi={self.chi}: smallness condition chi < 4/c_* not verified"]


@dataclass(frozen=True)
class PdeState:
    u: DensityField
    v: DensityField
    t: float
    step: int = 0


class _Operators:
    """Fourier multipliers shared by every step of one configuration."""

    def __init__(self, config):
        g = config.grid
        self.config = config
        self.n = g.n
        self.k2 = g.k2
        self.mollifier = None
        rhs = config.chi / (1.0 + g.k2)
        if not config.local:
            self.mollifier = mollifier_kernel(config.mollifier, g, config.symbol_method)
            rhs = rhs * self.mollifier.values
        self.v_symbol = rhs
        z = 2.0 * g.k2 * config.dt
        self.decay = np.exp(-z)
        with np.errstate(invalid="ignore", divide="ignore"):
            phi = np.where(z > 0, -np.expm1(-z) / np.where(z > 0, z, 1.0), 1.0)
        self.forcing = config.dt * phi

    def concentration(self, u_hat):
        return inverse(self.v_symbol * u_hat, self.n)

    def rhs(self, u):
        """``Laplace((e^{-v} + 1) u)`` on the grid."""
        u_hat = forward(u)
        v = self.concentration(u_hat)
        return inverse(-self.k2 * forward((np.exp(-v) + 1.0) * u), self.n)


def _check(u, t):
    peak = np.max(np.abs(u))
    if not np.isfinite(peak):
        raise BlowUpError(f"non-finite density at t={t:.6g}")
    if peak > BLOWUP_THRESHOLD:
        raise BlowUpError(f"max |u| = {peak:.3g} exceeds {BLOWUP_THRESHOLD:g} at t={t:.6g}")


def init_state(u0, config):
    """Validate and renormalize the initial density; compute its concentration."""
    if u0.grid != config.grid:
        raise InitialDataError("u0 grid does not match the configuration")
    vals = np.asarray(u0.values, dtype=float)
    if not np.all(np.isfinite(vals)):
        raise InitialDataError("u0 has non-finite values")
    if np.min(vals) < 0:
        raise InitialDataError(f"u0 has negative values (min {np.min(vals):.3g})")
    m = config.grid.h**2 * float(np.sum(vals))
    if abs(m - 1.0) > MASS_TOL * (1 + 1e-9):
        raise InitialDataError(f"u0 mass {m!r} is not within {MASS_TOL} of 1")
    u = DensityField(config.grid, vals / m, DENSITY)
    tm = tail_mass(u)
    if tm > TAIL_LIMIT:
        raise InitialDataError(f"u0 tail mass {tm:.3g} outside |x|_inf <= L/2 exceeds {TAIL_LIMIT}")
    ops = _Operators(config)
    v = DensityField(config.grid, ops.concentration(forward(u.values)), CONCENTRATION)
    return PdeState(u, v, 0.0, 0)


class Integrator:
    """Stateful stepper for one configuration (precomputes multipliers once)."""

    def __init__(self, config):
        self.config = config
        self.ops = _Operators(config)

    @property
    def mollifier(self):
        return self.ops.mollifier

    def step(self, state):
        cfg, ops = self.config, self.ops
        u = state.u.values
        if cfg.scheme == "imex":
            u_hat = forward(u)
            remainder = np.expm1(-state.v.values) * u  # (m - 2) u
            new_hat = ops.decay * u_hat + ops.forcing * (-ops.k2 * forward(remainder))
            new = inverse(new_hat, ops.n)
        else:
            k1 = ops.rhs(u)
            k2 = ops.rhs(u + cfg.dt * k1)
            new = u + 0.5 * cfg.dt * (k1 + k2)
            new_hat = forward(new)
        k = state.step + 1
        t = k * cfg.dt
        _check(new, t)
        v = ops.concentration(new_hat)
        return PdeState(state.u.with_values(new), state.v.with_values(v), t, k)


def step(state, config):
    """Advance one time step (convenience wrapper around :class:`Integrator`)."""
    return Integrator(config).step(state)


@dataclass
class PdeTrajectory:
    config: PdeConfig
    times: np.ndarray
    steps: list
    u: list = field(repr=False)
    v: list = field(repr=False)
    records: list = field(repr=False)
    notes: list = field(default_factory=list)
    max_tail_mass: float = 0.0
    lp_growth: dict = field(default_factory=dict)

    @property
    def valid(self):
        return self.max_tail_mass <= TAIL_LIMIT

    def v_at(self, t):
        """Concentration at time ``t`` by linear interpolation between snapshots."""
        times = self.times
        if t < times[0] - 1e-12 or t > times[-1] + 1e-12:
            raise ValueError(f"t={t} outside the stored horizon [{times[0]}, {times[-1]}]")
        k = int(np.searchsorted(times, t, side="right")) - 1
        k = min(max(k, 0), len(times) - 1)
        if k == len(times) - 1 or abs(t - times[k]) <= 1e-12 * max(1.0, abs(t)):
            return self.v[k]
        w = (t - times[k]) / (times[k + 1] - times[k])
        if abs(w - 1.0) <= 1e-12:
            return self.v[k + 1]
        return self.v[k].with_values((1.0 - w) * self.v[k].values + w * self.v[k + 1].values)

    def state_at(self, index):
        return PdeState(self.u[index], self.v[index], float(self.times[index]), self.steps[index])


def solve(u0, config, keep_fields=True, on_snapshot=None):
    """Integrate to ``t_end``; snapshot every ``snapshot_stride`` steps and at the end.

    ``on_snapshot(state, record)`` is called for each snapshot (including t=0).
    """
    integ = Integrator(config)
    state = init_state(u0, config)
    notes = config.hypothesis_notes()
    for note in notes:
        log.info(note)
    times, steps, us, vs, records = [], [], [], [], []
    lp0 = {2: diag.lp_norm(state.u, 2), 4: diag.lp_norm(state.u, 4)}
    lp_max = dict(lp0)
    max_tail = 0.0

    def snap(s):
        nonlocal max_tail
        rec = diag.evaluate(s.u, s.v, config.chi, s.t, integ.mollifier)
        max_tail = max(max_tail, tail_mass(s.u))
        times.append(s.t)
        steps.append(s.step)
        records.append(rec)
        if keep_fields:
            us.append(s.u)
            vs.append(s.v)
        if on_snapshot is not None:
            on_snapshot(s, rec)

    snap(state)
    n = config.n_steps
    for k in range(1, n + 1):
        state = integ.step(state)
        for p in (2, 4):
            lp_max[p] = max(lp_max[p], diag.lp_norm(state.u, p))
        if k % config.snapshot_stride == 0 or k == n:
            snap(state)
    return PdeTrajectory(config=config, times=np.array(times), steps=steps, u=us, v=vs,
                         records=records, notes=notes, max_tail_mass=max_tail,
                         lp_growth={p: lp_max[p] - lp0[p] for p in (2, 4)})


@dataclass(frozen=True)
class EpsRow:
    epsilon: float
    sup_l1: float
    sup_l2: float
    h1: float
    # largest tail mass seen in this row's nonlocal run or the local reference
    max_tail_mass: float = 0.0

    @property
    def valid(self):
        return self.max_tail_mass <= TAIL_LIMIT


def _grad_sq_integral(d_hat, grid):
    # Parseval for int |grad d|^2 on the half-spectrum
    w = np.full(d_hat.shape[1], 2.0)
    w[0] = 1.0
    if grid.n % 2 == 0:
        w[-1] = 1.0
    k2 = grid.kx_deriv**2 + grid.ky_deriv**2
    s = float(np.sum(w[None, :] * k2 * np.abs(d_hat) ** 2))
    return grid.h**2 * s / grid.n**2


def eps_convergence_study(u0, config_base, eps_list):
    """Compare the nonlocal solutions for each ``eps`` with the local one.

    All systems advance in lockstep on one grid and time step.  For each ``eps``
    the row holds ``sup_t ||u_eps - u||_1``, ``sup_t ||u_eps - u||_2`` and
    ``(int_0^T ||grad(u_eps - u)||_2^2 dt)^{1/2}`` (trapezoid in time), and
    the tail-mass monitor of both systems.
    """
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise ValueError("eps_list is empty")
    if any(b > a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be decreasing")
    grid = config_base.grid
    if config_base.symbol_method == "sampled":
        small = [e for e in eps_list if 0 < e < 4 * grid.h]
        if small:
            raise ValueError(f"eps {small} below 4h = {4 * grid.h} for sampled mollifiers")
    ref_cfg = replace(config_base, epsilon=0.0)
    unique = sorted(set(eps_list), reverse=True)
    cfgs = [replace(config_base, epsilon=e) for e in unique]
    integs = [Integrator(c) for c in cfgs]
    ref_integ = Integrator(ref_cfg)
    ref = init_state(u0, ref_cfg)
    states = [init_state(u0, c) for c in cfgs]
    h2 = grid.h**2
    sup1 = np.zeros(len(unique))
    sup2 = np.zeros(len(unique))
    h1_acc = np.zeros(len(unique))
    prev = np.zeros(len(unique))
    tails = np.zeros(len(unique))
    ref_tail = tail_mass(ref.u)

    def measure(idx, s):
        tails[idx] = max(tails[idx], tail_mass(s.u))
        d = s.u.values - ref.u.values
        l1 = h2 * float(np.sum(np.abs(d)))
        l2 = math.sqrt(h2 * float(np.sum(d * d)))
        g = _grad_sq_integral(forward(d), grid)
        sup1[idx] = max(sup1[idx], l1)
        sup2[idx] = max(sup2[idx], l2)
        return g

    for i, s in enumerate(states):
        prev[i] = measure(i, s)
    dt = config_base.dt
    for _ in range(config_base.n_steps):
        ref = ref_integ.step(ref)
        ref_tail = max(ref_tail, tail_mass(ref.u))
        for i in range(len(states)):
            states[i] = integs[i].step(states[i])
            g = measure(i, states[i])
            h1_acc[i] += 0.5 * dt * (prev[i] + g)
            prev[i] = g
    by_eps = {e: EpsRow(e, float(sup1[i]), float(sup2[i]), math.sqrt(h1_acc[i]),
                        float(max(tails[i], ref_tail)))
              for i, e in enumerate(unique)}
    return [by_eps[e] for e in eps_list]
