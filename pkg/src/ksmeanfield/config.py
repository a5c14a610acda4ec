"""Experiment configuration: a typed schema over TOML or JSON files.

Unknown keys are rejected.  ``ExperimentConfig.to_dict`` gives a plain mapping
that parses back to an equal config, so manifests can echo the resolved
configuration exactly.
"""

from dataclasses import dataclass, field, fields
import json
from pathlib import Path
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .field import Grid2D
from .particles import GaussianMixture
from .pde import PdeConfig, SCHEMES
from .potential import MOLLIFIER_KINDS, SMOOTH_BUMP


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridSection:
    L: float = 16.0
    n: int = 256


@dataclass(frozen=True)
class PdeSection:
    chi: float = 1.0
    epsilon: float = 0.0
    dt: float = 2e-4
    t_end: float = 0.5
    scheme: str = "imex"
    snapshot_stride: int = 25
    symbol_method: str = "analytic"
    # write u and v to fields/ every this many diagnostics snapshots (final always)
    field_every: int = 10


@dataclass(frozen=True)
class MollifierSection:
    kind: str = SMOOTH_BUMP
    epsilon: float = 0.3
    epsilon_list: tuple = (0.4, 0.2, 0.1, 0.05)


@dataclass(frozen=True)
class ParticlesSection:
    N: int = 2000
    N_list: tuple = (250, 1000, 4000)
    # "lambda" in files; cut-off eps = (lambda ln N)^(-1/4) when set
    lam: float | None = None
    dt: float = 5e-3
    n_replicas: int = 5
    seed: int = 0
    exclude_self: bool = False
    pair_sum: str = "direct"


@dataclass(frozen=True)
class InitialSection:
    weights: tuple = (1.0,)
    centers: tuple = ((0.0, 0.0),)
    variances: tuple = (0.5,)


@dataclass(frozen=True)
class CouplingSection:
    epsilon_list: tuple = (0.4, 0.2, 0.1)
    include_interacting: bool = True
    # drive the limiting system with the nonlocal field too (zero-distance check)
    same_v: bool = False


@dataclass(frozen=True)
class ChaosSection:
    bandwidth: float = 0.3


SECTIONS = {
    "grid": GridSection,
    "pde": PdeSection,
    "mollifier": MollifierSection,
    "particles": ParticlesSection,
    "initial_data": InitialSection,
    "coupling": CouplingSection,
    "chaos": ChaosSection,
}
# file key -> attribute name where they differ
_RENAMES = {("particles", "lambda"): "lam"}


def _tuplify(x):
    if isinstance(x, list):
        return tuple(_tuplify(v) for v in x)
    return x


def _listify(x):
    if isinstance(x, tuple):
        return [_listify(v) for v in x]
    return x


@dataclass(frozen=True)
class ExperimentConfig:
    grid: GridSection = field(default_factory=GridSection)
    pde: PdeSection = field(default_factory=PdeSection)
    mollifier: MollifierSection = field(default_factory=MollifierSection)
    particles: ParticlesSection = field(default_factory=ParticlesSection)
    initial_data: InitialSection = field(default_factory=InitialSection)
    coupling: CouplingSection = field(default_factory=CouplingSection)
    chaos: ChaosSection = field(default_factory=ChaosSection)
    output_dir: str | None = None

    def __post_init__(self):
        validate(self)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a table")
        kwargs = {}
        for key, value in data.items():
            if key == "output_dir":
                if value is not None and not isinstance(value, str):
                    raise ConfigError("output_dir must be a string")
                kwargs[key] = value
                continue
            if key not in SECTIONS:
                raise ConfigError(f"unknown section {key!r}")
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a table")
            kwargs[key] = _section(key, value)
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        out = {}
        for name in SECTIONS:
            sec = getattr(self, name)
            d = {}
            for f in fields(sec):
                key = next((k for (s, k), a in _RENAMES.items() if s == name and a == f.name), f.name)
                val = getattr(sec, f.name)
                if val is not None:
                    d[key] = _listify(val)
            out[name] = d
        if self.output_dir is not None:
            out["output_dir"] = self.output_dir
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    # ---------------------------------------------------------- derived objects

    def grid2d(self):
        return Grid2D(half_width=float(self.grid.L), n=int(self.grid.n))

    def pde_config(self, epsilon=None):
        p = self.pde
        return PdeConfig(chi=float(p.chi), epsilon=float(p.epsilon if epsilon is None else epsilon),
                         dt=float(p.dt), t_end=float(p.t_end), grid=self.grid2d(),
                         scheme=p.scheme, snapshot_stride=int(p.snapshot_stride),
                         mollifier_kind=self.mollifier.kind, symbol_method=p.symbol_method)

    def mixture(self):
        d = self.initial_data
        return GaussianMixture(tuple(float(w) for w in d.weights),
                               tuple(tuple(float(c) for c in cc) for cc in d.centers),
                               tuple(float(v) for v in d.variances))


def _section(name, values):
    cls = SECTIONS[name]
    known = {f.name for f in fields(cls)}
    internal = {attr for (sec, _), attr in _RENAMES.items() if sec == name}
    kwargs = {}
    for key, value in values.items():
        attr = _RENAMES.get((name, key), key)
        if attr not in known or (attr == key and key in internal):
            raise ConfigError(f"unknown key {name}.{key}")
        kwargs[attr] = _tuplify(value)
    return cls(**kwargs)


def _is_number(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def validate(cfg):
    g, p, m, q, c = cfg.grid, cfg.pde, cfg.mollifier, cfg.particles, cfg.coupling
    _require(_is_number(g.L) and g.L > 0, "grid.L must be positive")
    _require(isinstance(g.n, int) and not isinstance(g.n, bool) and g.n >= 64 and not g.n & (g.n - 1),
             "grid.n must be a power of two >= 64")
    for key in ("chi", "dt", "t_end"):
        _require(_is_number(getattr(p, key)) and getattr(p, key) > 0, f"pde.{key} must be positive")
    _require(_is_number(p.epsilon) and p.epsilon >= 0, "pde.epsilon must be >= 0")
    _require(p.scheme in SCHEMES, f"pde.scheme must be one of {SCHEMES}")
    _require(p.symbol_method in ("analytic", "sampled"), "pde.symbol_method must be analytic or sampled")
    for key in ("snapshot_stride", "field_every"):
        v = getattr(p, key)
        _require(isinstance(v, int) and not isinstance(v, bool) and v >= 1, f"pde.{key} must be >= 1")
    _require(m.kind in MOLLIFIER_KINDS, f"mollifier.kind must be one of {MOLLIFIER_KINDS}")
    _require(_is_number(m.epsilon) and m.epsilon > 0, "mollifier.epsilon must be positive")
    for name, lst in (("mollifier.epsilon_list", m.epsilon_list), ("coupling.epsilon_list", c.epsilon_list)):
        _require(isinstance(lst, tuple) and len(lst) >= 1 and all(_is_number(e) and e > 0 for e in lst),
                 f"{name} must be a non-empty list of positive numbers")
    for key in ("N", "n_replicas", "seed"):
        v = getattr(q, key)
        _require(isinstance(v, int) and not isinstance(v, bool) and v >= (0 if key == "seed" else 1),
                 f"particles.{key} must be a {'nonnegative' if key == 'seed' else 'positive'} integer")
    _require(q.seed < 2**64, "particles.seed must fit in 64 bits")
    _require(isinstance(q.N_list, tuple) and len(q.N_list) >= 1
             and all(isinstance(n, int) and not isinstance(n, bool) and n >= 1 for n in q.N_list),
             "particles.N_list must be a non-empty list of positive integers")
    _require(q.lam is None or (_is_number(q.lam) and q.lam > 0), "particles.lambda must be positive")
    _require(_is_number(q.dt) and q.dt > 0, "particles.dt must be positive")
    _require(q.pair_sum in ("direct", "grid"), "particles.pair_sum must be direct or grid")
    for key in ("exclude_self",):
        _require(isinstance(getattr(q, key), bool), f"particles.{key} must be a boolean")
    for key in ("include_interacting", "same_v"):
        _require(isinstance(getattr(c, key), bool), f"coupling.{key} must be a boolean")
    _require(_is_number(cfg.chaos.bandwidth) and cfg.chaos.bandwidth > 0, "chaos.bandwidth must be positive")
    steps = p.t_end / q.dt
    _require(abs(steps - round(steps)) <= 1e-6 * max(1.0, steps),
             "pde.t_end must be an integer multiple of particles.dt")
    try:
        cfg.pde_config()
        cfg.mixture()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path):
    """Read a ``.toml`` or ``.json`` configuration file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw)
        else:
            data = tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return ExperimentConfig.from_dict(data)


def with_overrides(cfg, seed=None):
    if seed is None:
        return cfg
    d = cfg.to_dict()
    d["particles"]["seed"] = int(seed)
    return ExperimentConfig.from_dict(d)
