"""Command-line experiment driver.

Subcommands: ``solve-pde``, ``eps-convergence``, ``coupling-study``,
``chaos-study`` and ``diagnose``.  Every run writes into one directory with a
``manifest.json`` echoing the resolved configuration, the code version, the
seed, summary metrics and validity flags.

Exit codes: 0 ok, 2 configuration error, 3 numerical failure, 4 I/O or
corrupted input.
"""

import argparse
import datetime as _dt
import json
import logging
import math
from pathlib import Path
import sys
import time
import warnings

import numba
import numpy as np

from . import __version__
from . import diagnostics as diag
from . import field as fld
from . import particles as pt
from . import pde
from .config import ConfigError, ExperimentConfig, load_config, with_overrides
from .potential import MollifierSpec, QuadratureError, build_potential_table

log = logging.getLogger("ksmeanfield")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

NUMERICAL_ERRORS = (pde.BlowUpError, pt.NonFinitePositionError, pt.CoefficientBoundError,
                    QuadratureError, diag.MaskTooSmallError, FloatingPointError, ArithmeticError)

COUPLING_COLUMNS = ("t", "err_int_vs_mid", "err_mid_vs_lim")
RATE_COLUMNS = ("quantity", "scale", "slope", "intercept", "residual", "n_points")


class RunContext:
    """Output directory, manifest state and validity flags of one run."""

    def __init__(self, command, cfg, out):
        self.command = command
        self.cfg = cfg
        self.out = Path(out)
        self.started = time.perf_counter()
        self.summary = {}
        self.validity = {"tail_mass_ok": True, "escape_ok": True, "blowup_ok": True}
        self.notes = []

    def path(self, *parts):
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    @property
    def status(self):
        return "VALID" if all(self.validity.values()) else "INVALID"

    def write_manifest(self, error=None):
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": self.cfg.particles.seed if self.cfg is not None else None,
            "config": self.cfg.to_dict() if self.cfg is not None else None,
            "finished_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "wall_clock_s": round(time.perf_counter() - self.started, 3),
            "summary": _jsonable(self.summary),
            "validity": self.validity,
            "status": self.status,
            "notes": self.notes,
        }
        if error is not None:
            manifest["error"] = error
        self.out.mkdir(parents=True, exist_ok=True)
        fld._atomic_write(self.out / "manifest.json",
                          json.dumps(manifest, indent=2, allow_nan=True).encode())


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def _rate_row(quantity, scale, points):
    pts = [(s, e) for s, e in points if s > 0 and e > 0 and math.isfinite(e)]
    if len({s for s, _ in pts}) < 2:
        return None
    fit = diag.fit_rate(pts)
    return (quantity, scale, fit.slope, fit.intercept, fit.residual, len(pts))


def _strictly_decreasing(means, ses):
    """Each step drops by more than the combined standard error."""
    return all(a - b > math.hypot(sa, sb)
               for a, b, sa, sb in zip(means, means[1:], ses, ses[1:]))


def _initial_density(cfg):
    return cfg.mixture().density(cfg.grid2d())


# ----------------------------------------------------------------- commands


def cmd_solve_pde(ctx):
    cfg = ctx.cfg
    pcfg = cfg.pde_config()
    u0 = _initial_density(cfg)
    n = pcfg.n_steps
    meta = {"chi": pcfg.chi, "epsilon": pcfg.epsilon, "mollifier_kind": pcfg.mollifier_kind,
            "symbol_method": pcfg.symbol_method}
    count = [0]

    def on_snapshot(state, record):
        idx = count[0]
        count[0] += 1
        if idx % cfg.pde.field_every and state.step != n:
            return
        stem_u = f"u_{state.step:07d}"
        stem_v = f"v_{state.step:07d}"
        fld.save_field(ctx.path("fields", stem_v), state.v, state.t, dict(meta, step=state.step))
        fld.save_field(ctx.path("fields", stem_u), state.u, state.t,
                       dict(meta, step=state.step, partner=stem_v + ".json"))

    try:
        traj = pde.solve(u0, pcfg, keep_fields=False, on_snapshot=on_snapshot)
    except pde.BlowUpError:
        ctx.validity["blowup_ok"] = False
        raise
    diag.write_records(ctx.path("diagnostics.csv"), traj.records)
    ctx.notes.extend(traj.notes)
    ctx.validity["tail_mass_ok"] = traj.valid
    F = [r.F_lyap for r in traj.records]
    tol = 1e-6 * (1.0 + abs(F[0]))
    ctx.summary.update({
        "n_snapshots": len(traj.records),
        "max_mass_error": max(abs(r.mass - 1.0) for r in traj.records),
        "F_nonincreasing": all(b <= a + tol for a, b in zip(F, F[1:])),
        "max_tail_mass": traj.max_tail_mass,
        "lp_growth": traj.lp_growth,
        "final": diag.record_dict(traj.records[-1]),
    })
    return EXIT_OK


def cmd_eps_convergence(ctx):
    cfg = ctx.cfg
    base = cfg.pde_config(epsilon=0.0)
    eps_list = sorted((float(e) for e in cfg.mollifier.epsilon_list), reverse=True)
    try:
        rows = pde.eps_convergence_study(_initial_density(cfg), base, eps_list)
    except pde.BlowUpError:
        ctx.validity["blowup_ok"] = False
        raise
    diag.write_csv(ctx.path("eps_errors.csv"), ("epsilon", "sup_l1", "sup_l2", "h1", "valid"),
                   ((r.epsilon, r.sup_l1, r.sup_l2, r.h1, int(r.valid)) for r in rows))
    if not all(r.valid for r in rows):
        ctx.validity["tail_mass_ok"] = False
    valid_rows = [r for r in rows if r.valid]
    rates = [_rate_row(q, "epsilon", [(r.epsilon, getattr(r, q)) for r in valid_rows])
             for q in ("sup_l2", "sup_l1", "h1")]
    rates = [r for r in rates if r is not None]
    diag.write_csv(ctx.path("rates.csv"), RATE_COLUMNS, rates)
    ctx.summary["slopes"] = {r[0]: r[2] for r in rates}
    ctx.summary["rows"] = [[r.epsilon, r.sup_l1, r.sup_l2, r.h1] for r in rows]
    ctx.summary["excluded_invalid"] = len(rows) - len(valid_rows)
    return EXIT_OK


def _sde_config(cfg, n, epsilon):
    q = cfg.particles
    return pt.SdeConfig(n_particles=int(n), epsilon=float(epsilon), chi=float(cfg.pde.chi),
                        dt=float(q.dt), t_end=float(cfg.pde.t_end), seed=int(q.seed),
                        n_replicas=int(q.n_replicas), exclude_self=q.exclude_self,
                        pair_sum=q.pair_sum)


def _solve_tracked(ctx, pcfg, u0):
    try:
        traj = pde.solve(u0, pcfg, keep_fields=True)
    except pde.BlowUpError:
        ctx.validity["blowup_ok"] = False
        raise
    if not traj.valid:
        ctx.validity["tail_mass_ok"] = False
    return traj


def cmd_coupling_study(ctx):
    cfg = ctx.cfg
    c = cfg.coupling
    u0 = _initial_density(cfg)
    mix = cfg.mixture()
    local = None if c.same_v else _solve_tracked(ctx, cfg.pde_config(epsilon=0.0), u0)
    summary_rows = []
    for i, eps in enumerate(c.epsilon_list):
        eps = float(eps)
        nonlocal_traj = _solve_tracked(ctx, cfg.pde_config(epsilon=eps), u0)
        limiting = nonlocal_traj if c.same_v else local
        table = None
        if c.include_interacting:
            table = build_potential_table(cfg.pde.chi, MollifierSpec(cfg.mollifier.kind, eps))
        sde = _sde_config(cfg, cfg.particles.N, eps)
        res = pt.coupled_run(sde, limiting, nonlocal_traj, table, mix,
                             include_interacting=c.include_interacting)
        if res.escaped:
            ctx.validity["escape_ok"] = False
        series_a = res.err_int_vs_mid if c.include_interacting else np.full_like(res.times, np.nan)
        diag.write_csv(ctx.path(f"coupling_eps{i:02d}.csv"), COUPLING_COLUMNS,
                       zip(map(float, res.times), map(float, series_a), map(float, res.err_mid_vs_lim)))
        a, sa = res.max_mean_int_mid() if c.include_interacting else (math.nan, math.nan)
        b, sb = res.mean_mid_lim()
        row_valid = res.valid and nonlocal_traj.valid and (limiting is None or limiting.valid)
        summary_rows.append((eps, a, sa, b, sb, res.max_abs_coordinate, int(row_valid)))
        for tag, ens in res.final[0].items():
            pt.save_ensemble(ctx.path("ensembles", f"eps{i:02d}_{tag}"), ens)
    diag.write_csv(ctx.path("coupling.csv"),
                   ("epsilon", "err_int_vs_mid", "err_int_vs_mid_se", "err_mid_vs_lim",
                    "err_mid_vs_lim_se", "max_abs_coordinate", "valid"), summary_rows)
    valid_rows = [r for r in summary_rows if r[6]]
    rates = [_rate_row("err_mid_vs_lim", "epsilon", [(r[0], r[3]) for r in valid_rows])]
    if c.include_interacting:
        rates.append(_rate_row("err_int_vs_mid", "epsilon", [(r[0], r[1]) for r in valid_rows]))
    rates = [r for r in rates if r is not None]
    diag.write_csv(ctx.path("rates.csv"), RATE_COLUMNS, rates)
    ctx.summary["slopes"] = {r[0]: r[2] for r in rates}
    ctx.summary["excluded_invalid"] = len(summary_rows) - len(valid_rows)
    return EXIT_OK


def cmd_chaos_study(ctx):
    cfg = ctx.cfg
    q = cfg.particles
    u0 = _initial_density(cfg)
    mix = cfg.mixture()
    bw = float(cfg.chaos.bandwidth)
    trajs = {}
    rows = []
    derived = {}
    for N in q.N_list:
        eps = pt.cutoff_epsilon(q.lam, N) if q.lam is not None else float(cfg.mollifier.epsilon)
        derived[str(N)] = eps
        if eps not in trajs:
            trajs[eps] = (_solve_tracked(ctx, cfg.pde_config(epsilon=eps), u0),
                          build_potential_table(cfg.pde.chi, MollifierSpec(cfg.mollifier.kind, eps)))
        traj, table = trajs[eps]
        sde = _sde_config(cfg, N, eps)
        res = pt.coupled_run(sde, None, traj, table, mix)
        if res.escaped:
            ctx.validity["escape_ok"] = False
        err, err_se = res.max_mean_int_mid()
        uT = traj.u[-1]
        l1s, hs, slack = [], [], []
        for fin in res.final:
            est = fld.kde(fin[pt.INTERACTING].positions, bw, uT.grid)
            l1s.append(diag.l1_distance(est, uT))
            try:
                rel = diag.relative_entropy(est, uT)
            except diag.MaskTooSmallError as exc:
                # the entropy column is auxiliary; keep the L1 proxy and say why it is missing
                ctx.notes.append(f"N={N}: relative entropy skipped ({exc})")
                rel = None
            hs.append(math.nan if rel is None else rel.value)
            slack.append(math.nan if rel is None else rel.ckp_slack)
        l1s = np.array(l1s)
        l1_se = float(l1s.std(ddof=1) / math.sqrt(l1s.size)) if l1s.size > 1 else 0.0
        rows.append((int(N), eps, err, err_se, float(l1s.mean()), l1_se, float(np.mean(hs)),
                     float(np.min(slack)), int(res.valid and traj.valid)))
        pt.save_ensemble(ctx.path("ensembles", f"N{N}_interacting"), res.final[0][pt.INTERACTING])
    diag.write_csv(ctx.path("chaos.csv"),
                   ("N", "epsilon", "err_int_vs_mid", "err_int_vs_mid_se", "l1", "l1_se",
                    "relative_entropy", "ckp_slack_min", "valid"), rows)
    valid_rows = [r for r in rows if r[8]]
    rates = [_rate_row("err_int_vs_mid", "N", [(r[0], r[2]) for r in valid_rows]),
             _rate_row("l1", "N", [(r[0], r[4]) for r in valid_rows])]
    rates = [r for r in rates if r is not None]
    diag.write_csv(ctx.path("rates.csv"), RATE_COLUMNS, rates)
    ctx.summary.update({
        "epsilon_by_N": derived,
        "slopes": {r[0]: r[2] for r in rates},
        "ckp_slack_min": min((r[7] for r in rows if math.isfinite(r[7])), default=math.nan),
        "excluded_invalid": len(rows) - len(valid_rows),
    })
    if len(valid_rows) >= 2:
        ctx.summary["err_decreasing"] = _strictly_decreasing([r[2] for r in valid_rows],
                                                             [r[3] for r in valid_rows])
        ctx.summary["l1_decreasing"] = _strictly_decreasing([r[4] for r in valid_rows],
                                                            [r[5] for r in valid_rows])
    return EXIT_OK


def diagnose_snapshot(path):
    """Recompute the diagnostics record of a density snapshot and its partner field."""
    u, header = fld.load_field(path)
    meta = header.get("meta", {})
    try:
        v, _ = fld.load_field(Path(path).parent / meta["partner"])
        chi = float(meta["chi"])
        eps = float(meta["epsilon"])
    except (KeyError, TypeError, ValueError) as exc:
        raise fld.SnapshotError(f"{path}: incomplete snapshot metadata ({exc})") from exc
    symbol = None
    if eps > 0:
        spec = MollifierSpec(meta.get("mollifier_kind", "smooth-bump"), eps)
        symbol = fld.mollifier_kernel(spec, u.grid, meta.get("symbol_method", "analytic"))
    return u, diag.evaluate(u, v, chi, header["t"], symbol)


def cmd_diagnose(paths, out):
    fields, records = [], []
    for p in paths:
        u, rec = diagnose_snapshot(p)
        fields.append((str(p), u))
        records.append(rec)
    dist = []
    for (pa, a), (pb, b) in zip(fields, fields[1:]):
        rel = diag.relative_entropy(a, b)
        dist.append((pa, pb, rel.l1, diag.l2_distance(a, b), rel.value, rel.ckp_slack))
    if out is None:
        w = sys.stdout
        w.write(",".join(diag.CSV_COLUMNS) + "\n")
        for r in records:
            w.write(",".join(diag.format_float(x) for x in r.as_row()) + "\n")
        return EXIT_OK
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    diag.write_records(out / "diagnostics.csv", records)
    if dist:
        diag.write_csv(out / "distances.csv",
                       ("a", "b", "l1", "l2", "relative_entropy", "ckp_slack"), dist)
    return EXIT_OK


COMMANDS = {
    "solve-pde": cmd_solve_pde,
    "eps-convergence": cmd_eps_convergence,
    "coupling-study": cmd_coupling_study,
    "chaos-study": cmd_chaos_study,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="ksmeanfield", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML or JSON experiment file")
        p.add_argument("--out", type=Path, help="run directory")
        p.add_argument("--seed", type=int, help="override particles.seed")
        p.add_argument("--threads", type=int, help="worker cap (results do not change)")
        p.add_argument("-v", "--verbose", action="store_true")
    p = sub.add_parser("diagnose")
    p.add_argument("paths", nargs="+", type=Path, help="density snapshot headers (.json)")
    p.add_argument("--out", type=Path, help="write CSVs here instead of stdout")
    p.add_argument("--threads", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _set_threads(k):
    if k is None:
        return
    if k < 1:
        raise ConfigError("--threads must be >= 1")
    numba.set_num_threads(min(k, numba.config.NUMBA_NUM_THREADS))
    fld.set_workers(k)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    # numba probes for TBB on first parallel launch; the fallback layer is fine
    warnings.filterwarnings("ignore", message="The TBB threading layer", category=numba.NumbaWarning)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        if args.command == "diagnose":
            return cmd_diagnose(args.paths, args.out)
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        cfg = with_overrides(cfg, seed=args.seed)
        if args.command == "chaos-study" and cfg.chaos.bandwidth < 2 * cfg.grid2d().h:
            raise ConfigError(f"chaos.bandwidth must be >= 2h = {2 * cfg.grid2d().h}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (fld.SnapshotError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    out = args.out or Path(cfg.output_dir or Path("runs") / args.command)
    ctx = RunContext(args.command, cfg, out)
    try:
        code = COMMANDS[args.command](ctx)
    except pde.InitialDataError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        ctx.validity["numerics_ok"] = False
        _safe_manifest(ctx, f"numerical failure: {exc}")
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (fld.SnapshotError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        ctx.write_manifest()
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    if ctx.status != "VALID":
        log.warning("run marked INVALID: %s", ctx.validity)
    return code


def _safe_manifest(ctx, error):
    try:
        ctx.write_manifest(error=error)
    except OSError:
        log.exception("could not write manifest")


if __name__ == "__main__":
    sys.exit(main())
