"""Command line interface.

    enrichfem <command> --config run.cfg [--prior prior.weights]
                        [--out DIR] [--seed INT] [--threads INT]

Commands: train, solve, converge, gains, msweep, degree-study.  Exit codes:
0 success, 2 configuration or usage error, 3 numerical failure.

Every run writes config.resolved (the fully resolved configuration) and
run.log next to its CSV/weights outputs.  With --threads 1 (the default)
outputs are bit-exact functions of the resolved config and seed; the thread
count is exported before numpy is first imported, which is why all heavy
imports live inside the command implementations.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import (
    ConfigError,
    EnrichFemError,
    NumericalError,
)

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

COMMANDS = ("train", "solve", "converge", "gains", "msweep", "degree-study")

# errors at or below this are solver floor, not convergence data
FLOOR = 1e-10


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enrichfem",
        description="Finite element solvers enriched by neural-network priors",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument(
        "--config", required=True, metavar="PATH",
        help="run configuration file (key = value with sections)",
    )
    parser.add_argument(
        "--prior", metavar="PATH",
        help="weights file from a previous train run",
    )
    parser.add_argument(
        "--out", metavar="DIR",
        help="output directory, overrides [output] directory",
    )
    parser.add_argument(
        "--seed", type=int, metavar="INT",
        help="global seed, overrides [output] seed",
    )
    parser.add_argument(
        "--threads", type=int, default=1, metavar="INT",
        help="BLAS/OpenMP thread count (default 1, bit-exact)",
    )
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    for var in _THREAD_VARS:
        os.environ[var] = str(args.threads)
    try:
        run_command(args)
    except (NumericalError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except EnrichFemError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def run_command(args) -> Path:
    """Execute one parsed CLI invocation; returns the output directory."""
    from . import config as cfgmod
    from .priors import load_prior

    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    cfg = cfgmod.resolve_config(cfgmod.parse_config(text))
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be nonnegative")
        cfg.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    if not cfg.out_dir:
        raise ConfigError("no output directory: set [output] directory or --out")

    prior = None
    if args.prior:
        if not Path(args.prior).exists():
            raise ConfigError(f"prior file not found: {args.prior}")
        prior = load_prior(args.prior)
        if prior.problem_id and prior.problem_id != cfg.problem_id:
            raise ConfigError(
                f"prior was trained for {prior.problem_id!r}, "
                f"config says {cfg.problem_id!r}"
            )

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log = [f"command: {args.command}", f"seed: {cfg.seed}"]

    command = args.command.replace("-", "_")
    handler = globals()[f"cmd_{command}"]
    handler(cfg, out, log, prior)

    cfgmod.write_resolved(cfg, out / "config.resolved")
    log.append("wrote: config.resolved")
    with open(out / "run.log", "w") as f:
        f.write("\n".join(log) + "\n")
    return out


def _fixed_mu(cfg, problem):
    return problem.mu_1 if cfg.mu is None else cfg.mu


def _make_space(cfg, problem, N: int):
    from .catalog import build_annulus_mesh
    from .fem import LagrangeSpace

    if cfg.n_r is not None or cfg.n_t is not None:
        if cfg.n_r is None or cfg.n_t is None:
            raise ConfigError("[mesh] n_r and n_t must be given together")
        mesh = build_annulus_mesh(cfg.n_r, cfg.n_t, 0.25, 1.0)
    else:
        mesh = problem.build_mesh(N)
    return LagrangeSpace(mesh, cfg.k)


def _single_N(cfg, command: str) -> int:
    if len(cfg.mesh_sizes) != 1:
        raise ConfigError(f"{command} expects exactly one [mesh] N value")
    return cfg.mesh_sizes[0]


def _reference(cfg, problem, mu, log):
    """Analytic solution when the catalog has one, else a fine P3 solve."""
    from .enrichment import solve_standard
    from .fem import LagrangeSpace

    if problem.solution is not None:
        return problem.solution
    n_ref = cfg.n_ref if cfg.n_ref else 2 * max(cfg.mesh_sizes) - 1
    log.append(f"reference: fine-mesh solve N={n_ref} k=3")
    space = LagrangeSpace(problem.build_mesh(n_ref), 3)
    return solve_standard(space, problem.coefficients(mu))


def _solve_modes(cfg, problem, space, mu, prior):
    """One (standard, additive, {M: multiplicative}) triple per the config."""
    from .enrichment import solve_additive, solve_multiplicative, solve_standard

    coeffs = problem.coefficients(mu)
    needs_prior = [m for m in cfg.modes if m != "standard"]
    if needs_prior and prior is None:
        raise ConfigError(
            f"mode {needs_prior[0]} needs --prior (a train run's weights file)"
        )
    standard = additive = None
    mult = {}
    m_add = None if cfg.ms is None else cfg.ms[0]
    if "standard" in cfg.modes:
        standard = solve_standard(space, coeffs)
    if "additive" in cfg.modes:
        additive = solve_additive(space, coeffs, prior, prior_interp_degree=m_add)
    if "multiplicative" in cfg.modes:
        for lift in cfg.lifts:
            mult[lift] = solve_multiplicative(
                space, coeffs, prior, lift=lift, bc_mode=cfg.bc_mode
            )
    return standard, additive, mult


def cmd_train(cfg, out: Path, log, prior=None) -> None:
    """Train a prior for the catalog problem; warm-starts from --prior."""
    from . import config as cfgmod
    from .catalog import get_problem
    from .neural import MlpConfig, init_network
    from .priors import Prior, RawComposition, composition_for, save_prior
    from .training import network_seed, train, write_loss_history

    problem = get_problem(cfg.problem_id)
    tc = cfgmod.training_config(cfg)
    if prior is None:
        preset = cfgmod.TRAINING_PRESETS[cfg.problem_id]
        net = init_network(
            MlpConfig(
                n_spatial=problem.dim,
                n_param=problem.n_params,
                hidden=preset.hidden,
                activation=preset.activation,
                n_fourier=preset.n_fourier,
                seed=network_seed(cfg.seed),
            )
        )
        # a boundary loss means boundary conditions are learned, not imposed
        if tc.w_b > 0:
            composition = RawComposition()
        else:
            composition = composition_for(problem)
        prior = Prior(net, composition, problem_id=cfg.problem_id)
    elif prior.network is None:
        raise ConfigError("--prior for train must hold a network prior")

    trained, history = train(problem, prior, tc)
    save_prior(trained, out / "prior.weights")
    write_loss_history(history, out / "loss.csv")
    log.append(f"epochs: {tc.n_epochs}")
    if history:
        log.append(f"final J_total: {history[-1].j_total:.17g}")
    log.append("wrote: prior.weights")
    log.append("wrote: loss.csv")


def cmd_solve(cfg, out: Path, log, prior=None) -> None:
    from .analysis import compute_errors, write_convergence_table
    from .catalog import get_problem

    problem = get_problem(cfg.problem_id)
    N = _single_N(cfg, "solve")
    mu = _fixed_mu(cfg, problem)
    space = _make_space(cfg, problem, N)
    reference = _reference(cfg, problem, mu, log)
    standard, additive, mult = _solve_modes(cfg, problem, space, mu, prior)
    rec = compute_errors(
        space, mu, reference,
        standard=standard, prior=prior, additive=additive,
        multiplicative=mult, N=N,
    )
    write_convergence_table([rec], out / "errors.csv", floor=FLOOR)
    log.append(f"problem: {cfg.problem_id} k={cfg.k} N={N}")
    for name, err in (
        ("e_h", rec.e_h), ("e_theta", rec.e_theta), ("e_h_plus", rec.e_add)
    ):
        if err is not None:
            log.append(f"{name}: {err:.17g}")
    for lift in sorted(rec.e_mult):
        log.append(f"e_h_M_{lift:g}: {rec.e_mult[lift]:.17g}")
    log.append("wrote: errors.csv")
    if cfg.samples > 0:
        _write_samples(cfg, out, space, mu, reference,
                       standard, additive, mult)
        log.append("wrote: samples.csv")


def _write_samples(cfg, out, space, mu, reference, standard, additive, mult):
    """Solution values at the mesh vertices (always inside the domain)."""
    import numpy as np

    from .fields import Field

    pts = space.mesh.nodes
    cols = [("x", pts[:, 0])]
    if pts.shape[1] == 2:
        cols.append(("y", pts[:, 1]))
    if isinstance(reference, Field):
        cols.append(("u_ref", reference(pts, mu)))
    else:
        cols.append(("u_ref", reference(pts)))
    if standard is not None:
        cols.append(("u_h", standard(pts)))
    if additive is not None:
        cols.append(("u_h_plus", additive(pts)))
    for lift in sorted(mult):
        cols.append((f"u_h_M_{lift:g}", mult[lift](pts)))
    names = ",".join(name for name, _ in cols)
    data = np.column_stack([v for _, v in cols])
    with open(out / "samples.csv", "w") as f:
        f.write(names + "\n")
        for row in data:
            f.write(",".join(f"{v:.17g}" for v in row) + "\n")


def cmd_converge(cfg, out: Path, log, prior=None) -> None:
    from .analysis import compute_errors, write_convergence_table
    from .catalog import get_problem

    problem = get_problem(cfg.problem_id)
    if len(cfg.mesh_sizes) < 2:
        raise ConfigError("converge expects at least two [mesh] N values")
    if cfg.n_r is not None:
        raise ConfigError("converge varies N; fixed n_r/n_t cannot apply")
    mu = _fixed_mu(cfg, problem)
    reference = _reference(cfg, problem, mu, log)
    records = []
    for N in cfg.mesh_sizes:
        space = _make_space(cfg, problem, N)
        standard, additive, mult = _solve_modes(cfg, problem, space, mu, prior)
        records.append(
            compute_errors(
                space, mu, reference,
                standard=standard, prior=prior, additive=additive,
                multiplicative=mult, N=N,
            )
        )
    write_convergence_table(records, out / "convergence.csv", floor=FLOOR)
    log.append(f"problem: {cfg.problem_id} k={cfg.k} N={list(cfg.mesh_sizes)}")
    log.append("wrote: convergence.csv")


def cmd_gains(cfg, out: Path, log, prior=None) -> None:
    from .analysis import (
        compute_errors,
        compute_gains,
        write_gain_table,
        write_stats_table,
    )
    from .catalog import get_problem
    from .training import seed_stream
    import numpy as np

    problem = get_problem(cfg.problem_id)
    if cfg.n_p < 1:
        raise ConfigError("gains needs [problem] n_p (the sample size)")
    if prior is None:
        raise ConfigError("gains needs --prior (a train run's weights file)")
    N = _single_N(cfg, "gains")
    box = np.asarray(problem.param_box if cfg.box is None else cfg.box)
    rng = np.random.default_rng(seed_stream(cfg.seed, "param_sample"))
    sample = rng.uniform(box[:, 0], box[:, 1], size=(cfg.n_p, box.shape[0]))
    space = _make_space(cfg, problem, N)

    modes = cfg.modes
    if "standard" not in modes:
        modes = ("standard",) + modes
    if "additive" not in modes:
        modes = modes + ("additive",)
    sample_cfg = _clone(cfg, modes=modes)

    records = []
    for mu in sample:
        reference = _reference(sample_cfg, problem, mu, log=[])
        standard, additive, mult = _solve_modes(
            sample_cfg, problem, space, mu, prior
        )
        records.append(
            compute_errors(
                space, mu, reference,
                standard=standard, prior=prior, additive=additive,
                multiplicative=mult, N=N,
            )
        )
    write_gain_table(records, out / "gains.csv")
    stats = compute_gains(records)
    write_stats_table(stats, out / "stats.csv")
    log.append(f"problem: {cfg.problem_id} k={cfg.k} N={N} n_p={cfg.n_p}")
    for name in sorted(stats):
        s = stats[name]
        log.append(f"{name}: mean {s.mean:.17g} (n_infinite {s.n_infinite})")
    log.append("wrote: gains.csv")
    log.append("wrote: stats.csv")


def _clone(cfg, **changes):
    from dataclasses import replace

    return replace(cfg, **changes)


def cmd_msweep(cfg, out: Path, log, prior=None) -> None:
    from .analysis import m_sweep, write_m_sweep_table
    from .catalog import get_problem
    from .errors import UnsupportedError

    problem = get_problem(cfg.problem_id)
    if prior is None:
        raise ConfigError("msweep needs --prior (a train run's weights file)")
    if problem.solution is None:
        raise UnsupportedError(
            "msweep estimates gain constants from the analytic solution; "
            f"{cfg.problem_id} has none"
        )
    N = _single_N(cfg, "msweep")
    space = _make_space(cfg, problem, N)
    rows = m_sweep(problem, prior, cfg.lifts, space, mu=cfg.mu)
    write_m_sweep_table(rows, out / "msweep.csv")
    log.append(f"problem: {cfg.problem_id} k={cfg.k} N={N} M={list(cfg.lifts)}")
    log.append("wrote: msweep.csv")


def cmd_degree_study(cfg, out: Path, log, prior=None) -> None:
    from .analysis import quadrature_degree_study, write_degree_study_table
    from .catalog import get_problem

    problem = get_problem(cfg.problem_id)
    if prior is None:
        raise ConfigError(
            "degree-study needs --prior (a train run's weights file)"
        )
    N = _single_N(cfg, "degree-study")
    space = _make_space(cfg, problem, N)
    ms = cfg.ms if cfg.ms is not None else tuple(range(cfg.k, cfg.k + 5))
    rows = quadrature_degree_study(problem, prior, space, ms, mu=cfg.mu)
    write_degree_study_table(rows, out / "degree_study.csv")
    log.append(f"problem: {cfg.problem_id} k={cfg.k} N={N} m={list(ms)}")
    log.append("wrote: degree_study.csv")


if __name__ == "__main__":
    sys.exit(main())
