"""Command-line experiment harness.

Subcommands mirror the study drivers: seed-averaged solves, dataset
generation and audit, the eigenvalue study, the multigrid schedule study,
the additive Schwarz sweep, and a basis dump for inspection.  Commands that
run solves exit 0 only when every seed converged; ``--figures`` renders a
PNG next to the CSV report.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import figures, studies
from .config import ConfigError, load_run_config


def _load(args):
    return load_run_config(args.config)


def _report_path(args, cfg, default_name):
    if getattr(args, "output", None):
        return Path(args.output)
    if cfg.output:
        return cfg.base_dir / cfg.output
    return Path(default_name)


def _finish(args, path, result, renderer):
    studies.write_csv(path, result["header"], result["rows"])
    print(f"wrote {path}")
    if args.figures:
        png = renderer(result, path.with_suffix(".png"))
        print(f"wrote {png}")


def cmd_solve(args):
    cfg = _load(args)
    result = studies.run_solve(cfg)
    path = _report_path(args, cfg, "solve.csv")
    _finish(args, path, result, figures.render_solve)
    agg = result["rows"][-1]
    print(f"iterations: {agg[3]} +- {agg[5]} ({'all converged' if result['all_converged'] else 'NOT all converged'})")
    return 0 if result["all_converged"] else 1


def cmd_eigen_study(args):
    cfg = _load(args)
    result = studies.run_eigen_study(cfg)
    path = _report_path(args, cfg, "eigen_study.csv")
    _finish(args, path, result, figures.render_eigen)
    return 0


def cmd_mg_study(args):
    cfg = _load(args)
    result = studies.run_mg_study(cfg)
    path = _report_path(args, cfg, "mg_study.csv")
    _finish(args, path, result, figures.render_mg)
    for row in result["rows"]:
        print(f"  {row[0]:<40} levels={row[1]} its={row[2]:g}")
    return 0 if all(row[4] for row in result["rows"]) else 1


def cmd_asm_study(args):
    cfg = _load(args)
    result = studies.run_asm_study(cfg)
    path = _report_path(args, cfg, "asm_study.csv")
    _finish(args, path, result, figures.render_asm)
    return 0 if all(row[5] for row in result["rows"]) else 1


def cmd_gen_dataset(args):
    cfg = _load(args)
    out = Path(args.out)
    info = studies.generate_dataset(cfg, out, n_samples=args.samples,
                                    seed=args.seed, rhs=args.rhs)
    print(f"wrote {info['path']}: {info['n_samples']} samples, "
          f"{info['n_branches']} branch inputs, {info['n_points']} points")
    return 0


def cmd_verify_dataset(args):
    result = studies.verify_dataset(args.path, tol=args.tol, max_samples=args.samples)
    status = "ok" if result["ok"] else "FAILED"
    print(f"{status}: checked {result['checked']} samples, "
          f"worst residual {result['worst']:.3e}")
    for j, rel in result["failures"][:20]:
        print(f"  sample {j}: relative residual {rel:.3e}")
    return 0 if result["ok"] else 1


def cmd_dump_basis(args):
    cfg = _load(args)
    info = studies.dump_basis(cfg, Path(args.out), model_ref=args.model,
                              k=args.k, p=args.p, seed=args.seed)
    print(f"wrote {info['path']} with {info['kept']} orthonormal columns (k={info['k']})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="donprec",
        description="Hybrid operator-network / iterative preconditioner toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        p.add_argument("--config", required=True, help="JSON run configuration")
        return p

    for name, fn, helptext, default in [
        ("solve", cmd_solve, "run a seed-averaged preconditioned solve", "solve.csv"),
        ("eigen-study", cmd_eigen_study, "per-mode error growth factors", "eigen_study.csv"),
        ("mg-study", cmd_mg_study, "V-cycle smoothing-schedule sweep", "mg_study.csv"),
        ("asm-study", cmd_asm_study, "additive Schwarz scalability sweep", "asm_study.csv"),
    ]:
        p = add(name, fn, help=helptext)
        p.add_argument("--output", help=f"CSV path (default {default})")
        p.add_argument("--figures", action="store_true",
                       help="also render a PNG next to the CSV")

    p = add("gen-dataset", cmd_gen_dataset, help="sample problems and store solved targets")
    p.add_argument("--out", required=True, help="output tensor container")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--rhs", choices=["problem", "grf", "rnd", "uniform"], default=None)

    p = sub.add_parser("verify-dataset", help="audit stored dataset targets")
    p.set_defaults(fn=cmd_verify_dataset)
    p.add_argument("path")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--samples", type=int, default=None)

    p = add("dump-basis", cmd_dump_basis, help="write basis columns for inspection")
    p.add_argument("--out", required=True)
    p.add_argument("--model", default="sine")
    p.add_argument("--k", type=int, default=12)
    p.add_argument("--p", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
