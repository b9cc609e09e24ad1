"""Experiment drivers: seed-averaged solves, spectral studies, dataset tools.

Every driver returns the CSV header and rows (floats printed with 17
significant digits) plus structured data for the figure renderers.  All
randomness flows through per-seed generators in a fixed order -- problem
sampling, preconditioner setup, initial guess -- so reruns of the same
configuration produce byte-identical reports.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import scipy.sparse.linalg

from .config import (
    BuildContext,
    ConfigError,
    RunConfig,
    build_preconditioner,
    problem_from_dict,
    typecheck,
)
from .containers import read_tensorpack, write_tensorpack
from .fem import (
    GrfSampler,
    ProblemSpec,
    assemble_diffusion,
    assemble_helmholtz,
    assemble_mass,
    build_mesh,
    build_problem,
    interior_block,
    jump_coefficient,
    sample_grf,
)
from .krylov import fgmres, pcg, random_initial_guess
from .linalg import CsrMatrix
from .onet import CoarsePrec, coarse_build, tb_dense, trunk_eval
from .precond import (
    AsmPrec,
    CompositePrec,
    JacobiPrec,
    error_propagation_dense,
    jacobi_gamma_helmholtz,
    mode_amplification,
    mode_rayleigh,
    partition_structured,
)


def fmt(value) -> str:
    """Fixed-precision formatting so report bytes are reproducible."""
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    return str(value)


def write_csv(path, header, rows) -> bytes:
    import csv
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    blob = buf.getvalue().encode()
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


def _problem_label(spec: ProblemSpec):
    return f"{spec.variant}-L{spec.level}-{spec.dim}D"


def _mean_std(values):
    arr = np.asarray(values, dtype=float)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def _solve_once(cfg: RunConfig, seed, prec_expr):
    """One seeded run: sample the problem, build the chain, solve."""
    rng = np.random.default_rng(seed)
    a, f, meta = build_problem(cfg.problem, rng)
    ctx = BuildContext(a, meta["mesh"], meta, rng, cfg.base_dir)
    prec = build_preconditioner(prec_expr, ctx)
    x0 = random_initial_guess(a.n_rows, rng)
    if cfg.solver_type == "pcg":
        report = pcg(a, f, prec, x0=x0, stop=cfg.stop)
    else:
        report = fgmres(a, f, prec, restart=cfg.restart, x0=x0, stop=cfg.stop)
    return report, meta, prec


SOLVE_HEADER = ["seed", "problem", "preconditioner", "iterations", "termination",
                "final_rel_res"]


def run_solve(cfg: RunConfig) -> dict:
    """Seed-averaged solve; one row per seed plus an aggregate row."""
    label = _problem_label(cfg.problem)
    rows, histories, iterations = [], [], []
    all_converged = True
    prec_label = "none"
    for pos, seed in enumerate(cfg.seeds):
        report, meta, prec = _solve_once(cfg, seed, cfg.prec_expr)
        if pos == 0:
            typecheck(cfg, prec)
            prec_label = prec.label if prec is not None else "none"
        rows.append([seed, label, prec_label, report.iterations,
                     report.termination.value, report.final_relative_residual])
        histories.append((seed, report.residual_history))
        iterations.append(report.iterations)
        all_converged &= report.converged
    mean, std = _mean_std(iterations)
    rows.append(["aggregate", label, prec_label, mean, "mean+-std", std])
    return {"header": SOLVE_HEADER, "rows": rows, "histories": histories,
            "all_converged": all_converged, "label": f"{label} {prec_label}"}


_DEFAULT_EIGEN = {
    "panels": [
        {"k_h": 0.0, "cells": 50},
        {"k_h": 60.0, "cells": 80},
        {"k_h": 60.0, "cells": 50},
    ],
    "gammas": [1.0, "auto"],
    "tb_ks": [3, 6, 12],
    "model": "sine",
    "rayleigh": False,
    "seed": 0,
}


def run_eigen_study(cfg: RunConfig) -> dict:
    """Per-mode growth factors of smoother and coarse-step error operators.

    Dense analysis on the interior block; nonlinear components are not
    admissible here by construction (only damped Jacobi and linear coarse
    corrections are offered).
    """
    section = {**_DEFAULT_EIGEN, **cfg.extra.get("eigen", {})}
    rng = np.random.default_rng(int(section["seed"]))
    panels_out = []
    header = None
    rows = []
    for panel_id, panel in enumerate(section["panels"]):
        k_h = float(panel["k_h"])
        cells = int(panel["cells"])
        if cells > 600:
            raise ConfigError("eigen study limited to dense sizes (cells <= 600)")
        mesh = build_mesh(1, cells)
        if k_h > 0.0:
            a_full = assemble_helmholtz(mesh, k_h, override_resolution=True)
        else:
            a_full = assemble_diffusion(mesh, np.ones(mesh.n_nodes))
        a = interior_block(a_full, mesh.dirichlet_mask)
        vals, modes = np.linalg.eigh(a.to_dense())
        columns = {}
        for gamma_spec in section["gammas"]:
            if gamma_spec == "auto":
                gamma = 2.0 / 3.0 if k_h == 0.0 else jacobi_gamma_helmholtz(k_h, mesh.h)
            else:
                gamma = float(gamma_spec)
            prec = JacobiPrec(a, gamma=gamma)
            e = error_propagation_dense(a, prec)
            columns[f"jacobi_g{gamma:.4g}"] = (mode_amplification(e, modes),
                                               mode_rayleigh(e, modes))
        interior_pts = mesh.coords[~mesh.dirichlet_mask]
        from .onet import SineTrunkModel

        for k in section["tb_ks"]:
            model = SineTrunkModel(1, int(k)) if section["model"] == "sine" else None
            if model is None:
                raise ConfigError("eigen study supports the sine fixture only")
            basis, info = tb_dense(model, interior_pts, int(k), rng)
            prec = CoarsePrec(coarse_build(a, basis, info))
            e = error_propagation_dense(a, prec)
            columns[f"tb_k{int(k)}"] = (mode_amplification(e, modes),
                                        mode_rayleigh(e, modes))
        if header is None:
            header = ["panel", "k_h", "cells", "mode", "a_eigenvalue"]
            for name in columns:
                header.append(f"amp_{name}")
                if section["rayleigh"]:
                    header.append(f"ray_{name}")
        for j in range(a.n_rows):
            row = [panel_id, k_h, cells, j + 1, vals[j]]
            for name, (amp, ray) in columns.items():
                row.append(amp[j])
                if section["rayleigh"]:
                    row.append(ray[j])
            rows.append(row)
        panels_out.append({"k_h": k_h, "cells": cells, "eigs": vals,
                           "columns": {n: c[0] for n, c in columns.items()}})
    return {"header": header, "rows": rows, "panels": panels_out}


_DEFAULT_MG = {
    "schedules": ["J,D", "J,J,D", "J,J,J,D", "J,J,J,J,D"],
    "model": "sine",
}


def run_mg_study(cfg: RunConfig) -> dict:
    """Iteration counts for a list of V-cycle smoothing schedules."""
    section = {**_DEFAULT_MG, **cfg.extra.get("mg", {})}
    header = ["schedule", "levels", "iters_mean", "iters_std", "converged"]
    rows, labels, means, stds = [], [], [], []
    for schedule in section["schedules"]:
        expr = f"mg(schedule='{schedule}', model='{section['model']}')"
        its, ok = [], True
        for seed in cfg.seeds:
            report, _, _ = _solve_once(cfg, seed, expr)
            its.append(report.iterations)
            ok &= report.converged
        mean, std = _mean_std(its)
        levels = schedule.count(",") + 1
        rows.append([schedule, levels, mean, std, ok])
        labels.append(schedule)
        means.append(mean)
        stds.append(std)
    return {"header": header, "rows": rows, "schedules": labels,
            "means": means, "stds": stds}


_DEFAULT_ASM = {
    "s": [4, 16, 64],
    "overlap": 0,
    "coarse": [{"k": 0}, {"k": 8, "sparse": True, "smooth": "auto", "model": "sine", "p": 8}],
}


def _coarse_label(spec):
    if int(spec.get("k", 0)) == 0:
        return "none"
    kind = "sparse" if spec.get("sparse") else "dense"
    return f"tb-{kind}-k{int(spec['k'])}"


def run_asm_study(cfg: RunConfig) -> dict:
    """Two-level additive Schwarz sweep over subdomain counts and coarse sizes."""
    section = {**_DEFAULT_ASM, **cfg.extra.get("asm", {})}
    overlap = int(section["overlap"])
    header = ["s", "overlap", "coarse", "iters_mean", "iters_std", "converged"]
    results = {(int(s), _coarse_label(c)): [] for s in section["s"] for c in section["coarse"]}
    conv = {key: True for key in results}
    for seed in cfg.seeds:
        rng = np.random.default_rng(seed)
        a, f, meta = build_problem(cfg.problem, rng)
        ctx = BuildContext(a, meta["mesh"], meta, rng, cfg.base_dir)
        x0 = random_initial_guess(a.n_rows, rng)
        for s in section["s"]:
            part = partition_structured(ctx.mesh, int(s), overlap)
            asm = AsmPrec(a, part)
            for cspec in section["coarse"]:
                label = _coarse_label(cspec)
                k = int(cspec.get("k", 0))
                if k == 0:
                    prec = asm
                else:
                    kwargs = [f"k={k}"]
                    if cspec.get("sparse"):
                        kwargs += [f"s={int(s)}", "sparse=true", f"overlap={overlap}"]
                    if cspec.get("smooth") is not None:
                        sm = cspec["smooth"]
                        kwargs.append(f"smooth={sm}" if sm != "auto" else "smooth=auto")
                    if cspec.get("p") is not None:
                        kwargs.append(f"p={int(cspec['p'])}")
                    kwargs.append(f"model='{cspec.get('model', 'sine')}'")
                    coarse = build_preconditioner(f"tb_coarse({', '.join(kwargs)})", ctx)
                    prec = CompositePrec(a, [(asm, 1.0), (coarse, 1.0)], "additive",
                                         label=f"{asm.label}+{coarse.label}")
                if cfg.solver_type == "pcg":
                    report = pcg(a, f, prec, x0=x0, stop=cfg.stop)
                else:
                    report = fgmres(a, f, prec, restart=cfg.restart, x0=x0, stop=cfg.stop)
                results[(int(s), label)].append(report.iterations)
                conv[(int(s), label)] &= report.converged
    rows = []
    series = {}
    for (s, label), its in results.items():
        mean, std = _mean_std(its)
        rows.append([s, overlap, label, mean, std, conv[(s, label)]])
        series.setdefault(label, {})[s] = mean
    return {"header": header, "rows": rows, "s_values": [int(s) for s in section["s"]],
            "series": series}


_DEFAULT_DATASET = {"n_samples": 2500, "seed": 0, "rhs": "problem"}


def _sample_rhs_nodal(spec: ProblemSpec, mesh, strategy, rng, grf_cache):
    if strategy == "problem":
        return None  # keep the rhs drawn by build_problem
    if strategy == "grf":
        key = "grf"
        if key not in grf_cache:
            grf_cache[key] = GrfSampler(0.0, spec.rhs_sigma, spec.rhs_ell_value)
        return sample_grf(grf_cache[key], mesh.coords, rng)
    if strategy == "rnd":
        return rng.standard_normal(mesh.n_nodes)
    if strategy == "uniform":
        return rng.uniform(0.0, 1.0, size=mesh.n_nodes)
    raise ConfigError(f"unknown rhs strategy {strategy!r}")


def _dataset_branches(spec: ProblemSpec, meta):
    theta = meta["theta"]
    if spec.variant == "diff":
        return [theta["coef_nodal"], theta["rhs_nodal"]]
    if spec.variant == "jumpdiff":
        return [np.array([theta["jump_k"]]), theta["rhs_nodal"]]
    if spec.variant == "helm1d":
        return [theta["rhs_nodal"]]
    if spec.variant == "helm2d":
        return [np.asarray(theta["source"]), theta["rhs_nodal"]]
    raise ConfigError(spec.variant)


def generate_dataset(cfg: RunConfig, out_path, n_samples=None, seed=None, rhs=None) -> dict:
    """Sample problems, solve them accurately, store inputs and targets.

    Targets are direct sparse solves, audited against a 1e-10 relative
    residual; a failed solve aborts with the offending sample index.
    """
    section = {**_DEFAULT_DATASET, **cfg.extra.get("dataset", {})}
    n_samples = int(section["n_samples"] if n_samples is None else n_samples)
    seed = int(section["seed"] if seed is None else seed)
    rhs = str(section["rhs"] if rhs is None else rhs)
    if n_samples < 1:
        raise ConfigError("need at least one sample")
    spec = cfg.problem
    mesh = spec.build_mesh()
    mass = assemble_mass(mesh)
    grf_cache = {}
    branch_rows = None
    targets = np.empty((n_samples, mesh.n_nodes))
    for j in range(n_samples):
        rng = np.random.default_rng([seed, j])
        a, f, meta = build_problem(spec, rng)
        override = _sample_rhs_nodal(spec, mesh, rhs, rng, grf_cache)
        if override is not None:
            meta["theta"]["rhs_nodal"] = override
            f = mass.scipy @ override
            f[mesh.dirichlet_mask] = 0.0
        lu = scipy.sparse.linalg.splu(a.scipy.tocsc())
        u = lu.solve(f)
        resid = np.linalg.norm(a.scipy @ u - f)
        if not np.isfinite(resid) or resid > 1e-10 * max(np.linalg.norm(f), 1e-30):
            raise RuntimeError(f"dataset solve failed the residual audit at sample {j}")
        branches = _dataset_branches(spec, meta)
        if branch_rows is None:
            branch_rows = [np.empty((n_samples, len(b))) for b in branches]
        for l, b in enumerate(branches):
            branch_rows[l][j] = b
        targets[j] = u
    tensors = {f"branch_{l}": arr for l, arr in enumerate(branch_rows)}
    tensors["coords"] = mesh.coords
    tensors["targets"] = targets
    meta_out = {
        "problem": _spec_dict(spec),
        "seed": seed,
        "n_samples": n_samples,
        "rhs": rhs,
        "n_branches": len(branch_rows),
    }
    write_tensorpack(out_path, tensors, meta_out)
    return {"n_samples": n_samples, "n_points": mesh.n_nodes,
            "n_branches": len(branch_rows), "path": str(out_path)}


def _spec_dict(spec: ProblemSpec) -> dict:
    d = {
        "variant": spec.variant, "level": spec.level, "dim": spec.dim,
        "cells": spec.resolved_cells(), "resolution_override": spec.resolution_override,
        "coef_mean": spec.coef_mean, "coef_sigma": spec.coef_sigma,
        "coef_ell": spec.coef_ell, "coef_floor": spec.coef_floor,
        "rhs_sigma": spec.rhs_sigma, "rhs_ell": spec.rhs_ell_value,
        "jump_log10_range": list(spec.jump_log10_range), "jump_k": spec.jump_k,
        "squared_source_distance": spec.squared_source_distance,
    }
    if spec.variant in ("helm1d", "helm2d"):
        d["k_h"] = spec.wave_number
    return d


def _rebuild_from_sample(spec: ProblemSpec, mesh, mass, branches):
    """Reassemble (A, f) from stored branch inputs, mirroring the generator."""
    if spec.variant == "diff":
        a = assemble_diffusion(mesh, branches[0])
        rhs_nodal = branches[1]
    elif spec.variant == "jumpdiff":
        a = assemble_diffusion(mesh, k_elem=jump_coefficient(mesh, float(branches[0][0])))
        rhs_nodal = branches[1]
    elif spec.variant == "helm1d":
        a = assemble_helmholtz(mesh, spec.wave_number,
                               override_resolution=spec.resolution_override)
        rhs_nodal = branches[0]
    elif spec.variant == "helm2d":
        a = assemble_helmholtz(mesh, spec.wave_number,
                               override_resolution=spec.resolution_override)
        src = np.asarray(branches[0])
        dist = np.linalg.norm(mesh.coords - src[None, :], axis=1)
        if spec.squared_source_distance:
            dist = dist ** 2
        rhs_nodal = np.exp(-0.5 * dist / spec.source_width ** 2)
    else:
        raise ConfigError(spec.variant)
    f = mass.scipy @ rhs_nodal
    f[mesh.dirichlet_mask] = 0.0
    return a, f


def verify_dataset(path, tol=1e-10, max_samples=None) -> dict:
    """Audit stored targets: residual of every sample below tolerance."""
    tensors, meta = read_tensorpack(path)
    if meta is None or "problem" not in meta:
        raise ConfigError("dataset container is missing its problem description")
    spec = problem_from_dict({k: v for k, v in meta["problem"].items()
                              if k != "rhs_ell" or v is not None})
    mesh = spec.build_mesh()
    mass = assemble_mass(mesh)
    targets = tensors["targets"]
    n = targets.shape[0] if max_samples is None else min(targets.shape[0], int(max_samples))
    n_branches = int(meta["n_branches"])
    failures = []
    worst = 0.0
    if spec.variant == "helm2d" and meta.get("rhs", "problem") != "problem":
        # the stored branch carries the source location, not a resampled rhs
        raise ConfigError("cannot verify helm2d datasets with a resampled rhs")
    for j in range(n):
        branches = [tensors[f"branch_{l}"][j] for l in range(n_branches)]
        a, f = _rebuild_from_sample(spec, mesh, mass, branches)
        rel = np.linalg.norm(a.scipy @ targets[j] - f) / max(np.linalg.norm(f), 1e-30)
        worst = max(worst, rel)
        if rel > tol:
            failures.append((j, rel))
    return {"checked": n, "failures": failures, "worst": worst, "ok": not failures}


def dump_basis(cfg: RunConfig, out_path, model_ref="sine", k=12, p=None, seed=0) -> dict:
    """Write tentative and orthonormalized basis columns for inspection."""
    rng = np.random.default_rng(seed)
    a, _, meta = build_problem(cfg.problem, rng)
    ctx = BuildContext(a, meta["mesh"], meta, rng, cfg.base_dir)
    model = ctx.get_model(model_ref, p=p if p is not None else k)
    points = ctx.mesh.coords
    chosen_rng = np.random.default_rng([seed, 1])
    chosen = np.sort(chosen_rng.choice(model.p, size=int(k), replace=False))
    tentative = trunk_eval(model, points)[:, chosen]
    ortho, info = tb_dense(model, points, int(k), np.random.default_rng([seed, 1]))
    write_tensorpack(out_path, {
        "coords": points,
        "tentative": tentative,
        "orthonormal": ortho,
        "columns": chosen.astype(np.int64),
    }, {"model": str(model_ref), "k": int(k), "kept": info["kept"]})
    return {"kept": info["kept"], "k": int(k), "path": str(out_path)}
