"""Run configuration: JSON files plus a nested preconditioner expression DSL.

A run file is plain JSON (problem, solver, preconditioner, seeds, stop,
study sections).  The preconditioner is a compositional expression such as

    mult(jacobi(nu=3, gamma=auto), tb_coarse(k=32, model='sine'))

with ``auto`` damping resolved from the problem's wave number and mesh size.
Building is deliberately deterministic: problem sampling, preconditioner
setup and the initial guess all draw from one per-seed generator in a fixed
order.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import (
    ProblemSpec,
    StructuredMesh,
    assemble_diffusion,
    assemble_helmholtz,
    interp_matrix,
    jump_coefficient,
)
from .krylov import StopCriteria
from .linalg import CsrMatrix
from .onet import (
    CoarsePrec,
    DpPrec,
    OnetModel,
    SineTrunkModel,
    build_dp_context,
    coarse_build,
    load_model,
    tb_dense,
    tb_sparse,
)
from .precond import (
    AsmPrec,
    CompositePrec,
    IdentityPrec,
    JacobiPrec,
    LuPrec,
    MgPrec,
    build_mg_levels,
    galerkin_coarse,
    geometric_mesh_hierarchy,
    jacobi_gamma_helmholtz,
    partition_graph,
    partition_structured,
)


class ConfigError(ValueError):
    """Raised for malformed run files or preconditioner expressions."""


@dataclass(frozen=True)
class PrecExpr:
    name: str
    args: tuple = ()
    kwargs: dict = field(default_factory=dict)

    def kw(self, key, default=None):
        return self.kwargs.get(key, default)


_TOKEN = re.compile(r"""
    \s*(?:
        (?P<num>[+-]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
      | (?P<name>[A-Za-z_][A-Za-z0-9_.\-]*)
      | (?P<str>'[^']*'|"[^"]*")
      | (?P<punct>[(),=])
    )""", re.VERBOSE)


def _tokenize(text):
    pos, out = 0, []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            if text[pos:].strip() == "":
                break
            raise ConfigError(f"cannot tokenize expression at: {text[pos:]!r}")
        pos = m.end()
        if m.lastgroup == "num":
            val = m.group("num")
            out.append(("num", float(val) if any(c in val for c in ".eE") else int(val)))
        elif m.lastgroup == "name":
            out.append(("name", m.group("name")))
        elif m.lastgroup == "str":
            out.append(("str", m.group("str")[1:-1]))
        else:
            out.append((m.group("punct"), None))
    out.append(("end", None))
    return out


_KEYWORDS = {"true": True, "false": False, "none": None, "null": None, "auto": "auto"}


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind=None):
        tok = self.tokens[self.i]
        if kind is not None and tok[0] != kind:
            raise ConfigError(f"expected {kind!r}, found {tok}")
        self.i += 1
        return tok

    def parse_expr(self):
        kind, value = self.take()
        if kind == "num" or kind == "str":
            return value
        if kind != "name":
            raise ConfigError(f"unexpected token {value!r} in expression")
        if value.lower() in _KEYWORDS and self.peek()[0] != "(":
            return _KEYWORDS[value.lower()]
        if self.peek()[0] != "(":
            return PrecExpr(value.lower())
        self.take("(")
        args, kwargs = [], {}
        if self.peek()[0] != ")":
            while True:
                if (self.peek()[0] == "name"
                        and self.tokens[self.i + 1][0] == "="):
                    key = self.take("name")[1].lower()
                    self.take("=")
                    kwargs[key] = self.parse_expr()
                else:
                    if kwargs:
                        raise ConfigError("positional argument after keyword argument")
                    args.append(self.parse_expr())
                if self.peek()[0] == ")":
                    break
                self.take(",")
        self.take(")")
        return PrecExpr(value.lower(), tuple(args), kwargs)


def parse_prec_expr(text) -> PrecExpr | None:
    """Parse a preconditioner expression string into its tree."""
    if text is None:
        return None
    if isinstance(text, PrecExpr):
        return text
    parser = _Parser(_tokenize(str(text)))
    expr = parser.parse_expr()
    parser.take("end")
    if not isinstance(expr, PrecExpr):
        raise ConfigError("preconditioner expression must be a call like jacobi(...)")
    return expr


@dataclass
class BuildContext:
    """Everything an expression needs to become a concrete preconditioner."""

    a: CsrMatrix
    mesh: StructuredMesh
    meta: dict
    rng: np.random.Generator
    base_dir: Path = Path(".")
    model_cache: dict = field(default_factory=dict)

    @property
    def k_h(self):
        return float(self.meta.get("k_h", 0.0))

    @property
    def spd_problem(self):
        return bool(self.meta.get("spd", False))

    def resolve_gamma(self, value, h=None):
        if value is None or value == "auto":
            k = self.k_h
            if k > 0.0:
                return jacobi_gamma_helmholtz(k, self.mesh.h if h is None else h)
            return 2.0 / 3.0
        return float(value)

    def get_model(self, ref, p=None, dim=None):
        """Resolve a model reference: 'sine' fixture or a container path."""
        dim = dim if dim is not None else self.mesh.dim
        key = (ref, p, dim)
        if key in self.model_cache:
            return self.model_cache[key]
        if ref == "sine":
            if p is None:
                raise ConfigError("the sine fixture needs an explicit basis count")
            model = SineTrunkModel(dim, int(p))
        else:
            model = load_model(self.base_dir / ref)
        self.model_cache[key] = model
        return model


def _level_assembler(ctx: BuildContext, galerkin=False):
    """Re-discretization callback for multigrid levels, variant aware."""
    meta = ctx.meta
    variant = meta.get("variant", "diff")
    theta = meta.get("theta", {})

    def assemble(mesh):
        if variant in ("helm1d", "helm2d"):
            return assemble_helmholtz(mesh, ctx.k_h, override_resolution=True)
        if variant == "jumpdiff":
            coef = jump_coefficient(mesh, theta.get("jump_k", 1.0))
            return assemble_diffusion(mesh, k_elem=coef)
        coef_fine = theta.get("coef_nodal")
        if coef_fine is None:
            coef = np.ones(mesh.n_nodes)
        else:
            # evaluate the fine-level coefficient field at the coarse nodes
            coef = interp_matrix(ctx.mesh, mesh.coords) @ coef_fine
        return assemble_diffusion(mesh, coef)

    return assemble


_SCHED_JACOBI = re.compile(r"^J(?:\((\d+)(?:,([0-9.eE+-]+|auto))?\))?$")
_SCHED_COMPOSITE = re.compile(r"^M\((\d+)\)$")


def _parse_schedule(text):
    entries = [e.strip() for e in str(text).split(",") if e.strip()]
    if not entries:
        raise ConfigError("empty smoothing schedule")
    if entries[-1].upper() != "D":
        raise ConfigError("schedule must end with the direct solve D")
    parsed = []
    for e in entries[:-1]:
        m = _SCHED_JACOBI.match(e)
        if m:
            nu = int(m.group(1)) if m.group(1) else 3
            gamma = m.group(2) if m.group(2) else "auto"
            parsed.append(("jacobi", nu, gamma))
            continue
        m = _SCHED_COMPOSITE.match(e)
        if m:
            parsed.append(("composite", int(m.group(1)), "auto"))
            continue
        raise ConfigError(f"cannot parse schedule entry {e!r}")
    parsed.append(("direct", 0, None))
    return parsed


def _build_mg(expr: PrecExpr, ctx: BuildContext):
    schedule = _parse_schedule(expr.kw("schedule", "J,D"))
    levels = int(expr.kw("levels", len(schedule)))
    if levels != len(schedule):
        raise ConfigError("schedule length must equal the number of levels")
    galerkin = bool(expr.kw("galerkin", False))
    model_ref = expr.kw("model", "sine")
    meshes = geometric_mesh_hierarchy(ctx.mesh.dim, ctx.mesh.cells_per_axis, levels)
    assemble = _level_assembler(ctx)

    def smoother_for(l, mesh, a):
        kind, arg, gamma_spec = schedule[l]
        gamma = ctx.resolve_gamma(gamma_spec, h=mesh.h)
        if kind == "jacobi":
            return JacobiPrec(a, gamma=gamma, steps=arg)
        jac = JacobiPrec(a, gamma=gamma, steps=3)
        model = ctx.get_model(model_ref, p=arg, dim=mesh.dim)
        basis, info = tb_dense(model, mesh.coords, k=arg, rng=ctx.rng)
        coarse = CoarsePrec(coarse_build(a, basis, info), label=f"coarse(k={arg})")
        return CompositePrec(a, [(jac, 1.0), (coarse, 1.0)],
                             label=f"mult(jacobi,coarse[{arg}])")

    if galerkin:
        mats = [assemble(meshes[0])]
        built = build_mg_levels(meshes, assemble, smoother_for)
        for l in range(1, levels):
            mats.append(galerkin_coarse(mats[l - 1], built[l - 1].prolong))
            built[l].a = mats[l]
        levels_list = built
    else:
        levels_list = build_mg_levels(meshes, assemble, smoother_for)
    label = "mg(" + expr.kw("schedule", "J,D") + ")"
    return MgPrec(levels_list, spd=ctx.spd_problem, label=label)


def _branch_fields(ctx: BuildContext):
    """Per-branch raw inputs following the dataset convention for each variant."""
    theta = ctx.meta.get("theta", {})
    variant = ctx.meta.get("variant")
    if variant == "diff":
        return [theta.get("coef_nodal"), theta.get("rhs_nodal")]
    if variant == "jumpdiff":
        return [np.array([theta.get("jump_k", 1.0)]), theta.get("rhs_nodal")]
    if variant == "helm1d":
        return [theta.get("rhs_nodal")]
    if variant == "helm2d":
        return [np.asarray(theta.get("source")), theta.get("rhs_nodal")]
    raise ConfigError(f"no branch-input convention for variant {variant!r}")


def _fit_branch_input(ctx: BuildContext, model: OnetModel, index, raw):
    grid = model.sensor_grids[index]
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    if raw.shape[0] == grid.size:
        return raw
    if raw.shape[0] == ctx.mesh.n_nodes:
        return interp_matrix(ctx.mesh, grid.coords) @ raw
    raise ConfigError(
        f"branch {index} input of length {raw.shape[0]} fits neither the sensor "
        f"grid ({grid.size}) nor the mesh ({ctx.mesh.n_nodes})")


def _build_dp(expr: PrecExpr, ctx: BuildContext):
    ref = expr.kw("model")
    if ref is None:
        raise ConfigError("dp(...) needs model=<path>")
    model = ctx.get_model(ref)
    if not isinstance(model, OnetModel):
        raise ConfigError("dp needs a trained network, not an analytic fixture")
    f_index = int(expr.kw("f_branch", model.nf - 1))
    fields = _branch_fields(ctx)
    if len(fields) < model.nf:
        raise ConfigError("problem does not provide enough branch inputs for this model")
    inputs = [None if l == f_index else _fit_branch_input(ctx, model, l, fields[l])
              for l in range(model.nf)]
    ctx_dp = build_dp_context(model, ctx.mesh, f_index, inputs)
    return DpPrec(ctx_dp, label=f"dp({ref})")


def _build_tb_coarse(expr: PrecExpr, ctx: BuildContext):
    k = expr.kw("k")
    if k is None:
        raise ConfigError("tb_coarse(...) needs k=<basis count>")
    k = int(k)
    ref = expr.kw("model", "sine")
    p = expr.kw("p", k if ref == "sine" else None)
    model = ctx.get_model(ref, p=p)
    points = ctx.mesh.coords
    if expr.kw("sparse", False):
        s = expr.kw("s")
        if s is None:
            raise ConfigError("sparse tb_coarse needs s=<subdomain count>")
        part = partition_structured(ctx.mesh, int(s), int(expr.kw("overlap", 0)))
        smooth = expr.kw("smooth")
        gamma = None if smooth is None else ctx.resolve_gamma(smooth)
        basis, info = tb_sparse(model, points, part, k, ctx.rng,
                                smooth_gamma=gamma, a=ctx.a)
    else:
        basis, info = tb_dense(model, points, k, ctx.rng)
    info["model"] = str(ref)
    label = f"tb{'s' if expr.kw('sparse', False) else ''}(k={k})"
    return CoarsePrec(coarse_build(ctx.a, basis, info), label=label)


def _expr_key(node):
    if isinstance(node, PrecExpr):
        return (node.name, tuple(_expr_key(a) for a in node.args),
                tuple(sorted((k, _expr_key(v)) for k, v in node.kwargs.items())))
    return ("lit", node)


def build_preconditioner(expr, ctx: BuildContext):
    """Turn an expression tree (or its string form) into a preconditioner."""
    expr = parse_prec_expr(expr) if not isinstance(expr, (PrecExpr, type(None))) else expr
    if expr is None or expr.name == "none":
        return None
    name = expr.name
    if name == "identity":
        return IdentityPrec(ctx.a.n_rows)
    if name == "jacobi":
        nu = int(expr.kw("nu", 1))
        gamma = ctx.resolve_gamma(expr.kw("gamma", "auto"))
        return JacobiPrec(ctx.a, gamma=gamma, steps=nu)
    if name == "exact":
        return LuPrec(ctx.a)
    if name == "asm":
        s = expr.kw("s", expr.args[0] if expr.args else None)
        if s is None:
            raise ConfigError("asm(...) needs s=<subdomain count>")
        if expr.kw("partition", "box") == "graph":
            part = partition_graph(ctx.a, int(s), int(expr.kw("overlap", 0)),
                                   seed=int(expr.kw("seed", 0)))
        else:
            part = partition_structured(ctx.mesh, int(s), int(expr.kw("overlap", 0)))
        return AsmPrec(ctx.a, part)
    if name == "tb_coarse":
        return _build_tb_coarse(expr, ctx)
    if name == "dp":
        return _build_dp(expr, ctx)
    if name == "mg":
        return _build_mg(expr, ctx)
    if name in ("mult", "add"):
        parts = []
        built_cache = {}
        for arg in expr.args:
            gamma = 1.0
            node = arg
            if isinstance(arg, PrecExpr) and arg.name == "scaled":
                if len(arg.args) != 2:
                    raise ConfigError("scaled(...) takes (gamma, expression)")
                gamma = float(arg.args[0])
                node = arg.args[1]
            # identical subexpressions share one object, so palindromes such
            # as mult(jacobi(...), coarse, jacobi(...)) flag as symmetric
            key = _expr_key(node)
            if key not in built_cache:
                built_cache[key] = build_preconditioner(node, ctx)
            built = built_cache[key]
            if built is not None:
                parts.append((built, gamma))
        if not parts:
            return None
        if len(parts) == 1 and parts[0][1] == 1.0:
            return parts[0][0]
        mode = "multiplicative" if name == "mult" else "additive"
        return CompositePrec(ctx.a, parts, mode)
    raise ConfigError(f"unknown preconditioner {name!r}")


@dataclass
class RunConfig:
    problem: ProblemSpec
    solver: dict
    prec_expr: PrecExpr | None
    seeds: list
    stop: StopCriteria
    output: str | None = None
    extra: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    @property
    def solver_type(self):
        return self.solver.get("type", "fgmres")

    @property
    def restart(self):
        return int(self.solver.get("restart", 50))


_PROBLEM_KEYS = {
    "variant", "level", "dim", "cells", "k_h", "resolution_override",
    "coef_mean", "coef_sigma", "coef_ell", "coef_floor", "rhs_sigma", "rhs_ell",
    "jump_log10_range", "jump_k", "squared_source_distance",
}


def problem_from_dict(d) -> ProblemSpec:
    unknown = set(d) - _PROBLEM_KEYS
    if unknown:
        raise ConfigError(f"unknown problem keys: {sorted(unknown)}")
    if "variant" not in d:
        raise ConfigError("problem section needs a variant")
    kwargs = dict(d)
    if "jump_log10_range" in kwargs:
        kwargs["jump_log10_range"] = tuple(kwargs["jump_log10_range"])
    try:
        return ProblemSpec(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad problem section: {exc}") from exc


def stop_from_dict(d, spd_problem) -> StopCriteria:
    d = dict(d or {})
    if "a_norm_increment" not in d and not spd_problem:
        # the A-norm is not a norm for indefinite operators
        d["a_norm_increment"] = None
    try:
        return StopCriteria(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad stop section: {exc}") from exc


def load_run_config(source, base_dir=None) -> RunConfig:
    """Load a JSON run file (path, JSON string, or dict)."""
    if isinstance(source, (str, Path)) and Path(source).exists():
        base = Path(source).parent if base_dir is None else Path(base_dir)
        raw = json.loads(Path(source).read_text())
    elif isinstance(source, dict):
        base = Path(".") if base_dir is None else Path(base_dir)
        raw = source
    else:
        base = Path(".") if base_dir is None else Path(base_dir)
        raw = json.loads(str(source))
    if "problem" not in raw:
        raise ConfigError("run file needs a problem section")
    problem = problem_from_dict(raw["problem"])
    solver = dict(raw.get("solver", {"type": "pcg" if problem.is_spd() else "fgmres"}))
    if solver.get("type", "fgmres") not in ("pcg", "fgmres"):
        raise ConfigError(f"unknown solver type {solver.get('type')!r}")
    seeds = raw.get("seeds", list(range(10)))
    if isinstance(seeds, dict):
        seeds = list(range(int(seeds.get("start", 0)),
                           int(seeds.get("start", 0)) + int(seeds.get("count", 10))))
    if not seeds:
        raise ConfigError("need at least one seed")
    prec = parse_prec_expr(raw.get("preconditioner"))
    stop = stop_from_dict(raw.get("stop"), problem.is_spd())
    known = {"problem", "solver", "preconditioner", "seeds", "stop", "output"}
    extra = {k: v for k, v in raw.items() if k not in known}
    return RunConfig(problem, solver, prec, list(seeds), stop,
                     raw.get("output"), extra, base)


def typecheck(cfg: RunConfig, prec) -> None:
    """Reject solver/preconditioner pairings before any solve runs."""
    if cfg.solver_type == "pcg":
        if not cfg.problem.is_spd():
            raise ConfigError("pcg requires an SPD problem; use fgmres")
        if prec is not None and not prec.spd:
            raise ConfigError(
                f"pcg requires an SPD preconditioner chain, got {prec.label!r}")
