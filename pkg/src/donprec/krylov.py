"""Preconditioned conjugate gradients and restarted flexible GMRES.

Both solvers share the same termination protocol: stop as soon as the
absolute residual, the A-norm of the iterate increment, or the relative
residual drops below its tolerance.  The increment criterion clamps the
quadratic form at zero and can be disabled (indefinite operators make it
meaningless), which run configurations do for the Helmholtz problems.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .linalg import CsrMatrix, as_vector


class Termination(enum.Enum):
    ABS_RES = "abs_res"
    A_NORM_INC = "a_norm_inc"
    REL_RES = "rel_res"
    MAX_ITERS = "max_iters"
    BREAKDOWN = "breakdown"


CONVERGED = (Termination.ABS_RES, Termination.A_NORM_INC, Termination.REL_RES)


@dataclass(frozen=True)
class StopCriteria:
    abs_res: float = 1e-12
    a_norm_increment: float | None = 1e-12
    rel_res: float = 1e-9
    max_iters: int = 1000

    def __post_init__(self):
        if self.abs_res <= 0 or self.rel_res <= 0:
            raise ValueError("tolerances must be positive")
        if self.a_norm_increment is not None and self.a_norm_increment <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class SolveReport:
    iterations: int
    residual_history: np.ndarray
    termination: Termination
    solution: np.ndarray
    extras: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.termination in CONVERGED

    @property
    def final_relative_residual(self) -> float:
        h = self.residual_history
        return float(h[-1] / h[0]) if h[0] > 0 else 0.0


def random_initial_guess(n, rng) -> np.ndarray:
    """Uniform random start vector in [-1, 1]^n."""
    return rng.uniform(-1.0, 1.0, size=n)


def _apply_prec(m, r):
    return r.copy() if m is None else m.apply(r)


def pcg(a: CsrMatrix, f, m=None, x0=None, stop: StopCriteria = StopCriteria()) -> SolveReport:
    """Preconditioned conjugate gradients for SPD systems.

    The preconditioner must advertise ``spd=True``; a non-positive curvature
    ``<p, Ap>`` terminates with ``BREAKDOWN`` since it falsifies that claim.
    """
    f = as_vector(f, a.n_rows)
    if m is not None and not getattr(m, "spd", False):
        raise ValueError("pcg requires a preconditioner flagged spd=True")
    u = np.zeros(a.n_rows) if x0 is None else as_vector(x0, a.n_rows).copy()
    r = f - a.scipy @ u
    res = np.linalg.norm(r)
    res0 = res
    history = [res]
    if res <= stop.abs_res:
        return SolveReport(0, np.array(history), Termination.ABS_RES, u)

    z = _apply_prec(m, r)
    p = z.copy()
    rz = float(r @ z)
    termination = Termination.MAX_ITERS
    iterations = 0
    for _ in range(stop.max_iters):
        ap = a.scipy @ p
        pap = float(p @ ap)
        if pap <= 0.0 or rz == 0.0:
            termination = Termination.BREAKDOWN
            break
        alpha = rz / pap
        u += alpha * p
        r -= alpha * ap
        iterations += 1
        res = np.linalg.norm(r)
        history.append(res)
        a_inc = abs(alpha) * np.sqrt(pap)
        if res <= stop.abs_res:
            termination = Termination.ABS_RES
            break
        if stop.a_norm_increment is not None and a_inc <= stop.a_norm_increment:
            termination = Termination.A_NORM_INC
            break
        if res / res0 <= stop.rel_res:
            termination = Termination.REL_RES
            break
        z = _apply_prec(m, r)
        rz_new = float(r @ z)
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p
    return SolveReport(iterations, np.array(history), termination, u)


def fgmres(a: CsrMatrix, f, m=None, restart=50, x0=None,
           stop: StopCriteria = StopCriteria(), reorthogonalize=False,
           record_basis=False) -> SolveReport:
    """Restarted flexible GMRES with modified Gram-Schmidt orthogonalization.

    The preconditioner may change between applications (it is re-applied to
    every basis vector), so nonlinear operators are admissible.  Residuals in
    the report are the implicit least-squares values maintained by Givens
    rotations; the recorded basis extras also carry the explicit residual of
    the last cycle for cross-checking.
    """
    f = as_vector(f, a.n_rows)
    if restart < 1:
        raise ValueError("restart length must be >= 1")
    n = a.n_rows
    u = np.zeros(n) if x0 is None else as_vector(x0, n).copy()
    r = f - a.scipy @ u
    res0 = np.linalg.norm(r)
    history = [res0]
    if res0 <= stop.abs_res:
        return SolveReport(0, np.array(history), Termination.ABS_RES, u)

    check_inc = stop.a_norm_increment is not None
    total = 0
    cycles = 0
    termination = None
    extras: dict = {}

    while termination is None:
        zeta = np.linalg.norm(r)
        if zeta <= stop.abs_res:
            termination = Termination.ABS_RES
            break
        v = np.zeros((n, restart + 1))
        z_mat = np.zeros((n, restart))
        h_raw = np.zeros((restart + 1, restart))
        h_rot = np.zeros((restart + 1, restart))
        g = np.zeros(restart + 1)
        g[0] = zeta
        cos = np.zeros(restart)
        sin = np.zeros(restart)
        v[:, 0] = r / zeta
        y_prev = np.zeros(0)
        i_used = 0
        happy = False

        for i in range(restart):
            z = _apply_prec(m, v[:, i])
            z_mat[:, i] = z
            w = a.scipy @ z
            w_scale = np.linalg.norm(w)
            for j in range(i + 1):
                hij = float(w @ v[:, j])
                h_raw[j, i] = hij
                w -= hij * v[:, j]
            if reorthogonalize:
                for j in range(i + 1):
                    corr = float(w @ v[:, j])
                    h_raw[j, i] += corr
                    w -= corr * v[:, j]
            hnext = np.linalg.norm(w)
            h_raw[i + 1, i] = hnext
            if hnext > 1e-14 * max(w_scale, 1e-300):
                v[:, i + 1] = w / hnext
            else:
                happy = True

            # rotate the new column and update the implicit residual
            col = h_raw[: i + 2, i].copy()
            for j in range(i):
                t0 = cos[j] * col[j] + sin[j] * col[j + 1]
                t1 = -sin[j] * col[j] + cos[j] * col[j + 1]
                col[j], col[j + 1] = t0, t1
            denom = np.hypot(col[i], col[i + 1])
            if denom == 0.0:
                cos[i], sin[i] = 1.0, 0.0
            else:
                cos[i], sin[i] = col[i] / denom, col[i + 1] / denom
            h_rot[: i + 2, i] = col
            h_rot[i, i] = cos[i] * col[i] + sin[i] * col[i + 1]
            h_rot[i + 1, i] = 0.0
            g[i + 1] = -sin[i] * g[i]
            g[i] = cos[i] * g[i]
            implicit_res = abs(g[i + 1])

            total += 1
            i_used = i + 1
            history.append(implicit_res)

            a_inc = None
            if check_inc or implicit_res <= stop.abs_res or implicit_res / res0 <= stop.rel_res or happy:
                y = scipy.linalg.solve_triangular(h_rot[:i_used, :i_used], g[:i_used])
            if check_inc:
                dy = y.copy()
                dy[: len(y_prev)] -= y_prev
                du = z_mat[:, :i_used] @ dy
                adu = v[:, : i_used + 1] @ (h_raw[: i_used + 1, :i_used] @ dy)
                a_inc = np.sqrt(max(0.0, float(du @ adu)))
                y_prev = y

            if implicit_res <= stop.abs_res:
                termination = Termination.ABS_RES
            elif a_inc is not None and a_inc <= stop.a_norm_increment:
                termination = Termination.A_NORM_INC
            elif implicit_res / res0 <= stop.rel_res:
                termination = Termination.REL_RES
            elif total >= stop.max_iters:
                termination = Termination.MAX_ITERS
            elif happy:
                termination = Termination.BREAKDOWN
            if termination is not None:
                break

        y = scipy.linalg.solve_triangular(h_rot[:i_used, :i_used], g[:i_used])
        u = u + z_mat[:, :i_used] @ y
        r = f - a.scipy @ u
        cycles += 1
        if record_basis:
            extras["arnoldi"] = {
                "z": z_mat[:, :i_used].copy(),
                "v": v[:, : i_used + 1].copy(),
                "hbar": h_raw[: i_used + 1, :i_used].copy(),
                "implicit_res": abs(g[i_used]),
                "explicit_res": float(np.linalg.norm(r)),
            }

    extras["cycles"] = cycles
    return SolveReport(total, np.array(history), termination, u, extras)
