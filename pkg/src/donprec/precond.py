"""Subspace-correction preconditioner algebra.

Every preconditioner exposes ``apply`` plus honest ``linear``/``spd`` flags;
``pcg`` refuses anything not flagged SPD.  Composition is multiplicative
(error propagation factors into a product) or additive (weighted sum), and
the classical building blocks are damped Jacobi, overlapping additive
Schwarz with dense local solves, and a geometric multigrid V-cycle with a
per-level smoother schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse

from .fem import StructuredMesh, interp_matrix
from .linalg import CsrMatrix, LuSolver, SingularMatrixError, as_vector, operator_to_dense


class Preconditioner:
    """Base apply-contract: maps a residual to a correction of the same length."""

    label = "prec"
    linear = True
    spd = False

    def __init__(self, n):
        self.n = int(n)

    def apply(self, r) -> np.ndarray:
        r = as_vector(r, self.n)
        return self._apply(r)

    def _apply(self, r):  # pragma: no cover - abstract
        raise NotImplementedError

    def __repr__(self):
        return f"<{type(self).__name__} {self.label} n={self.n} linear={self.linear} spd={self.spd}>"


class IdentityPrec(Preconditioner):
    label = "identity"
    spd = True

    def _apply(self, r):
        return r.copy()


class WrappedPrec(Preconditioner):
    """Adapter turning a plain callable into a preconditioner."""

    def __init__(self, fn, n, *, linear, spd, label="wrapped"):
        super().__init__(n)
        self._fn = fn
        self.linear = linear
        self.spd = spd
        self.label = label

    def _apply(self, r):
        return np.asarray(self._fn(r), dtype=np.float64)


class JacobiPrec(Preconditioner):
    """``steps`` damped-Jacobi sweeps, written as Richardson iterations.

    One sweep from a zero start is ``z = gamma * D^-1 r``; further sweeps do
    ``z <- z + gamma * D^-1 (r - A z)``.
    """

    def __init__(self, a: CsrMatrix, gamma=2.0 / 3.0, steps=1):
        super().__init__(a.n_rows)
        if steps < 1:
            raise ValueError("steps must be >= 1")
        diag = a.diagonal()
        if np.any(diag == 0.0):
            raise ValueError("Jacobi needs a nonzero diagonal")
        self.a = a
        self.gamma = float(gamma)
        self.steps = int(steps)
        self.diag = diag
        self.inv_diag = 1.0 / diag
        self.spd = bool(gamma > 0.0 and np.all(diag > 0.0))
        self.label = f"jacobi(nu={steps},gamma={gamma:g})"

    def _apply(self, r):
        # divide rather than multiply by the cached reciprocal: this makes a
        # single sweep bitwise identical to one-point direct solves
        z = self.gamma * (r / self.diag)
        for _ in range(self.steps - 1):
            z = z + self.gamma * ((r - self.a.scipy @ z) / self.diag)
        return z


class LuPrec(Preconditioner):
    """Exact inverse via a cached dense LU factorization."""

    def __init__(self, a, label="direct"):
        dense = a.to_dense() if isinstance(a, CsrMatrix) else np.asarray(a, dtype=np.float64)
        super().__init__(dense.shape[0])
        self._solver = LuSolver(dense)
        self.label = label
        try:
            np.linalg.cholesky(dense)
            self.spd = True
        except np.linalg.LinAlgError:
            self.spd = False

    def _apply(self, r):
        return self._solver.solve(r)


def jacobi_gamma_helmholtz(k_h, h) -> float:
    """Damping factor (2 - k^2 h^2) / (3 - k^2 h^2) for the Helmholtz smoother."""
    kh2 = (k_h * h) ** 2
    denom = 3.0 - kh2
    if abs(denom) < 1e-12:
        raise ZeroDivisionError("smoother damping undefined: 3 - k^2 h^2 is ~0")
    return (2.0 - kh2) / denom


def _palindromic(parts):
    sig = [(id(p), g) for p, g in parts]
    return sig == sig[::-1]


class CompositePrec(Preconditioner):
    """Weighted multiplicative or additive combination of preconditioners.

    Additive with SPD parts and positive weights stays SPD; a multiplicative
    chain is only flagged SPD when it is a palindrome of SPD linear parts
    (e.g. smoother, coarse step, same smoother).
    """

    def __init__(self, a: CsrMatrix, parts, mode="multiplicative", label=None):
        super().__init__(a.n_rows)
        if mode not in ("multiplicative", "additive"):
            raise ValueError(f"unknown composition mode {mode!r}")
        parts = [(p, float(g)) for p, g in parts]
        if not parts:
            raise ValueError("composite needs at least one part")
        for p, _ in parts:
            if p.n != a.n_rows:
                raise ValueError("composite part dimension mismatch")
        self.a = a
        self.parts = parts
        self.mode = mode
        self.linear = all(p.linear for p, _ in parts)
        if mode == "additive":
            self.spd = all(p.spd for p, _ in parts) and all(g > 0 for _, g in parts)
        else:
            self.spd = (self.linear and all(p.spd for p, _ in parts)
                        and all(g > 0 for _, g in parts) and _palindromic(parts))
        self.label = label or (mode[:4] + "(" + ",".join(p.label for p, _ in parts) + ")")

    def _apply(self, r):
        return composite_apply(self, self.a, r)


def composite_apply(c: CompositePrec, a: CsrMatrix, r) -> np.ndarray:
    """Apply a composite against an explicit operator ``a``."""
    r = as_vector(r, a.n_rows)
    if c.mode == "additive":
        z = np.zeros_like(r)
        for p, g in c.parts:
            z += g * p.apply(r)
        return z
    z = np.zeros_like(r)
    for p, g in c.parts:
        z = z + g * p.apply(r - a.scipy @ z)
    return z


@dataclass(frozen=True)
class Partition:
    """Axis-aligned overlapping decomposition of a structured mesh's nodes."""

    overlapping: tuple
    nonoverlapping: tuple
    overlap: int
    factors: tuple

    @property
    def n_subdomains(self):
        return len(self.overlapping)


def _axis_factorizations(s, dim, limits):
    if dim == 1:
        return [(s,)] if s <= limits[0] else []
    out = []
    for f in range(1, s + 1):
        if s % f == 0 and f <= limits[0]:
            for rest in _axis_factorizations(s // f, dim - 1, limits[1:]):
                out.append((f,) + rest)
    return out


def partition_structured(mesh: StructuredMesh, n_subdomains, overlap=0, factors=None) -> Partition:
    """Split the node grid into ``n_subdomains`` axis-aligned blocks.

    Non-overlapping blocks tile the grid; overlapping sets grow each block by
    ``overlap`` node layers per axis.  The subdomain count must factor across
    the axes (choose ``factors`` explicitly to override the balanced default).
    """
    npa = mesh.nodes_per_axis
    if n_subdomains < 1 or n_subdomains > mesh.n_nodes:
        raise ValueError("subdomain count out of range")
    if overlap < 0:
        raise ValueError("overlap must be nonnegative")
    if factors is None:
        options = _axis_factorizations(int(n_subdomains), mesh.dim, (npa,) * mesh.dim)
        if not options:
            raise ValueError(
                f"cannot factor {n_subdomains} subdomains across a {mesh.dim}D grid")
        factors = min(options, key=lambda fs: (max(fs) / min(fs), fs))
    factors = tuple(int(f) for f in factors)
    if len(factors) != mesh.dim or np.prod(factors) != n_subdomains:
        raise ValueError("factors must multiply to the subdomain count, one per axis")
    if any(f > npa for f in factors):
        raise ValueError("more subdomains than node layers along an axis")

    axis_ranges = [np.array_split(np.arange(npa), f) for f in factors]
    shape = (npa,) * mesh.dim
    own, grown = [], []
    for block in np.ndindex(*factors):
        inner, outer = [], []
        for ax, b in enumerate(block):
            rng = axis_ranges[ax][b]
            inner.append(rng)
            lo = max(int(rng[0]) - overlap, 0)
            hi = min(int(rng[-1]) + overlap, npa - 1)
            outer.append(np.arange(lo, hi + 1))
        own.append(_grid_ids(inner, shape))
        grown.append(_grid_ids(outer, shape))
    return Partition(tuple(grown), tuple(own), int(overlap), factors)


def _grid_ids(axis_indices, shape):
    mesh_idx = np.meshgrid(*axis_indices, indexing="ij")
    return np.ravel_multi_index([m.reshape(-1) for m in mesh_idx], shape).astype(np.int64)


def partition_graph(a: CsrMatrix, n_subdomains, overlap=0, seed=0) -> Partition:
    """Ragged partition grown by balanced BFS over the matrix graph.

    This mirrors the semantics of a graph partitioner (irregular part
    boundaries) while staying deterministic: seed nodes come from the given
    generator seed and parts claim one node per round.  Overlap grows each
    index set by whole adjacency layers.
    """
    from collections import deque

    n = a.n_rows
    if n_subdomains < 1 or n_subdomains > n:
        raise ValueError("subdomain count out of range")
    rng = np.random.default_rng(seed)
    sp = a.scipy
    owner = np.full(n, -1, dtype=np.int64)
    starts = rng.choice(n, size=n_subdomains, replace=False)
    queues = []
    for p, s in enumerate(starts):
        owner[s] = p
        queues.append(deque([int(s)]))
    sizes = [1] * n_subdomains
    alive = set(range(n_subdomains))
    unowned = n - n_subdomains
    while unowned and alive:
        # grow the currently smallest part to keep sizes balanced
        p = min(alive, key=lambda q: (sizes[q], q))
        q = queues[p]
        grabbed = False
        while q and not grabbed:
            u = q[0]
            for v in sp.indices[sp.indptr[u]:sp.indptr[u + 1]]:
                if owner[v] < 0:
                    owner[v] = p
                    q.append(int(v))
                    sizes[p] += 1
                    unowned -= 1
                    grabbed = True
                    break
            if not grabbed:
                q.popleft()
        if not q and not grabbed:
            # boxed in: replant this part at the first unclaimed node so part
            # sizes stay balanced (parts may end up disconnected, as with any
            # graph partitioner pressed for balance)
            free = np.flatnonzero(owner < 0)
            if len(free):
                v = int(free[0])
                owner[v] = p
                q.append(v)
                sizes[p] += 1
                unowned -= 1
            else:
                alive.discard(p)
    if unowned:
        # disconnected leftovers (possible with eliminated boundary rows)
        leftover = np.flatnonzero(owner < 0)
        owner[leftover] = np.arange(len(leftover)) % n_subdomains
    own = [np.flatnonzero(owner == p) for p in range(n_subdomains)]
    grown = []
    adjacency = sp != 0
    for p in range(n_subdomains):
        mask = np.zeros(n, dtype=bool)
        mask[own[p]] = True
        for _ in range(overlap):
            mask = mask | (adjacency @ mask)
        grown.append(np.flatnonzero(mask).astype(np.int64))
    return Partition(tuple(grown), tuple(o.astype(np.int64) for o in own),
                     int(overlap), (int(n_subdomains),))


class AsmPrec(Preconditioner):
    """Additive Schwarz: sum of dense local solves on overlapping blocks."""

    def __init__(self, a: CsrMatrix, partition: Partition):
        super().__init__(a.n_rows)
        self.partition = partition
        self._solvers = []
        spd = True
        for s, idx in enumerate(partition.overlapping):
            block = a.scipy[idx][:, idx].toarray()
            try:
                self._solvers.append(LuSolver(block))
            except SingularMatrixError as exc:
                raise ValueError(f"singular local operator on subdomain {s}") from exc
            try:
                np.linalg.cholesky(block)
            except np.linalg.LinAlgError:
                spd = False
        self.spd = spd
        self.label = f"asm(s={partition.n_subdomains},o={partition.overlap})"

    def _apply(self, r):
        z = np.zeros_like(r)
        for idx, solver in zip(self.partition.overlapping, self._solvers):
            z[idx] += solver.solve(r[idx])
        return z


@dataclass
class MgLevel:
    mesh: StructuredMesh
    a: CsrMatrix
    smoother: Preconditioner | None   # None on the coarsest level
    prolong: scipy.sparse.csr_matrix | None  # from the next-coarser level


class MgPrec(Preconditioner):
    """Geometric V-cycle over a list of levels ordered fine to coarse.

    Each smoother is applied once before and once after the coarse-grid
    correction; the coarsest operator is solved directly.  Restricted
    residuals are zeroed on coarse Dirichlet nodes so boundary handling stays
    with the fine-level smoother.
    """

    def __init__(self, levels, spd=False, label="mg"):
        super().__init__(levels[0].a.n_rows)
        if len(levels) < 1:
            raise ValueError("need at least one level")
        for lv in levels[:-1]:
            if lv.smoother is None:
                raise ValueError("every level but the coarsest needs a smoother")
            if lv.prolong is None:
                raise ValueError("every level but the coarsest needs a prolongation")
        self.levels = list(levels)
        self._coarse = LuSolver(self.levels[-1].a.to_dense())
        self.linear = all(lv.smoother is None or lv.smoother.linear for lv in self.levels)
        self.spd = spd
        self.label = label

    @property
    def n_levels(self):
        return len(self.levels)

    def _apply(self, r):
        return self._cycle(0, r)

    def _cycle(self, l, r):
        lv = self.levels[l]
        if l == len(self.levels) - 1:
            return self._coarse.solve(r)
        x = lv.smoother.apply(r)
        resid = r - lv.a.scipy @ x
        rc = lv.prolong.T @ resid
        rc[self.levels[l + 1].mesh.dirichlet_mask] = 0.0
        x = x + lv.prolong @ self._cycle(l + 1, rc)
        x = x + lv.smoother.apply(r - lv.a.scipy @ x)
        return x


def geometric_mesh_hierarchy(dim, fine_cells, n_levels):
    """Nested meshes fine to coarse, halving the cell count per level."""
    if n_levels < 1:
        raise ValueError("need at least one level")
    if fine_cells % 2 ** (n_levels - 1) != 0:
        raise ValueError(f"{fine_cells} cells cannot be coarsened {n_levels - 1} times")
    from .fem import build_mesh

    return [build_mesh(dim, fine_cells // 2 ** l) for l in range(n_levels)]


def build_mg_levels(meshes, assemble, smoother_for) -> list[MgLevel]:
    """Assemble every level and wire geometric prolongations between them.

    ``assemble(mesh)`` produces the level operator (re-discretization);
    ``smoother_for(level_index, mesh, a)`` produces the smoother, and is not
    called for the coarsest level.
    """
    levels = []
    for l, mesh in enumerate(meshes):
        a = assemble(mesh)
        smoother = smoother_for(l, mesh, a) if l < len(meshes) - 1 else None
        # prolongation interpolates coarse nodal values onto this level's nodes
        prolong = interp_matrix(meshes[l + 1], mesh.coords).tocsr() \
            if l < len(meshes) - 1 else None
        levels.append(MgLevel(mesh, a, smoother, prolong))
    return levels


def galerkin_coarse(a_fine: CsrMatrix, prolong) -> CsrMatrix:
    """Coarse operator P^T A P, the algebraic alternative to re-discretization."""
    return CsrMatrix.from_scipy((prolong.T @ a_fine.scipy @ prolong).tocsr())


def error_propagation_dense(a, m: Preconditioner, max_n=600) -> np.ndarray:
    """Dense capture of E = I - A M by applying M to unit vectors."""
    if not m.linear:
        raise ValueError("error propagation capture needs a linear preconditioner")
    a_dense = a.to_dense() if isinstance(a, CsrMatrix) else np.asarray(a, dtype=np.float64)
    n = a_dense.shape[0]
    if n > max_n:
        raise ValueError(f"dense capture limited to n <= {max_n}")
    m_dense = operator_to_dense(m.apply, n)
    return np.eye(n) - a_dense @ m_dense


def mode_amplification(e, modes) -> np.ndarray:
    """Per-mode growth factor ||E v_j||_2 for normalized mode columns."""
    modes = np.asarray(modes, dtype=np.float64)
    norms = np.linalg.norm(modes, axis=0)
    if np.any(np.abs(norms - 1.0) > 1e-8):
        raise ValueError("mode columns must be normalized")
    return np.linalg.norm(e @ modes, axis=0)


def mode_rayleigh(e, modes) -> np.ndarray:
    """Per-mode Rayleigh quotients <v_j, E v_j>, the alternative diagnostic."""
    modes = np.asarray(modes, dtype=np.float64)
    return np.einsum("ij,ij->j", modes, e @ modes)
