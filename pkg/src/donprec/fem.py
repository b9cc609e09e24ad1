"""Structured meshes, random-field sampling and P1 finite-element assembly.

The benchmark problems live on [0,1]^d with homogeneous Dirichlet boundaries.
Quads are split into two triangles and hexes into six tetrahedra so that every
element matrix is a hand-checkable simplex matrix.  Dirichlet rows and columns
are eliminated to the identity, which keeps assembled operators symmetric.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse

from .linalg import CsrMatrix, check_finite

BASE_CELLS = {1: 48, 2: 39, 3: 15}

_KUHN_PERMS = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))


@dataclass(frozen=True)
class StructuredMesh:
    """Uniform simplicial mesh of the unit cube in 1, 2 or 3 dimensions."""

    dim: int
    cells_per_axis: int
    coords: np.ndarray          # (n_nodes, dim)
    elements: np.ndarray        # (n_elems, dim + 1) node indices
    dirichlet_mask: np.ndarray  # (n_nodes,) bool, True on the boundary

    @property
    def n_nodes(self):
        return self.coords.shape[0]

    @property
    def h(self):
        return 1.0 / self.cells_per_axis

    @property
    def nodes_per_axis(self):
        return self.cells_per_axis + 1

    def node_grid_shape(self):
        return (self.nodes_per_axis,) * self.dim


@lru_cache(maxsize=64)
def build_mesh(dim, cells_per_axis) -> StructuredMesh:
    """Build the uniform mesh with ``cells_per_axis`` cells along every axis.

    Meshes are immutable and memoized, so repeated builds share node arrays
    (and therefore the cached covariance factors keyed on them).
    """
    if dim not in (1, 2, 3):
        raise ValueError(f"dim must be 1, 2 or 3, got {dim}")
    if cells_per_axis < 2:
        raise ValueError("need at least 2 cells per axis")
    c = int(cells_per_axis)
    axis = np.linspace(0.0, 1.0, c + 1)
    grids = np.meshgrid(*([axis] * dim), indexing="ij")
    coords = np.stack([g.reshape(-1) for g in grids], axis=1)

    npa = c + 1
    if dim == 1:
        i = np.arange(c)
        elements = np.stack([i, i + 1], axis=1)
    elif dim == 2:
        i, j = np.meshgrid(np.arange(c), np.arange(c), indexing="ij")
        n00 = (i * npa + j).reshape(-1)
        n10 = ((i + 1) * npa + j).reshape(-1)
        n01 = (i * npa + j + 1).reshape(-1)
        n11 = ((i + 1) * npa + j + 1).reshape(-1)
        tri1 = np.stack([n00, n10, n11], axis=1)
        tri2 = np.stack([n00, n11, n01], axis=1)
        elements = np.concatenate([tri1, tri2], axis=0)
    else:
        i, j, k = np.meshgrid(*([np.arange(c)] * 3), indexing="ij")
        base = np.stack([i.reshape(-1), j.reshape(-1), k.reshape(-1)], axis=1)
        strides = np.array([npa * npa, npa, 1])
        tets = []
        for perm in _KUHN_PERMS:
            # walk from the low corner to the high corner along permuted axes
            v = [base.copy()]
            cur = base.copy()
            for ax in perm:
                cur = cur.copy()
                cur[:, ax] += 1
                v.append(cur)
            tets.append(np.stack([vv @ strides for vv in v], axis=1))
        elements = np.concatenate(tets, axis=0)

    on_boundary = np.zeros(coords.shape[0], dtype=bool)
    for a in range(dim):
        on_boundary |= (coords[:, a] == 0.0) | (coords[:, a] == 1.0)
    return StructuredMesh(dim, c, coords, elements.astype(np.int64), on_boundary)


def _element_geometry(mesh):
    """Volumes and P1 basis gradients for every element, vectorized."""
    x = mesh.coords[mesh.elements]               # (ne, d+1, d)
    edges = x[:, 1:, :] - x[:, :1, :]            # (ne, d, d)
    det = np.linalg.det(edges)
    vol = np.abs(det) / math.factorial(mesh.dim)
    inv = np.linalg.inv(edges)
    grads_rest = np.transpose(inv, (0, 2, 1))    # row i-1 holds grad of lambda_i
    grad0 = -grads_rest.sum(axis=1, keepdims=True)
    grads = np.concatenate([grad0, grads_rest], axis=1)  # (ne, d+1, d)
    return vol, grads


def _scatter(mesh, local):
    """Accumulate per-element (d+1)x(d+1) blocks into a global CSR matrix."""
    ne, nl, _ = local.shape
    rows = np.repeat(mesh.elements, nl, axis=1).reshape(-1)
    cols = np.tile(mesh.elements, (1, nl)).reshape(-1)
    m = scipy.sparse.coo_matrix((local.reshape(-1), (rows, cols)),
                                shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def eliminate_dirichlet(m, mask) -> scipy.sparse.csr_matrix:
    """Zero Dirichlet rows and columns and put ones on their diagonal."""
    keep = scipy.sparse.diags((~mask).astype(np.float64))
    bnd = scipy.sparse.diags(mask.astype(np.float64))
    out = (keep @ m @ keep + bnd).tocsr()
    out.sum_duplicates()
    out.sort_indices()
    out.eliminate_zeros()
    return out


def element_coefficient(mesh, k_nodal):
    """Per-element coefficient as the average of the element's nodal values."""
    k_nodal = check_finite(np.asarray(k_nodal, dtype=np.float64), "coefficient")
    return k_nodal[mesh.elements].mean(axis=1)


def assemble_diffusion(mesh, k_nodal=None, *, k_elem=None) -> CsrMatrix:
    """Stiffness matrix of ``-div(K grad u)`` with Dirichlet elimination.

    The coefficient is either nodal (averaged per element) or directly
    per-element; the latter keeps coefficient jumps aligned with element edges.
    """
    if (k_nodal is None) == (k_elem is None):
        raise ValueError("pass exactly one of k_nodal, k_elem")
    coef = element_coefficient(mesh, k_nodal) if k_elem is None else \
        check_finite(np.asarray(k_elem, dtype=np.float64), "coefficient")
    if coef.shape != (mesh.elements.shape[0],):
        raise ValueError("coefficient shape does not match element count")
    if np.any(coef <= 0.0):
        raise ValueError("diffusion coefficient must be positive on every element")
    vol, grads = _element_geometry(mesh)
    local = np.einsum("e,eid,ejd->eij", vol * coef, grads, grads)
    return CsrMatrix.from_scipy(eliminate_dirichlet(_scatter(mesh, local), mesh.dirichlet_mask))


def assemble_mass(mesh) -> CsrMatrix:
    """Consistent P1 mass matrix (no boundary treatment)."""
    vol, _ = _element_geometry(mesh)
    d = mesh.dim
    base = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    local = vol[:, None, None] * base[None, :, :]
    return CsrMatrix.from_scipy(_scatter(mesh, local))


def lump_mass(mesh) -> np.ndarray:
    """Row sums of the consistent mass matrix (diagonal lumped mass)."""
    return assemble_mass(mesh).scipy @ np.ones(mesh.n_nodes)


def helmholtz_min_cells(k_h):
    """Smallest cell count satisfying the resolution rule h <= pi / (5 k)."""
    return max(2, int(math.ceil(5.0 * k_h / math.pi - 1e-12)))


def assemble_helmholtz(mesh, k_h, *, override_resolution=False) -> CsrMatrix:
    """Matrix of ``-Laplace(u) - k^2 u`` with Dirichlet elimination.

    Refuses under-resolved meshes unless ``override_resolution`` is set; the
    multigrid hierarchy uses the override on purpose for its coarse levels.
    """
    if k_h < 0.0:
        raise ValueError("wave number must be nonnegative")
    if k_h > 0.0 and not override_resolution:
        if mesh.h > math.pi / (5.0 * k_h) * (1.0 + 1e-12):
            raise ValueError(
                f"mesh with h={mesh.h:g} violates h <= pi/(5*k) for k={k_h:g}; "
                f"need at least {helmholtz_min_cells(k_h)} cells or an explicit override")
    vol, grads = _element_geometry(mesh)
    stiff_local = np.einsum("e,eid,ejd->eij", vol, grads, grads)
    d = mesh.dim
    base = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    mass_local = vol[:, None, None] * base[None, :, :]
    full = _scatter(mesh, stiff_local - k_h * k_h * mass_local)
    return CsrMatrix.from_scipy(eliminate_dirichlet(full, mesh.dirichlet_mask))


def interp_matrix(mesh, targets) -> scipy.sparse.csr_matrix:
    """Multilinear interpolation from mesh nodal values to arbitrary points.

    Rows sum to one.  Raises when a target leaves the unit cube; this routine
    doubles as the geometric prolongation between nested meshes and as the
    sensor-grid restriction used by the inference-based preconditioner.
    """
    pts = np.asarray(targets, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[1] != mesh.dim:
        raise ValueError(f"targets have dim {pts.shape[1]}, mesh has {mesh.dim}")
    if np.any(pts < -1e-12) or np.any(pts > 1.0 + 1e-12):
        raise ValueError("interpolation target outside the unit cube")
    c = mesh.cells_per_axis
    pos = np.clip(pts, 0.0, 1.0) * c
    i0 = np.minimum(pos.astype(np.int64), c - 1)
    w1 = pos - i0
    npa = c + 1
    n_t = pts.shape[0]
    rows, cols, vals = [], [], []
    for corner in range(2 ** mesh.dim):
        idx = np.zeros(n_t, dtype=np.int64)
        w = np.ones(n_t)
        for a in range(mesh.dim):
            bit = (corner >> a) & 1
            idx = idx * npa + (i0[:, a] + bit)
            w = w * (w1[:, a] if bit else 1.0 - w1[:, a])
        rows.append(np.arange(n_t))
        cols.append(idx)
        vals.append(w)
    m = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_t, mesh.n_nodes)).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    m.eliminate_zeros()
    return m


def interior_block(a: CsrMatrix, mask) -> CsrMatrix:
    """Restriction of a matrix to the non-Dirichlet degrees of freedom."""
    keep = np.flatnonzero(~np.asarray(mask, dtype=bool))
    sub = a.scipy[keep][:, keep].tocsr()
    return CsrMatrix.from_scipy(sub)


class GrfSampler:
    """Gaussian random field with covariance sigma^2 exp(-|x - y| / (2 ell^2)).

    The Cholesky factor for the most recent point set is cached; jitter is
    escalated from ``1e-10 * sigma^2`` until the factorization succeeds.
    """

    def __init__(self, mean, sigma, ell, jitter=1e-10, max_tries=12):
        if sigma < 0.0 or ell <= 0.0:
            raise ValueError("need sigma >= 0 and ell > 0")
        self.mean = float(mean)
        self.sigma = float(sigma)
        self.ell = float(ell)
        self.jitter = float(jitter)
        self.max_tries = int(max_tries)

    def covariance(self, x, y):
        d = np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))
        return self.sigma ** 2 * math.exp(-d / (2.0 * self.ell ** 2))

    def _factor_for(self, points):
        key = (id(points), points.shape, self.sigma, self.ell, self.jitter)
        hit = _GRF_FACTORS.get(key)
        if hit is not None and hit[0]() is points:
            return hit[1]
        dist = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
        cov = self.sigma ** 2 * np.exp(-dist / (2.0 * self.ell ** 2))
        eps = self.jitter * self.sigma ** 2
        for _ in range(self.max_tries):
            try:
                factor = np.linalg.cholesky(cov + eps * np.eye(len(points)))
                break
            except np.linalg.LinAlgError:
                eps *= 10.0
        else:
            raise RuntimeError("covariance Cholesky failed even with maximum jitter")
        try:
            _GRF_FACTORS[key] = (weakref.ref(points, lambda _: _GRF_FACTORS.pop(key, None)),
                                 factor)
        except TypeError:
            pass
        return factor


def sample_grf(sampler: GrfSampler, points, rng) -> np.ndarray:
    """Draw one field realization at ``points`` using the supplied generator."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if sampler.sigma == 0.0:
        return np.full(pts.shape[0], sampler.mean)
    factor = sampler._factor_for(pts)
    return sampler.mean + factor @ rng.standard_normal(pts.shape[0])


_GRF_FACTORS: dict = {}

DEFAULT_CHANNELS = ((0.125, 0.875, 0.225, 0.325), (0.125, 0.875, 0.675, 0.775))

_VARIANT_DIMS = {"diff": (1, 2, 3), "jumpdiff": (2,), "helm1d": (1,), "helm2d": (2,)}


@dataclass(frozen=True)
class ProblemSpec:
    """Benchmark problem description: variant, mesh level and sampling laws."""

    variant: str
    level: int = 1
    dim: int | None = None
    cells: int | None = None
    k_h: float | None = None
    resolution_override: bool = False
    # diffusion-coefficient field (diff variant)
    coef_mean: float = 0.5
    coef_sigma: float = 1.0
    coef_ell: float = 0.1
    coef_floor: float = 0.05
    # right-hand-side field (diff / helm1d variants)
    rhs_sigma: float = 1.0
    rhs_ell: float | None = None
    # jumping-coefficient channels, snapped to the coarsest 2D grid
    jump_log10_range: tuple[float, float] = (0.0, 5.0)
    jump_k: float | None = None
    channels: tuple = DEFAULT_CHANNELS
    # point-source forcing (helm2d variant)
    squared_source_distance: bool = False

    def __post_init__(self):
        if self.variant not in _VARIANT_DIMS:
            raise ValueError(f"unknown problem variant {self.variant!r}")
        dims = _VARIANT_DIMS[self.variant]
        dim = self.dim if self.dim is not None else dims[-1]
        if dim not in dims:
            raise ValueError(f"variant {self.variant!r} does not support dim {dim}")
        object.__setattr__(self, "dim", dim)
        if self.level < 1:
            raise ValueError("mesh level starts at 1")

    @property
    def wave_number(self) -> float:
        if self.variant == "helm1d":
            return 60.0 if self.k_h is None else float(self.k_h)
        if self.variant == "helm2d":
            bound = 2.0 ** (self.level - 2) * math.pi / 1.6
            return bound if self.k_h is None else float(self.k_h)
        return 0.0

    @property
    def source_width(self) -> float:
        return 0.8 / 2.0 ** (self.level - 2)

    @property
    def rhs_ell_value(self) -> float:
        if self.rhs_ell is not None:
            return self.rhs_ell
        return 0.05 if self.variant == "diff" else 0.1

    def resolved_cells(self) -> int:
        if self.cells is not None:
            return int(self.cells)
        base = BASE_CELLS[self.dim] * 2 ** (self.level - 1)
        if self.variant in ("helm1d", "helm2d"):
            return max(base, helmholtz_min_cells(self.wave_number))
        return base

    def is_spd(self) -> bool:
        return self.variant in ("diff", "jumpdiff")

    def build_mesh(self) -> StructuredMesh:
        return build_mesh(self.dim, self.resolved_cells())


def _snap_channels(channels, snap_cells):
    snapped = []
    for x0, x1, y0, y1 in channels:
        s = [round(v * snap_cells) / snap_cells for v in (x0, x1, y0, y1)]
        snapped.append(tuple(s))
    return tuple(snapped)


def jump_coefficient(mesh, k_value, channels=DEFAULT_CHANNELS, snap_cells=None):
    """Per-element coefficient: ``k_value`` inside the channels, one elsewhere."""
    snap = snap_cells if snap_cells is not None else BASE_CELLS[2]
    rects = _snap_channels(channels, snap)
    centroids = mesh.coords[mesh.elements].mean(axis=1)
    coef = np.ones(mesh.elements.shape[0])
    for x0, x1, y0, y1 in rects:
        inside = ((centroids[:, 0] > x0) & (centroids[:, 0] < x1)
                  & (centroids[:, 1] > y0) & (centroids[:, 1] < y1))
        coef[inside] = k_value
    return coef


def build_problem(spec: ProblemSpec, rng):
    """Assemble one sampled instance: returns ``(A, f, meta)``.

    The right-hand side is the FE load vector of the sampled forcing, with
    Dirichlet entries zeroed to match the eliminated rows of ``A``.
    """
    mesh = spec.build_mesh()
    mass = assemble_mass(mesh)
    theta = {}

    if spec.variant == "diff":
        coef_field = sample_grf(
            GrfSampler(spec.coef_mean, spec.coef_sigma, spec.coef_ell),
            mesh.coords, rng)
        k_nodal = np.maximum(coef_field, spec.coef_floor)
        theta["coef_nodal"] = k_nodal
        a = assemble_diffusion(mesh, k_nodal)
        f_nodal = sample_grf(GrfSampler(0.0, spec.rhs_sigma, spec.rhs_ell_value),
                             mesh.coords, rng)
        theta["rhs_nodal"] = f_nodal
    elif spec.variant == "jumpdiff":
        lo, hi = spec.jump_log10_range
        k_value = spec.jump_k if spec.jump_k is not None else 10.0 ** rng.uniform(lo, hi)
        theta["jump_k"] = float(k_value)
        a = assemble_diffusion(mesh, k_elem=jump_coefficient(mesh, k_value, spec.channels))
        x, y = mesh.coords[:, 0], mesh.coords[:, 1]
        f_nodal = np.sin(4 * np.pi * x) * np.sin(2 * np.pi * y) * np.sin(2 * np.pi * x * y)
        theta["rhs_nodal"] = f_nodal
    elif spec.variant == "helm1d":
        a = assemble_helmholtz(mesh, spec.wave_number,
                               override_resolution=spec.resolution_override)
        f_nodal = sample_grf(GrfSampler(0.0, spec.rhs_sigma, spec.rhs_ell_value),
                             mesh.coords, rng)
        theta["rhs_nodal"] = f_nodal
    elif spec.variant == "helm2d":
        a = assemble_helmholtz(mesh, spec.wave_number,
                               override_resolution=spec.resolution_override)
        src = rng.uniform(0.0, 1.0, size=2)
        theta["source"] = src
        dist = np.linalg.norm(mesh.coords - src[None, :], axis=1)
        if spec.squared_source_distance:
            dist = dist ** 2
        f_nodal = np.exp(-0.5 * dist / spec.source_width ** 2)
        theta["rhs_nodal"] = f_nodal
    else:  # pragma: no cover - guarded in ProblemSpec
        raise ValueError(spec.variant)

    f = mass.scipy @ f_nodal
    f[mesh.dirichlet_mask] = 0.0
    meta = {
        "variant": spec.variant,
        "dim": mesh.dim,
        "cells": mesh.cells_per_axis,
        "h": mesh.h,
        "n": mesh.n_nodes,
        "k_h": spec.wave_number,
        "spd": spec.is_spd(),
        "theta": theta,
        "mesh": mesh,
    }
    return a, f, meta


def problem_tensors(a: CsrMatrix, f, mesh: StructuredMesh) -> dict:
    """Named tensors for dumping one assembled problem to a container file."""
    return {
        "row_ptr": a.row_ptr.astype(np.int64),
        "col_idx": a.col_idx.astype(np.int64),
        "vals": a.vals.astype(np.float64),
        "rhs": np.asarray(f, dtype=np.float64),
        "coords": mesh.coords.astype(np.float64),
        "dirichlet_mask": mesh.dirichlet_mask.astype(np.int8),
    }
