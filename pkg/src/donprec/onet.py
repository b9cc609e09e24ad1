"""Operator-network inference and the two network-based coarse components.

A model is a set of branch layer stacks plus one trunk stack.  The trunk
evaluated at mesh nodes supplies candidate coarse-basis columns (orthogonalized
by thin QR, optionally block-sparse per subdomain); a forward pass with the
restricted residual fed to the right-hand-side branch supplies the nonlinear
"apply the approximate inverse" preconditioner.  A synthetic analytic model
whose trunk columns are Laplace sine modes ships here as well, so every solver
path can be exercised without a trained network.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse

from .containers import (
    MAGIC_ONETPACK,
    ContainerError,
    pack_container,
    read_tensor,
    tensor_bytes,
    unpack_container,
)
from .fem import StructuredMesh, interp_matrix, lump_mass
from .linalg import CsrMatrix, LuSolver, SingularMatrixError, as_vector, check_finite, qr_thin
from .precond import Partition, Preconditioner

CONV_KERNEL = 3
CONV_STRIDE = 2
CONV_PADDING = 1

_ACTIVATIONS = {"tanh": np.tanh, "relu": lambda x: np.maximum(x, 0.0), "none": lambda x: x}


@dataclass(frozen=True)
class LayerSpec:
    """One network layer: dense, strided convolution, or flatten."""

    kind: str                     # "dense" | "conv" | "flatten"
    activation: str = "none"
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    conv_dim: int = 0

    def __post_init__(self):
        if self.kind not in ("dense", "conv", "flatten"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == "dense":
            if self.weight is None or self.weight.ndim != 2:
                raise ValueError("dense layer needs a 2D weight")
            if self.bias is None or self.bias.shape != (self.weight.shape[0],):
                raise ValueError("dense bias shape mismatch")
        elif self.kind == "conv":
            if self.conv_dim not in (1, 2, 3):
                raise ValueError("conv layer needs conv_dim in 1..3")
            want = (CONV_KERNEL,) * self.conv_dim
            if self.weight is None or self.weight.shape[2:] != want:
                raise ValueError(f"conv weight must end with {want}")
            if self.bias is None or self.bias.shape != (self.weight.shape[0],):
                raise ValueError("conv bias shape mismatch")
        for arr in (self.weight, self.bias):
            if arr is not None:
                check_finite(arr, "layer parameters")

    @property
    def out_width(self):
        if self.kind == "dense":
            return self.weight.shape[0]
        return None


def dense_layer(weight, bias, activation="none") -> LayerSpec:
    return LayerSpec("dense", activation, np.asarray(weight, dtype=np.float64),
                     np.asarray(bias, dtype=np.float64))


def conv_layer(dim, weight, bias, activation="none") -> LayerSpec:
    return LayerSpec("conv", activation, np.asarray(weight, dtype=np.float64),
                     np.asarray(bias, dtype=np.float64), conv_dim=dim)


def ffn_layers(widths, activation="tanh", rng=None) -> list:
    """Fully connected stack with the given widths; the last layer is linear.

    Weights use uniform Xavier fan-in/fan-out scaling when a generator is
    supplied, zeros otherwise (handy for hand-built fixtures).
    """
    layers = []
    for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
        act = activation if i < len(widths) - 2 else "none"
        if rng is None:
            w = np.zeros((w_out, w_in))
        else:
            bound = np.sqrt(6.0 / (w_in + w_out))
            w = rng.uniform(-bound, bound, size=(w_out, w_in))
        layers.append(dense_layer(w, np.zeros(w_out), act))
    return layers


def _conv_forward(x, layer: LayerSpec):
    d = layer.conv_dim
    pad = [(0, 0), (0, 0)] + [(CONV_PADDING, CONV_PADDING)] * d
    xp = np.pad(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (CONV_KERNEL,) * d,
                                                   axis=tuple(range(2, 2 + d)))
    stride = (slice(None), slice(None)) + (slice(None, None, CONV_STRIDE),) * d
    win = win[stride]
    spatial, kernel = "xyz"[:d], "uvw"[:d]
    expr = f"bc{spatial}{kernel},oc{kernel}->bo{spatial}"
    out = np.einsum(expr, win, layer.weight)
    return out + layer.bias.reshape((1, -1) + (1,) * d)


def run_stack(layers, x, spatial_shape=None):
    """Run a batch through a layer stack; ``x`` has shape (batch, features)."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    for layer in layers:
        if layer.kind == "dense":
            if x.ndim != 2:
                x = x.reshape(x.shape[0], -1)
            if x.shape[1] != layer.weight.shape[1]:
                raise ValueError(
                    f"dense layer expects width {layer.weight.shape[1]}, got {x.shape[1]}")
            x = x @ layer.weight.T + layer.bias
        elif layer.kind == "conv":
            if x.ndim == 2:
                if spatial_shape is None:
                    raise ValueError("conv stack needs the sensor grid shape")
                c_in = layer.weight.shape[1]
                x = x.reshape((x.shape[0], c_in) + tuple(spatial_shape))
            x = _conv_forward(x, layer)
        else:
            x = x.reshape(x.shape[0], -1)
        x = _ACTIVATIONS[layer.activation](x)
    if x.ndim != 2:
        x = x.reshape(x.shape[0], -1)
    return x[0] if squeeze else x


def boundary_weight(points) -> np.ndarray:
    """Polynomial cutoff b(x) = prod_i 4 x_i (1 - x_i): zero on the boundary."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    return np.prod(4.0 * pts * (1.0 - pts), axis=1)


@dataclass(frozen=True)
class SensorGrid:
    dim: int
    shape: tuple
    coords: np.ndarray  # (nb, dim)

    @property
    def size(self):
        return int(np.prod(self.shape))

    def __post_init__(self):
        if self.coords.shape != (self.size, self.dim):
            raise ValueError("sensor coordinates inconsistent with grid shape")


def uniform_sensor_grid(dim, points_per_axis) -> SensorGrid:
    axis = np.linspace(0.0, 1.0, points_per_axis)
    grids = np.meshgrid(*([axis] * dim), indexing="ij")
    coords = np.stack([g.reshape(-1) for g in grids], axis=1)
    return SensorGrid(dim, (points_per_axis,) * dim, coords)


@dataclass
class OnetModel:
    """Branch/trunk network with per-branch sensor grids.

    ``boundary_mask`` of "poly" multiplies every trunk row by the polynomial
    cutoff, so trunk columns vanish on the Dirichlet boundary.
    """

    branches: list
    trunk: list
    sensor_grids: list
    p: int
    boundary_mask: str = "none"

    def __post_init__(self):
        if self.boundary_mask not in ("none", "poly"):
            raise ValueError(f"unknown boundary mask {self.boundary_mask!r}")
        if len(self.branches) != len(self.sensor_grids):
            raise ValueError("need one sensor grid per branch")
        if not self.branches:
            raise ValueError("model needs at least one branch")
        for b, grid in zip(self.branches, self.sensor_grids):
            probe = run_stack(b, np.zeros((1, grid.size)), spatial_shape=grid.shape)
            if probe.shape[1] != self.p:
                raise ValueError(
                    f"branch output width {probe.shape[1]} does not match p={self.p}")
        trunk_dim = self.trunk[0].weight.shape[1]
        probe = run_stack(self.trunk, np.zeros((1, trunk_dim)))
        if probe.shape[1] != self.p:
            raise ValueError(f"trunk output width {probe.shape[1]} does not match p={self.p}")

    @property
    def nf(self):
        return len(self.branches)

    @property
    def trunk_input_dim(self):
        return self.trunk[0].weight.shape[1]

    def branch_forward(self, index, values) -> np.ndarray:
        grid = self.sensor_grids[index]
        v = as_vector(values, grid.size)
        return run_stack(self.branches[index], v, spatial_shape=grid.shape)

    def eval_trunk(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[1] != self.trunk_input_dim:
            raise ValueError(
                f"trunk expects dimension {self.trunk_input_dim}, got {pts.shape[1]}")
        out = run_stack(self.trunk, pts)
        if self.boundary_mask == "poly":
            out = out * boundary_weight(pts)[:, None]
        return out


def sine_mode_table(dim, p):
    """First ``p`` tensor sine-mode index tuples, ordered by Laplace eigenvalue."""
    per_axis = int(np.ceil((2.0 * p) ** (1.0 / dim))) + 3
    combos = np.stack(np.meshgrid(*([np.arange(1, per_axis + 1)] * dim),
                                  indexing="ij"), axis=-1).reshape(-1, dim)
    order = np.lexsort(tuple(combos[:, ::-1].T) + ((combos ** 2).sum(axis=1),))
    return combos[order][:p]


@dataclass
class SineTrunkModel:
    """Analytic stand-in for a trained trunk: columns are Laplace sine modes."""

    dim: int
    p: int
    boundary_mask: str = "none"
    modes: np.ndarray = field(init=False)

    def __post_init__(self):
        self.modes = sine_mode_table(self.dim, self.p)

    def eval_trunk(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}")
        out = np.ones((pts.shape[0], self.p))
        for axis in range(self.dim):
            out *= np.sin(np.pi * np.outer(pts[:, axis], self.modes[:, axis]))
        if self.boundary_mask == "poly":
            out = out * boundary_weight(pts)[:, None]
        return out


def trunk_eval(model, points) -> np.ndarray:
    """Trunk matrix T with rows T(x_j); mesh free, any point set in [0,1]^d."""
    return model.eval_trunk(points)


def onet_infer(model: OnetModel, branch_inputs, points) -> np.ndarray:
    """Full forward pass: product of branch outputs contracted with the trunk."""
    if len(branch_inputs) != model.nf:
        raise ValueError(f"model has {model.nf} branches, got {len(branch_inputs)} inputs")
    coeff = np.ones(model.p)
    for l, values in enumerate(branch_inputs):
        coeff = coeff * model.branch_forward(l, values)
    return trunk_eval(model, points) @ coeff


def _qr_keep(block, eps):
    q, r = qr_thin(block)
    diag = np.abs(np.diag(r))
    if eps is None:
        threshold = 1e-8 * (diag.max() if diag.size else 0.0)
    else:
        threshold = eps
    keep = (diag >= threshold) & (diag > 0.0)
    return q[:, keep], int(keep.sum())


def tb_dense(model, points, k, rng, eps=None):
    """Dense coarse basis: random trunk columns, orthogonalized and filtered.

    Returns ``(P, info)`` where P has orthonormal columns (count <= k after
    dropping columns whose QR diagonal falls below the threshold).
    """
    if k < 1 or k > model.p:
        raise ValueError(f"need 1 <= k <= p={model.p}")
    chosen = np.sort(rng.choice(model.p, size=k, replace=False))
    tentative = trunk_eval(model, points)[:, chosen]
    q, kept = _qr_keep(tentative, eps)
    if kept == 0:
        raise ValueError("all tentative basis columns were dropped as dependent")
    info = {"columns": chosen.tolist(), "kept": kept, "eps": eps, "sparse": False}
    return q, info


def tb_sparse(model, points, partition: Partition, k, rng, smooth_gamma=None,
              a: CsrMatrix | None = None, eps=None):
    """Block-sparse coarse basis: per-subdomain QR of trunk rows.

    Blocks sit on the non-overlapping index sets, so the unsmoothed operator
    has orthonormal columns with disjoint supports.  Optional single-sweep
    Jacobi prolongation smoothing ``P = (I - gamma D^-1 A) P`` widens the
    support by one adjacency layer and requires the operator ``a``.
    """
    if k < 1 or k > model.p:
        raise ValueError(f"need 1 <= k <= p={model.p}")
    if smooth_gamma is not None and a is None:
        raise ValueError("prolongation smoothing needs the operator")
    pts = np.asarray(points, dtype=np.float64)
    chosen = np.sort(rng.choice(model.p, size=k, replace=False))
    trunk_cols = trunk_eval(model, pts)[:, chosen]
    n = pts.shape[0]
    rows, cols, vals = [], [], []
    col_off = 0
    block_widths = []
    for idx in partition.nonoverlapping:
        width = min(k, len(idx))
        block = trunk_cols[idx][:, :width]
        if np.linalg.norm(block) == 0.0:
            block_widths.append(0)
            continue
        q, kept = _qr_keep(block, eps)
        block_widths.append(kept)
        if kept == 0:
            continue
        rows.append(np.repeat(idx, kept))
        cols.append(np.tile(np.arange(col_off, col_off + kept), len(idx)))
        vals.append(q.reshape(-1))
        col_off += kept
    if col_off == 0:
        raise ValueError("all subdomain blocks were dropped as dependent")
    p_mat = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, col_off)).tocsr()
    p_mat.sum_duplicates()
    p_mat.sort_indices()
    p_mat.eliminate_zeros()
    info = {"columns": chosen.tolist(), "block_widths": block_widths,
            "eps": eps, "sparse": True, "smooth_gamma": smooth_gamma}
    if smooth_gamma is not None:
        inv_d = scipy.sparse.diags(1.0 / a.diagonal())
        p_mat = (p_mat - smooth_gamma * (inv_d @ (a.scipy @ p_mat))).tocsr()
    return p_mat, info


@dataclass
class TransferOps:
    """Coarse-space transfer package: P, R = P^T and a factorized A_c."""

    p_op: scipy.sparse.csr_matrix
    a_c: np.ndarray
    solver: LuSolver
    spd: bool
    provenance: dict

    @property
    def n(self):
        return self.p_op.shape[0]

    @property
    def k(self):
        return self.p_op.shape[1]

    def restrict(self, v):
        return self.p_op.T @ v

    def prolong(self, w):
        return self.p_op @ w


def coarse_build(a: CsrMatrix, p_matrix, provenance=None) -> TransferOps:
    """Assemble and factorize A_c = P^T A P for the given basis."""
    p_op = scipy.sparse.csr_matrix(p_matrix)
    if p_op.shape[0] != a.n_rows:
        raise ValueError("basis row count does not match the operator")
    a_c = np.asarray((p_op.T @ (a.scipy @ p_op)).todense())
    a_c = np.ascontiguousarray(a_c)
    try:
        solver = LuSolver(a_c)
    except SingularMatrixError as exc:
        raise ValueError("coarse operator is singular; basis is rank deficient "
                         "or the subspace is unlucky for this operator") from exc
    try:
        np.linalg.cholesky(a_c)
        spd = True
    except np.linalg.LinAlgError:
        spd = False
    return TransferOps(p_op, a_c, solver, spd, provenance or {})


def coarse_apply(t: TransferOps, v) -> np.ndarray:
    """One subspace-correction step C v = P A_c^{-1} P^T v."""
    return t.prolong(t.solver.solve(t.restrict(as_vector(v, t.n))))


class CoarsePrec(Preconditioner):
    """Linear coarse-space correction built from a TransferOps package."""

    def __init__(self, transfer: TransferOps, label=None):
        super().__init__(transfer.n)
        self.transfer = transfer
        self.spd = transfer.spd
        self.label = label or f"coarse(k={transfer.k})"

    def _apply(self, r):
        return coarse_apply(self.transfer, r)


@dataclass
class DpContext:
    """Frozen per-problem state for the inference preconditioner.

    Holds the trunk matrix at the mesh nodes, the cached outputs of every
    non-residual branch, and the residual-to-sensor map (inverse lumped mass,
    then multilinear interpolation onto the sensor grid).
    """

    model: OnetModel
    f_index: int
    trunk_matrix: np.ndarray
    frozen: list
    lumped: np.ndarray
    sensor_map: scipy.sparse.csr_matrix

    @property
    def n(self):
        return self.trunk_matrix.shape[0]


def build_dp_context(model: OnetModel, mesh: StructuredMesh, f_index, branch_inputs) -> DpContext:
    """Precompute everything ``dp_apply`` needs for one assembled problem."""
    if not 0 <= f_index < model.nf:
        raise ValueError("right-hand-side branch index out of range")
    if len(branch_inputs) != model.nf:
        raise ValueError("need one (possibly unused) input per branch")
    frozen = []
    for l in range(model.nf):
        frozen.append(None if l == f_index else model.branch_forward(l, branch_inputs[l]))
    grid = model.sensor_grids[f_index]
    if grid.dim != mesh.dim:
        raise ValueError("sensor grid dimension does not match the mesh")
    sensor_map = interp_matrix(mesh, grid.coords)
    return DpContext(model, f_index, trunk_eval(model, mesh.coords), frozen,
                     lump_mass(mesh), sensor_map)


def dp_apply(model: OnetModel, ctx: DpContext, v) -> np.ndarray:
    """Approximate C v by one network forward pass with the restricted residual."""
    v = as_vector(v, ctx.n)
    nodal = v / ctx.lumped
    sensed = ctx.sensor_map @ nodal
    coeff = model.branch_forward(ctx.f_index, sensed)
    for out in ctx.frozen:
        if out is not None:
            coeff = coeff * out
    return ctx.trunk_matrix @ coeff


class DpPrec(Preconditioner):
    """Nonlinear inference preconditioner; composable only into F-GMRES."""

    linear = False
    spd = False

    def __init__(self, ctx: DpContext, label="dp"):
        super().__init__(ctx.n)
        self.ctx = ctx
        self.label = label

    def _apply(self, r):
        return dp_apply(self.ctx.model, self.ctx, r)


def _layer_manifest(layer: LayerSpec, offset):
    entry = {"kind": layer.kind, "activation": layer.activation}
    if layer.kind == "dense":
        entry["shape"] = [int(layer.weight.shape[0]), int(layer.weight.shape[1])]
    elif layer.kind == "conv":
        entry["shape"] = [int(layer.conv_dim), int(layer.weight.shape[0]),
                          int(layer.weight.shape[1])]
    else:
        entry["shape"] = []
    if layer.weight is not None:
        entry["weight_offset"] = offset[0]
        offset[0] += layer.weight.size * 8
        entry["bias_offset"] = offset[0]
        offset[0] += layer.bias.size * 8
    return entry


def save_model(model: OnetModel, path) -> bytes:
    """Serialize a model to the portable weight container (canonical bytes)."""
    offset = [0]
    payload = bytearray()
    branches_manifest = []
    for stack, grid in zip(model.branches, model.sensor_grids):
        layers = []
        for layer in stack:
            layers.append(_layer_manifest(layer, offset))
            if layer.weight is not None:
                payload.extend(tensor_bytes(layer.weight))
                payload.extend(tensor_bytes(layer.bias))
        coords_offset = offset[0]
        offset[0] += grid.coords.size * 8
        payload.extend(tensor_bytes(grid.coords))
        branches_manifest.append({
            "layers": layers,
            "sensor_grid": {"dim": grid.dim, "shape": list(grid.shape),
                            "coords_offset": coords_offset},
        })
    trunk_manifest = []
    for layer in model.trunk:
        trunk_manifest.append(_layer_manifest(layer, offset))
        if layer.weight is not None:
            payload.extend(tensor_bytes(layer.weight))
            payload.extend(tensor_bytes(layer.bias))
    manifest = {
        "p": int(model.p),
        "nf": int(model.nf),
        "branches": branches_manifest,
        "trunk": {"layers": trunk_manifest},
        "boundary_mask": model.boundary_mask,
        "dtype": "f64le",
    }
    blob = pack_container(MAGIC_ONETPACK, manifest, bytes(payload))
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


def _layer_from_manifest(entry, payload):
    kind = entry.get("kind")
    activation = entry.get("activation", "none")
    if kind == "flatten":
        return LayerSpec("flatten", activation)
    if kind == "dense":
        out_w, in_w = (int(s) for s in entry["shape"])
        w = read_tensor(payload, "f64le", (out_w, in_w), entry["weight_offset"])
        b = read_tensor(payload, "f64le", (out_w,), entry["bias_offset"])
        return dense_layer(w, b, activation)
    if kind == "conv":
        dim, c_out, c_in = (int(s) for s in entry["shape"])
        w = read_tensor(payload, "f64le", (c_out, c_in) + (CONV_KERNEL,) * dim,
                        entry["weight_offset"])
        b = read_tensor(payload, "f64le", (c_out,), entry["bias_offset"])
        return conv_layer(dim, w, b, activation)
    raise ContainerError(f"unknown layer kind {kind!r}")


def load_model(source) -> OnetModel:
    """Load a model from the portable container, validating every invariant."""
    data = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    manifest, payload = unpack_container(bytes(data), MAGIC_ONETPACK)
    if manifest.get("dtype") != "f64le":
        raise ContainerError("model container must store float64 tensors")
    try:
        branches = []
        grids = []
        for bm in manifest["branches"]:
            branches.append([_layer_from_manifest(e, payload) for e in bm["layers"]])
            g = bm["sensor_grid"]
            shape = tuple(int(s) for s in g["shape"])
            nb = int(np.prod(shape))
            coords = read_tensor(payload, "f64le", (nb, int(g["dim"])), g["coords_offset"])
            grids.append(SensorGrid(int(g["dim"]), shape, coords))
        trunk = [_layer_from_manifest(e, payload) for e in manifest["trunk"]["layers"]]
        model = OnetModel(branches, trunk, grids, int(manifest["p"]),
                          manifest.get("boundary_mask", "none"))
    except (KeyError, TypeError) as exc:
        raise ContainerError(f"malformed model manifest: {exc}") from exc
    except ValueError as exc:
        raise ContainerError(str(exc)) from exc
    if int(manifest["nf"]) != model.nf:
        raise ContainerError("declared branch count does not match the manifest")
    return model
