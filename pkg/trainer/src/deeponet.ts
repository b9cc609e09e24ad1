/**
 * Multi-branch operator network: per-branch encoders, one trunk over
 * coordinates, prediction = elementwise product of branch outputs contracted
 * with trunk rows.  The optional "poly" boundary mask scales trunk rows by
 * prod_i 4 x_i (1 - x_i) so predictions vanish on the unit-cube boundary.
 */

import * as fs from "node:fs";
import {
  ContainerError,
  MAGIC_ONETPACK,
  packContainer,
  readTensor,
  tensorBytes,
  unpackContainer,
} from "./containers";
import {
  Activation,
  DenseLayer,
  LayerGrads,
  ffnStack,
  stackBackward,
  stackForward,
  zeroGrads,
} from "./network";
import { Rng } from "./rng";

export interface SensorGrid {
  dim: number;
  shape: number[];
  coords: Float64Array; // (nb, dim) row-major
}

export interface DeepOnet {
  branches: DenseLayer[][];
  trunk: DenseLayer[];
  grids: SensorGrid[];
  p: number;
  boundaryMask: "none" | "poly";
  /** arbitrary extra manifest entries preserved across load/save */
  extras: Record<string, unknown>;
}

export function boundaryWeight(coords: Float64Array, n: number, dim: number): Float64Array {
  const w = new Float64Array(n);
  for (let q = 0; q < n; q++) {
    let v = 1.0;
    for (let a = 0; a < dim; a++) {
      const x = coords[q * dim + a];
      v *= 4.0 * x * (1.0 - x);
    }
    w[q] = v;
  }
  return w;
}

export function buildModel(
  branchWidths: number[][],
  trunkWidths: number[],
  grids: SensorGrid[],
  activation: Activation,
  boundaryMask: "none" | "poly",
  rng: Rng,
): DeepOnet {
  const p = trunkWidths[trunkWidths.length - 1];
  const branches = branchWidths.map((w) => {
    if (w[w.length - 1] !== p) throw new Error("branch output width must equal p");
    return ffnStack(w, activation, rng);
  });
  branches.forEach((_, l) => {
    if (branchWidths[l][0] !== grids[l].shape.reduce((a, b) => a * b, 1)) {
      throw new Error(`branch ${l} input width does not match its sensor grid`);
    }
  });
  return { branches, trunk: ffnStack(trunkWidths, activation, rng), grids, p, boundaryMask, extras: {} };
}

/** Trunk matrix (nPts x p), boundary mask applied. */
export function trunkEval(model: DeepOnet, points: Float64Array, nPts: number): Float64Array {
  const t = stackForward(model.trunk, points, nPts).output;
  if (model.boundaryMask === "poly") {
    const dim = model.trunk[0].inDim;
    const w = boundaryWeight(points, nPts, dim);
    for (let q = 0; q < nPts; q++) {
      for (let k = 0; k < model.p; k++) t[q * model.p + k] *= w[q];
    }
  }
  return t;
}

/** Full forward pass for one set of branch inputs at the given points. */
export function infer(
  model: DeepOnet,
  branchInputs: Float64Array[],
  points: Float64Array,
  nPts: number,
): Float64Array {
  if (branchInputs.length !== model.branches.length) {
    throw new Error("wrong number of branch inputs");
  }
  const coeff = new Float64Array(model.p).fill(1.0);
  model.branches.forEach((stack, l) => {
    const out = stackForward(stack, branchInputs[l], 1).output;
    for (let k = 0; k < model.p; k++) coeff[k] *= out[k];
  });
  const t = trunkEval(model, points, nPts);
  const pred = new Float64Array(nPts);
  for (let q = 0; q < nPts; q++) {
    let acc = 0.0;
    for (let k = 0; k < model.p; k++) acc += t[q * model.p + k] * coeff[k];
    pred[q] = acc;
  }
  return pred;
}

export interface BatchLoss {
  loss: number;
  perSample: Float64Array;
}

export interface ModelGrads {
  branches: LayerGrads[][];
  trunk: LayerGrads[];
}

export function zeroModelGrads(model: DeepOnet): ModelGrads {
  return { branches: model.branches.map(zeroGrads), trunk: zeroGrads(model.trunk) };
}

/**
 * Relative squared-error loss over a batch and its gradients:
 * sum_j ||pred_j - u_j||^2 / ||u_j||^2, so jointly rescaling a sample's
 * prediction and target leaves its term unchanged.
 */
export function lossAndGrads(
  model: DeepOnet,
  batchInputs: Float64Array[], // per branch: (batch, nb_l)
  targets: Float64Array, // (batch, nPts)
  points: Float64Array, // (nPts, d)
  nPts: number,
  batch: number,
  grads?: ModelGrads,
): BatchLoss {
  const p = model.p;
  const branchTraces = model.branches.map((stack, l) =>
    stackForward(stack, batchInputs[l], batch),
  );
  const trunkTrace = stackForward(model.trunk, points, nPts);
  let trunkOut = trunkTrace.output;
  let maskW: Float64Array | null = null;
  if (model.boundaryMask === "poly") {
    const dim = model.trunk[0].inDim;
    maskW = boundaryWeight(points, nPts, dim);
    const masked = new Float64Array(trunkOut.length);
    for (let q = 0; q < nPts; q++) {
      for (let k = 0; k < p; k++) masked[q * p + k] = trunkOut[q * p + k] * maskW[q];
    }
    trunkOut = masked;
  }

  // coefficient products over branches
  const coeff = new Float64Array(batch * p).fill(1.0);
  for (const trace of branchTraces) {
    const out = trace.output;
    for (let i = 0; i < coeff.length; i++) coeff[i] *= out[i];
  }

  // predictions and loss
  const perSample = new Float64Array(batch);
  let loss = 0.0;
  const dCoeff = grads ? new Float64Array(batch * p) : null;
  const dTrunk = grads ? new Float64Array(nPts * p) : null;
  for (let b = 0; b < batch; b++) {
    let norm2 = 0.0;
    for (let q = 0; q < nPts; q++) {
      const u = targets[b * nPts + q];
      norm2 += u * u;
    }
    const invNorm2 = norm2 > 0 ? 1.0 / norm2 : 0.0;
    let err2 = 0.0;
    for (let q = 0; q < nPts; q++) {
      let pred = 0.0;
      const co = b * p;
      const to = q * p;
      for (let k = 0; k < p; k++) pred += coeff[co + k] * trunkOut[to + k];
      const diff = pred - targets[b * nPts + q];
      err2 += diff * diff;
      if (grads) {
        const dPred = 2.0 * diff * invNorm2;
        for (let k = 0; k < p; k++) {
          dCoeff![co + k] += dPred * trunkOut[to + k];
          dTrunk![to + k] += dPred * coeff[co + k];
        }
      }
    }
    perSample[b] = err2 * invNorm2;
    loss += perSample[b];
  }
  if (!Number.isFinite(loss)) throw new Error("loss became non-finite");

  if (grads) {
    // branch gradients: dB^l = dCoeff * prod_{m != l} B^m
    model.branches.forEach((stack, l) => {
      const dOut = new Float64Array(batch * p);
      for (let i = 0; i < dOut.length; i++) {
        let prod = 1.0;
        branchTraces.forEach((trace, m) => {
          if (m !== l) prod *= trace.output[i];
        });
        dOut[i] = dCoeff![i] * prod;
      }
      stackBackward(stack, branchTraces[l].traces, dOut, batch, grads.branches[l]);
    });
    // trunk gradient: undo the boundary mask scaling first
    if (maskW) {
      for (let q = 0; q < nPts; q++) {
        for (let k = 0; k < p; k++) dTrunk![q * p + k] *= maskW[q];
      }
    }
    stackBackward(model.trunk, trunkTrace.traces, dTrunk!, nPts, grads.trunk);
  }
  return { loss, perSample };
}

function layerManifest(layer: DenseLayer, offset: { v: number }): any {
  const entry: any = {
    kind: "dense",
    activation: layer.activation,
    shape: [layer.outDim, layer.inDim],
    weight_offset: offset.v,
  };
  offset.v += layer.weight.length * 8;
  entry.bias_offset = offset.v;
  offset.v += layer.bias.length * 8;
  return entry;
}

/** Serialize to the portable weight container; same bytes as the solver side. */
export function saveModel(model: DeepOnet, path: string | null): Buffer {
  const offset = { v: 0 };
  const chunks: Buffer[] = [];
  const branchesManifest = model.branches.map((stack, l) => {
    const layers = stack.map((layer) => {
      const entry = layerManifest(layer, offset);
      chunks.push(tensorBytes({ dtype: "f64le", shape: [layer.outDim, layer.inDim], data: layer.weight }));
      chunks.push(tensorBytes({ dtype: "f64le", shape: [layer.outDim], data: layer.bias }));
      return entry;
    });
    const grid = model.grids[l];
    const coordsOffset = offset.v;
    offset.v += grid.coords.length * 8;
    chunks.push(tensorBytes({ dtype: "f64le", shape: [grid.coords.length], data: grid.coords }));
    return {
      layers,
      sensor_grid: { dim: grid.dim, shape: grid.shape.slice(), coords_offset: coordsOffset },
    };
  });
  const trunkManifest = model.trunk.map((layer) => {
    const entry = layerManifest(layer, offset);
    chunks.push(tensorBytes({ dtype: "f64le", shape: [layer.outDim, layer.inDim], data: layer.weight }));
    chunks.push(tensorBytes({ dtype: "f64le", shape: [layer.outDim], data: layer.bias }));
    return entry;
  });
  const manifest: any = {
    ...model.extras,
    p: model.p,
    nf: model.branches.length,
    branches: branchesManifest,
    trunk: { layers: trunkManifest },
    boundary_mask: model.boundaryMask,
    dtype: "f64le",
  };
  const blob = packContainer(MAGIC_ONETPACK, manifest, Buffer.concat(chunks));
  if (path !== null) fs.writeFileSync(path, blob);
  return blob;
}

function layerFromManifest(entry: any, payload: Buffer): DenseLayer {
  if (entry.kind !== "dense") {
    throw new ContainerError(`unsupported layer kind for training: ${entry.kind}`);
  }
  const [outDim, inDim] = entry.shape.map((s: number) => Math.trunc(s));
  const weight = readTensor(payload, "f64le", [outDim, inDim], entry.weight_offset).data;
  const bias = readTensor(payload, "f64le", [outDim], entry.bias_offset).data;
  for (const arr of [weight, bias]) {
    for (let i = 0; i < arr.length; i++) {
      if (!Number.isFinite(arr[i])) throw new ContainerError("non-finite weights in container");
    }
  }
  const activation = entry.activation as Activation;
  if (!["tanh", "relu", "none"].includes(activation)) {
    throw new ContainerError(`unknown activation ${entry.activation}`);
  }
  return { outDim, inDim, weight, bias, activation };
}

const KNOWN_KEYS = new Set(["p", "nf", "branches", "trunk", "boundary_mask", "dtype"]);

export function loadModel(source: string | Buffer): DeepOnet {
  const data = Buffer.isBuffer(source) ? source : fs.readFileSync(source);
  const { manifest, payload } = unpackContainer(data, MAGIC_ONETPACK);
  if (manifest.dtype !== "f64le") throw new ContainerError("model container must be float64");
  const branches: DenseLayer[][] = [];
  const grids: SensorGrid[] = [];
  for (const bm of manifest.branches) {
    branches.push(bm.layers.map((e: any) => layerFromManifest(e, payload)));
    const g = bm.sensor_grid;
    const nb = g.shape.reduce((a: number, b: number) => a * b, 1);
    grids.push({
      dim: g.dim,
      shape: g.shape.map((s: number) => Math.trunc(s)),
      coords: readTensor(payload, "f64le", [nb * g.dim], g.coords_offset).data,
    });
  }
  const trunk = manifest.trunk.layers.map((e: any) => layerFromManifest(e, payload));
  const extras: Record<string, unknown> = {};
  for (const [k, v] of Object.entries(manifest)) {
    if (!KNOWN_KEYS.has(k)) extras[k] = v;
  }
  const model: DeepOnet = {
    branches,
    trunk,
    grids,
    p: Math.trunc(manifest.p),
    boundaryMask: manifest.boundary_mask ?? "none",
    extras,
  };
  if (model.branches.length !== Math.trunc(manifest.nf)) {
    throw new ContainerError("declared branch count does not match the manifest");
  }
  for (const stack of model.branches) {
    if (stack[stack.length - 1].outDim !== model.p) {
      throw new ContainerError("branch output width does not match p");
    }
  }
  if (trunk[trunk.length - 1].outDim !== model.p) {
    throw new ContainerError("trunk output width does not match p");
  }
  return model;
}
