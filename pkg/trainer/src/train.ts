/**
 * Training loop: Adam on the relative squared-error objective with a fixed
 * 90/10 train/validation split and early stopping on the validation loss.
 * Everything runs in float64 and is deterministic per seed.
 */

import { Tensor, readTensorPack } from "./containers";
import { Adam } from "./adam";
import { DeepOnet, DeepOnet as Model, buildModel, lossAndGrads, zeroModelGrads } from "./deeponet";
import { Activation } from "./network";
import { Rng } from "./rng";

export interface Dataset {
  branchInputs: Float64Array[]; // per branch: (nSamples, nb_l) row-major
  branchWidths: number[];
  coords: Float64Array; // (nPts, dim)
  targets: Float64Array; // (nSamples, nPts)
  nSamples: number;
  nPts: number;
  dim: number;
  meta: any;
}

export function loadDataset(path: string): Dataset {
  const { tensors, meta } = readTensorPack(path);
  const coords = tensors["coords"];
  const targets = tensors["targets"];
  if (!coords || !targets) throw new Error("dataset needs coords and targets tensors");
  const branchInputs: Float64Array[] = [];
  const branchWidths: number[] = [];
  for (let l = 0; ; l++) {
    const t: Tensor | undefined = tensors[`branch_${l}`];
    if (!t) break;
    branchInputs.push(t.data);
    branchWidths.push(t.shape[1]);
  }
  if (branchInputs.length === 0) throw new Error("dataset has no branch inputs");
  return {
    branchInputs,
    branchWidths,
    coords: coords.data,
    targets: targets.data,
    nSamples: targets.shape[0],
    nPts: targets.shape[1],
    dim: coords.shape[1],
    meta,
  };
}

export interface TrainConfig {
  /** hidden widths per branch (input and output widths are implied) */
  branchHidden: number[][];
  trunkHidden: number[];
  p: number;
  activation: Activation;
  boundaryMask: "none" | "poly";
  batch: number;
  lr: number;
  patience: number;
  maxEpochs: number;
  seed: number;
  valFraction: number;
  logEvery: number;
}

export const DEFAULT_CONFIG: Omit<TrainConfig, "branchHidden" | "trunkHidden" | "p"> = {
  activation: "tanh",
  boundaryMask: "poly",
  batch: 1000,
  lr: 1e-4,
  patience: 10000,
  maxEpochs: 200000,
  seed: 0,
  valFraction: 0.1,
  logEvery: 0,
};

export interface TrainResult {
  model: Model;
  trainLoss: number;
  valLoss: number;
  valRelL2: number;
  epochs: number;
  seconds: number;
}

function gather(src: Float64Array, width: number, idx: Int32Array): Float64Array {
  const out = new Float64Array(idx.length * width);
  for (let j = 0; j < idx.length; j++) {
    out.set(src.subarray(idx[j] * width, (idx[j] + 1) * width), j * width);
  }
  return out;
}

function snapshot(model: Model): Float64Array[] {
  const arrays: Float64Array[] = [];
  for (const stack of [...model.branches, model.trunk]) {
    for (const layer of stack) {
      arrays.push(layer.weight.slice(), layer.bias.slice());
    }
  }
  return arrays;
}

function restore(model: Model, arrays: Float64Array[]): void {
  let i = 0;
  for (const stack of [...model.branches, model.trunk]) {
    for (const layer of stack) {
      layer.weight.set(arrays[i++]);
      layer.bias.set(arrays[i++]);
    }
  }
}

function evaluate(model: Model, data: Dataset, idx: Int32Array): { loss: number; relL2: number } {
  if (idx.length === 0) return { loss: 0, relL2: 0 };
  const inputs = data.branchInputs.map((arr, l) => gather(arr, data.branchWidths[l], idx));
  const targets = gather(data.targets, data.nPts, idx);
  const { loss, perSample } = lossAndGrads(
    model, inputs, targets, data.coords, data.nPts, idx.length);
  let rel = 0.0;
  for (let j = 0; j < perSample.length; j++) rel += Math.sqrt(perSample[j]);
  return { loss, relL2: rel / perSample.length };
}

interface Normalization {
  branchMean: Float64Array[];
  branchStd: Float64Array[];
  targetScale: number;
}

/**
 * Normalize branch inputs per sensor and targets to unit RMS.  The first
 * branch layers and the final trunk layer are affine, so the normalization
 * folds exactly back into the exported weights: shipped models consume and
 * produce raw units.
 */
function normalize(data: Dataset): { data: Dataset; norm: Normalization } {
  const branchMean: Float64Array[] = [];
  const branchStd: Float64Array[] = [];
  const branchInputs = data.branchInputs.map((arr, l) => {
    const nb = data.branchWidths[l];
    const mean = new Float64Array(nb);
    const std = new Float64Array(nb);
    for (let i = 0; i < nb; i++) {
      let s = 0.0;
      for (let j = 0; j < data.nSamples; j++) s += arr[j * nb + i];
      mean[i] = s / data.nSamples;
      let v = 0.0;
      for (let j = 0; j < data.nSamples; j++) {
        const d = arr[j * nb + i] - mean[i];
        v += d * d;
      }
      std[i] = Math.sqrt(v / data.nSamples) || 1.0;
      if (std[i] < 1e-12) std[i] = 1.0;
    }
    branchMean.push(mean);
    branchStd.push(std);
    const out = new Float64Array(arr.length);
    for (let j = 0; j < data.nSamples; j++) {
      for (let i = 0; i < nb; i++) out[j * nb + i] = (arr[j * nb + i] - mean[i]) / std[i];
    }
    return out;
  });
  let rms = 0.0;
  for (let i = 0; i < data.targets.length; i++) rms += data.targets[i] * data.targets[i];
  const targetScale = Math.sqrt(rms / data.targets.length) || 1.0;
  const targets = new Float64Array(data.targets.length);
  for (let i = 0; i < targets.length; i++) targets[i] = data.targets[i] / targetScale;
  return {
    data: { ...data, branchInputs, targets },
    norm: { branchMean, branchStd, targetScale },
  };
}

/** Rewrite first branch layers and the last trunk layer to raw units. */
function foldNormalization(model: Model, norm: Normalization): void {
  model.branches.forEach((stack, l) => {
    const first = stack[0];
    const mean = norm.branchMean[l];
    const std = norm.branchStd[l];
    for (let o = 0; o < first.outDim; o++) {
      let shift = 0.0;
      for (let i = 0; i < first.inDim; i++) {
        first.weight[o * first.inDim + i] /= std[i];
        shift += first.weight[o * first.inDim + i] * mean[i];
      }
      first.bias[o] -= shift;
    }
  });
  const last = model.trunk[model.trunk.length - 1];
  for (let i = 0; i < last.weight.length; i++) last.weight[i] *= norm.targetScale;
  for (let i = 0; i < last.bias.length; i++) last.bias[i] *= norm.targetScale;
}

export function train(rawData: Dataset, cfg: TrainConfig): TrainResult {
  const started = Date.now();
  const rng = new Rng(cfg.seed);
  const { data, norm } = normalize(rawData);
  const branchWidths = cfg.branchHidden.map((hidden, l) => [
    data.branchWidths[l], ...hidden, cfg.p,
  ]);
  if (branchWidths.length !== data.branchInputs.length) {
    throw new Error(
      `architecture has ${branchWidths.length} branches, dataset has ${data.branchInputs.length}`);
  }
  const trunkWidths = [data.dim, ...cfg.trunkHidden, cfg.p];
  const grids = data.branchInputs.map((_, l) => ({
    dim: data.dim,
    shape: [data.branchWidths[l]],
    coords: sensorCoords(data, l),
  }));
  const model = buildModel(branchWidths, trunkWidths, grids, cfg.activation,
                           cfg.boundaryMask, rng);

  // fixed validation split drawn once from the seeded stream
  const order = new Int32Array(data.nSamples);
  for (let i = 0; i < order.length; i++) order[i] = i;
  rng.shuffle(order);
  const nVal = Math.max(1, Math.floor(data.nSamples * cfg.valFraction));
  const valIdx = order.slice(0, nVal);
  const trainIdx = order.slice(nVal);

  const layers = [...model.branches.flat(), ...model.trunk];
  const adam = new Adam(layers, cfg.lr);

  let best = Infinity;
  let bestWeights = snapshot(model);
  let sinceBest = 0;
  let epoch = 0;
  let lastTrainLoss = Infinity;
  const batchIdx = trainIdx.slice();
  for (; epoch < cfg.maxEpochs; epoch++) {
    rng.shuffle(batchIdx);
    lastTrainLoss = 0.0;
    for (let start = 0; start < batchIdx.length; start += cfg.batch) {
      const idx = batchIdx.slice(start, Math.min(start + cfg.batch, batchIdx.length));
      const inputs = data.branchInputs.map((arr, l) => gather(arr, data.branchWidths[l], idx));
      const targets = gather(data.targets, data.nPts, idx);
      const grads = zeroModelGrads(model);
      const { loss } = lossAndGrads(
        model, inputs, targets, data.coords, data.nPts, idx.length, grads);
      lastTrainLoss += loss;
      adam.update([...grads.branches.flat(), ...grads.trunk]);
    }
    const val = evaluate(model, data, valIdx);
    if (val.loss < best - 1e-14) {
      best = val.loss;
      bestWeights = snapshot(model);
      sinceBest = 0;
    } else {
      sinceBest += 1;
      if (sinceBest >= cfg.patience) break;
    }
    if (cfg.logEvery > 0 && epoch % cfg.logEvery === 0) {
      console.log(`epoch ${epoch}: train ${lastTrainLoss.toExponential(3)} ` +
                  `val ${val.loss.toExponential(3)} (rel L2 ${val.relL2.toExponential(3)})`);
    }
  }
  restore(model, bestWeights);
  const val = evaluate(model, data, valIdx);
  foldNormalization(model, norm);
  model.extras["train"] = {
    seed: cfg.seed,
    batch: cfg.batch,
    lr: cfg.lr.toExponential(),
    epochs: epoch,
    patience: cfg.patience,
    init: "xavier-uniform",
    normalization: "inputs-standardized-targets-rms-folded",
    val_rel_l2: val.relL2.toExponential(6),
  };
  return {
    model,
    trainLoss: lastTrainLoss,
    valLoss: val.loss,
    valRelL2: val.relL2,
    epochs: epoch,
    seconds: (Date.now() - started) / 1000,
  };
}

/**
 * Sensor coordinates for branch l.  Nodal-field branches (width == nPts)
 * reuse the dataset coordinates; low-dimensional parameter branches get a
 * placeholder grid (their "sensors" are not spatial).
 */
function sensorCoords(data: Dataset, l: number): Float64Array {
  const nb = data.branchWidths[l];
  if (nb === data.nPts) return data.coords;
  const coords = new Float64Array(nb * data.dim);
  for (let i = 0; i < nb; i++) {
    for (let a = 0; a < data.dim; a++) coords[i * data.dim + a] = 0.5;
  }
  return coords;
}
