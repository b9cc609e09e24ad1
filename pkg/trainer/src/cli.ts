/**
 * Trainer command line.
 *
 *   train  --dataset d.tpk --arch arch.json --out model.onpk [--seed 0]
 *          [--batch 1000] [--lr 1e-4] [--patience 10000] [--max-epochs N]
 *   parity --model model.onpk --out parity.tpk [--count 100] [--points 50]
 *          [--seed 7]
 *
 * The arch file gives hidden widths only; input widths come from the dataset:
 *   {"branch_hidden": [[64, 64]], "trunk_hidden": [64, 64], "p": 32,
 *    "activation": "tanh", "boundary_mask": "poly"}
 */

import * as fs from "node:fs";
import { writeTensorPack } from "./containers";
import { infer, loadModel, saveModel } from "./deeponet";
import { Rng } from "./rng";
import { DEFAULT_CONFIG, TrainConfig, loadDataset, train } from "./train";

function parseArgs(argv: string[]): { command: string; options: Map<string, string> } {
  const [command, ...rest] = argv;
  const options = new Map<string, string>();
  for (let i = 0; i < rest.length; i += 2) {
    if (!rest[i].startsWith("--") || i + 1 >= rest.length) {
      throw new Error(`malformed option ${rest[i]}`);
    }
    options.set(rest[i].slice(2), rest[i + 1]);
  }
  return { command, options };
}

function need(options: Map<string, string>, key: string): string {
  const v = options.get(key);
  if (v === undefined) throw new Error(`missing required option --${key}`);
  return v;
}

function cmdTrain(options: Map<string, string>): number {
  const data = loadDataset(need(options, "dataset"));
  const arch = JSON.parse(fs.readFileSync(need(options, "arch"), "utf-8"));
  const cfg: TrainConfig = {
    ...DEFAULT_CONFIG,
    branchHidden: arch.branch_hidden,
    trunkHidden: arch.trunk_hidden,
    p: arch.p,
    activation: arch.activation ?? "tanh",
    boundaryMask: arch.boundary_mask ?? "poly",
    seed: Number(options.get("seed") ?? 0),
    batch: Number(options.get("batch") ?? DEFAULT_CONFIG.batch),
    lr: Number(options.get("lr") ?? DEFAULT_CONFIG.lr),
    patience: Number(options.get("patience") ?? DEFAULT_CONFIG.patience),
    maxEpochs: Number(options.get("max-epochs") ?? DEFAULT_CONFIG.maxEpochs),
    logEvery: Number(options.get("log-every") ?? 0),
  };
  const result = train(data, cfg);
  saveModel(result.model, need(options, "out"));
  console.log(
    `trained ${result.epochs} epochs in ${result.seconds.toFixed(1)}s; ` +
    `validation loss ${result.valLoss.toExponential(4)}, ` +
    `relative L2 ${result.valRelL2.toExponential(4)}`);
  console.log(`wrote ${need(options, "out")}`);
  return 0;
}

/**
 * Dump randomized inference cases for the cross-implementation parity check:
 * random branch inputs, random evaluation points, and this side's outputs.
 */
function cmdParity(options: Map<string, string>): number {
  const model = loadModel(need(options, "model"));
  const count = Number(options.get("count") ?? 100);
  const nPts = Number(options.get("points") ?? 50);
  const rng = new Rng(Number(options.get("seed") ?? 7));
  const dim = model.trunk[0].inDim;
  const points = new Float64Array(nPts * dim);
  for (let i = 0; i < points.length; i++) points[i] = rng.uniform(0, 1);
  const inputs = model.grids.map((g) => {
    const nb = g.shape.reduce((a, b) => a * b, 1);
    const arr = new Float64Array(count * nb);
    for (let i = 0; i < arr.length; i++) arr[i] = rng.uniform(-1, 1);
    return { nb, arr };
  });
  const outputs = new Float64Array(count * nPts);
  for (let c = 0; c < count; c++) {
    const caseInputs = inputs.map(({ nb, arr }) => arr.subarray(c * nb, (c + 1) * nb));
    outputs.set(infer(model, caseInputs, points, nPts), c * nPts);
  }
  const tensors: Record<string, any> = {
    points: { dtype: "f64le", shape: [nPts, dim], data: points },
    outputs: { dtype: "f64le", shape: [count, nPts], data: outputs },
  };
  inputs.forEach(({ nb, arr }, l) => {
    tensors[`inputs_${l}`] = { dtype: "f64le", shape: [count, nb], data: arr };
  });
  writeTensorPack(need(options, "out"), tensors, { count, seed: Number(options.get("seed") ?? 7) });
  console.log(`wrote ${need(options, "out")} with ${count} inference cases`);
  return 0;
}

export function main(argv: string[]): number {
  try {
    const { command, options } = parseArgs(argv);
    if (command === "train") return cmdTrain(options);
    if (command === "parity") return cmdParity(options);
    console.error(`unknown command ${command}; use train or parity`);
    return 2;
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 2;
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
