import { strict as assert } from "node:assert";
import { test } from "node:test";
import {
  DeepOnet,
  boundaryWeight,
  buildModel,
  infer,
  loadModel,
  lossAndGrads,
  saveModel,
  trunkEval,
  zeroModelGrads,
} from "../src/deeponet";
import { ffnStack, stackForward } from "../src/network";
import { Rng } from "../src/rng";

function tinyModel(mask: "none" | "poly" = "poly", seed = 1): DeepOnet {
  const rng = new Rng(seed);
  return buildModel(
    [[2, 3, 2]],
    [1, 3, 2],
    [{ dim: 1, shape: [2], coords: new Float64Array([0.0, 1.0]) }],
    "tanh",
    mask,
    rng,
  );
}

test("dense stack matches a manual two-layer chain", () => {
  const rng = new Rng(4);
  const layers = ffnStack([2, 3, 1], "tanh", rng);
  const x = new Float64Array([0.3, -0.7]);
  const { output } = stackForward(layers, x, 1);
  let hidden = new Float64Array(3);
  for (let o = 0; o < 3; o++) {
    hidden[o] = Math.tanh(
      layers[0].bias[o] + layers[0].weight[o * 2] * x[0] + layers[0].weight[o * 2 + 1] * x[1]);
  }
  let expected = layers[1].bias[0];
  for (let i = 0; i < 3; i++) expected += layers[1].weight[i] * hidden[i];
  assert.ok(Math.abs(output[0] - expected) < 1e-15);
});

test("boundary weight vanishes on the boundary and is one at the center", () => {
  const w = boundaryWeight(new Float64Array([0.0, 0.5, 1.0]), 3, 1);
  assert.equal(w[0], 0);
  assert.equal(w[2], 0);
  assert.ok(Math.abs(w[1] - 1.0) < 1e-15);
});

test("masked trunk rows vanish at boundary points", () => {
  const model = tinyModel("poly");
  const t = trunkEval(model, new Float64Array([0.0, 0.5, 1.0]), 3);
  assert.equal(Math.abs(t[0]), 0);
  assert.equal(Math.abs(t[1]), 0);
  assert.ok(Math.abs(t[2]) + Math.abs(t[3]) > 0);
  assert.equal(Math.abs(t[4]), 0);
  assert.equal(Math.abs(t[5]), 0);
});

test("loss gradients match central finite differences", () => {
  const model = tinyModel("poly", 7);
  const rng = new Rng(9);
  const batch = 3;
  const nPts = 4;
  const inputs = [new Float64Array(batch * 2)];
  for (let i = 0; i < inputs[0].length; i++) inputs[0][i] = rng.uniform(-1, 1);
  const points = new Float64Array(nPts);
  for (let i = 0; i < nPts; i++) points[i] = (i + 0.5) / nPts;
  const targets = new Float64Array(batch * nPts);
  for (let i = 0; i < targets.length; i++) targets[i] = rng.uniform(0.5, 1.5);

  const evalLoss = () =>
    lossAndGrads(model, inputs, targets, points, nPts, batch).loss;
  const grads = zeroModelGrads(model);
  lossAndGrads(model, inputs, targets, points, nPts, batch, grads);

  const layers = [...model.branches.flat(), ...model.trunk];
  const layerGrads = [...grads.branches.flat(), ...grads.trunk];
  const h = 1e-6;
  for (let li = 0; li < layers.length; li++) {
    for (const field of ["weight", "bias"] as const) {
      const params = layers[li][field];
      const g = layerGrads[li][field];
      for (let i = 0; i < params.length; i++) {
        const keep = params[i];
        params[i] = keep + h;
        const up = evalLoss();
        params[i] = keep - h;
        const down = evalLoss();
        params[i] = keep;
        const fd = (up - down) / (2 * h);
        const scale = Math.max(Math.abs(fd), Math.abs(g[i]), 1e-8);
        assert.ok(Math.abs(fd - g[i]) / scale < 1e-5,
          `layer ${li} ${field}[${i}]: analytic ${g[i]} vs fd ${fd}`);
      }
    }
  }
});

test("loss term is invariant under joint scaling of target and prediction", () => {
  const model = tinyModel("poly", 11);
  const rng = new Rng(12);
  const batch = 2;
  const nPts = 5;
  const inputs = [new Float64Array(batch * 2)];
  for (let i = 0; i < inputs[0].length; i++) inputs[0][i] = rng.uniform(-1, 1);
  const points = new Float64Array(nPts);
  for (let i = 0; i < nPts; i++) points[i] = (i + 0.5) / nPts;
  const targets = new Float64Array(batch * nPts);
  for (let i = 0; i < targets.length; i++) targets[i] = rng.uniform(0.5, 1.5);

  const base = lossAndGrads(model, inputs, targets, points, nPts, batch).perSample;

  // scale predictions via the final trunk layer and targets by the same c
  const c = -3.0;
  const last = model.trunk[model.trunk.length - 1];
  for (let i = 0; i < last.weight.length; i++) last.weight[i] *= c;
  for (let i = 0; i < last.bias.length; i++) last.bias[i] *= c;
  const scaledTargets = targets.map((u) => c * u);
  const scaled = lossAndGrads(
    model, inputs, new Float64Array(scaledTargets), points, nPts, batch).perSample;
  for (let j = 0; j < batch; j++) {
    assert.ok(Math.abs(base[j] - scaled[j]) < 1e-12 * Math.max(1, Math.abs(base[j])));
  }
});

test("export, import, export is byte identical and mask round-trips", () => {
  const model = tinyModel("poly", 13);
  model.extras["train"] = { seed: 13, init: "xavier-uniform" };
  const blob = saveModel(model, null);
  const loaded = loadModel(blob);
  assert.equal(loaded.boundaryMask, "poly");
  assert.deepEqual(loaded.extras["train"], { seed: 13, init: "xavier-uniform" });
  const blob2 = saveModel(loaded, null);
  assert.ok(blob.equals(blob2));
});

test("loader rejects non-dense layers and bad activations", () => {
  const model = tinyModel();
  const blob = saveModel(model, null);
  const text = blob.toString("latin1");
  const poisoned = Buffer.from(text.replace('"kind":"dense"', '"kind":"conv9"'), "latin1");
  assert.throws(() => loadModel(poisoned));
});

test("inference is deterministic", () => {
  const model = tinyModel("poly", 15);
  const inputs = [new Float64Array([0.4, -0.2])];
  const points = new Float64Array([0.25, 0.75]);
  const a = infer(model, inputs, points, 2);
  const b = infer(model, inputs, points, 2);
  assert.deepEqual(Array.from(a), Array.from(b));
});
