/**
 * Dense layers in float64 with hand-rolled forward and backward passes.
 * Weights are row-major (out x in), matching the weight container layout.
 */

import { Rng } from "./rng";

export type Activation = "tanh" | "relu" | "none";

export interface DenseLayer {
  outDim: number;
  inDim: number;
  weight: Float64Array; // (out, in) row-major
  bias: Float64Array; // (out,)
  activation: Activation;
}

export function denseLayer(
  inDim: number,
  outDim: number,
  activation: Activation,
  rng?: Rng,
): DenseLayer {
  const weight = new Float64Array(outDim * inDim);
  if (rng) {
    // uniform Xavier scaling on fan-in + fan-out
    const bound = Math.sqrt(6.0 / (inDim + outDim));
    for (let i = 0; i < weight.length; i++) weight[i] = rng.uniform(-bound, bound);
  }
  return { outDim, inDim, weight, bias: new Float64Array(outDim), activation };
}

/** Fully connected stack; hidden layers activated, final layer linear. */
export function ffnStack(widths: number[], activation: Activation, rng?: Rng): DenseLayer[] {
  const layers: DenseLayer[] = [];
  for (let i = 0; i + 1 < widths.length; i++) {
    const act = i + 2 < widths.length ? activation : "none";
    layers.push(denseLayer(widths[i], widths[i + 1], act, rng));
  }
  return layers;
}

function applyActivation(act: Activation, z: Float64Array): Float64Array {
  if (act === "none") return z;
  const out = new Float64Array(z.length);
  if (act === "tanh") for (let i = 0; i < z.length; i++) out[i] = Math.tanh(z[i]);
  else for (let i = 0; i < z.length; i++) out[i] = z[i] > 0 ? z[i] : 0;
  return out;
}

export interface LayerTrace {
  input: Float64Array; // (batch, in)
  pre: Float64Array; // (batch, out) pre-activation
  output: Float64Array; // (batch, out)
}

/** y = x W^T + b followed by the activation; returns the trace for backprop. */
export function layerForward(layer: DenseLayer, x: Float64Array, batch: number): LayerTrace {
  const { inDim, outDim, weight, bias } = layer;
  const pre = new Float64Array(batch * outDim);
  for (let b = 0; b < batch; b++) {
    const xo = b * inDim;
    const yo = b * outDim;
    for (let o = 0; o < outDim; o++) {
      let acc = bias[o];
      const wo = o * inDim;
      for (let i = 0; i < inDim; i++) acc += x[xo + i] * weight[wo + i];
      pre[yo + o] = acc;
    }
  }
  return { input: x, pre, output: applyActivation(layer.activation, pre) };
}

export function stackForward(layers: DenseLayer[], x: Float64Array, batch: number): {
  output: Float64Array;
  traces: LayerTrace[];
} {
  const traces: LayerTrace[] = [];
  let cur = x;
  for (const layer of layers) {
    const trace = layerForward(layer, cur, batch);
    traces.push(trace);
    cur = trace.output;
  }
  return { output: cur, traces };
}

export interface LayerGrads {
  weight: Float64Array;
  bias: Float64Array;
}

export function zeroGrads(layers: DenseLayer[]): LayerGrads[] {
  return layers.map((l) => ({
    weight: new Float64Array(l.weight.length),
    bias: new Float64Array(l.bias.length),
  }));
}

/**
 * Backpropagate dLoss/dOutput through the stack, accumulating parameter
 * gradients; returns dLoss/dInput.
 */
export function stackBackward(
  layers: DenseLayer[],
  traces: LayerTrace[],
  dOut: Float64Array,
  batch: number,
  grads: LayerGrads[],
): Float64Array {
  let grad = dOut;
  for (let li = layers.length - 1; li >= 0; li--) {
    const layer = layers[li];
    const trace = traces[li];
    const { inDim, outDim } = layer;
    // activation derivative
    let dPre = grad;
    if (layer.activation === "tanh") {
      dPre = new Float64Array(grad.length);
      for (let i = 0; i < grad.length; i++) {
        const t = trace.output[i];
        dPre[i] = grad[i] * (1 - t * t);
      }
    } else if (layer.activation === "relu") {
      dPre = new Float64Array(grad.length);
      for (let i = 0; i < grad.length; i++) dPre[i] = trace.pre[i] > 0 ? grad[i] : 0;
    }
    const gw = grads[li].weight;
    const gb = grads[li].bias;
    for (let b = 0; b < batch; b++) {
      const xo = b * inDim;
      const yo = b * outDim;
      for (let o = 0; o < outDim; o++) {
        const d = dPre[yo + o];
        if (d === 0) continue;
        gb[o] += d;
        const wo = o * inDim;
        for (let i = 0; i < inDim; i++) gw[wo + i] += d * trace.input[xo + i];
      }
    }
    if (li > 0) {
      const dIn = new Float64Array(batch * inDim);
      for (let b = 0; b < batch; b++) {
        const xo = b * inDim;
        const yo = b * outDim;
        for (let o = 0; o < outDim; o++) {
          const d = dPre[yo + o];
          if (d === 0) continue;
          const wo = o * inDim;
          for (let i = 0; i < inDim; i++) dIn[xo + i] += d * layer.weight[wo + i];
        }
      }
      grad = dIn;
    } else {
      grad = dPre; // input gradient of the first layer is rarely needed
    }
  }
  return grad;
}

export function parameterCount(layers: DenseLayer[]): number {
  return layers.reduce((n, l) => n + l.weight.length + l.bias.length, 0);
}
