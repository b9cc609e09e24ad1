/** Adam with bias correction, one moment pair per parameter tensor. */

import { DenseLayer, LayerGrads } from "./network";

interface Moments {
  mW: Float64Array;
  vW: Float64Array;
  mB: Float64Array;
  vB: Float64Array;
}

export class Adam {
  private readonly beta1 = 0.9;
  private readonly beta2 = 0.999;
  private readonly eps = 1e-8;
  private step = 0;
  private moments: Moments[];

  constructor(private layers: DenseLayer[], private lr: number) {
    this.moments = layers.map((l) => ({
      mW: new Float64Array(l.weight.length),
      vW: new Float64Array(l.weight.length),
      mB: new Float64Array(l.bias.length),
      vB: new Float64Array(l.bias.length),
    }));
  }

  update(grads: LayerGrads[]): void {
    this.step += 1;
    const c1 = 1 - Math.pow(this.beta1, this.step);
    const c2 = 1 - Math.pow(this.beta2, this.step);
    for (let li = 0; li < this.layers.length; li++) {
      const layer = this.layers[li];
      const m = this.moments[li];
      const g = grads[li];
      this.apply(layer.weight, g.weight, m.mW, m.vW, c1, c2);
      this.apply(layer.bias, g.bias, m.mB, m.vB, c1, c2);
    }
  }

  private apply(
    param: Float64Array,
    grad: Float64Array,
    m: Float64Array,
    v: Float64Array,
    c1: number,
    c2: number,
  ): void {
    for (let i = 0; i < param.length; i++) {
      m[i] = this.beta1 * m[i] + (1 - this.beta1) * grad[i];
      v[i] = this.beta2 * v[i] + (1 - this.beta2) * grad[i] * grad[i];
      param[i] -= (this.lr * (m[i] / c1)) / (Math.sqrt(v[i] / c2) + this.eps);
    }
  }
}
