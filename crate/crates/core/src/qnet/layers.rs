//! Forward and backward kernels. Activations are channel-last `(y, x, c)`.

use super::tensor::{axpy, dot, sigmoid, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_c: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    pub fn out_len(&self) -> usize {
        self.out_h() * self.out_w() * self.out_c
    }

    /// Calls `f(input offset, weight offset, output offset)` for every
    /// non-zero input value and every output position it contributes to.
    /// Weight and output offsets address contiguous runs of `out_c` values.
    #[inline]
    fn for_each_tap(&self, input: &[f64], mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow, k, s) = (self.out_h(), self.out_w(), self.kernel, self.stride);
        for iy in 0..self.in_h {
            for ix in 0..self.in_w {
                let base = (iy * self.in_w + ix) * self.in_c;
                for ci in 0..self.in_c {
                    if input[base + ci] == 0.0 {
                        continue;
                    }
                    for ky in 0..k.min(iy + 1) {
                        let dy = iy - ky;
                        if dy % s != 0 || dy / s >= oh {
                            continue;
                        }
                        for kx in 0..k.min(ix + 1) {
                            let dx = ix - kx;
                            if dx % s != 0 || dx / s >= ow {
                                continue;
                            }
                            let w_off = ((ci * k + ky) * k + kx) * self.out_c;
                            let o_off = ((dy / s) * ow + dx / s) * self.out_c;
                            f(base + ci, w_off, o_off);
                        }
                    }
                }
            }
        }
    }
}

/// Valid (unpadded) convolution. Zero inputs are skipped.
pub fn conv_forward(g: &ConvGeom, input: &[f64], weight: &Tensor, bias: &Tensor) -> Vec<f64> {
    debug_assert_eq!(input.len(), g.in_len());
    let mut out = Vec::with_capacity(g.out_len());
    for _ in 0..g.out_h() * g.out_w() {
        out.extend_from_slice(&bias.data);
    }
    let w = &weight.data;
    g.for_each_tap(input, |i, w_off, o_off| {
        axpy(
            input[i],
            &w[w_off..w_off + g.out_c],
            &mut out[o_off..o_off + g.out_c],
        );
    });
    out
}

/// Accumulates weight and bias gradients. When `d_input` is given it also
/// accumulates the input gradient, but only at non-zero inputs: callers pass
/// it for rectified inputs, whose zero entries carry no gradient anyway.
pub fn conv_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &Tensor,
    d_out: &[f64],
    d_weight: &mut Tensor,
    d_bias: &mut Tensor,
    mut d_input: Option<&mut [f64]>,
) {
    for p in 0..g.out_h() * g.out_w() {
        axpy(
            1.0,
            &d_out[p * g.out_c..(p + 1) * g.out_c],
            &mut d_bias.data,
        );
    }
    let w = &weight.data;
    let dw = &mut d_weight.data;
    g.for_each_tap(input, |i, w_off, o_off| {
        let dout = &d_out[o_off..o_off + g.out_c];
        axpy(input[i], dout, &mut dw[w_off..w_off + g.out_c]);
        if let Some(di) = d_input.as_deref_mut() {
            di[i] += dot(&w[w_off..w_off + g.out_c], dout);
        }
    });
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` where the rectified activation is zero.
pub fn relu_backward_inplace(activation: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `W x + b` with `W` shaped `(out, in)`.
pub fn linear_forward(weight: &Tensor, bias: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..weight.shape[0])
        .map(|o| bias.data[o] + dot(weight.row(o), x))
        .collect()
}

pub fn linear_backward(
    weight: &Tensor,
    x: &[f64],
    d_out: &[f64],
    d_weight: &mut Tensor,
    d_bias: &mut Tensor,
    mut d_x: Option<&mut [f64]>,
) {
    for (o, &g) in d_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        d_bias.data[o] += g;
        axpy(g, x, d_weight.row_mut(o));
        if let Some(dx) = d_x.as_deref_mut() {
            axpy(g, weight.row(o), dx);
        }
    }
}

/// `out[p, c] = sigmoid(logit[c]) * features[p, c]` for every position `p`.
pub fn gate_features(features: &[f64], logits: &[f64]) -> Vec<f64> {
    let gates: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let c = gates.len();
    features
        .iter()
        .enumerate()
        .map(|(i, f)| f * gates[i % c])
        .collect()
}

/// Returns `(d_features, d_logits)` for [`gate_features`].
pub fn gate_backward(features: &[f64], logits: &[f64], d_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let gates: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let c = gates.len();
    let mut d_features = vec![0.0; features.len()];
    let mut d_gates = vec![0.0; c];
    for i in 0..features.len() {
        d_features[i] = d_out[i] * gates[i % c];
        d_gates[i % c] += d_out[i] * features[i];
    }
    let d_logits = d_gates
        .iter()
        .zip(&gates)
        .map(|(d, g)| d * g * (1.0 - g))
        .collect();
    (d_features, d_logits)
}

/// `Q_a = V + A_a - mean(A)`.
pub fn dueling_combine(value: f64, advantages: &[f64]) -> Vec<f64> {
    let mean = advantages.iter().sum::<f64>() / advantages.len() as f64;
    advantages.iter().map(|a| value + a - mean).collect()
}

/// Returns `(dV, dA)` for [`dueling_combine`].
pub fn dueling_backward(d_q: &[f64]) -> (f64, Vec<f64>) {
    let total: f64 = d_q.iter().sum();
    let mean = total / d_q.len() as f64;
    (total, d_q.iter().map(|g| g - mean).collect())
}

/// Per-step activations kept for backpropagation through time.
#[derive(Debug, Clone)]
pub struct GruStep {
    token: usize,
    h_prev: Vec<f64>,
    r: Vec<f64>,
    z: Vec<f64>,
    n: Vec<f64>,
    hn: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GruTrace {
    pub steps: Vec<GruStep>,
    pub output: Vec<f64>,
}

pub struct GruWeights<'a> {
    pub embedding: &'a Tensor,
    pub w_ih: &'a Tensor,
    pub w_hh: &'a Tensor,
    pub b_ih: &'a Tensor,
    pub b_hh: &'a Tensor,
}

pub struct GruGrads<'a> {
    pub embedding: &'a mut Tensor,
    pub w_ih: &'a mut Tensor,
    pub w_hh: &'a mut Tensor,
    pub b_ih: &'a mut Tensor,
    pub b_hh: &'a mut Tensor,
}

/// Gated recurrent unit over embedded tokens from a zero initial state.
///
/// ```text
/// r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
/// z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
/// n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
pub fn gru_forward(w: &GruWeights, tokens: &[usize]) -> GruTrace {
    let hd = w.w_hh.shape[1];
    let mut h = vec![0.0; hd];
    let mut steps = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        let gx = linear_forward(w.w_ih, w.b_ih, w.embedding.row(tok));
        let gh = linear_forward(w.w_hh, w.b_hh, &h);
        let mut r = vec![0.0; hd];
        let mut z = vec![0.0; hd];
        let mut n = vec![0.0; hd];
        let mut next = vec![0.0; hd];
        for j in 0..hd {
            r[j] = sigmoid(gx[j] + gh[j]);
            z[j] = sigmoid(gx[hd + j] + gh[hd + j]);
            n[j] = (gx[2 * hd + j] + r[j] * gh[2 * hd + j]).tanh();
            next[j] = (1.0 - z[j]) * n[j] + z[j] * h[j];
        }
        let hn = gh[2 * hd..].to_vec();
        steps.push(GruStep {
            token: tok,
            h_prev: std::mem::replace(&mut h, next),
            r,
            z,
            n,
            hn,
        });
    }
    GruTrace { steps, output: h }
}

pub fn gru_backward(w: &GruWeights, g: &mut GruGrads, trace: &GruTrace, d_output: &[f64]) {
    let hd = w.w_hh.shape[1];
    let mut dh = d_output.to_vec();
    let mut dgx = vec![0.0; 3 * hd];
    let mut dgh = vec![0.0; 3 * hd];
    for step in trace.steps.iter().rev() {
        let mut dh_prev = vec![0.0; hd];
        for j in 0..hd {
            let (r, z, n) = (step.r[j], step.z[j], step.n[j]);
            let dn = dh[j] * (1.0 - z);
            let dz = dh[j] * (step.h_prev[j] - n);
            dh_prev[j] = dh[j] * z;
            let da_n = dn * (1.0 - n * n);
            let da_r = da_n * step.hn[j] * r * (1.0 - r);
            let da_z = dz * z * (1.0 - z);
            dgx[j] = da_r;
            dgx[hd + j] = da_z;
            dgx[2 * hd + j] = da_n;
            dgh[j] = da_r;
            dgh[hd + j] = da_z;
            dgh[2 * hd + j] = da_n * r;
        }
        let x = w.embedding.row(step.token);
        let mut dx = vec![0.0; x.len()];
        linear_backward(w.w_ih, x, &dgx, g.w_ih, g.b_ih, Some(&mut dx));
        axpy(1.0, &dx, g.embedding.row_mut(step.token));
        linear_backward(
            w.w_hh,
            &step.h_prev,
            &dgh,
            g.w_hh,
            g.b_hh,
            Some(&mut dh_prev),
        );
        dh = dh_prev;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct gather-form convolution with `(out, in, kh, kw)` indexing.
    fn conv_oracle(g: &ConvGeom, input: &[f64], weight: &Tensor, bias: &Tensor) -> Vec<f64> {
        let mut out = vec![0.0; g.out_len()];
        for oy in 0..g.out_h() {
            for ox in 0..g.out_w() {
                for co in 0..g.out_c {
                    let mut s = bias.data[co];
                    for ci in 0..g.in_c {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = oy * g.stride + ky;
                                let ix = ox * g.stride + kx;
                                s += input[(iy * g.in_w + ix) * g.in_c + ci]
                                    * weight.data
                                        [((ci * g.kernel + ky) * g.kernel + kx) * g.out_c + co];
                            }
                        }
                    }
                    out[(oy * g.out_w() + ox) * g.out_c + co] = s;
                }
            }
        }
        out
    }

    #[test]
    fn scatter_conv_matches_gather_oracle() {
        for (h, w, stride) in [(10, 10, 1), (8, 8, 2), (7, 9, 2), (5, 5, 3)] {
            let g = ConvGeom {
                in_h: h,
                in_w: w,
                in_c: 3,
                kernel: 3,
                stride,
                out_c: 4,
            };
            let input: Vec<f64> = (0..g.in_len())
                .map(|i| {
                    if i % 3 == 0 {
                        0.0
                    } else {
                        ((i * 37 % 11) as f64) - 5.0
                    }
                })
                .collect();
            let weight = Tensor::from_vec(
                &[3, 3, 3, 4],
                (0..108)
                    .map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3)
                    .collect(),
            );
            let bias = Tensor::from_vec(&[4], vec![0.1, -0.2, 0.3, 0.0]);
            let fast = conv_forward(&g, &input, &weight, &bias);
            let slow = conv_oracle(&g, &input, &weight, &bias);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_output_sizes() {
        let c1 = ConvGeom {
            in_h: 10,
            in_w: 10,
            in_c: 16,
            kernel: 3,
            stride: 1,
            out_c: 16,
        };
        assert_eq!((c1.out_h(), c1.out_w()), (8, 8));
        let c2 = ConvGeom {
            in_h: 8,
            in_w: 8,
            in_c: 16,
            kernel: 3,
            stride: 2,
            out_c: 32,
        };
        assert_eq!((c2.out_h(), c2.out_w(), c2.out_c), (3, 3, 32));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_features() {
        let g = ConvGeom {
            in_h: 6,
            in_w: 6,
            in_c: 2,
            kernel: 3,
            stride: 1,
            out_c: 3,
        };
        let weight = Tensor::from_vec(&[2, 3, 3, 3], vec![0.7; 54]);
        let out = conv_forward(&g, &vec![0.0; g.in_len()], &weight, &Tensor::zeros(&[3]));
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gating_identities() {
        let f = vec![1.0, 2.0, -3.0, 4.0, 0.5, -0.25];
        assert_eq!(
            gate_features(&f, &[0.0, 0.0]),
            f.iter().map(|x| 0.5 * x).collect::<Vec<_>>()
        );
        let out = gate_features(&[1.0, 1.0, 1.0, 1.0], &[3f64.ln(), -1e4]);
        assert!((out[0] - 0.75).abs() < 1e-15 && (out[2] - 0.75).abs() < 1e-15);
        assert_eq!((out[1], out[3]), (0.0, 0.0));
        let gated = gate_features(&f, &[2.0, -1.0]);
        assert_eq!(gated.len(), f.len());
        assert!(gated.iter().zip(&f).all(|(g, x)| g.abs() <= x.abs()));
    }

    #[test]
    fn dueling_examples() {
        assert_eq!(dueling_combine(1.0, &[1.0, 2.0, 3.0]), vec![0.0, 1.0, 2.0]);
        assert_eq!(dueling_combine(2.5, &[4.0, 4.0, 4.0]), vec![2.5, 2.5, 2.5]);
    }
}
