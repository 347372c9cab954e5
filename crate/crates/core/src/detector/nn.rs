//! Minimal convolution layers with hand-written backward passes.
//!
//! Tensors are single images in channel-major layout. Convolutions lower to
//! im2col followed by a single-precision GEMM.

use serde::{Deserialize, Serialize};

pub const LEAKY_SLOPE: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    /// Output is `input + conv(input)`; requires matching shapes.
    pub residual: bool,
    /// Leaky ReLU after the (residual) sum.
    pub activation: bool,
}

impl ConvSpec {
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let p = self.padding();
        (
            (h + 2 * p - span) / self.stride + 1,
            (w + 2 * p - span) / self.stride + 1,
        )
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }
}

/// Activations of one layer kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub in_h: usize,
    pub in_w: usize,
    pub cols: Vec<f32>,
    pub output: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub spec: ConvSpec,
    /// `[out][in * k * k]`, followed by nothing; bias is separate.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices fully contained in the slices:
    // `a` is m x k, `b` is k x n and `c` is m x n row-major, as asserted by
    // every caller's length bookkeeping.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Conv2d {
    pub fn zeros(spec: ConvSpec) -> Self {
        Self {
            spec,
            weight: vec![0.0; spec.weight_len()],
            bias: vec![0.0; spec.out_channels],
        }
    }

    fn im2col(&self, input: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
        let s = &self.spec;
        let (oh, ow) = s.output_size(h, w);
        let k = s.kernel;
        let p = s.padding() as isize;
        let rows = s.in_channels * k * k;
        let cols_n = oh * ow;
        let mut cols = vec![0.0f32; rows * cols_n];
        for c in 0..s.in_channels {
            let plane = &input[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                    for oy in 0..oh {
                        let iy = (oy * s.stride) as isize + (ky * s.dilation) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * s.stride) as isize + (kx * s.dilation) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        (cols, oh, ow)
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize) -> Vec<f32> {
        let s = &self.spec;
        let (oh, ow) = s.output_size(h, w);
        let k = s.kernel;
        let p = s.padding() as isize;
        let cols_n = oh * ow;
        let mut out = vec![0.0f32; s.in_channels * h * w];
        for c in 0..s.in_channels {
            let plane = &mut out[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * cols_n..(row + 1) * cols_n];
                    for oy in 0..oh {
                        let iy = (oy * s.stride) as isize + (ky * s.dilation) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * s.stride) as isize + (kx * s.dilation) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Runs the layer, returning the trace and output size.
    pub fn forward(&self, input: &[f32], h: usize, w: usize) -> (LayerTrace, usize, usize) {
        let s = &self.spec;
        let (cols, oh, ow) = self.im2col(input, h, w);
        let n = oh * ow;
        let kdim = s.in_channels * s.kernel * s.kernel;
        let mut out = vec![0.0f32; s.out_channels * n];
        for (o, chunk) in out.chunks_mut(n).enumerate() {
            chunk.fill(self.bias[o]);
        }
        gemm(s.out_channels, kdim, n, &self.weight, (kdim as isize, 1), &cols, (n as isize, 1), 1.0, &mut out);
        if s.residual {
            for (o, i) in out.iter_mut().zip(input) {
                *o += i;
            }
        }
        if s.activation {
            for v in &mut out {
                if *v < 0.0 {
                    *v *= LEAKY_SLOPE;
                }
            }
        }
        (
            LayerTrace {
                in_h: h,
                in_w: w,
                cols,
                output: out,
            },
            oh,
            ow,
        )
    }

    /// Backpropagates `grad_out` (modified in place by the activation
    /// derivative). Accumulates parameter gradients into `param_grad` when
    /// given (`weight` then `bias` layout) and returns the input gradient
    /// when `need_input` is set.
    pub fn backward(
        &self,
        trace: &LayerTrace,
        grad_out: &mut [f32],
        param_grad: Option<&mut [f32]>,
        need_input: bool,
    ) -> Option<Vec<f32>> {
        let s = &self.spec;
        if s.activation {
            for (g, &y) in grad_out.iter_mut().zip(&trace.output) {
                if y < 0.0 {
                    *g *= LEAKY_SLOPE;
                }
            }
        }
        let (oh, ow) = s.output_size(trace.in_h, trace.in_w);
        let n = oh * ow;
        let kdim = s.in_channels * s.kernel * s.kernel;
        if let Some(pg) = param_grad {
            let (wg, bg) = pg.split_at_mut(s.weight_len());
            gemm(s.out_channels, n, kdim, grad_out, (n as isize, 1), &trace.cols, (1, n as isize), 1.0, wg);
            for (o, chunk) in grad_out.chunks(n).enumerate() {
                bg[o] += chunk.iter().sum::<f32>();
            }
        }
        if !need_input {
            return None;
        }
        let mut dcols = vec![0.0f32; kdim * n];
        gemm(kdim, s.out_channels, n, &self.weight, (1, kdim as isize), grad_out, (n as isize, 1), 0.0, &mut dcols);
        let mut grad_in = self.col2im(&dcols, trace.in_h, trace.in_w);
        if s.residual {
            for (gi, go) in grad_in.iter_mut().zip(grad_out.iter()) {
                *gi += go;
            }
        }
        Some(grad_in)
    }
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One descent step on `params` given `grad`.
    pub fn update<T>(&mut self, params: &mut [T], grad: &[f64])
    where
        T: Copy + Into<f64> + FromF64,
    {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let p: f64 = params[i].into();
            params[i] = T::from_f64(p - self.lr * mhat / (vhat.sqrt() + self.eps));
        }
    }
}

pub trait FromF64 {
    fn from_f64(v: f64) -> Self;
}

impl FromF64 for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl FromF64 for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_conv(spec: ConvSpec, rng: &mut ChaCha8Rng) -> Conv2d {
        let mut c = Conv2d::zeros(spec);
        c.weight.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        c.bias.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        c
    }

    /// Direct nested-loop convolution as an independent reference.
    fn direct(conv: &Conv2d, input: &[f32], h: usize, w: usize) -> Vec<f32> {
        let s = conv.spec;
        let (oh, ow) = s.output_size(h, w);
        let p = s.padding() as isize;
        let mut out = vec![0.0f32; s.out_channels * oh * ow];
        for o in 0..s.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[o];
                    for c in 0..s.in_channels {
                        for ky in 0..s.kernel {
                            for kx in 0..s.kernel {
                                let iy = (oy * s.stride + ky * s.dilation) as isize - p;
                                let ix = (ox * s.stride + kx * s.dilation) as isize - p;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += conv.weight[((o * s.in_channels + c) * s.kernel + ky) * s.kernel + kx]
                                        * input[(c * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (stride, dilation) in [(1, 1), (2, 1), (1, 2), (1, 3)] {
            let spec = ConvSpec {
                in_channels: 3,
                out_channels: 4,
                kernel: 3,
                stride,
                dilation,
                residual: false,
                activation: false,
            };
            let conv = random_conv(spec, &mut rng);
            let input: Vec<f32> = (0..3 * 9 * 11).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (trace, _, _) = conv.forward(&input, 9, 11);
            let reference = direct(&conv, &input, 9, 11);
            for (a, b) in trace.output.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = ConvSpec {
            in_channels: 2,
            out_channels: 2,
            kernel: 3,
            stride: 1,
            dilation: 2,
            residual: true,
            activation: true,
        };
        let conv = random_conv(spec, &mut rng);
        let (h, w) = (6, 5);
        let input: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let weights: Vec<f32> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |inp: &[f64]| -> f64 {
            let x: Vec<f32> = inp.iter().map(|&v| v as f32).collect();
            let (t, _, _) = conv.forward(&x, h, w);
            t.output.iter().zip(&weights).map(|(a, b)| (a * b) as f64).sum()
        };
        let x32: Vec<f32> = input.iter().map(|&v| v as f32).collect();
        let (trace, _, _) = conv.forward(&x32, h, w);
        let mut g = weights.clone();
        let mut pg = vec![0.0f32; spec.param_len()];
        let gin = conv.backward(&trace, &mut g, Some(&mut pg), true).unwrap();
        let eps = 1e-3;
        for k in [0usize, 7, 18, 33, 59] {
            let mut plus = input.clone();
            plus[k] += eps;
            let mut minus = input.clone();
            minus[k] -= eps;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * eps);
            assert!((fd - gin[k] as f64).abs() < 2e-2, "{k}: {fd} vs {}", gin[k]);
        }
        // Bias gradient equals the activation-gated sum of output gradients.
        let gated: f32 = g[..h * w].iter().sum();
        assert!((pg[spec.weight_len()] - gated).abs() < 1e-4);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut x = vec![3.0f64, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.update(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2));
    }
}
