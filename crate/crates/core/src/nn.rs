//! Dense layers with hand-written backward passes, all on channel-first
//! `f64` buffers. Shapes are passed explicitly; callers own the layout.

use crate::datamodel::BoundingBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |v: usize| (v + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }
}

/// Output positions `o` with `o * stride + k - pad` inside `[0, n)`.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // need o*stride + k - pad <= n_in - 1
    let hi_excl = if n_in + pad > k {
        ((n_in + pad - k - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

/// Unfolds the input into a `(c_in * k * k) x (ho * wo)` row-major matrix.
fn im2col(s: &ConvShape, input: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let k = s.kernel;
    let p = ho * wo;
    let mut cols = vec![0.0; s.c_in * k * k * p];
    for ci in 0..s.c_in {
        let inp = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(ky, s.stride, s.pad, h, ho);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(kx, s.stride, s.pad, w, wo);
                let row = &mut cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let iy = oy * s.stride + ky - s.pad;
                    let src = &inp[iy * w..(iy + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for ox in ox0..ox1 {
                        dst[ox] = src[ox * s.stride + kx - s.pad];
                    }
                }
            }
        }
    }
    cols
}

/// Adds the folded `cols` gradient back into `d_input`.
fn col2im_add(s: &ConvShape, cols: &[f64], h: usize, w: usize, ho: usize, wo: usize, d_input: &mut [f64]) {
    let k = s.kernel;
    let p = ho * wo;
    for ci in 0..s.c_in {
        let di = &mut d_input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            let (oy0, oy1) = valid_range(ky, s.stride, s.pad, h, ho);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(kx, s.stride, s.pad, w, wo);
                let row = &cols[((ci * k + ky) * k + kx) * p..][..p];
                for oy in oy0..oy1 {
                    let iy = oy * s.stride + ky - s.pad;
                    let src = &row[oy * wo..(oy + 1) * wo];
                    let dst = &mut di[iy * w..(iy + 1) * w];
                    for ox in ox0..ox1 {
                        dst[ox * s.stride + kx - s.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// `c += a * b` for row-major `a: m x k`, `b: k x n`, `c: m x n`, with
/// optional transposes given as `(rows, cols)` strides.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], a_st: (isize, isize), b: &[f64], b_st: (isize, isize), c: &mut [f64]) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    // SAFETY: all slices cover the extents implied by the dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_st.0,
            a_st.1,
            b.as_ptr(),
            b_st.0,
            b_st.1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(
    s: &ConvShape,
    input: &[f64],
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = s.output_hw(h, w);
    let p = ho * wo;
    let kk = s.c_in * s.kernel * s.kernel;
    assert_eq!(input.len(), s.c_in * h * w);
    assert_eq!(weight.len(), s.weight_len());
    let mut out = vec![0.0; s.c_out * p];
    for (co, plane) in out.chunks_mut(p.max(1)).enumerate().take(s.c_out) {
        plane.iter_mut().for_each(|v| *v = bias[co]);
    }
    let cols = im2col(s, input, h, w, ho, wo);
    gemm_acc(s.c_out, kk, p, weight, (kk as isize, 1), &cols, (p as isize, 1), &mut out);
    (out, ho, wo)
}

/// Accumulates weight/bias gradients and, optionally, the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    s: &ConvShape,
    input: &[f64],
    h: usize,
    w: usize,
    weight: &[f64],
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    d_input: Option<&mut [f64]>,
) {
    let (ho, wo) = s.output_hw(h, w);
    let p = ho * wo;
    let kk = s.c_in * s.kernel * s.kernel;
    assert_eq!(d_out.len(), s.c_out * p);
    for co in 0..s.c_out {
        d_bias[co] += d_out[co * p..(co + 1) * p].iter().sum::<f64>();
    }
    let cols = im2col(s, input, h, w, ho, wo);
    // d_weight (c_out x kk) += d_out (c_out x p) * cols^T (p x kk)
    gemm_acc(s.c_out, p, kk, d_out, (p as isize, 1), &cols, (1, p as isize), d_weight);
    if let Some(di) = d_input {
        // d_cols (kk x p) = weight^T (kk x c_out) * d_out (c_out x p)
        let mut d_cols = vec![0.0; kk * p];
        gemm_acc(kk, s.c_out, p, weight, (1, kk as isize), d_out, (p as isize, 1), &mut d_cols);
        col2im_add(s, &d_cols, h, w, ho, wo, di);
    }
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `grad` where the post-activation output was not positive.
pub fn relu_backward_inplace(output: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `y = W x + b`, with `W` stored row-major as `(out, in)`.
pub fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            b + weight[o * n_in..(o + 1) * n_in]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f64>()
        })
        .collect()
}

pub fn linear_backward(
    x: &[f64],
    weight: &[f64],
    d_out: &[f64],
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    d_x: Option<&mut [f64]>,
) {
    let n_in = x.len();
    for (o, &g) in d_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        d_bias[o] += g;
        for (dw, &v) in d_weight[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
            *dw += g * v;
        }
    }
    if let Some(dx) = d_x {
        for (o, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (d, &wv) in dx.iter_mut().zip(&weight[o * n_in..(o + 1) * n_in]) {
                *d += g * wv;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Smooth-L1 with transition point `beta` (pure L1 when `beta == 0`).
pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Bilinear sample points shared by every channel of one ROI.
#[derive(Clone, Debug)]
pub struct RoiSampling {
    /// For each output bin, `(feature index, weight)` pairs over its samples.
    bins: Vec<Vec<(usize, f64)>>,
}

impl RoiSampling {
    /// Aligned ROI pooling: `out x out` bins, `ratio x ratio` samples per bin,
    /// pixel-center offset of one half.
    pub fn new(bbox: &BoundingBox, scale: f64, h: usize, w: usize, out: usize, ratio: usize) -> Self {
        let x0 = bbox.x1 * scale - 0.5;
        let y0 = bbox.y1 * scale - 0.5;
        let bw = (bbox.x2 - bbox.x1) * scale / out as f64;
        let bh = (bbox.y2 - bbox.y1) * scale / out as f64;
        let inv = 1.0 / (ratio * ratio) as f64;
        let mut bins = Vec::with_capacity(out * out);
        for by in 0..out {
            for bx in 0..out {
                let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4 * ratio * ratio);
                for sy in 0..ratio {
                    let y = y0 + (by as f64 + (sy as f64 + 0.5) / ratio as f64) * bh;
                    for sx in 0..ratio {
                        let x = x0 + (bx as f64 + (sx as f64 + 0.5) / ratio as f64) * bw;
                        bilinear_taps(y, x, h, w, inv, &mut taps);
                    }
                }
                bins.push(taps);
            }
        }
        Self { bins }
    }

    pub fn forward(&self, feat: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let nb = self.bins.len();
        let mut out = vec![0.0; c * nb];
        for ch in 0..c {
            let plane = &feat[ch * h * w..(ch + 1) * h * w];
            for (b, taps) in self.bins.iter().enumerate() {
                out[ch * nb + b] = taps.iter().map(|&(i, wt)| wt * plane[i]).sum();
            }
        }
        out
    }

    pub fn backward(&self, d_out: &[f64], c: usize, h: usize, w: usize, d_feat: &mut [f64]) {
        let nb = self.bins.len();
        for ch in 0..c {
            let plane = &mut d_feat[ch * h * w..(ch + 1) * h * w];
            for (b, taps) in self.bins.iter().enumerate() {
                let g = d_out[ch * nb + b];
                if g == 0.0 {
                    continue;
                }
                for &(i, wt) in taps {
                    plane[i] += wt * g;
                }
            }
        }
    }
}

fn bilinear_taps(mut y: f64, mut x: f64, h: usize, w: usize, scale: f64, taps: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    y = y.max(0.0);
    x = x.max(0.0);
    let mut yl = y.floor() as usize;
    let mut xl = x.floor() as usize;
    let yh;
    let xh;
    if yl >= h - 1 {
        yl = h - 1;
        yh = h - 1;
        y = yl as f64;
    } else {
        yh = yl + 1;
    }
    if xl >= w - 1 {
        xl = w - 1;
        xh = w - 1;
        x = xl as f64;
    } else {
        xh = xl + 1;
    }
    let (ly, lx) = (y - yl as f64, x - xl as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    taps.push((yl * w + xl, hy * hx * scale));
    taps.push((yl * w + xh, hy * lx * scale));
    taps.push((yh * w + xl, ly * hx * scale));
    taps.push((yh * w + xh, ly * lx * scale));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct definition of convolution, used as an oracle.
    fn conv_naive(s: &ConvShape, x: &[f64], h: usize, w: usize, wt: &[f64], b: &[f64]) -> Vec<f64> {
        let (ho, wo) = s.output_hw(h, w);
        let mut out = vec![0.0; s.c_out * ho * wo];
        for co in 0..s.c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..s.c_in {
                        for ky in 0..s.kernel {
                            for kx in 0..s.kernel {
                                let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                                let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt[((co * s.c_in + ci) * s.kernel + ky) * s.kernel + kx]
                                    * x[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad, k, h, w) in &[(1, 1, 3, 5, 7), (2, 1, 3, 9, 8), (1, 0, 3, 6, 6), (1, 0, 1, 4, 3), (2, 0, 3, 7, 7)] {
            let s = ConvShape { c_in: 2, c_out: 3, kernel: k, stride, pad };
            let x = rand_vec(&mut rng, 2 * h * w);
            let wt = rand_vec(&mut rng, s.weight_len());
            let b = rand_vec(&mut rng, 3);
            let (out, _, _) = conv2d_forward(&s, &x, h, w, &wt, &b);
            let expect = conv_naive(&s, &x, h, w, &wt, &b);
            for (a, e) in out.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = ConvShape { c_in: 2, c_out: 2, kernel: 3, stride: 2, pad: 1 };
        let (h, w) = (7, 6);
        let x = rand_vec(&mut rng, 2 * h * w);
        let wt = rand_vec(&mut rng, s.weight_len());
        let b = rand_vec(&mut rng, 2);
        let (out, _, _) = conv2d_forward(&s, &x, h, w, &wt, &b);
        let probe = rand_vec(&mut rng, out.len());
        let loss = |x: &[f64], wt: &[f64]| -> f64 {
            conv2d_forward(&s, x, h, w, wt, &b).0.iter().zip(&probe).map(|(a, p)| a * p).sum()
        };
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; 2];
        let mut dx = vec![0.0; x.len()];
        conv2d_backward(&s, &x, h, w, &wt, &probe, &mut dw, &mut db, Some(&mut dx));
        let eps = 1e-6;
        for i in 0..wt.len() {
            let mut p = wt.clone();
            p[i] += eps;
            let mut m = wt.clone();
            m[i] -= eps;
            let fd = (loss(&x, &p) - loss(&x, &m)) / (2.0 * eps);
            assert!((fd - dw[i]).abs() < 1e-7);
        }
        for i in 0..x.len() {
            let mut p = x.clone();
            p[i] += eps;
            let mut m = x.clone();
            m[i] -= eps;
            let fd = (loss(&p, &wt) - loss(&m, &wt)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() < 1e-7);
        }
        assert!((db[0] - probe[..out.len() / 2].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn roi_align_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h, w) = (2, 6, 7);
        let feat = rand_vec(&mut rng, c * h * w);
        let b = BoundingBox::new(3.0, 5.0, 40.0, 31.0).unwrap();
        let samp = RoiSampling::new(&b, 0.125, h, w, 3, 2);
        let out = samp.forward(&feat, c, h, w);
        let probe = rand_vec(&mut rng, out.len());
        let mut d = vec![0.0; feat.len()];
        samp.backward(&probe, c, h, w, &mut d);
        // <probe, A f> == <A^T probe, f>
        let lhs: f64 = out.iter().zip(&probe).map(|(a, b)| a * b).sum();
        let rhs: f64 = d.iter().zip(&feat).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn roi_align_constant_map() {
        let (c, h, w) = (1, 4, 4);
        let feat = vec![2.0; c * h * w];
        let b = BoundingBox::new(4.0, 4.0, 20.0, 20.0).unwrap();
        let out = RoiSampling::new(&b, 0.125, h, w, 2, 2).forward(&feat, c, h, w);
        assert!(out.iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn stable_elementwise_functions() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(1000.0).is_finite());
        assert_eq!(smooth_l1(0.5, 1.0), 0.125);
        assert_eq!(smooth_l1(2.0, 1.0), 1.5);
        assert_eq!(smooth_l1(-2.0, 0.0), 2.0);
        let p = softmax(&[1.0, 0.0]);
        assert!((p[0] - std::f64::consts::E / (std::f64::consts::E + 1.0)).abs() < 1e-12);
    }
}
