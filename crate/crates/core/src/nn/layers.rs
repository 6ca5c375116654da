use super::{Real, Tensor};
use crate::error::{Error, Result};

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Saved forward state of a convolution, reused by the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    /// im2col matrix, `(C·kh·kw) × (B·OH·OW)`.
    cols: Vec<T>,
    in_shape: [usize; 4],
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
    out_hw: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    /// `None` when the caller asked to skip the input gradient.
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct FcGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    [b, c, h, w]: [usize; 4],
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    cols: &mut [T],
) {
    let n = b * oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((ci * kh + ky) * kw + kx) * n..][..n];
                for bi in 0..b {
                    let plane = &x[(bi * c + ci) * h * w..][..h * w];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let dst = &mut row[(bi * oh + oy) * ow..][..ow];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    [b, c, h, w]: [usize; 4],
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    x: &mut [T],
) {
    let n = b * oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ci * kh + ky) * kw + kx) * n..][..n];
                for bi in 0..b {
                    let plane = &mut x[(bi * c + ci) * h * w..][..h * w];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &row[(bi * oh + oy) * ow..][..ow];
                        let dst = &mut plane[iy as usize * w..][..w];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] = dst[ix as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2D convolution. `input` is `[B, C, H, W]`, `weight` is `[O, C, kh, kw]`,
/// `bias` is `[O]`; the output is `[B, O, OH, OW]`.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    input.expect_rank("conv input", 4)?;
    weight.expect_rank("conv weight", 4)?;
    let [b, c, h, w]: [usize; 4] = input.shape().try_into().unwrap();
    let [o, wc, kh, kw]: [usize; 4] = weight.shape().try_into().unwrap();
    if wc != c {
        return Err(Error::ShapeMismatch {
            operand: "conv weight".into(),
            expected: vec![o, c, kh, kw],
            got: weight.shape().to_vec(),
        });
    }
    bias.expect_shape("conv bias", &[o])?;
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::ShapeMismatch {
            operand: "conv input (too small for kernel)".into(),
            expected: vec![b, c, kh, kw],
            got: input.shape().to_vec(),
        });
    }
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let k = c * kh * kw;
    let n = b * oh * ow;

    let mut cols = vec![T::zero(); k * n];
    im2col(input.data(), [b, c, h, w], (kh, kw), stride, pad, (oh, ow), &mut cols);

    let mut mat = vec![T::zero(); o * n];
    T::gemm(o, k, n, T::one(), weight.data(), false, &cols, false, T::zero(), &mut mat);

    let plane = oh * ow;
    let mut out = Tensor::zeros(&[b, o, oh, ow]);
    let od = out.data_mut();
    for oi in 0..o {
        let bv = bias.data()[oi];
        for bi in 0..b {
            let src = &mat[oi * n + bi * plane..][..plane];
            let dst = &mut od[(bi * o + oi) * plane..][..plane];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bv;
            }
        }
    }
    let cache = ConvCache {
        cols,
        in_shape: [b, c, h, w],
        kernel: (kh, kw),
        stride,
        pad,
        out_hw: (oh, ow),
    };
    Ok((out, cache))
}

pub fn conv2d_backward<T: Real>(
    weight: &Tensor<T>,
    cache: &ConvCache<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let [b, c, h, w] = cache.in_shape;
    let (kh, kw) = cache.kernel;
    let (oh, ow) = cache.out_hw;
    let o = weight.shape()[0];
    grad_out.expect_shape("conv grad_out", &[b, o, oh, ow])?;
    let k = c * kh * kw;
    let n = b * oh * ow;
    let plane = oh * ow;

    let mut gmat = vec![T::zero(); o * n];
    let gd = grad_out.data();
    for oi in 0..o {
        for bi in 0..b {
            gmat[oi * n + bi * plane..][..plane]
                .copy_from_slice(&gd[(bi * o + oi) * plane..][..plane]);
        }
    }

    let mut gb = Tensor::zeros(&[o]);
    for (oi, g) in gb.data_mut().iter_mut().enumerate() {
        let s: f64 = gmat[oi * n..][..n].iter().map(|v| v.as_f64()).sum();
        *g = T::of_f64(s);
    }

    let mut gw = Tensor::zeros(weight.shape());
    T::gemm(o, n, k, T::one(), &gmat, false, &cache.cols, true, T::zero(), gw.data_mut());

    let input = if need_input_grad {
        let mut gcols = vec![T::zero(); k * n];
        T::gemm(k, o, n, T::one(), weight.data(), true, &gmat, false, T::zero(), &mut gcols);
        let mut gi = Tensor::zeros(&[b, c, h, w]);
        col2im(&gcols, [b, c, h, w], (kh, kw), cache.stride, cache.pad, (oh, ow), gi.data_mut());
        Some(gi)
    } else {
        None
    };
    Ok(ConvGrads {
        input,
        weight: gw,
        bias: gb,
    })
}

/// Fully-connected layer: `input [B, I]`, `weight [O, I]`, `bias [O]` → `[B, O]`.
pub fn fc_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    input.expect_rank("fc input", 2)?;
    weight.expect_rank("fc weight", 2)?;
    let (b, i) = (input.shape()[0], input.shape()[1]);
    let o = weight.shape()[0];
    weight.expect_shape("fc weight", &[o, i])?;
    bias.expect_shape("fc bias", &[o])?;
    let mut out = Tensor::zeros(&[b, o]);
    for row in out.data_mut().chunks_exact_mut(o) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(b, i, o, T::one(), input.data(), false, weight.data(), true, T::one(), out.data_mut());
    Ok(out)
}

pub fn fc_backward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<FcGrads<T>> {
    let (b, i) = (input.shape()[0], input.shape()[1]);
    let o = weight.shape()[0];
    grad_out.expect_shape("fc grad_out", &[b, o])?;
    let mut gx = Tensor::zeros(&[b, i]);
    T::gemm(b, o, i, T::one(), grad_out.data(), false, weight.data(), false, T::zero(), gx.data_mut());
    let mut gw = Tensor::zeros(&[o, i]);
    T::gemm(o, b, i, T::one(), grad_out.data(), true, input.data(), false, T::zero(), gw.data_mut());
    let mut gb = Tensor::zeros(&[o]);
    for (oi, g) in gb.data_mut().iter_mut().enumerate() {
        let s: f64 = (0..b).map(|bi| grad_out.data()[bi * o + oi].as_f64()).sum();
        *g = T::of_f64(s);
    }
    Ok(FcGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

/// ELU with α = 1.
pub fn elu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { v.exp_m1() })
        .collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

/// Gradient of ELU given its output `y`: 1 for positive inputs, `y + 1` otherwise.
pub fn elu_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape("elu grad_out", y.shape())?;
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&yv, &g)| if yv > T::zero() { g } else { g * (yv + T::one()) })
        .collect();
    Tensor::from_vec(y.shape(), data)
}

/// Mean softmax cross-entropy over the batch. Returns the loss and the
/// softmax probabilities `[B, C]`.
pub fn softmax_xent_forward<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    logits.expect_rank("logits", 2)?;
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            operand: "labels".into(),
            expected: vec![b],
            got: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::ShapeMismatch {
            operand: "labels (class index out of range)".into(),
            expected: vec![c],
            got: vec![bad],
        });
    }
    let mut probs = Tensor::zeros(&[b, c]);
    let mut loss = 0.0f64;
    for (bi, (row, out)) in logits
        .data()
        .chunks_exact(c)
        .zip(probs.data_mut().chunks_exact_mut(c))
        .enumerate()
    {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut z = 0.0f64;
        for &v in row {
            z += (v.as_f64() - max).exp();
        }
        let log_z = z.ln() + max;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = T::of_f64((v.as_f64() - log_z).exp());
        }
        loss -= row[labels[bi]].as_f64() - log_z;
    }
    Ok((loss / b as f64, probs))
}

/// Gradient of the mean cross-entropy with respect to the logits.
pub fn softmax_xent_backward<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Tensor<T> {
    let (b, c) = (probs.shape()[0], probs.shape()[1]);
    let inv_b = T::of_f64(1.0 / b as f64);
    let mut g = probs.clone();
    for (bi, row) in g.data_mut().chunks_exact_mut(c).enumerate() {
        row[labels[bi]] = row[labels[bi]] - T::one();
        for v in row.iter_mut() {
            *v = *v * inv_b;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn elu_definition() {
        let x = Tensor::from_vec(&[3], vec![0.0f64, 2.5, -1.0]).unwrap();
        let y = elu_forward(&x);
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[1], 2.5);
        assert!((y.data()[2] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::<f64>::zeros(&[4, 400]);
        let (loss, probs) = softmax_xent_forward(&logits, &[0, 5, 399, 17]).unwrap();
        assert!((loss - 400f64.ln()).abs() < 1e-12);
        assert!(probs.data().iter().all(|&p| (p - 1.0 / 400.0).abs() < 1e-15));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 3, 7, 6], &mut rng);
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let (y, _) = conv2d_forward(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 3]);
        let xd = |bi: usize, c: usize, iy: isize, ix: isize| {
            if iy < 0 || ix < 0 || iy >= 7 || ix >= 6 {
                0.0
            } else {
                x.data()[((bi * 3 + c) * 7 + iy as usize) * 6 + ix as usize]
            }
        };
        for bi in 0..2 {
            for o in 0..4 {
                for oy in 0..4 {
                    for ox in 0..3 {
                        let mut s = b.data()[o];
                        for c in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    s += w.data()[((o * 3 + c) * 3 + ky) * 3 + kx]
                                        * xd(bi, c, (oy * 2 + ky) as isize - 1, (ox * 2 + kx) as isize - 1);
                                }
                            }
                        }
                        let got = y.data()[((bi * 4 + o) * 4 + oy) * 3 + ox];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_names_operand() {
        let x = Tensor::<f32>::zeros(&[2, 5]);
        let w = Tensor::<f32>::zeros(&[3, 4]);
        let b = Tensor::<f32>::zeros(&[3]);
        let err = fc_forward(&x, &w, &b).unwrap_err();
        assert!(err.to_string().contains("fc weight"), "{err}");
        let err = conv2d_forward(
            &Tensor::<f32>::zeros(&[1, 2, 8, 8]),
            &Tensor::<f32>::zeros(&[4, 3, 3, 3]),
            &Tensor::<f32>::zeros(&[4]),
            1,
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("conv weight"), "{err}");
    }
}
