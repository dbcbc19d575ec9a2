//! VALID 2-D convolution over NHWC batches: forward, gradient w.r.t. the
//! input and gradient w.r.t. the filter.
//!
//! Two interchangeable implementations:
//! - `Naive`: direct nested loops, single context.
//! - `Optimized`: per-image im2col staging into a `(out_h*out_w) x (k_h*k_w*in_c)`
//!   patch matrix followed by the blocked GEMM, data-parallel over images.
//!
//! Weights are `[out_c, in_c, k_h, k_w]`; the GEMM path repacks them into a
//! `(k_h*k_w*in_c) x out_c` matrix whose row order matches the im2col columns.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gemm::{gemm_acc, GemmScratch, MatRef};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvShape, Layout, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConvImpl {
    Naive,
    #[default]
    Optimized,
}

impl std::fmt::Display for ConvImpl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ConvImpl::Naive => "NAIVE",
            ConvImpl::Optimized => "OPTIMIZED",
        })
    }
}

impl std::str::FromStr for ConvImpl {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "naive" => Ok(ConvImpl::Naive),
            "optimized" => Ok(ConvImpl::Optimized),
            other => Err(Error::invalid(format!("unknown conv impl {other:?}"))),
        }
    }
}

/// A convolution layer with owned parameters.
#[derive(Debug, Clone)]
pub struct ConvLayer<T> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub shape: ConvShape,
    pub impl_select: ConvImpl,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, shape: ConvShape, impl_select: ConvImpl) -> Result<Self> {
        shape.validate()?;
        check_params(&weights, &bias, &shape)?;
        Ok(ConvLayer {
            weights,
            bias,
            shape,
            impl_select,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.bound_shape(x)?;
        conv_forward(x, &self.weights, &self.bias, &shape, self.impl_select)
    }

    pub fn backward_data(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, ..] = grad_out.dims_nhwc()?;
        let shape = self.shape.with_batch(n);
        conv_backward_data(grad_out, &self.weights, &shape, self.impl_select)
    }

    pub fn backward_filter(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.bound_shape(x)?;
        conv_backward_filter(x, grad_out, &shape, self.impl_select)
    }

    fn bound_shape(&self, x: &Tensor<T>) -> Result<ConvShape> {
        let [n, ..] = x.dims_nhwc()?;
        Ok(self.shape.with_batch(n))
    }
}

fn check_params<T: Scalar>(w: &Tensor<T>, b: &Tensor<T>, shape: &ConvShape) -> Result<()> {
    if w.shape() != shape.weight_shape() {
        return Err(Error::shape(format!(
            "conv weights {:?} do not match {:?}",
            w.shape(),
            shape.weight_shape()
        )));
    }
    if b.shape() != [shape.out_c] {
        return Err(Error::shape(format!("conv bias {:?}, expected [{}]", b.shape(), shape.out_c)));
    }
    Ok(())
}

fn check_nhwc<T: Scalar>(t: &Tensor<T>, expect: [usize; 4], what: &str) -> Result<()> {
    if t.layout() != Layout::Nhwc || t.shape() != expect {
        return Err(Error::shape(format!(
            "{what}: got {:?} {}, expected NHWC {expect:?}",
            t.shape(),
            t.layout()
        )));
    }
    Ok(())
}

pub fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    shape: &ConvShape,
    imp: ConvImpl,
) -> Result<Tensor<T>> {
    shape.validate()?;
    check_params(w, b, shape)?;
    check_nhwc(x, shape.input_shape(), "conv input")?;
    if shape.stride != 1 {
        return Err(Error::invalid("only stride 1 is supported"));
    }
    let out = match imp {
        ConvImpl::Naive => naive::forward(x.data(), w.data(), b.data(), shape),
        ConvImpl::Optimized => optimized::forward(x.data(), w.data(), b.data(), shape),
    };
    Tensor::from_vec(&shape.output_shape(), Layout::Nhwc, out)
}

pub fn conv_backward_data<T: Scalar>(
    grad_out: &Tensor<T>,
    w: &Tensor<T>,
    shape: &ConvShape,
    imp: ConvImpl,
) -> Result<Tensor<T>> {
    shape.validate()?;
    if w.shape() != shape.weight_shape() {
        return Err(Error::shape(format!("conv weights {:?} vs {:?}", w.shape(), shape.weight_shape())));
    }
    check_nhwc(grad_out, shape.output_shape(), "conv grad_out")?;
    let gx = match imp {
        ConvImpl::Naive => naive::backward_data(grad_out.data(), w.data(), shape),
        ConvImpl::Optimized => optimized::backward_data(grad_out.data(), w.data(), shape),
    };
    Tensor::from_vec(&shape.input_shape(), Layout::Nhwc, gx)
}

/// Gradient w.r.t. the weights, `[out_c, in_c, k_h, k_w]` tagged NCHW.
pub fn conv_backward_filter<T: Scalar>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    shape: &ConvShape,
    imp: ConvImpl,
) -> Result<Tensor<T>> {
    shape.validate()?;
    check_nhwc(x, shape.input_shape(), "conv input")?;
    check_nhwc(grad_out, shape.output_shape(), "conv grad_out")?;
    let gw = match imp {
        ConvImpl::Naive => naive::backward_filter(x.data(), grad_out.data(), shape),
        ConvImpl::Optimized => optimized::backward_filter(x.data(), grad_out.data(), shape),
    };
    Tensor::from_vec(&shape.weight_shape(), Layout::Nchw, gw)
}

/// Bias gradient: sum of `grad_out` over batch and spatial positions.
pub fn conv_backward_bias<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, _, _, c] = grad_out.dims_nhwc()?;
    let mut gb = vec![T::zero(); c];
    for row in grad_out.data().chunks_exact(c) {
        for (acc, &g) in gb.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Tensor::from_vec(&[c], Layout::Flat, gb)
}

mod naive {
    use super::*;

    pub fn forward<T: Scalar>(x: &[T], w: &[T], b: &[T], s: &ConvShape) -> Vec<T> {
        let (oh, ow) = (s.out_h(), s.out_w());
        let mut out = vec![T::zero(); s.batch * oh * ow * s.out_c];
        for n in 0..s.batch {
            for i in 0..oh {
                for j in 0..ow {
                    for o in 0..s.out_c {
                        let mut acc = b[o];
                        for u in 0..s.k_h {
                            for v in 0..s.k_w {
                                for c in 0..s.in_c {
                                    let xi = ((n * s.in_h + i + u) * s.in_w + j + v) * s.in_c + c;
                                    let wi = ((o * s.in_c + c) * s.k_h + u) * s.k_w + v;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                        out[((n * oh + i) * ow + j) * s.out_c + o] = acc;
                    }
                }
            }
        }
        out
    }

    pub fn backward_data<T: Scalar>(g: &[T], w: &[T], s: &ConvShape) -> Vec<T> {
        let (oh, ow) = (s.out_h(), s.out_w());
        let mut gx = vec![T::zero(); s.batch * s.in_h * s.in_w * s.in_c];
        for n in 0..s.batch {
            for i in 0..oh {
                for j in 0..ow {
                    for o in 0..s.out_c {
                        let go = g[((n * oh + i) * ow + j) * s.out_c + o];
                        for u in 0..s.k_h {
                            for v in 0..s.k_w {
                                for c in 0..s.in_c {
                                    let xi = ((n * s.in_h + i + u) * s.in_w + j + v) * s.in_c + c;
                                    let wi = ((o * s.in_c + c) * s.k_h + u) * s.k_w + v;
                                    gx[xi] += go * w[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    /// Sums per image first, then across images: one running f32 sum over
    /// a whole 128-image batch drifts by more than 1e-5 relative.
    pub fn backward_filter<T: Scalar>(x: &[T], g: &[T], s: &ConvShape) -> Vec<T> {
        let (oh, ow) = (s.out_h(), s.out_w());
        let mut total = vec![T::zero(); s.out_c * s.in_c * s.k_h * s.k_w];
        let mut gw = total.clone();
        for n in 0..s.batch {
            gw.iter_mut().for_each(|v| *v = T::zero());
            for i in 0..oh {
                for j in 0..ow {
                    for o in 0..s.out_c {
                        let go = g[((n * oh + i) * ow + j) * s.out_c + o];
                        for u in 0..s.k_h {
                            for v in 0..s.k_w {
                                for c in 0..s.in_c {
                                    let xi = ((n * s.in_h + i + u) * s.in_w + j + v) * s.in_c + c;
                                    let wi = ((o * s.in_c + c) * s.k_h + u) * s.k_w + v;
                                    gw[wi] += go * x[xi];
                                }
                            }
                        }
                    }
                }
            }
            for (t, &v) in total.iter_mut().zip(&gw) {
                *t += v;
            }
        }
        total
    }
}

mod optimized {
    use super::*;

    /// Images per partial filter-gradient accumulator. Fixed so that the
    /// reduction order, and therefore the result bits, never depend on the
    /// number of worker threads.
    const FILTER_CHUNK: usize = 4;

    fn patch_len(s: &ConvShape) -> usize {
        s.k_h * s.k_w * s.in_c
    }

    /// `[out_c, in_c, k_h, k_w]` -> row-major `(k_h*k_w*in_c) x out_c`.
    fn weights_to_matrix<T: Scalar>(w: &[T], s: &ConvShape) -> Vec<T> {
        let k = patch_len(s);
        let mut m = vec![T::zero(); k * s.out_c];
        for o in 0..s.out_c {
            for c in 0..s.in_c {
                for u in 0..s.k_h {
                    for v in 0..s.k_w {
                        let row = (u * s.k_w + v) * s.in_c + c;
                        m[row * s.out_c + o] = w[((o * s.in_c + c) * s.k_h + u) * s.k_w + v];
                    }
                }
            }
        }
        m
    }

    fn matrix_to_weights<T: Scalar>(m: &[T], s: &ConvShape) -> Vec<T> {
        let mut w = vec![T::zero(); s.out_c * s.in_c * s.k_h * s.k_w];
        for o in 0..s.out_c {
            for c in 0..s.in_c {
                for u in 0..s.k_h {
                    for v in 0..s.k_w {
                        let row = (u * s.k_w + v) * s.in_c + c;
                        w[((o * s.in_c + c) * s.k_h + u) * s.k_w + v] = m[row * s.out_c + o];
                    }
                }
            }
        }
        w
    }

    /// One image `[in_h, in_w, in_c]` -> patch matrix `(out_h*out_w) x (k_h*k_w*in_c)`.
    /// With NHWC each kernel row `u` is one contiguous `k_w*in_c` run.
    fn im2col<T: Scalar>(img: &[T], s: &ConvShape, col: &mut [T]) {
        let (oh, ow) = (s.out_h(), s.out_w());
        let run = s.k_w * s.in_c;
        let k = patch_len(s);
        for i in 0..oh {
            for j in 0..ow {
                let dst = &mut col[(i * ow + j) * k..][..k];
                for u in 0..s.k_h {
                    let src = ((i + u) * s.in_w + j) * s.in_c;
                    dst[u * run..(u + 1) * run].copy_from_slice(&img[src..src + run]);
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(col: &[T], s: &ConvShape, img: &mut [T]) {
        let (oh, ow) = (s.out_h(), s.out_w());
        let run = s.k_w * s.in_c;
        let k = patch_len(s);
        for i in 0..oh {
            for j in 0..ow {
                let src = &col[(i * ow + j) * k..][..k];
                for u in 0..s.k_h {
                    let dst = ((i + u) * s.in_w + j) * s.in_c;
                    for (d, &v) in img[dst..dst + run].iter_mut().zip(&src[u * run..(u + 1) * run]) {
                        *d += v;
                    }
                }
            }
        }
    }

    struct Scratch<T> {
        col: Vec<T>,
        gemm: GemmScratch<T>,
    }

    fn scratch<T: Scalar>(s: &ConvShape) -> Scratch<T> {
        Scratch {
            col: vec![T::zero(); s.out_h() * s.out_w() * patch_len(s)],
            gemm: GemmScratch::new(),
        }
    }

    pub fn forward<T: Scalar>(x: &[T], w: &[T], b: &[T], s: &ConvShape) -> Vec<T> {
        let p = s.out_h() * s.out_w();
        let k = patch_len(s);
        let wm = weights_to_matrix(w, s);
        let img_len = s.in_h * s.in_w * s.in_c;
        let mut out = vec![T::zero(); s.batch * p * s.out_c];
        out.par_chunks_mut(p * s.out_c)
            .zip(x.par_chunks(img_len))
            .for_each_init(
                || scratch::<T>(s),
                |sc, (out_n, img)| {
                    for row in out_n.chunks_exact_mut(s.out_c) {
                        row.copy_from_slice(b);
                    }
                    im2col(img, s, &mut sc.col);
                    gemm_acc(
                        MatRef::row_major(&sc.col, p, k),
                        MatRef::row_major(&wm, k, s.out_c),
                        out_n,
                        s.out_c,
                        &mut sc.gemm,
                    );
                },
            );
        out
    }

    pub fn backward_data<T: Scalar>(g: &[T], w: &[T], s: &ConvShape) -> Vec<T> {
        let p = s.out_h() * s.out_w();
        let k = patch_len(s);
        let wm = weights_to_matrix(w, s);
        let img_len = s.in_h * s.in_w * s.in_c;
        let mut gx = vec![T::zero(); s.batch * img_len];
        gx.par_chunks_mut(img_len)
            .zip(g.par_chunks(p * s.out_c))
            .for_each_init(
                || scratch::<T>(s),
                |sc, (gx_n, g_n)| {
                    sc.col.iter_mut().for_each(|v| *v = T::zero());
                    gemm_acc(
                        MatRef::row_major(g_n, p, s.out_c),
                        MatRef::row_major(&wm, k, s.out_c).t(),
                        &mut sc.col,
                        k,
                        &mut sc.gemm,
                    );
                    col2im_add(&sc.col, s, gx_n);
                },
            );
        gx
    }

    pub fn backward_filter<T: Scalar>(x: &[T], g: &[T], s: &ConvShape) -> Vec<T> {
        let p = s.out_h() * s.out_w();
        let k = patch_len(s);
        let img_len = s.in_h * s.in_w * s.in_c;
        let partials: Vec<Vec<T>> = x
            .par_chunks(img_len * FILTER_CHUNK)
            .zip(g.par_chunks(p * s.out_c * FILTER_CHUNK))
            .map_init(
                || scratch::<T>(s),
                |sc, (xs, gs)| {
                    let mut acc = vec![T::zero(); k * s.out_c];
                    for (img, g_n) in xs.chunks(img_len).zip(gs.chunks(p * s.out_c)) {
                        im2col(img, s, &mut sc.col);
                        gemm_acc(
                            MatRef::row_major(&sc.col, p, k).t(),
                            MatRef::row_major(g_n, p, s.out_c),
                            &mut acc,
                            s.out_c,
                            &mut sc.gemm,
                        );
                    }
                    acc
                },
            )
            .collect();
        let mut total = vec![T::zero(); k * s.out_c];
        for part in &partials {
            for (t, &v) in total.iter_mut().zip(part) {
                *t += v;
            }
        }
        matrix_to_weights(&total, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], layout: Layout, rng: &mut impl Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, layout, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn max_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let scale = b.max_abs().max(1e-300);
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let s = ConvShape::new(1, (3, 3, 1), 1, (1, 1)).unwrap();
        let x = Tensor::<f32>::new(&[1, 3, 3, 1], Layout::Nhwc, 1.0).unwrap();
        let w = Tensor::<f32>::new(&[1, 1, 1, 1], Layout::Nchw, 2.0).unwrap();
        let b = Tensor::<f32>::zeros(&[1], Layout::Flat).unwrap();
        for imp in [ConvImpl::Naive, ConvImpl::Optimized] {
            let y = conv_forward(&x, &w, &b, &s, imp).unwrap();
            assert_eq!(y.shape(), &[1, 3, 3, 1]);
            assert!(y.data().iter().all(|&v| v == 2.0));
            let g = Tensor::<f32>::new(&[1, 3, 3, 1], Layout::Nhwc, 0.5).unwrap();
            let gx = conv_backward_data(&g, &w, &s, imp).unwrap();
            assert!(gx.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn filter_grad_hand_sums() {
        let s = ConvShape::new(1, (2, 2, 1), 1, (1, 1)).unwrap();
        let x = Tensor::<f64>::new(&[1, 2, 2, 1], Layout::Nhwc, 1.0).unwrap();
        let ones = Tensor::<f64>::new(&[1, 2, 2, 1], Layout::Nhwc, 1.0).unwrap();
        let zeros = Tensor::<f64>::zeros(&[1, 2, 2, 1], Layout::Nhwc).unwrap();
        for imp in [ConvImpl::Naive, ConvImpl::Optimized] {
            assert_eq!(conv_backward_filter(&x, &ones, &s, imp).unwrap().data(), &[4.0]);
            assert_eq!(conv_backward_filter(&x, &zeros, &s, imp).unwrap().data(), &[0.0]);
        }
        assert_eq!(conv_backward_bias(&ones).unwrap().data(), &[4.0]);
    }

    #[test]
    fn shape_mismatch_errors() {
        let s = ConvShape::new(1, (4, 4, 2), 3, (3, 3)).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 1], Layout::Nhwc).unwrap();
        let w = Tensor::<f32>::zeros(&[3, 2, 3, 3], Layout::Nchw).unwrap();
        let b = Tensor::<f32>::zeros(&[3], Layout::Flat).unwrap();
        assert!(conv_forward(&x, &w, &b, &s, ConvImpl::Naive).is_err());
        let bad_b = Tensor::<f32>::zeros(&[2], Layout::Flat).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 2], Layout::Nhwc).unwrap();
        assert!(conv_forward(&x, &w, &bad_b, &s, ConvImpl::Optimized).is_err());
        let g = Tensor::<f32>::zeros(&[1, 3, 3, 3], Layout::Nhwc).unwrap();
        assert!(conv_backward_data(&g, &w, &s, ConvImpl::Naive).is_err());
        let xn = x.convert_layout(Layout::Nchw).unwrap();
        assert!(conv_forward(&xn, &w, &b, &s, ConvImpl::Naive).is_err());
    }

    #[test]
    fn implementations_agree_f64() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for n in [1, 5, 9] {
            let s = ConvShape::new(n, (7, 6, 3), 5, (3, 2)).unwrap();
            let x = random(&s.input_shape(), Layout::Nhwc, &mut rng);
            let w = random(&s.weight_shape(), Layout::Nchw, &mut rng);
            let b = random(&[5], Layout::Flat, &mut rng);
            let g = random(&s.output_shape(), Layout::Nhwc, &mut rng);
            let f = |imp| conv_forward(&x, &w, &b, &s, imp).unwrap();
            assert!(max_rel(&f(ConvImpl::Optimized), &f(ConvImpl::Naive)) < 1e-12);
            let d = |imp| conv_backward_data(&g, &w, &s, imp).unwrap();
            assert!(max_rel(&d(ConvImpl::Optimized), &d(ConvImpl::Naive)) < 1e-12);
            let fl = |imp| conv_backward_filter(&x, &g, &s, imp).unwrap();
            assert!(max_rel(&fl(ConvImpl::Optimized), &fl(ConvImpl::Naive)) < 1e-12);
        }
    }

    /// Scalar loss `L = sum(grad_out . conv(x))`; its derivatives are exactly
    /// the backward ops, checked by central differences.
    #[test]
    fn backward_ops_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let h = 1e-5;
        for trial in 0..5 {
            let s = ConvShape::new(2, (6, 6, 3), 4, (3, 3)).unwrap();
            let x = random(&s.input_shape(), Layout::Nhwc, &mut rng);
            let w = random(&s.weight_shape(), Layout::Nchw, &mut rng);
            let b = random(&[4], Layout::Flat, &mut rng);
            let g = random(&s.output_shape(), Layout::Nhwc, &mut rng);
            let imp = if trial % 2 == 0 { ConvImpl::Naive } else { ConvImpl::Optimized };
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>| {
                Tensor::dot(&conv_forward(x, w, &b, &s, imp).unwrap(), &g).unwrap()
            };

            let gx = conv_backward_data(&g, &w, &s, imp).unwrap();
            let mut fd = gx.clone();
            for i in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[i] += h;
                xm.data_mut()[i] -= h;
                fd.data_mut()[i] = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            }
            assert!(max_rel(&gx, &fd) <= 1e-6, "bwd data trial {trial}: {}", max_rel(&gx, &fd));

            let gw = conv_backward_filter(&x, &g, &s, imp).unwrap();
            let mut fd = gw.clone();
            for i in 0..w.len() {
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp.data_mut()[i] += h;
                wm.data_mut()[i] -= h;
                fd.data_mut()[i] = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            }
            assert!(max_rel(&gw, &fd) <= 1e-6, "bwd filter trial {trial}: {}", max_rel(&gw, &fd));
        }
    }
}
