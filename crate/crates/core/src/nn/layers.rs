//! Non-convolution layers: ReLU, 2x2 max pooling, dense, softmax.

use super::gemm::{gemm_acc, GemmScratch, MatRef};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Layout, Tensor};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Passes gradient where the forward *output* was positive.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != grad_out.shape() {
        return Err(Error::shape(format!("relu backward: {:?} vs {:?}", y.shape(), grad_out.shape())));
    }
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&yv, &g)| if yv > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(grad_out.shape(), grad_out.layout(), data)
}

/// Output of a 2x2/stride-2 max pool; `argmax[k]` is the flat input index
/// selected for output element `k`.
#[derive(Debug, Clone)]
pub struct PoolOutput<T> {
    pub out: Tensor<T>,
    pub argmax: Vec<usize>,
}

pub fn pool_out_dim(d: usize) -> usize {
    d / 2
}

/// 2x2 stride-2 max pooling over NHWC. Odd trailing rows/columns are dropped;
/// ties resolve to the first cell in row-major window order.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>) -> Result<PoolOutput<T>> {
    if x.layout() != Layout::Nhwc {
        return Err(Error::Layout("maxpool expects NHWC".into()));
    }
    let [n, h, w, c] = x.dims_nhwc()?;
    let (oh, ow) = (pool_out_dim(h), pool_out_dim(w));
    if oh == 0 || ow == 0 {
        return Err(Error::shape(format!("maxpool input {h}x{w} too small")));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for ni in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ci in 0..c {
                    let mut best = usize::MAX;
                    for (du, dv) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ((ni * h + 2 * i + du) * w + 2 * j + dv) * c + ci;
                        if best == usize::MAX || src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok(PoolOutput {
        out: Tensor::from_vec(&[n, oh, ow, c], Layout::Nhwc, out)?,
        argmax,
    })
}

pub fn maxpool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape(format!(
            "maxpool backward: {} argmax entries for {} gradients",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut gx = Tensor::zeros(input_shape, Layout::Nhwc)?;
    let buf = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        buf[idx] += g;
    }
    Ok(gx)
}

/// `y = x W^T + b` with `x: [B, in]`, `W: [out, in]`, `b: [out]`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, fan_in, fan_out) = dense_dims(x, w, b)?;
    let mut y = Vec::with_capacity(batch * fan_out);
    for _ in 0..batch {
        y.extend_from_slice(b.data());
    }
    gemm_acc(
        MatRef::row_major(x.data(), batch, fan_in),
        MatRef::row_major(w.data(), fan_out, fan_in).t(),
        &mut y,
        fan_out,
        &mut GemmScratch::new(),
    );
    Tensor::from_vec(&[batch, fan_out], Layout::Flat, y)
}

pub struct DenseGrads<T> {
    pub grad_x: Tensor<T>,
    pub grad_w: Tensor<T>,
    pub grad_b: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    grad_y: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (batch, fan_in, fan_out) = dense_dims(x, w, b)?;
    if grad_y.shape() != [batch, fan_out] {
        return Err(Error::shape(format!("dense grad {:?}, expected [{batch}, {fan_out}]", grad_y.shape())));
    }
    let mut scratch = GemmScratch::new();
    let gy = MatRef::row_major(grad_y.data(), batch, fan_out);
    let mut gx = vec![T::zero(); batch * fan_in];
    gemm_acc(gy, MatRef::row_major(w.data(), fan_out, fan_in), &mut gx, fan_in, &mut scratch);
    let mut gw = vec![T::zero(); fan_out * fan_in];
    gemm_acc(gy.t(), MatRef::row_major(x.data(), batch, fan_in), &mut gw, fan_in, &mut scratch);
    let mut gb = vec![T::zero(); fan_out];
    for row in grad_y.data().chunks_exact(fan_out) {
        for (acc, &g) in gb.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(DenseGrads {
        grad_x: Tensor::from_vec(&[batch, fan_in], Layout::Flat, gx)?,
        grad_w: Tensor::from_vec(&[fan_out, fan_in], Layout::Flat, gw)?,
        grad_b: Tensor::from_vec(&[fan_out], Layout::Flat, gb)?,
    })
}

fn dense_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match (x.shape(), w.shape(), b.shape()) {
        (&[batch, fi], &[fo, fi2], &[fo2]) if fi == fi2 && fo == fo2 => Ok((batch, fi, fo)),
        _ => Err(Error::shape(format!(
            "dense: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ))),
    }
}

/// Row-wise softmax of `[B, k]` logits, stabilized by subtracting the row max.
/// Row-wise softmax. Entries are floored at the smallest positive normal
/// value, so a probability is never exactly zero even when the logits of a
/// diverging net are far apart.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, k] = logits.shape() else {
        return Err(Error::shape(format!("softmax expects [B, k], got {:?}", logits.shape())));
    };
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let start = out.len();
        let mut total = T::zero();
        for &z in row {
            let e = (z - m).exp();
            total += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p = (*p / total).max(T::min_positive_value());
        }
    }
    Tensor::from_vec(logits.shape(), Layout::Flat, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn softmax_stays_positive_far_apart() {
        let z = Tensor::<f32>::from_vec(&[1, 3], Layout::Flat, vec![0.0, 200.0, -500.0]).unwrap();
        let p = softmax(&z).unwrap();
        assert!(p.data().iter().all(|&v| v > 0.0));
        assert_eq!(p.data()[1], 1.0);
    }

    #[test]
    fn maxpool_picks_max_and_routes_grad() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 2, 1], Layout::Nhwc, vec![1., 2., 3., 4.]).unwrap();
        let p = maxpool_forward(&x).unwrap();
        assert_eq!(p.out.data(), &[4.0]);
        let g = Tensor::<f64>::from_vec(&[1, 1, 1, 1], Layout::Nhwc, vec![5.0]).unwrap();
        let gx = maxpool_backward(x.shape(), &p.argmax, &g).unwrap();
        assert_eq!(gx.data(), &[0., 0., 0., 5.]);
    }

    #[test]
    fn maxpool_drops_odd_edge() {
        let x = Tensor::<f32>::new(&[2, 5, 3, 2], Layout::Nhwc, 1.0).unwrap();
        let p = maxpool_forward(&x).unwrap();
        assert_eq!(p.out.shape(), &[2, 2, 1, 2]);
        let x = Tensor::<f32>::new(&[1, 1, 4, 1], Layout::Nhwc, 1.0).unwrap();
        assert!(maxpool_forward(&x).is_err());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let z = Tensor::<f64>::from_vec(&[1, 3], Layout::Flat, vec![2.0, 2.0, 2.0]).unwrap();
        let p = softmax(&z).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let z = Tensor::<f32>::from_vec(&[1, 2], Layout::Flat, vec![1000.0, 0.0]).unwrap();
        let p = softmax(&z).unwrap();
        assert!(p.is_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn relu_forward_backward() {
        let x = Tensor::<f64>::from_vec(&[3], Layout::Flat, vec![-1., 0., 2.]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0., 0., 2.]);
        let g = Tensor::<f64>::new(&[3], Layout::Flat, 1.0).unwrap();
        assert_eq!(relu_backward(&y, &g).unwrap().data(), &[0., 0., 1.]);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let h = 1e-5;
        for _ in 0..5 {
            let (batch, fi, fo) = (3, 7, 4);
            let mut rnd = |shape: &[usize]| {
                let len = shape.iter().product();
                Tensor::<f64>::from_vec(shape, Layout::Flat, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap()
            };
            let x = rnd(&[batch, fi]);
            let w = rnd(&[fo, fi]);
            let b = rnd(&[fo]);
            let gy = rnd(&[batch, fo]);
            let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
                Tensor::dot(&dense_forward(x, w, b).unwrap(), &gy).unwrap()
            };
            let grads = dense_backward(&x, &w, &b, &gy).unwrap();
            let check = |analytic: &Tensor<f64>, which: usize| {
                let mut worst: f64 = 0.0;
                for i in 0..analytic.len() {
                    let mut args = [x.clone(), w.clone(), b.clone()];
                    args[which].data_mut()[i] += h;
                    let up = loss(&args[0], &args[1], &args[2]);
                    args[which].data_mut()[i] -= 2.0 * h;
                    let down = loss(&args[0], &args[1], &args[2]);
                    let fd = (up - down) / (2.0 * h);
                    worst = worst.max((fd - analytic.data()[i]).abs());
                }
                worst / analytic.max_abs()
            };
            assert!(check(&grads.grad_x, 0) <= 1e-6);
            assert!(check(&grads.grad_w, 1) <= 1e-6);
            assert!(check(&grads.grad_b, 2) <= 1e-6);
        }
    }
}
