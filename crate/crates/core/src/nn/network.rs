//! Policy/value network: a convolutional trunk, a dense hidden layer, and two
//! heads (softmax policy over actions, scalar value).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{conv_backward_bias, conv_backward_data, conv_backward_filter, conv_forward, ConvImpl};
use super::layers::{
    dense_backward, dense_forward, maxpool_backward, maxpool_forward, pool_out_dim, relu_backward,
    relu_forward, softmax,
};
use super::params::{ModelParams, ParamSet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvShape, Layout, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv { out_c: usize, kernel: usize },
    Relu,
    MaxPool,
    Dense { units: usize },
}

/// JSON-serializable architecture descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// `[h, w, c]` of one input state.
    pub input: [usize; 3],
    pub n_actions: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub conv_impl: ConvImpl,
}

impl NetworkSpec {
    /// Four VALID convs with 2x2 pooling after the first three; on an 84x84
    /// input the spatial chain is 84/80/40/36/18/14/7/5.
    pub fn atari(input: [usize; 3], n_actions: usize) -> Self {
        use LayerSpec::*;
        NetworkSpec {
            input,
            n_actions,
            layers: vec![
                Conv { out_c: 32, kernel: 5 },
                Relu,
                MaxPool,
                Conv { out_c: 32, kernel: 5 },
                Relu,
                MaxPool,
                Conv { out_c: 64, kernel: 5 },
                Relu,
                MaxPool,
                Conv { out_c: 64, kernel: 3 },
                Relu,
                Dense { units: 512 },
                Relu,
            ],
            conv_impl: ConvImpl::Optimized,
        }
    }

    /// Small trunk for the built-in grid games. A single pool keeps object
    /// positions resolved to two pixels; on 24x24 the chain is 24/22/11/9.
    pub fn toy(input: [usize; 3], n_actions: usize) -> Self {
        use LayerSpec::*;
        NetworkSpec {
            input,
            n_actions,
            layers: vec![
                Conv { out_c: 8, kernel: 3 },
                Relu,
                MaxPool,
                Conv { out_c: 16, kernel: 3 },
                Relu,
                Dense { units: 64 },
                Relu,
            ],
            conv_impl: ConvImpl::Optimized,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Conv { idx: usize, shape: ConvShape },
    Relu,
    MaxPool,
    Flatten { features: usize },
    Dense { idx: usize, fan_in: usize, fan_out: usize },
}

#[derive(Debug, Clone, Copy)]
enum Act {
    Spatial([usize; 3]),
    Flat(usize),
}

fn compile(spec: &NetworkSpec) -> Result<(Vec<Op>, usize)> {
    if spec.n_actions < 2 {
        return Err(Error::invalid("network needs at least 2 actions"));
    }
    if spec.input.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("input extents {:?}", spec.input)));
    }
    let mut ops = Vec::new();
    let mut act = Act::Spatial(spec.input);
    let (mut n_conv, mut n_dense) = (0, 0);
    for layer in &spec.layers {
        match (*layer, act) {
            (LayerSpec::Conv { out_c, kernel }, Act::Spatial([h, w, c])) => {
                let shape = ConvShape::new(1, (h, w, c), out_c, (kernel, kernel))?;
                act = Act::Spatial([shape.out_h(), shape.out_w(), out_c]);
                ops.push(Op::Conv { idx: n_conv, shape });
                n_conv += 1;
            }
            (LayerSpec::Conv { .. }, Act::Flat(_)) => {
                return Err(Error::shape("conv layer after dense layer"));
            }
            (LayerSpec::Relu, _) => ops.push(Op::Relu),
            (LayerSpec::MaxPool, Act::Spatial([h, w, c])) => {
                let (oh, ow) = (pool_out_dim(h), pool_out_dim(w));
                if oh == 0 || ow == 0 {
                    return Err(Error::shape(format!("cannot pool {h}x{w}")));
                }
                act = Act::Spatial([oh, ow, c]);
                ops.push(Op::MaxPool);
            }
            (LayerSpec::MaxPool, Act::Flat(_)) => return Err(Error::shape("pool after dense layer")),
            (LayerSpec::Dense { units }, a) => {
                let fan_in = match a {
                    Act::Spatial([h, w, c]) => {
                        ops.push(Op::Flatten { features: h * w * c });
                        h * w * c
                    }
                    Act::Flat(f) => f,
                };
                if units == 0 {
                    return Err(Error::shape("dense layer with zero units"));
                }
                ops.push(Op::Dense {
                    idx: n_dense,
                    fan_in,
                    fan_out: units,
                });
                n_dense += 1;
                act = Act::Flat(units);
            }
        }
    }
    let features = match act {
        Act::Spatial([h, w, c]) => {
            ops.push(Op::Flatten { features: h * w * c });
            h * w * c
        }
        Act::Flat(f) => f,
    };
    Ok((ops, features))
}

fn conv_names(idx: usize) -> (String, String) {
    (format!("conv{idx}.w"), format!("conv{idx}.b"))
}

fn dense_names(idx: usize) -> (String, String) {
    (format!("fc{idx}.w"), format!("fc{idx}.b"))
}

const POLICY_W: &str = "policy.w";
const POLICY_B: &str = "policy.b";
const VALUE_W: &str = "value.w";
const VALUE_B: &str = "value.b";

/// Intermediate values retained for the backward pass.
pub struct ForwardCache<T> {
    /// `inputs[i]` is the input of op `i`.
    inputs: Vec<Tensor<T>>,
    /// Output of op `i` when it is a ReLU, argmax for pools.
    relu_out: Vec<Option<Tensor<T>>>,
    pool_argmax: Vec<Option<Vec<usize>>>,
    features: Tensor<T>,
    pub logits: Tensor<T>,
    pub policy: Tensor<T>,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetworkSpec,
    ops: Vec<Op>,
    features: usize,
    pub params: ModelParams<T>,
}

fn uniform_init<T: Scalar>(shape: &[usize], layout: Layout, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::from_f64_lossy(rng.gen_range(-limit..limit))).collect();
    Tensor::from_vec(shape, layout, data)
}

impl<T: Scalar> Network<T> {
    /// Builds the network with uniform `±sqrt(6/(fan_in+fan_out))` weights and zero biases.
    pub fn new(spec: NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        let (ops, features) = compile(&spec)?;
        let mut p = ParamSet::new();
        for op in &ops {
            match op {
                Op::Conv { idx, shape } => {
                    let (wn, bn) = conv_names(*idx);
                    let k = shape.k_h * shape.k_w;
                    let w = uniform_init(&shape.weight_shape(), Layout::Nchw, shape.in_c * k, shape.out_c * k, rng)?;
                    p.insert(wn, w)?;
                    p.insert(bn, Tensor::zeros(&[shape.out_c], Layout::Flat)?)?;
                }
                Op::Dense { idx, fan_in, fan_out } => {
                    let (wn, bn) = dense_names(*idx);
                    p.insert(wn, uniform_init(&[*fan_out, *fan_in], Layout::Flat, *fan_in, *fan_out, rng)?)?;
                    p.insert(bn, Tensor::zeros(&[*fan_out], Layout::Flat)?)?;
                }
                _ => {}
            }
        }
        let a = spec.n_actions;
        p.insert(POLICY_W, uniform_init(&[a, features], Layout::Flat, features, a, rng)?)?;
        p.insert(POLICY_B, Tensor::zeros(&[a], Layout::Flat)?)?;
        p.insert(VALUE_W, uniform_init(&[1, features], Layout::Flat, features, 1, rng)?)?;
        p.insert(VALUE_B, Tensor::zeros(&[1], Layout::Flat)?)?;
        Ok(Network {
            spec,
            ops,
            features,
            params: ModelParams::new(p),
        })
    }

    /// Attaches existing parameters; shapes are checked against the layer list.
    pub fn from_params(spec: NetworkSpec, params: ModelParams<T>) -> Result<Self> {
        let (ops, features) = compile(&spec)?;
        let net = Network {
            spec,
            ops,
            features,
            params,
        };
        let reference = Network::<T>::new(net.spec.clone(), &mut rand::rngs::mock::StepRng::new(0, 1))?;
        reference.params.tensors.check_matches(&net.params.tensors)?;
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn n_actions(&self) -> usize {
        self.spec.n_actions
    }

    pub fn set_conv_impl(&mut self, imp: ConvImpl) {
        self.spec.conv_impl = imp;
    }

    fn p(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("parameter {name} is not initialized")))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let [n, h, w, c] = x.dims_nhwc()?;
        if x.layout() != Layout::Nhwc || [h, w, c] != self.spec.input {
            return Err(Error::shape(format!(
                "network input {:?} {}, expected NHWC [B, {:?}]",
                x.shape(),
                x.layout(),
                self.spec.input
            )));
        }
        Ok(n)
    }

    /// Policy rows `[B, n_actions]` and values `[B]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let cache = self.forward_cached(x)?;
        Ok((cache.policy, cache.value))
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<ForwardCache<T>> {
        let batch = self.check_input(x)?;
        let imp = self.spec.conv_impl;
        let mut inputs = Vec::with_capacity(self.ops.len());
        let mut relu_out = Vec::with_capacity(self.ops.len());
        let mut pool_argmax = Vec::with_capacity(self.ops.len());
        let mut cur = x.clone();
        for op in &self.ops {
            let mut r = None;
            let mut am = None;
            let next = match op {
                Op::Conv { idx, shape } => {
                    let (wn, bn) = conv_names(*idx);
                    conv_forward(&cur, self.p(&wn)?, self.p(&bn)?, &shape.with_batch(batch), imp)?
                }
                Op::Relu => {
                    let y = relu_forward(&cur);
                    r = Some(y.clone());
                    y
                }
                Op::MaxPool => {
                    let out = maxpool_forward(&cur)?;
                    am = Some(out.argmax);
                    out.out
                }
                Op::Flatten { features } => cur.clone().reshape(&[batch, *features], Layout::Flat)?,
                Op::Dense { idx, .. } => {
                    let (wn, bn) = dense_names(*idx);
                    dense_forward(&cur, self.p(&wn)?, self.p(&bn)?)?
                }
            };
            inputs.push(std::mem::replace(&mut cur, next));
            relu_out.push(r);
            pool_argmax.push(am);
        }
        let features = cur;
        let logits = dense_forward(&features, self.p(POLICY_W)?, self.p(POLICY_B)?)?;
        let policy = softmax(&logits)?;
        let value = dense_forward(&features, self.p(VALUE_W)?, self.p(VALUE_B)?)?.reshape(&[batch], Layout::Flat)?;
        Ok(ForwardCache {
            inputs,
            relu_out,
            pool_argmax,
            features,
            logits,
            policy,
            value,
        })
    }

    /// Parameter gradients given `dL/dlogits` `[B, n_actions]` and `dL/dvalue` `[B]`.
    /// The input gradient of the first conv layer is never formed.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor<T>, grad_value: &Tensor<T>) -> Result<ParamSet<T>> {
        let batch = cache.value.len();
        let imp = self.spec.conv_impl;
        let mut grads = self.params.tensors.zeros_like();
        let put = |grads: &mut ParamSet<T>, name: &str, g: Tensor<T>| -> Result<()> {
            let slot = grads.get_mut(name).ok_or_else(|| Error::invalid(format!("no slot for {name}")))?;
            *slot = g.reshape(slot.shape(), slot.layout())?;
            Ok(())
        };

        let pg = dense_backward(&cache.features, self.p(POLICY_W)?, self.p(POLICY_B)?, grad_logits)?;
        let gv = grad_value.clone().reshape(&[batch, 1], Layout::Flat)?;
        let vg = dense_backward(&cache.features, self.p(VALUE_W)?, self.p(VALUE_B)?, &gv)?;
        put(&mut grads, POLICY_W, pg.grad_w)?;
        put(&mut grads, POLICY_B, pg.grad_b)?;
        put(&mut grads, VALUE_W, vg.grad_w)?;
        put(&mut grads, VALUE_B, vg.grad_b)?;
        let mut g = Tensor::axpy(T::one(), &pg.grad_x, &vg.grad_x)?;

        for (i, op) in self.ops.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            g = match op {
                Op::Conv { idx, shape } => {
                    let (wn, bn) = conv_names(*idx);
                    let shape = shape.with_batch(batch);
                    put(&mut grads, &wn, conv_backward_filter(input, &g, &shape, imp)?)?;
                    put(&mut grads, &bn, conv_backward_bias(&g)?)?;
                    if i == 0 {
                        break;
                    }
                    conv_backward_data(&g, self.p(&wn)?, &shape, imp)?
                }
                Op::Relu => relu_backward(cache.relu_out[i].as_ref().expect("relu output cached"), &g)?,
                Op::MaxPool => {
                    let am = cache.pool_argmax[i].as_ref().expect("pool argmax cached");
                    maxpool_backward(input.shape(), am, &g)?
                }
                Op::Flatten { .. } => g.reshape(input.shape(), input.layout())?,
                Op::Dense { idx, .. } => {
                    let (wn, bn) = dense_names(*idx);
                    let dg = dense_backward(input, self.p(&wn)?, self.p(&bn)?, &g)?;
                    put(&mut grads, &wn, dg.grad_w)?;
                    put(&mut grads, &bn, dg.grad_b)?;
                    dg.grad_x
                }
            };
        }
        Ok(grads)
    }

    pub fn feature_len(&self) -> usize {
        self.features
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_input(b: usize, dims: [usize; 3], seed: u64) -> Tensor<f64> {
        let mut r = rng(seed);
        let len = b * dims.iter().product::<usize>();
        Tensor::from_vec(&[b, dims[0], dims[1], dims[2]], Layout::Nhwc, (0..len).map(|_| r.gen_range(0.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn atari_chain_matches_table_shapes() {
        let (ops, features) = compile(&NetworkSpec::atari([84, 84, 16], 18)).unwrap();
        let convs: Vec<[usize; 4]> = ops
            .iter()
            .filter_map(|op| match op {
                Op::Conv { shape, .. } => Some([shape.in_h, shape.in_c, shape.out_c, shape.k_h]),
                _ => None,
            })
            .collect();
        assert_eq!(convs, vec![[84, 16, 32, 5], [40, 32, 32, 5], [18, 32, 64, 5], [7, 64, 64, 3]]);
        assert_eq!(features, 512);
    }

    #[test]
    fn policy_rows_are_distributions() {
        let net = Network::<f64>::new(NetworkSpec::toy([24, 24, 4], 3), &mut rng(1)).unwrap();
        let x = random_input(5, [24, 24, 4], 2);
        let (p, v) = net.forward(&x).unwrap();
        assert_eq!(p.shape(), &[5, 3]);
        assert_eq!(v.shape(), &[5]);
        for row in p.data().chunks(3) {
            assert!(row.iter().all(|&q| q > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(v.is_finite());
    }

    #[test]
    fn zero_heads_give_uniform_policy_and_zero_value() {
        let mut net = Network::<f64>::new(NetworkSpec::toy([12, 12, 1], 4), &mut rng(3)).unwrap();
        for (name, t) in net.params.tensors.iter_mut() {
            if name.starts_with("policy") || name.starts_with("value") {
                t.fill(0.0);
            }
        }
        let (p, v) = net.forward(&random_input(2, [12, 12, 1], 4)).unwrap();
        assert!(p.data().iter().all(|&q| (q - 0.25).abs() < 1e-15));
        assert!(v.data().iter().all(|&q| q == 0.0));
    }

    #[test]
    fn batch_matches_single_samples() {
        let net = Network::<f64>::new(NetworkSpec::toy([10, 10, 2], 3), &mut rng(5)).unwrap();
        let x = random_input(2, [10, 10, 2], 6);
        let (p, v) = net.forward(&x).unwrap();
        let per = 10 * 10 * 2;
        for b in 0..2 {
            let xb = Tensor::from_vec(&[1, 10, 10, 2], Layout::Nhwc, x.data()[b * per..(b + 1) * per].to_vec()).unwrap();
            let (pb, vb) = net.forward(&xb).unwrap();
            for a in 0..3 {
                assert!((pb.data()[a] - p.data()[b * 3 + a]).abs() <= 1e-6);
            }
            assert!((vb.data()[0] - v.data()[b]).abs() <= 1e-6);
        }
    }

    #[test]
    fn missing_params_error() {
        let spec = NetworkSpec::toy([12, 12, 1], 3);
        let mut net = Network::<f32>::new(spec.clone(), &mut rng(0)).unwrap();
        net.params = ModelParams::new(ParamSet::new());
        let x = Tensor::zeros(&[1, 12, 12, 1], Layout::Nhwc).unwrap();
        assert!(net.forward(&x).is_err());
        assert!(Network::<f32>::from_params(spec, ModelParams::new(ParamSet::new())).is_err());
    }

    #[test]
    fn wrong_input_shape_errors() {
        let net = Network::<f32>::new(NetworkSpec::toy([12, 12, 1], 3), &mut rng(0)).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 12, 12, 2], Layout::Nhwc).unwrap()).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = NetworkSpec::atari([84, 84, 4], 6);
        let json = spec.to_json().unwrap();
        assert!(json.contains("\"type\": \"conv\""));
        assert_eq!(NetworkSpec::from_json(&json).unwrap(), spec);
        assert!(NetworkSpec::from_json(r#"{"input":[1,1,1],"n_actions":2,"layers":[],"bogus":1}"#).is_err());
    }
}
