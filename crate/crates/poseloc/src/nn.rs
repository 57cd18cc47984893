//! Fully connected building blocks shared by the radiance field and the
//! pose denoiser: a linear layer, a ReLU MLP, and checkpoint conversion
//! helpers. Each block offers a plain (tape-free) forward pass for inference
//! hot paths and a graph forward pass for training; the two compute the same
//! arithmetic in the same order so their outputs agree bitwise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, RawParam, Real, Tensor};

/// Dense layer with weight laid out `(in_dim, out_dim)` so activations
/// multiply on the left: `y = x W + b`.
#[derive(Clone)]
pub struct Linear<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    /// Uniform init on `±sqrt(6 / in_dim)`, the usual scaling for ReLU
    /// stacks; biases start at zero.
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        Linear {
            weight: random_uniform(rng, &[in_dim, out_dim], bound),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn plain_forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.matmul(&self.weight);
        let (m, n) = (y.rows(), y.cols());
        for r in 0..m {
            for c in 0..n {
                y.data_mut()[r * n + c] += self.bias.data()[c];
            }
        }
        y
    }
}

/// Samples a tensor with entries uniform on `[-bound, bound)` in a fixed
/// row-major order, so initialization is a pure function of the RNG state.
pub fn random_uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// ReLU multilayer perceptron: linear layers with ReLU between them and no
/// activation after the last (output nonlinearities are the caller's
/// business, since density and color use different ones).
#[derive(Clone)]
pub struct Mlp<T: Real> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> Mlp<T> {
    /// `dims = [input, hidden..., output]`.
    pub fn new(rng: &mut ChaCha8Rng, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(rng, w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn plain_forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = self.layers[0].plain_forward(x);
        for layer in &self.layers[1..] {
            for v in h.data_mut() {
                *v = v.max(T::ZERO);
            }
            h = layer.plain_forward(&h);
        }
        h
    }

    /// Pushes every parameter onto the graph in `w0, b0, w1, b1, ...` order;
    /// leaves when `trainable`, constants otherwise.
    pub fn push_graph_params(&self, g: &mut Graph<T>, trainable: bool) -> Vec<NodeId> {
        let mut ids = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            for t in [&layer.weight, &layer.bias] {
                ids.push(if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) });
            }
        }
        ids
    }

    /// Forward pass through parameter nodes previously pushed by
    /// [`Mlp::push_graph_params`].
    pub fn graph_forward(&self, g: &mut Graph<T>, x: NodeId, params: &[NodeId]) -> NodeId {
        assert_eq!(params.len(), self.layers.len() * 2, "one weight and bias node per layer");
        let mut h = x;
        for (i, _) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            h = g.matmul(h, params[2 * i]);
            h = g.add_bias(h, params[2 * i + 1]);
        }
        h
    }

    /// Mutable references in the same order as [`Mlp::push_graph_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.shape().to_vec(), l.bias.shape().to_vec()])
            .collect()
    }

    /// Serializes parameters as `{prefix}.{i}.weight` / `{prefix}.{i}.bias`.
    pub fn named_params(&self, prefix: &str) -> Vec<RawParam> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(tensor_to_raw(&format!("{prefix}.{i}.weight"), &layer.weight));
            out.push(tensor_to_raw(&format!("{prefix}.{i}.bias"), &layer.bias));
        }
        out
    }

    /// Loads parameters saved by [`Mlp::named_params`]. Every expected name
    /// must be present with a matching shape.
    pub fn load_named(&mut self, params: &[RawParam], prefix: &str) -> Result<(), String> {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.weight = find_raw(params, &format!("{prefix}.{i}.weight"), layer.weight.shape())?;
            layer.bias = find_raw(params, &format!("{prefix}.{i}.bias"), layer.bias.shape())?;
        }
        Ok(())
    }
}

pub fn tensor_to_raw<T: Real>(name: &str, t: &Tensor<T>) -> RawParam {
    RawParam::new(
        name,
        t.shape().to_vec(),
        t.data().iter().map(|v| v.to_f64() as f32).collect(),
    )
}

pub fn raw_to_tensor<T: Real>(raw: &RawParam) -> Tensor<T> {
    Tensor::from_vec(
        &raw.dims,
        raw.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
}

pub fn find_raw<T: Real>(
    params: &[RawParam],
    name: &str,
    expect_shape: &[usize],
) -> Result<Tensor<T>, String> {
    let raw = params
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| format!("checkpoint is missing parameter {name}"))?;
    if raw.dims != expect_shape {
        return Err(format!(
            "parameter {name} has shape {:?}, expected {:?}",
            raw.dims, expect_shape
        ));
    }
    Ok(raw_to_tensor(raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn plain_and_graph_forward_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::<f32>::new(&mut rng, &[7, 16, 16, 4]);
        let x = random_uniform::<f32>(&mut rng, &[3, 7], 1.0);

        let plain = mlp.plain_forward(&x);

        let mut g = Graph::new();
        let xid = g.constant(x);
        let params = mlp.push_graph_params(&mut g, false);
        let y = mlp.graph_forward(&mut g, xid, &params);

        let a: Vec<u32> = plain.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = g.value(y).data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = Linear::<f64>::new(&mut rng, 24, 8);
        let bound = (6.0f64 / 24.0).sqrt();
        for &w in layer.weight.data() {
            assert!(w.abs() <= bound);
        }
        assert!(layer.bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Mlp::<f32>::new(&mut ChaCha8Rng::seed_from_u64(9), &[5, 8, 2]);
        let b = Mlp::<f32>::new(&mut ChaCha8Rng::seed_from_u64(9), &[5, 8, 2]);
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.weight.data(), lb.weight.data());
        }
    }

    #[test]
    fn named_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = Mlp::<f32>::new(&mut rng, &[4, 6, 3]);
        let raws = mlp.named_params("net");
        assert_eq!(raws.len(), 4);
        assert_eq!(raws[0].name, "net.0.weight");

        let mut other = Mlp::<f32>::new(&mut rng, &[4, 6, 3]);
        other.load_named(&raws, "net").unwrap();
        for (la, lb) in mlp.layers.iter().zip(&other.layers) {
            assert_eq!(la.weight.data(), lb.weight.data());
            assert_eq!(la.bias.data(), lb.bias.data());
        }
    }

    #[test]
    fn load_named_rejects_missing_and_misshapen() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mlp = Mlp::<f32>::new(&mut rng, &[4, 6, 3]);
        let mut other = mlp.clone();
        assert!(other.load_named(&[], "net").is_err());
        let mut raws = mlp.named_params("net");
        raws[0] = RawParam::new("net.0.weight", vec![2, 2], vec![0.0; 4]);
        assert!(other.load_named(&raws, "net").is_err());
    }
}
