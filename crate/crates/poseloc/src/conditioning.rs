//! Image conditioning encoder: a small convolutional network mapping the
//! target image to a fixed-length feature vector that steers the pose
//! denoiser. It is trained jointly with the denoiser and stored in the same
//! checkpoint. A stack of stride-2 3x3 convolutions halves the resolution
//! layer by layer; the remaining spatial grid is then either collapsed by
//! global average pooling (the default) or flattened whole, and a final
//! linear layer produces the feature vector. Average pooling gives compact
//! texture statistics; flattening keeps the coarse spatial layout, which
//! carries most of the viewpoint information in scenes whose texture
//! statistics barely change between views.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, RawParam, Real, Tensor};
use crate::nn::{find_raw, random_uniform, tensor_to_raw, Linear};
use crate::radiance::ImageBuffer;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConditioningError {
    #[error("encoder expects a {expected}x{expected} image, got {got_w}x{got_h}")]
    DimensionMismatch { expected: usize, got_w: usize, got_h: usize },
}

/// One stride-2 3x3 convolution with padding 1. The weight is stored
/// `(out_c, in_c * 9)`, matching the tape's unrolled-patch layout.
#[derive(Clone)]
pub struct ConvLayer<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub in_c: usize,
    pub out_c: usize,
}

impl<T: Real> ConvLayer<T> {
    pub fn new(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize) -> Self {
        let bound = (6.0 / (in_c * 9) as f64).sqrt();
        ConvLayer {
            weight: random_uniform(rng, &[out_c, in_c * 9], bound),
            bias: Tensor::zeros(&[out_c]),
            in_c,
            out_c,
        }
    }
}

/// How the final conv feature map is reduced before the linear layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// Per-channel global average: compact, position-invariant features.
    #[default]
    Avg,
    /// Flatten the whole grid: keeps coarse spatial layout at the cost of a
    /// larger linear layer.
    Flatten,
}

impl PoolMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolMode::Avg => "avg",
            PoolMode::Flatten => "flatten",
        }
    }
}

/// The conditioning network: stride-2 conv stack, ReLU after every
/// convolution, pooling per [`PoolMode`], then a linear map to
/// `feature_dim`.
#[derive(Clone)]
pub struct ConditioningEncoder<T: Real> {
    pub convs: Vec<ConvLayer<T>>,
    pub linear: Linear<T>,
    pub input_size: usize,
    pub feature_dim: usize,
    pub pool: PoolMode,
}

impl<T: Real> ConditioningEncoder<T> {
    /// `channels` lists the conv output channels, e.g. `[16, 32, 64, 128]`.
    /// Each conv halves the spatial side (`input_size` must survive the
    /// halvings, i.e. be divisible by 2^len). Pools by global average.
    pub fn new(
        rng: &mut ChaCha8Rng,
        input_size: usize,
        channels: &[usize],
        feature_dim: usize,
    ) -> Self {
        Self::new_with_pool(rng, input_size, channels, feature_dim, PoolMode::Avg)
    }

    /// [`Self::new`] with an explicit pooling mode.
    pub fn new_with_pool(
        rng: &mut ChaCha8Rng,
        input_size: usize,
        channels: &[usize],
        feature_dim: usize,
        pool: PoolMode,
    ) -> Self {
        assert!(!channels.is_empty(), "need at least one conv layer");
        assert!(
            input_size % (1 << channels.len()) == 0,
            "input size {input_size} not divisible by 2^{}",
            channels.len()
        );
        let mut convs = Vec::with_capacity(channels.len());
        let mut in_c = 3;
        for &out_c in channels {
            convs.push(ConvLayer::new(rng, in_c, out_c));
            in_c = out_c;
        }
        let side = input_size >> channels.len();
        let linear_in = match pool {
            PoolMode::Avg => in_c,
            PoolMode::Flatten => in_c * side * side,
        };
        let linear = Linear::new(rng, linear_in, feature_dim);
        ConditioningEncoder { convs, linear, input_size, feature_dim, pool }
    }

    pub fn channels(&self) -> Vec<usize> {
        self.convs.iter().map(|c| c.out_c).collect()
    }

    /// Flattens an RGB image into the channel-major `(1, 3*H*W)` row the
    /// conv op consumes.
    pub fn image_to_input(&self, image: &ImageBuffer) -> Result<Tensor<T>, ConditioningError> {
        let s = self.input_size;
        if image.width() != s || image.height() != s {
            return Err(ConditioningError::DimensionMismatch {
                expected: s,
                got_w: image.width(),
                got_h: image.height(),
            });
        }
        let mut data = vec![T::ZERO; 3 * s * s];
        for row in 0..s {
            for col in 0..s {
                let px = image.pixel(row, col);
                for ch in 0..3 {
                    data[ch * s * s + row * s + col] = T::from_f64(px[ch] as f64);
                }
            }
        }
        Ok(Tensor::from_vec(&[1, 3 * s * s], data))
    }

    /// Pushes parameters in `conv0.w, conv0.b, …, linear.w, linear.b` order;
    /// leaves when `trainable`, constants otherwise.
    pub fn push_graph_params(&self, g: &mut Graph<T>, trainable: bool) -> Vec<NodeId> {
        let mut ids = Vec::with_capacity(self.convs.len() * 2 + 2);
        let push = |g: &mut Graph<T>, t: &Tensor<T>| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        for conv in &self.convs {
            ids.push(push(g, &conv.weight));
            ids.push(push(g, &conv.bias));
        }
        ids.push(push(g, &self.linear.weight));
        ids.push(push(g, &self.linear.bias));
        ids
    }

    /// Forward pass over `(batch, 3*H*W)` image rows through parameter nodes
    /// pushed by [`Self::push_graph_params`]. Returns `(batch, feature_dim)`.
    pub fn graph_forward(&self, g: &mut Graph<T>, images: NodeId, params: &[NodeId]) -> NodeId {
        assert_eq!(params.len(), self.convs.len() * 2 + 2);
        let mut h = images;
        let mut side = self.input_size;
        for (i, conv) in self.convs.iter().enumerate() {
            h = g.conv2d_s2(h, params[2 * i], params[2 * i + 1], conv.in_c, side, side);
            h = g.relu(h);
            side = side / 2;
        }
        // The conv output rows are already flat `(batch, c*side*side)`, so
        // flatten mode feeds them to the linear layer unchanged.
        let pooled = match self.pool {
            PoolMode::Avg => g.global_avg_pool(h, self.convs.last().unwrap().out_c),
            PoolMode::Flatten => h,
        };
        let lin = g.matmul(pooled, params[self.convs.len() * 2]);
        g.add_bias(lin, params[self.convs.len() * 2 + 1])
    }

    /// Encodes one image to its feature vector. Pure and deterministic: the
    /// same bits in give the same bits out. Internally evaluates the same
    /// tape ops training uses, so scoring and training agree exactly.
    pub fn encode(&self, image: &ImageBuffer) -> Result<Vec<T>, ConditioningError> {
        let input = self.image_to_input(image)?;
        let mut g = Graph::new();
        let params = self.push_graph_params(&mut g, false);
        let x = g.constant(input);
        let f = self.graph_forward(&mut g, x, &params);
        Ok(g.value(f).data().to_vec())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self
            .convs
            .iter_mut()
            .flat_map(|c| [&mut c.weight, &mut c.bias])
            .collect();
        out.push(&mut self.linear.weight);
        out.push(&mut self.linear.bias);
        out
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self
            .convs
            .iter()
            .flat_map(|c| [c.weight.shape().to_vec(), c.bias.shape().to_vec()])
            .collect();
        out.push(self.linear.weight.shape().to_vec());
        out.push(self.linear.bias.shape().to_vec());
        out
    }

    pub fn named_params(&self, prefix: &str) -> Vec<RawParam> {
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            out.push(tensor_to_raw(&format!("{prefix}.conv{i}.weight"), &conv.weight));
            out.push(tensor_to_raw(&format!("{prefix}.conv{i}.bias"), &conv.bias));
        }
        out.push(tensor_to_raw(&format!("{prefix}.linear.weight"), &self.linear.weight));
        out.push(tensor_to_raw(&format!("{prefix}.linear.bias"), &self.linear.bias));
        out
    }

    pub fn load_named(&mut self, params: &[RawParam], prefix: &str) -> Result<(), String> {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.weight =
                find_raw(params, &format!("{prefix}.conv{i}.weight"), conv.weight.shape())?;
            conv.bias = find_raw(params, &format!("{prefix}.conv{i}.bias"), conv.bias.shape())?;
        }
        self.linear.weight =
            find_raw(params, &format!("{prefix}.linear.weight"), self.linear.weight.shape())?;
        self.linear.bias =
            find_raw(params, &format!("{prefix}.linear.bias"), self.linear.bias.shape())?;
        Ok(())
    }
}

/// Bilinear resample to `new_w` x `new_h` with edge clamping. Sampling uses
/// pixel centers, so resizing to the same dimensions is the identity.
pub fn resize_bilinear(image: &ImageBuffer, new_w: usize, new_h: usize) -> ImageBuffer {
    assert!(new_w > 0 && new_h > 0);
    let (w, h) = (image.width(), image.height());
    let mut out = ImageBuffer::new(new_w, new_h);
    let sx = w as f64 / new_w as f64;
    let sy = h as f64 / new_h as f64;
    for row in 0..new_h {
        let fy = ((row as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for col in 0..new_w {
            let fx = ((col as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let p00 = image.pixel(y0, x0);
            let p01 = image.pixel(y0, x1);
            let p10 = image.pixel(y1, x0);
            let p11 = image.pixel(y1, x1);
            let mut px = [0.0f32; 3];
            for k in 0..3 {
                let top = p00[k] as f64 * (1.0 - tx) + p01[k] as f64 * tx;
                let bot = p10[k] as f64 * (1.0 - tx) + p11[k] as f64 * tx;
                px[k] = (top * (1.0 - ty) + bot * ty) as f32;
            }
            out.set_pixel(row, col, px);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise_image(seed: u64, side: usize) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..side * side * 3).map(|_| rng.gen::<f32>()).collect();
        ImageBuffer::from_data(side, side, data)
    }

    #[test]
    fn identical_images_give_identical_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = ConditioningEncoder::<f32>::new(&mut rng, 16, &[4, 8], 6);
        let img = noise_image(2, 16);
        let a = enc.encode(&img).unwrap();
        let b = enc.encode(&img).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn zero_image_through_zeroed_linear_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut enc = ConditioningEncoder::<f64>::new(&mut rng, 16, &[4, 8], 6);
        for v in enc.linear.weight.data_mut() {
            *v = 0.0;
        }
        let img = ImageBuffer::new(16, 16);
        let f = enc.encode(&img).unwrap();
        assert!(f.iter().all(|&v| v == 0.0), "features {f:?}");
    }

    #[test]
    fn encode_rejects_wrong_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = ConditioningEncoder::<f32>::new(&mut rng, 16, &[4], 6);
        let img = ImageBuffer::new(8, 8);
        assert_eq!(
            enc.encode(&img).unwrap_err(),
            ConditioningError::DimensionMismatch { expected: 16, got_w: 8, got_h: 8 }
        );
    }

    #[test]
    fn features_are_finite_for_unit_range_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = ConditioningEncoder::<f32>::new(&mut rng, 32, &[8, 16, 16], 24);
        for seed in 0..4 {
            let f = enc.encode(&noise_image(seed, 32)).unwrap();
            assert_eq!(f.len(), 24);
            assert!(f.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn batched_rows_match_single_image_encodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = ConditioningEncoder::<f32>::new(&mut rng, 16, &[4, 8], 5);
        let imgs = [noise_image(7, 16), noise_image(8, 16)];
        let singles: Vec<Vec<f32>> = imgs.iter().map(|i| enc.encode(i).unwrap()).collect();

        let rows: Vec<Tensor<f32>> =
            imgs.iter().map(|i| enc.image_to_input(i).unwrap()).collect();
        let mut stacked = Tensor::zeros(&[2, rows[0].cols()]);
        for (i, r) in rows.iter().enumerate() {
            let w = r.cols();
            stacked.data_mut()[i * w..(i + 1) * w].copy_from_slice(r.data());
        }
        let mut g = Graph::new();
        let params = enc.push_graph_params(&mut g, false);
        let x = g.constant(stacked);
        let f = enc.graph_forward(&mut g, x, &params);
        let batch = g.value(f);
        assert_eq!(&batch.data()[..5], singles[0].as_slice());
        assert_eq!(&batch.data()[5..], singles[1].as_slice());
    }

    #[test]
    fn named_params_round_trip_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = ConditioningEncoder::<f32>::new(&mut rng, 16, &[4, 8], 6);
        let raws = enc.named_params("cond");
        let mut other = ConditioningEncoder::<f32>::new(&mut rng, 16, &[4, 8], 6);
        other.load_named(&raws, "cond").unwrap();
        let img = noise_image(10, 16);
        let a = enc.encode(&img).unwrap();
        let b = other.encode(&img).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn feature_norm_gradient_matches_finite_differences() {
        for pool in [PoolMode::Avg, PoolMode::Flatten] {
            feature_norm_gradient_case(pool);
        }
    }

    fn feature_norm_gradient_case(pool: PoolMode) {
        // Central differences on every encoder weight, double precision,
        // relative error under 1e-4 at unit scale.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let enc = ConditioningEncoder::<f64>::new_with_pool(&mut rng, 8, &[4, 6], 5, pool);
        let img = noise_image(12, 8);
        let input = enc.image_to_input(&img).unwrap();

        let eval = |e: &ConditioningEncoder<f64>| -> f64 {
            let mut g = Graph::new();
            let params = e.push_graph_params(&mut g, false);
            let x = g.constant(input.clone());
            let f = e.graph_forward(&mut g, x, &params);
            let sq = g.mul(f, f);
            let root = g.sum_all(sq);
            g.value(root).data()[0]
        };

        // Analytic gradients from one tape.
        let mut g = Graph::new();
        let params = enc.push_graph_params(&mut g, true);
        let x = g.constant(input.clone());
        let f = enc.graph_forward(&mut g, x, &params);
        let sq = g.mul(f, f);
        let root = g.sum_all(sq);
        let grads = g.backward(root).unwrap();

        let h = 1e-6;
        let mut checked = 0usize;
        for (pi, _) in params.iter().enumerate() {
            let grad = grads.get(params[pi]).expect("trainable params get gradients").clone();
            let n = grad.len();
            // Probe a deterministic spread of entries in big tensors.
            let stride = (n / 40).max(1);
            for j in (0..n).step_by(stride) {
                let mut plus = enc.clone();
                let mut minus = enc.clone();
                {
                    let tweak = |e: &mut ConditioningEncoder<f64>, d: f64| {
                        let mut ps = e.params_mut();
                        ps[pi].data_mut()[j] += d;
                    };
                    tweak(&mut plus, h);
                    tweak(&mut minus, -h);
                }
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ana = grad.data()[j];
                let scale = 1.0f64.max(ana.abs()).max(num.abs());
                assert!(
                    ((ana - num) / scale).abs() < 1e-4,
                    "{:?} param {pi}[{j}]: analytic {ana}, numeric {num}",
                    pool
                );
                checked += 1;
            }
        }
        assert!(checked > 100, "probe covered only {checked} entries");
    }

    #[test]
    fn resize_bilinear_behaves_at_fixed_points() {
        // Identity resize.
        let img = noise_image(13, 8);
        let same = resize_bilinear(&img, 8, 8);
        assert_eq!(img.data(), same.data());

        // Constant image stays constant at any size.
        let flat = ImageBuffer::from_data(4, 4, vec![0.37; 48]);
        let up = resize_bilinear(&flat, 9, 5);
        assert!(up.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));

        // 2x downscale of a 2x2 checkerboard averages the four corners.
        let mut board = ImageBuffer::new(2, 2);
        board.set_pixel(0, 0, [1.0, 1.0, 1.0]);
        board.set_pixel(1, 1, [1.0, 1.0, 1.0]);
        let down = resize_bilinear(&board, 1, 1);
        for k in 0..3 {
            assert!((down.pixel(0, 0)[k] - 0.5).abs() < 1e-6);
        }
    }
}
