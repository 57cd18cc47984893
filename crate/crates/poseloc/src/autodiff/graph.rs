//! Linear tape of primitive operations with a single reverse sweep.
//!
//! A [`Graph`] owns every intermediate value. Operations compute their result
//! eagerly and push one node; [`Graph::backward`] walks the tape once in
//! reverse, so replay cost is linear in the number of recorded operations.
//! The primitive set is closed: anything differentiable in the crate
//! (rendering quadrature, pose parameterization, convolutions) is expressed
//! through the ops below, each with a hand-written adjoint that is checked
//! against central finite differences in the test suite.

use super::tensor::{Real, Tensor};
use super::AutodiffError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T: Real> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Tensor<T>),
    Scale(NodeId, T),
    Offset(NodeId, T),
    AddConst(NodeId),
    /// `(m x n) + (n)` with the bias row broadcast over rows.
    AddBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    SumAll(NodeId),
    Reshape(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    NormalizeRows(NodeId),
    /// `(n x d) -> (n, d(1+2F))`: raw coordinates followed by interleaved
    /// sin/cos blocks at frequencies `2^k * pi`, k = 0..F.
    Posenc(NodeId, usize),
    /// Rotation-vector to unit quaternion exponential, `(3) -> (4)`.
    RotVecToQuat(NodeId),
    /// Rotates constant unit vectors `(n x 3)` by a quaternion node `(4)`.
    RotateVecs(NodeId, Tensor<T>),
    /// `points[i*s + j] = origin + t[j] * dirs[i]`.
    RayPoints { origin: NodeId, dirs: NodeId, tvals: Vec<T> },
    /// Emission-absorption compositing along the sample axis.
    /// `sigma (rays x samples)`, `rgb (rays*samples x 3)` -> `(rays x 3)`.
    Composite { sigma: NodeId, rgb: NodeId, delta: T },
    /// 3x3 convolution, stride 2, zero padding 1, over `(batch, c*h*w)`.
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId, in_c: usize, in_h: usize, in_w: usize },
    /// `(batch, c*hw) -> (batch, c)` mean over the spatial extent.
    GlobalAvgPool { input: NodeId, channels: usize },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Per-node gradients produced by one backward sweep.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to the node, if any path required it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn stable_softplus<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// sin(sqrt(u)/2)/sqrt(u) and cos(sqrt(u)/2), smooth through u = 0.
fn half_sinc(u: f64) -> f64 {
    if u < 1e-8 {
        0.5 - u / 48.0 + u * u / 3840.0
    } else {
        let n = u.sqrt();
        (0.5 * n).sin() / n
    }
}

fn half_sinc_du(u: f64) -> f64 {
    if u < 1e-6 {
        -1.0 / 48.0 + u / 1920.0
    } else {
        let n = u.sqrt();
        (0.5 * n).cos() / (4.0 * u) - (0.5 * n).sin() / (2.0 * n * u)
    }
}

fn half_cos(u: f64) -> f64 {
    if u < 1e-8 {
        1.0 - u / 8.0 + u * u / 384.0
    } else {
        (0.5 * u.sqrt()).cos()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a constant; no gradient is ever accumulated for it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn mul_const(&mut self, a: NodeId, c: Tensor<T>) -> NodeId {
        let v = self.nodes[a.0].value.zip_map(&c, |x, y| x * y);
        let ng = self.needs(a);
        self.push(v, Op::MulConst(a, c), ng)
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x * s);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn offset(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x + s);
        let ng = self.needs(a);
        self.push(v, Op::Offset(a, s), ng)
    }

    pub fn add_const(&mut self, a: NodeId, c: Tensor<T>) -> NodeId {
        let v = self.nodes[a.0].value.zip_map(&c, |x, y| x + y);
        let ng = self.needs(a);
        self.push(v, Op::AddConst(a), ng)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let b = &self.nodes[bias.0].value;
        let (m, n) = (x.rows(), x.cols());
        assert_eq!(b.len(), n, "bias length {} does not match {n} columns", b.len());
        let mut out = Tensor::zeros(&[m, n]);
        for r in 0..m {
            for c in 0..n {
                out.data_mut()[r * n + c] = x.data()[r * n + c] + b.data()[c];
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        self.push(out, Op::AddBias(a, bias), ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.max(T::ZERO));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(stable_softplus);
        let ng = self.needs(a);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(stable_sigmoid);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.sin());
        let ng = self.needs(a);
        self.push(v, Op::Sin(a), ng)
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.cos());
        let ng = self.needs(a);
        self.push(v, Op::Cos(a), ng)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.sqrt());
        let ng = self.needs(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.map(|x| x.exp());
        let ng = self.needs(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut acc = T::ZERO;
        for &v in self.nodes[a.0].value.data() {
            acc += v;
        }
        let ng = self.needs(a);
        self.push(Tensor::scalar(acc), Op::SumAll(a), ng)
    }

    /// Reinterprets a node's buffer under a new shape of identical length.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a.0].value.clone().reshaped(shape);
        let ng = self.needs(a);
        self.push(v, Op::Reshape(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.scale(s, T::ONE / T::from_f64(n as f64))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = Tensor::zeros(&[m, total]);
        let mut offset = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.rows(), m, "concat_cols row mismatch");
            let w = t.cols();
            for r in 0..m {
                out.data_mut()[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let t = &self.nodes[a.0].value;
        let (m, n) = (t.rows(), t.cols());
        assert!(start < end && end <= n, "bad column slice {start}..{end} of {n}");
        let w = end - start;
        let mut out = Tensor::zeros(&[m, w]);
        for r in 0..m {
            out.data_mut()[r * w..(r + 1) * w]
                .copy_from_slice(&t.data()[r * n + start..r * n + end]);
        }
        let ng = self.needs(a);
        self.push(out, Op::SliceCols(a, start, end), ng)
    }

    /// Divides each row by its Euclidean norm. Rows with vanishing norm pass
    /// through unchanged so the operation stays total.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let (m, n) = (t.rows(), t.cols());
        let mut out = t.clone();
        for r in 0..m {
            let row = &mut out.data_mut()[r * n..(r + 1) * n];
            let mut sq = T::ZERO;
            for v in row.iter() {
                sq += *v * *v;
            }
            let norm = sq.sqrt();
            if norm.to_f64() > 1e-30 {
                for v in row.iter_mut() {
                    *v = *v / norm;
                }
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::NormalizeRows(a), ng)
    }

    pub fn posenc(&mut self, a: NodeId, freqs: usize) -> NodeId {
        let t = &self.nodes[a.0].value;
        let (m, d) = (t.rows(), t.cols());
        let out_w = d * (1 + 2 * freqs);
        let mut out = Tensor::zeros(&[m, out_w]);
        for r in 0..m {
            let src = &t.data()[r * d..(r + 1) * d];
            let dst = &mut out.data_mut()[r * out_w..(r + 1) * out_w];
            dst[..d].copy_from_slice(src);
            for k in 0..freqs {
                let scale = T::from_f64(std::f64::consts::PI * (1u64 << k) as f64);
                for j in 0..d {
                    let v = src[j] * scale;
                    dst[d + 2 * k * d + j] = v.sin();
                    dst[d + (2 * k + 1) * d + j] = v.cos();
                }
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::Posenc(a, freqs), ng)
    }

    pub fn rotvec_to_quat(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        assert_eq!(t.len(), 3, "rotation vector must have 3 components");
        let v = t.to_f64_vec();
        let u = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        let g = half_sinc(u);
        let c = half_cos(u);
        let q = Tensor::from_f64_slice(&[1, 4], &[v[0] * g, v[1] * g, v[2] * g, c]);
        let ng = self.needs(a);
        self.push(q, Op::RotVecToQuat(a), ng)
    }

    pub fn rotate_vecs(&mut self, quat: NodeId, dirs: Tensor<T>) -> NodeId {
        let q = self.nodes[quat.0].value.to_f64_vec();
        assert_eq!(q.len(), 4, "quaternion must have 4 components");
        assert_eq!(dirs.cols(), 3);
        let n = dirs.rows();
        let mut out = Tensor::zeros(&[n, 3]);
        for i in 0..n {
            let d = [
                dirs.data()[i * 3].to_f64(),
                dirs.data()[i * 3 + 1].to_f64(),
                dirs.data()[i * 3 + 2].to_f64(),
            ];
            let r = rotate_f64(&q, &d);
            for k in 0..3 {
                out.data_mut()[i * 3 + k] = T::from_f64(r[k]);
            }
        }
        let ng = self.needs(quat);
        self.push(out, Op::RotateVecs(quat, dirs), ng)
    }

    pub fn ray_points(&mut self, origin: NodeId, dirs: NodeId, tvals: Vec<T>) -> NodeId {
        let o = &self.nodes[origin.0].value;
        let d = &self.nodes[dirs.0].value;
        assert_eq!(o.len(), 3);
        assert_eq!(d.cols(), 3);
        let (n, s) = (d.rows(), tvals.len());
        let mut out = Tensor::zeros(&[n * s, 3]);
        for i in 0..n {
            for j in 0..s {
                let t = tvals[j];
                let row = (i * s + j) * 3;
                for k in 0..3 {
                    out.data_mut()[row + k] = o.data()[k] + t * d.data()[i * 3 + k];
                }
            }
        }
        let ng = self.needs(origin) || self.needs(dirs);
        self.push(out, Op::RayPoints { origin, dirs, tvals }, ng)
    }

    /// Front-to-back emission-absorption quadrature with constant step size.
    pub fn composite(&mut self, sigma: NodeId, rgb: NodeId, delta: T) -> NodeId {
        let sg = &self.nodes[sigma.0].value;
        let cl = &self.nodes[rgb.0].value;
        let (rays, samples) = (sg.rows(), sg.cols());
        assert_eq!(cl.rows(), rays * samples, "rgb rows must be rays*samples");
        assert_eq!(cl.cols(), 3);
        let mut out = Tensor::zeros(&[rays, 3]);
        for r in 0..rays {
            let (mut cr, mut cg, mut cb) = (T::ZERO, T::ZERO, T::ZERO);
            let mut trans = T::ONE;
            for j in 0..samples {
                let s = sg.data()[r * samples + j];
                let att = (-(s * delta)).exp();
                let w = trans * (T::ONE - att);
                let base = (r * samples + j) * 3;
                cr += w * cl.data()[base];
                cg += w * cl.data()[base + 1];
                cb += w * cl.data()[base + 2];
                trans = trans * att;
            }
            out.data_mut()[r * 3] = cr;
            out.data_mut()[r * 3 + 1] = cg;
            out.data_mut()[r * 3 + 2] = cb;
        }
        let ng = self.needs(sigma) || self.needs(rgb);
        self.push(out, Op::Composite { sigma, rgb, delta }, ng)
    }

    pub fn conv2d_s2(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        in_c: usize,
        in_h: usize,
        in_w: usize,
    ) -> NodeId {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        let batch = x.rows();
        assert_eq!(x.cols(), in_c * in_h * in_w, "conv input shape mismatch");
        let out_c = w.rows();
        assert_eq!(w.cols(), in_c * 9, "conv weight must be (out_c, in_c*9)");
        assert_eq!(b.len(), out_c);
        let (oh, ow) = (conv_out(in_h), conv_out(in_w));
        let mut out = Tensor::zeros(&[batch, out_c * oh * ow]);
        for img in 0..batch {
            let col = im2col(&x.data()[img * x.cols()..(img + 1) * x.cols()], in_c, in_h, in_w);
            // (out_c, positions) = weight * col^T
            let y = w.matmul_nt(&col);
            let dst = &mut out.data_mut()[img * out_c * oh * ow..(img + 1) * out_c * oh * ow];
            for oc in 0..out_c {
                for p in 0..oh * ow {
                    dst[oc * oh * ow + p] = y.data()[oc * oh * ow + p] + b.data()[oc];
                }
            }
        }
        let ng = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(out, Op::Conv2d { input, weight, bias, in_c, in_h, in_w }, ng)
    }

    pub fn global_avg_pool(&mut self, input: NodeId, channels: usize) -> NodeId {
        let x = &self.nodes[input.0].value;
        let batch = x.rows();
        assert_eq!(x.cols() % channels, 0);
        let hw = x.cols() / channels;
        let inv = T::ONE / T::from_f64(hw as f64);
        let mut out = Tensor::zeros(&[batch, channels]);
        for img in 0..batch {
            for c in 0..channels {
                let mut acc = T::ZERO;
                for p in 0..hw {
                    acc += x.data()[img * x.cols() + c * hw + p];
                }
                out.data_mut()[img * channels + c] = acc * inv;
            }
        }
        let ng = self.needs(input);
        self.push(out, Op::GlobalAvgPool { input, channels }, ng)
    }

    /// Reverse sweep from a scalar root. Each node's adjoint is accumulated
    /// exactly once per use, in tape order, so results are deterministic.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>, AutodiffError> {
        if root.0 >= self.nodes.len() {
            return Err(AutodiffError::InvalidNode(root.0));
        }
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::from_elem(&root_shape, T::ONE));

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.push_adjoints(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, contrib: Tensor<T>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn push_adjoints(&self, idx: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, gout.clone());
                self.accum(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, gout.clone());
                self.accum(grads, *b, gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, gout.zip_map(&self.nodes[b.0].value, |g, y| g * y));
                }
                if self.needs(*b) {
                    self.accum(grads, *b, gout.zip_map(&self.nodes[a.0].value, |g, x| g * x));
                }
            }
            Op::MulConst(a, c) => {
                self.accum(grads, *a, gout.zip_map(c, |g, y| g * y));
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, gout.map(|g| g * s));
            }
            Op::Offset(a, _) | Op::AddConst(a) => {
                self.accum(grads, *a, gout.clone());
            }
            Op::AddBias(a, bias) => {
                self.accum(grads, *a, gout.clone());
                if self.needs(*bias) {
                    let (m, n) = (gout.rows(), gout.cols());
                    let mut gb = Tensor::zeros(&[n]);
                    for r in 0..m {
                        for c in 0..n {
                            gb.data_mut()[c] += gout.data()[r * n + c];
                        }
                    }
                    self.accum(grads, *bias, gb);
                }
            }
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accum(grads, *a, gout.matmul_nt(&self.nodes[b.0].value));
                }
                if self.needs(*b) {
                    self.accum(grads, *b, self.nodes[a.0].value.matmul_tn(gout));
                }
            }
            Op::Relu(a) => {
                // Subgradient 0 at the kink.
                self.accum(
                    grads,
                    *a,
                    gout.zip_map(&self.nodes[a.0].value, |g, x| {
                        if x > T::ZERO {
                            g
                        } else {
                            T::ZERO
                        }
                    }),
                );
            }
            Op::Softplus(a) => {
                self.accum(
                    grads,
                    *a,
                    gout.zip_map(&self.nodes[a.0].value, |g, x| g * stable_sigmoid(x)),
                );
            }
            Op::Sigmoid(a) => {
                self.accum(
                    grads,
                    *a,
                    gout.zip_map(&self.nodes[idx].value, |g, y| g * y * (T::ONE - y)),
                );
            }
            Op::Sin(a) => {
                self.accum(grads, *a, gout.zip_map(&self.nodes[a.0].value, |g, x| g * x.cos()));
            }
            Op::Cos(a) => {
                self.accum(grads, *a, gout.zip_map(&self.nodes[a.0].value, |g, x| -(g * x.sin())));
            }
            Op::Sqrt(a) => {
                let half = T::from_f64(0.5);
                self.accum(
                    grads,
                    *a,
                    gout.zip_map(&self.nodes[idx].value, |g, y| g * half / y),
                );
            }
            Op::Exp(a) => {
                self.accum(grads, *a, gout.zip_map(&self.nodes[idx].value, |g, y| g * y));
            }
            Op::SumAll(a) => {
                let g = gout.data()[0];
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accum(grads, *a, Tensor::from_elem(&shape, g));
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accum(grads, *a, gout.clone().reshaped(&shape));
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[idx].value.cols();
                let m = self.nodes[idx].value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if self.needs(*p) {
                        let mut gp = Tensor::zeros(&[m, w]);
                        for r in 0..m {
                            gp.data_mut()[r * w..(r + 1) * w].copy_from_slice(
                                &gout.data()[r * total + offset..r * total + offset + w],
                            );
                        }
                        self.accum(grads, *p, gp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let src = &self.nodes[a.0].value;
                let (m, n) = (src.rows(), src.cols());
                let w = end - start;
                let mut ga = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    ga.data_mut()[r * n + start..r * n + end]
                        .copy_from_slice(&gout.data()[r * w..(r + 1) * w]);
                }
                self.accum(grads, *a, ga);
            }
            Op::NormalizeRows(a) => {
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[idx].value;
                let (m, n) = (x.rows(), x.cols());
                let mut ga = Tensor::zeros(&[m, n]);
                for r in 0..m {
                    let xr = &x.data()[r * n..(r + 1) * n];
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &gout.data()[r * n..(r + 1) * n];
                    let mut sq = T::ZERO;
                    for v in xr {
                        sq += *v * *v;
                    }
                    let norm = sq.sqrt();
                    let dst = &mut ga.data_mut()[r * n..(r + 1) * n];
                    if norm.to_f64() <= 1e-30 {
                        dst.copy_from_slice(gr);
                        continue;
                    }
                    let mut dot = T::ZERO;
                    for j in 0..n {
                        dot += yr[j] * gr[j];
                    }
                    for j in 0..n {
                        dst[j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::Posenc(a, freqs) => {
                let x = &self.nodes[a.0].value;
                let (m, d) = (x.rows(), x.cols());
                let out_w = d * (1 + 2 * freqs);
                let mut ga = Tensor::zeros(&[m, d]);
                for r in 0..m {
                    let src = &x.data()[r * d..(r + 1) * d];
                    let g = &gout.data()[r * out_w..(r + 1) * out_w];
                    let dst = &mut ga.data_mut()[r * d..(r + 1) * d];
                    dst.copy_from_slice(&g[..d]);
                    for k in 0..*freqs {
                        let scale = T::from_f64(std::f64::consts::PI * (1u64 << k) as f64);
                        for j in 0..d {
                            let v = src[j] * scale;
                            dst[j] += scale
                                * (g[d + 2 * k * d + j] * v.cos()
                                    - g[d + (2 * k + 1) * d + j] * v.sin());
                        }
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::RotVecToQuat(a) => {
                let v = self.nodes[a.0].value.to_f64_vec();
                let g = gout.to_f64_vec();
                let u = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                let sinc = half_sinc(u);
                let dsinc = half_sinc_du(u);
                // d(cos(sqrt(u)/2))/du = -half_sinc(u)/4
                let gv_dot = g[0] * v[0] + g[1] * v[1] + g[2] * v[2];
                let radial = 2.0 * (gv_dot * dsinc - g[3] * sinc * 0.25);
                let mut out = [0.0f64; 3];
                for j in 0..3 {
                    out[j] = g[j] * sinc + v[j] * radial;
                }
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accum(grads, *a, Tensor::from_f64_slice(&shape, &out));
            }
            Op::RotateVecs(quat, dirs) => {
                let q = self.nodes[quat.0].value.to_f64_vec();
                let n = dirs.rows();
                let qv = [q[0], q[1], q[2]];
                let w = q[3];
                let mut gq = [0.0f64; 4];
                for i in 0..n {
                    let d = [
                        dirs.data()[i * 3].to_f64(),
                        dirs.data()[i * 3 + 1].to_f64(),
                        dirs.data()[i * 3 + 2].to_f64(),
                    ];
                    let g = [
                        gout.data()[i * 3].to_f64(),
                        gout.data()[i * 3 + 1].to_f64(),
                        gout.data()[i * 3 + 2].to_f64(),
                    ];
                    let qv_d = dot3(&qv, &d);
                    let qv_g = dot3(&qv, &g);
                    let d_g = dot3(&d, &g);
                    let dxg = cross3(&d, &g);
                    for k in 0..3 {
                        gq[k] += 2.0 * (qv_d * g[k] + d[k] * qv_g - 2.0 * qv[k] * d_g + w * dxg[k]);
                    }
                    let qxd = cross3(&qv, &d);
                    gq[3] += 2.0 * dot3(&qxd, &g);
                }
                let shape = self.nodes[quat.0].value.shape().to_vec();
                self.accum(grads, *quat, Tensor::from_f64_slice(&shape, &gq));
            }
            Op::RayPoints { origin, dirs, tvals } => {
                let n = self.nodes[dirs.0].value.rows();
                let s = tvals.len();
                if self.needs(*origin) {
                    let mut go = Tensor::zeros(self.nodes[origin.0].value.shape());
                    for row in 0..n * s {
                        for k in 0..3 {
                            go.data_mut()[k] += gout.data()[row * 3 + k];
                        }
                    }
                    self.accum(grads, *origin, go);
                }
                if self.needs(*dirs) {
                    let mut gd = Tensor::zeros(&[n, 3]);
                    for i in 0..n {
                        for j in 0..s {
                            let t = tvals[j];
                            let row = (i * s + j) * 3;
                            for k in 0..3 {
                                gd.data_mut()[i * 3 + k] += t * gout.data()[row + k];
                            }
                        }
                    }
                    self.accum(grads, *dirs, gd);
                }
            }
            Op::Composite { sigma, rgb, delta } => {
                let sg = &self.nodes[sigma.0].value;
                let cl = &self.nodes[rgb.0].value;
                let (rays, samples) = (sg.rows(), sg.cols());
                let delta = *delta;
                let need_sigma = self.needs(*sigma);
                let need_rgb = self.needs(*rgb);
                let mut gsig = if need_sigma { Some(Tensor::zeros(&[rays, samples])) } else { None };
                let mut grgb =
                    if need_rgb { Some(Tensor::zeros(&[rays * samples, 3])) } else { None };
                let mut weights = vec![T::ZERO; samples];
                let mut atts = vec![T::ZERO; samples];
                for r in 0..rays {
                    let mut trans = T::ONE;
                    let mut transmittances = vec![T::ZERO; samples];
                    for j in 0..samples {
                        let s = sg.data()[r * samples + j];
                        let att = (-(s * delta)).exp();
                        transmittances[j] = trans;
                        weights[j] = trans * (T::ONE - att);
                        atts[j] = att;
                        trans = trans * att;
                    }
                    let gray = [
                        gout.data()[r * 3],
                        gout.data()[r * 3 + 1],
                        gout.data()[r * 3 + 2],
                    ];
                    if let Some(grgb) = grgb.as_mut() {
                        for j in 0..samples {
                            let base = (r * samples + j) * 3;
                            for k in 0..3 {
                                grgb.data_mut()[base + k] = weights[j] * gray[k];
                            }
                        }
                    }
                    if let Some(gsig) = gsig.as_mut() {
                        // Suffix sum of w_k * (c_k . gray) for k > j.
                        let mut suffix = T::ZERO;
                        for j in (0..samples).rev() {
                            let base = (r * samples + j) * 3;
                            let cdotg = cl.data()[base] * gray[0]
                                + cl.data()[base + 1] * gray[1]
                                + cl.data()[base + 2] * gray[2];
                            gsig.data_mut()[r * samples + j] =
                                delta * (transmittances[j] * atts[j] * cdotg - suffix);
                            suffix += weights[j] * cdotg;
                        }
                    }
                }
                if let Some(g) = gsig {
                    self.accum(grads, *sigma, g);
                }
                if let Some(g) = grgb {
                    self.accum(grads, *rgb, g);
                }
            }
            Op::Conv2d { input, weight, bias, in_c, in_h, in_w } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let batch = x.rows();
                let out_c = w.rows();
                let (oh, ow) = (conv_out(*in_h), conv_out(*in_w));
                let pos = oh * ow;
                let mut gw = if self.needs(*weight) {
                    Some(Tensor::zeros(&[out_c, in_c * 9]))
                } else {
                    None
                };
                let mut gb = if self.needs(*bias) { Some(Tensor::zeros(&[out_c])) } else { None };
                let mut gx = if self.needs(*input) {
                    Some(Tensor::zeros(&[batch, in_c * in_h * in_w]))
                } else {
                    None
                };
                for img in 0..batch {
                    let gy = Tensor::from_vec(
                        &[out_c, pos],
                        gout.data()[img * out_c * pos..(img + 1) * out_c * pos].to_vec(),
                    );
                    if let Some(gb) = gb.as_mut() {
                        for oc in 0..out_c {
                            let mut acc = T::ZERO;
                            for p in 0..pos {
                                acc += gy.data()[oc * pos + p];
                            }
                            gb.data_mut()[oc] += acc;
                        }
                    }
                    let col =
                        im2col(&x.data()[img * x.cols()..(img + 1) * x.cols()], *in_c, *in_h, *in_w);
                    if let Some(gw) = gw.as_mut() {
                        // (out_c, c*9) += gy (out_c, pos) * col (pos, c*9)
                        gw.add_assign(&gy.matmul(&col));
                    }
                    if let Some(gx) = gx.as_mut() {
                        // col grad (pos, c*9) = gy^T (pos, out_c) * w (out_c, c*9)
                        let gcol = gy.matmul_tn(w);
                        col2im_accumulate(
                            &gcol,
                            *in_c,
                            *in_h,
                            *in_w,
                            &mut gx.data_mut()[img * (in_c * in_h * in_w)..(img + 1) * (in_c * in_h * in_w)],
                        );
                    }
                }
                if let Some(g) = gx {
                    self.accum(grads, *input, g);
                }
                if let Some(g) = gw {
                    self.accum(grads, *weight, g);
                }
                if let Some(g) = gb {
                    self.accum(grads, *bias, g);
                }
            }
            Op::GlobalAvgPool { input, channels } => {
                let x = &self.nodes[input.0].value;
                let batch = x.rows();
                let hw = x.cols() / channels;
                let inv = T::ONE / T::from_f64(hw as f64);
                let mut gx = Tensor::zeros(&[batch, x.cols()]);
                for img in 0..batch {
                    for c in 0..*channels {
                        let g = gout.data()[img * channels + c] * inv;
                        for p in 0..hw {
                            gx.data_mut()[img * x.cols() + c * hw + p] = g;
                        }
                    }
                }
                self.accum(grads, *input, gx);
            }
        }
    }
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn rotate_f64(q: &[f64], v: &[f64; 3]) -> [f64; 3] {
    let qv = [q[0], q[1], q[2]];
    let w = q[3];
    let t = cross3(&qv, v);
    let t = [t[0] + w * v[0], t[1] + w * v[1], t[2] + w * v[2]];
    let u = cross3(&qv, &t);
    [v[0] + 2.0 * u[0], v[1] + 2.0 * u[1], v[2] + 2.0 * u[2]]
}

/// Output extent of a 3x3 / stride-2 / pad-1 convolution.
fn conv_out(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

/// Unrolls 3x3 stride-2 pad-1 patches into rows of `(positions, c*9)`.
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Tensor<T> {
    let (oh, ow) = (conv_out(h), conv_out(w));
    let mut col = Tensor::zeros(&[oh * ow, c * 9]);
    let width = c * 9;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * width;
            for ch in 0..c {
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        let v = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            x[ch * h * w + iy as usize * w + ix as usize]
                        } else {
                            T::ZERO
                        };
                        col.data_mut()[row + ch * 9 + ky * 3 + kx] = v;
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the image.
fn col2im_accumulate<T: Real>(gcol: &Tensor<T>, c: usize, h: usize, w: usize, gx: &mut [T]) {
    let (oh, ow) = (conv_out(h), conv_out(w));
    let width = c * 9;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = (oy * ow + ox) * width;
            for ch in 0..c {
                for ky in 0..3 {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx[ch * h * w + iy as usize * w + ix as usize] +=
                            gcol.data()[row + ch * 9 + ky * 3 + kx];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Checks the backward sweep of `build` against central finite
    /// differences on every element of every input, at relative tolerance
    /// `tol` (scale = max(1, |analytic|, |numeric|)).
    fn fd_check<F>(inputs: &[Tensor<f64>], h: f64, tol: f64, build: F)
    where
        F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    {
        let eval = |tensors: &[Tensor<f64>]| -> f64 {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
            let root = build(&mut g, &ids);
            g.value(root).data()[0]
        };

        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let root = build(&mut g, &ids);
        let grads = g.backward(root).expect("backward");

        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(ids[which])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape()));
            for i in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let scale = 1.0f64.max(a.abs()).max(numeric.abs());
                let rel = (a - numeric).abs() / scale;
                assert!(
                    rel < tol,
                    "input {which} element {i}: analytic {a} vs numeric {numeric} (rel {rel:.3e})"
                );
            }
        }
    }

    fn probe_sum(g: &mut Graph<f64>, x: NodeId) -> NodeId {
        // Weighted sum with distinct weights so each output element
        // contributes a distinguishable adjoint.
        let n = g.value(x).len();
        let shape = g.value(x).shape().to_vec();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
        let probe = Tensor::from_f64_slice(&shape, &w);
        let p = g.mul_const(x, probe);
        g.sum_all(p)
    }

    fn rng_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn fd_elementwise_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = rng_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let b = rng_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        fd_check(&[a, b], 1e-5, 1e-6, |g, ids| {
            let s = g.add(ids[0], ids[1]);
            let d = g.sub(ids[0], ids[1]);
            let m = g.mul(s, d);
            let sc = g.scale(m, 0.7);
            let off = g.offset(sc, 0.25);
            let c = Tensor::from_f64_slice(&[2, 3], &[0.5, -1.0, 2.0, 0.1, 0.3, -0.2]);
            let mc = g.mul_const(off, c);
            let ac = g.add_const(mc, Tensor::from_elem(&[2, 3], 0.5));
            probe_sum(g, ac)
        });
    }

    #[test]
    fn fd_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // Keep values away from the relu kink.
        let mut x = rng_tensor(&mut rng, &[3, 4], -2.0, 2.0);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        fd_check(&[x.clone()], 1e-6, 1e-6, |g, ids| {
            let r = g.relu(ids[0]);
            probe_sum(g, r)
        });
        fd_check(&[x.clone()], 1e-6, 1e-6, |g, ids| {
            let r = g.softplus(ids[0]);
            probe_sum(g, r)
        });
        fd_check(&[x.clone()], 1e-6, 1e-6, |g, ids| {
            let r = g.sigmoid(ids[0]);
            probe_sum(g, r)
        });
        fd_check(&[x.clone()], 1e-6, 1e-6, |g, ids| {
            let r = g.sin(ids[0]);
            probe_sum(g, r)
        });
        fd_check(&[x.clone()], 1e-6, 1e-6, |g, ids| {
            let r = g.cos(ids[0]);
            probe_sum(g, r)
        });
        fd_check(&[x.clone()], 1e-6, 1e-6, |g, ids| {
            let r = g.exp(ids[0]);
            probe_sum(g, r)
        });
        let pos = x.map(|v| v.abs() + 0.5);
        fd_check(&[pos], 1e-6, 1e-6, |g, ids| {
            let r = g.sqrt(ids[0]);
            probe_sum(g, r)
        });
    }

    #[test]
    fn fd_matmul_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = rng_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rng_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let bias = rng_tensor(&mut rng, &[2], -1.0, 1.0);
        fd_check(&[a, b, bias], 1e-5, 1e-6, |g, ids| {
            let y = g.matmul(ids[0], ids[1]);
            let y = g.add_bias(y, ids[2]);
            let y = g.relu(y);
            probe_sum(g, y)
        });
    }

    #[test]
    fn fd_concat_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = rng_tensor(&mut rng, &[2, 3], -1.0, 1.0);
        let b = rng_tensor(&mut rng, &[2, 2], -1.0, 1.0);
        fd_check(&[a, b], 1e-5, 1e-6, |g, ids| {
            let cat = g.concat_cols(&[ids[0], ids[1], ids[0]]);
            let sl = g.slice_cols(cat, 1, 7);
            let sq = g.mul(sl, sl);
            probe_sum(g, sq)
        });
    }

    #[test]
    fn fd_normalize_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rng_tensor(&mut rng, &[3, 4], 0.2, 1.5);
        fd_check(&[x], 1e-6, 1e-6, |g, ids| {
            let y = g.normalize_rows(ids[0]);
            probe_sum(g, y)
        });
    }

    #[test]
    fn normalize_rows_gradient_is_tangent() {
        // The adjoint of a row normalization is orthogonal to the input row:
        // moving along x does not change x/|x|.
        let x = Tensor::from_f64_slice(&[1, 3], &[0.3, -0.7, 1.1]);
        let mut g = Graph::new();
        let id = g.leaf(x.clone());
        let y = g.normalize_rows(id);
        let root = probe_sum(&mut g, y);
        let grads = g.backward(root).unwrap();
        let gx = grads.get(id).unwrap();
        let dot: f64 = (0..3).map(|i| gx.data()[i] * x.data()[i]).sum();
        assert!(dot.abs() < 1e-12, "gradient not tangent: {dot}");
    }

    #[test]
    fn fd_posenc() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = rng_tensor(&mut rng, &[2, 3], -0.8, 0.8);
        fd_check(&[x], 1e-6, 1e-5, |g, ids| {
            let y = g.posenc(ids[0], 4);
            probe_sum(g, y)
        });
    }

    #[test]
    fn posenc_layout_matches_definition() {
        let x = Tensor::from_f64_slice(&[1, 2], &[0.25, -0.5]);
        let mut g = Graph::<f64>::new();
        let id = g.constant(x);
        let y = g.posenc(id, 2);
        let out = g.value(y).data();
        let pi = std::f64::consts::PI;
        let expect = [
            0.25,
            -0.5,
            (0.25 * pi).sin(),
            (-0.5 * pi).sin(),
            (0.25 * pi).cos(),
            (-0.5 * pi).cos(),
            (0.5 * pi).sin(),
            (-1.0 * pi).sin(),
            (0.5 * pi).cos(),
            (-1.0 * pi).cos(),
        ];
        assert_eq!(out.len(), expect.len());
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn fd_rotvec_to_quat() {
        for (vec, h) in [
            ([0.3, -0.5, 0.8], 1e-6),
            ([2.5, 1.0, -1.5], 1e-6),
            ([1e-9, 2e-9, -1e-9], 1e-7),
            ([0.0, 0.0, 0.0], 1e-7),
            ([1e-4, -2e-4, 5e-5], 1e-7),
        ] {
            let x = Tensor::from_f64_slice(&[3], &vec);
            fd_check(&[x], h, 1e-5, |g, ids| {
                let q = g.rotvec_to_quat(ids[0]);
                probe_sum(g, q)
            });
        }
    }

    #[test]
    fn rotvec_to_quat_matches_geometry() {
        let v = [0.4, -1.1, 0.7];
        let mut g = Graph::<f64>::new();
        let id = g.constant(Tensor::from_f64_slice(&[3], &v));
        let q = g.rotvec_to_quat(id);
        let got = g.value(q).data();
        let want = Quaternion::from_rotation_vector(v);
        for (a, b) in got.iter().zip([want.x, want.y, want.z, want.w]) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
        let norm: f64 = got.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fd_rotate_vecs() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut dirs = rng_tensor(&mut rng, &[5, 3], -1.0, 1.0);
        // Normalize rows so they look like ray directions.
        for r in 0..5 {
            let n: f64 = (0..3).map(|k| dirs.data()[r * 3 + k].powi(2)).sum::<f64>().sqrt();
            for k in 0..3 {
                dirs.data_mut()[r * 3 + k] /= n;
            }
        }
        // An arbitrary (non-unit) quaternion: the op itself does not
        // normalize, so the gradient must be exact off the unit sphere too.
        let q = Tensor::from_f64_slice(&[4], &[0.2, -0.4, 0.1, 0.85]);
        let dirs2 = dirs.clone();
        fd_check(&[q], 1e-6, 1e-6, move |g, ids| {
            let r = g.rotate_vecs(ids[0], dirs2.clone());
            probe_sum(g, r)
        });
    }

    #[test]
    fn rotate_vecs_matches_geometry_for_unit_quat() {
        let q = Quaternion { x: 0.1, y: -0.3, z: 0.2, w: 0.9 }.normalized();
        let dirs = [[1.0, 0.0, 0.0], [0.0, 0.7, -0.7], [0.3, 0.4, 0.5]];
        let flat: Vec<f64> = dirs.iter().flatten().copied().collect();
        let mut g = Graph::<f64>::new();
        let qn = g.constant(Tensor::from_f64_slice(&[4], &[q.x, q.y, q.z, q.w]));
        let out = g.rotate_vecs(qn, Tensor::from_f64_slice(&[3, 3], &flat));
        for (i, d) in dirs.iter().enumerate() {
            let want = q.rotate(*d);
            for k in 0..3 {
                let got = g.value(out).data()[i * 3 + k];
                assert!((got - want[k]).abs() < 1e-14, "ray {i} comp {k}");
            }
        }
    }

    #[test]
    fn fd_ray_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let origin = rng_tensor(&mut rng, &[3], -0.5, 0.5);
        let dirs = rng_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let tvals = vec![0.1, 0.4, 0.9];
        fd_check(&[origin, dirs], 1e-5, 1e-6, move |g, ids| {
            let p = g.ray_points(ids[0], ids[1], tvals.clone());
            probe_sum(g, p)
        });
    }

    #[test]
    fn fd_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let sigma = rng_tensor(&mut rng, &[3, 5], 0.0, 4.0);
        let rgb = rng_tensor(&mut rng, &[15, 3], 0.0, 1.0);
        fd_check(&[sigma, rgb], 1e-5, 1e-6, |g, ids| {
            let c = g.composite(ids[0], ids[1], 0.3);
            probe_sum(g, c)
        });
    }

    #[test]
    fn composite_matches_direct_formula() {
        // One ray, three samples, worked by hand with transmittance products.
        let sigma = [1.0f64, 0.5, 2.0];
        let rgb = [[1.0, 0.0, 0.2], [0.0, 1.0, 0.4], [0.5, 0.5, 1.0]];
        let delta = 0.25;
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_f64_slice(&[1, 3], &sigma));
        let flat: Vec<f64> = rgb.iter().flatten().copied().collect();
        let c = g.constant(Tensor::from_f64_slice(&[3, 3], &flat));
        let out = g.composite(s, c, delta);

        let mut want = [0.0f64; 3];
        let mut trans = 1.0;
        for j in 0..3 {
            let att = (-sigma[j] * delta).exp();
            let w = trans * (1.0 - att);
            for k in 0..3 {
                want[k] += w * rgb[j][k];
            }
            trans *= att;
        }
        for k in 0..3 {
            assert!((g.value(out).data()[k] - want[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn composite_opaque_wall_returns_first_color() {
        // A very dense first sample should dominate the ray.
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::from_f64_slice(&[1, 2], &[500.0, 500.0]));
        let c = g.constant(Tensor::from_f64_slice(&[2, 3], &[0.9, 0.1, 0.3, 0.0, 0.0, 0.0]));
        let out = g.composite(s, c, 0.1);
        assert!((g.value(out).data()[0] - 0.9).abs() < 1e-12);
        // Empty space composites to black.
        let s0 = g.constant(Tensor::from_f64_slice(&[1, 2], &[0.0, 0.0]));
        let c0 = g.constant(Tensor::from_f64_slice(&[2, 3], &[0.9, 0.1, 0.3, 1.0, 1.0, 1.0]));
        let out0 = g.composite(s0, c0, 0.1);
        for k in 0..3 {
            assert_eq!(g.value(out0).data()[k], 0.0);
        }
    }

    #[test]
    fn fd_conv2d_s2() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let (c, h, w, oc) = (2, 5, 5, 3);
        let x = rng_tensor(&mut rng, &[2, c * h * w], -1.0, 1.0);
        let weight = rng_tensor(&mut rng, &[oc, c * 9], -0.5, 0.5);
        let bias = rng_tensor(&mut rng, &[oc], -0.2, 0.2);
        fd_check(&[x, weight, bias], 1e-5, 1e-6, move |g, ids| {
            let y = g.conv2d_s2(ids[0], ids[1], ids[2], c, h, w);
            let y = g.relu(y);
            probe_sum(g, y)
        });
    }

    #[test]
    fn conv2d_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (c, h, w, oc) = (2, 6, 4, 3);
        let x = rng_tensor(&mut rng, &[1, c * h * w], -1.0, 1.0);
        let weight = rng_tensor(&mut rng, &[oc, c * 9], -0.5, 0.5);
        let bias = rng_tensor(&mut rng, &[oc], -0.2, 0.2);
        let mut g = Graph::<f64>::new();
        let xi = g.constant(x.clone());
        let wi = g.constant(weight.clone());
        let bi = g.constant(bias.clone());
        let y = g.conv2d_s2(xi, wi, bi, c, h, w);
        let (oh, ow) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
        assert_eq!(g.value(y).shape(), &[1, oc * oh * ow]);
        for ocx in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[ocx];
                    for ch in 0..c {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let iy = (2 * oy + ky) as isize - 1;
                                let ix = (2 * ox + kx) as isize - 1;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += weight.data()[ocx * c * 9 + ch * 9 + ky * 3 + kx]
                                    * x.data()[ch * h * w + iy as usize * w + ix as usize];
                            }
                        }
                    }
                    let got = g.value(y).data()[ocx * oh * ow + oy * ow + ox];
                    assert!((got - acc).abs() < 1e-12, "mismatch at ({ocx},{oy},{ox})");
                }
            }
        }
    }

    #[test]
    fn fd_global_avg_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = rng_tensor(&mut rng, &[2, 3 * 4], -1.0, 1.0);
        fd_check(&[x], 1e-5, 1e-6, |g, ids| {
            let y = g.global_avg_pool(ids[0], 3);
            let y = g.mul(y, y);
            probe_sum(g, y)
        });
    }

    #[test]
    fn fd_pose_to_photometric_chain() {
        // End-to-end: 6 pose offsets -> quaternion update -> rotated rays ->
        // sample points -> sinusoidal features -> small MLP -> compositing ->
        // squared error. This is the same graph shape the refiner builds.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let q0 = Quaternion { x: 0.15, y: -0.2, z: 0.05, w: 0.96 }.normalized();
        // Left-multiplication table: row vector delta times this matrix
        // equals q0 * delta in scalar-last components.
        #[rustfmt::skip]
        let lmat = Tensor::from_f64_slice(&[4, 4], &[
            // row = delta.x contribution
            q0.w, q0.z, -q0.y, -q0.x,
            -q0.z, q0.w, q0.x, -q0.y,
            q0.y, -q0.x, q0.w, -q0.z,
            q0.x, q0.y, q0.z, q0.w,
        ]);
        let pix_dirs = {
            let mut d = rng_tensor(&mut rng, &[3, 3], -0.4, 0.4);
            for r in 0..3 {
                d.data_mut()[r * 3 + 2] = -1.0;
                let n: f64 = (0..3).map(|k| d.data()[r * 3 + k].powi(2)).sum::<f64>().sqrt();
                for k in 0..3 {
                    d.data_mut()[r * 3 + k] /= n;
                }
            }
            d
        };
        let w1 = rng_tensor(&mut rng, &[15, 8], -0.6, 0.6);
        let b1 = rng_tensor(&mut rng, &[8], -0.1, 0.1);
        let w2 = rng_tensor(&mut rng, &[8, 4], -0.6, 0.6);
        let target = rng_tensor(&mut rng, &[3, 3], 0.0, 1.0);
        let tvals = vec![0.2, 0.5, 0.8, 1.1];
        let params = Tensor::from_f64_slice(&[1, 6], &[0.02, -0.01, 0.03, 0.04, -0.02, 0.01]);

        fd_check(&[params], 1e-6, 1e-5, move |g, ids| {
            let trans = g.slice_cols(ids[0], 0, 3);
            let rotv = g.slice_cols(ids[0], 3, 6);
            let dq = g.rotvec_to_quat(rotv);
            let lconst = g.constant(lmat.clone());
            let q = g.matmul(dq, lconst);
            let q = g.normalize_rows(q);
            let dirs = g.rotate_vecs(q, pix_dirs.clone());
            let pts = g.ray_points(trans, dirs, tvals.clone());
            let feats = g.posenc(pts, 2);
            let w1n = g.constant(w1.clone());
            let b1n = g.constant(b1.clone());
            let h1 = g.matmul(feats, w1n);
            let h1 = g.add_bias(h1, b1n);
            let h1 = g.relu(h1);
            let w2n = g.constant(w2.clone());
            let out = g.matmul(h1, w2n);
            let sigma_raw = g.slice_cols(out, 0, 1);
            let sigma = g.softplus(sigma_raw);
            let sigma = g.reshape(sigma, &[3, 4]);
            let rgb_raw = g.slice_cols(out, 1, 4);
            let rgb = g.sigmoid(rgb_raw);
            let rendered = g.composite(sigma, rgb, 0.3);
            let tgt = g.constant(target.clone());
            let diff = g.sub(rendered, tgt);
            let sq = g.mul(diff, diff);
            g.mean_all(sq)
        });
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64_slice(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarRoot(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(3.0));
        let y = g.mul(x, c);
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data()[0], 3.0);
    }

    #[test]
    fn shared_subexpression_accumulates_both_paths() {
        // y = x*x + x  =>  dy/dx = 2x + 1.
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(1.5));
        let sq = g.mul(x, x);
        let y = g.add(sq, x);
        let grads = g.backward(y).unwrap();
        assert!((grads.get(x).unwrap().data()[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn backward_is_deterministic() {
        let to_f32 = |t: &Tensor<f64>| Tensor::<f32>::from_f64_slice(t.shape(), &t.to_f64_vec());
        let build = move || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut g = Graph::<f32>::new();
            let x = g.leaf(to_f32(&rng_tensor(&mut rng, &[4, 6], -1.0, 1.0)));
            let w = g.leaf(to_f32(&rng_tensor(&mut rng, &[6, 5], -1.0, 1.0)));
            let y = g.matmul(x, w);
            let y = g.sigmoid(y);
            let root = g.mean_all(y);
            let grads = g.backward(root).unwrap();
            (
                grads.get(x).unwrap().data().to_vec(),
                grads.get(w).unwrap().data().to_vec(),
            )
        };
        let (a1, a2) = build();
        let (b1, b2) = build();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a1), bits(&b1));
        assert_eq!(bits(&a2), bits(&b2));
    }
}
