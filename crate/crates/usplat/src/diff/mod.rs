//! Reverse-mode gradient tape over dense f32 tensors.
//!
//! One `Graph` is built per training step. Values are stored per node; a
//! backward sweep walks the node list in reverse and accumulates gradients
//! into every leaf that was created with `requires_grad`. Reductions and
//! finite differences accumulate in f64.

pub mod gradcheck;
pub mod optim;

use crate::raster::RasterTape;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as a single column).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f32),
    Offset(Var, f32),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Abs(Var),
    Tanh(Var),
    Logistic(Var),
    Softplus(Var),
    Clamp(Var, f32, f32),
    Huber(Var, f32),
    MatMul(Var, Var),
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    ColSum(Var),
    ScaleRows(Var, Var),
    AddRowVec(Var, Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, gain: Var, eps: f32 },
    Concat0(Vec<Var>),
    Slice0(Var, usize, usize),
    Gather0(Var, Vec<usize>),
    RepeatRows(Var, usize),
    Concat1(Vec<Var>),
    Slice1(Var, usize, usize),
    Reshape(Var),
    /// Bilinear sampling of `img` ([h*w, c]) at continuous `coords` ([m, 2]),
    /// clamp-to-edge.
    Bilinear { img: Var, coords: Var, h: usize, w: usize },
    /// Valid cross-correlation of each channel of `x` ([h*w, c]) with a fixed
    /// k x k kernel.
    Conv2dValid { x: Var, kernel: Vec<f32>, k: usize, h: usize, w: usize },
    Rasterize(RasterTape),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape; one per forward/backward pair.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by `Var`, produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            other => self.any_requires_grad(other),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_requires_grad(&self, op: &Op) -> bool {
        let mut req = false;
        for_each_input(op, |v| req |= self.nodes[v.0].requires_grad);
        req
    }

    /// Insert a constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f32) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Insert a differentiable leaf (a parameter or input under optimization).
    pub fn param(&mut self, t: Tensor) -> Var {
        let id = self.push(t, Op::Leaf);
        self.nodes[id.0].requires_grad = true;
        id
    }

    // ---- elementwise binary (same shape, or either side scalar) ----

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = broadcast_zip(ta, tb, f);
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    // ---- elementwise unary ----

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let t = &self.nodes[a.0].value;
        let value = Tensor::new(t.shape.clone(), t.data.iter().map(|&x| f(x)).collect());
        self.push(value, op)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f32::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f32::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f32::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f32::abs, Op::Abs(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f32::tanh, Op::Tanh(a))
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        self.unary(a, logistic, Op::Logistic(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Elementwise Huber penalty: quadratic below `delta`, linear above.
    pub fn huber(&mut self, a: Var, delta: f32) -> Var {
        self.unary(
            a,
            |x| {
                let r = x.abs();
                if r <= delta {
                    0.5 * x * x
                } else {
                    delta * (r - 0.5 * delta)
                }
            },
            Op::Huber(a, delta),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = matmul(ta, tb);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (n, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[j * n + i] = t.data[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, n], out), Op::Transpose(a))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data.iter().map(|&x| x as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s: f64 = t.data.iter().map(|&x| x as f64).sum();
        let m = (s / t.numel() as f64) as f32;
        self.push(Tensor::scalar(m), Op::MeanAll(a))
    }

    /// [n, c] -> [n]: sum over the last axis.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (n, c) = (t.rows(), t.cols());
        let data = (0..n)
            .map(|i| t.data[i * c..(i + 1) * c].iter().map(|&x| x as f64).sum::<f64>() as f32)
            .collect();
        self.push(Tensor::new(vec![n], data), Op::RowSum(a))
    }

    /// [n, c] -> [c]: sum over rows.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (n, c) = (t.rows(), t.cols());
        let mut acc = vec![0.0f64; c];
        for i in 0..n {
            for j in 0..c {
                acc[j] += t.data[i * c + j] as f64;
            }
        }
        let data = acc.into_iter().map(|x| x as f32).collect();
        self.push(Tensor::new(vec![c], data), Op::ColSum(a))
    }

    /// Multiply each row of `a` ([n, c]) by the matching entry of `w` ([n]).
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Var {
        let (ta, tw) = (&self.nodes[a.0].value, &self.nodes[w.0].value);
        let (n, c) = (ta.rows(), ta.cols());
        assert_eq!(tw.numel(), n, "scale_rows weight length");
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                data.push(ta.data[i * c + j] * tw.data[i]);
            }
        }
        self.push(Tensor::new(ta.shape.clone(), data), Op::ScaleRows(a, w))
    }

    /// Add a [c] row vector to every row of `a` ([n, c]).
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Var {
        let (ta, tv) = (&self.nodes[a.0].value, &self.nodes[v.0].value);
        let (n, c) = (ta.rows(), ta.cols());
        assert_eq!(tv.numel(), c, "add_row_vec length");
        let mut data = Vec::with_capacity(n * c);
        for i in 0..n {
            for j in 0..c {
                data.push(ta.data[i * c + j] + tv.data[j]);
            }
        }
        self.push(Tensor::new(ta.shape.clone(), data), Op::AddRowVec(a, v))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (n, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            let row = &t.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for j in 0..c {
                let e = (row[j] - m).exp();
                data[i * c + j] = e;
                z += e as f64;
            }
            for j in 0..c {
                data[i * c + j] /= z as f32;
            }
        }
        self.push(Tensor::new(t.shape.clone(), data), Op::SoftmaxRows(a))
    }

    /// Row-wise layer norm with a learnable gain (no bias).
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, eps: f32) -> Var {
        let (tx, tg) = (&self.nodes[x.0].value, &self.nodes[gain.0].value);
        let (n, c) = (tx.rows(), tx.cols());
        assert_eq!(tg.numel(), c, "layer norm gain length");
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            let row = &tx.data[i * c..(i + 1) * c];
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv * tg.data[j];
            }
        }
        self.push(Tensor::new(tx.shape.clone(), data), Op::LayerNormRows { x, gain, eps })
    }

    // ---- structure ----

    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols(), c, "concat0 column mismatch");
            n += t.rows();
            data.extend_from_slice(&t.data);
        }
        let shape = if c == 1 && self.nodes[parts[0].0].value.shape.len() == 1 {
            vec![n]
        } else {
            vec![n, c]
        };
        self.push(Tensor::new(shape, data), Op::Concat0(parts.to_vec()))
    }

    pub fn slice0(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let c = t.cols();
        let data = t.data[start * c..end * c].to_vec();
        let mut shape = t.shape.clone();
        shape[0] = end - start;
        self.push(Tensor::new(shape, data), Op::Slice0(a, start, end))
    }

    pub fn gather0(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = &self.nodes[a.0].value;
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&t.data[i * c..(i + 1) * c]);
        }
        let mut shape = t.shape.clone();
        shape[0] = idx.len();
        self.push(Tensor::new(shape, data), Op::Gather0(a, idx.to_vec()))
    }

    /// Repeat every row `k` times (row i becomes rows i*k..(i+1)*k).
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let c = t.cols();
        let n = t.rows();
        let mut data = Vec::with_capacity(n * k * c);
        for i in 0..n {
            for _ in 0..k {
                data.extend_from_slice(&t.data[i * c..(i + 1) * c]);
            }
        }
        let mut shape = t.shape.clone();
        shape[0] = n * k;
        self.push(Tensor::new(shape, data), Op::RepeatRows(a, k))
    }

    pub fn concat1(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p.0].value.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (w, &p) in widths.iter().zip(parts) {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.rows(), n, "concat1 row mismatch");
            for i in 0..n {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&t.data[i * w..(i + 1) * w]);
            }
            off += w;
        }
        self.push(Tensor::new(vec![n, total], data), Op::Concat1(parts.to_vec()))
    }

    pub fn slice1(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let (n, c) = (t.rows(), t.cols());
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&t.data[i * c + start..i * c + end]);
        }
        let shape = if w == 1 { vec![n] } else { vec![n, w] };
        self.push(Tensor::new(shape, data), Op::Slice1(a, start, end))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = &self.nodes[a.0].value;
        assert_eq!(t.numel(), shape.iter().product::<usize>(), "reshape numel");
        let value = Tensor::new(shape, t.data.clone());
        self.push(value, Op::Reshape(a))
    }

    // ---- sampling / filtering ----

    /// Differentiable bilinear sample of `img` ([h*w, c]) at `coords`
    /// ([m, 2], (u, v) pixel-center convention), clamp-to-edge.
    pub fn bilinear(&mut self, img: Var, coords: Var, h: usize, w: usize) -> Var {
        let (ti, tc) = (&self.nodes[img.0].value, &self.nodes[coords.0].value);
        let c = ti.cols();
        assert_eq!(ti.rows(), h * w, "bilinear image size");
        let m = tc.rows();
        assert_eq!(tc.cols(), 2, "bilinear coords must be [m,2]");
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            let (u, v) = (tc.data[2 * i], tc.data[2 * i + 1]);
            let taps = bilinear_taps(u, v, h, w);
            for (pix, wt) in taps {
                for ch in 0..c {
                    out[i * c + ch] += wt * ti.data[pix * c + ch];
                }
            }
        }
        let shape = if c == 1 { vec![m] } else { vec![m, c] };
        self.push(Tensor::new(shape, out), Op::Bilinear { img, coords, h, w })
    }

    /// Valid cross-correlation of each channel with a fixed kernel (used for
    /// windowed SSIM statistics). Output is [(h-k+1)*(w-k+1), c].
    pub fn conv2d_valid(&mut self, x: Var, kernel: &[f32], k: usize, h: usize, w: usize) -> Var {
        let t = &self.nodes[x.0].value;
        let c = t.cols();
        assert_eq!(t.rows(), h * w, "conv input size");
        assert_eq!(kernel.len(), k * k);
        let (oh, ow) = (h - k + 1, w - k + 1);
        let mut out = vec![0.0; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for ky in 0..k {
                        for kx in 0..k {
                            let pix = (oy + ky) * w + ox + kx;
                            acc += (kernel[ky * k + kx] * t.data[pix * c + ch]) as f64;
                        }
                    }
                    out[(oy * ow + ox) * c + ch] = acc as f32;
                }
            }
        }
        let shape = if c == 1 { vec![oh * ow] } else { vec![oh * ow, c] };
        self.push(
            Tensor::new(shape, out),
            Op::Conv2dValid { x, kernel: kernel.to_vec(), k, h, w },
        )
    }

    pub(crate) fn push_raster(&mut self, value: Tensor, tape: RasterTape) -> Var {
        self.push(value, Op::Rasterize(tape))
    }

    // ---- composite helpers ----

    /// Row-wise L2 normalization with an epsilon guard inside the sqrt.
    pub fn normalize_rows(&mut self, a: Var, eps: f32) -> Var {
        let sq = self.mul(a, a);
        let ss = self.row_sum(sq);
        let ss = self.offset(ss, eps);
        let norm = self.sqrt(ss);
        let one = self.scalar(1.0);
        let inv = self.div(one, norm);
        self.scale_rows(a, inv)
    }

    /// Backward sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        let root_t = &self.nodes[root.0].value;
        if root_t.numel() != 1 {
            return Err(DiffError::NonScalarRoot(root_t.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(root_t.shape.clone(), vec![1.0]));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.accumulate_inputs(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Diagnostic backward sweep: returns the first (deepest-output) node
    /// whose op writes a non-finite gradient into one of its inputs, as
    /// `(node_index, op_debug, input_index)`.
    pub fn first_nonfinite_grad(&self, root: Var) -> Option<(usize, String, usize)> {
        let root_t = &self.nodes[root.0].value;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(root_t.shape.clone(), vec![1.0]));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.accumulate_inputs(i, &g, &mut grads);
            grads[i] = Some(g);
            let mut hit = None;
            for_each_input(&self.nodes[i].op, |v| {
                if hit.is_none() {
                    if let Some(t) = &grads[v.0] {
                        if !t.is_finite() {
                            hit = Some(v.0);
                        }
                    }
                }
            });
            if let Some(input) = hit {
                let op = op_label(&self.nodes[i].op).to_string();
                return Some((i, op, input));
            }
        }
        None
    }

    fn accumulate_inputs(&self, node: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let n = &self.nodes[node];
        let val = |v: Var| &self.nodes[v.0].value;
        let mut add_to = |v: Var, delta: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, d) in acc.data.iter_mut().zip(&delta.data) {
                        *a += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match &n.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(*a, reduce_broadcast(g, val(*a)), grads);
                add_to(*b, reduce_broadcast(g, val(*b)), grads);
            }
            Op::Sub(a, b) => {
                add_to(*a, reduce_broadcast(g, val(*a)), grads);
                let neg = Tensor::new(g.shape.clone(), g.data.iter().map(|x| -x).collect());
                add_to(*b, reduce_broadcast(&neg, val(*b)), grads);
            }
            Op::Mul(a, b) => {
                let ga = broadcast_zip(g, val(*b), |x, y| x * y);
                let gb = broadcast_zip(g, val(*a), |x, y| x * y);
                add_to(*a, reduce_broadcast(&ga, val(*a)), grads);
                add_to(*b, reduce_broadcast(&gb, val(*b)), grads);
            }
            Op::Div(a, b) => {
                let ga = broadcast_zip(g, val(*b), |x, y| x / y);
                add_to(*a, reduce_broadcast(&ga, val(*a)), grads);
                // d(a/b)/db = -a / b^2
                let q = broadcast_zip(val(*a), val(*b), |x, y| -x / (y * y));
                let gb = broadcast_zip(g, &q, |x, y| x * y);
                add_to(*b, reduce_broadcast(&gb, val(*b)), grads);
            }
            Op::Neg(a) => {
                add_to(*a, Tensor::new(g.shape.clone(), g.data.iter().map(|x| -x).collect()), grads);
            }
            Op::Scale(a, c) => {
                add_to(*a, Tensor::new(g.shape.clone(), g.data.iter().map(|x| x * c).collect()), grads);
            }
            Op::Offset(a, _) => add_to(*a, g.clone(), grads),
            Op::Exp(a) => {
                let out = &n.value;
                let d = zip(g, out, |gv, y| gv * y);
                add_to(*a, d, grads);
            }
            Op::Ln(a) => {
                let d = zip(g, val(*a), |gv, x| gv / x);
                add_to(*a, d, grads);
            }
            Op::Sqrt(a) => {
                let out = &n.value;
                let d = zip(g, out, |gv, y| gv * 0.5 / y);
                add_to(*a, d, grads);
            }
            Op::Abs(a) => {
                let d = zip(g, val(*a), |gv, x| gv * if x >= 0.0 { 1.0 } else { -1.0 });
                add_to(*a, d, grads);
            }
            Op::Tanh(a) => {
                let out = &n.value;
                let d = zip(g, out, |gv, y| gv * (1.0 - y * y));
                add_to(*a, d, grads);
            }
            Op::Logistic(a) => {
                let out = &n.value;
                let d = zip(g, out, |gv, y| gv * y * (1.0 - y));
                add_to(*a, d, grads);
            }
            Op::Softplus(a) => {
                let d = zip(g, val(*a), |gv, x| gv * logistic(x));
                add_to(*a, d, grads);
            }
            Op::Clamp(a, lo, hi) => {
                let d = zip(g, val(*a), |gv, x| if x > *lo && x < *hi { gv } else { 0.0 });
                add_to(*a, d, grads);
            }
            Op::Huber(a, delta) => {
                let d = zip(g, val(*a), |gv, x| gv * x.clamp(-*delta, *delta));
                add_to(*a, d, grads);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                // dA = G B^T ; dB = A^T G
                let bt = transpose(tb);
                let at = transpose(ta);
                add_to(*a, matmul(g, &bt), grads);
                add_to(*b, matmul(&at, g), grads);
            }
            Op::Transpose(a) => add_to(*a, transpose(g), grads),
            Op::SumAll(a) => {
                let t = val(*a);
                add_to(*a, Tensor::full(t.shape.clone(), g.data[0]), grads);
            }
            Op::MeanAll(a) => {
                let t = val(*a);
                add_to(*a, Tensor::full(t.shape.clone(), g.data[0] / t.numel() as f32), grads);
            }
            Op::RowSum(a) => {
                let t = val(*a);
                let (rn, c) = (t.rows(), t.cols());
                let mut d = vec![0.0; rn * c];
                for i in 0..rn {
                    for j in 0..c {
                        d[i * c + j] = g.data[i];
                    }
                }
                add_to(*a, Tensor::new(t.shape.clone(), d), grads);
            }
            Op::ColSum(a) => {
                let t = val(*a);
                let (rn, c) = (t.rows(), t.cols());
                let mut d = vec![0.0; rn * c];
                for i in 0..rn {
                    for j in 0..c {
                        d[i * c + j] = g.data[j];
                    }
                }
                add_to(*a, Tensor::new(t.shape.clone(), d), grads);
            }
            Op::ScaleRows(a, wv) => {
                let (ta, tw) = (val(*a), val(*wv));
                let (rn, c) = (ta.rows(), ta.cols());
                let mut da = vec![0.0; rn * c];
                let mut dw = vec![0.0f64; rn];
                for i in 0..rn {
                    for j in 0..c {
                        da[i * c + j] = g.data[i * c + j] * tw.data[i];
                        dw[i] += (g.data[i * c + j] * ta.data[i * c + j]) as f64;
                    }
                }
                add_to(*a, Tensor::new(ta.shape.clone(), da), grads);
                add_to(
                    *wv,
                    Tensor::new(tw.shape.clone(), dw.into_iter().map(|x| x as f32).collect()),
                    grads,
                );
            }
            Op::AddRowVec(a, v) => {
                add_to(*a, g.clone(), grads);
                let tv = val(*v);
                let c = tv.numel();
                let rn = val(*a).rows();
                let mut dv = vec![0.0f64; c];
                for i in 0..rn {
                    for j in 0..c {
                        dv[j] += g.data[i * c + j] as f64;
                    }
                }
                add_to(
                    *v,
                    Tensor::new(tv.shape.clone(), dv.into_iter().map(|x| x as f32).collect()),
                    grads,
                );
            }
            Op::SoftmaxRows(a) => {
                let y = &n.value;
                let (rn, c) = (y.rows(), y.cols());
                let mut d = vec![0.0; rn * c];
                for i in 0..rn {
                    let yr = &y.data[i * c..(i + 1) * c];
                    let gr = &g.data[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| (yv * gv) as f64).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot as f32);
                    }
                }
                add_to(*a, Tensor::new(y.shape.clone(), d), grads);
            }
            Op::LayerNormRows { x, gain, eps } => {
                let tx = val(*x);
                let tg = val(*gain);
                let (rn, c) = (tx.rows(), tx.cols());
                let mut dx = vec![0.0; rn * c];
                let mut dg = vec![0.0f64; c];
                for i in 0..rn {
                    let row = &tx.data[i * c..(i + 1) * c];
                    let gr = &g.data[i * c..(i + 1) * c];
                    let (mean, var) = mean_var(row);
                    let inv = 1.0 / (var + eps).sqrt();
                    // normalized value before gain
                    let mut sum_gy = 0.0f64;
                    let mut sum_gyx = 0.0f64;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let gy = gr[j] * tg.data[j];
                        sum_gy += gy as f64;
                        sum_gyx += (gy * xhat) as f64;
                        dg[j] += (gr[j] * xhat) as f64;
                    }
                    let m = c as f32;
                    for j in 0..c {
                        let xhat = (row[j] - mean) * inv;
                        let gy = gr[j] * tg.data[j];
                        dx[i * c + j] =
                            inv * (gy - sum_gy as f32 / m - xhat * sum_gyx as f32 / m);
                    }
                }
                add_to(*x, Tensor::new(tx.shape.clone(), dx), grads);
                add_to(
                    *gain,
                    Tensor::new(tg.shape.clone(), dg.into_iter().map(|x| x as f32).collect()),
                    grads,
                );
            }
            Op::Concat0(parts) => {
                let mut start = 0;
                let c = n.value.cols();
                for &p in parts {
                    let t = val(p);
                    let rn = t.rows();
                    let d = g.data[start * c..(start + rn) * c].to_vec();
                    add_to(p, Tensor::new(t.shape.clone(), d), grads);
                    start += rn;
                }
            }
            Op::Slice0(a, start, end) => {
                let t = val(*a);
                let c = t.cols();
                let mut d = vec![0.0; t.numel()];
                d[start * c..end * c].copy_from_slice(&g.data);
                add_to(*a, Tensor::new(t.shape.clone(), d), grads);
            }
            Op::Gather0(a, idx) => {
                let t = val(*a);
                let c = t.cols();
                let mut d = vec![0.0; t.numel()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += g.data[k * c + j];
                    }
                }
                add_to(*a, Tensor::new(t.shape.clone(), d), grads);
            }
            Op::RepeatRows(a, k) => {
                let t = val(*a);
                let (rn, c) = (t.rows(), t.cols());
                let mut d = vec![0.0; rn * c];
                for i in 0..rn {
                    for rep in 0..*k {
                        for j in 0..c {
                            d[i * c + j] += g.data[(i * k + rep) * c + j];
                        }
                    }
                }
                add_to(*a, Tensor::new(t.shape.clone(), d), grads);
            }
            Op::Concat1(parts) => {
                let total = n.value.cols();
                let rn = n.value.rows();
                let mut off = 0;
                for &p in parts {
                    let t = val(p);
                    let w = t.cols();
                    let mut d = vec![0.0; rn * w];
                    for i in 0..rn {
                        d[i * w..(i + 1) * w]
                            .copy_from_slice(&g.data[i * total + off..i * total + off + w]);
                    }
                    add_to(p, Tensor::new(t.shape.clone(), d), grads);
                    off += w;
                }
            }
            Op::Slice1(a, start, end) => {
                let t = val(*a);
                let (rn, c) = (t.rows(), t.cols());
                let w = end - start;
                let mut d = vec![0.0; rn * c];
                for i in 0..rn {
                    d[i * c + start..i * c + end].copy_from_slice(&g.data[i * w..(i + 1) * w]);
                }
                add_to(*a, Tensor::new(t.shape.clone(), d), grads);
            }
            Op::Reshape(a) => {
                let t = val(*a);
                add_to(*a, Tensor::new(t.shape.clone(), g.data.clone()), grads);
            }
            Op::Bilinear { img, coords, h, w } => {
                let (ti, tc) = (val(*img), val(*coords));
                let c = ti.cols();
                let m = tc.rows();
                let mut dimg = vec![0.0; ti.numel()];
                let mut dcoords = vec![0.0; 2 * m];
                for i in 0..m {
                    let (u, v) = (tc.data[2 * i], tc.data[2 * i + 1]);
                    let gi = &g.data[i * c..(i + 1) * c];
                    bilinear_backward(u, v, *h, *w, &ti.data, c, gi, &mut dimg, &mut dcoords[2 * i..2 * i + 2]);
                }
                add_to(*img, Tensor::new(ti.shape.clone(), dimg), grads);
                add_to(*coords, Tensor::new(tc.shape.clone(), dcoords), grads);
            }
            Op::Conv2dValid { x, kernel, k, h, w } => {
                let t = val(*x);
                let c = t.cols();
                let (oh, ow) = (h - k + 1, w - k + 1);
                let mut d = vec![0.0; t.numel()];
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            let gv = g.data[(oy * ow + ox) * c + ch];
                            if gv == 0.0 {
                                continue;
                            }
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    let pix = (oy + ky) * w + ox + kx;
                                    d[pix * c + ch] += gv * kernel[ky * k + kx];
                                }
                            }
                        }
                    }
                }
                add_to(*x, Tensor::new(t.shape.clone(), d), grads);
            }
            Op::Rasterize(tape) => {
                let inputs = tape.input_grads(self, g);
                for (v, d) in inputs {
                    add_to(v, d, grads);
                }
            }
        }
    }
}

fn op_label(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "Leaf",
        Op::Add(..) => "Add",
        Op::Sub(..) => "Sub",
        Op::Mul(..) => "Mul",
        Op::Div(..) => "Div",
        Op::MatMul(..) => "MatMul",
        Op::ScaleRows(..) => "ScaleRows",
        Op::AddRowVec(..) => "AddRowVec",
        Op::LayerNormRows { .. } => "LayerNormRows",
        Op::Bilinear { .. } => "Bilinear",
        Op::Neg(..) => "Neg",
        Op::Scale(..) => "Scale",
        Op::Offset(..) => "Offset",
        Op::Exp(..) => "Exp",
        Op::Ln(..) => "Ln",
        Op::Sqrt(..) => "Sqrt",
        Op::Abs(..) => "Abs",
        Op::Tanh(..) => "Tanh",
        Op::Logistic(..) => "Logistic",
        Op::Softplus(..) => "Softplus",
        Op::Clamp(..) => "Clamp",
        Op::Huber(..) => "Huber",
        Op::Transpose(..) => "Transpose",
        Op::SumAll(..) => "SumAll",
        Op::MeanAll(..) => "MeanAll",
        Op::RowSum(..) => "RowSum",
        Op::ColSum(..) => "ColSum",
        Op::SoftmaxRows(..) => "SoftmaxRows",
        Op::Slice0(..) => "Slice0",
        Op::Slice1(..) => "Slice1",
        Op::Gather0(..) => "Gather0",
        Op::RepeatRows(..) => "RepeatRows",
        Op::Reshape(..) => "Reshape",
        Op::Conv2dValid { .. } => "Conv2dValid",
        Op::Concat0(..) => "Concat0",
        Op::Concat1(..) => "Concat1",
        Op::Rasterize(..) => "Rasterize",
    }
}

fn for_each_input(op: &Op, mut f: impl FnMut(Var)) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b)
        | Op::ScaleRows(a, b) | Op::AddRowVec(a, b) => {
            f(*a);
            f(*b);
        }
        Op::LayerNormRows { x, gain, .. } => {
            f(*x);
            f(*gain);
        }
        Op::Bilinear { img, coords, .. } => {
            f(*img);
            f(*coords);
        }
        Op::Neg(a) | Op::Scale(a, _) | Op::Offset(a, _) | Op::Exp(a) | Op::Ln(a) | Op::Sqrt(a)
        | Op::Abs(a) | Op::Tanh(a) | Op::Logistic(a) | Op::Softplus(a) | Op::Clamp(a, _, _)
        | Op::Huber(a, _) | Op::Transpose(a) | Op::SumAll(a) | Op::MeanAll(a) | Op::RowSum(a)
        | Op::ColSum(a) | Op::SoftmaxRows(a) | Op::Slice0(a, _, _) | Op::Gather0(a, _)
        | Op::RepeatRows(a, _) | Op::Slice1(a, _, _) | Op::Reshape(a)
        | Op::Conv2dValid { x: a, .. } => f(*a),
        Op::Concat0(parts) | Op::Concat1(parts) => {
            for &p in parts {
                f(p);
            }
        }
        Op::Rasterize(tape) => {
            for v in tape.inputs() {
                f(v);
            }
        }
    }
}

pub fn logistic(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

fn mean_var(row: &[f32]) -> (f32, f32) {
    let n = row.len() as f64;
    let mean: f64 = row.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var: f64 = row.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean as f32, var as f32)
}

/// Elementwise zip, same shape required.
fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    assert_eq!(a.numel(), b.numel(), "zip shape mismatch");
    Tensor::new(
        b.shape.clone(),
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Elementwise with scalar broadcast on either side.
fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    if a.numel() == b.numel() {
        Tensor::new(a.shape.clone(), a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect())
    } else if a.numel() == 1 {
        Tensor::new(b.shape.clone(), b.data.iter().map(|&y| f(a.data[0], y)).collect())
    } else if b.numel() == 1 {
        Tensor::new(a.shape.clone(), a.data.iter().map(|&x| f(x, b.data[0])).collect())
    } else {
        panic!("incompatible shapes {:?} vs {:?}", a.shape, b.shape);
    }
}

/// Sum a gradient down to the shape of `target` when the forward op broadcast
/// a scalar operand.
fn reduce_broadcast(g: &Tensor, target: &Tensor) -> Tensor {
    if g.numel() == target.numel() {
        Tensor::new(target.shape.clone(), g.data.clone())
    } else {
        let s: f64 = g.data.iter().map(|&x| x as f64).sum();
        Tensor::new(target.shape.clone(), vec![s as f32])
    }
}

fn transpose(t: &Tensor) -> Tensor {
    let (n, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for j in 0..c {
            out[j * n + i] = t.data[i * c + j];
        }
    }
    Tensor::new(vec![c, n], out)
}

/// Row-parallel f32 matmul.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    use rayon::prelude::*;
    let (n, k) = (a.rows(), a.cols());
    let (kb, m) = (b.rows(), b.cols());
    assert_eq!(k, kb, "matmul inner dims {:?} x {:?}", a.shape, b.shape);
    let mut out = vec![0.0f32; n * m];
    out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    Tensor::new(vec![n, m], out)
}

/// Per-sample bilinear taps with clamp-to-edge: returns up to 4 (pixel, weight).
pub(crate) fn bilinear_taps(u: f32, v: f32, h: usize, w: usize) -> [(usize, f32); 4] {
    let uc = u.clamp(0.0, (w - 1) as f32);
    let vc = v.clamp(0.0, (h - 1) as f32);
    let x0 = (uc.floor() as usize).min(w - 1);
    let y0 = (vc.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = uc - x0 as f32;
    let fy = vc - y0 as f32;
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

#[allow(clippy::too_many_arguments)]
fn bilinear_backward(
    u: f32,
    v: f32,
    h: usize,
    w: usize,
    img: &[f32],
    c: usize,
    g: &[f32],
    dimg: &mut [f32],
    dcoords: &mut [f32],
) {
    let uc = u.clamp(0.0, (w - 1) as f32);
    let vc = v.clamp(0.0, (h - 1) as f32);
    let x0 = (uc.floor() as usize).min(w - 1);
    let y0 = (vc.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = uc - x0 as f32;
    let fy = vc - y0 as f32;
    let corners = [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ];
    for (pix, wt) in corners {
        for ch in 0..c {
            dimg[pix * c + ch] += wt * g[ch];
        }
    }
    // derivative w.r.t. the continuous coordinates; zero in the clamp region
    let in_u = u > 0.0 && u < (w - 1) as f32;
    let in_v = v > 0.0 && v < (h - 1) as f32;
    let mut du = 0.0;
    let mut dv = 0.0;
    for ch in 0..c {
        let i00 = img[(y0 * w + x0) * c + ch];
        let i01 = img[(y0 * w + x1) * c + ch];
        let i10 = img[(y1 * w + x0) * c + ch];
        let i11 = img[(y1 * w + x1) * c + ch];
        du += g[ch] * ((1.0 - fy) * (i01 - i00) + fy * (i11 - i10));
        dv += g[ch] * ((1.0 - fx) * (i10 - i00) + fx * (i11 - i01));
    }
    if in_u {
        dcoords[0] += du;
    }
    if in_v {
        dcoords[1] += dv;
    }
}
