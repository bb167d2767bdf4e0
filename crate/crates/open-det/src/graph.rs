//! Tape-based reverse-mode autodiff over [`Tensor`].
//!
//! A [`Graph`] owns a flat list of nodes; builder methods evaluate eagerly and
//! record the op for the backward pass. Gradients only propagate into nodes
//! whose `needs_grad` flag is set (leaves created with [`Graph::leaf`], or ops
//! touching one), so frozen parameters and constants receive exactly zero
//! gradient by construction.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MinElem(NodeId, NodeId),
    MaxElem(NodeId, NodeId),
    Neg(NodeId),
    Abs(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    PowScalar(NodeId, f64),
    Clamp(NodeId, f64, f64),
    /// Multiply a tensor by a single-element node.
    ScaleBy(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    RowNormalize(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    SumAll(NodeId),
    SumRows(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    IndexSelectRows(NodeId, Vec<usize>),
    PickPerRow(NodeId, Vec<usize>),
    AddBias(NodeId, NodeId),
    MulBias(NodeId, NodeId),
    LayerNormRows(NodeId, f64),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    /// Bilinear samples from a (C,H,W) map at P normalized (x,y) coords.
    BilinearSample {
        map: NodeId,
        coords: NodeId,
    },
    /// out[i] = sum_k weights[i,k] * samples[i*K + k, :]
    GroupWeightedSum {
        samples: NodeId,
        weights: NodeId,
    },
    Reshape(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Differentiable leaf (a trainable parameter or gradcheck input).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf; never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated by the last `backward` run, if any reached `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    // ---- elementwise binary ----

    fn zip2(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = va.shape().to_vec();
        let needs = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(data, &shape), op, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, Op::MinElem(a, b), f64::min)
    }

    pub fn max_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, Op::MaxElem(a, b), f64::max)
    }

    // ---- elementwise unary ----

    fn map1(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| f(x)).collect();
        let shape = va.shape().to_vec();
        let needs = self.ng(a);
        self.push(Tensor::from_vec(data, &shape), op, needs)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.map1(a, Op::Neg(a), |x| -x)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.map1(a, Op::Abs(a), f64::abs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map1(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map1(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map1(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map1(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.map1(a, Op::Ln(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.map1(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map1(a, Op::AddScalar(a, c), |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map1(a, Op::MulScalar(a, c), |x| x * c)
    }

    /// x^c for x >= 0; gradient at x == 0 is defined as 0.
    pub fn pow_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.map1(a, Op::PowScalar(a, c), |x| x.powf(c))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.map1(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Multiply every entry of `a` by the single-element node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.nodes[s.0].value.numel(), 1, "scale_by needs scalar node");
        let sv = self.nodes[s.0].value.item();
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| x * sv).collect();
        let shape = va.shape().to_vec();
        let needs = self.ng(a) || self.ng(s);
        self.push(Tensor::from_vec(data, &shape), Op::ScaleBy(a, s), needs)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k) = (va.rows(), va.cols());
        let (k2, m) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul inner dims: {}x{} * {}x{}", n, k, k2, m);
        let mut out = vec![0.0; n * m];
        matmul_nn(va.data(), vb.data(), n, k, m, &mut out);
        let needs = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(out, &[n, m]), Op::MatMul(a, b), needs)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (n, m) = (va.rows(), va.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = va.data()[i * m + j];
            }
        }
        let needs = self.ng(a);
        self.push(Tensor::from_vec(out, &[m, n]), Op::Transpose(a), needs)
    }

    /// Scale each row to unit L2 norm; all-zero rows stay zero.
    pub fn row_normalize(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (n, d) = (va.rows(), va.cols());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &va.data()[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > ZERO_NORM_EPS {
                for j in 0..d {
                    out[i * d + j] = row[j] / norm;
                }
            }
        }
        let needs = self.ng(a);
        self.push(Tensor::from_vec(out, &[n, d]), Op::RowNormalize(a), needs)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (n, d) = (va.rows(), va.cols());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &va.data()[i * d..(i + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..d {
                let e = (row[j] - max).exp();
                out[i * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                out[i * d + j] /= sum;
            }
        }
        let needs = self.ng(a);
        self.push(Tensor::from_vec(out, &[n, d]), Op::SoftmaxRows(a), needs)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (n, d) = (va.rows(), va.cols());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &va.data()[i * d..(i + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            for j in 0..d {
                out[i * d + j] = row[j] - log_sum;
            }
        }
        let needs = self.ng(a);
        self.push(Tensor::from_vec(out, &[n, d]), Op::LogSoftmaxRows(a), needs)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.data().iter().sum();
        let needs = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Row sums of a 2-d tensor, shape (n, 1).
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (n, d) = (va.rows(), va.cols());
        let out = (0..n)
            .map(|i| va.data()[i * d..(i + 1) * d].iter().sum())
            .collect();
        let needs = self.ng(a);
        self.push(Tensor::from_vec(out, &[n, 1]), Op::SumRows(a), needs)
    }

    // ---- structure ----

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = vec![0.0; n * total];
        let mut offset = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.rows(), n, "concat_cols row mismatch");
            let d = v.cols();
            for i in 0..n {
                out[i * total + offset..i * total + offset + d]
                    .copy_from_slice(&v.data()[i * d..(i + 1) * d]);
            }
            offset += d;
        }
        let needs = parts.iter().any(|p| self.ng(*p));
        self.push(
            Tensor::from_vec(out, &[n, total]),
            Op::ConcatCols(parts.to_vec()),
            needs,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let d = self.nodes[parts[0].0].value.cols();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.rows()).sum();
        let mut out = Vec::with_capacity(total * d);
        for p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.cols(), d, "concat_rows col mismatch");
            out.extend_from_slice(v.data());
        }
        let needs = parts.iter().any(|p| self.ng(*p));
        self.push(
            Tensor::from_vec(out, &[total, d]),
            Op::ConcatRows(parts.to_vec()),
            needs,
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (n, d) = (va.rows(), va.cols());
        assert!(start + len <= d, "slice_cols out of range");
        let mut out = vec![0.0; n * len];
        for i in 0..n {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&va.data()[i * d + start..i * d + start + len]);
        }
        let needs = self.ng(a);
        self.push(
            Tensor::from_vec(out, &[n, len]),
            Op::SliceCols(a, start, len),
            needs,
        )
    }

    /// Gather rows by index; duplicate indices are allowed (grads accumulate).
    pub fn index_select_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (n, d) = (va.rows(), va.cols());
        let mut out = Vec::with_capacity(indices.len() * d);
        for &idx in indices {
            assert!(idx < n, "row index {} out of {}", idx, n);
            out.extend_from_slice(&va.data()[idx * d..(idx + 1) * d]);
        }
        let needs = self.ng(a);
        self.push(
            Tensor::from_vec(out, &[indices.len(), d]),
            Op::IndexSelectRows(a, indices.to_vec()),
            needs,
        )
    }

    /// out[i] = a[i, cols[i]], shape (n, 1).
    pub fn pick_per_row(&mut self, a: NodeId, cols: &[usize]) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (n, d) = (va.rows(), va.cols());
        assert_eq!(cols.len(), n, "pick_per_row needs one column per row");
        let out = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                assert!(c < d, "column {} out of {}", c, d);
                va.data()[i * d + c]
            })
            .collect();
        let needs = self.ng(a);
        self.push(
            Tensor::from_vec(out, &[n, 1]),
            Op::PickPerRow(a, cols.to_vec()),
            needs,
        )
    }

    /// (n,d) + (d,) broadcast over rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let (n, d) = (va.rows(), va.cols());
        assert_eq!(vb.numel(), d, "bias length mismatch");
        let mut out = va.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += vb.data()[j];
            }
        }
        let needs = self.ng(a) || self.ng(bias);
        self.push(Tensor::from_vec(out, &[n, d]), Op::AddBias(a, bias), needs)
    }

    /// (n,d) * (d,) broadcast over rows.
    pub fn mul_bias(&mut self, a: NodeId, scale: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[scale.0].value);
        let (n, d) = (va.rows(), va.cols());
        assert_eq!(vb.numel(), d, "scale length mismatch");
        let mut out = va.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] *= vb.data()[j];
            }
        }
        let needs = self.ng(a) || self.ng(scale);
        self.push(Tensor::from_vec(out, &[n, d]), Op::MulBias(a, scale), needs)
    }

    /// Per-row standardization (zero mean, unit variance); no affine part.
    pub fn layer_norm_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (n, d) = (va.rows(), va.cols());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &va.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * inv;
            }
        }
        let needs = self.ng(a);
        self.push(
            Tensor::from_vec(out, &[n, d]),
            Op::LayerNormRows(a, eps),
            needs,
        )
    }

    /// 2-d convolution over a (C,H,W) input with (O,C,k,k) weights.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let vi = &self.nodes[input.0].value;
        let vw = &self.nodes[weight.0].value;
        let vb = &self.nodes[bias.0].value;
        let (c, h, w) = chw(vi.shape());
        let ws = vw.shape();
        assert_eq!(ws.len(), 4, "conv weight must be (O,C,k,k)");
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wc, c, "conv channel mismatch");
        assert_eq!(kh, kw, "square kernels only");
        assert_eq!(vb.numel(), o, "conv bias mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; o * oh * ow];
        conv2d_forward(
            vi.data(),
            vw.data(),
            vb.data(),
            c,
            h,
            w,
            o,
            kh,
            stride,
            pad,
            oh,
            ow,
            &mut out,
        );
        let needs = self.ng(input) || self.ng(weight) || self.ng(bias);
        self.push(
            Tensor::from_vec(out, &[o, oh, ow]),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            needs,
        )
    }

    /// Bilinear samples from `map` (C,H,W) at `coords` (P,2) normalized (x,y)
    /// in [0,1]; points are clamped to the map border. Output (P,C).
    pub fn bilinear_sample(&mut self, map: NodeId, coords: NodeId) -> NodeId {
        let vm = &self.nodes[map.0].value;
        let vc = &self.nodes[coords.0].value;
        let (c, h, w) = chw(vm.shape());
        let p = vc.rows();
        assert_eq!(vc.cols(), 2, "coords must be (P,2)");
        let mut out = vec![0.0; p * c];
        for i in 0..p {
            let (px, py) = to_pixel(vc.data()[i * 2], vc.data()[i * 2 + 1], h, w);
            let (x0, x1, fx) = split_coord(px, w);
            let (y0, y1, fy) = split_coord(py, h);
            for ch in 0..c {
                let base = ch * h * w;
                let v00 = vm.data()[base + y0 * w + x0];
                let v01 = vm.data()[base + y0 * w + x1];
                let v10 = vm.data()[base + y1 * w + x0];
                let v11 = vm.data()[base + y1 * w + x1];
                out[i * c + ch] =
                    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
            }
        }
        let needs = self.ng(map) || self.ng(coords);
        self.push(
            Tensor::from_vec(out, &[p, c]),
            Op::BilinearSample { map, coords },
            needs,
        )
    }

    /// Weighted pooling of K consecutive sample rows per group:
    /// out[i] = sum_k weights[i,k] * samples[i*K+k, :].
    pub fn group_weighted_sum(&mut self, samples: NodeId, weights: NodeId) -> NodeId {
        let vs = &self.nodes[samples.0].value;
        let vw = &self.nodes[weights.0].value;
        let (n, k) = (vw.rows(), vw.cols());
        let c = vs.cols();
        assert_eq!(vs.rows(), n * k, "samples rows must be N*K");
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for kk in 0..k {
                let wv = vw.data()[i * k + kk];
                let row = &vs.data()[(i * k + kk) * c..(i * k + kk + 1) * c];
                for ch in 0..c {
                    out[i * c + ch] += wv * row[ch];
                }
            }
        }
        let needs = self.ng(samples) || self.ng(weights);
        self.push(
            Tensor::from_vec(out, &[n, c]),
            Op::GroupWeightedSum { samples, weights },
            needs,
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let va = &self.nodes[a.0].value;
        let t = va.reshaped(shape);
        let needs = self.ng(a);
        self.push(t, Op::Reshape(a), needs)
    }

    // ---- composites ----

    /// x @ w + b
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    /// Backpropagate from a single-element loss node.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward needs a scalar loss"
        );
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            self.apply_backward(i, &grad);
            self.grads[i] = Some(grad);
        }
    }

    fn accum(&mut self, id: NodeId, f: impl FnOnce(&[f64], &mut [f64])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        if self.grads[id.0].is_none() {
            self.grads[id.0] = Some(Tensor::zeros(self.nodes[id.0].value.shape()));
        }
        let Graph { nodes, grads } = self;
        f(
            nodes[id.0].value.data(),
            grads[id.0].as_mut().unwrap().data_mut(),
        );
    }

    fn apply_backward(&mut self, i: usize, grad: &Tensor) {
        let g = grad.data();
        // Clone small op metadata up front to end the immutable borrow.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accum(a, |_, da| axpy(1.0, g, da));
                self.accum(b, |_, db| axpy(1.0, g, db));
            }
            &Op::Sub(a, b) => {
                self.accum(a, |_, da| axpy(1.0, g, da));
                self.accum(b, |_, db| axpy(-1.0, g, db));
            }
            &Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.data().to_vec();
                let av = self.nodes[a.0].value.data().to_vec();
                self.accum(a, |_, da| {
                    for k in 0..g.len() {
                        da[k] += g[k] * bv[k];
                    }
                });
                self.accum(b, |_, db| {
                    for k in 0..g.len() {
                        db[k] += g[k] * av[k];
                    }
                });
            }
            &Op::Div(a, b) => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                self.accum(a, |_, da| {
                    for k in 0..g.len() {
                        da[k] += g[k] / bv[k];
                    }
                });
                self.accum(b, |_, db| {
                    for k in 0..g.len() {
                        db[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                });
            }
            &Op::MinElem(a, b) | &Op::MaxElem(a, b) => {
                let is_min = matches!(self.nodes[i].op, Op::MinElem(..));
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                // Ties route the gradient to the first argument.
                let a_wins: Vec<bool> = av
                    .iter()
                    .zip(&bv)
                    .map(|(&x, &y)| if is_min { x <= y } else { x >= y })
                    .collect();
                let aw = a_wins.clone();
                self.accum(a, |_, da| {
                    for k in 0..g.len() {
                        if aw[k] {
                            da[k] += g[k];
                        }
                    }
                });
                self.accum(b, |_, db| {
                    for k in 0..g.len() {
                        if !a_wins[k] {
                            db[k] += g[k];
                        }
                    }
                });
            }
            &Op::Neg(a) => self.accum(a, |_, da| axpy(-1.0, g, da)),
            &Op::Abs(a) => self.accum(a, |av, da| {
                for k in 0..g.len() {
                    da[k] += g[k] * av[k].signum() * if av[k] == 0.0 { 0.0 } else { 1.0 };
                }
            }),
            &Op::Relu(a) => self.accum(a, |av, da| {
                for k in 0..g.len() {
                    if av[k] > 0.0 {
                        da[k] += g[k];
                    }
                }
            }),
            &Op::Sigmoid(a) => {
                let yv = self.nodes[i].value.data().to_vec();
                self.accum(a, |_, da| {
                    for k in 0..g.len() {
                        da[k] += g[k] * yv[k] * (1.0 - yv[k]);
                    }
                });
            }
            &Op::Tanh(a) => {
                let yv = self.nodes[i].value.data().to_vec();
                self.accum(a, |_, da| {
                    for k in 0..g.len() {
                        da[k] += g[k] * (1.0 - yv[k] * yv[k]);
                    }
                });
            }
            &Op::Exp(a) => {
                let yv = self.nodes[i].value.data().to_vec();
                self.accum(a, |_, da| {
                    for k in 0..g.len() {
                        da[k] += g[k] * yv[k];
                    }
                });
            }
            &Op::Ln(a) => self.accum(a, |av, da| {
                for k in 0..g.len() {
                    da[k] += g[k] / av[k];
                }
            }),
            &Op::Sqrt(a) => {
                let yv = self.nodes[i].value.data().to_vec();
                self.accum(a, |_, da| {
                    for k in 0..g.len() {
                        da[k] += g[k] * 0.5 / yv[k];
                    }
                });
            }
            &Op::AddScalar(a, _) => self.accum(a, |_, da| axpy(1.0, g, da)),
            &Op::MulScalar(a, c) => self.accum(a, |_, da| axpy(c, g, da)),
            &Op::PowScalar(a, c) => self.accum(a, |av, da| {
                for k in 0..g.len() {
                    if av[k] != 0.0 {
                        da[k] += g[k] * c * av[k].powf(c - 1.0);
                    }
                }
            }),
            &Op::Clamp(a, lo, hi) => self.accum(a, |av, da| {
                for k in 0..g.len() {
                    if av[k] > lo && av[k] < hi {
                        da[k] += g[k];
                    }
                }
            }),
            &Op::ScaleBy(a, s) => {
                let sv = self.nodes[s.0].value.item();
                let av = self.nodes[a.0].value.data().to_vec();
                self.accum(a, |_, da| axpy(sv, g, da));
                self.accum(s, |_, ds| {
                    ds[0] += g.iter().zip(&av).map(|(&gk, &ak)| gk * ak).sum::<f64>();
                });
            }
            &Op::MatMul(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let (n, k) = (av.rows(), av.cols());
                let m = bv.cols();
                self.accum(a, |_, da| matmul_nt(g, bv.data(), n, m, k, da));
                self.accum(b, |_, db| matmul_tn(av.data(), g, n, k, m, db));
            }
            &Op::Transpose(a) => {
                let (m, n) = {
                    let v = self.nodes[i].value.shape();
                    (v[0], v[1])
                };
                self.accum(a, |_, da| {
                    for r in 0..m {
                        for c in 0..n {
                            da[c * m + r] += g[r * n + c];
                        }
                    }
                });
            }
            &Op::RowNormalize(a) => {
                let y = self.nodes[i].value.clone();
                let (n, d) = (y.rows(), y.cols());
                self.accum(a, |av, da| {
                    for r in 0..n {
                        let xr = &av[r * d..(r + 1) * d];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm <= ZERO_NORM_EPS {
                            continue;
                        }
                        let yr = &y.data()[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..d {
                            da[r * d + c] += (gr[c] - yr[c] * dot) / norm;
                        }
                    }
                });
            }
            &Op::SoftmaxRows(a) => {
                let y = self.nodes[i].value.clone();
                let (n, d) = (y.rows(), y.cols());
                self.accum(a, |_, da| {
                    for r in 0..n {
                        let yr = &y.data()[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..d {
                            da[r * d + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmaxRows(a) => {
                let y = self.nodes[i].value.clone();
                let (n, d) = (y.rows(), y.cols());
                self.accum(a, |_, da| {
                    for r in 0..n {
                        let yr = &y.data()[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..d {
                            da[r * d + c] += gr[c] - yr[c].exp() * gsum;
                        }
                    }
                });
            }
            &Op::SumAll(a) => self.accum(a, |_, da| {
                for v in da.iter_mut() {
                    *v += g[0];
                }
            }),
            &Op::SumRows(a) => {
                let d = self.nodes[a.0].value.cols();
                self.accum(a, |_, da| {
                    for (r, &gv) in g.iter().enumerate() {
                        for c in 0..d {
                            da[r * d + c] += gv;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let total = self.nodes[i].value.cols();
                let n = self.nodes[i].value.rows();
                let mut offset = 0;
                for p in parts {
                    let d = self.nodes[p.0].value.cols();
                    let off = offset;
                    self.accum(p, |_, dp| {
                        for r in 0..n {
                            for c in 0..d {
                                dp[r * d + c] += g[r * total + off + c];
                            }
                        }
                    });
                    offset += d;
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let d = self.nodes[i].value.cols();
                let mut row_off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.rows();
                    let off = row_off;
                    self.accum(p, |_, dp| {
                        dp[..n * d].iter_mut().enumerate().for_each(|(k, v)| {
                            *v += g[off * d + k];
                        });
                    });
                    row_off += n;
                }
            }
            &Op::SliceCols(a, start, len) => {
                let d = self.nodes[a.0].value.cols();
                let n = self.nodes[a.0].value.rows();
                self.accum(a, |_, da| {
                    for r in 0..n {
                        for c in 0..len {
                            da[r * d + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::IndexSelectRows(a, indices) => {
                let a = *a;
                let indices = indices.clone();
                let d = self.nodes[a.0].value.cols();
                self.accum(a, |_, da| {
                    for (k, &src) in indices.iter().enumerate() {
                        for c in 0..d {
                            da[src * d + c] += g[k * d + c];
                        }
                    }
                });
            }
            Op::PickPerRow(a, cols) => {
                let a = *a;
                let cols = cols.clone();
                let d = self.nodes[a.0].value.cols();
                self.accum(a, |_, da| {
                    for (r, &c) in cols.iter().enumerate() {
                        da[r * d + c] += g[r];
                    }
                });
            }
            &Op::AddBias(a, bias) => {
                let (n, d) = {
                    let v = &self.nodes[a.0].value;
                    (v.rows(), v.cols())
                };
                self.accum(a, |_, da| axpy(1.0, g, da));
                self.accum(bias, |_, db| {
                    for r in 0..n {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                });
            }
            &Op::MulBias(a, scale) => {
                let (n, d) = {
                    let v = &self.nodes[a.0].value;
                    (v.rows(), v.cols())
                };
                let av = self.nodes[a.0].value.data().to_vec();
                let sv = self.nodes[scale.0].value.data().to_vec();
                self.accum(a, |_, da| {
                    for r in 0..n {
                        for c in 0..d {
                            da[r * d + c] += g[r * d + c] * sv[c];
                        }
                    }
                });
                self.accum(scale, |_, ds| {
                    for r in 0..n {
                        for c in 0..d {
                            ds[c] += g[r * d + c] * av[r * d + c];
                        }
                    }
                });
            }
            &Op::LayerNormRows(a, eps) => {
                let y = self.nodes[i].value.clone();
                let (n, d) = (y.rows(), y.cols());
                self.accum(a, |av, da| {
                    for r in 0..n {
                        let xr = &av[r * d..(r + 1) * d];
                        let mean = xr.iter().sum::<f64>() / d as f64;
                        let var =
                            xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let yr = &y.data()[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let g_mean = gr.iter().sum::<f64>() / d as f64;
                        let gy_mean =
                            gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            da[r * d + c] += inv * (gr[c] - g_mean - yr[c] * gy_mean);
                        }
                    }
                });
            }
            &Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let vi = self.nodes[input.0].value.clone();
                let vw = self.nodes[weight.0].value.clone();
                let (c, h, w) = chw(vi.shape());
                let ws = vw.shape().to_vec();
                let (o, k) = (ws[0], ws[2]);
                let (oh, ow) = {
                    let os = self.nodes[i].value.shape();
                    (os[1], os[2])
                };
                self.accum(input, |_, di| {
                    conv2d_backward_input(g, vw.data(), c, h, w, o, k, stride, pad, oh, ow, di);
                });
                self.accum(weight, |_, dw| {
                    conv2d_backward_weight(g, vi.data(), c, h, w, o, k, stride, pad, oh, ow, dw);
                });
                self.accum(bias, |_, db| {
                    for oc in 0..o {
                        db[oc] += g[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f64>();
                    }
                });
            }
            &Op::BilinearSample { map, coords } => {
                let vm = self.nodes[map.0].value.clone();
                let vc = self.nodes[coords.0].value.clone();
                let (c, h, w) = chw(vm.shape());
                let p = vc.rows();
                self.accum(map, |_, dm| {
                    for ip in 0..p {
                        let (px, py) = to_pixel(vc.data()[ip * 2], vc.data()[ip * 2 + 1], h, w);
                        let (x0, x1, fx) = split_coord(px, w);
                        let (y0, y1, fy) = split_coord(py, h);
                        for ch in 0..c {
                            let base = ch * h * w;
                            let gv = g[ip * c + ch];
                            dm[base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dm[base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dm[base + y1 * w + x0] += gv * fy * (1.0 - fx);
                            dm[base + y1 * w + x1] += gv * fy * fx;
                        }
                    }
                });
                self.accum(coords, |_, dc| {
                    for ip in 0..p {
                        let (cx, cy) = (vc.data()[ip * 2], vc.data()[ip * 2 + 1]);
                        let (px, py) = to_pixel(cx, cy, h, w);
                        let (x0, x1, fx) = split_coord(px, w);
                        let (y0, y1, fy) = split_coord(py, h);
                        // Clamped samples have zero derivative w.r.t. coords.
                        let px_raw = cx * (w - 1) as f64;
                        let py_raw = cy * (h - 1) as f64;
                        let x_active = px_raw > 0.0 && px_raw < (w - 1) as f64;
                        let y_active = py_raw > 0.0 && py_raw < (h - 1) as f64;
                        let mut dpx = 0.0;
                        let mut dpy = 0.0;
                        for ch in 0..c {
                            let base = ch * h * w;
                            let v00 = vm.data()[base + y0 * w + x0];
                            let v01 = vm.data()[base + y0 * w + x1];
                            let v10 = vm.data()[base + y1 * w + x0];
                            let v11 = vm.data()[base + y1 * w + x1];
                            let gv = g[ip * c + ch];
                            dpx += gv * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                            dpy += gv * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                        }
                        if x_active {
                            dc[ip * 2] += dpx * (w - 1) as f64;
                        }
                        if y_active {
                            dc[ip * 2 + 1] += dpy * (h - 1) as f64;
                        }
                    }
                });
            }
            &Op::GroupWeightedSum { samples, weights } => {
                let vw = self.nodes[weights.0].value.clone();
                let vs = self.nodes[samples.0].value.clone();
                let (n, k) = (vw.rows(), vw.cols());
                let c = vs.cols();
                self.accum(samples, |_, ds| {
                    for ii in 0..n {
                        for kk in 0..k {
                            let wv = vw.data()[ii * k + kk];
                            for ch in 0..c {
                                ds[(ii * k + kk) * c + ch] += g[ii * c + ch] * wv;
                            }
                        }
                    }
                });
                self.accum(weights, |_, dw| {
                    for ii in 0..n {
                        for kk in 0..k {
                            let row = &vs.data()[(ii * k + kk) * c..(ii * k + kk + 1) * c];
                            let mut dot = 0.0;
                            for ch in 0..c {
                                dot += g[ii * c + ch] * row[ch];
                            }
                            dw[ii * k + kk] += dot;
                        }
                    }
                });
            }
            &Op::Reshape(a) => self.accum(a, |_, da| axpy(1.0, g, da)),
        }
    }
}

const ZERO_NORM_EPS: f64 = 1e-12;

fn chw(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected (C,H,W), got {:?}", shape);
    (shape[0], shape[1], shape[2])
}

fn to_pixel(cx: f64, cy: f64, h: usize, w: usize) -> (f64, f64) {
    let px = (cx * (w - 1) as f64).clamp(0.0, (w - 1) as f64);
    let py = (cy * (h - 1) as f64).clamp(0.0, (h - 1) as f64);
    (px, py)
}

fn split_coord(p: f64, extent: usize) -> (usize, usize, f64) {
    let p0 = p.floor() as usize;
    let p0 = p0.min(extent - 1);
    let p1 = (p0 + 1).min(extent - 1);
    (p0, p1, p - p0 as f64)
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// out += a (n,k) @ b (k,m)
fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += a (n,m) @ b^T where b is (k,m); result (n,k)
fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize, out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for kk in 0..k {
            let brow = &b[kk * m..(kk + 1) * m];
            let mut dot = 0.0;
            for j in 0..m {
                dot += arow[j] * brow[j];
            }
            out[i * k + kk] += dot;
        }
    }
}

/// out += a^T (k,n) @ b (n,m) where a is (n,k); result (k,m)
fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * m..(kk + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [f64],
) {
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += weight[((oc * c + ic) * k + ky) * k + kx]
                                * input[(ic * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    gout: &[f64],
    weight: &[f64],
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dinput: &mut [f64],
) {
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = gout[(oc * oh + oy) * ow + ox];
                if gv == 0.0 {
                    continue;
                }
                for ic in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dinput[(ic * h + iy as usize) * w + ix as usize] +=
                                gv * weight[((oc * c + ic) * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight(
    gout: &[f64],
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dweight: &mut [f64],
) {
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let gv = gout[(oc * oh + oy) * ow + ox];
                if gv == 0.0 {
                    continue;
                }
                for ic in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dweight[((oc * c + ic) * k + ky) * k + kx] +=
                                gv * input[(ic * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use open_det_oracles::{finite_diff_gradient, max_rel_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Gradcheck harness: builds a scalar loss from a single leaf tensor and
    /// compares the analytic gradient against central finite differences.
    fn gradcheck(
        shape: &[usize],
        init: impl Fn(&mut ChaCha8Rng) -> Tensor,
        build: impl Fn(&mut Graph, NodeId) -> NodeId,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x0 = init(&mut rng);
        assert_eq!(x0.shape(), shape);

        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let loss = build(&mut g, x);
        g.backward(loss);
        let analytic = g.grad(x).expect("no grad reached input").data().to_vec();

        let f = |v: &[f64]| {
            let mut g2 = Graph::new();
            let x2 = g2.leaf(Tensor::from_vec(v.to_vec(), shape));
            let l = build(&mut g2, x2);
            g2.value(l).item()
        };
        let numeric = finite_diff_gradient(&f, x0.data(), 1e-6);
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < tol, "gradcheck failed: rel err {}", err);
    }

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(shape, 1.0, rng)
    }

    #[test]
    fn grad_elementwise_chain() {
        gradcheck(
            &[3, 4],
            |r| randn(&[3, 4], r),
            |g, x| {
                let a = g.tanh(x);
                let b = g.sigmoid(a);
                let c = g.mul(b, a);
                let d = g.exp(c);
                g.mean_all(d)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_div_abs_minmax() {
        gradcheck(
            &[2, 5],
            |r| {
                let mut t = randn(&[2, 5], r);
                // keep denominators away from zero
                for v in t.data_mut() {
                    *v = *v + if *v >= 0.0 { 1.5 } else { -1.5 };
                }
                t
            },
            |g, x| {
                let c = g.constant(Tensor::full(&[2, 5], 0.7));
                let d = g.div(c, x);
                let a = g.abs(x);
                let mn = g.min_elem(d, a);
                let mx = g.max_elem(d, a);
                let s = g.add(mn, mx);
                g.mean_all(s)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_matmul_transpose_linear() {
        gradcheck(
            &[4, 3],
            |r| randn(&[4, 3], r),
            |g, x| {
                let w = g.constant(Tensor::from_vec(
                    (0..12).map(|i| (i as f64 * 0.37).sin()).collect(),
                    &[3, 4],
                ));
                let b = g.constant(Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.4], &[4]));
                let h = g.linear(x, w, b);
                let t = g.transpose(h);
                let hh = g.matmul(t, x);
                g.mean_all(hh)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_softmax_logsoftmax_layernorm() {
        gradcheck(
            &[3, 6],
            |r| randn(&[3, 6], r),
            |g, x| {
                let s = g.softmax_rows(x);
                let l = g.log_softmax_rows(x);
                let n = g.layer_norm_rows(x, 1e-5);
                let a = g.mul(s, l);
                let b = g.add(a, n);
                g.mean_all(b)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_row_normalize() {
        gradcheck(
            &[4, 5],
            |r| randn(&[4, 5], r),
            |g, x| {
                let n = g.row_normalize(x);
                let c = g.constant(Tensor::from_vec(
                    (0..20).map(|i| (i as f64 * 0.17).cos()).collect(),
                    &[4, 5],
                ));
                let p = g.mul(n, c);
                g.mean_all(p)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_structure_ops() {
        gradcheck(
            &[5, 4],
            |r| randn(&[5, 4], r),
            |g, x| {
                let s1 = g.slice_cols(x, 0, 2);
                let s2 = g.slice_cols(x, 2, 2);
                let cat = g.concat_cols(&[s2, s1]);
                let sel = g.index_select_rows(cat, &[0, 2, 2, 4]);
                let pick = g.pick_per_row(sel, &[1, 0, 3, 2]);
                let rows = g.concat_rows(&[pick, pick]);
                g.mean_all(rows)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_bias_scale_ops() {
        gradcheck(
            &[6],
            |r| randn(&[6], r),
            |g, b| {
                let x = g.constant(Tensor::from_vec(
                    (0..18).map(|i| (i as f64 * 0.29).sin()).collect(),
                    &[3, 6],
                ));
                let h1 = g.add_bias(x, b);
                let h2 = g.mul_bias(h1, b);
                g.mean_all(h2)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_scale_by_scalar_node() {
        gradcheck(
            &[1],
            |_| Tensor::scalar(3.0),
            |g, s| {
                let x = g.constant(Tensor::from_vec(vec![0.5, -1.0, 2.0], &[3, 1]));
                let y = g.scale_by(x, s);
                let z = g.sigmoid(y);
                g.mean_all(z)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_reductions_and_pow() {
        gradcheck(
            &[3, 3],
            |r| {
                let mut t = randn(&[3, 3], r);
                for v in t.data_mut() {
                    *v = v.abs() + 0.2;
                }
                t
            },
            |g, x| {
                let p = g.pow_scalar(x, 0.25);
                let q = g.sqrt(x);
                let l = g.ln(x);
                let sr = g.sum_rows(p);
                let m1 = g.mean_all(sr);
                let a = g.mul(q, l);
                let m2 = g.mean_all(a);
                g.add(m1, m2)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_conv2d() {
        gradcheck(
            &[2, 5, 5],
            |r| randn(&[2, 5, 5], r),
            |g, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let w = g.constant(Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng));
                let b = g.constant(Tensor::from_vec(vec![0.1, 0.2, -0.1], &[3]));
                let y = g.conv2d(x, w, b, 2, 1);
                let flat = g.reshape(y, &[3 * 3 * 3, 1]);
                let sq = g.mul(flat, flat);
                g.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_conv2d_weight_and_bias() {
        gradcheck(
            &[2, 1, 3, 3],
            |r| randn(&[2, 1, 3, 3], r),
            |g, w| {
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                let x = g.constant(Tensor::randn(&[1, 6, 6], 1.0, &mut rng));
                let b = g.constant(Tensor::from_vec(vec![0.0, 0.3], &[2]));
                let y = g.conv2d(x, w, b, 1, 0);
                let flat = g.reshape(y, &[2 * 4 * 4, 1]);
                let t = g.tanh(flat);
                g.mean_all(t)
            },
            1e-5,
        );
    }

    #[test]
    fn grad_bilinear_sample_map_and_coords() {
        // Interior, non-integer sample points so the bilinear surface is
        // locally smooth.
        let coords0 = Tensor::from_vec(vec![0.33, 0.41, 0.72, 0.26, 0.15, 0.84], &[3, 2]);
        gradcheck(
            &[2, 4, 4],
            |r| randn(&[2, 4, 4], r),
            |g, map| {
                let c = g.constant(Tensor::from_vec(
                    vec![0.33, 0.41, 0.72, 0.26, 0.15, 0.84],
                    &[3, 2],
                ));
                let s = g.bilinear_sample(map, c);
                let sq = g.mul(s, s);
                g.mean_all(sq)
            },
            1e-5,
        );
        gradcheck(
            &[3, 2],
            |_| coords0.clone(),
            |g, c| {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let map = g.constant(Tensor::randn(&[2, 4, 4], 1.0, &mut rng));
                let s = g.bilinear_sample(map, c);
                let sq = g.mul(s, s);
                g.mean_all(sq)
            },
            1e-4,
        );
    }

    #[test]
    fn grad_group_weighted_sum() {
        gradcheck(
            &[8, 3],
            |r| randn(&[8, 3], r),
            |g, samples| {
                let logits = g.constant(Tensor::from_vec(
                    (0..8).map(|i| (i as f64 * 0.31).sin()).collect(),
                    &[2, 4],
                ));
                let w = g.softmax_rows(logits);
                let pooled = g.group_weighted_sum(samples, w);
                let sq = g.mul(pooled, pooled);
                g.mean_all(sq)
            },
            1e-5,
        );
        gradcheck(
            &[2, 4],
            |r| randn(&[2, 4], r),
            |g, logits| {
                let mut rng = ChaCha8Rng::seed_from_u64(6);
                let samples = g.constant(Tensor::randn(&[8, 3], 1.0, &mut rng));
                let w = g.softmax_rows(logits);
                let pooled = g.group_weighted_sum(samples, w);
                let sq = g.mul(pooled, pooled);
                g.mean_all(sq)
            },
            1e-5,
        );
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let frozen = g.constant(Tensor::from_vec(vec![1.0, 2.0], &[2, 1]));
        let live = g.leaf(Tensor::from_vec(vec![3.0, 4.0], &[2, 1]));
        let prod = g.mul(frozen, live);
        let loss = g.mean_all(prod);
        g.backward(loss);
        assert!(g.grad(frozen).is_none());
        let gl = g.grad(live).unwrap();
        assert_eq!(gl.data(), &[0.5, 1.0]);
    }

    #[test]
    fn duplicate_index_select_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3, 1]));
        let sel = g.index_select_rows(x, &[1, 1, 1]);
        let loss = g.sum_all(sel);
        g.backward(loss);
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 3.0, 0.0]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![-2.0, 0.5, 2.0], &[3, 1]));
        let c = g.clamp(x, 0.0, 1.0);
        let loss = g.sum_all(c);
        g.backward(loss);
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn constant_map_invariance_of_bilinear() {
        // A constant feature map samples to the constant everywhere.
        let mut g = Graph::new();
        let map = g.constant(Tensor::full(&[3, 5, 7], 4.25));
        let coords = g.constant(Tensor::from_vec(vec![0.1, 0.9, 0.5, 0.5, 1.3, -0.2], &[3, 2]));
        let s = g.bilinear_sample(map, coords);
        for &v in g.value(s).data() {
            assert!((v - 4.25).abs() < 1e-12);
        }
    }
}
