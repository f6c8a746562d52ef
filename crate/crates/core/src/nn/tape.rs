//! Reverse-mode gradient tape.
//!
//! Every operation eagerly computes its value and records enough to replay
//! its local derivative. [`Tape::backward`] walks the recording once in
//! reverse, accumulating gradients only along paths that can reach a
//! trainable leaf (constants and stop-gradients prune their subtrees).
//!
//! Shape violations are programmer errors at this level and panic with the
//! offending dimensions; the fallible, user-facing validation lives in
//! [`crate::nn::Network`].

use rand::Rng;

use super::conv::{col2im, im2col, ConvGeom};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MinElem(usize, usize),
    AddRow {
        x: usize,
        bias: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    AddScalar {
        x: usize,
    },
    Relu(usize),
    Elu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    MaxScalar {
        x: usize,
        floor: f64,
    },
    MatMul(usize, usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    RowSum(usize),
    SumAll(usize),
    MeanAll(usize),
    ConcatCols(usize, usize),
    SliceCols {
        x: usize,
        from: usize,
        to: usize,
    },
    RepeatRows {
        x: usize,
        times: usize,
    },
    Reshape(usize),
    StopGrad(usize),
    OneHotSt {
        probs: usize,
    },
    Conv {
        x: usize,
        w: usize,
        geom: ConvGeom,
        out_c: usize,
    },
    ConvT {
        x: usize,
        w: usize,
        geom: ConvGeom,
        out_c: usize,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, if any path from the loss reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, materializing zeros of the given shape if absent.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Operation recording for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed for `v` during the forward pass.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Constant | Op::StopGrad(_) => false,
            other => self
                .op_inputs(other)
                .iter()
                .any(|&i| self.nodes[i].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<usize> {
        match *op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MinElem(a, b)
            | Op::MatMul(a, b)
            | Op::ConcatCols(a, b) => vec![a, b],
            Op::AddRow { x, bias } => vec![x, bias],
            Op::Conv { x, w, .. } | Op::ConvT { x, w, .. } => vec![x, w],
            Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::MaxScalar { x, .. }
            | Op::SliceCols { x, .. }
            | Op::RepeatRows { x, .. } => vec![x],
            Op::Relu(x)
            | Op::Elu(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Square(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::LogSumExp(x)
            | Op::RowSum(x)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::Reshape(x)
            | Op::StopGrad(x)
            | Op::OneHotSt { probs: x } => vec![x],
        }
    }

    /// Trainable leaf: backward will produce a gradient for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Non-trainable input: backward prunes everything that only feeds here.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    fn binary_same_shape(&self, name: &str, a: Var, b: Var) {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        assert_eq!(sa, sb, "{name}: operand shapes {sa:?} vs {sb:?}");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape("add", a, b);
        let v = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            let mut out = va.clone();
            for (o, x) in out.data_mut().iter_mut().zip(vb.data()) {
                *o += x;
            }
            out
        };
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape("sub", a, b);
        let v = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            let mut out = va.clone();
            for (o, x) in out.data_mut().iter_mut().zip(vb.data()) {
                *o -= x;
            }
            out
        };
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape("mul", a, b);
        let v = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            let mut out = va.clone();
            for (o, x) in out.data_mut().iter_mut().zip(vb.data()) {
                *o *= x;
            }
            out
        };
        self.push(Op::Mul(a.0, b.0), v)
    }

    /// Elementwise minimum; gradient follows the smaller operand (ties go
    /// to the first).
    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape("min_elem", a, b);
        let v = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            let mut out = va.clone();
            for (o, x) in out.data_mut().iter_mut().zip(vb.data()) {
                *o = o.min(*x);
            }
            out
        };
        self.push(Op::MinElem(a.0, b.0), v)
    }

    /// Broadcast a `[n]` (or `[1, n]`) bias over the rows of `[m, n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let v = {
            let vx = &self.nodes[x.0].value;
            let vb = &self.nodes[bias.0].value;
            let n = vx.cols();
            assert_eq!(
                vb.len(),
                n,
                "add_row: bias has {} elements, rows have {n}",
                vb.len()
            );
            let mut out = vx.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (o, b) in row.iter_mut().zip(vb.data()) {
                    *o += b;
                }
            }
            out
        };
        self.push(
            Op::AddRow {
                x: x.0,
                bias: bias.0,
            },
            v,
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.nodes[x.0].value.map(|v| v * factor);
        self.push(Op::Scale { x: x.0, factor }, v)
    }

    pub fn add_scalar(&mut self, x: Var, value: f64) -> Var {
        let v = self.nodes[x.0].value.map(|v| v + value);
        self.push(Op::AddScalar { x: x.0 }, v)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(|v| v.max(0.0));
        self.push(Op::Relu(x.0), v)
    }

    /// ELU with unit scale: `x` for `x > 0`, `exp(x) - 1` otherwise.
    pub fn elu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0]
            .value
            .map(|v| if v > 0.0 { v } else { v.exp() - 1.0 });
        self.push(Op::Elu(x.0), v)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(f64::tanh);
        self.push(Op::Tanh(x.0), v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid(x.0), v)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(f64::exp);
        self.push(Op::Exp(x.0), v)
    }

    /// Natural log; caller guarantees strictly positive inputs.
    pub fn ln(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(f64::ln);
        self.push(Op::Ln(x.0), v)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(|v| v * v);
        self.push(Op::Square(x.0), v)
    }

    /// Elementwise `max(x, floor)`; gradient is zero at and below the floor.
    pub fn max_scalar(&mut self, x: Var, floor: f64) -> Var {
        let v = self.nodes[x.0].value.map(|v| v.max(floor));
        self.push(Op::MaxScalar { x: x.0, floor }, v)
    }

    /// `[m, k] @ [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(
                va.cols(),
                vb.rows(),
                "matmul: [{},{}] @ [{},{}]",
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols()
            );
            let mut out = Tensor::zeros(&[va.rows(), vb.cols()]);
            gemm_nn(va, vb, &mut out, 0.0);
            out
        };
        self.push(Op::MatMul(a.0, b.0), v)
    }

    /// Row-wise softmax of a rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = {
            let vx = &self.nodes[x.0].value;
            let n = vx.cols();
            let mut out = vx.clone();
            for row in out.data_mut().chunks_mut(n) {
                softmax_row(row);
            }
            out
        };
        self.push(Op::Softmax(x.0), v)
    }

    /// Row-wise log-softmax of a rank-2 tensor.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = {
            let vx = &self.nodes[x.0].value;
            let n = vx.cols();
            let mut out = vx.clone();
            for row in out.data_mut().chunks_mut(n) {
                let lse = log_sum_exp_row(row);
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
            out
        };
        self.push(Op::LogSoftmax(x.0), v)
    }

    /// Row-wise log-sum-exp: `[m, n] -> [m, 1]`.
    pub fn log_sum_exp(&mut self, x: Var) -> Var {
        let v = {
            let vx = &self.nodes[x.0].value;
            let n = vx.cols();
            let out: Vec<f64> = vx.data().chunks(n).map(log_sum_exp_row).collect();
            Tensor::from_vec(&[vx.rows(), 1], out)
        };
        self.push(Op::LogSumExp(x.0), v)
    }

    /// Row sums: `[m, n] -> [m, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let v = {
            let vx = &self.nodes[x.0].value;
            let n = vx.cols();
            let out: Vec<f64> = vx.data().chunks(n).map(|r| r.iter().sum()).collect();
            Tensor::from_vec(&[vx.rows(), 1], out)
        };
        self.push(Op::RowSum(x.0), v)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.nodes[x.0].value.data().iter().sum());
        self.push(Op::SumAll(x.0), v)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        assert!(!vx.is_empty(), "mean_all of empty tensor");
        let v = Tensor::scalar(vx.data().iter().sum::<f64>() / vx.len() as f64);
        self.push(Op::MeanAll(x.0), v)
    }

    /// Concatenate two rank-2 tensors along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(
                va.rows(),
                vb.rows(),
                "concat_cols: {} rows vs {} rows",
                va.rows(),
                vb.rows()
            );
            let (m, p, q) = (va.rows(), va.cols(), vb.cols());
            let mut out = Tensor::zeros(&[m, p + q]);
            for i in 0..m {
                out.data_mut()[i * (p + q)..i * (p + q) + p]
                    .copy_from_slice(&va.data()[i * p..(i + 1) * p]);
                out.data_mut()[i * (p + q) + p..(i + 1) * (p + q)]
                    .copy_from_slice(&vb.data()[i * q..(i + 1) * q]);
            }
            out
        };
        self.push(Op::ConcatCols(a.0, b.0), v)
    }

    /// Column slice `[from, to)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Var {
        let v = {
            let vx = &self.nodes[x.0].value;
            let n = vx.cols();
            assert!(
                from < to && to <= n,
                "slice_cols: [{from}, {to}) out of 0..{n}"
            );
            let m = vx.rows();
            let mut out = Tensor::zeros(&[m, to - from]);
            for i in 0..m {
                out.data_mut()[i * (to - from)..(i + 1) * (to - from)]
                    .copy_from_slice(&vx.data()[i * n + from..i * n + to]);
            }
            out
        };
        self.push(Op::SliceCols { x: x.0, from, to }, v)
    }

    /// Repeat each row `times` times consecutively: `[m, n] -> [m*times, n]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        assert!(times >= 1, "repeat_rows with times = 0");
        let v = {
            let vx = &self.nodes[x.0].value;
            let (m, n) = (vx.rows(), vx.cols());
            let mut out = Tensor::zeros(&[m * times, n]);
            for i in 0..m {
                let src = &vx.data()[i * n..(i + 1) * n];
                for t in 0..times {
                    out.data_mut()[(i * times + t) * n..(i * times + t + 1) * n]
                        .copy_from_slice(src);
                }
            }
            out
        };
        self.push(Op::RepeatRows { x: x.0, times }, v)
    }

    /// View the same buffer under a different shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.nodes[x.0].value.clone().reshaped(shape);
        self.push(Op::Reshape(x.0), v)
    }

    /// Forward identity that blocks gradient flow.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.push(Op::StopGrad(x.0), v)
    }

    /// Straight-through categorical sample: each row of `probs` is a
    /// distribution; the forward value is a sampled one-hot row, and the
    /// backward pass hands the gradient through to `probs` unchanged.
    pub fn st_onehot(&mut self, probs: Var, rng: &mut impl Rng) -> Var {
        let v = {
            let vp = &self.nodes[probs.0].value;
            let (m, n) = (vp.rows(), vp.cols());
            let mut out = Tensor::zeros(&[m, n]);
            for i in 0..m {
                let row = &vp.data()[i * n..(i + 1) * n];
                let u: f64 = rng.random::<f64>();
                let mut acc = 0.0;
                let mut chosen = n - 1;
                for (j, p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = j;
                        break;
                    }
                }
                out.data_mut()[i * n + chosen] = 1.0;
            }
            out
        };
        self.push(Op::OneHotSt { probs: probs.0 }, v)
    }

    /// One-hot of each row's argmax — the deterministic counterpart of
    /// [`Tape::st_onehot`], same straight-through backward.
    pub fn mode_onehot(&mut self, probs: Var) -> Var {
        let v = {
            let vp = &self.nodes[probs.0].value;
            let (m, n) = (vp.rows(), vp.cols());
            let mut out = Tensor::zeros(&[m, n]);
            for i in 0..m {
                let row = &vp.data()[i * n..(i + 1) * n];
                let mut best = 0;
                for j in 1..n {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.data_mut()[i * n + best] = 1.0;
            }
            out
        };
        self.push(Op::OneHotSt { probs: probs.0 }, v)
    }

    /// NHWC convolution: `x: [b, h, w, c]`, `w: [k*k*c, out_c]`.
    pub fn conv2d(&mut self, x: Var, w: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let (geom, out_c, v) = {
            let vx = &self.nodes[x.0].value;
            let vw = &self.nodes[w.0].value;
            assert_eq!(
                vx.rank(),
                4,
                "conv2d input must be [b,h,w,c], got {:?}",
                vx.shape()
            );
            let (b, h, wd, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
            let geom = ConvGeom::new(b, h, wd, c, kernel, stride, pad);
            assert_eq!(
                vw.rows(),
                geom.patch_len(),
                "conv2d kernel rows {} != k*k*c = {}",
                vw.rows(),
                geom.patch_len()
            );
            let out_c = vw.cols();
            let cols = im2col(vx, &geom);
            let mut out = Tensor::zeros(&[geom.out_positions(), out_c]);
            gemm_nn(&cols, vw, &mut out, 0.0);
            (
                geom,
                out_c,
                out.reshaped(&[b, geom.out_h, geom.out_w, out_c]),
            )
        };
        self.push(
            Op::Conv {
                x: x.0,
                w: w.0,
                geom,
                out_c,
            },
            v,
        )
    }

    /// NHWC transposed convolution (fractionally strided upsampling):
    /// `x: [b, h, w, in_c]`, `w: [k*k*out_c, in_c]`, output
    /// `[b, (h-1)*stride + k - 2*pad, ..., out_c]`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Var {
        let (geom, v) = {
            let vx = &self.nodes[x.0].value;
            let vw = &self.nodes[w.0].value;
            assert_eq!(
                vx.rank(),
                4,
                "conv2d_transpose input must be [b,h,w,c], got {:?}",
                vx.shape()
            );
            let (b, h, wd, in_c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
            let (oh, ow) = ConvGeom::transpose_out(h, wd, kernel, stride, pad);
            // Geometry of the conv that maps our output plane back to (h, w).
            let geom = ConvGeom::new(b, oh, ow, out_c, kernel, stride, pad);
            assert_eq!(
                (geom.out_h, geom.out_w),
                (h, wd),
                "conv2d_transpose geometry does not invert: {}x{} -> {}x{}",
                h,
                wd,
                geom.out_h,
                geom.out_w
            );
            assert_eq!(
                vw.rows(),
                geom.patch_len(),
                "conv2d_transpose kernel rows {} != k*k*out_c = {}",
                vw.rows(),
                geom.patch_len()
            );
            assert_eq!(
                vw.cols(),
                in_c,
                "conv2d_transpose kernel cols {} != in_c = {in_c}",
                vw.cols()
            );
            let x2d = vx.clone().reshaped(&[b * h * wd, in_c]);
            let mut cols = Tensor::zeros(&[geom.out_positions(), geom.patch_len()]);
            gemm_nt(&x2d, vw, &mut cols, 0.0);
            let mut out = Tensor::zeros(&[b, oh, ow, out_c]);
            col2im(&cols, &geom, &mut out);
            (geom, out)
        };
        self.push(
            Op::ConvT {
                x: x.0,
                w: w.0,
                geom,
                out_c,
            },
            v,
        )
    }

    /// Reverse pass from a scalar node, seeding with 1.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar, got shape {:?}",
            self.nodes[root.0].value.shape()
        );
        self.backward_with(root, Tensor::scalar(1.0))
    }

    /// Reverse pass seeding the root with an explicit upstream gradient.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(
            seed.shape(),
            self.nodes[root.0].value.shape(),
            "backward seed shape {:?} vs root shape {:?}",
            seed.shape(),
            self.nodes[root.0].value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    fn accum(
        grads: &mut [Option<Tensor>],
        idx: usize,
        shape: &[usize],
        add: impl FnOnce(&mut Tensor),
    ) {
        let slot = grads[idx].get_or_insert_with(|| Tensor::zeros(shape));
        add(slot);
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |idx: usize| &self.nodes[idx].value;
        match self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for &t in &[a, b] {
                    if self.needs(t) {
                        Self::accum(grads, t, val(t).shape(), |s| {
                            for (o, x) in s.data_mut().iter_mut().zip(g.data()) {
                                *o += x;
                            }
                        });
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    Self::accum(grads, a, val(a).shape(), |s| {
                        for (o, x) in s.data_mut().iter_mut().zip(g.data()) {
                            *o += x;
                        }
                    });
                }
                if self.needs(b) {
                    Self::accum(grads, b, val(b).shape(), |s| {
                        for (o, x) in s.data_mut().iter_mut().zip(g.data()) {
                            *o -= x;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let vb = val(b);
                    Self::accum(grads, a, val(a).shape(), |s| {
                        for ((o, x), y) in s.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                            *o += x * y;
                        }
                    });
                }
                if self.needs(b) {
                    let va = val(a);
                    Self::accum(grads, b, val(b).shape(), |s| {
                        for ((o, x), y) in s.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                            *o += x * y;
                        }
                    });
                }
            }
            Op::MinElem(a, b) => {
                let (va, vb) = (val(a), val(b));
                if self.needs(a) {
                    Self::accum(grads, a, va.shape(), |s| {
                        for i in 0..s.len() {
                            if va.data()[i] <= vb.data()[i] {
                                s.data_mut()[i] += g.data()[i];
                            }
                        }
                    });
                }
                if self.needs(b) {
                    Self::accum(grads, b, vb.shape(), |s| {
                        for i in 0..s.len() {
                            if vb.data()[i] < va.data()[i] {
                                s.data_mut()[i] += g.data()[i];
                            }
                        }
                    });
                }
            }
            Op::AddRow { x, bias } => {
                if self.needs(x) {
                    Self::accum(grads, x, val(x).shape(), |s| {
                        for (o, v) in s.data_mut().iter_mut().zip(g.data()) {
                            *o += v;
                        }
                    });
                }
                if self.needs(bias) {
                    let n = val(bias).len();
                    Self::accum(grads, bias, val(bias).shape(), |s| {
                        for row in g.data().chunks(n) {
                            for (o, v) in s.data_mut().iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    });
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(x) {
                    Self::accum(grads, x, val(x).shape(), |s| {
                        for (o, v) in s.data_mut().iter_mut().zip(g.data()) {
                            *o += factor * v;
                        }
                    });
                }
            }
            Op::AddScalar { x } => {
                if self.needs(x) {
                    Self::accum(grads, x, val(x).shape(), |s| {
                        for (o, v) in s.data_mut().iter_mut().zip(g.data()) {
                            *o += v;
                        }
                    });
                }
            }
            Op::Relu(x) => {
                if self.needs(x) {
                    let vx = val(x);
                    Self::accum(grads, x, vx.shape(), |s| {
                        for i in 0..s.len() {
                            if vx.data()[i] > 0.0 {
                                s.data_mut()[i] += g.data()[i];
                            }
                        }
                    });
                }
            }
            Op::Elu(x) => {
                if self.needs(x) {
                    let vx = val(x);
                    let vy = &self.nodes[i].value;
                    Self::accum(grads, x, vx.shape(), |s| {
                        for j in 0..s.len() {
                            let d = if vx.data()[j] > 0.0 {
                                1.0
                            } else {
                                vy.data()[j] + 1.0
                            };
                            s.data_mut()[j] += d * g.data()[j];
                        }
                    });
                }
            }
            Op::Tanh(x) => {
                if self.needs(x) {
                    let vy = &self.nodes[i].value;
                    Self::accum(grads, x, val(x).shape(), |s| {
                        for j in 0..s.len() {
                            let y = vy.data()[j];
                            s.data_mut()[j] += (1.0 - y * y) * g.data()[j];
                        }
                    });
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(x) {
                    let vy = &self.nodes[i].value;
                    Self::accum(grads, x, val(x).shape(), |s| {
                        for j in 0..s.len() {
                            let y = vy.data()[j];
                            s.data_mut()[j] += y * (1.0 - y) * g.data()[j];
                        }
                    });
                }
            }
            Op::Exp(x) => {
                if self.needs(x) {
                    let vy = &self.nodes[i].value;
                    Self::accum(grads, x, val(x).shape(), |s| {
                        for j in 0..s.len() {
                            s.data_mut()[j] += vy.data()[j] * g.data()[j];
                        }
                    });
                }
            }
            Op::Ln(x) => {
                if self.needs(x) {
                    let vx = val(x);
                    Self::accum(grads, x, vx.shape(), |s| {
                        for j in 0..s.len() {
                            s.data_mut()[j] += g.data()[j] / vx.data()[j];
                        }
                    });
                }
            }
            Op::Square(x) => {
                if self.needs(x) {
                    let vx = val(x);
                    Self::accum(grads, x, vx.shape(), |s| {
                        for j in 0..s.len() {
                            s.data_mut()[j] += 2.0 * vx.data()[j] * g.data()[j];
                        }
                    });
                }
            }
            Op::MaxScalar { x, floor } => {
                if self.needs(x) {
                    let vx = val(x);
                    Self::accum(grads, x, vx.shape(), |s| {
                        for j in 0..s.len() {
                            if vx.data()[j] > floor {
                                s.data_mut()[j] += g.data()[j];
                            }
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                // c = a @ b; dc/da = g @ b^T, dc/db = a^T @ g.
                if self.needs(a) {
                    let vb = val(b);
                    Self::accum(grads, a, val(a).shape(), |s| {
                        gemm_nt(g, vb, s, 1.0);
                    });
                }
                if self.needs(b) {
                    let va = val(a);
                    Self::accum(grads, b, val(b).shape(), |s| {
                        gemm_tn(va, g, s, 1.0);
                    });
                }
            }
            Op::Softmax(x) => {
                if self.needs(x) {
                    let vy = &self.nodes[i].value;
                    let n = vy.cols();
                    Self::accum(grads, x, vy.shape(), |s| {
                        for (row, (gy, y)) in
                            g.data().chunks(n).zip(vy.data().chunks(n)).enumerate()
                        {
                            let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                            let out = &mut s.data_mut()[row * n..(row + 1) * n];
                            for j in 0..n {
                                out[j] += y[j] * (gy[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LogSoftmax(x) => {
                if self.needs(x) {
                    let vy = &self.nodes[i].value;
                    let n = vy.cols();
                    Self::accum(grads, x, vy.shape(), |s| {
                        for (row, (gy, y)) in
                            g.data().chunks(n).zip(vy.data().chunks(n)).enumerate()
                        {
                            let gsum: f64 = gy.iter().sum();
                            let out = &mut s.data_mut()[row * n..(row + 1) * n];
                            for j in 0..n {
                                out[j] += gy[j] - y[j].exp() * gsum;
                            }
                        }
                    });
                }
            }
            Op::LogSumExp(x) => {
                if self.needs(x) {
                    let vx = val(x);
                    let vy = &self.nodes[i].value;
                    let n = vx.cols();
                    Self::accum(grads, x, vx.shape(), |s| {
                        for row in 0..vx.rows() {
                            let lse = vy.data()[row];
                            let gi = g.data()[row];
                            let xrow = &vx.data()[row * n..(row + 1) * n];
                            let out = &mut s.data_mut()[row * n..(row + 1) * n];
                            for j in 0..n {
                                out[j] += gi * (xrow[j] - lse).exp();
                            }
                        }
                    });
                }
            }
            Op::RowSum(x) => {
                if self.needs(x) {
                    let vx = val(x);
                    let n = vx.cols();
                    Self::accum(grads, x, vx.shape(), |s| {
                        for row in 0..vx.rows() {
                            let gi = g.data()[row];
                            for v in &mut s.data_mut()[row * n..(row + 1) * n] {
                                *v += gi;
                            }
                        }
                    });
                }
            }
            Op::SumAll(x) => {
                if self.needs(x) {
                    let gv = g.item();
                    Self::accum(grads, x, val(x).shape(), |s| {
                        for v in s.data_mut() {
                            *v += gv;
                        }
                    });
                }
            }
            Op::MeanAll(x) => {
                if self.needs(x) {
                    let gv = g.item() / val(x).len() as f64;
                    Self::accum(grads, x, val(x).shape(), |s| {
                        for v in s.data_mut() {
                            *v += gv;
                        }
                    });
                }
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (val(a).cols(), val(b).cols());
                let m = val(a).rows();
                if self.needs(a) {
                    Self::accum(grads, a, val(a).shape(), |s| {
                        for i in 0..m {
                            for j in 0..p {
                                s.data_mut()[i * p + j] += g.data()[i * (p + q) + j];
                            }
                        }
                    });
                }
                if self.needs(b) {
                    Self::accum(grads, b, val(b).shape(), |s| {
                        for i in 0..m {
                            for j in 0..q {
                                s.data_mut()[i * q + j] += g.data()[i * (p + q) + p + j];
                            }
                        }
                    });
                }
            }
            Op::SliceCols { x, from, to } => {
                if self.needs(x) {
                    let vx = val(x);
                    let n = vx.cols();
                    let w = to - from;
                    Self::accum(grads, x, vx.shape(), |s| {
                        for i in 0..vx.rows() {
                            for j in 0..w {
                                s.data_mut()[i * n + from + j] += g.data()[i * w + j];
                            }
                        }
                    });
                }
            }
            Op::RepeatRows { x, times } => {
                if self.needs(x) {
                    let vx = val(x);
                    let n = vx.cols();
                    Self::accum(grads, x, vx.shape(), |s| {
                        for i in 0..vx.rows() {
                            for t in 0..times {
                                let src = &g.data()[(i * times + t) * n..(i * times + t + 1) * n];
                                for (o, v) in s.data_mut()[i * n..(i + 1) * n].iter_mut().zip(src) {
                                    *o += v;
                                }
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                if self.needs(x) {
                    Self::accum(grads, x, val(x).shape(), |s| {
                        for (o, v) in s.data_mut().iter_mut().zip(g.data()) {
                            *o += v;
                        }
                    });
                }
            }
            Op::StopGrad(_) => {}
            Op::OneHotSt { probs } => {
                if self.needs(probs) {
                    Self::accum(grads, probs, val(probs).shape(), |s| {
                        for (o, v) in s.data_mut().iter_mut().zip(g.data()) {
                            *o += v;
                        }
                    });
                }
            }
            Op::Conv {
                x,
                w,
                ref geom,
                out_c,
            } => {
                let g2d = g.clone().reshaped(&[geom.out_positions(), out_c]);
                if self.needs(w) {
                    let cols = im2col(val(x), geom);
                    Self::accum(grads, w, val(w).shape(), |s| {
                        gemm_tn(&cols, &g2d, s, 1.0);
                    });
                }
                if self.needs(x) {
                    let vw = val(w);
                    let mut dcols = Tensor::zeros(&[geom.out_positions(), geom.patch_len()]);
                    gemm_nt(&g2d, vw, &mut dcols, 0.0);
                    Self::accum(grads, x, val(x).shape(), |s| {
                        col2im(&dcols, geom, s);
                    });
                }
            }
            Op::ConvT {
                x,
                w,
                ref geom,
                out_c,
            } => {
                let _ = out_c;
                let vx = val(x);
                let in_c = vx.shape()[3];
                let rows = vx.shape()[0] * vx.shape()[1] * vx.shape()[2];
                let gcols = im2col(g, geom);
                if self.needs(x) {
                    let vw = val(w);
                    Self::accum(grads, x, vx.shape(), |s| {
                        // dx = im2col(g) @ w, reshaped back onto x's plane.
                        let mut dx = Tensor::zeros(&[rows, in_c]);
                        gemm_nn(&gcols, vw, &mut dx, 0.0);
                        for (o, v) in s.data_mut().iter_mut().zip(dx.data()) {
                            *o += v;
                        }
                    });
                }
                if self.needs(w) {
                    let x2d = vx.clone().reshaped(&[rows, in_c]);
                    Self::accum(grads, w, val(w).shape(), |s| {
                        gemm_tn(&gcols, &x2d, s, 1.0);
                    });
                }
            }
        }
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp_row(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
