//! Declarative layer stacks: spec, parameter storage, tape-recorded
//! forward/backward, a fast value-only path, and finite-difference
//! gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::conv::{col2im, im2col, ConvGeom};
use super::init::uniform_fan_in;
use super::tape::{Tape, Var};
use super::tensor::{gemm_nn, gemm_nt, Tensor};
use super::NnError;

/// Pointwise nonlinearity applied after a parameterized layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Elu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Linear => x,
            Activation::Relu => tape.relu(x),
            Activation::Elu => tape.elu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }

    fn apply_value(self, buf: &mut [f64]) {
        match self {
            Activation::Linear => {}
            Activation::Relu => buf.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Elu => buf
                .iter_mut()
                .for_each(|v| *v = if *v > 0.0 { *v } else { v.exp() - 1.0 }),
            Activation::Tanh => buf.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Sigmoid => buf.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Elu => "elu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

/// One layer of a [`NetworkSpec`].
///
/// Feature tensors are `[batch, features]`; image tensors are NHWC
/// `[batch, height, width, channels]`. A `Gru` layer switches the stack to
/// sequence mode: the leading dimension is interpreted as time and the cell
/// is unrolled across it with a zero initial state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        activation: Activation,
    },
    ConvTranspose {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        activation: Activation,
    },
    Gru {
        inputs: usize,
        state: usize,
    },
    Flatten,
    Unflatten {
        height: usize,
        width: usize,
        channels: usize,
    },
}

/// Shape-checked description of a layer stack. `input` is the per-sample
/// shape (no batch dimension): `[features]` or `[height, width, channels]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        NetworkSpec { input, layers }
    }

    /// Validate layer composition and return per-layer output shapes
    /// (per-sample, no batch dimension).
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        if self.layers.is_empty() {
            return Err(NnError::InvalidSpec("no layers".into()));
        }
        if self.input.is_empty() || self.input.contains(&0) {
            return Err(NnError::InvalidSpec(format!(
                "input shape {:?} has a zero dimension",
                self.input
            )));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let next = match layer {
                LayerSpec::Dense {
                    inputs, outputs, ..
                } => {
                    if cur.len() != 1 || cur[0] != *inputs {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {idx}: dense expects [{inputs}], got {cur:?}"
                        )));
                    }
                    if *outputs == 0 {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {idx}: dense with zero outputs"
                        )));
                    }
                    vec![*outputs]
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    if cur.len() != 3 || cur[2] != *in_channels {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {idx}: conv expects [h, w, {in_channels}], got {cur:?}"
                        )));
                    }
                    if *stride == 0 || *kernel == 0 || *out_channels == 0 {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {idx}: conv with zero kernel/stride/channels"
                        )));
                    }
                    if cur[0] + 2 * pad < *kernel || cur[1] + 2 * pad < *kernel {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {idx}: kernel {kernel} exceeds padded input {cur:?}"
                        )));
                    }
                    let oh = (cur[0] + 2 * pad - kernel) / stride + 1;
                    let ow = (cur[1] + 2 * pad - kernel) / stride + 1;
                    vec![oh, ow, *out_channels]
                }
                LayerSpec::ConvTranspose {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    if cur.len() != 3 || cur[2] != *in_channels {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {idx}: conv-transpose expects [h, w, {in_channels}], got {cur:?}"
                        )));
                    }
                    if *stride == 0 || *kernel == 0 || *out_channels == 0 {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {idx}: conv-transpose with zero kernel/stride/channels"
                        )));
                    }
                    if (cur[0] - 1) * stride + kernel < 2 * pad
                        || (cur[1] - 1) * stride + kernel < 2 * pad
                    {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {idx}: conv-transpose padding {pad} too large"
                        )));
                    }
                    let oh = (cur[0] - 1) * stride + kernel - 2 * pad;
                    let ow = (cur[1] - 1) * stride + kernel - 2 * pad;
                    vec![oh, ow, *out_channels]
                }
                LayerSpec::Gru { inputs, state } => {
                    if cur.len() != 1 || cur[0] != *inputs {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {idx}: gru expects [{inputs}], got {cur:?}"
                        )));
                    }
                    if *state == 0 {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {idx}: gru with zero state width"
                        )));
                    }
                    vec![*state]
                }
                LayerSpec::Flatten => {
                    if cur.len() == 1 {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {idx}: flatten of already-flat {cur:?}"
                        )));
                    }
                    vec![cur.iter().product()]
                }
                LayerSpec::Unflatten {
                    height,
                    width,
                    channels,
                } => {
                    let want = height * width * channels;
                    if cur.len() != 1 || cur[0] != want {
                        return Err(NnError::InvalidSpec(format!(
                            "layer {idx}: unflatten to [{height},{width},{channels}] needs [{want}], got {cur:?}"
                        )));
                    }
                    vec![*height, *width, *channels]
                }
            };
            shapes.push(next.clone());
            cur = next;
        }
        Ok(shapes)
    }

    /// Per-sample output shape.
    pub fn output_shape(&self) -> Result<Vec<usize>, NnError> {
        Ok(self.layer_shapes()?.last().unwrap().clone())
    }

    /// Stable textual form used for architecture hashing.
    pub fn describe(&self) -> String {
        let mut s = format!("input={:?};", self.input);
        for layer in &self.layers {
            match layer {
                LayerSpec::Dense {
                    inputs,
                    outputs,
                    activation,
                } => s.push_str(&format!(
                    "dense({inputs}->{outputs},{});",
                    activation.name()
                )),
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    activation,
                } => s.push_str(&format!(
                    "conv({in_channels}->{out_channels},k{kernel},s{stride},p{pad},{});",
                    activation.name()
                )),
                LayerSpec::ConvTranspose {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    activation,
                } => s.push_str(&format!(
                    "convT({in_channels}->{out_channels},k{kernel},s{stride},p{pad},{});",
                    activation.name()
                )),
                LayerSpec::Gru { inputs, state } => s.push_str(&format!("gru({inputs}->{state});")),
                LayerSpec::Flatten => s.push_str("flatten;"),
                LayerSpec::Unflatten {
                    height,
                    width,
                    channels,
                } => s.push_str(&format!("unflatten({height},{width},{channels});")),
            }
        }
        s
    }

    /// SHA-256 of [`NetworkSpec::describe`]; checkpoints embed this.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.describe().as_bytes());
        h.finalize().into()
    }

    /// True when any layer is recurrent (leading dim becomes time).
    pub fn is_sequential(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Gru { .. }))
    }
}

/// Named parameter tensor with its last computed gradient.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub values: Tensor,
    pub grad: Option<Tensor>,
}

impl ParamTensor {
    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }
}

/// Tape handles for one network's parameters, in parameter order.
pub struct ParamBinding {
    vars: Vec<Var>,
}

impl ParamBinding {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }
}

struct RecordedRun {
    tape: Tape,
    output: Var,
    param_vars: Vec<Var>,
}

/// A layer stack with initialized parameters.
///
/// Two usage styles:
/// - standalone: [`Network::forward`] records a pass, [`Network::backward`]
///   fills `params[i].grad`;
/// - composed: [`Network::bind`] plants the parameters on a shared [`Tape`]
///   and [`Network::apply`] wires the forward ops, so several networks can
///   contribute to one loss.
pub struct Network {
    spec: NetworkSpec,
    pub params: Vec<ParamTensor>,
    run: Option<RecordedRun>,
}

/// Roles of the nine GRU parameter tensors, in storage order.
const GRU_PARTS: [&str; 9] = [
    "w_reset", "u_reset", "b_reset", "w_update", "u_update", "b_update", "w_cand", "u_cand",
    "b_cand",
];

impl Network {
    /// Initialize all parameters with uniform fan-in scaling from the seed.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self, NnError> {
        spec.layer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (idx, layer) in spec.layers.iter().enumerate() {
            match layer {
                LayerSpec::Dense {
                    inputs, outputs, ..
                } => {
                    params.push(ParamTensor {
                        name: format!("{idx}.weight"),
                        values: uniform_fan_in(&[*inputs, *outputs], *inputs, &mut rng),
                        grad: None,
                    });
                    params.push(ParamTensor {
                        name: format!("{idx}.bias"),
                        values: uniform_fan_in(&[*outputs], *inputs, &mut rng),
                        grad: None,
                    });
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = kernel * kernel * in_channels;
                    params.push(ParamTensor {
                        name: format!("{idx}.weight"),
                        values: uniform_fan_in(&[fan_in, *out_channels], fan_in, &mut rng),
                        grad: None,
                    });
                    params.push(ParamTensor {
                        name: format!("{idx}.bias"),
                        values: uniform_fan_in(&[*out_channels], fan_in, &mut rng),
                        grad: None,
                    });
                }
                LayerSpec::ConvTranspose {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = kernel * kernel * in_channels;
                    params.push(ParamTensor {
                        name: format!("{idx}.weight"),
                        values: uniform_fan_in(
                            &[kernel * kernel * out_channels, *in_channels],
                            fan_in,
                            &mut rng,
                        ),
                        grad: None,
                    });
                    params.push(ParamTensor {
                        name: format!("{idx}.bias"),
                        values: uniform_fan_in(&[*out_channels], fan_in, &mut rng),
                        grad: None,
                    });
                }
                LayerSpec::Gru { inputs, state } => {
                    for (p, part) in GRU_PARTS.iter().enumerate() {
                        let (shape, fan_in): (Vec<usize>, usize) = match p % 3 {
                            0 => (vec![*inputs, *state], *inputs),
                            1 => (vec![*state, *state], *state),
                            _ => (vec![*state], *state),
                        };
                        params.push(ParamTensor {
                            name: format!("{idx}.{part}"),
                            values: uniform_fan_in(&shape, fan_in, &mut rng),
                            grad: None,
                        });
                    }
                }
                LayerSpec::Flatten | LayerSpec::Unflatten { .. } => {}
            }
        }
        Ok(Network {
            spec,
            params,
            run: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Plant every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        ParamBinding {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.values.clone()))
                .collect(),
        }
    }

    /// Plant every parameter as a constant. The forward math is identical,
    /// but backward treats this network as frozen and prunes its gradients.
    pub fn bind_frozen(&self, tape: &mut Tape) -> ParamBinding {
        ParamBinding {
            vars: self
                .params
                .iter()
                .map(|p| tape.constant(p.values.clone()))
                .collect(),
        }
    }

    /// Wire the forward ops for `x` (a batch leaf already on `tape`).
    ///
    /// For a sequential spec, `x` is `[time, ...]` and recurrent layers
    /// unroll along the leading dimension with a zero initial state.
    pub fn apply(&self, tape: &mut Tape, binding: &ParamBinding, x: Var) -> Var {
        let mut cur = x;
        let mut pi = 0usize; // parameter cursor
        for layer in &self.spec.layers {
            match layer {
                LayerSpec::Dense { activation, .. } => {
                    let w = binding.var(pi);
                    let b = binding.var(pi + 1);
                    pi += 2;
                    let y = tape.matmul(cur, w);
                    let y = tape.add_row(y, b);
                    cur = activation.apply(tape, y);
                }
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    activation,
                    ..
                } => {
                    let w = binding.var(pi);
                    let b = binding.var(pi + 1);
                    pi += 2;
                    let y = tape.conv2d(cur, w, *kernel, *stride, *pad);
                    let shape = tape.value(y).shape().to_vec();
                    let rows: usize = shape[..3].iter().product();
                    let flat = tape.reshape(y, &[rows, *out_channels]);
                    let biased = tape.add_row(flat, b);
                    let back = tape.reshape(biased, &shape);
                    cur = activation.apply(tape, back);
                }
                LayerSpec::ConvTranspose {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    activation,
                    ..
                } => {
                    let w = binding.var(pi);
                    let b = binding.var(pi + 1);
                    pi += 2;
                    let y = tape.conv2d_transpose(cur, w, *out_channels, *kernel, *stride, *pad);
                    let shape = tape.value(y).shape().to_vec();
                    let rows: usize = shape[..3].iter().product();
                    let flat = tape.reshape(y, &[rows, *out_channels]);
                    let biased = tape.add_row(flat, b);
                    let back = tape.reshape(biased, &shape);
                    cur = activation.apply(tape, back);
                }
                LayerSpec::Gru { state, .. } => {
                    let vars = GruVars::from_binding(binding, pi);
                    pi += 9;
                    let t_steps = tape.value(cur).shape()[0];
                    let mut h = tape.constant(Tensor::zeros(&[1, *state]));
                    let mut steps = Vec::with_capacity(t_steps);
                    for t in 0..t_steps {
                        let row = tape.slice_rows_as_cols(cur, t);
                        h = gru_step(tape, &vars, row, h);
                        steps.push(h);
                    }
                    // Stack the per-step states back into [time, state].
                    let mut seq = steps[0];
                    for &s in &steps[1..] {
                        seq = tape.concat_rows(seq, s);
                    }
                    cur = seq;
                }
                LayerSpec::Flatten => {
                    let shape = tape.value(cur).shape().to_vec();
                    let feat: usize = shape[1..].iter().product();
                    cur = tape.reshape(cur, &[shape[0], feat]);
                }
                LayerSpec::Unflatten {
                    height,
                    width,
                    channels,
                } => {
                    let rows = tape.value(cur).rows();
                    cur = tape.reshape(cur, &[rows, *height, *width, *channels]);
                }
            }
        }
        cur
    }

    /// Record a forward pass for [`Network::backward`]. `input` must be the
    /// per-sample shape with a leading batch (or time) dimension.
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let binding = self.bind(&mut tape);
        let out = self.apply(&mut tape, &binding, x);
        let value = tape.value(out).clone();
        self.run = Some(RecordedRun {
            tape,
            output: out,
            param_vars: binding.vars,
        });
        Ok(value)
    }

    /// Accumulate parameter gradients from the recorded forward pass,
    /// seeding the output with `upstream`. Errors if no pass was recorded.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<(), NnError> {
        let run = self.run.as_ref().ok_or(NnError::BackwardBeforeForward)?;
        let out_shape = run.tape.value(run.output).shape();
        if upstream.shape() != out_shape {
            return Err(NnError::ShapeMismatch {
                op: "backward",
                expected: format!("{out_shape:?}"),
                actual: format!("{:?}", upstream.shape()),
            });
        }
        let mut grads = run.tape.backward_with(run.output, upstream.clone());
        for (param, var) in self.params.iter_mut().zip(&run.param_vars) {
            let g = grads.take_or_zeros(*var, param.values.shape());
            match &mut param.grad {
                Some(existing) => {
                    for (o, v) in existing.data_mut().iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Copy gradients out of a shared-tape backward pass into the params.
    pub fn accumulate_grads(&mut self, binding: &ParamBinding, grads: &mut super::tape::Gradients) {
        for (param, var) in self.params.iter_mut().zip(&binding.vars) {
            let g = grads.take_or_zeros(*var, param.values.shape());
            match &mut param.grad {
                Some(existing) => {
                    for (o, v) in existing.data_mut().iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
                slot => *slot = Some(g),
            }
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<(), NnError> {
        let want = &self.spec.input;
        let got = input.shape();
        if got.len() != want.len() + 1 || &got[1..] != want.as_slice() || got[0] == 0 {
            return Err(NnError::ShapeMismatch {
                op: "forward",
                expected: format!("[batch, {want:?}]"),
                actual: format!("{got:?}"),
            });
        }
        Ok(())
    }

    /// Value-only forward pass (no tape), for inference and the numeric
    /// side of gradient checks.
    pub fn eval(&self, input: &Tensor) -> Result<Tensor, NnError> {
        self.check_input(input)?;
        let mut cur = input.clone();
        let mut pi = 0usize;
        for layer in &self.spec.layers {
            match layer {
                LayerSpec::Dense { activation, .. } => {
                    let w = &self.params[pi].values;
                    let b = &self.params[pi + 1].values;
                    pi += 2;
                    let mut y = Tensor::zeros(&[cur.rows(), w.cols()]);
                    gemm_nn(&cur, w, &mut y, 0.0);
                    add_bias_rows(&mut y, b);
                    activation.apply_value(y.data_mut());
                    cur = y;
                }
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    activation,
                    ..
                } => {
                    let w = &self.params[pi].values;
                    let b = &self.params[pi + 1].values;
                    pi += 2;
                    let (bt, h, wd, c) = (
                        cur.shape()[0],
                        cur.shape()[1],
                        cur.shape()[2],
                        cur.shape()[3],
                    );
                    let geom = ConvGeom::new(bt, h, wd, c, *kernel, *stride, *pad);
                    let cols = im2col(&cur, &geom);
                    let mut y = Tensor::zeros(&[geom.out_positions(), *out_channels]);
                    gemm_nn(&cols, w, &mut y, 0.0);
                    add_bias_rows(&mut y, b);
                    activation.apply_value(y.data_mut());
                    cur = y.reshaped(&[bt, geom.out_h, geom.out_w, *out_channels]);
                }
                LayerSpec::ConvTranspose {
                    out_channels,
                    kernel,
                    stride,
                    pad,
                    activation,
                    ..
                } => {
                    let w = &self.params[pi].values;
                    let b = &self.params[pi + 1].values;
                    pi += 2;
                    let (bt, h, wd, in_c) = (
                        cur.shape()[0],
                        cur.shape()[1],
                        cur.shape()[2],
                        cur.shape()[3],
                    );
                    let (oh, ow) = ConvGeom::transpose_out(h, wd, *kernel, *stride, *pad);
                    let geom = ConvGeom::new(bt, oh, ow, *out_channels, *kernel, *stride, *pad);
                    let x2d = cur.reshaped(&[bt * h * wd, in_c]);
                    let mut cols = Tensor::zeros(&[geom.out_positions(), geom.patch_len()]);
                    gemm_nt(&x2d, w, &mut cols, 0.0);
                    let mut y = Tensor::zeros(&[bt, oh, ow, *out_channels]);
                    col2im(&cols, &geom, &mut y);
                    {
                        let mut flat = y.reshaped(&[bt * oh * ow, *out_channels]);
                        add_bias_rows(&mut flat, b);
                        activation.apply_value(flat.data_mut());
                        y = flat.reshaped(&[bt, oh, ow, *out_channels]);
                    }
                    cur = y;
                }
                LayerSpec::Gru { state, .. } => {
                    let cell = GruCellRef::from_params(&self.params, pi);
                    pi += 9;
                    let t_steps = cur.rows();
                    let mut h = Tensor::zeros(&[1, *state]);
                    let mut seq = Tensor::zeros(&[t_steps, *state]);
                    for t in 0..t_steps {
                        let row = Tensor::from_vec(
                            &[1, cur.cols()],
                            cur.data()[t * cur.cols()..(t + 1) * cur.cols()].to_vec(),
                        );
                        h = cell.step_value(&row, &h);
                        seq.data_mut()[t * state..(t + 1) * state].copy_from_slice(h.data());
                    }
                    cur = seq;
                }
                LayerSpec::Flatten => {
                    let bt = cur.shape()[0];
                    let feat: usize = cur.shape()[1..].iter().product();
                    cur = cur.reshaped(&[bt, feat]);
                }
                LayerSpec::Unflatten {
                    height,
                    width,
                    channels,
                } => {
                    let bt = cur.shape()[0];
                    cur = cur.reshaped(&[bt, *height, *width, *channels]);
                }
            }
        }
        Ok(cur)
    }
}

fn add_bias_rows(y: &mut Tensor, b: &Tensor) {
    let n = y.cols();
    for row in y.data_mut().chunks_mut(n) {
        for (o, v) in row.iter_mut().zip(b.data()) {
            *o += v;
        }
    }
}

/// Tape handles for one GRU cell's nine parameter tensors.
pub struct GruVars {
    pub w_reset: Var,
    pub u_reset: Var,
    pub b_reset: Var,
    pub w_update: Var,
    pub u_update: Var,
    pub b_update: Var,
    pub w_cand: Var,
    pub u_cand: Var,
    pub b_cand: Var,
}

impl GruVars {
    pub fn from_binding(binding: &ParamBinding, offset: usize) -> Self {
        GruVars {
            w_reset: binding.var(offset),
            u_reset: binding.var(offset + 1),
            b_reset: binding.var(offset + 2),
            w_update: binding.var(offset + 3),
            u_update: binding.var(offset + 4),
            b_update: binding.var(offset + 5),
            w_cand: binding.var(offset + 6),
            u_cand: binding.var(offset + 7),
            b_cand: binding.var(offset + 8),
        }
    }
}

/// One gated recurrent step on the tape:
/// `r = sigmoid(x W_r + h U_r + b_r)`, `z = sigmoid(x W_z + h U_z + b_z)`,
/// `n = tanh(x W_n + (r * h) U_n + b_n)`, `h' = z * h + (1 - z) * n`.
pub fn gru_step(tape: &mut Tape, vars: &GruVars, x: Var, h: Var) -> Var {
    let xr = tape.matmul(x, vars.w_reset);
    let hr = tape.matmul(h, vars.u_reset);
    let r_pre = tape.add(xr, hr);
    let r_pre = tape.add_row(r_pre, vars.b_reset);
    let r = tape.sigmoid(r_pre);

    let xz = tape.matmul(x, vars.w_update);
    let hz = tape.matmul(h, vars.u_update);
    let z_pre = tape.add(xz, hz);
    let z_pre = tape.add_row(z_pre, vars.b_update);
    let z = tape.sigmoid(z_pre);

    let xn = tape.matmul(x, vars.w_cand);
    let rh = tape.mul(r, h);
    let hn = tape.matmul(rh, vars.u_cand);
    let n_pre = tape.add(xn, hn);
    let n_pre = tape.add_row(n_pre, vars.b_cand);
    let n = tape.tanh(n_pre);

    let zh = tape.mul(z, h);
    let one_minus_z = {
        let neg = tape.neg(z);
        tape.add_scalar(neg, 1.0)
    };
    let zn = tape.mul(one_minus_z, n);
    tape.add(zh, zn)
}

/// Borrowed view of one GRU cell's parameters for the value-only path.
struct GruCellRef<'a> {
    p: &'a [ParamTensor],
    off: usize,
}

impl<'a> GruCellRef<'a> {
    fn from_params(params: &'a [ParamTensor], off: usize) -> Self {
        GruCellRef { p: params, off }
    }

    fn step_value(&self, x: &Tensor, h: &Tensor) -> Tensor {
        let w = |i: usize| &self.p[self.off + i].values;
        let gate = |wx: &Tensor, uh: &Tensor, b: &Tensor, hv: &Tensor| -> Tensor {
            let mut y = Tensor::zeros(&[x.rows(), b.len()]);
            gemm_nn(x, wx, &mut y, 0.0);
            gemm_nn(hv, uh, &mut y, 1.0);
            add_bias_rows(&mut y, b);
            y
        };
        let mut r = gate(w(0), w(1), w(2), h);
        Activation::Sigmoid.apply_value(r.data_mut());
        let mut z = gate(w(3), w(4), w(5), h);
        Activation::Sigmoid.apply_value(z.data_mut());
        let rh = Tensor::from_vec(
            h.shape(),
            r.data().iter().zip(h.data()).map(|(a, b)| a * b).collect(),
        );
        let mut n = Tensor::zeros(&[x.rows(), z.cols()]);
        gemm_nn(x, w(6), &mut n, 0.0);
        gemm_nn(&rh, w(7), &mut n, 1.0);
        add_bias_rows(&mut n, w(8));
        Activation::Tanh.apply_value(n.data_mut());
        Tensor::from_vec(
            h.shape(),
            z.data()
                .iter()
                .zip(h.data())
                .zip(n.data())
                .map(|((zv, hv), nv)| zv * hv + (1.0 - zv) * nv)
                .collect(),
        )
    }
}

/// Result of a finite-difference gradient check.
#[derive(Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic| + |numeric|, 1e-4)`
    /// over all parameter elements.
    pub max_rel_err: f64,
    /// Worst (parameter name, relative error) per parameter tensor.
    pub per_param: Vec<(String, f64)>,
}

/// Compare reverse-mode gradients of `sum(net(input))` against central
/// finite differences with the given step. The relative-error denominator
/// is floored at 1e-4 so true-zero gradients are not judged against
/// floating-point noise.
pub fn grad_check(
    net: &mut Network,
    input: &Tensor,
    step: f64,
) -> Result<GradCheckReport, NnError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let out = net.forward(input)?;
    for p in net.params.iter_mut() {
        p.grad = None;
    }
    net.backward(&Tensor::filled(out.shape(), 1.0))?;
    let analytic: Vec<Tensor> = net
        .params
        .iter()
        .map(|p| {
            p.grad
                .clone()
                .unwrap_or_else(|| Tensor::zeros(p.values.shape()))
        })
        .collect();

    let mut per_param = Vec::with_capacity(net.params.len());
    let mut max_rel = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..net.params[pi].values.len() {
            let orig = net.params[pi].values.data()[i];
            net.params[pi].values.data_mut()[i] = orig + step;
            let plus: f64 = net.eval(input)?.data().iter().sum();
            net.params[pi].values.data_mut()[i] = orig - step;
            let minus: f64 = net.eval(input)?.data().iter().sum();
            net.params[pi].values.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grads.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-4);
            worst = worst.max(rel);
        }
        per_param.push((net.params[pi].name.clone(), worst));
        max_rel = max_rel.max(worst);
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        per_param,
    })
}

impl Tape {
    /// Extract row `t` of a rank-2 tensor as a `[1, n]` tensor.
    pub(crate) fn slice_rows_as_cols(&mut self, x: Var, t: usize) -> Var {
        // Reshape to a single row-per-column layout, then slice columns.
        let (rows, cols) = {
            let v = self.value(x);
            (v.rows(), v.cols())
        };
        assert!(t < rows, "row {t} out of {rows}");
        let flat = self.reshape(x, &[1, rows * cols]);
        self.slice_cols(flat, t * cols, (t + 1) * cols)
    }

    /// Concatenate two rank-2 tensors along rows (equal column counts).
    pub(crate) fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = {
            let v = self.value(a);
            (v.rows(), v.cols())
        };
        let (rb, cb) = {
            let v = self.value(b);
            (v.rows(), v.cols())
        };
        assert_eq!(ca, cb, "concat_rows: {ca} cols vs {cb} cols");
        let fa = self.reshape(a, &[1, ra * ca]);
        let fb = self.reshape(b, &[1, rb * cb]);
        let cat = self.concat_cols(fa, fb);
        self.reshape(cat, &[ra + rb, ca])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_spec(widths: &[usize], act: Activation) -> NetworkSpec {
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            layers.push(LayerSpec::Dense {
                inputs: w[0],
                outputs: w[1],
                activation: act,
            });
        }
        NetworkSpec::new(vec![widths[0]], layers)
    }

    fn rand_input(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let len: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        )
    }

    #[test]
    fn validation_rejects_bad_compositions() {
        let bad = NetworkSpec::new(
            vec![4],
            vec![LayerSpec::Dense {
                inputs: 5,
                outputs: 3,
                activation: Activation::Linear,
            }],
        );
        assert!(matches!(bad.layer_shapes(), Err(NnError::InvalidSpec(_))));
        let empty = NetworkSpec::new(vec![4], vec![]);
        assert!(matches!(empty.layer_shapes(), Err(NnError::InvalidSpec(_))));
    }

    #[test]
    fn forward_shape_mismatch_is_a_structured_error() {
        let mut net = Network::init(dense_spec(&[3, 2], Activation::Linear), 0).unwrap();
        let err = net.forward(&Tensor::zeros(&[4, 5])).unwrap_err();
        match err {
            NnError::ShapeMismatch {
                op,
                expected,
                actual,
            } => {
                assert_eq!(op, "forward");
                assert!(expected.contains('3'), "{expected}");
                assert!(actual.contains('5'), "{actual}");
            }
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn backward_before_forward_errors() {
        let mut net = Network::init(dense_spec(&[3, 2], Activation::Linear), 0).unwrap();
        assert!(matches!(
            net.backward(&Tensor::zeros(&[1, 2])),
            Err(NnError::BackwardBeforeForward)
        ));
    }

    /// Identity-ish sanity: a single linear layer with hand-set weights.
    /// y = x W + b with W = [[1,2],[3,4]], b = [0.5, -0.5], x = [1, 1]
    /// => y = [4.5, 5.5]; dL/dW for L = sum(y) is [[1,1],[1,1]] per row of x.
    #[test]
    fn linear_layer_hand_case() {
        let mut net = Network::init(dense_spec(&[2, 2], Activation::Linear), 0).unwrap();
        net.params[0].values = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        net.params[1].values = Tensor::from_vec(&[2], vec![0.5, -0.5]);
        let out = net
            .forward(&Tensor::from_vec(&[1, 2], vec![1.0, 1.0]))
            .unwrap();
        assert_eq!(out.data(), &[4.5, 5.5]);
        net.backward(&Tensor::filled(&[1, 2], 1.0)).unwrap();
        assert_eq!(
            net.params[0].grad.as_ref().unwrap().data(),
            &[1.0, 1.0, 1.0, 1.0]
        );
        assert_eq!(net.params[1].grad.as_ref().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn eval_matches_forward() {
        let spec = NetworkSpec::new(
            vec![6, 6, 2],
            vec![
                LayerSpec::Conv {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 4,
                    stride: 2,
                    pad: 1,
                    activation: Activation::Elu,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 3 * 3 * 3,
                    outputs: 4,
                    activation: Activation::Tanh,
                },
            ],
        );
        let mut net = Network::init(spec, 3).unwrap();
        let x = rand_input(&[2, 6, 6, 2], 4);
        let a = net.forward(&x).unwrap();
        let b = net.eval(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grad_check_mlp() {
        let mut net = Network::init(dense_spec(&[5, 7, 3], Activation::Tanh), 5).unwrap();
        let x = rand_input(&[4, 5], 6);
        let report = grad_check(&mut net, &x, 1e-5).unwrap();
        assert!(
            report.max_rel_err < 1e-6,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn grad_check_conv_stack() {
        let spec = NetworkSpec::new(
            vec![8, 8, 2],
            vec![
                LayerSpec::Conv {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 4,
                    stride: 2,
                    pad: 1,
                    activation: Activation::Elu,
                },
                LayerSpec::Conv {
                    in_channels: 3,
                    out_channels: 2,
                    kernel: 4,
                    stride: 2,
                    pad: 1,
                    activation: Activation::Elu,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 2 * 2 * 2,
                    outputs: 2,
                    activation: Activation::Linear,
                },
            ],
        );
        let mut net = Network::init(spec, 7).unwrap();
        let x = rand_input(&[2, 8, 8, 2], 8);
        let report = grad_check(&mut net, &x, 1e-5).unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn grad_check_deconv() {
        let spec = NetworkSpec::new(
            vec![12],
            vec![
                LayerSpec::Dense {
                    inputs: 12,
                    outputs: 2 * 2 * 3,
                    activation: Activation::Elu,
                },
                LayerSpec::Unflatten {
                    height: 2,
                    width: 2,
                    channels: 3,
                },
                LayerSpec::ConvTranspose {
                    in_channels: 3,
                    out_channels: 2,
                    kernel: 4,
                    stride: 2,
                    pad: 1,
                    activation: Activation::Linear,
                },
            ],
        );
        let mut net = Network::init(spec, 9).unwrap();
        let x = rand_input(&[3, 12], 10);
        let report = grad_check(&mut net, &x, 1e-5).unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "max rel err {}",
            report.max_rel_err
        );
    }

    /// Conv feeding a recurrent cell unrolled over three timesteps.
    #[test]
    fn grad_check_conv_gru_unrolled() {
        let spec = NetworkSpec::new(
            vec![4, 4, 1],
            vec![
                LayerSpec::Conv {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 4,
                    stride: 2,
                    pad: 1,
                    activation: Activation::Elu,
                },
                LayerSpec::Flatten,
                LayerSpec::Gru {
                    inputs: 2 * 2 * 2,
                    state: 5,
                },
                LayerSpec::Dense {
                    inputs: 5,
                    outputs: 2,
                    activation: Activation::Linear,
                },
            ],
        );
        let mut net = Network::init(spec, 11).unwrap();
        let x = rand_input(&[3, 4, 4, 1], 12); // three timesteps
        let report = grad_check(&mut net, &x, 1e-5).unwrap();
        assert!(
            report.max_rel_err < 1e-5,
            "max rel err {}",
            report.max_rel_err
        );
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = dense_spec(&[4, 4, 2], Activation::Relu);
        let a = Network::init(spec.clone(), 42).unwrap();
        let b = Network::init(spec.clone(), 42).unwrap();
        let c = Network::init(spec, 43).unwrap();
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.values, pb.values);
        }
        assert!(a
            .params
            .iter()
            .zip(&c.params)
            .any(|(pa, pc)| pa.values != pc.values));
    }

    #[test]
    fn describe_is_stable_and_hash_differs_across_specs() {
        let a = dense_spec(&[4, 3], Activation::Relu);
        let b = dense_spec(&[4, 3], Activation::Tanh);
        assert_eq!(a.describe(), a.clone().describe());
        assert_ne!(a.hash(), b.hash());
    }
}
