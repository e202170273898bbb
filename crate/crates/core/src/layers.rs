//! Convolution, pooling, dense and recurrent building blocks.
//!
//! Parameters live in a [`ParamSet`] and layers refer to them by
//! [`ParamId`]. Each forward pass binds the set onto a fresh [`Graph`] with
//! [`ParamSet::bind`] and threads the resulting [`Bound`] handles through the
//! layer functions.

use std::ops::Index;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<NamedTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(NamedTensor {
            name: name.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|e| &e.value)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|e| &mut e.value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Registers every tensor on `g` as a gradient-tracked leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.entries.iter().map(|e| g.param(e.value.clone())).collect())
    }
}

/// Graph handles for a bound [`ParamSet`], in parameter order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles in parameter order, e.g. as created by a gradient checker.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Uniform(−a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-a..a)).collect())
        .expect("shape and data agree by construction")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Linear => Ok(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
        }
    }
}

// ---------------------------------------------------------------------------
// convolutional stage

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv1dParams {
    /// `[out_channels × in_channels × width]`
    pub kernels: ParamId,
    /// `[out_channels]`
    pub bias: ParamId,
    pub stride: usize,
    pub activation: Activation,
}

impl Conv1dParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        width: usize,
        stride: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if width == 0 || stride == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!(
                "conv1d needs positive channels, width and stride (got {in_channels}, {out_channels}, {width}, {stride})"
            )));
        }
        let kernels = ps.add(
            format!("{name}.kernels"),
            glorot_uniform(
                rng,
                &[out_channels, in_channels, width],
                in_channels * width,
                out_channels * width,
            ),
        );
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Ok(Conv1dParams {
            kernels,
            bias,
            stride,
            activation,
        })
    }
}

/// Output length of a valid sliding window.
pub fn conv_output_len(len: usize, width: usize, stride: usize) -> Option<usize> {
    (len >= width && width > 0 && stride > 0).then(|| (len - width) / stride + 1)
}

/// Lifts `[C × L]` to `[1 × C × L]`, returning whether it did.
fn as_batch(g: &mut Graph, x: Var, op: &'static str) -> Result<(Var, bool)> {
    match g.shape(x).len() {
        3 => Ok((x, false)),
        2 => {
            let s = g.shape(x).to_vec();
            Ok((g.reshape(x, &[1, s[0], s[1]])?, true))
        }
        _ => Err(Error::BadShape {
            op,
            detail: format!("expected [C × L] or [N × C × L], got {:?}", g.shape(x)),
        }),
    }
}

fn drop_batch(g: &mut Graph, y: Var, lifted: bool) -> Result<Var> {
    if lifted {
        let s = g.shape(y).to_vec();
        g.reshape(y, &s[1..])
    } else {
        Ok(y)
    }
}

/// Valid 1D cross-correlation followed by the layer activation. Accepts
/// `[C_in × L]` or a batch `[N × C_in × L]`.
pub fn conv1d(g: &mut Graph, b: &Bound, x: Var, p: &Conv1dParams) -> Result<Var> {
    let (xb, lifted) = as_batch(g, x, "conv1d")?;
    let y = g.conv1d(xb, b[p.kernels], b[p.bias], p.stride)?;
    let y = p.activation.apply(g, y)?;
    drop_batch(g, y, lifted)
}

/// Per-channel windowed maxima followed by relu.
pub fn maxpool1d(g: &mut Graph, x: Var, window: usize, stride: usize) -> Result<Var> {
    let (xb, lifted) = as_batch(g, x, "maxpool1d")?;
    let y = g.maxpool1d(xb, window, stride)?;
    let y = g.relu(y)?;
    drop_batch(g, y, lifted)
}

/// Row-major flattening of `[C × L]` to `[C·L]`, or `[N × C × L]` to `[N × C·L]`.
pub fn flatten(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    match s.len() {
        0 | 1 => Ok(x),
        2 => g.reshape(x, &[s[0] * s[1]]),
        _ => g.reshape(x, &[s[0], s[1..].iter().product()]),
    }
}

// ---------------------------------------------------------------------------
// dense

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    /// `[out × in]`
    pub weight: ParamId,
    /// `[out]`
    pub bias: ParamId,
    pub activation: Activation,
}

impl DenseParams {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            glorot_uniform(rng, &[output, input], input, output),
        );
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        DenseParams {
            weight,
            bias,
            activation,
        }
    }
}

/// Lifts a vector to a one-row matrix, returning whether it did.
fn as_rows(g: &mut Graph, x: Var) -> Result<(Var, bool)> {
    match g.shape(x).len() {
        1 => {
            let n = g.shape(x)[0];
            Ok((g.reshape(x, &[1, n])?, true))
        }
        2 => Ok((x, false)),
        _ => Err(Error::BadShape {
            op: "dense",
            detail: format!("expected a vector or [B × in] batch, got {:?}", g.shape(x)),
        }),
    }
}

fn drop_rows(g: &mut Graph, y: Var, lifted: bool) -> Result<Var> {
    if lifted {
        let n = g.shape(y)[1];
        g.reshape(y, &[n])
    } else {
        Ok(y)
    }
}

/// `σ(W·h + b)` for a vector `h` or each row of a batch.
pub fn dense(g: &mut Graph, b: &Bound, h: Var, p: &DenseParams) -> Result<Var> {
    let (hb, lifted) = as_rows(g, h)?;
    let y = g.linear(hb, b[p.weight], Some(b[p.bias]))?;
    let y = p.activation.apply(g, y)?;
    drop_rows(g, y, lifted)
}

// ---------------------------------------------------------------------------
// recurrent cells

/// Input weight, recurrent weight and bias of one pre-activation
/// `W·x + U·h + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    /// `[hidden × input]`
    pub w: ParamId,
    /// `[hidden × hidden]`
    pub u: ParamId,
    /// `[hidden]`
    pub b: ParamId,
}

impl Gate {
    fn init<R: Rng>(ps: &mut ParamSet, name: &str, input: usize, hidden: usize, bias: f64, rng: &mut R) -> Self {
        Gate {
            w: ps.add(format!("{name}.w"), glorot_uniform(rng, &[hidden, input], input, hidden)),
            u: ps.add(format!("{name}.u"), glorot_uniform(rng, &[hidden, hidden], hidden, hidden)),
            b: ps.add(format!("{name}.b"), Tensor::full(&[hidden], bias)),
        }
    }

    fn pre(&self, g: &mut Graph, b: &Bound, x: Var, h: Var) -> Result<Var> {
        let wx = g.linear(x, b[self.w], Some(b[self.b]))?;
        let uh = g.linear(h, b[self.u], None)?;
        g.add(wx, uh)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Vanilla,
    Lstm,
    Gru,
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" | "rnn" | "elman" => Ok(CellKind::Vanilla),
            "lstm" => Ok(CellKind::Lstm),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::Config(format!("unknown cell kind `{other}`"))),
        }
    }
}

/// Elman cell `h_t = σ(W·x_t + U·h_{t−1} + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrentCellParams {
    pub gate: Gate,
    pub activation: Activation,
    pub hidden: usize,
}

/// LSTM without peepholes: input, forget, output and candidate blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input: Gate,
    pub forget: Gate,
    pub output: Gate,
    pub candidate: Gate,
    pub hidden: usize,
}

/// GRU with the reset gate applied before the candidate's recurrent product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub update: Gate,
    pub reset: Gate,
    pub candidate: Gate,
    pub hidden: usize,
}

impl RecurrentCellParams {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        RecurrentCellParams {
            gate: Gate::init(ps, name, input, hidden, 0.0, rng),
            activation,
            hidden,
        }
    }
}

impl LstmParams {
    pub fn init<R: Rng>(ps: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        LstmParams {
            input: Gate::init(ps, &format!("{name}.input"), input, hidden, 0.0, rng),
            forget: Gate::init(ps, &format!("{name}.forget"), input, hidden, 1.0, rng),
            output: Gate::init(ps, &format!("{name}.output"), input, hidden, 0.0, rng),
            candidate: Gate::init(ps, &format!("{name}.candidate"), input, hidden, 0.0, rng),
            hidden,
        }
    }
}

impl GruParams {
    pub fn init<R: Rng>(ps: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        GruParams {
            update: Gate::init(ps, &format!("{name}.update"), input, hidden, 0.0, rng),
            reset: Gate::init(ps, &format!("{name}.reset"), input, hidden, 0.0, rng),
            candidate: Gate::init(ps, &format!("{name}.candidate"), input, hidden, 0.0, rng),
            hidden,
        }
    }
}

/// Hidden state, plus the memory cell for LSTMs.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

pub fn rnn_step(g: &mut Graph, b: &Bound, x: Var, h_prev: Var, p: &RecurrentCellParams) -> Result<Var> {
    let pre = p.gate.pre(g, b, x, h_prev)?;
    p.activation.apply(g, pre)
}

pub fn lstm_step(g: &mut Graph, b: &Bound, x: Var, state: CellState, p: &LstmParams) -> Result<CellState> {
    let c_prev = state.c.ok_or_else(|| Error::Config("lstm step needs a memory cell".into()))?;
    let h_prev = state.h;
    let i = p.input.pre(g, b, x, h_prev)?;
    let i = g.sigmoid(i)?;
    let f = p.forget.pre(g, b, x, h_prev)?;
    let f = g.sigmoid(f)?;
    let o = p.output.pre(g, b, x, h_prev)?;
    let o = g.sigmoid(o)?;
    let cand = p.candidate.pre(g, b, x, h_prev)?;
    let cand = g.tanh(cand)?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok(CellState { h, c: Some(c) })
}

pub fn gru_step(g: &mut Graph, b: &Bound, x: Var, h_prev: Var, p: &GruParams) -> Result<Var> {
    let z = p.update.pre(g, b, x, h_prev)?;
    let z = g.sigmoid(z)?;
    let r = p.reset.pre(g, b, x, h_prev)?;
    let r = g.sigmoid(r)?;
    let rh = g.mul(r, h_prev)?;
    let cand = p.candidate.pre(g, b, x, rh)?;
    let cand = g.tanh(cand)?;
    // (1 − z)⊙h + z⊙h̃  ==  h + z⊙(h̃ − h)
    let delta = g.sub(cand, h_prev)?;
    let step = g.mul(z, delta)?;
    g.add(h_prev, step)
}

/// A recurrent cell of any supported kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Cell {
    Vanilla(RecurrentCellParams),
    Lstm(LstmParams),
    Gru(GruParams),
}

impl Cell {
    pub fn init<R: Rng>(
        ps: &mut ParamSet,
        name: &str,
        kind: CellKind,
        input: usize,
        hidden: usize,
        vanilla_activation: Activation,
        rng: &mut R,
    ) -> Self {
        match kind {
            CellKind::Vanilla => {
                Cell::Vanilla(RecurrentCellParams::init(ps, name, input, hidden, vanilla_activation, rng))
            }
            CellKind::Lstm => Cell::Lstm(LstmParams::init(ps, name, input, hidden, rng)),
            CellKind::Gru => Cell::Gru(GruParams::init(ps, name, input, hidden, rng)),
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            Cell::Vanilla(_) => CellKind::Vanilla,
            Cell::Lstm(_) => CellKind::Lstm,
            Cell::Gru(_) => CellKind::Gru,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Cell::Vanilla(p) => p.hidden,
            Cell::Lstm(p) => p.hidden,
            Cell::Gru(p) => p.hidden,
        }
    }

    /// All-zero state for a batch of `batch` sequences.
    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> CellState {
        let shape = [batch, self.hidden()];
        let h = g.constant(Tensor::zeros(&shape));
        let c = matches!(self, Cell::Lstm(_)).then(|| g.constant(Tensor::zeros(&shape)));
        CellState { h, c }
    }

    /// One step on a batch `x[B × F]`.
    pub fn step(&self, g: &mut Graph, b: &Bound, x: Var, state: CellState) -> Result<CellState> {
        match self {
            Cell::Vanilla(p) => Ok(CellState {
                h: rnn_step(g, b, x, state.h, p)?,
                c: None,
            }),
            Cell::Lstm(p) => lstm_step(g, b, x, state, p),
            Cell::Gru(p) => Ok(CellState {
                h: gru_step(g, b, x, state.h, p)?,
                c: None,
            }),
        }
    }
}

/// Runs `cell` over a sequence from a zero state and returns the final hidden
/// state. `seq` is `[T × F]` (result `[hidden]`) or time-major `[T × B × F]`
/// (result `[B × hidden]`).
pub fn unroll(g: &mut Graph, b: &Bound, cell: &Cell, seq: Var) -> Result<Var> {
    let shape = g.shape(seq).to_vec();
    let (steps, batch, feat, single) = match shape.as_slice() {
        &[t, f] => (t, 1, f, true),
        &[t, n, f] => (t, n, f, false),
        _ => {
            return Err(Error::BadShape {
                op: "unroll",
                detail: format!("expected [T × F] or [T × B × F], got {shape:?}"),
            })
        }
    };
    if steps == 0 {
        return Err(Error::Empty("sequence"));
    }
    let mut state = cell.zero_state(g, batch);
    for t in 0..steps {
        let frame = g.narrow(seq, 0, t, 1)?;
        let x = g.reshape(frame, &[batch, feat])?;
        state = cell.step(g, b, x, state)?;
    }
    if single {
        g.reshape(state.h, &[cell.hidden()])
    } else {
        Ok(state.h)
    }
}
