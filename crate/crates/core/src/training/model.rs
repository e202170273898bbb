use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowedSample;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{
    conv1d, conv_output_len, dense, flatten, maxpool1d, unroll, Activation, Bound, Cell, CellKind, Conv1dParams,
    DenseParams, ParamSet,
};
use crate::mdn::PARAMS_PER_COMPONENT;
use crate::tensor::Tensor;

/// The six architectures compared in the model study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "RNN")]
    Rnn,
    #[serde(rename = "CNN+RNN")]
    CnnRnn,
    #[serde(rename = "RNN+MDN")]
    RnnMdn,
    #[serde(rename = "CMDRNN-vanilla")]
    CmdrnnVanilla,
    #[serde(rename = "CMDRNN-LSTM")]
    CmdrnnLstm,
    #[serde(rename = "CMDRNN-GRU")]
    CmdrnnGru,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Rnn,
        Variant::CnnRnn,
        Variant::RnnMdn,
        Variant::CmdrnnVanilla,
        Variant::CmdrnnLstm,
        Variant::CmdrnnGru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Rnn => "RNN",
            Variant::CnnRnn => "CNN+RNN",
            Variant::RnnMdn => "RNN+MDN",
            Variant::CmdrnnVanilla => "CMDRNN-vanilla",
            Variant::CmdrnnLstm => "CMDRNN-LSTM",
            Variant::CmdrnnGru => "CMDRNN-GRU",
        }
    }

    pub fn has_cnn(self) -> bool {
        !matches!(self, Variant::Rnn | Variant::RnnMdn)
    }

    pub fn has_mdn(self) -> bool {
        !matches!(self, Variant::Rnn | Variant::CnnRnn)
    }

    pub fn cell_kind(self) -> CellKind {
        match self {
            Variant::CmdrnnLstm => CellKind::Lstm,
            Variant::CmdrnnGru => CellKind::Gru,
            _ => CellKind::Vanilla,
        }
    }

    pub fn loss(self) -> LossKind {
        if self.has_mdn() {
            LossKind::MixtureNll
        } else {
            LossKind::Mse
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric() || *c == '+')
            .collect::<String>()
            .to_ascii_lowercase();
        let v = match key.as_str() {
            "rnn" => Variant::Rnn,
            "cnn+rnn" | "cnnrnn" => Variant::CnnRnn,
            "rnn+mdn" | "rnnmdn" => Variant::RnnMdn,
            "cmdrnnvanilla" | "cmdrnnrnn" | "cmdrnn" => Variant::CmdrnnVanilla,
            "cmdrnnlstm" | "cmdrnnlstmrnn" => Variant::CmdrnnLstm,
            "cmdrnngru" | "cmdrnngrurnn" => Variant::CmdrnnGru,
            _ => return Err(Error::Config(format!("unknown model variant `{s}`"))),
        };
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
    MixtureNll,
}

/// Architecture hyperparameters. Fields that a variant does not use are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub conv_filters: usize,
    pub kernel_width: usize,
    pub conv_stride: usize,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub hidden: usize,
    pub memory_length: usize,
    pub mixtures: usize,
    pub mdn_hidden: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            variant: Variant::CmdrnnGru,
            conv_filters: 100,
            kernel_width: 11,
            conv_stride: 2,
            pool_window: 2,
            pool_stride: 2,
            hidden: 200,
            memory_length: 5,
            mixtures: 30,
            mdn_hidden: 200,
        }
    }
}

impl ModelSpec {
    pub fn with_variant(variant: Variant) -> Self {
        ModelSpec {
            variant,
            ..ModelSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("conv_filters", self.conv_filters),
            ("kernel_width", self.kernel_width),
            ("conv_stride", self.conv_stride),
            ("pool_window", self.pool_window),
            ("pool_stride", self.pool_stride),
            ("hidden", self.hidden),
            ("memory_length", self.memory_length),
            ("mixtures", self.mixtures),
            ("mdn_hidden", self.mdn_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Per-step feature width fed to the recurrent cell.
    pub fn feature_len(&self, input_dim: usize) -> Result<usize> {
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        if !self.variant.has_cnn() {
            return Ok(input_dim);
        }
        let conv = conv_output_len(input_dim, self.kernel_width, self.conv_stride).ok_or_else(|| {
            Error::Config(format!(
                "input dimension {input_dim} is shorter than the kernel width {}",
                self.kernel_width
            ))
        })?;
        let pooled = conv_output_len(conv, self.pool_window, self.pool_stride).ok_or_else(|| {
            Error::Config(format!(
                "pool window {} exceeds the convolution output length {conv}",
                self.pool_window
            ))
        })?;
        Ok(self.conv_filters * pooled)
    }

    /// Width of the final layer: `5K` for mixture heads, 2 otherwise.
    pub fn output_len(&self) -> usize {
        if self.variant.has_mdn() {
            PARAMS_PER_COMPONENT * self.mixtures
        } else {
            2
        }
    }

    /// Mixture count actually used by the variant, 0 for regression heads.
    pub fn effective_mixtures(&self) -> usize {
        if self.variant.has_mdn() {
            self.mixtures
        } else {
            0
        }
    }
}

/// Per-axis affine map between coordinates and the standardized targets the
/// network is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Default for TargetScaler {
    fn default() -> Self {
        TargetScaler {
            mean: [0.0; 2],
            std: [1.0; 2],
        }
    }
}

impl TargetScaler {
    /// Mean and population std per axis; a constant axis keeps unit scale.
    pub fn fit(targets: &[[f64; 2]]) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::Empty("target set"));
        }
        let n = targets.len() as f64;
        let mut s = TargetScaler::default();
        for d in 0..2 {
            let mean = targets.iter().map(|t| t[d]).sum::<f64>() / n;
            let var = targets.iter().map(|t| (t[d] - mean).powi(2)).sum::<f64>() / n;
            s.mean[d] = mean;
            s.std[d] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(s)
    }

    pub fn forward(&self, y: [f64; 2]) -> [f64; 2] {
        [
            (y[0] - self.mean[0]) / self.std[0],
            (y[1] - self.mean[1]) / self.std[1],
        ]
    }

    pub fn inverse(&self, z: [f64; 2]) -> [f64; 2] {
        [
            z[0] * self.std[0] + self.mean[0],
            z[1] * self.std[1] + self.mean[1],
        ]
    }
}

/// A built network: its spec, the layer layout and all parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub input_dim: usize,
    pub scaler: TargetScaler,
    conv: Option<Conv1dParams>,
    cell: Cell,
    mdn_hidden: Option<DenseParams>,
    output: DenseParams,
    pub params: ParamSet,
}

const CHECKPOINT_FORMAT: &str = "cmdrnn-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    model: Model,
}

impl Model {
    /// Initializes a model for `input_dim`-wide scans from `seed`.
    pub fn build(spec: &ModelSpec, input_dim: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let features = spec.feature_len(input_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut ps = ParamSet::new();

        let conv = if spec.variant.has_cnn() {
            Some(Conv1dParams::init(
                &mut ps,
                "conv",
                1,
                spec.conv_filters,
                spec.kernel_width,
                spec.conv_stride,
                Activation::Sigmoid,
                &mut rng,
            )?)
        } else {
            None
        };
        let cell = Cell::init(
            &mut ps,
            "cell",
            spec.variant.cell_kind(),
            features,
            spec.hidden,
            Activation::Sigmoid,
            &mut rng,
        );
        let (mdn_hidden, head_in) = if spec.variant.has_mdn() {
            let d = DenseParams::init(&mut ps, "mdn_hidden", spec.hidden, spec.mdn_hidden, Activation::LeakyRelu, &mut rng);
            (Some(d), spec.mdn_hidden)
        } else {
            (None, spec.hidden)
        };
        let output = DenseParams::init(&mut ps, "output", head_in, spec.output_len(), Activation::Linear, &mut rng);

        Ok(Model {
            spec: spec.clone(),
            input_dim,
            scaler: TargetScaler::default(),
            conv,
            cell,
            mdn_hidden,
            output,
            params: ps,
        })
    }

    pub fn cell(&self) -> &Cell {
        &self.cell
    }

    /// Raw network output for time-major inputs `[T × B × D]`: `[B × 5K]`
    /// for mixture heads, `[B × 2]` standardized coordinates otherwise.
    pub fn forward(&self, g: &mut Graph, b: &Bound, inputs: Var) -> Result<Var> {
        let shape = g.shape(inputs).to_vec();
        let (steps, batch) = match shape.as_slice() {
            &[t, n, d] if d == self.input_dim => (t, n),
            _ => {
                return Err(Error::BadShape {
                    op: "model",
                    detail: format!("expected [T × B × {}], got {shape:?}", self.input_dim),
                })
            }
        };
        let seq = match &self.conv {
            Some(conv) => {
                let x = g.reshape(inputs, &[steps * batch, 1, self.input_dim])?;
                let x = conv1d(g, b, x, conv)?;
                let x = maxpool1d(g, x, self.spec.pool_window, self.spec.pool_stride)?;
                // pooled values are already relu'd, so the flatten activation is a no-op
                let x = flatten(g, x)?;
                let f = g.shape(x)[1];
                g.reshape(x, &[steps, batch, f])?
            }
            None => inputs,
        };
        let h = unroll(g, b, &self.cell, seq)?;
        let h = match &self.mdn_hidden {
            Some(d) => dense(g, b, h, d)?,
            None => h,
        };
        dense(g, b, h, &self.output)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer(
            &mut w,
            &CheckpointFile {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                model: self.clone(),
            },
        )
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let ck: CheckpointFile = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        ck.model.check_consistency()?;
        Ok(ck.model)
    }

    /// Rebuilds the layout from the spec and compares parameter names and shapes.
    fn check_consistency(&self) -> Result<()> {
        let fresh = Model::build(&self.spec, self.input_dim, 0)
            .map_err(|e| Error::Checkpoint(format!("spec does not build: {e}")))?;
        let same = fresh.params.len() == self.params.len()
            && fresh.params.ids().all(|id| {
                fresh.params.name(id) == self.params.name(id)
                    && fresh.params.get(id).shape() == self.params.get(id).shape()
            });
        if !same || fresh.conv != self.conv || fresh.cell != self.cell || fresh.mdn_hidden != self.mdn_hidden || fresh.output != self.output {
            return Err(Error::Checkpoint("parameters do not match the stored spec".into()));
        }
        if !self.params.tensors().all(Tensor::is_finite) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Stacks windows into a time-major `[T × B × D]` batch.
pub fn batch_inputs(samples: &[&WindowedSample]) -> Result<Tensor> {
    let first = samples.first().ok_or(Error::Empty("batch"))?;
    let (steps, dim) = (first.inputs.shape()[0], first.inputs.shape()[1]);
    let batch = samples.len();
    let mut data = vec![0.0; steps * batch * dim];
    for (b, s) in samples.iter().enumerate() {
        if s.inputs.shape() != [steps, dim] {
            return Err(Error::Shape {
                op: "batch_inputs",
                lhs: vec![steps, dim],
                rhs: s.inputs.shape().to_vec(),
            });
        }
        for t in 0..steps {
            let dst = (t * batch + b) * dim;
            data[dst..dst + dim].copy_from_slice(s.inputs.row(t));
        }
    }
    Tensor::new(vec![steps, batch, dim], data)
}
