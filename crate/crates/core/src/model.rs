//! Feed-forward multilayer perceptron `f(x; θ)` with a scalar output.
//!
//! Parameters are stored flat, layer by layer: the weight matrix in
//! row-major `(out, in)` order followed by the bias vector. The same order is
//! used when the model is recorded on a [`Tape`], so a gradient returned by
//! the tape lines up with [`MlpModel::params`].

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{self, Tape, Var};

/// Magic first line of a model file.
pub const MODEL_MAGIC: &str = "MONOTONE-PWL-MLP";
pub const MODEL_VERSION: u32 = 1;

/// Hidden widths used by default (two hidden layers).
pub const DEFAULT_HIDDEN: [usize; 2] = [32, 11];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input has {found} features, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("malformed model file at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("shape mismatch: dims {dims:?} need {expected} parameters, file has {found}")]
    ShapeMismatch {
        dims: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HiddenActivation {
    Tanh,
    Softplus,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputActivation {
    /// Regression: the score is the prediction.
    Identity,
    /// Classification: the prediction is `sigmoid(score)`.
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`, zero biases.
    UniformGlorot,
    /// `N(0, 1 / fan_in)`, zero biases.
    NormalScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub seed: u64,
}

impl InitSpec {
    pub fn glorot(seed: u64) -> Self {
        InitSpec {
            scheme: InitScheme::UniformGlorot,
            seed,
        }
    }
}

macro_rules! impl_names {
    ($ty:ty { $($variant:ident => $name:literal),* $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $(Self::$variant => $name),* }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok(Self::$variant),)*
                    other => Err(format!("unknown {}: {other}", stringify!($ty))),
                }
            }
        }
    };
}

impl_names!(HiddenActivation { Tanh => "tanh", Softplus => "softplus", Relu => "relu" });
impl_names!(OutputActivation { Identity => "identity", Sigmoid => "sigmoid" });
impl_names!(InitScheme { UniformGlorot => "uniform_glorot", NormalScaled => "normal_scaled" });

/// Number of parameters of a network with the given layer widths.
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    params: Vec<f64>,
    hidden: HiddenActivation,
    output: OutputActivation,
}

/// Pre- and post-output-activation value of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub output: f64,
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(ModelError::Config(format!(
            "need at least an input and an output layer, got dims {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(ModelError::Config(format!(
            "layer widths must be positive: {dims:?}"
        )));
    }
    if *dims.last().unwrap() != 1 {
        return Err(ModelError::Config(format!(
            "output layer must have width 1, got {dims:?}"
        )));
    }
    Ok(())
}

impl MlpModel {
    pub fn init(
        dims: &[usize],
        hidden: HiddenActivation,
        output: OutputActivation,
        init: InitSpec,
    ) -> Result<Self> {
        validate_dims(dims)?;
        if hidden == HiddenActivation::Relu {
            log::warn!(
                "relu hidden units: the monotonicity penalty gradient is piecewise constant in the inputs"
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let mut params = Vec::with_capacity(param_count(dims));
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            match init.scheme {
                InitScheme::UniformGlorot => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-a..a)));
                }
                InitScheme::NormalScaled => {
                    let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
                    params.extend((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)));
                }
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(MlpModel {
            dims: dims.to_vec(),
            params,
            hidden,
            output,
        })
    }

    /// Builds a model from explicit parameters in the flat layout.
    pub fn from_params(
        dims: &[usize],
        hidden: HiddenActivation,
        output: OutputActivation,
        params: Vec<f64>,
    ) -> Result<Self> {
        validate_dims(dims)?;
        let expected = param_count(dims);
        if params.len() != expected {
            return Err(ModelError::ShapeMismatch {
                dims: dims.to_vec(),
                expected,
                found: params.len(),
            });
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(ModelError::Config(format!("parameter {i} is not finite")));
        }
        Ok(MlpModel {
            dims: dims.to_vec(),
            params,
            hidden,
            output,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn hidden_activation(&self) -> HiddenActivation {
        self.hidden
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Offset of layer `l`'s weights in the flat parameter vector.
    fn layer_offset(&self, l: usize) -> usize {
        param_count(&self.dims[..=l])
    }

    /// Row-major `(out, in)` weights of layer `l`.
    pub fn weights(&self, l: usize) -> &[f64] {
        let off = self.layer_offset(l);
        &self.params[off..off + self.dims[l] * self.dims[l + 1]]
    }

    pub fn biases(&self, l: usize) -> &[f64] {
        let off = self.layer_offset(l) + self.dims[l] * self.dims[l + 1];
        &self.params[off..off + self.dims[l + 1]]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    fn activate(&self, z: f64) -> f64 {
        match self.hidden {
            HiddenActivation::Tanh => z.tanh(),
            HiddenActivation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            HiddenActivation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
        }
    }

    /// Pre-output-activation score. Panics if `x` has the wrong length.
    ///
    /// Uses the same operation order as the taped evaluation, so the two agree
    /// bit for bit.
    pub fn score(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.input_dim());
        let layers = self.dims.len() - 1;
        let mut current = x.to_vec();
        let mut next = Vec::new();
        for l in 0..layers {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = self.weights(l);
            let b = self.biases(l);
            next.clear();
            for j in 0..n_out {
                let row = &w[j * n_in..(j + 1) * n_in];
                let mut acc = 0.0;
                for (wi, xi) in row.iter().zip(&current) {
                    acc += wi * xi;
                }
                let z = acc + b[j];
                next.push(if l + 1 < layers { self.activate(z) } else { z });
            }
            std::mem::swap(&mut current, &mut next);
        }
        current[0]
    }

    pub fn forward(&self, x: &[f64]) -> Result<Prediction> {
        self.check_input(x)?;
        let score = self.score(x);
        let output = match self.output {
            OutputActivation::Identity => score,
            OutputActivation::Sigmoid => 1.0 / (1.0 + (-score).exp()),
        };
        Ok(Prediction { score, output })
    }

    /// Registers every parameter as an input slot, in flat order.
    pub fn record_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|&p| tape.input(p)).collect()
    }

    /// Records the score on `tape` from parameter and input nodes.
    pub fn record_score(&self, tape: &mut Tape, params: &[Var], x: &[Var]) -> Var {
        assert_eq!(params.len(), self.params.len());
        assert_eq!(x.len(), self.input_dim());
        let layers = self.dims.len() - 1;
        let mut current = x.to_vec();
        let mut off = 0;
        for l in 0..layers {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + (n_in + 1) * n_out];
            off += (n_in + 1) * n_out;
            let mut next = Vec::with_capacity(n_out);
            for j in 0..n_out {
                let acc = tape.dot(&w[j * n_in..(j + 1) * n_in], &current);
                let z = tape.add(acc, b[j]);
                next.push(if l + 1 < layers {
                    match self.hidden {
                        HiddenActivation::Tanh => tape.tanh(z),
                        HiddenActivation::Softplus => tape.softplus(z),
                        HiddenActivation::Relu => tape.max0(z),
                    }
                } else {
                    z
                });
            }
            current = next;
        }
        current[0]
    }

    /// `∂score/∂x` at `x`, by reverse mode.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut tape = Tape::with_capacity(self.params.len() + 4 * self.dims.iter().sum::<usize>());
        let xs: Vec<Var> = x.iter().map(|&v| tape.input(v)).collect();
        let params: Vec<Var> = self.params.iter().map(|&p| tape.constant(p)).collect();
        let out = self.record_score(&mut tape, &params, &xs);
        tape.check_finite()?;
        Ok(tape.backward(out)?)
    }

    /// Plain-text model file: a versioned header followed by one parameter
    /// per line.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(24 * self.params.len() + 128);
        s.push_str(MODEL_MAGIC);
        s.push('\n');
        s.push_str(&format!("version {MODEL_VERSION}\n"));
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        s.push_str(&format!("dims {}\n", dims.join(" ")));
        s.push_str(&format!("hidden {}\n", self.hidden));
        s.push_str(&format!("output {}\n", self.output));
        s.push_str(&format!("params {}\n", self.params.len()));
        for p in &self.params {
            // `{:?}` prints the shortest representation that round-trips.
            s.push_str(&format!("{p:?}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| ModelError::Malformed {
                line: 0,
                reason: format!("unexpected end of file, expected {what}"),
            })
        };
        let malformed = |line: usize, reason: String| ModelError::Malformed { line, reason };

        let (ln, magic) = next("magic")?;
        if magic != MODEL_MAGIC {
            return Err(malformed(ln, format!("bad magic {magic:?}")));
        }
        let header = |line: (usize, &str), key: &str| -> Result<String> {
            let (ln, text) = line;
            text.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| malformed(ln, format!("expected `{key} ...`")))
        };
        let version_line = next("version")?;
        let version = header(version_line, "version")?;
        if version != MODEL_VERSION.to_string() {
            return Err(malformed(
                version_line.0,
                format!("unsupported version {version}"),
            ));
        }
        let dims_line = next("dims")?;
        let dims = header(dims_line, "dims")?
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| malformed(dims_line.0, e.to_string()))?;
        if dims.len() < 2 {
            return Err(malformed(
                dims_line.0,
                format!("need at least two layer widths, got {dims:?}"),
            ));
        }
        let hidden_line = next("hidden")?;
        let hidden = header(hidden_line, "hidden")?
            .parse()
            .map_err(|e| malformed(hidden_line.0, e))?;
        let output_line = next("output")?;
        let output = header(output_line, "output")?
            .parse()
            .map_err(|e| malformed(output_line.0, e))?;
        let count_line = next("params")?;
        let count: usize = header(count_line, "params")?
            .parse()
            .map_err(|e: std::num::ParseIntError| malformed(count_line.0, e.to_string()))?;

        let expected = param_count(&dims);
        if count != expected {
            return Err(ModelError::ShapeMismatch {
                dims,
                expected,
                found: count,
            });
        }
        let mut params = Vec::with_capacity(count);
        for (ln, line) in lines.by_ref() {
            if line.is_empty() {
                continue;
            }
            let v: f64 = line
                .parse()
                .map_err(|e: std::num::ParseFloatError| malformed(ln, e.to_string()))?;
            params.push(v);
        }
        if params.len() < count {
            return Err(malformed(
                0,
                format!(
                    "truncated: expected {count} parameters, found {}",
                    params.len()
                ),
            ));
        }
        if params.len() > count {
            return Err(ModelError::ShapeMismatch {
                dims,
                expected,
                found: params.len(),
            });
        }
        MlpModel::from_params(&dims, hidden, output, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}
