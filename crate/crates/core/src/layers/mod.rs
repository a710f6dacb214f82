//! Neural building blocks of the TasNet-style backbone: 1-D conv encoder,
//! transposed-conv decoder, LSTM, layer normalization and linear layers.
//!
//! Everything is expressed in [`crate::numerics`] primitives so gradients
//! and the instrumented multiply counter come for free.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum LayerError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid layer config: {0}")]
    BadConfig(String),
    #[error("empty sequence")]
    EmptySequence,
}

pub type Result<T> = std::result::Result<T, LayerError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Relu,
    None,
}

/// Encoder geometry. The paper convention ties kernel size to twice the
/// stride, so the stride alone determines the ideal latency.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kernel_size: usize,
    pub stride: usize,
    pub feature_dim: usize,
    pub nonlinearity: Nonlinearity,
}

impl EncoderConfig {
    pub fn new(stride: usize, feature_dim: usize) -> EncoderConfig {
        EncoderConfig {
            kernel_size: 2 * stride,
            stride,
            feature_dim,
            nonlinearity: Nonlinearity::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride < 1 || self.feature_dim < 1 {
            return Err(LayerError::BadConfig(
                "stride and feature_dim must be >= 1".into(),
            ));
        }
        if self.kernel_size != 2 * self.stride {
            return Err(LayerError::BadConfig(format!(
                "kernel_size {} must be twice the stride {}",
                self.kernel_size, self.stride
            )));
        }
        Ok(())
    }

    /// Frames produced from a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.kernel_size {
            0
        } else {
            (len - self.kernel_size) / self.stride + 1
        }
    }
}

fn uniform_param(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::param(shape, data).expect("shape/data agree")
}

/// Single-layer 1-D convolution mapping a waveform to `[T, N]` features.
pub struct Conv1dEncoder {
    pub cfg: EncoderConfig,
    /// `[kernel_size, N]`
    pub weight: Tensor,
    /// `[N]`
    pub bias: Tensor,
}

impl Conv1dEncoder {
    pub fn init(cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Conv1dEncoder> {
        cfg.validate()?;
        let scale = (6.0 / (cfg.kernel_size + cfg.feature_dim) as f64).sqrt();
        Ok(Conv1dEncoder {
            cfg,
            weight: uniform_param(rng, &[cfg.kernel_size, cfg.feature_dim], scale),
            bias: Tensor::param(&[cfg.feature_dim], vec![0.0; cfg.feature_dim]).unwrap(),
        })
    }

    pub fn encode(&self, signal: &Tensor) -> Result<Tensor> {
        let frames = signal.frames(self.cfg.kernel_size, self.cfg.stride)?;
        let feats = frames.matmul(&self.weight)?.add(&self.bias)?;
        Ok(match self.cfg.nonlinearity {
            Nonlinearity::Relu => feats.relu()?,
            Nonlinearity::None => feats,
        })
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

/// 1-D transposed convolution: per-frame kernel contributions overlap-added
/// back into a waveform, trimmed/padded to the caller's length.
pub struct Conv1dDecoder {
    pub kernel_size: usize,
    pub stride: usize,
    /// `[N, kernel_size]`
    pub weight: Tensor,
}

impl Conv1dDecoder {
    pub fn init(cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Conv1dDecoder> {
        cfg.validate()?;
        let scale = (6.0 / (cfg.kernel_size + cfg.feature_dim) as f64).sqrt();
        Ok(Conv1dDecoder {
            kernel_size: cfg.kernel_size,
            stride: cfg.stride,
            weight: uniform_param(rng, &[cfg.feature_dim, cfg.kernel_size], scale),
        })
    }

    pub fn decode(&self, features: &Tensor, out_len: usize) -> Result<Tensor> {
        if features.shape().first().copied().unwrap_or(0) == 0 {
            return Err(LayerError::EmptySequence);
        }
        let contributions = features.matmul(&self.weight)?;
        Ok(contributions.overlap_add(self.stride, out_len)?)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![(format!("{prefix}.weight"), self.weight.clone())]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Bidirectional,
}

/// One direction's gate weights, gate order (input, forget, cell, output).
/// A single combined bias per gate block.
pub struct GateWeights {
    /// `[4H, I]`
    pub w_ih: Tensor,
    /// `[4H, H]`
    pub w_hh: Tensor,
    /// `[4H]`
    pub bias: Tensor,
}

impl GateWeights {
    fn init(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> GateWeights {
        let scale = 1.0 / (hidden_dim as f64).sqrt();
        GateWeights {
            w_ih: uniform_param(rng, &[4 * hidden_dim, input_dim], scale),
            w_hh: uniform_param(rng, &[4 * hidden_dim, hidden_dim], scale),
            bias: Tensor::param(&[4 * hidden_dim], vec![0.0; 4 * hidden_dim]).unwrap(),
        }
    }

    fn zero(input_dim: usize, hidden_dim: usize) -> GateWeights {
        GateWeights {
            w_ih: Tensor::param(&[4 * hidden_dim, input_dim], vec![0.0; 4 * hidden_dim * input_dim])
                .unwrap(),
            w_hh: Tensor::param(&[4 * hidden_dim, hidden_dim], vec![0.0; 4 * hidden_dim * hidden_dim])
                .unwrap(),
            bias: Tensor::param(&[4 * hidden_dim], vec![0.0; 4 * hidden_dim]).unwrap(),
        }
    }
}

pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub direction: Direction,
    pub fwd: GateWeights,
    pub bwd: Option<GateWeights>,
}

/// (cell, hidden) pair carried across LSTM steps; each `[H]`.
#[derive(Clone)]
pub struct LstmState {
    pub c: Tensor,
    pub h: Tensor,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> LstmState {
        LstmState {
            c: Tensor::zeros(&[hidden_dim]),
            h: Tensor::zeros(&[hidden_dim]),
        }
    }
}

impl LstmParams {
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        direction: Direction,
        rng: &mut impl Rng,
    ) -> LstmParams {
        LstmParams {
            input_dim,
            hidden_dim,
            direction,
            fwd: GateWeights::init(input_dim, hidden_dim, rng),
            bwd: match direction {
                Direction::Forward => None,
                Direction::Bidirectional => Some(GateWeights::init(input_dim, hidden_dim, rng)),
            },
        }
    }

    pub fn zeroed(input_dim: usize, hidden_dim: usize, direction: Direction) -> LstmParams {
        LstmParams {
            input_dim,
            hidden_dim,
            direction,
            fwd: GateWeights::zero(input_dim, hidden_dim),
            bwd: match direction {
                Direction::Forward => None,
                Direction::Bidirectional => Some(GateWeights::zero(input_dim, hidden_dim)),
            },
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.direction {
            Direction::Forward => self.hidden_dim,
            Direction::Bidirectional => 2 * self.hidden_dim,
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![
            (format!("{prefix}.fwd.w_ih"), self.fwd.w_ih.clone()),
            (format!("{prefix}.fwd.w_hh"), self.fwd.w_hh.clone()),
            (format!("{prefix}.fwd.bias"), self.fwd.bias.clone()),
        ];
        if let Some(bwd) = &self.bwd {
            out.push((format!("{prefix}.bwd.w_ih"), bwd.w_ih.clone()));
            out.push((format!("{prefix}.bwd.w_hh"), bwd.w_hh.clone()));
            out.push((format!("{prefix}.bwd.bias"), bwd.bias.clone()));
        }
        out
    }
}

/// One LSTM cell update. Gate order (i, f, g, o); `c' = f.c + i.g`,
/// `h' = o.tanh(c')`, output `y = h'`.
pub fn lstm_step(x: &Tensor, state: &LstmState, w: &GateWeights) -> Result<(Tensor, LstmState)> {
    let gates = w
        .w_ih
        .matmul(x)?
        .add(&w.w_hh.matmul(&state.h)?)?
        .add(&w.bias)?;
    let hidden = w.w_hh.shape()[1];
    let i = gates.slice(0, hidden)?.sigmoid()?;
    let f = gates.slice(hidden, 2 * hidden)?.sigmoid()?;
    let g = gates.slice(2 * hidden, 3 * hidden)?.tanh_t()?;
    let o = gates.slice(3 * hidden, 4 * hidden)?.sigmoid()?;
    let c_new = f.mul(&state.c)?.add(&i.mul(&g)?)?;
    let h_new = o.mul(&c_new.tanh_t()?)?;
    Ok((
        h_new.clone(),
        LstmState {
            c: c_new,
            h: h_new,
        },
    ))
}

/// Per-direction initial states for a sequence run.
pub struct LstmInit {
    pub fwd: LstmState,
    pub bwd: Option<LstmState>,
}

impl LstmInit {
    pub fn zeros(p: &LstmParams) -> LstmInit {
        LstmInit {
            fwd: LstmState::zeros(p.hidden_dim),
            bwd: match p.direction {
                Direction::Forward => None,
                Direction::Bidirectional => Some(LstmState::zeros(p.hidden_dim)),
            },
        }
    }
}

pub struct LstmFinal {
    pub fwd: LstmState,
    pub bwd: Option<LstmState>,
}

fn run_direction(
    input: &Tensor,
    init: &LstmState,
    w: &GateWeights,
    reverse: bool,
) -> Result<(Vec<Tensor>, LstmState)> {
    let t_steps = input.shape()[0];
    // Batch the input-side projection: X . W_ih^T once per sequence.
    let x_proj = input.matmul(&w.w_ih.transpose2d()?)?;
    let hidden = w.w_hh.shape()[1];
    let mut state = init.clone();
    let mut rows = Vec::with_capacity(t_steps);
    for step in 0..t_steps {
        let t = if reverse { t_steps - 1 - step } else { step };
        let gates = x_proj
            .row(t)?
            .add(&w.w_hh.matmul(&state.h)?)?
            .add(&w.bias)?;
        let i = gates.slice(0, hidden)?.sigmoid()?;
        let f = gates.slice(hidden, 2 * hidden)?.sigmoid()?;
        let g = gates.slice(2 * hidden, 3 * hidden)?.tanh_t()?;
        let o = gates.slice(3 * hidden, 4 * hidden)?.sigmoid()?;
        let c_new = f.mul(&state.c)?.add(&i.mul(&g)?)?;
        let h_new = o.mul(&c_new.tanh_t()?)?;
        rows.push(h_new.clone());
        state = LstmState { c: c_new, h: h_new };
    }
    if reverse {
        rows.reverse();
    }
    Ok((rows, state))
}

/// Fold the cell over a `[T, I]` sequence. Output is `[T, H]`
/// (forward) or `[T, 2H]` (bidirectional, features concatenated).
pub fn lstm_sequence(input: &Tensor, init: &LstmInit, p: &LstmParams) -> Result<(Tensor, LstmFinal)> {
    if input.shape().len() != 2 || input.shape()[0] == 0 {
        return Err(LayerError::EmptySequence);
    }
    let (fwd_rows, fwd_final) = run_direction(input, &init.fwd, &p.fwd, false)?;
    match (&p.bwd, &init.bwd) {
        (Some(bw), Some(binit)) => {
            let (bwd_rows, bwd_final) = run_direction(input, binit, bw, true)?;
            let rows: Vec<Tensor> = fwd_rows
                .iter()
                .zip(&bwd_rows)
                .map(|(a, b)| Tensor::concat(&[a.clone(), b.clone()], 0))
                .collect::<crate::numerics::Result<_>>()?;
            Ok((
                Tensor::stack_rows(&rows)?,
                LstmFinal {
                    fwd: fwd_final,
                    bwd: Some(bwd_final),
                },
            ))
        }
        (None, None) => Ok((
            Tensor::stack_rows(&fwd_rows)?,
            LstmFinal {
                fwd: fwd_final,
                bwd: None,
            },
        )),
        _ => Err(LayerError::BadConfig(
            "bidirectional params require per-direction initial states".into(),
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerNormMode {
    /// Normalize over time and feature jointly (non-causal only).
    Global,
    /// Normalize each frame independently (causal-safe).
    Feature,
}

pub const LAYER_NORM_EPS: f64 = 1e-8;

pub struct LayerNorm {
    pub mode: LayerNormMode,
    /// `[N]`
    pub gain: Tensor,
    /// `[N]`
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn identity(mode: LayerNormMode, dim: usize) -> LayerNorm {
        LayerNorm {
            mode,
            gain: Tensor::param(&[dim], vec![1.0; dim]).unwrap(),
            bias: Tensor::param(&[dim], vec![0.0; dim]).unwrap(),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let scope = match self.mode {
            LayerNormMode::Global => crate::numerics::NormScope::Global,
            LayerNormMode::Feature => crate::numerics::NormScope::Rows,
        };
        Ok(x.normalize(scope, LAYER_NORM_EPS)?
            .mul(&self.gain)?
            .add(&self.bias)?)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.gain"), self.gain.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

/// Per-frame affine map `[T, I] -> [T, O]`.
pub struct Linear {
    /// `[I, O]`
    pub weight: Tensor,
    /// `[O]`
    pub bias: Tensor,
}

impl Linear {
    pub fn init(input_dim: usize, output_dim: usize, rng: &mut impl Rng) -> Linear {
        let scale = (6.0 / (input_dim + output_dim) as f64).sqrt();
        Linear {
            weight: uniform_param(rng, &[input_dim, output_dim], scale),
            bias: Tensor::param(&[output_dim], vec![0.0; output_dim]).unwrap(),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.add(&self.bias)?)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

/// Scalars held by a parameter list (sanity check against the closed-form
/// counters in `profile`).
pub fn total_params(named: &[(String, Tensor)]) -> usize {
    named.iter().map(|(_, t)| t.numel()).sum()
}
