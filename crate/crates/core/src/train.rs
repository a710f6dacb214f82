//! Desk-scale training loop: Adam with bias correction, exponential LR
//! decay, global-norm gradient clipping, random session clipping,
//! per-epoch checkpoints and JSONL metrics.
//!
//! Determinism contract: every random draw comes from an RNG derived
//! statelessly from (seed, epoch, step), so resuming from an epoch
//! checkpoint reproduces the uninterrupted run bit-for-bit.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphpit::{graph_pit_loss, GraphPitError, TsdrParams, Utterance};
use crate::meetsim::MeetingSession;
use crate::numerics::{NumericsError, Tensor};
use crate::skim::{checkpoint, SkimError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("model: {0}")]
    Model(String),
    #[error(transparent)]
    GraphPit(#[from] GraphPitError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("non-finite loss at epoch {epoch} step {step}; last-good checkpoint kept")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Checkpoint(#[from] SkimError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("metrics json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplicative LR factor applied once per epoch.
    pub decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub clip_seconds: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr0: 1e-3,
            decay: 0.97,
            clip_norm: 5.0,
            epochs: 100,
            clip_seconds: 30.0,
            batch_size: 1,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr0 > 0.0
            && self.decay > 0.0
            && self.decay <= 1.0
            && self.clip_norm > 0.0
            && self.epochs >= 1
            && self.clip_seconds > 0.0
            && self.batch_size >= 1
            && self.beta1 > 0.0
            && self.beta2 > 0.0
            && self.eps_adam > 0.0;
        if !ok {
            return Err(TrainError::BadConfig(
                "all rates must be positive, decay in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay.powi(epoch as i32)
    }
}

/// Scale all gradients by `clip_norm / norm` when the global L2 norm
/// exceeds the threshold; returns the pre-clip norm.
pub fn clip_grad_l2(grads: &mut [Vec<f64>], clip_norm: f64) -> f64 {
    let norm: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// First/second moment buffers, one pair per parameter tensor.
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[(String, Tensor)]) -> AdamState {
        AdamState {
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    params: &[(String, Tensor)],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::BadConfig(
            "params, grads and moments must align".into(),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (_, p)) in params.iter().enumerate() {
        let mut data = p.to_vec();
        for (j, &g) in grads[i].iter().enumerate() {
            state.m[i][j] = cfg.beta1 * state.m[i][j] + (1.0 - cfg.beta1) * g;
            state.v[i][j] = cfg.beta2 * state.v[i][j] + (1.0 - cfg.beta2) * g * g;
            let m_hat = state.m[i][j] / bc1;
            let v_hat = state.v[i][j] / bc2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + cfg.eps_adam);
        }
        p.set_data(&data)?;
    }
    Ok(())
}

/// Uniform random fixed-length window of a session; utterances are
/// truncated to the window and re-offset, fully-outside ones dropped.
pub fn random_clip(
    session: &MeetingSession,
    clip_seconds: f64,
    rng: &mut ChaCha8Rng,
) -> MeetingSession {
    let clip_len = (clip_seconds * session.sample_rate as f64).round() as usize;
    if clip_len >= session.mixture.len() {
        return session.clone();
    }
    let start = rng.gen_range(0..=session.mixture.len() - clip_len);
    let end = start + clip_len;
    let mut utterances = Vec::new();
    for u in &session.utterances {
        if u.end() <= start || u.start >= end {
            continue;
        }
        let lo = u.start.max(start);
        let hi = u.end().min(end);
        utterances.push(Utterance {
            source: u.source[lo - u.start..hi - u.start].to_vec(),
            start: lo - start,
            speaker_id: u.speaker_id.clone(),
        });
    }
    let overlap_ratio = crate::meetsim::measure_overlap_ratio(&utterances, clip_len);
    MeetingSession {
        mixture: session.mixture[start..end].to_vec(),
        utterances,
        noise: session.noise[start..end].to_vec(),
        sample_rate: session.sample_rate,
        overlap_ratio,
    }
}

/// Anything the loop can train: the forward pass plus access to its
/// parameters and a serializable architecture config.
pub trait Trainable {
    fn separate(&self, mixture: &Tensor) -> std::result::Result<Vec<Tensor>, String>;
    fn named_params(&self) -> Vec<(String, Tensor)>;
    fn config_json(&self) -> serde_json::Value;
}

impl Trainable for crate::skim::SkimModel {
    fn separate(&self, mixture: &Tensor) -> std::result::Result<Vec<Tensor>, String> {
        crate::skim::SkimModel::separate(self, mixture).map_err(|e| e.to_string())
    }
    fn named_params(&self) -> Vec<(String, Tensor)> {
        crate::skim::SkimModel::named_params(self)
    }
    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(self.cfg).expect("config serializes")
    }
}

impl Trainable for crate::dprnn::DprnnModel {
    fn separate(&self, mixture: &Tensor) -> std::result::Result<Vec<Tensor>, String> {
        crate::dprnn::DprnnModel::separate(self, mixture).map_err(|e| e.to_string())
    }
    fn named_params(&self) -> Vec<(String, Tensor)> {
        crate::dprnn::DprnnModel::named_params(self)
    }
    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(self.cfg).expect("config serializes")
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug)]
pub struct TrainState {
    /// Epochs fully completed; resuming starts at this epoch index.
    pub epochs_done: usize,
    pub global_step: u64,
    pub best_loss: f64,
    pub adam_t: u64,
}

#[derive(Serialize, Deserialize)]
struct ResumeHeader {
    model: serde_json::Value,
    train: TrainState,
}

/// Model weights + optimizer moments + progress header, in the shared
/// checkpoint container.
pub fn save_train_checkpoint<M: Trainable>(
    model: &M,
    adam: &AdamState,
    state: TrainState,
    path: &Path,
) -> Result<()> {
    let params = model.named_params();
    let mut tensors = params.clone();
    for (i, (name, p)) in params.iter().enumerate() {
        tensors.push((
            format!("adam.m.{name}"),
            Tensor::from_vec(p.shape(), adam.m[i].clone())?,
        ));
        tensors.push((
            format!("adam.v.{name}"),
            Tensor::from_vec(p.shape(), adam.v[i].clone())?,
        ));
    }
    let header = serde_json::to_value(ResumeHeader {
        model: model.config_json(),
        train: state,
    })?;
    checkpoint::save(path, header, &tensors)?;
    Ok(())
}

/// Restore weights and optimizer state into an existing model skeleton.
pub fn load_train_checkpoint<M: Trainable>(model: &M, path: &Path) -> Result<(AdamState, TrainState)> {
    let (header, tensors) = checkpoint::load(path)?;
    let header: ResumeHeader = serde_json::from_value(header)?;
    let params = model.named_params();
    let by_name: std::collections::HashMap<&str, &Tensor> =
        tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut adam = AdamState::new(&params);
    for (i, (name, p)) in params.iter().enumerate() {
        let get = |key: &str| -> Result<Vec<f64>> {
            by_name
                .get(key)
                .map(|t| t.to_vec())
                .ok_or_else(|| TrainError::Model(format!("checkpoint missing tensor {key}")))
        };
        p.set_data(&get(name)?)?;
        adam.m[i] = get(&format!("adam.m.{name}"))?;
        adam.v[i] = get(&format!("adam.v.{name}"))?;
    }
    adam.t = header.train.adam_t;
    Ok((adam, header.train))
}

fn derive_rng(seed: u64, epoch: usize, step: usize) -> ChaCha8Rng {
    // splitmix64-style mixing keeps streams independent across (epoch, step).
    let mut z = seed
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul((epoch as u64).wrapping_add(1)))
        .wrapping_add(0x517cc1b727220a95u64.wrapping_mul((step as u64).wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

#[derive(Serialize)]
struct MetricsRow {
    epoch: usize,
    step: usize,
    loss: f64,
    grad_norm: f64,
    lr: f64,
    wall_ms: f64,
}

pub struct TrainReport {
    pub steps: u64,
    pub best_loss: f64,
    pub final_loss: f64,
    /// Per-step losses in order, for smoke assertions.
    pub losses: Vec<f64>,
}

/// Run (or resume) training. Artifacts land in `out_dir`: `epoch_<e>.ckpt`
/// per epoch, `best.ckpt` on improvement, `metrics.jsonl` appended per
/// step. Pass `resume = true` to continue from `latest.ckpt` in `out_dir`.
pub fn train<M: Trainable>(
    model: &M,
    dataset: &[MeetingSession],
    cfg: &TrainConfig,
    tsdr: &TsdrParams,
    out_dir: &Path,
    resume: bool,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::BadConfig("empty dataset".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let latest = out_dir.join("latest.ckpt");
    let params = model.named_params();

    let (mut adam, mut state) = if resume && latest.exists() {
        load_train_checkpoint(model, &latest)?
    } else {
        (
            AdamState::new(&params),
            TrainState {
                epochs_done: 0,
                global_step: 0,
                best_loss: f64::INFINITY,
                adam_t: 0,
            },
        )
    };

    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("metrics.jsonl"))?;
    let mut losses = Vec::new();

    for epoch in state.epochs_done..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        // Deterministic per-epoch session order.
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut epoch_rng = derive_rng(cfg.seed, epoch, usize::MAX);
        for i in (1..order.len()).rev() {
            order.swap(i, epoch_rng.gen_range(0..=i));
        }

        for (step, &sess_idx) in order.iter().enumerate() {
            let t0 = std::time::Instant::now();
            let mut rng = derive_rng(cfg.seed, epoch, step);
            // A clip can land on silence; retry a few windows before
            // skipping the step.
            let mut clip = random_clip(&dataset[sess_idx], cfg.clip_seconds, &mut rng);
            let mut tries = 0;
            while clip.utterances.is_empty() && tries < 10 {
                clip = random_clip(&dataset[sess_idx], cfg.clip_seconds, &mut rng);
                tries += 1;
            }
            if clip.utterances.is_empty() {
                continue;
            }

            let mixture = Tensor::from_vec(&[clip.mixture.len()], clip.mixture.clone())?;
            let estimates = model.separate(&mixture).map_err(TrainError::Model)?;
            let (loss, _) = graph_pit_loss(&estimates, &clip.utterances, tsdr)?;
            let loss_value = loss.item()?;
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            for (_, p) in &params {
                p.zero_grad();
            }
            loss.backward()?;
            let mut grads: Vec<Vec<f64>> = params
                .iter()
                .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
                .collect();
            let grad_norm = clip_grad_l2(&mut grads, cfg.clip_norm);
            adam_step(&params, &grads, &mut adam, lr, cfg)?;

            state.global_step += 1;
            losses.push(loss_value);
            serde_json::to_writer(
                &mut metrics,
                &MetricsRow {
                    epoch,
                    step,
                    loss: loss_value,
                    grad_norm,
                    lr,
                    wall_ms: t0.elapsed().as_secs_f64() * 1e3,
                },
            )?;
            metrics.write_all(b"\n")?;

            if loss_value < state.best_loss {
                state.best_loss = loss_value;
                save_train_checkpoint(model, &adam, state, &out_dir.join("best.ckpt"))?;
            }
        }

        state.epochs_done = epoch + 1;
        state.adam_t = adam.t;
        save_train_checkpoint(
            model,
            &adam,
            state,
            &out_dir.join(format!("epoch_{epoch}.ckpt")),
        )?;
        save_train_checkpoint(model, &adam, state, &latest)?;
    }

    Ok(TrainReport {
        steps: state.global_step,
        best_loss: state.best_loss,
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        losses,
    })
}
