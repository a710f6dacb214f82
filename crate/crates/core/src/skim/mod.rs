//! The SkiM separator: segmentation, stacked blocks of Seg-LSTM (local
//! modeling) and Mem-LSTM (cross-segment state synchronization), causal and
//! non-causal variants, ablation modes, and frame-by-frame streaming.
//!
//! Block layout per forward pass: the feature sequence is split into
//! non-overlapping segments of `K` frames; each block runs its Seg-LSTM per
//! segment with initial (cell, hidden) states supplied by the previous
//! block's Mem-LSTM — the same segment's states in the non-causal variant,
//! the previous segment's states in the causal one, so segment `s` never
//! sees segments `> s`. After the last block the segments are merged and
//! the zero-padded tail dropped.

pub mod checkpoint;
pub mod stream;

#[cfg(test)]
mod tests;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{
    lstm_sequence, Conv1dDecoder, Conv1dEncoder, Direction, EncoderConfig, LayerError, LayerNorm,
    LayerNormMode, Linear, LstmInit, LstmParams, LstmState,
};
use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum SkimError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid skim config: {0}")]
    BadConfig(String),
    #[error("streaming requires causal model")]
    StreamingNeedsCausal,
    #[error("stream already finalized")]
    StreamFinalized,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SkimError>;

/// Mem-LSTM ablation modes (which per-segment states are processed and
/// passed to the next block).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemMode {
    /// Both hidden and cell states go through their own Mem-LSTMs.
    #[serde(rename = "hc")]
    HiddenCell,
    /// Only hidden states; cell init is zeroed.
    #[serde(rename = "h")]
    HiddenOnly,
    /// Only cell states; hidden init is zeroed.
    #[serde(rename = "c")]
    CellOnly,
    /// Both zeroed.
    #[serde(rename = "none")]
    None,
    /// Raw states passed through unchanged.
    #[serde(rename = "id")]
    Identity,
}

impl MemMode {
    pub const ALL: [MemMode; 5] = [
        MemMode::HiddenCell,
        MemMode::HiddenOnly,
        MemMode::CellOnly,
        MemMode::None,
        MemMode::Identity,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            MemMode::HiddenCell => "hc",
            MemMode::HiddenOnly => "h",
            MemMode::CellOnly => "c",
            MemMode::None => "none",
            MemMode::Identity => "id",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkimConfig {
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub segment_len: usize,
    pub causal: bool,
    pub mem_mode: MemMode,
    pub output_channels: usize,
    pub encoder: EncoderConfig,
}

impl SkimConfig {
    /// Paper-scale configuration: 4 blocks, hidden 256, segment length 150.
    /// The encoder feature dim is not stated in the paper; 256 reproduces
    /// the published MACs within a few percent.
    pub fn paper(stride: usize, causal: bool) -> SkimConfig {
        SkimConfig {
            num_blocks: 4,
            hidden_dim: 256,
            feature_dim: 256,
            segment_len: 150,
            causal,
            mem_mode: MemMode::HiddenCell,
            output_channels: 2,
            encoder: EncoderConfig::new(stride, 256),
        }
    }

    /// Tiny configuration for desk-scale training and tests.
    pub fn tiny(causal: bool) -> SkimConfig {
        SkimConfig {
            num_blocks: 2,
            hidden_dim: 32,
            feature_dim: 16,
            segment_len: 20,
            causal,
            mem_mode: MemMode::HiddenCell,
            output_channels: 2,
            encoder: EncoderConfig::new(8, 16),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 1 {
            return Err(SkimError::BadConfig("num_blocks must be >= 1".into()));
        }
        if self.segment_len < 1 {
            return Err(SkimError::BadConfig("segment_len must be >= 1".into()));
        }
        if self.output_channels < 2 {
            return Err(SkimError::BadConfig("output_channels must be >= 2".into()));
        }
        if self.encoder.feature_dim != self.feature_dim {
            return Err(SkimError::BadConfig(format!(
                "encoder feature_dim {} != separator feature_dim {}",
                self.encoder.feature_dim, self.feature_dim
            )));
        }
        self.encoder.validate()?;
        Ok(())
    }

    pub fn seg_direction(&self) -> Direction {
        if self.causal {
            Direction::Forward
        } else {
            Direction::Bidirectional
        }
    }

    pub fn norm_mode(&self) -> LayerNormMode {
        if self.causal {
            LayerNormMode::Feature
        } else {
            LayerNormMode::Global
        }
    }

    /// Seg-LSTM raw output width before the optional back-projection to N.
    pub fn seg_out_width(&self) -> usize {
        match self.seg_direction() {
            Direction::Forward => self.hidden_dim,
            Direction::Bidirectional => 2 * self.hidden_dim,
        }
    }
}

/// Feature sequence split into `S = ceil(T/K)` non-overlapping segments,
/// the last zero-padded to length `K`.
pub struct SegmentBatch {
    /// `S` tensors of shape `[K, N]`.
    pub segments: Vec<Tensor>,
    pub seg_len: usize,
    /// T before padding.
    pub orig_len: usize,
    pub pad_len: usize,
}

pub fn segment(w: &Tensor, k: usize) -> Result<SegmentBatch> {
    let (t, n) = match w.shape() {
        [t, n] => (*t, *n),
        s => {
            return Err(SkimError::BadConfig(format!(
                "segment expects [T, N], got {s:?}"
            )))
        }
    };
    if t == 0 {
        return Err(SkimError::BadConfig("segment: empty sequence".into()));
    }
    let s_count = t.div_ceil(k);
    let pad_len = s_count * k - t;
    let mut segments = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let start = s * k;
        let end = ((s + 1) * k).min(t);
        let mut seg = w.slice_rows(start, end)?;
        if end - start < k {
            let pad = Tensor::zeros(&[k - (end - start), n]);
            seg = Tensor::concat(&[seg, pad], 0)?;
        }
        segments.push(seg);
    }
    Ok(SegmentBatch {
        segments,
        seg_len: k,
        orig_len: t,
        pad_len,
    })
}

/// Inverse of [`segment`]: concatenation with the pad tail dropped.
pub fn merge(batch: &SegmentBatch, t: usize) -> Result<Tensor> {
    if t != batch.orig_len || batch.segments.len() * batch.seg_len < t {
        return Err(SkimError::BadConfig(format!(
            "merge: length {t} inconsistent with batch of {}x{} (orig {})",
            batch.segments.len(),
            batch.seg_len,
            batch.orig_len
        )));
    }
    let full = Tensor::concat(&batch.segments, 0)?;
    Ok(full.slice_rows(0, t)?)
}

/// One Mem-LSTM branch: LSTM over the segment axis, optional projection
/// back to H (bidirectional only), residual LayerNorm.
pub struct MemPath {
    pub lstm: LstmParams,
    pub proj: Option<Linear>,
    pub ln: LayerNorm,
}

impl MemPath {
    fn init(cfg: &SkimConfig, rng: &mut impl Rng) -> MemPath {
        let h = cfg.hidden_dim;
        let dir = cfg.seg_direction();
        MemPath {
            lstm: LstmParams::init(h, h, dir, rng),
            proj: match dir {
                Direction::Forward => None,
                Direction::Bidirectional => Some(Linear::init(2 * h, h, rng)),
            },
            ln: LayerNorm::identity(cfg.norm_mode(), h),
        }
    }

    /// `LN(Mem-LSTM(states)) + states` over a `[S, H]` state matrix.
    fn apply(&self, states: &Tensor) -> Result<Tensor> {
        let (raw, _) = lstm_sequence(states, &LstmInit::zeros(&self.lstm), &self.lstm)?;
        let projected = match &self.proj {
            Some(p) => p.apply(&raw)?,
            None => raw,
        };
        Ok(self.ln.apply(&projected)?.add(states)?)
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.lstm.named_params(&format!("{prefix}.lstm"));
        if let Some(p) = &self.proj {
            out.extend(p.named_params(&format!("{prefix}.proj")));
        }
        out.extend(self.ln.named_params(&format!("{prefix}.ln")));
        out
    }
}

/// Cross-segment state update for one block boundary.
///
/// `hc`: both state matrices go through their own Mem-LSTM with residual
/// LayerNorm; `h`/`c`: one side only, the other zeroed; `none`: both
/// zeroed; `id`: passed through untouched.
pub fn mem_lstm_update(
    c_states: &Tensor,
    h_states: &Tensor,
    mode: MemMode,
    mem_c: Option<&MemPath>,
    mem_h: Option<&MemPath>,
) -> Result<(Tensor, Tensor)> {
    let zeros = || Tensor::zeros(c_states.shape());
    Ok(match mode {
        MemMode::HiddenCell => (
            mem_c
                .ok_or_else(|| SkimError::BadConfig("mem_mode hc needs a cell Mem-LSTM".into()))?
                .apply(c_states)?,
            mem_h
                .ok_or_else(|| SkimError::BadConfig("mem_mode hc needs a hidden Mem-LSTM".into()))?
                .apply(h_states)?,
        ),
        MemMode::HiddenOnly => (
            zeros(),
            mem_h
                .ok_or_else(|| SkimError::BadConfig("mem_mode h needs a hidden Mem-LSTM".into()))?
                .apply(h_states)?,
        ),
        MemMode::CellOnly => (
            mem_c
                .ok_or_else(|| SkimError::BadConfig("mem_mode c needs a cell Mem-LSTM".into()))?
                .apply(c_states)?,
            zeros(),
        ),
        MemMode::None => (zeros(), zeros()),
        MemMode::Identity => (c_states.clone(), h_states.clone()),
    })
}

pub struct SkimBlock {
    pub seg: LstmParams,
    /// Present when the Seg-LSTM raw width (H or 2H) differs from N.
    pub proj: Option<Linear>,
    pub ln: LayerNorm,
    /// Mem-LSTM branches feeding the *next* block; absent on the last block
    /// and in modes that do not use them.
    pub mem_c: Option<MemPath>,
    pub mem_h: Option<MemPath>,
}

impl SkimBlock {
    fn init(cfg: &SkimConfig, is_last: bool, rng: &mut impl Rng) -> SkimBlock {
        let raw_width = cfg.seg_out_width();
        let needs_mem = !is_last;
        let (want_c, want_h) = match cfg.mem_mode {
            MemMode::HiddenCell => (true, true),
            MemMode::HiddenOnly => (false, true),
            MemMode::CellOnly => (true, false),
            MemMode::None | MemMode::Identity => (false, false),
        };
        SkimBlock {
            seg: LstmParams::init(cfg.feature_dim, cfg.hidden_dim, cfg.seg_direction(), rng),
            proj: if raw_width != cfg.feature_dim {
                Some(Linear::init(raw_width, cfg.feature_dim, rng))
            } else {
                None
            },
            ln: LayerNorm::identity(cfg.norm_mode(), cfg.feature_dim),
            mem_c: if needs_mem && want_c {
                Some(MemPath::init(cfg, rng))
            } else {
                None
            },
            mem_h: if needs_mem && want_h {
                Some(MemPath::init(cfg, rng))
            } else {
                None
            },
        }
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.seg.named_params(&format!("{prefix}.seg"));
        if let Some(p) = &self.proj {
            out.extend(p.named_params(&format!("{prefix}.proj")));
        }
        out.extend(self.ln.named_params(&format!("{prefix}.ln")));
        if let Some(m) = &self.mem_c {
            out.extend(m.named_params(&format!("{prefix}.mem_c")));
        }
        if let Some(m) = &self.mem_h {
            out.extend(m.named_params(&format!("{prefix}.mem_h")));
        }
        out
    }
}

pub struct SkimModel {
    pub cfg: SkimConfig,
    pub encoder: Conv1dEncoder,
    pub blocks: Vec<SkimBlock>,
    /// One `N -> Q*N` head; column blocks are the per-channel embeddings.
    pub head: Linear,
    pub decoder: Conv1dDecoder,
}

impl SkimModel {
    pub fn init(cfg: SkimConfig, rng: &mut impl Rng) -> Result<SkimModel> {
        cfg.validate()?;
        let encoder = Conv1dEncoder::init(cfg.encoder, rng)?;
        let blocks = (0..cfg.num_blocks)
            .map(|l| SkimBlock::init(&cfg, l + 1 == cfg.num_blocks, rng))
            .collect();
        let head = Linear::init(cfg.feature_dim, cfg.output_channels * cfg.feature_dim, rng);
        let decoder = Conv1dDecoder::init(cfg.encoder, rng)?;
        Ok(SkimModel {
            cfg,
            encoder,
            blocks,
            head,
            decoder,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.encoder.named_params("encoder");
        for (l, b) in self.blocks.iter().enumerate() {
            out.extend(b.named_params(&format!("block{l}")));
        }
        out.extend(self.head.named_params("head"));
        out.extend(self.decoder.named_params("decoder"));
        out
    }

    /// Separator pass over an encoded `[T, N]` feature sequence.
    pub fn forward(&self, w: &Tensor) -> Result<Tensor> {
        let t = w.shape()[0];
        let k = self.cfg.segment_len;
        let h = self.cfg.hidden_dim;
        let mut batch = segment(w, k)?;
        let s_count = batch.segments.len();

        // Initial (c, h) per segment for the incoming block; block 1 is
        // all-zero by definition.
        let mut init_c: Vec<Tensor> = vec![Tensor::zeros(&[h]); s_count];
        let mut init_h: Vec<Tensor> = vec![Tensor::zeros(&[h]); s_count];

        for (l, block) in self.blocks.iter().enumerate() {
            let mut outputs = Vec::with_capacity(s_count);
            let mut final_c = Vec::with_capacity(s_count);
            let mut final_h = Vec::with_capacity(s_count);
            for (s, seg_in) in batch.segments.iter().enumerate() {
                // Causal: previous segment's processed states (zero for the
                // first segment); non-causal: same segment's.
                let (c0, h0) = if self.cfg.causal {
                    if s == 0 {
                        (Tensor::zeros(&[h]), Tensor::zeros(&[h]))
                    } else {
                        (init_c[s - 1].clone(), init_h[s - 1].clone())
                    }
                } else {
                    (init_c[s].clone(), init_h[s].clone())
                };
                let init = LstmInit {
                    fwd: LstmState { c: c0, h: h0 },
                    bwd: match block.seg.direction {
                        Direction::Forward => None,
                        Direction::Bidirectional => Some(LstmState::zeros(h)),
                    },
                };
                let (raw, fin) = lstm_sequence(seg_in, &init, &block.seg)?;
                let projected = match &block.proj {
                    Some(p) => p.apply(&raw)?,
                    None => raw,
                };
                outputs.push(block.ln.apply(&projected)?.add(seg_in)?);
                // Forward-direction final states are the segment summary.
                final_c.push(fin.fwd.c);
                final_h.push(fin.fwd.h);
            }
            batch.segments = outputs;

            if l + 1 < self.blocks.len() {
                let c_mat = Tensor::stack_rows(&final_c)?;
                let h_mat = Tensor::stack_rows(&final_h)?;
                let (c_hat, h_hat) = mem_lstm_update(
                    &c_mat,
                    &h_mat,
                    self.cfg.mem_mode,
                    block.mem_c.as_ref(),
                    block.mem_h.as_ref(),
                )?;
                for s in 0..s_count {
                    init_c[s] = c_hat.row(s)?;
                    init_h[s] = h_hat.row(s)?;
                }
            }
        }
        merge(&batch, t)
    }

    /// Full encoder -> separator -> per-channel heads -> decoder pipeline.
    pub fn separate(&self, mixture: &Tensor) -> Result<Vec<Tensor>> {
        let len = mixture.shape()[0];
        let feats = self.encoder.encode(mixture)?;
        let processed = self.forward(&feats)?;
        let emb = self.head.apply(&processed)?;
        let n = self.cfg.feature_dim;
        let mut out = Vec::with_capacity(self.cfg.output_channels);
        for q in 0..self.cfg.output_channels {
            let ch = emb.slice_cols(q * n, (q + 1) * n)?;
            out.push(self.decoder.decode(&ch, len)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let config = serde_json::to_value(self.cfg).expect("config serializes");
        checkpoint::save(path, config, &self.named_params())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<SkimModel> {
        let (config, tensors) = checkpoint::load(path)?;
        let cfg: SkimConfig = serde_json::from_value(config)
            .map_err(|e| SkimError::Checkpoint(format!("bad config: {e}")))?;
        // Deterministic skeleton; every parameter is overwritten below.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let model = SkimModel::init(cfg, &mut rng)?;
        checkpoint::restore(&model.named_params(), &tensors)?;
        Ok(model)
    }
}
