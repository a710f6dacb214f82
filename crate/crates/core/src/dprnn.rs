//! DPRNN baseline: alternating intra-chunk and inter-chunk RNNs over
//! 50%-overlapped chunks, used as the compute-cost and quality reference
//! point for SkiM.
//!
//! Unlike SkiM, every block touches every frame twice per pass (each frame
//! lives in `chunk_len / hop` chunks), which is where the cost gap comes
//! from.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{
    lstm_sequence, Conv1dDecoder, Conv1dEncoder, Direction, EncoderConfig, LayerError, LayerNorm,
    LayerNormMode, Linear, LstmInit, LstmParams,
};
use crate::numerics::{NumericsError, Tensor};
use crate::skim::{checkpoint, SkimError};

#[derive(Debug, Error)]
pub enum DprnnError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid dprnn config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Checkpoint(#[from] SkimError),
}

pub type Result<T> = std::result::Result<T, DprnnError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DprnnConfig {
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub chunk_len: usize,
    /// Fraction of each chunk shared with its neighbor; 0.5 is the
    /// standard dual-path setting.
    pub chunk_overlap: f64,
    pub causal: bool,
    /// The intra-chunk RNN sees a fully buffered chunk, so it stays
    /// bidirectional even in causal mode by default.
    pub intra_bidirectional: bool,
    pub output_channels: usize,
    pub encoder: EncoderConfig,
}

impl DprnnConfig {
    /// Matched-width counterpart of the paper-scale SkiM config.
    pub fn paper(stride: usize, causal: bool) -> DprnnConfig {
        DprnnConfig {
            num_blocks: 4,
            hidden_dim: 256,
            feature_dim: 256,
            chunk_len: 150,
            chunk_overlap: 0.5,
            causal,
            intra_bidirectional: true,
            output_channels: 2,
            encoder: EncoderConfig::new(stride, 256),
        }
    }

    pub fn tiny(causal: bool) -> DprnnConfig {
        DprnnConfig {
            num_blocks: 2,
            hidden_dim: 32,
            feature_dim: 16,
            chunk_len: 20,
            chunk_overlap: 0.5,
            causal,
            intra_bidirectional: true,
            output_channels: 2,
            encoder: EncoderConfig::new(8, 16),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 1 || self.chunk_len < 1 || self.output_channels < 2 {
            return Err(DprnnError::BadConfig(
                "num_blocks, chunk_len >= 1 and output_channels >= 2 required".into(),
            ));
        }
        if !(0.0..=0.9).contains(&self.chunk_overlap) {
            return Err(DprnnError::BadConfig(format!(
                "chunk_overlap {} outside [0, 0.9]",
                self.chunk_overlap
            )));
        }
        if self.hop() < 1 {
            return Err(DprnnError::BadConfig("hop must be >= 1".into()));
        }
        if self.encoder.feature_dim != self.feature_dim {
            return Err(DprnnError::BadConfig(format!(
                "encoder feature_dim {} != separator feature_dim {}",
                self.encoder.feature_dim, self.feature_dim
            )));
        }
        self.encoder.validate()?;
        Ok(())
    }

    pub fn hop(&self) -> usize {
        self.chunk_len - (self.chunk_len as f64 * self.chunk_overlap).floor() as usize
    }

    pub fn intra_direction(&self) -> Direction {
        if self.intra_bidirectional {
            Direction::Bidirectional
        } else {
            Direction::Forward
        }
    }

    pub fn inter_direction(&self) -> Direction {
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

    /// Chunk count for a feature sequence of `t` frames: a new chunk starts
    /// every hop while any frame remains, tail zero-padded.
    pub fn num_chunks(&self, t: usize) -> usize {
        t.div_ceil(self.hop())
    }
}

/// Split `[T, N]` into overlapped `[chunk_len, N]` chunks starting every
/// `hop` frames, zero-padded past the end.
pub fn fold(w: &Tensor, chunk_len: usize, hop: usize) -> Result<Vec<Tensor>> {
    let (t, n) = match w.shape() {
        [t, n] => (*t, *n),
        s => {
            return Err(DprnnError::BadConfig(format!(
                "fold expects [T, N], got {s:?}"
            )))
        }
    };
    if t == 0 {
        return Err(DprnnError::BadConfig("fold: empty sequence".into()));
    }
    let count = t.div_ceil(hop);
    let mut chunks = Vec::with_capacity(count);
    for c in 0..count {
        let start = c * hop;
        let end = (start + chunk_len).min(t);
        let mut chunk = w.slice_rows(start, end)?;
        if end - start < chunk_len {
            chunk = Tensor::concat(&[chunk, Tensor::zeros(&[chunk_len - (end - start), n])], 0)?;
        }
        chunks.push(chunk);
    }
    Ok(chunks)
}

/// Overlap-add inverse of [`fold`] with uniform averaging, so
/// `unfold(fold(w)) == w`.
pub fn unfold(chunks: &[Tensor], hop: usize, t: usize) -> Result<Tensor> {
    if chunks.is_empty() {
        return Err(DprnnError::BadConfig("unfold: no chunks".into()));
    }
    let chunk_len = chunks[0].shape()[0];
    let mut rows = Vec::with_capacity(t);
    for frame in 0..t {
        // Chunks covering this frame: c*hop <= frame < c*hop + chunk_len.
        let c_min = (frame + 1).saturating_sub(chunk_len).div_ceil(hop);
        let c_max = (frame / hop).min(chunks.len() - 1);
        let mut acc: Option<Tensor> = None;
        let mut count = 0usize;
        for c in c_min..=c_max {
            let row = chunks[c].row(frame - c * hop)?;
            acc = Some(match acc {
                Some(a) => a.add(&row)?,
                None => row,
            });
            count += 1;
        }
        let acc = acc.ok_or_else(|| DprnnError::BadConfig("unfold: uncovered frame".into()))?;
        rows.push(acc.scale(1.0 / count as f64)?);
    }
    Ok(Tensor::stack_rows(&rows)?)
}

/// One dual-path pass: RNN + optional projection + residual LayerNorm.
pub struct DprnnPath {
    pub rnn: LstmParams,
    pub proj: Option<Linear>,
    pub ln: LayerNorm,
}

impl DprnnPath {
    fn init(cfg: &DprnnConfig, direction: Direction, rng: &mut impl Rng) -> DprnnPath {
        let width = match direction {
            Direction::Forward => cfg.hidden_dim,
            Direction::Bidirectional => 2 * cfg.hidden_dim,
        };
        DprnnPath {
            rnn: LstmParams::init(cfg.feature_dim, cfg.hidden_dim, direction, rng),
            proj: if width != cfg.feature_dim {
                Some(Linear::init(width, cfg.feature_dim, rng))
            } else {
                None
            },
            ln: LayerNorm::identity(cfg.norm_mode(), cfg.feature_dim),
        }
    }

    fn apply(&self, seq: &Tensor) -> Result<Tensor> {
        let (raw, _) = lstm_sequence(seq, &LstmInit::zeros(&self.rnn), &self.rnn)?;
        let projected = match &self.proj {
            Some(p) => p.apply(&raw)?,
            None => raw,
        };
        Ok(self.ln.apply(&projected)?.add(seq)?)
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = self.rnn.named_params(&format!("{prefix}.rnn"));
        if let Some(p) = &self.proj {
            out.extend(p.named_params(&format!("{prefix}.proj")));
        }
        out.extend(self.ln.named_params(&format!("{prefix}.ln")));
        out
    }
}

pub struct DprnnBlock {
    pub intra: DprnnPath,
    pub inter: DprnnPath,
}

pub struct DprnnModel {
    pub cfg: DprnnConfig,
    pub encoder: Conv1dEncoder,
    pub blocks: Vec<DprnnBlock>,
    pub head: Linear,
    pub decoder: Conv1dDecoder,
}

impl DprnnModel {
    pub fn init(cfg: DprnnConfig, rng: &mut impl Rng) -> Result<DprnnModel> {
        cfg.validate()?;
        let encoder = Conv1dEncoder::init(cfg.encoder, rng)?;
        let blocks = (0..cfg.num_blocks)
            .map(|_| DprnnBlock {
                intra: DprnnPath::init(&cfg, cfg.intra_direction(), rng),
                inter: DprnnPath::init(&cfg, cfg.inter_direction(), rng),
            })
            .collect();
        let head = Linear::init(cfg.feature_dim, cfg.output_channels * cfg.feature_dim, rng);
        let decoder = Conv1dDecoder::init(cfg.encoder, rng)?;
        Ok(DprnnModel {
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
            out.extend(b.intra.named_params(&format!("block{l}.intra")));
            out.extend(b.inter.named_params(&format!("block{l}.inter")));
        }
        out.extend(self.head.named_params("head"));
        out.extend(self.decoder.named_params("decoder"));
        out
    }

    /// Separator pass over an encoded `[T, N]` feature sequence.
    pub fn forward(&self, w: &Tensor) -> Result<Tensor> {
        let t = w.shape()[0];
        let hop = self.cfg.hop();
        let mut chunks = fold(w, self.cfg.chunk_len, hop)?;
        let c_count = chunks.len();
        for block in &self.blocks {
            // Intra: each chunk independently.
            let mut intra_out = Vec::with_capacity(c_count);
            for chunk in &chunks {
                intra_out.push(block.intra.apply(chunk)?);
            }
            // Inter: across chunks at each within-chunk position.
            let mut per_position = Vec::with_capacity(self.cfg.chunk_len);
            for p in 0..self.cfg.chunk_len {
                let rows: Vec<Tensor> = intra_out
                    .iter()
                    .map(|c| c.row(p))
                    .collect::<crate::numerics::Result<_>>()?;
                let seq = Tensor::stack_rows(&rows)?;
                per_position.push(block.inter.apply(&seq)?);
            }
            chunks = (0..c_count)
                .map(|c| {
                    let rows: Vec<Tensor> = per_position
                        .iter()
                        .map(|pp| pp.row(c))
                        .collect::<crate::numerics::Result<_>>()?;
                    Tensor::stack_rows(&rows)
                })
                .collect::<crate::numerics::Result<_>>()?;
        }
        unfold(&chunks, hop, t)
    }

    /// Full pipeline, mirroring the SkiM head/decoder layout.
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

    pub fn load(path: &std::path::Path) -> Result<DprnnModel> {
        let (config, tensors) = checkpoint::load(path)?;
        let cfg: DprnnConfig = serde_json::from_value(config)
            .map_err(|e| DprnnError::BadConfig(format!("bad checkpoint config: {e}")))?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let model = DprnnModel::init(cfg, &mut rng)?;
        checkpoint::restore(&model.named_params(), &tensors)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::assert_close;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, t: usize, n: usize) -> Tensor {
        let data: Vec<f64> = (0..t * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[t, n], data).unwrap()
    }

    #[test]
    fn fold_chunk_count_hand_example() {
        let mut r = rng(1);
        let w = random_matrix(&mut r, 10, 3);
        let chunks = fold(&w, 4, 2).unwrap();
        assert_eq!(chunks.len(), 5);
        for c in &chunks {
            assert_eq!(c.shape(), &[4, 3]);
        }
        // Last chunk covers frames 8..12 with two padded rows.
        let last = chunks[4].to_vec();
        assert!(last[2 * 3..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unfold_inverts_fold() {
        let mut r = rng(2);
        for (t, chunk, hop) in [(10, 4, 2), (7, 4, 2), (20, 6, 3), (5, 8, 4)] {
            let w = random_matrix(&mut r, t, 3);
            let chunks = fold(&w, chunk, hop).unwrap();
            let back = unfold(&chunks, hop, t).unwrap();
            assert_close(
                &back.to_vec(),
                &w.to_vec(),
                1e-12,
                &format!("unfold∘fold T={t} chunk={chunk} hop={hop}"),
            );
        }
    }

    #[test]
    fn separate_shapes() {
        let mut r = rng(3);
        let model = DprnnModel::init(DprnnConfig::tiny(true), &mut r).unwrap();
        let len = 173;
        let sig: Vec<f64> = (0..len).map(|_| r.gen_range(-0.5..0.5)).collect();
        let outs = model.separate(&Tensor::from_vec(&[len], sig).unwrap()).unwrap();
        assert_eq!(outs.len(), 2);
        for o in &outs {
            assert_eq!(o.shape(), &[len]);
        }
    }

    #[test]
    fn causal_blocks_respect_chunk_order() {
        // Perturbing frames that only live in chunks > c0 leaves output
        // frames drawn entirely from chunks <= c0 unchanged.
        let mut r = rng(4);
        let cfg = DprnnConfig {
            chunk_len: 4,
            ..DprnnConfig::tiny(true)
        };
        let model = DprnnModel::init(cfg, &mut r).unwrap();
        let n = 16;
        let t = 18;
        let w = random_matrix(&mut r, t, n);
        let hop = model.cfg.hop();
        let c0 = 2usize;
        let first_touched = c0 * hop + model.cfg.chunk_len;
        let mut noisy = w.to_vec();
        for v in noisy[first_touched * n..].iter_mut() {
            *v += r.gen_range(-2.0..2.0);
        }
        let a = model.forward(&w).unwrap().to_vec();
        let b = model
            .forward(&Tensor::from_vec(&[t, n], noisy).unwrap())
            .unwrap()
            .to_vec();
        let safe = (c0 + 1) * hop;
        assert_eq!(&a[..safe * n], &b[..safe * n]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng(5);
        let cfg = DprnnConfig {
            num_blocks: 1,
            hidden_dim: 4,
            feature_dim: 4,
            chunk_len: 4,
            chunk_overlap: 0.5,
            causal: true,
            intra_bidirectional: true,
            output_channels: 2,
            encoder: EncoderConfig::new(2, 4),
        };
        let model = DprnnModel::init(cfg, &mut r).unwrap();
        let sig: Vec<f64> = (0..26).map(|_| r.gen_range(-0.5..0.5)).collect();
        let loss_of = |m: &DprnnModel| {
            let mix = Tensor::from_vec(&[26], sig.clone()).unwrap();
            let outs = m.separate(&mix).unwrap();
            outs[0]
                .square()
                .unwrap()
                .sum()
                .unwrap()
                .add(&outs[1].square().unwrap().sum().unwrap())
                .unwrap()
        };
        let loss = loss_of(&model);
        loss.backward().unwrap();
        let got = model.encoder.weight.grad().unwrap();
        let base = model.encoder.weight.to_vec();
        let fd = crate::numerics::finite_difference_gradient(
            |w| {
                model.encoder.weight.set_data(&w.to_vec())?;
                Ok(loss_of(&model))
            },
            &Tensor::from_vec(model.encoder.weight.shape(), base.clone()).unwrap(),
            1e-5,
        )
        .unwrap();
        model.encoder.weight.set_data(&base).unwrap();
        assert_close(&got, &fd, 1e-5, "dprnn encoder gradient");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng(6);
        let model = DprnnModel::init(DprnnConfig::tiny(false), &mut r).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dprnn.ckpt");
        model.save(&path).unwrap();
        let loaded = DprnnModel::load(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        let sig: Vec<f64> = (0..131).map(|_| r.gen_range(-0.5..0.5)).collect();
        let mix = Tensor::from_vec(&[131], sig).unwrap();
        let a = model.separate(&mix).unwrap();
        let b = loaded.separate(&mix).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
    }

    #[test]
    fn rejects_bad_overlap() {
        let cfg = DprnnConfig {
            chunk_overlap: 0.95,
            ..DprnnConfig::tiny(true)
        };
        assert!(cfg.validate().is_err());
    }
}
