//! Analytic parameter and MACs counters plus an empirical RTF/latency
//! harness.
//!
//! Counting convention: a MAC is one multiply inside a matrix product —
//! biases, activations and normalizations are excluded. That makes the
//! closed forms here provable against the instrumented multiply counter
//! in [`crate::numerics`], which increments only inside `matmul`.
//! Mem-LSTM work happens once per segment, so its per-frame share is the
//! per-segment cost divided by the segment length.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::dprnn::DprnnConfig;
use crate::layers::Direction;
use crate::skim::stream::InferModel;
use crate::skim::{MemMode, SkimConfig, SkimError, SkimModel};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("invalid profile request: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Skim(#[from] SkimError),
}

pub type Result<T> = std::result::Result<T, ProfileError>;

/// Architecture being costed.
pub enum ModelSpec {
    Skim(SkimConfig),
    Dprnn(DprnnConfig),
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub macs_per_frame: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub params: usize,
    pub macs_per_frame: f64,
    /// Zero unless a sample rate was supplied.
    pub macs_per_second: f64,
    pub breakdown: Vec<LayerCost>,
}

impl CostReport {
    fn from_rows(rows: Vec<LayerCost>, frames_per_second: f64) -> CostReport {
        let params = rows.iter().map(|r| r.params).sum();
        let macs_per_frame = rows.iter().map(|r| r.macs_per_frame).sum();
        CostReport {
            params,
            macs_per_frame,
            macs_per_second: macs_per_frame * frames_per_second,
            breakdown: rows,
        }
    }

    /// Aligned-column text table; totals on the last line.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .breakdown
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(5)
            .max(5);
        out.push_str(&format!(
            "{:<width$}  {:>12}  {:>16}\n",
            "layer", "params", "macs/frame"
        ));
        for r in &self.breakdown {
            out.push_str(&format!(
                "{:<width$}  {:>12}  {:>16.1}\n",
                r.name, r.params, r.macs_per_frame
            ));
        }
        out.push_str(&format!(
            "{:<width$}  {:>12}  {:>16.1}\n",
            "total", self.params, self.macs_per_frame
        ));
        if self.macs_per_second > 0.0 {
            out.push_str(&format!(
                "macs: {:.3} G/s\n",
                self.macs_per_second / 1e9
            ));
        }
        out
    }
}

fn lstm_params(input: usize, hidden: usize, dir: Direction) -> usize {
    let per_dir = 4 * hidden * input + 4 * hidden * hidden + 4 * hidden;
    per_dir * dirs(dir)
}

fn lstm_macs_per_step(input: usize, hidden: usize, dir: Direction) -> usize {
    4 * hidden * (input + hidden) * dirs(dir)
}

fn linear_params(input: usize, output: usize) -> usize {
    input * output + output
}

fn dirs(dir: Direction) -> usize {
    match dir {
        Direction::Forward => 1,
        Direction::Bidirectional => 2,
    }
}

struct Rows(Vec<LayerCost>);

impl Rows {
    fn push(&mut self, name: impl Into<String>, params: usize, macs_per_frame: f64) {
        self.0.push(LayerCost {
            name: name.into(),
            params,
            macs_per_frame,
        });
    }
}

fn skim_rows(cfg: &SkimConfig) -> Result<Vec<LayerCost>> {
    cfg.validate()?;
    let n = cfg.feature_dim;
    let h = cfg.hidden_dim;
    let k = cfg.segment_len;
    let q = cfg.output_channels;
    let kernel = cfg.encoder.kernel_size;
    let dir = cfg.seg_direction();
    let raw = cfg.seg_out_width();
    let (want_c, want_h) = match cfg.mem_mode {
        MemMode::HiddenCell => (true, true),
        MemMode::HiddenOnly => (false, true),
        MemMode::CellOnly => (true, false),
        MemMode::None | MemMode::Identity => (false, false),
    };

    let mut rows = Rows(Vec::new());
    rows.push("encoder", kernel * n + n, (kernel * n) as f64);
    for l in 0..cfg.num_blocks {
        rows.push(
            format!("block{l}.seg"),
            lstm_params(n, h, dir),
            lstm_macs_per_step(n, h, dir) as f64,
        );
        if raw != n {
            rows.push(
                format!("block{l}.proj"),
                linear_params(raw, n),
                (raw * n) as f64,
            );
        }
        rows.push(format!("block{l}.ln"), 2 * n, 0.0);
        if l + 1 < cfg.num_blocks {
            // One Mem-LSTM pass per segment, amortized over its K frames.
            let mem_params = lstm_params(h, h, dir)
                + if dir == Direction::Bidirectional {
                    linear_params(2 * h, h)
                } else {
                    0
                }
                + 2 * h;
            let mem_macs_per_seg = lstm_macs_per_step(h, h, dir)
                + if dir == Direction::Bidirectional {
                    2 * h * h
                } else {
                    0
                };
            let mem_macs = mem_macs_per_seg as f64 / k as f64;
            if want_c {
                rows.push(format!("block{l}.mem_c"), mem_params, mem_macs);
            }
            if want_h {
                rows.push(format!("block{l}.mem_h"), mem_params, mem_macs);
            }
        }
    }
    rows.push("head", linear_params(n, q * n), (q * n * n) as f64);
    rows.push("decoder", n * kernel, (q * n * kernel) as f64);
    Ok(rows.0)
}

fn dprnn_rows(cfg: &DprnnConfig) -> Result<Vec<LayerCost>> {
    cfg.validate()
        .map_err(|e| ProfileError::BadConfig(e.to_string()))?;
    let n = cfg.feature_dim;
    let h = cfg.hidden_dim;
    let q = cfg.output_channels;
    let kernel = cfg.encoder.kernel_size;
    // Each frame lives in chunk_len/hop chunks, so every dual path touches
    // it that many times per block.
    let reuse = cfg.chunk_len as f64 / cfg.hop() as f64;

    let mut rows = Rows(Vec::new());
    rows.push("encoder", kernel * n + n, (kernel * n) as f64);
    for l in 0..cfg.num_blocks {
        for (tag, dir) in [
            ("intra", cfg.intra_direction()),
            ("inter", cfg.inter_direction()),
        ] {
            let width = h * dirs(dir);
            let mut params = lstm_params(n, h, dir) + 2 * n;
            let mut macs = lstm_macs_per_step(n, h, dir) as f64;
            if width != n {
                params += linear_params(width, n);
                macs += (width * n) as f64;
            }
            rows.push(format!("block{l}.{tag}"), params, macs * reuse);
        }
    }
    rows.push("head", linear_params(n, q * n), (q * n * n) as f64);
    rows.push("decoder", n * kernel, (q * n * kernel) as f64);
    Ok(rows.0)
}

/// Closed-form parameter count; exact for the instantiated weight set.
pub fn count_params(spec: &ModelSpec) -> Result<CostReport> {
    let rows = match spec {
        ModelSpec::Skim(cfg) => skim_rows(cfg)?,
        ModelSpec::Dprnn(cfg) => dprnn_rows(cfg)?,
    };
    Ok(CostReport::from_rows(rows, 0.0))
}

/// Per-frame and per-second multiply counts at the given sample rate.
pub fn count_macs(spec: &ModelSpec, sample_rate: usize) -> Result<CostReport> {
    if sample_rate == 0 {
        return Err(ProfileError::BadConfig("sample_rate must be > 0".into()));
    }
    let (rows, stride) = match spec {
        ModelSpec::Skim(cfg) => (skim_rows(cfg)?, cfg.encoder.stride),
        ModelSpec::Dprnn(cfg) => (dprnn_rows(cfg)?, cfg.encoder.stride),
    };
    Ok(CostReport::from_rows(
        rows,
        sample_rate as f64 / stride as f64,
    ))
}

/// Exact multiply count of one full `separate` pass on `input_len`
/// samples, matching the instrumented counter including tail padding.
pub fn exact_macs(spec: &ModelSpec, input_len: usize) -> Result<u64> {
    match spec {
        ModelSpec::Skim(cfg) => exact_macs_skim(cfg, input_len),
        ModelSpec::Dprnn(cfg) => exact_macs_dprnn(cfg, input_len),
    }
}

fn exact_macs_skim(cfg: &SkimConfig, input_len: usize) -> Result<u64> {
    cfg.validate()?;
    let t = cfg.encoder.num_frames(input_len);
    if t == 0 {
        return Err(ProfileError::BadConfig(format!(
            "input of {input_len} samples yields no frames"
        )));
    }
    let n = cfg.feature_dim as u64;
    let h = cfg.hidden_dim as u64;
    let k = cfg.segment_len as u64;
    let q = cfg.output_channels as u64;
    let kernel = cfg.encoder.kernel_size as u64;
    let dir = cfg.seg_direction();
    let d = dirs(dir) as u64;
    let raw = cfg.seg_out_width() as u64;
    let tf = t as u64;
    let s = tf.div_ceil(k);
    let padded = s * k;

    let mut total = tf * kernel * n;
    for l in 0..cfg.num_blocks {
        // Seg-LSTM runs over the zero-padded S*K frames.
        total += padded * d * 4 * h * (n + h);
        if raw != n {
            total += padded * raw * n;
        }
        if l + 1 < cfg.num_blocks {
            let per_path = s * d * 8 * h * h
                + if dir == Direction::Bidirectional {
                    s * 2 * h * h
                } else {
                    0
                };
            let paths = match cfg.mem_mode {
                MemMode::HiddenCell => 2,
                MemMode::HiddenOnly | MemMode::CellOnly => 1,
                MemMode::None | MemMode::Identity => 0,
            };
            total += per_path * paths;
        }
    }
    total += tf * q * n * n;
    total += q * tf * n * kernel;
    Ok(total)
}

fn exact_macs_dprnn(cfg: &DprnnConfig, input_len: usize) -> Result<u64> {
    cfg.validate()
        .map_err(|e| ProfileError::BadConfig(e.to_string()))?;
    let t = cfg.encoder.num_frames(input_len);
    if t == 0 {
        return Err(ProfileError::BadConfig(format!(
            "input of {input_len} samples yields no frames"
        )));
    }
    let n = cfg.feature_dim as u64;
    let h = cfg.hidden_dim as u64;
    let q = cfg.output_channels as u64;
    let kernel = cfg.encoder.kernel_size as u64;
    let chunk = cfg.chunk_len as u64;
    let tf = t as u64;
    let c = tf.div_ceil(cfg.hop() as u64);

    let mut total = tf * kernel * n;
    for _ in 0..cfg.num_blocks {
        for (dir, steps) in [
            (cfg.intra_direction(), c * chunk),
            (cfg.inter_direction(), chunk * c),
        ] {
            let d = dirs(dir) as u64;
            total += steps * d * 4 * h * (n + h);
            let width = h * d;
            if width != n {
                total += steps * width * n;
            }
        }
    }
    total += tf * q * n * n;
    total += q * tf * n * kernel;
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Offline,
    Streaming,
}

#[derive(Clone, Debug, Serialize)]
pub struct LatencyReport {
    pub mode: BenchMode,
    pub ideal_latency_ms: f64,
    /// Mean per-frame compute time over the frame budget (stride/fs).
    pub rtf: f64,
    /// ideal latency + mean per-frame compute time.
    pub measured_latency_ms: f64,
    pub runs: usize,
    pub mean_frame_ms: f64,
    pub std_frame_ms: f64,
    pub p99_frame_ms: f64,
    pub threads: usize,
}

impl LatencyReport {
    pub fn to_table(&self) -> String {
        format!(
            "{:<22}{:?}\n{:<22}{:.4} ms\n{:<22}{:.4}\n{:<22}{:.4} ms\n{:<22}{}\n{:<22}{:.4} ms\n{:<22}{:.4} ms\n{:<22}{:.4} ms\n",
            "mode", self.mode,
            "ideal latency", self.ideal_latency_ms,
            "rtf", self.rtf,
            "measured latency", self.measured_latency_ms,
            "runs", self.runs,
            "mean frame", self.mean_frame_ms,
            "std frame", self.std_frame_ms,
            "p99 frame", self.p99_frame_ms,
        )
    }
}

fn stats(samples: &[f64]) -> (f64, f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let idx = ((0.99 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    (mean, var.sqrt(), sorted[idx])
}

/// Single-threaded wall-clock benchmark on synthetic audio. Warmup
/// iterations are excluded from the statistics. The whole loop runs on the
/// calling thread; no worker pool exists in this crate.
pub fn bench_rtf(
    model: &SkimModel,
    audio_seconds: f64,
    sample_rate: usize,
    mode: BenchMode,
) -> Result<LatencyReport> {
    if audio_seconds <= 0.0 || sample_rate == 0 {
        return Err(ProfileError::BadConfig(
            "audio_seconds and sample_rate must be positive".into(),
        ));
    }
    let infer: InferModel<f32> = InferModel::from_model(model)?;
    let stride = model.cfg.encoder.stride;
    let ideal_ms = stride as f64 * 1e3 / sample_rate as f64;
    let len = (audio_seconds * sample_rate as f64) as usize;
    // Deterministic pseudo-audio; content does not affect LSTM cost.
    let audio: Vec<f32> = (0..len)
        .map(|i| (0.37 * i as f64).sin() as f32 * 0.5)
        .collect();

    let frame_times_ms: Vec<f64> = match mode {
        BenchMode::Streaming => {
            let mut stream = infer.stream();
            let warmup = 50usize;
            let mut times = Vec::new();
            for (i, chunk) in audio.chunks(stride).enumerate() {
                let t0 = Instant::now();
                let _ = stream.push(chunk).map_err(ProfileError::Skim)?;
                let dt = t0.elapsed().as_secs_f64() * 1e3;
                if i >= warmup {
                    times.push(dt);
                }
            }
            times
        }
        BenchMode::Offline => {
            let frames = model.cfg.encoder.num_frames(len).max(1);
            let _ = infer.separate(&audio)?; // warmup
            let mut times = Vec::new();
            for _ in 0..3 {
                let t0 = Instant::now();
                let _ = infer.separate(&audio)?;
                times.push(t0.elapsed().as_secs_f64() * 1e3 / frames as f64);
            }
            times
        }
    };
    if frame_times_ms.is_empty() {
        return Err(ProfileError::BadConfig(
            "audio too short for the warmup budget".into(),
        ));
    }
    let (mean, std, p99) = stats(&frame_times_ms);
    Ok(LatencyReport {
        mode,
        ideal_latency_ms: ideal_ms,
        rtf: mean / ideal_ms,
        measured_latency_ms: ideal_ms + mean,
        runs: frame_times_ms.len(),
        mean_frame_ms: mean,
        std_frame_ms: std,
        p99_frame_ms: p99,
        threads: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::total_params;
    use crate::numerics::{mul_counter, reset_mul_counter, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lstm_closed_forms() {
        assert_eq!(lstm_params(64, 256, Direction::Forward), 328_704);
        assert_eq!(lstm_params(64, 256, Direction::Bidirectional), 657_408);
        assert_eq!(lstm_macs_per_step(64, 256, Direction::Forward), 327_680);
    }

    #[test]
    fn param_counts_match_instantiated_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for causal in [true, false] {
            for mode in MemMode::ALL {
                let cfg = SkimConfig {
                    mem_mode: mode,
                    ..SkimConfig::tiny(causal)
                };
                let model = SkimModel::init(cfg, &mut rng).unwrap();
                let report = count_params(&ModelSpec::Skim(cfg)).unwrap();
                assert_eq!(
                    report.params,
                    total_params(&model.named_params()),
                    "skim causal={causal} mode={}",
                    mode.label()
                );
            }
            let cfg = DprnnConfig::tiny(causal);
            let model = crate::dprnn::DprnnModel::init(cfg, &mut rng).unwrap();
            let report = count_params(&ModelSpec::Dprnn(cfg)).unwrap();
            assert_eq!(report.params, total_params(&model.named_params()));
        }
    }

    #[test]
    fn report_totals_equal_breakdown_sums() {
        let report = count_macs(&ModelSpec::Skim(SkimConfig::paper(20, true)), 16000).unwrap();
        let p: usize = report.breakdown.iter().map(|r| r.params).sum();
        let m: f64 = report.breakdown.iter().map(|r| r.macs_per_frame).sum();
        assert_eq!(report.params, p);
        assert_eq!(report.macs_per_frame, m);
        let table = report.to_table();
        assert!(table.contains("block3.seg") && table.contains("total"));
    }

    #[test]
    fn analytic_macs_match_instrumented_counter_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (causal, mode, len) in [
            (true, MemMode::HiddenCell, 400usize),
            (true, MemMode::None, 333),
            (false, MemMode::HiddenCell, 400),
            (false, MemMode::Identity, 250),
            (true, MemMode::HiddenOnly, 505),
        ] {
            let cfg = SkimConfig {
                mem_mode: mode,
                ..SkimConfig::tiny(causal)
            };
            let model = SkimModel::init(cfg, &mut rng).unwrap();
            let sig: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let mix = Tensor::from_vec(&[len], sig).unwrap();
            reset_mul_counter();
            model.separate(&mix).unwrap();
            let counted = mul_counter();
            let analytic = exact_macs(&ModelSpec::Skim(cfg), len).unwrap();
            assert_eq!(
                analytic, counted,
                "skim causal={causal} mode={} len={len}",
                mode.label()
            );
        }
        for (causal, len) in [(true, 400usize), (false, 321)] {
            let cfg = DprnnConfig::tiny(causal);
            let model = crate::dprnn::DprnnModel::init(cfg, &mut rng).unwrap();
            let sig: Vec<f64> = (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let mix = Tensor::from_vec(&[len], sig).unwrap();
            reset_mul_counter();
            model.separate(&mix).unwrap();
            assert_eq!(
                exact_macs(&ModelSpec::Dprnn(cfg), len).unwrap(),
                mul_counter(),
                "dprnn causal={causal} len={len}"
            );
        }
    }

    #[test]
    fn reference_scale_costs() {
        let skim = count_macs(&ModelSpec::Skim(SkimConfig::paper(20, true)), 16000).unwrap();
        let gs = skim.macs_per_second / 1e9;
        assert!((1.5..=2.5).contains(&gs), "skim causal {gs} G/s");
        let dprnn = count_macs(&ModelSpec::Dprnn(DprnnConfig::paper(20, true)), 16000).unwrap();
        let ratio = skim.macs_per_second / dprnn.macs_per_second;
        assert!(ratio <= 0.35, "skim/dprnn ratio {ratio}");
        // Unidirectional has strictly fewer parameters than bidirectional.
        let causal = count_params(&ModelSpec::Skim(SkimConfig::paper(20, true))).unwrap();
        let noncausal = count_params(&ModelSpec::Skim(SkimConfig::paper(20, false))).unwrap();
        assert!(causal.params < noncausal.params);
    }

    #[test]
    fn ideal_latency_examples() {
        for (stride, expect) in [(20usize, 1.25f64), (10, 0.625)] {
            let cfg = SkimConfig::tiny(true);
            let model = SkimModel::init(
                SkimConfig {
                    encoder: crate::layers::EncoderConfig::new(stride, cfg.feature_dim),
                    ..cfg
                },
                &mut ChaCha8Rng::seed_from_u64(3),
            )
            .unwrap();
            let report = bench_rtf(&model, 0.5, 16000, BenchMode::Streaming).unwrap();
            assert!((report.ideal_latency_ms - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn latency_relation_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let small = SkimModel::init(
            SkimConfig {
                num_blocks: 1,
                ..SkimConfig::tiny(true)
            },
            &mut rng,
        )
        .unwrap();
        let big = SkimModel::init(
            SkimConfig {
                num_blocks: 6,
                hidden_dim: 64,
                ..SkimConfig::tiny(true)
            },
            &mut rng,
        )
        .unwrap();
        let rs = bench_rtf(&small, 2.0, 8000, BenchMode::Streaming).unwrap();
        let rb = bench_rtf(&big, 2.0, 8000, BenchMode::Streaming).unwrap();
        assert!(rs.rtf > 0.0 && rb.rtf > rs.rtf, "{} !> {}", rb.rtf, rs.rtf);
        for r in [&rs, &rb] {
            assert!(r.measured_latency_ms >= r.ideal_latency_ms);
            let predicted = r.ideal_latency_ms * (1.0 + r.rtf);
            assert!(
                (r.measured_latency_ms - predicted).abs() <= 0.1 * predicted,
                "measured {} vs ideal*(1+rtf) {}",
                r.measured_latency_ms,
                predicted
            );
        }
        let offline = bench_rtf(&small, 2.0, 8000, BenchMode::Offline).unwrap();
        assert!(offline.rtf > 0.0 && offline.runs == 3);
    }
}
