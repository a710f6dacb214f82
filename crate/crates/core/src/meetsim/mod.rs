//! Deterministic synthetic meeting generator plus WAV/manifest I/O.
//!
//! Sessions are built from synthetic sources with per-speaker disjoint
//! spectral bands, placed as an overlapping chain so any instant has at
//! most two active speakers; the chain overlaps are solved analytically
//! for a target overlap ratio and verified after placement. Everything is
//! a pure function of the config (including its seed).

#[cfg(test)]
mod tests;

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphpit::Utterance;

#[derive(Debug, Error)]
pub enum MeetsimError {
    #[error("invalid sim config: {0}")]
    BadConfig(String),
    #[error("could not place utterances after {attempts} attempts: {detail}")]
    Unplaceable { attempts: usize, detail: String },
    #[error("wav parse error at byte {offset}: {detail}")]
    WavParse { offset: usize, detail: String },
    #[error("mono required, file has {channels} channels")]
    MonoRequired { channels: u16 },
    #[error("manifest references missing file {0}")]
    MissingFile(PathBuf),
    #[error("manifest json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MeetsimError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Multitone,
    FilteredNoise,
    Chirp,
}

/// Inclusive ranges are (min, max) pairs sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub sample_rate: usize,
    pub session_secs: f64,
    pub num_speakers: (usize, usize),
    /// Target (time with >= 2 active) / (time with >= 1 active).
    pub overlap_ratio: (f64, f64),
    pub utterance_secs: (f64, f64),
    pub source_kind: SourceKind,
    pub noise_snr_db: (f64, f64),
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> SimConfig {
        SimConfig {
            sample_rate: 8000,
            session_secs: 10.0,
            num_speakers: (3, 5),
            overlap_ratio: (0.5, 0.8),
            utterance_secs: (1.0, 2.5),
            source_kind: SourceKind::Multitone,
            noise_snr_db: (15.0, 25.0),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.session_secs <= 0.0 {
            return Err(MeetsimError::BadConfig(
                "sample_rate and session_secs must be positive".into(),
            ));
        }
        let ranges_ok = self.num_speakers.0 >= 1
            && self.num_speakers.0 <= self.num_speakers.1
            && self.overlap_ratio.0 >= 0.0
            && self.overlap_ratio.0 <= self.overlap_ratio.1
            && self.overlap_ratio.1 < 1.0
            && self.utterance_secs.0 > 0.0
            && self.utterance_secs.0 <= self.utterance_secs.1
            && self.noise_snr_db.0 <= self.noise_snr_db.1;
        if !ranges_ok {
            return Err(MeetsimError::BadConfig("empty or invalid range".into()));
        }
        if self.utterance_secs.1 * 2.0 > self.session_secs {
            return Err(MeetsimError::BadConfig(
                "session too short for two utterances".into(),
            ));
        }
        Ok(())
    }

    pub fn session_len(&self) -> usize {
        (self.session_secs * self.sample_rate as f64).round() as usize
    }
}

#[derive(Clone, Debug)]
pub struct MeetingSession {
    pub mixture: Vec<f64>,
    pub utterances: Vec<Utterance>,
    /// Additive noise track; `mixture == placed utterances + noise` exactly.
    pub noise: Vec<f64>,
    pub sample_rate: usize,
    pub overlap_ratio: f64,
}

/// (time with >= 2 active) / (time with >= 1 active) over the session.
pub fn measure_overlap_ratio(utterances: &[Utterance], session_len: usize) -> f64 {
    let mut activity = vec![0u32; session_len];
    for u in utterances {
        for slot in &mut activity[u.start..u.end().min(session_len)] {
            *slot += 1;
        }
    }
    let speech = activity.iter().filter(|&&c| c >= 1).count();
    if speech == 0 {
        return 0.0;
    }
    let overlapped = activity.iter().filter(|&&c| c >= 2).count();
    overlapped as f64 / speech as f64
}

/// Disjoint per-speaker frequency band in Hz; bands stay below Nyquist for
/// the default rates and do not depend on the session, so a separator can
/// learn them across sessions.
fn speaker_band(speaker: usize, sample_rate: usize) -> (f64, f64) {
    let nyquist = sample_rate as f64 / 2.0;
    let lo = 200.0 + 350.0 * speaker as f64;
    let hi = lo + 280.0;
    if hi >= nyquist {
        // Wrap high speakers back into range; still disjoint for <= 10
        // speakers at 8 kHz.
        let lo = nyquist - 300.0 - 50.0 * (speaker % 4) as f64;
        (lo, lo + 40.0)
    } else {
        (lo, hi)
    }
}

fn synthesize(
    kind: SourceKind,
    speaker: usize,
    len: usize,
    sample_rate: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let (lo, hi) = speaker_band(speaker, sample_rate);
    let fs = sample_rate as f64;
    let mut out = vec![0.0; len];
    match kind {
        SourceKind::Multitone => {
            for _ in 0..3 {
                let f = rng.gen_range(lo..hi);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = rng.gen_range(0.08..0.15);
                for (t, o) in out.iter_mut().enumerate() {
                    *o += amp * (std::f64::consts::TAU * f * t as f64 / fs + phase).sin();
                }
            }
        }
        SourceKind::FilteredNoise => {
            // Dense random-phase tones approximate band-limited noise.
            for _ in 0..24 {
                let f = rng.gen_range(lo..hi);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = rng.gen_range(0.01..0.04);
                for (t, o) in out.iter_mut().enumerate() {
                    *o += amp * (std::f64::consts::TAU * f * t as f64 / fs + phase).sin();
                }
            }
        }
        SourceKind::Chirp => {
            let phase0 = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.2..0.3);
            let dur = len.max(1) as f64 / fs;
            for (t, o) in out.iter_mut().enumerate() {
                let time = t as f64 / fs;
                // Linear sweep lo -> hi across the utterance.
                let phase = std::f64::consts::TAU
                    * (lo * time + (hi - lo) * time * time / (2.0 * dur));
                *o = amp * (phase + phase0).sin();
            }
        }
    }
    // Short raised-cosine fade at both ends avoids placement clicks.
    let ramp = (sample_rate / 100).min(len / 2).max(1);
    for t in 0..ramp {
        let w = 0.5 - 0.5 * (std::f64::consts::PI * t as f64 / ramp as f64).cos();
        out[t] *= w;
        out[len - 1 - t] *= w;
    }
    out
}

/// Chain placement: each utterance overlaps only its predecessor by the
/// amount that hits the target ratio, so at most two speakers are active
/// at once.
fn place_utterances(
    cfg: &SimConfig,
    num_speakers: usize,
    target_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Utterance>> {
    let fs = cfg.sample_rate as f64;
    let session_len = cfg.session_len();
    let mut lens: Vec<usize> = Vec::new();
    // Draw enough utterances to roughly fill the session after overlap.
    let mut planned_span = 0.0;
    while planned_span < cfg.session_secs * (1.0 + target_ratio) * 0.92
        || lens.len() < num_speakers.max(2)
    {
        let secs = rng.gen_range(cfg.utterance_secs.0..=cfg.utterance_secs.1);
        lens.push((secs * fs).round() as usize);
        planned_span += secs;
        if lens.len() > 64 {
            break;
        }
    }
    let total: usize = lens.iter().sum();
    // Solve sum of pair overlaps o from ratio = o_sum / (total - o_sum).
    let o_sum = target_ratio / (1.0 + target_ratio) * total as f64;
    let pairs = lens.len() - 1;
    let per_pair = o_sum / pairs as f64;

    let mut utterances = Vec::with_capacity(lens.len());
    let mut cursor = 0usize;
    let mut prev_overlap = 0usize;
    for (i, &len) in lens.iter().enumerate() {
        let start = if i == 0 {
            0
        } else {
            // Consecutive overlap regions must not intersect, or a third
            // speaker becomes simultaneously active: o_i + o_{i+1} <= len_i.
            let cap = (lens[i - 1].saturating_sub(prev_overlap))
                .min((len as f64 * 0.95) as usize)
                .saturating_sub(1);
            let overlap = (per_pair.round() as usize).min(cap);
            prev_overlap = overlap;
            cursor.saturating_sub(overlap)
        };
        if start + len > session_len {
            break;
        }
        let speaker = i % num_speakers;
        utterances.push(Utterance {
            source: synthesize(cfg.source_kind, speaker, len, cfg.sample_rate, rng),
            start,
            speaker_id: format!("spk{speaker}"),
        });
        cursor = start + len;
    }
    if utterances.len() < 2 {
        return None;
    }
    Some(utterances)
}

/// Deterministic synthetic session. Retries placement until the achieved
/// overlap ratio lands inside the configured range.
pub fn simulate_meeting(cfg: &SimConfig) -> Result<MeetingSession> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let session_len = cfg.session_len();
    let num_speakers = rng.gen_range(cfg.num_speakers.0..=cfg.num_speakers.1);

    const ATTEMPTS: usize = 100;
    let mut last_ratio = f64::NAN;
    for _ in 0..ATTEMPTS {
        let target = rng.gen_range(cfg.overlap_ratio.0..=cfg.overlap_ratio.1);
        let Some(utterances) = place_utterances(cfg, num_speakers, target, &mut rng) else {
            continue;
        };
        let ratio = measure_overlap_ratio(&utterances, session_len);
        last_ratio = ratio;
        if ratio < cfg.overlap_ratio.0 || ratio > cfg.overlap_ratio.1 {
            continue;
        }

        let mut speech = vec![0.0; session_len];
        for u in &utterances {
            for (i, &s) in u.source.iter().enumerate() {
                speech[u.start + i] += s;
            }
        }
        let speech_power: f64 =
            speech.iter().map(|v| v * v).sum::<f64>() / session_len as f64;
        let snr = rng.gen_range(cfg.noise_snr_db.0..=cfg.noise_snr_db.1);
        let noise_std = (speech_power / 10f64.powf(snr / 10.0)).sqrt();
        let noise: Vec<f64> = (0..session_len)
            .map(|_| {
                // Sum of uniforms as a cheap approximate gaussian.
                let u: f64 = (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum();
                noise_std * u * (3.0f64 / 4.0).sqrt()
            })
            .collect();
        // Accumulate in the order noise-then-utterances so the
        // mixture-minus-utterances invariant holds bit-exactly.
        let mut mixture = noise.clone();
        for u in &utterances {
            for (i, &s) in u.source.iter().enumerate() {
                mixture[u.start + i] += s;
            }
        }
        return Ok(MeetingSession {
            mixture,
            utterances,
            noise,
            sample_rate: cfg.sample_rate,
            overlap_ratio: ratio,
        });
    }
    Err(MeetsimError::Unplaceable {
        attempts: ATTEMPTS,
        detail: format!(
            "target overlap {:?} never achieved (last ratio {last_ratio:.3})",
            cfg.overlap_ratio
        ),
    })
}

// --- WAV I/O (16-bit PCM mono) -------------------------------------------

/// Quantize to 16-bit PCM and write a canonical 44-byte-header WAV file.
/// Returns the number of samples clipped into [-1, 1).
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: usize) -> Result<usize> {
    let mut clipped = 0usize;
    let mut pcm = Vec::with_capacity(samples.len());
    for &v in samples {
        let scaled = (v * 32768.0).round();
        let q = if scaled > 32767.0 {
            clipped += 1;
            32767
        } else if scaled < -32768.0 {
            clipped += 1;
            -32768
        } else {
            scaled as i32
        };
        pcm.push(q as i16);
    }
    let data_len = (pcm.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + pcm.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&(sample_rate as u32).to_le_bytes());
    out.extend_from_slice(&((sample_rate * 2) as u32).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in pcm {
        out.extend_from_slice(&s.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(clipped)
}

pub fn read_wav(path: &Path) -> Result<(Vec<f64>, usize)> {
    let bytes = std::fs::read(path)?;
    let err = |offset: usize, detail: &str| MeetsimError::WavParse {
        offset,
        detail: detail.into(),
    };
    let tag = |pos: usize| -> Result<&[u8]> {
        bytes
            .get(pos..pos + 4)
            .ok_or_else(|| err(pos, "truncated chunk tag"))
    };
    let le_u32 = |pos: usize| -> Result<u32> {
        Ok(u32::from_le_bytes(
            bytes
                .get(pos..pos + 4)
                .ok_or_else(|| err(pos, "truncated u32"))?
                .try_into()
                .unwrap(),
        ))
    };
    let le_u16 = |pos: usize| -> Result<u16> {
        Ok(u16::from_le_bytes(
            bytes
                .get(pos..pos + 2)
                .ok_or_else(|| err(pos, "truncated u16"))?
                .try_into()
                .unwrap(),
        ))
    };
    if tag(0)? != b"RIFF" {
        return Err(err(0, "missing RIFF tag"));
    }
    if tag(8)? != b"WAVE" {
        return Err(err(8, "missing WAVE tag"));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<(usize, usize)> = None;
    while pos + 8 <= bytes.len() {
        let chunk = tag(pos)?.to_vec();
        let size = le_u32(pos + 4)? as usize;
        let body = pos + 8;
        match chunk.as_slice() {
            b"fmt " => {
                if size < 16 {
                    return Err(err(pos, "fmt chunk too small"));
                }
                fmt = Some((
                    le_u16(body)?,
                    le_u16(body + 2)?,
                    le_u32(body + 4)?,
                    le_u16(body + 14)?,
                ));
            }
            b"data" => data = Some((body, size)),
            _ => {}
        }
        pos = body + size + size % 2;
    }
    let (format, channels, sample_rate, bits) =
        fmt.ok_or_else(|| err(bytes.len(), "no fmt chunk"))?;
    if channels != 1 {
        return Err(MeetsimError::MonoRequired { channels });
    }
    if format != 1 || bits != 16 {
        return Err(err(0, "only 16-bit PCM supported"));
    }
    let (body, size) = data.ok_or_else(|| err(bytes.len(), "no data chunk"))?;
    if body + size > bytes.len() {
        return Err(err(body, "data chunk extends past file end"));
    }
    let mut samples = Vec::with_capacity(size / 2);
    for i in 0..size / 2 {
        let b = body + 2 * i;
        let v = i16::from_le_bytes(bytes[b..b + 2].try_into().unwrap());
        samples.push(v as f64 / 32768.0);
    }
    Ok((samples, sample_rate as usize))
}

// --- Manifest I/O ----------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ManifestUtterance {
    source: String,
    start_sample: usize,
    speaker_id: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    sample_rate: usize,
    session_len: usize,
    overlap_ratio: f64,
    mixture: String,
    utterances: Vec<ManifestUtterance>,
}

/// Write `mixture.wav`, `utt_<k>.wav` and `manifest.json` into `dir`.
pub fn write_manifest(session: &MeetingSession, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_wav(&dir.join("mixture.wav"), &session.mixture, session.sample_rate)?;
    let mut utterances = Vec::with_capacity(session.utterances.len());
    for (k, u) in session.utterances.iter().enumerate() {
        let name = format!("utt_{k}.wav");
        write_wav(&dir.join(&name), &u.source, session.sample_rate)?;
        utterances.push(ManifestUtterance {
            source: name,
            start_sample: u.start,
            speaker_id: u.speaker_id.clone(),
        });
    }
    let manifest = Manifest {
        sample_rate: session.sample_rate,
        session_len: session.mixture.len(),
        overlap_ratio: session.overlap_ratio,
        mixture: "mixture.wav".into(),
        utterances,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Load a session back; relative paths resolve against the manifest's
/// directory. The noise track is reconstructed as mixture minus placed
/// utterances (exact up to 16-bit quantization).
pub fn read_manifest(path: &Path) -> Result<MeetingSession> {
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(path)?)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let resolve = |rel: &str| -> Result<PathBuf> {
        let p = dir.join(rel);
        if !p.exists() {
            return Err(MeetsimError::MissingFile(p));
        }
        Ok(p)
    };
    let (mixture, _) = read_wav(&resolve(&manifest.mixture)?)?;
    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for mu in &manifest.utterances {
        let (source, _) = read_wav(&resolve(&mu.source)?)?;
        utterances.push(Utterance {
            source,
            start: mu.start_sample,
            speaker_id: mu.speaker_id.clone(),
        });
    }
    let mut noise = mixture.clone();
    for u in &utterances {
        for (i, &s) in u.source.iter().enumerate() {
            if u.start + i < noise.len() {
                noise[u.start + i] -= s;
            }
        }
    }
    let overlap_ratio = measure_overlap_ratio(&utterances, mixture.len());
    Ok(MeetingSession {
        mixture,
        utterances,
        noise,
        sample_rate: manifest.sample_rate,
        overlap_ratio,
    })
}

/// Generate `count` sessions under `root/sessions/<id>/` from consecutive
/// seeds; returns the session directories.
pub fn write_dataset(root: &Path, cfg: &SimConfig, count: usize) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::with_capacity(count);
    for i in 0..count {
        let session = simulate_meeting(&SimConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..*cfg
        })?;
        let dir = root.join("sessions").join(format!("{i:04}"));
        write_manifest(&session, &dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}
