//! Graph-PIT training loss and continuous-separation metrics.
//!
//! Overlapping utterances may never share an output channel, so the label
//! permutation problem becomes graph coloring on the utterance overlap
//! graph: enumerate the valid utterance-to-channel assignments, render
//! each channel's overlap-free target, and take the best-scoring
//! assignment. Training scores with thresholded SDR (tSDR); evaluation
//! uses plain SDR improvement, overall and over 2-second windows with
//! majority speech overlap (SDRi50).


use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum GraphPitError {
    #[error("graph-pit: {0}")]
    BadInput(String),
    #[error("no valid assignment: utterances {clique:?} overlap simultaneously, need more than {channels} channels")]
    Infeasible { clique: Vec<usize>, channels: usize },
    #[error("silent reference signal")]
    SilentReference,
    #[error("too many utterances: {got} > cap {cap}")]
    TooManyUtterances { got: usize, cap: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, GraphPitError>;

/// One placed source signal inside a session.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Utterance {
    pub source: Vec<f64>,
    pub start: usize,
    pub speaker_id: String,
}

impl Utterance {
    pub fn end(&self) -> usize {
        self.start + self.source.len()
    }

    /// Half-open interval overlap.
    pub fn overlaps(&self, other: &Utterance) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

/// Utterance-to-channel map; valid iff overlapping utterances land on
/// distinct channels.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Assignment {
    pub channel_of: Vec<usize>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TsdrParams {
    /// Threshold in dB; tSDR saturates here for a perfect estimate.
    pub snr_max: f64,
    pub eps: f64,
}

impl Default for TsdrParams {
    fn default() -> TsdrParams {
        TsdrParams {
            snr_max: 20.0,
            eps: 1e-6,
        }
    }
}

impl TsdrParams {
    pub fn tau(&self) -> f64 {
        10f64.powf(-self.snr_max / 10.0)
    }
}

/// Backtracking depth cap; the search is exponential in the worst case.
pub const MAX_UTTERANCES: usize = 20;

/// Adjacency matrix of the utterance overlap graph.
pub fn build_overlap_graph(utterances: &[Utterance]) -> Vec<Vec<bool>> {
    let p = utterances.len();
    let mut adj = vec![vec![false; p]; p];
    for i in 0..p {
        for j in i + 1..p {
            if utterances[i].overlaps(&utterances[j]) {
                adj[i][j] = true;
                adj[j][i] = true;
            }
        }
    }
    adj
}

/// Utterances simultaneously active at some sample where more than
/// `channels` overlap — the certificate that no valid assignment exists.
/// Interval graphs are perfect, so absence of such a point guarantees a
/// coloring.
fn infeasibility_clique(utterances: &[Utterance], channels: usize) -> Option<Vec<usize>> {
    for u in utterances {
        let point = u.start;
        let active: Vec<usize> = utterances
            .iter()
            .enumerate()
            .filter(|(_, v)| v.start <= point && point < v.end() && !v.source.is_empty())
            .map(|(i, _)| i)
            .collect();
        if active.len() > channels {
            return Some(active);
        }
    }
    None
}

/// All valid assignments of `utterances` to `channels` output channels, in
/// lexicographic channel order.
pub fn enumerate_colorings(
    utterances: &[Utterance],
    channels: usize,
) -> Result<Vec<Assignment>> {
    let p = utterances.len();
    if p > MAX_UTTERANCES {
        return Err(GraphPitError::TooManyUtterances {
            got: p,
            cap: MAX_UTTERANCES,
        });
    }
    if channels == 0 {
        return Err(GraphPitError::BadInput("zero channels".into()));
    }
    let adj = build_overlap_graph(utterances);
    // Temporal order keeps pruning effective on interval graphs.
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by_key(|&i| (utterances[i].start, i));

    let mut out = Vec::new();
    let mut channel_of = vec![usize::MAX; p];
    fn recurse(
        depth: usize,
        order: &[usize],
        adj: &[Vec<bool>],
        channels: usize,
        channel_of: &mut Vec<usize>,
        out: &mut Vec<Assignment>,
    ) {
        if depth == order.len() {
            out.push(Assignment {
                channel_of: channel_of.clone(),
            });
            return;
        }
        let v = order[depth];
        for q in 0..channels {
            let conflict = order[..depth]
                .iter()
                .any(|&u| adj[v][u] && channel_of[u] == q);
            if !conflict {
                channel_of[v] = q;
                recurse(depth + 1, order, adj, channels, channel_of, out);
                channel_of[v] = usize::MAX;
            }
        }
    }
    recurse(0, &order, &adj, channels, &mut channel_of, &mut out);
    if out.is_empty() && p > 0 {
        let clique = infeasibility_clique(utterances, channels)
            .expect("interval graph with no coloring has a large clique");
        return Err(GraphPitError::Infeasible { clique, channels });
    }
    out.sort();
    Ok(out)
}

fn validate_assignment(
    assignment: &Assignment,
    utterances: &[Utterance],
    channels: usize,
) -> Result<()> {
    if assignment.channel_of.len() != utterances.len() {
        return Err(GraphPitError::BadInput(format!(
            "assignment covers {} utterances, session has {}",
            assignment.channel_of.len(),
            utterances.len()
        )));
    }
    for (i, &q) in assignment.channel_of.iter().enumerate() {
        if q >= channels {
            return Err(GraphPitError::BadInput(format!(
                "utterance {i} assigned to channel {q} >= {channels}"
            )));
        }
        for (j, &r) in assignment.channel_of.iter().enumerate().skip(i + 1) {
            if q == r && utterances[i].overlaps(&utterances[j]) {
                return Err(GraphPitError::BadInput(format!(
                    "overlapping utterances {i} and {j} share channel {q}"
                )));
            }
        }
    }
    Ok(())
}

/// Per-channel overlap-free target waveforms for a valid assignment.
pub fn render_targets(
    assignment: &Assignment,
    utterances: &[Utterance],
    session_len: usize,
    channels: usize,
) -> Result<Vec<Vec<f64>>> {
    validate_assignment(assignment, utterances, channels)?;
    let mut out = vec![vec![0.0; session_len]; channels];
    for (u, &q) in utterances.iter().zip(&assignment.channel_of) {
        if u.end() > session_len {
            return Err(GraphPitError::BadInput(format!(
                "utterance ends at {} past session length {session_len}",
                u.end()
            )));
        }
        for (i, &s) in u.source.iter().enumerate() {
            out[q][u.start + i] += s;
        }
    }
    Ok(out)
}

/// Thresholded SDR in dB: `10 log10(||s||^2 / (||s-e||^2 + tau ||s||^2 +
/// eps))`, saturating at `snr_max` for a perfect estimate.
pub fn tsdr_value(est: &[f64], reference: &[f64], p: &TsdrParams) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(GraphPitError::BadInput(format!(
            "length mismatch: estimate {} vs reference {}",
            est.len(),
            reference.len()
        )));
    }
    let power: f64 = reference.iter().map(|s| s * s).sum();
    if power == 0.0 {
        return Err(GraphPitError::SilentReference);
    }
    let err: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, s)| (s - e) * (s - e))
        .sum();
    Ok(10.0 * (power / (err + p.tau() * power + p.eps)).log10())
}

/// Differentiable tSDR over tensors (reference is a constant).
pub fn tsdr(est: &Tensor, reference: &Tensor, p: &TsdrParams) -> Result<Tensor> {
    if est.shape() != reference.shape() {
        return Err(GraphPitError::BadInput(format!(
            "shape mismatch: estimate {:?} vs reference {:?}",
            est.shape(),
            reference.shape()
        )));
    }
    let power = reference.square()?.sum()?;
    if power.item()? == 0.0 {
        return Err(GraphPitError::SilentReference);
    }
    let err = reference.sub(est)?.square()?.sum()?;
    let den = err
        .add(&power.scale(p.tau())?)?
        .add_scalar(p.eps)?;
    let ratio_log = power.ln()?.sub(&den.ln()?)?;
    Ok(ratio_log.scale(10.0 / std::f64::consts::LN_10)?)
}

/// Plain SDR in dB, `eps`-stabilized denominator only.
pub fn sdr_value(est: &[f64], reference: &[f64], eps: f64) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(GraphPitError::BadInput("length mismatch".into()));
    }
    let power: f64 = reference.iter().map(|s| s * s).sum();
    if power == 0.0 {
        return Err(GraphPitError::SilentReference);
    }
    let err: f64 = est
        .iter()
        .zip(reference)
        .map(|(e, s)| (s - e) * (s - e))
        .sum();
    Ok(10.0 * (power / (err + eps)).log10())
}

fn active_channels(targets: &[Vec<f64>]) -> Vec<usize> {
    targets
        .iter()
        .enumerate()
        .filter(|(_, t)| t.iter().any(|&v| v != 0.0))
        .map(|(q, _)| q)
        .collect()
}

/// Assignment score used during the argmin search: mean `-tsdr` over
/// channels with a nonzero target.
fn assignment_score(
    est: &[Vec<f64>],
    assignment: &Assignment,
    utterances: &[Utterance],
    session_len: usize,
    p: &TsdrParams,
) -> Result<f64> {
    let targets = render_targets(assignment, utterances, session_len, est.len())?;
    let active = active_channels(&targets);
    if active.is_empty() {
        return Err(GraphPitError::BadInput(
            "no active channels in any target".into(),
        ));
    }
    let mut total = 0.0;
    for &q in &active {
        total -= tsdr_value(&est[q], &targets[q], p)?;
    }
    Ok(total / active.len() as f64)
}

/// Graph-PIT loss: minimum over valid assignments of the mean `-tsdr`
/// across active channels. The returned scalar is differentiable with
/// respect to the estimates at the minimizing assignment; silent channels
/// are excluded from the mean.
pub fn graph_pit_loss(
    estimates: &[Tensor],
    utterances: &[Utterance],
    p: &TsdrParams,
) -> Result<(Tensor, Assignment)> {
    if estimates.is_empty() {
        return Err(GraphPitError::BadInput("no estimate channels".into()));
    }
    let session_len = estimates[0].shape()[0];
    for e in estimates {
        if e.shape() != [session_len] {
            return Err(GraphPitError::BadInput(
                "estimates must share the session length".into(),
            ));
        }
    }
    let est_values: Vec<Vec<f64>> = estimates.iter().map(|e| e.to_vec()).collect();
    let assignments = enumerate_colorings(utterances, estimates.len())?;

    let mut best: Option<(f64, Assignment)> = None;
    for a in assignments {
        let score = assignment_score(&est_values, &a, utterances, session_len, p)?;
        if best.as_ref().map(|(s, _)| score < *s).unwrap_or(true) {
            best = Some((score, a));
        }
    }
    let (_, assignment) = best.ok_or_else(|| GraphPitError::BadInput("no assignments".into()))?;

    // Rebuild the winning score on the tape.
    let targets = render_targets(&assignment, utterances, session_len, estimates.len())?;
    let active = active_channels(&targets);
    let mut loss: Option<Tensor> = None;
    for &q in &active {
        let target = Tensor::from_vec(&[session_len], targets[q].clone())?;
        let term = tsdr(&estimates[q], &target, p)?.neg()?;
        loss = Some(match loss {
            Some(l) => l.add(&term)?,
            None => term,
        });
    }
    let loss = loss
        .ok_or_else(|| GraphPitError::BadInput("no active channels in any target".into()))?
        .scale(1.0 / active.len() as f64)?;
    Ok((loss, assignment))
}

/// Best assignment under plain SDR (the evaluation-time counterpart of the
/// training argmin).
fn best_eval_assignment(
    estimates: &[Vec<f64>],
    utterances: &[Utterance],
    session_len: usize,
    eps: f64,
) -> Result<(Assignment, Vec<Vec<f64>>)> {
    let assignments = enumerate_colorings(utterances, estimates.len())?;
    let mut best: Option<(f64, Assignment, Vec<Vec<f64>>)> = None;
    for a in assignments {
        let targets = render_targets(&a, utterances, session_len, estimates.len())?;
        let active = active_channels(&targets);
        if active.is_empty() {
            continue;
        }
        let mut mean = 0.0;
        for &q in &active {
            mean += sdr_value(&estimates[q], &targets[q], eps)?;
        }
        mean /= active.len() as f64;
        if best.as_ref().map(|(s, _, _)| mean > *s).unwrap_or(true) {
            best = Some((mean, a, targets));
        }
    }
    best.map(|(_, a, t)| (a, t))
        .ok_or_else(|| GraphPitError::BadInput("no active channels in any target".into()))
}

/// Mean SDR improvement over active channels: `SDR(est, target) -
/// SDR(mixture, target)` under the evaluation-best assignment.
pub fn sdr_improvement(
    estimates: &[Vec<f64>],
    utterances: &[Utterance],
    mixture: &[f64],
    p: &TsdrParams,
) -> Result<f64> {
    let session_len = mixture.len();
    for e in estimates {
        if e.len() != session_len {
            return Err(GraphPitError::BadInput(
                "estimates must match mixture length".into(),
            ));
        }
    }
    let (_, targets) = best_eval_assignment(estimates, utterances, session_len, p.eps)?;
    let active = active_channels(&targets);
    let mut total = 0.0;
    for &q in &active {
        total += sdr_value(&estimates[q], &targets[q], p.eps)?
            - sdr_value(mixture, &targets[q], p.eps)?;
    }
    Ok(total / active.len() as f64)
}

/// Windowed SDRi over 2-second windows with majority speech overlap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WindowedSdri {
    Db(f64),
    /// No window qualified — a distinct outcome, not a number.
    NoOverlapWindows,
}

/// SDRi50: split the session into non-overlapping windows of
/// `window_secs`; a window qualifies iff more than `overlap_thresh` of its
/// samples have at least two simultaneously active utterances. Returns the
/// mean per-window SDRi over qualifying windows, under the session-level
/// best assignment.
pub fn sdri50(
    estimates: &[Vec<f64>],
    utterances: &[Utterance],
    mixture: &[f64],
    sample_rate: usize,
    window_secs: f64,
    overlap_thresh: f64,
    p: &TsdrParams,
) -> Result<WindowedSdri> {
    let session_len = mixture.len();
    let win = (window_secs * sample_rate as f64).round() as usize;
    if win == 0 || session_len < win {
        return Err(GraphPitError::BadInput(
            "session shorter than one window".into(),
        ));
    }
    let (_, targets) = best_eval_assignment(estimates, utterances, session_len, p.eps)?;

    // Count of simultaneously active utterances per sample.
    let mut activity = vec![0u32; session_len];
    for u in utterances {
        for slot in &mut activity[u.start..u.end().min(session_len)] {
            *slot += 1;
        }
    }

    let mut total = 0.0;
    let mut qualifying = 0usize;
    for w in 0..session_len / win {
        let (a, b) = (w * win, (w + 1) * win);
        let overlapped = activity[a..b].iter().filter(|&&c| c >= 2).count();
        if (overlapped as f64) / (win as f64) <= overlap_thresh {
            continue;
        }
        let active: Vec<usize> = targets
            .iter()
            .enumerate()
            .filter(|(_, t)| t[a..b].iter().any(|&v| v != 0.0))
            .map(|(q, _)| q)
            .collect();
        if active.is_empty() {
            continue;
        }
        let mut win_sdri = 0.0;
        for &q in &active {
            win_sdri += sdr_value(&estimates[q][a..b], &targets[q][a..b], p.eps)?
                - sdr_value(&mixture[a..b], &targets[q][a..b], p.eps)?;
        }
        total += win_sdri / active.len() as f64;
        qualifying += 1;
    }
    if qualifying == 0 {
        return Ok(WindowedSdri::NoOverlapWindows);
    }
    Ok(WindowedSdri::Db(total / qualifying as f64))
}
