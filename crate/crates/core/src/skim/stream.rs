//! Tape-free causal inference: a flattened copy of a trained causal model
//! that runs frame by frame in `f32` or `f64`, either over a whole signal
//! at once or as a push-based stream with arbitrary chunk sizes.
//!
//! The per-frame state machine is shared between the two paths, so a
//! streamed run reproduces the batch run exactly; the batch run in `f64`
//! is in turn checked against the autodiff pipeline in the tests.

use crate::layers::{Nonlinearity, LAYER_NORM_EPS};

use super::{MemMode, Result, SkimError, SkimModel};

/// Minimal float abstraction so the same kernels run in `f32` and `f64`.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn max(self, other: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn max(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

fn cast<F: Scalar>(v: &[f64]) -> Vec<F> {
    v.iter().map(|&x| F::from_f64(x)).collect()
}

struct InferMem<F> {
    /// `[4H, H]`
    w_ih: Vec<F>,
    /// `[4H, H]`
    w_hh: Vec<F>,
    /// `[4H]`
    bias: Vec<F>,
    /// `[H]` each
    ln_gain: Vec<F>,
    ln_bias: Vec<F>,
}

struct InferBlock<F> {
    /// `[4H, N]`
    w_ih: Vec<F>,
    /// `[4H, H]`
    w_hh: Vec<F>,
    /// `[4H]`
    bias: Vec<F>,
    /// `[H, N]` / `[N]`, present when H != N.
    proj_w: Option<Vec<F>>,
    proj_b: Option<Vec<F>>,
    /// `[N]` each
    ln_gain: Vec<F>,
    ln_bias: Vec<F>,
    mem_c: Option<InferMem<F>>,
    mem_h: Option<InferMem<F>>,
}

/// Flattened causal model for streaming inference. Built once from a
/// trained [`SkimModel`]; holds no autodiff state.
pub struct InferModel<F> {
    pub kernel_size: usize,
    pub stride: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub segment_len: usize,
    pub output_channels: usize,
    mem_mode: MemMode,
    relu: bool,
    /// `[kernel, N]`
    enc_w: Vec<F>,
    /// `[N]`
    enc_b: Vec<F>,
    blocks: Vec<InferBlock<F>>,
    /// `[N, Q*N]` / `[Q*N]`
    head_w: Vec<F>,
    head_b: Vec<F>,
    /// `[N, kernel]`
    dec_w: Vec<F>,
}

fn mem_from<F: Scalar>(p: &super::MemPath) -> InferMem<F> {
    InferMem {
        w_ih: cast(&p.lstm.fwd.w_ih.to_vec()),
        w_hh: cast(&p.lstm.fwd.w_hh.to_vec()),
        bias: cast(&p.lstm.fwd.bias.to_vec()),
        ln_gain: cast(&p.ln.gain.to_vec()),
        ln_bias: cast(&p.ln.bias.to_vec()),
    }
}

impl<F: Scalar> InferModel<F> {
    pub fn from_model(model: &SkimModel) -> Result<InferModel<F>> {
        if !model.cfg.causal {
            return Err(SkimError::StreamingNeedsCausal);
        }
        let blocks = model
            .blocks
            .iter()
            .map(|b| InferBlock {
                w_ih: cast(&b.seg.fwd.w_ih.to_vec()),
                w_hh: cast(&b.seg.fwd.w_hh.to_vec()),
                bias: cast(&b.seg.fwd.bias.to_vec()),
                proj_w: b.proj.as_ref().map(|p| cast(&p.weight.to_vec())),
                proj_b: b.proj.as_ref().map(|p| cast(&p.bias.to_vec())),
                ln_gain: cast(&b.ln.gain.to_vec()),
                ln_bias: cast(&b.ln.bias.to_vec()),
                mem_c: b.mem_c.as_ref().map(mem_from),
                mem_h: b.mem_h.as_ref().map(mem_from),
            })
            .collect();
        Ok(InferModel {
            kernel_size: model.cfg.encoder.kernel_size,
            stride: model.cfg.encoder.stride,
            feature_dim: model.cfg.feature_dim,
            hidden_dim: model.cfg.hidden_dim,
            segment_len: model.cfg.segment_len,
            output_channels: model.cfg.output_channels,
            mem_mode: model.cfg.mem_mode,
            relu: model.cfg.encoder.nonlinearity == Nonlinearity::Relu,
            enc_w: cast(&model.encoder.weight.to_vec()),
            enc_b: cast(&model.encoder.bias.to_vec()),
            blocks,
            head_w: cast(&model.head.weight.to_vec()),
            head_b: cast(&model.head.bias.to_vec()),
            dec_w: cast(&model.decoder.weight.to_vec()),
        })
    }

    /// Batch inference over a whole mixture; output lengths match input.
    pub fn separate(&self, mixture: &[F]) -> Result<Vec<Vec<F>>> {
        if mixture.len() < self.kernel_size {
            return Err(SkimError::BadConfig(
                "input shorter than one frame".into(),
            ));
        }
        let frames = (mixture.len() - self.kernel_size) / self.stride + 1;
        let mut engine = Engine::new(self);
        let mut out = vec![vec![F::ZERO; mixture.len()]; self.output_channels];
        for t in 0..frames {
            let start = t * self.stride;
            let contribs = engine.process_frame(&mixture[start..start + self.kernel_size]);
            for (q, contrib) in contribs.iter().enumerate() {
                for (j, &v) in contrib.iter().enumerate() {
                    out[q][start + j] = out[q][start + j] + v;
                }
            }
        }
        Ok(out)
    }

    pub fn stream(&self) -> Stream<'_, F> {
        Stream {
            engine: Engine::new(self),
            buf: Vec::new(),
            ola: vec![vec![F::ZERO; self.kernel_size]; self.output_channels],
            pushed: 0,
            emitted: 0,
            finalized: false,
        }
    }
}

struct State<F> {
    c: Vec<F>,
    h: Vec<F>,
}

impl<F: Scalar> State<F> {
    fn zeros(dim: usize) -> State<F> {
        State {
            c: vec![F::ZERO; dim],
            h: vec![F::ZERO; dim],
        }
    }
}

fn sigmoid<F: Scalar>(z: F) -> F {
    F::ONE / (F::ONE + (F::ZERO - z).exp())
}

/// One LSTM cell update over flat `[4H, in]` weights; returns the output
/// (the new hidden state) implicitly in `state.h`.
fn lstm_step<F: Scalar>(
    x: &[F],
    state: &mut State<F>,
    w_ih: &[F],
    w_hh: &[F],
    bias: &[F],
    hidden: usize,
) {
    let in_dim = x.len();
    let mut c_new = vec![F::ZERO; hidden];
    let mut h_new = vec![F::ZERO; hidden];
    for j in 0..hidden {
        let gate = |g: usize| -> F {
            let row = g * hidden + j;
            let mut acc = bias[row];
            for (i, &xi) in x.iter().enumerate() {
                acc = acc + w_ih[row * in_dim + i] * xi;
            }
            for (i, &hi) in state.h.iter().enumerate() {
                acc = acc + w_hh[row * hidden + i] * hi;
            }
            acc
        };
        let i = sigmoid(gate(0));
        let f = sigmoid(gate(1));
        let g = gate(2).tanh();
        let o = sigmoid(gate(3));
        c_new[j] = f * state.c[j] + i * g;
        h_new[j] = o * c_new[j].tanh();
    }
    state.c = c_new;
    state.h = h_new;
}

/// Frame-local layer norm with affine parameters, writing `gain * xhat +
/// bias + residual` into `out`.
fn layer_norm_residual<F: Scalar>(v: &[F], gain: &[F], bias: &[F], residual: &[F], out: &mut [F]) {
    let n = F::from_f64(v.len() as f64);
    let mut mu = F::ZERO;
    for &x in v {
        mu = mu + x;
    }
    mu = mu / n;
    let mut var = F::ZERO;
    for &x in v {
        var = var + (x - mu) * (x - mu);
    }
    var = var / n;
    let inv = F::ONE / (var + F::from_f64(LAYER_NORM_EPS)).sqrt();
    for i in 0..v.len() {
        out[i] = gain[i] * ((v[i] - mu) * inv) + bias[i] + residual[i];
    }
}

/// Per-frame state machine shared by batch and streamed inference.
struct Engine<'m, F> {
    m: &'m InferModel<F>,
    frame_idx: usize,
    /// Current Seg-LSTM (c, h) per block.
    seg: Vec<State<F>>,
    /// Initial (c, h) each block resets to at the next segment start.
    latched: Vec<State<F>>,
    /// Running Mem-LSTM states over the segment axis, per block.
    mem_c: Vec<Option<State<F>>>,
    mem_h: Vec<Option<State<F>>>,
}

impl<'m, F: Scalar> Engine<'m, F> {
    fn new(m: &'m InferModel<F>) -> Engine<'m, F> {
        let l = m.blocks.len();
        let h = m.hidden_dim;
        Engine {
            m,
            frame_idx: 0,
            seg: (0..l).map(|_| State::zeros(h)).collect(),
            latched: (0..l).map(|_| State::zeros(h)).collect(),
            mem_c: m
                .blocks
                .iter()
                .map(|b| b.mem_c.as_ref().map(|_| State::zeros(h)))
                .collect(),
            mem_h: m
                .blocks
                .iter()
                .map(|b| b.mem_h.as_ref().map(|_| State::zeros(h)))
                .collect(),
        }
    }

    /// Advance one Mem-LSTM branch by a segment step and produce the
    /// residual-normalized next-segment initial state.
    fn mem_branch(
        input: &[F],
        mem: &InferMem<F>,
        state: &mut State<F>,
        hidden: usize,
    ) -> Vec<F> {
        lstm_step(input, state, &mem.w_ih, &mem.w_hh, &mem.bias, hidden);
        let mut out = vec![F::ZERO; hidden];
        layer_norm_residual(&state.h, &mem.ln_gain, &mem.ln_bias, input, &mut out);
        out
    }

    /// Segment boundary: fold the finished segment's final states through
    /// the Mem-LSTMs, latch initial states for every block, reset.
    fn segment_boundary(&mut self) {
        let h = self.m.hidden_dim;
        let last = self.m.blocks.len() - 1;
        for (l, block) in self.m.blocks.iter().enumerate() {
            if l == last {
                break; // last block's states feed nothing
            }
            let final_c = self.seg[l].c.clone();
            let final_h = self.seg[l].h.clone();
            let (c_hat, h_hat) = match self.m.mem_mode {
                MemMode::HiddenCell => (
                    Self::mem_branch(
                        &final_c,
                        block.mem_c.as_ref().expect("hc has cell branch"),
                        self.mem_c[l].as_mut().expect("hc has cell state"),
                        h,
                    ),
                    Self::mem_branch(
                        &final_h,
                        block.mem_h.as_ref().expect("hc has hidden branch"),
                        self.mem_h[l].as_mut().expect("hc has hidden state"),
                        h,
                    ),
                ),
                MemMode::HiddenOnly => (
                    vec![F::ZERO; h],
                    Self::mem_branch(
                        &final_h,
                        block.mem_h.as_ref().expect("h has hidden branch"),
                        self.mem_h[l].as_mut().expect("h has hidden state"),
                        h,
                    ),
                ),
                MemMode::CellOnly => (
                    Self::mem_branch(
                        &final_c,
                        block.mem_c.as_ref().expect("c has cell branch"),
                        self.mem_c[l].as_mut().expect("c has cell state"),
                        h,
                    ),
                    vec![F::ZERO; h],
                ),
                MemMode::None => (vec![F::ZERO; h], vec![F::ZERO; h]),
                MemMode::Identity => (final_c, final_h),
            };
            self.latched[l + 1] = State { c: c_hat, h: h_hat };
        }
        // Block 1 always restarts from zero; latched[0] never changes.
        for l in 0..self.m.blocks.len() {
            self.seg[l] = State {
                c: self.latched[l].c.clone(),
                h: self.latched[l].h.clone(),
            };
        }
    }

    /// Run one encoder frame through the separator; returns per-channel
    /// decoder kernel contributions for overlap-add.
    fn process_frame(&mut self, frame: &[F]) -> Vec<Vec<F>> {
        let m = self.m;
        let n = m.feature_dim;
        if self.frame_idx % m.segment_len == 0 && self.frame_idx > 0 {
            self.segment_boundary();
        }
        self.frame_idx += 1;

        // Encoder: one frame -> one feature vector.
        let mut x = vec![F::ZERO; n];
        for i in 0..n {
            let mut acc = m.enc_b[i];
            for (j, &s) in frame.iter().enumerate() {
                acc = acc + m.enc_w[j * n + i] * s;
            }
            x[i] = if m.relu { acc.max(F::ZERO) } else { acc };
        }

        for (l, block) in m.blocks.iter().enumerate() {
            lstm_step(
                &x,
                &mut self.seg[l],
                &block.w_ih,
                &block.w_hh,
                &block.bias,
                m.hidden_dim,
            );
            let v: Vec<F> = match (&block.proj_w, &block.proj_b) {
                (Some(w), Some(b)) => (0..n)
                    .map(|o| {
                        let mut acc = b[o];
                        for (i, &hi) in self.seg[l].h.iter().enumerate() {
                            acc = acc + w[i * n + o] * hi;
                        }
                        acc
                    })
                    .collect(),
                _ => self.seg[l].h.clone(),
            };
            let mut out = vec![F::ZERO; n];
            layer_norm_residual(&v, &block.ln_gain, &block.ln_bias, &x, &mut out);
            x = out;
        }

        // Head + decoder taps, per channel.
        let q_total = m.output_channels;
        let width = q_total * n;
        let mut emb = m.head_b.clone();
        for (k, &xk) in x.iter().enumerate() {
            for (col, e) in emb.iter_mut().enumerate() {
                *e = *e + m.head_w[k * width + col] * xk;
            }
        }
        let mut contribs = vec![vec![F::ZERO; m.kernel_size]; q_total];
        for q in 0..q_total {
            for i in 0..n {
                let e = emb[q * n + i];
                for j in 0..m.kernel_size {
                    contribs[q][j] = contribs[q][j] + e * m.dec_w[i * m.kernel_size + j];
                }
            }
        }
        contribs
    }
}

/// Push-based streaming session over an [`InferModel`].
pub struct Stream<'m, F> {
    engine: Engine<'m, F>,
    buf: Vec<F>,
    /// Per-channel overlap-add accumulator of `kernel_size` samples.
    ola: Vec<Vec<F>>,
    pushed: usize,
    emitted: usize,
    finalized: bool,
}

impl<F: Scalar> Stream<'_, F> {
    /// Feed a chunk of any size; returns the separated samples that became
    /// final (per channel, equal lengths).
    pub fn push(&mut self, samples: &[F]) -> Result<Vec<Vec<F>>> {
        if self.finalized {
            return Err(SkimError::StreamFinalized);
        }
        let m = self.engine.m;
        self.pushed += samples.len();
        self.buf.extend_from_slice(samples);
        let mut out = vec![Vec::new(); m.output_channels];
        while self.buf.len() >= m.kernel_size {
            let contribs = self.engine.process_frame(&self.buf[..m.kernel_size]);
            for q in 0..m.output_channels {
                for (j, &v) in contribs[q].iter().enumerate() {
                    self.ola[q][j] = self.ola[q][j] + v;
                }
                out[q].extend_from_slice(&self.ola[q][..m.stride]);
                self.ola[q].copy_within(m.stride.., 0);
                for slot in &mut self.ola[q][m.kernel_size - m.stride..] {
                    *slot = F::ZERO;
                }
            }
            self.buf.drain(..m.stride);
            self.emitted += m.stride;
        }
        Ok(out)
    }

    /// Flush the tail so total output length equals total input length.
    pub fn finalize(mut self) -> Result<Vec<Vec<F>>> {
        if self.finalized {
            return Err(SkimError::StreamFinalized);
        }
        self.finalized = true;
        let m = self.engine.m;
        let remaining = self.pushed - self.emitted;
        let tail = m.kernel_size - m.stride;
        let mut out = Vec::with_capacity(m.output_channels);
        for q in 0..m.output_channels {
            let mut ch = Vec::with_capacity(remaining);
            ch.extend_from_slice(&self.ola[q][..tail.min(remaining)]);
            while ch.len() < remaining {
                ch.push(F::ZERO);
            }
            out.push(ch);
        }
        Ok(out)
    }

    /// Samples per channel the stream will still emit at finalize time.
    pub fn pending(&self) -> usize {
        self.pushed - self.emitted
    }
}
