//! Recurrent customer-style model.
//!
//! A single-layer LSTM reads a customer's purchases in time order. Step `i`
//! sees the previous purchase (its time and embedding) and the time of the
//! current purchase, and a linear projection of the hidden state gives the
//! style `d_i`, which lives in the same space as article embeddings. The
//! first step has no predecessor: its previous-purchase block and the
//! initial memory are all zeros.

mod bptt;
mod loss;
mod train;

pub use bptt::{batch_loss, bptt_gradients, BatchGradients, PreparedSequence, PreparedStep, Target};
pub use loss::{sequence_loss, LossKind};
pub use train::{
    order_mask, prepare_sequence, sample_negatives, shuffle_orders, train_dynamic, EpochLog, TrainConfigDyn,
};

use std::fs;
use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::catalog::{PurchaseSequence, Timestamp, MINUTES_PER_YEAR};
use crate::error::{Error, Result};
use crate::evaluation::{intent_scores, order_by_score, CandidateSet, Recommender, TestCustomer};
use crate::numerics::{sigmoid, Mat, Rng};

/// How a timestamp is turned into network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimeEncoding {
    /// `[years since epoch, sin(2π·year fraction), cos(2π·year fraction)]`
    #[default]
    Cyclic,
    /// The raw minute count as a single float. Kept for ablations.
    Raw,
}

impl TimeEncoding {
    pub fn width(self) -> usize {
        match self {
            TimeEncoding::Cyclic => 3,
            TimeEncoding::Raw => 1,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            TimeEncoding::Cyclic => 0,
            TimeEncoding::Raw => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(TimeEncoding::Cyclic),
            1 => Ok(TimeEncoding::Raw),
            _ => Err(Error::Checkpoint(format!("unknown time encoding {c}"))),
        }
    }

    pub fn encode_into(self, t: Timestamp, out: &mut [f64]) {
        match self {
            TimeEncoding::Cyclic => {
                let year = MINUTES_PER_YEAR as f64;
                let frac = t.rem_euclid(MINUTES_PER_YEAR) as f64 / year;
                let phase = 2.0 * std::f64::consts::PI * frac;
                out[0] = t as f64 / year;
                out[1] = phase.sin();
                out[2] = phase.cos();
            }
            TimeEncoding::Raw => out[0] = t as f64,
        }
    }
}

pub fn encode_time(t: Timestamp) -> Vec<f64> {
    let mut v = vec![0.0; 3];
    TimeEncoding::Cyclic.encode_into(t, &mut v);
    v
}

/// `[time(prev) | dna(prev) | time(now)]`; with no previous purchase the
/// first two blocks are zero.
pub fn step_input(
    enc: TimeEncoding,
    prev: Option<(&[f64], Timestamp)>,
    t_now: Timestamp,
    dna_dim: usize,
) -> Result<Vec<f64>> {
    let w = enc.width();
    let mut x = vec![0.0; 2 * w + dna_dim];
    if let Some((f, t_prev)) = prev {
        if f.len() != dna_dim {
            return Err(Error::dim("step_input embedding", dna_dim, f.len()));
        }
        enc.encode_into(t_prev, &mut x[..w]);
        x[w..w + dna_dim].copy_from_slice(f);
    }
    enc.encode_into(t_now, &mut x[w + dna_dim..]);
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub time_encoding: TimeEncoding,
    pub input_dim: usize,
    pub hidden: usize,
    pub dna_dim: usize,
    /// Rows `[input; forget; output; candidate]` blocks of `hidden` each;
    /// columns `[x | h_prev]`.
    pub gates: Mat,
    pub gate_bias: Vec<f64>,
    pub proj: Mat,
    pub proj_bias: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(time_encoding: TimeEncoding, hidden: usize, dna_dim: usize) -> Self {
        let input_dim = 2 * time_encoding.width() + dna_dim;
        LstmParams {
            time_encoding,
            input_dim,
            hidden,
            dna_dim,
            gates: Mat::zeros(4 * hidden, input_dim + hidden),
            gate_bias: vec![0.0; 4 * hidden],
            proj: Mat::zeros(dna_dim, hidden),
            proj_bias: vec![0.0; dna_dim],
        }
    }

    /// Gate weights uniform in ±sqrt(1/(U+H)), forget bias 1, projection
    /// uniform in ±sqrt(1/H), other biases 0.
    pub fn init(time_encoding: TimeEncoding, hidden: usize, dna_dim: usize, rng: &mut Rng) -> Self {
        let mut p = LstmParams::zeros(time_encoding, hidden, dna_dim);
        let lim = (1.0 / (p.input_dim + hidden) as f64).sqrt();
        p.gates
            .as_mut_slice()
            .iter_mut()
            .for_each(|w| *w = rng.uniform_range(-lim, lim));
        p.gate_bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        let lim = (1.0 / hidden.max(1) as f64).sqrt();
        p.proj
            .as_mut_slice()
            .iter_mut()
            .for_each(|w| *w = rng.uniform_range(-lim, lim));
        p
    }

    pub fn zeros_like(&self) -> Self {
        LstmParams::zeros(self.time_encoding, self.hidden, self.dna_dim)
    }

    pub fn parameter_count(&self) -> usize {
        self.gates.len() + self.gate_bias.len() + self.proj.len() + self.proj_bias.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        out.extend_from_slice(self.gates.as_slice());
        out.extend_from_slice(&self.gate_bias);
        out.extend_from_slice(self.proj.as_slice());
        out.extend_from_slice(&self.proj_bias);
        out
    }

    pub fn unflatten(&mut self, src: &[f64]) {
        assert_eq!(src.len(), self.parameter_count());
        let mut off = 0;
        for dst in [
            self.gates.as_mut_slice(),
            &mut self.gate_bias[..],
            self.proj.as_mut_slice(),
            &mut self.proj_bias[..],
        ] {
            let n = dst.len();
            dst.copy_from_slice(&src[off..off + n]);
            off += n;
        }
    }

    pub(crate) fn add_assign(&mut self, other: &LstmParams) {
        for (a, b) in self.gates.as_mut_slice().iter_mut().zip(other.gates.as_slice()) {
            *a += b;
        }
        for (a, b) in self.gate_bias.iter_mut().zip(&other.gate_bias) {
            *a += b;
        }
        for (a, b) in self.proj.as_mut_slice().iter_mut().zip(other.proj.as_slice()) {
            *a += b;
        }
        for (a, b) in self.proj_bias.iter_mut().zip(&other.proj_bias) {
            *a += b;
        }
    }

    pub(crate) fn scale(&mut self, s: f64) {
        self.gates.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        self.gate_bias.iter_mut().for_each(|v| *v *= s);
        self.proj.as_mut_slice().iter_mut().for_each(|v| *v *= s);
        self.proj_bias.iter_mut().for_each(|v| *v *= s);
    }

    pub fn validate(&self) -> Result<()> {
        let (u, h, d) = (self.input_dim, self.hidden, self.dna_dim);
        if u != 2 * self.time_encoding.width() + d {
            return Err(Error::dim("lstm input width", 2 * self.time_encoding.width() + d, u));
        }
        if self.gates.rows() != 4 * h || self.gates.cols() != u + h {
            return Err(Error::dim("lstm gate matrix", 4 * h * (u + h), self.gates.len()));
        }
        if self.gate_bias.len() != 4 * h {
            return Err(Error::dim("lstm gate bias", 4 * h, self.gate_bias.len()));
        }
        if self.proj.rows() != d || self.proj.cols() != h || self.proj_bias.len() != d {
            return Err(Error::dim("lstm projection", d * h, self.proj.len()));
        }
        Ok(())
    }

    /// Projection `W_p h + b_p`.
    pub fn project(&self, hidden: &[f64]) -> Vec<f64> {
        let mut d = self.proj_bias.clone();
        for (r, dr) in d.iter_mut().enumerate() {
            *dr += crate::numerics::dot_unchecked(self.proj.row(r), hidden);
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub cell: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl LstmState {
    pub fn zeros(h: usize) -> Self {
        LstmState {
            cell: vec![0.0; h],
            hidden: vec![0.0; h],
        }
    }
}

/// Gate activations of one step, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    pub input: Vec<f64>,
    pub forget: Vec<f64>,
    pub output: Vec<f64>,
    pub candidate: Vec<f64>,
    pub cell_tanh: Vec<f64>,
}

pub(crate) fn lstm_step_cached(
    params: &LstmParams,
    state: &LstmState,
    x: &[f64],
    xh: &mut Vec<f64>,
    z: &mut Vec<f64>,
) -> (LstmState, StepCache) {
    let h = params.hidden;
    xh.clear();
    xh.extend_from_slice(x);
    xh.extend_from_slice(&state.hidden);
    z.resize(4 * h, 0.0);
    params.gates.matvec_into(xh, z);
    let mut cache = StepCache {
        input: vec![0.0; h],
        forget: vec![0.0; h],
        output: vec![0.0; h],
        candidate: vec![0.0; h],
        cell_tanh: vec![0.0; h],
    };
    let mut next = LstmState::zeros(h);
    let b = &params.gate_bias;
    for j in 0..h {
        let i = sigmoid(z[j] + b[j]);
        let f = sigmoid(z[h + j] + b[h + j]);
        let o = sigmoid(z[2 * h + j] + b[2 * h + j]);
        let g = (z[3 * h + j] + b[3 * h + j]).tanh();
        let c = f * state.cell[j] + i * g;
        let tc = c.tanh();
        cache.input[j] = i;
        cache.forget[j] = f;
        cache.output[j] = o;
        cache.candidate[j] = g;
        cache.cell_tanh[j] = tc;
        next.cell[j] = c;
        next.hidden[j] = o * tc;
    }
    (next, cache)
}

/// One LSTM cell update. Returns the new state and its hidden vector.
pub fn lstm_step(params: &LstmParams, state: &LstmState, x: &[f64]) -> Result<(LstmState, Vec<f64>)> {
    if x.len() != params.input_dim {
        return Err(Error::dim("lstm_step input", params.input_dim, x.len()));
    }
    if state.cell.len() != params.hidden || state.hidden.len() != params.hidden {
        return Err(Error::dim("lstm_step state", params.hidden, state.cell.len()));
    }
    let (next, _) = lstm_step_cached(params, state, x, &mut Vec::new(), &mut Vec::new());
    let h = next.hidden.clone();
    Ok((next, h))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicStyle {
    pub d: Vec<f64>,
    /// 1-based step index that produced this style.
    pub at_step: usize,
    pub customer: String,
}

/// Runs a purchase sequence from the zero state and returns the style after
/// every step. With `eval_time`, one more step is run whose previous
/// purchase is the last event and whose current time is `eval_time`; its
/// style is the customer's style at `eval_time`.
pub fn style_sequence(
    params: &LstmParams,
    seq: &PurchaseSequence,
    embeddings: &Mat,
    eval_time: Option<Timestamp>,
) -> Result<Vec<DynamicStyle>> {
    if embeddings.cols() != params.dna_dim {
        return Err(Error::dim(
            "style_sequence embeddings",
            params.dna_dim,
            embeddings.cols(),
        ));
    }
    if let (Some(t), Some(last)) = (eval_time, seq.events.last()) {
        if t < last.t {
            return Err(Error::Precondition(format!(
                "evaluation time {t} precedes last purchase at {}",
                last.t
            )));
        }
    }
    let mut times: Vec<Timestamp> = seq.events.iter().map(|e| e.t).collect();
    times.extend(eval_time);
    let mut state = LstmState::zeros(params.hidden);
    let (mut xh, mut z) = (Vec::new(), Vec::new());
    let mut out = Vec::with_capacity(times.len());
    for (i, &t_now) in times.iter().enumerate() {
        let prev = if i == 0 {
            None
        } else {
            let e = seq.events[i - 1];
            Some((embeddings.row(e.article), e.t))
        };
        let x = step_input(params.time_encoding, prev, t_now, params.dna_dim)?;
        let (next, _) = lstm_step_cached(params, &state, &x, &mut xh, &mut z);
        state = next;
        out.push(DynamicStyle {
            d: params.project(&state.hidden),
            at_step: i + 1,
            customer: seq.customer.clone(),
        });
    }
    Ok(out)
}

const DYNAMIC_MAGIC: &[u8; 16] = b"STYLEREC-LSTM\0\0\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Trained recurrent model plus the training settings recorded in its
/// checkpoint header.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicModel {
    pub params: LstmParams,
    pub loss: LossKind,
    pub negatives: usize,
    pub seed: u64,
}

impl DynamicModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let p = &self.params;
        let mut w = ByteWriter::default();
        w.bytes(DYNAMIC_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u64(p.input_dim as u64);
        w.u64(p.hidden as u64);
        w.u64(p.dna_dim as u64);
        w.u8(p.time_encoding.code());
        w.u8(self.loss.code());
        w.u64(self.negatives as u64);
        w.u64(self.seed);
        w.f64s(p.gates.as_slice());
        w.f64s(&p.gate_bias);
        w.f64s(p.proj.as_slice());
        w.f64s(&p.proj_bias);
        fs::write(path, w.into_inner())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = ByteReader::new(&bytes);
        r.expect(DYNAMIC_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let u = r.usize()?;
        let h = r.usize()?;
        let d = r.usize()?;
        let time_encoding = TimeEncoding::from_code(r.u8()?)?;
        let loss = LossKind::from_code(r.u8()?)?;
        let negatives = r.usize()?;
        let seed = r.u64()?;
        let mut params = LstmParams::zeros(time_encoding, h, d);
        if params.input_dim != u {
            return Err(Error::Checkpoint(format!(
                "input width {u} inconsistent with D={d} and time encoding"
            )));
        }
        let flat = r.f64s(params.parameter_count())?;
        r.finish()?;
        params.unflatten(&flat);
        Ok(DynamicModel {
            params,
            loss,
            negatives,
            seed,
        })
    }
}

/// Ranks candidates by `f · d(t)` where `d(t)` is the style after feeding
/// the customer's whole history (orders shuffled with a per-customer seed)
/// and then the first in-window sale time.
pub struct DynamicRecommender<'a> {
    params: &'a LstmParams,
    embeddings: &'a Mat,
    candidate_dna: Mat,
    seed: u64,
}

impl<'a> DynamicRecommender<'a> {
    pub fn new(params: &'a LstmParams, embeddings: &'a Mat, candidates: &CandidateSet, seed: u64) -> Self {
        DynamicRecommender {
            params,
            embeddings,
            candidate_dna: candidates.gather(embeddings),
            seed,
        }
    }
}

/// Stream id for evaluation-time order shuffling.
const EVAL_STREAM: u64 = 0xe7a1;

impl Recommender for DynamicRecommender<'_> {
    fn name(&self) -> &str {
        "dynamic"
    }

    fn rank(&self, index: usize, customer: &TestCustomer, candidates: &CandidateSet) -> Result<Vec<usize>> {
        let mut rng = Rng::derived(self.seed, EVAL_STREAM, index as u64);
        let history = shuffle_orders(&customer.history, &mut rng);
        if history.is_empty() {
            log::debug!("customer {} has no history; time-only style", customer.customer);
        }
        let styles = style_sequence(self.params, &history, self.embeddings, Some(customer.first_sale))?;
        let d = &styles.last().expect("eval step always present").d;
        let scores = intent_scores(d, &self.candidate_dna)?;
        Ok(order_by_score(&candidates.ids, &scores))
    }

    fn parameter_count(&self) -> Option<usize> {
        Some(self.params.parameter_count())
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests;
