//! Forward and backward passes through an unrolled sequence.

use super::loss::{loss_from_scores, LossKind};
use super::{lstm_step_cached, LstmParams, LstmState, StepCache};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numerics::{axpy, dot_unchecked, Mat};

/// Loss target for one step: the bought article, sampled negatives (all
/// catalog indices into the embedding table) and a loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub positive: usize,
    pub negatives: Vec<usize>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedStep {
    pub input: Vec<f64>,
    pub target: Option<Target>,
}

/// A sequence after shuffling, masking and negative sampling.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PreparedSequence {
    pub steps: Vec<PreparedStep>,
}

impl PreparedSequence {
    pub fn target_count(&self) -> usize {
        self.steps.iter().filter(|s| s.target.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    /// Mean weighted loss over all targets in the batch.
    pub loss: f64,
    pub targets: usize,
    pub grads: LstmParams,
}

struct Unrolled {
    xh: Vec<Vec<f64>>,
    cell_prev: Vec<Vec<f64>>,
    caches: Vec<StepCache>,
    hidden: Vec<Vec<f64>>,
}

fn check_step(params: &LstmParams, step: &PreparedStep, embeddings: &Mat, i: usize) -> Result<()> {
    if step.input.len() != params.input_dim {
        return Err(Error::dim("prepared step input", params.input_dim, step.input.len()));
    }
    if let Some(t) = &step.target {
        if t.negatives.is_empty() {
            return Err(Error::Precondition(format!("step {i} has no negatives")));
        }
        let n = embeddings.rows();
        if t.positive >= n || t.negatives.iter().any(|&a| a >= n) {
            return Err(Error::Precondition(format!("step {i} references an unknown article")));
        }
    }
    Ok(())
}

fn scores_for(target: &Target, d: &[f64], embeddings: &Mat) -> (f64, Vec<f64>) {
    let pos = dot_unchecked(embeddings.row(target.positive), d);
    let negs = target
        .negatives
        .iter()
        .map(|&a| dot_unchecked(embeddings.row(a), d))
        .collect();
    (pos, negs)
}

/// Weighted loss sum, target count and (optionally) the unnormalized
/// gradient for one sequence.
fn run_sequence(
    params: &LstmParams,
    seq: &PreparedSequence,
    embeddings: &Mat,
    kind: LossKind,
    with_grad: bool,
) -> Result<(f64, usize, Option<LstmParams>)> {
    let h = params.hidden;
    let u = params.input_dim;
    let n_steps = seq.steps.len();
    let mut un = Unrolled {
        xh: Vec::with_capacity(n_steps),
        cell_prev: Vec::with_capacity(n_steps),
        caches: Vec::with_capacity(n_steps),
        hidden: Vec::with_capacity(n_steps),
    };
    let mut state = LstmState::zeros(h);
    let mut z = Vec::new();
    let mut loss_sum = 0.0;
    let mut count = 0;
    let mut dd_steps: Vec<Option<Vec<f64>>> = Vec::with_capacity(n_steps);
    for (i, step) in seq.steps.iter().enumerate() {
        check_step(params, step, embeddings, i)?;
        let mut xh = Vec::with_capacity(u + h);
        let (next, cache) = lstm_step_cached(params, &state, &step.input, &mut xh, &mut z);
        let cell_prev = std::mem::replace(&mut state, next).cell;
        let mut dd = None;
        if let Some(t) = &step.target {
            let d = params.project(&state.hidden);
            let (pos, negs) = scores_for(t, &d, embeddings);
            let mut dneg = vec![0.0; negs.len()];
            let (loss, dpos) = loss_from_scores(kind, pos, &negs, with_grad.then_some(&mut dneg[..]));
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("sequence loss at step {}", i + 1),
                });
            }
            loss_sum += t.weight * loss;
            count += 1;
            if with_grad {
                let mut g = vec![0.0; params.dna_dim];
                axpy(t.weight * dpos, embeddings.row(t.positive), &mut g);
                for (&a, &dq) in t.negatives.iter().zip(&dneg) {
                    axpy(t.weight * dq, embeddings.row(a), &mut g);
                }
                dd = Some(g);
            }
        }
        if with_grad {
            un.xh.push(xh);
            un.cell_prev.push(cell_prev);
            un.caches.push(cache);
            un.hidden.push(state.hidden.clone());
            dd_steps.push(dd);
        }
    }
    if !with_grad {
        return Ok((loss_sum, count, None));
    }

    let mut grads = params.zeros_like();
    let mut dh_next = vec![0.0; h];
    let mut dc_next = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    let mut dxh = vec![0.0; u + h];
    for i in (0..n_steps).rev() {
        let mut dh = std::mem::take(&mut dh_next);
        if let Some(dd) = &dd_steps[i] {
            grads.proj.add_outer(1.0, dd, &un.hidden[i]);
            axpy(1.0, dd, &mut grads.proj_bias);
            params.proj.matvec_t_acc(dd, &mut dh);
        }
        let c = &un.caches[i];
        let cp = &un.cell_prev[i];
        let mut dc_prev = vec![0.0; h];
        for j in 0..h {
            let (ig, fg, og, gg, tc) = (c.input[j], c.forget[j], c.output[j], c.candidate[j], c.cell_tanh[j]);
            let d_o = dh[j] * tc;
            let dc = dc_next[j] + dh[j] * og * (1.0 - tc * tc);
            dz[j] = dc * gg * ig * (1.0 - ig);
            dz[h + j] = dc * cp[j] * fg * (1.0 - fg);
            dz[2 * h + j] = d_o * og * (1.0 - og);
            dz[3 * h + j] = dc * ig * (1.0 - gg * gg);
            dc_prev[j] = dc * fg;
        }
        grads.gates.add_outer(1.0, &dz, &un.xh[i]);
        axpy(1.0, &dz, &mut grads.gate_bias);
        dxh.iter_mut().for_each(|v| *v = 0.0);
        params.gates.matvec_t_acc(&dz, &mut dxh);
        dh_next = dxh[u..].to_vec();
        dc_next = dc_prev;
    }
    Ok((loss_sum, count, Some(grads)))
}

/// Mean weighted loss over every target in the batch and its gradient with
/// respect to all LSTM and projection parameters.
pub fn bptt_gradients(
    params: &LstmParams,
    batch: &[PreparedSequence],
    embeddings: &Mat,
    kind: LossKind,
    exec: Execution,
) -> Result<BatchGradients> {
    if embeddings.cols() != params.dna_dim {
        return Err(Error::dim("bptt embeddings", params.dna_dim, embeddings.cols()));
    }
    let parts = exec.map(batch, |s| run_sequence(params, s, embeddings, kind, true));
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let mut targets = 0;
    for p in parts {
        let (l, c, g) = p?;
        loss += l;
        targets += c;
        grads.add_assign(g.as_ref().unwrap());
    }
    if targets > 0 {
        let inv = 1.0 / targets as f64;
        grads.scale(inv);
        loss *= inv;
    }
    Ok(BatchGradients { loss, targets, grads })
}

/// Forward-only version of [`bptt_gradients`]: `(mean loss, target count)`.
pub fn batch_loss(
    params: &LstmParams,
    batch: &[PreparedSequence],
    embeddings: &Mat,
    kind: LossKind,
    exec: Execution,
) -> Result<(f64, usize)> {
    if embeddings.cols() != params.dna_dim {
        return Err(Error::dim("batch_loss embeddings", params.dna_dim, embeddings.cols()));
    }
    let parts = exec.map(batch, |s| run_sequence(params, s, embeddings, kind, false));
    let mut loss = 0.0;
    let mut targets = 0;
    for p in parts {
        let (l, c, _) = p?;
        loss += l;
        targets += c;
    }
    Ok((if targets > 0 { loss / targets as f64 } else { 0.0 }, targets))
}
