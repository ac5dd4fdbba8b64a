//! Batch preparation (order shuffling, target masking, negative sampling)
//! and the training loop.

use log::{info, warn};

use super::bptt::{batch_loss, bptt_gradients, PreparedSequence, PreparedStep, Target};
use super::loss::LossKind;
use super::{step_input, DynamicModel, LstmParams, TimeEncoding};
use crate::catalog::{Catalog, PurchaseSequence, Timestamp};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numerics::{adam_step, all_finite, clip_global_norm, AdamConfig, AdamState, Mat, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfigDyn {
    pub loss: LossKind,
    /// Negatives per target, `n >= 1`.
    pub negatives: usize,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Sequences per gradient step.
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub hidden: usize,
    pub time_encoding: TimeEncoding,
    pub validation_sequences: usize,
}

impl Default for TrainConfigDyn {
    fn default() -> Self {
        TrainConfigDyn {
            loss: LossKind::Rank,
            negatives: 20,
            adam: AdamConfig::default(),
            epochs: 10,
            batch_size: 32,
            clip_norm: 5.0,
            seed: 0,
            hidden: 256,
            time_encoding: TimeEncoding::Cyclic,
            validation_sequences: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Rank loss on a fixed prepared slice, whatever the training loss.
    pub validation_loss: f64,
}

/// `true` where a step is a loss target: the first item of each group of
/// equal timestamps.
pub fn order_mask(timestamps: &[Timestamp]) -> Result<Vec<bool>> {
    let mut mask = Vec::with_capacity(timestamps.len());
    for (i, &t) in timestamps.iter().enumerate() {
        if i > 0 && t < timestamps[i - 1] {
            return Err(Error::Precondition(format!(
                "timestamps not sorted at position {i}: {} > {t}",
                timestamps[i - 1]
            )));
        }
        mask.push(i == 0 || t != timestamps[i - 1]);
    }
    Ok(mask)
}

/// Permutes events inside each equal-timestamp group; groups stay in place.
pub fn shuffle_orders(seq: &PurchaseSequence, rng: &mut Rng) -> PurchaseSequence {
    let mut events = seq.events.clone();
    let mut start = 0;
    while start < events.len() {
        let t = events[start].t;
        let mut end = start + 1;
        while end < events.len() && events[end].t == t {
            end += 1;
        }
        if end - start > 1 {
            rng.shuffle(&mut events[start..end]);
        }
        start = end;
    }
    PurchaseSequence {
        customer: seq.customer.clone(),
        events,
    }
}

/// `n` distinct articles drawn uniformly from those in store at `t` and not
/// in `exclude`.
///
/// Draws by rejection from the whole catalog (which is uniform over the
/// pool and without replacement) and falls back to enumerating the pool
/// when the pool is sparse.
pub fn sample_negatives(
    catalog: &Catalog,
    t: Timestamp,
    exclude: &[usize],
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    sample_from(catalog.len(), |a| catalog.article(a).available_at(t), exclude, n, rng)
}

fn sample_from(
    universe: usize,
    eligible: impl Fn(usize) -> bool,
    exclude: &[usize],
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if universe == 0 {
        return Err(Error::Sampling {
            needed: n,
            available: 0,
        });
    }
    let mut chosen = Vec::with_capacity(n);
    let budget = 64 * n + 256;
    for _ in 0..budget {
        let a = rng.index(universe);
        if eligible(a) && !exclude.contains(&a) && !chosen.contains(&a) {
            chosen.push(a);
            if chosen.len() == n {
                return Ok(chosen);
            }
        }
    }
    let mut pool: Vec<usize> = (0..universe)
        .filter(|&a| eligible(a) && !exclude.contains(&a))
        .collect();
    if pool.len() < n {
        return Err(Error::Sampling {
            needed: n,
            available: pool.len(),
        });
    }
    for i in 0..n {
        let j = i + rng.index(pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(n);
    Ok(pool)
}

/// Shuffles orders, masks all but the first item of each order, draws
/// negatives for every target and lays out the step inputs.
pub fn prepare_sequence(
    seq: &PurchaseSequence,
    catalog: &Catalog,
    embeddings: &Mat,
    time_encoding: TimeEncoding,
    negatives: usize,
    rng: &mut Rng,
) -> Result<PreparedSequence> {
    if negatives == 0 {
        return Err(Error::Precondition("negative count must be at least 1".into()));
    }
    let seq = shuffle_orders(seq, rng);
    let times = seq.timestamps();
    let mask = order_mask(&times)?;
    let d = embeddings.cols();
    let mut steps = Vec::with_capacity(seq.len());
    let mut group_start = 0;
    for (i, e) in seq.events.iter().enumerate() {
        if mask[i] {
            group_start = i;
        }
        let prev = (i > 0).then(|| {
            let p = seq.events[i - 1];
            (embeddings.row(p.article), p.t)
        });
        let input = step_input(time_encoding, prev, e.t, d)?;
        let target = if mask[i] {
            let mut group_end = i + 1;
            while group_end < seq.len() && seq.events[group_end].t == e.t {
                group_end += 1;
            }
            let exclude: Vec<usize> = seq.events[group_start..group_end].iter().map(|x| x.article).collect();
            let negs = match sample_negatives(catalog, e.t, &exclude, negatives, rng) {
                Ok(v) => v,
                Err(Error::Sampling { available, .. }) => {
                    warn!(
                        "only {available} in-store negatives at t={} for {}; sampling from the whole catalog",
                        e.t, seq.customer
                    );
                    sample_from(catalog.len(), |_| true, &exclude, negatives, rng)?
                }
                Err(other) => return Err(other),
            };
            Some(Target {
                positive: e.article,
                negatives: negs,
                weight: 1.0,
            })
        } else {
            None
        };
        steps.push(PreparedStep { input, target });
    }
    Ok(PreparedSequence { steps })
}

const VALIDATION_STREAM: u64 = 0x7a11d;

/// Trains the recurrent model on frozen article embeddings (`embeddings`
/// rows are catalog indices).
///
/// Every epoch reshuffles orders and redraws negatives, each sequence with
/// its own generator derived from `(seed, epoch, sequence)`, so results do
/// not depend on thread scheduling.
pub fn train_dynamic(
    catalog: &Catalog,
    sequences: &[PurchaseSequence],
    embeddings: &Mat,
    cfg: &TrainConfigDyn,
    exec: Execution,
) -> Result<(DynamicModel, Vec<EpochLog>)> {
    if cfg.negatives == 0 {
        return Err(Error::Precondition("negative count must be at least 1".into()));
    }
    if embeddings.rows() != catalog.len() {
        return Err(Error::dim("train_dynamic embeddings", catalog.len(), embeddings.rows()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut params = LstmParams::init(cfg.time_encoding, cfg.hidden, embeddings.cols(), &mut rng);

    let mut usable: Vec<usize> = (0..sequences.len()).filter(|&i| !sequences[i].is_empty()).collect();
    // Similar lengths share a batch.
    usable.sort_by_key(|&i| (sequences[i].len(), i));
    let mut batches: Vec<Vec<usize>> = usable.chunks(cfg.batch_size.max(1)).map(<[usize]>::to_vec).collect();

    let prepare = |idx: &[usize], stream: u64| -> Result<Vec<PreparedSequence>> {
        exec.map(idx, |&si| {
            let mut r = Rng::derived(cfg.seed, stream, si as u64);
            prepare_sequence(
                &sequences[si],
                catalog,
                embeddings,
                cfg.time_encoding,
                cfg.negatives,
                &mut r,
            )
        })
        .into_iter()
        .collect()
    };

    let mut val_idx = usable.clone();
    val_idx.sort_unstable();
    Rng::derived(cfg.seed, VALIDATION_STREAM, u64::MAX).shuffle(&mut val_idx);
    val_idx.truncate(cfg.validation_sequences);
    val_idx.sort_unstable();
    let validation = prepare(&val_idx, VALIDATION_STREAM)?;
    let val_loss = |p: &LstmParams| batch_loss(p, &validation, embeddings, LossKind::Rank, exec).map(|r| r.0);

    let mut initial = 0.0;
    let mut initial_targets = 0;
    for b in &batches {
        let prepared = prepare(b, 0)?;
        let (l, c) = batch_loss(&params, &prepared, embeddings, cfg.loss, exec)?;
        initial += l * c as f64;
        initial_targets += c;
    }
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: initial / initial_targets.max(1) as f64,
        validation_loss: val_loss(&params)?,
    }];
    info!(
        "dynamic epoch 0: loss {:.6} val {:.6}",
        log[0].train_loss, log[0].validation_loss
    );

    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len());
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut batches);
        let mut total = 0.0;
        let mut targets = 0;
        for b in &batches {
            let prepared = prepare(b, epoch as u64)?;
            let bg = bptt_gradients(&params, &prepared, embeddings, cfg.loss, exec)?;
            if !bg.loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("dynamic loss at epoch {epoch}"),
                });
            }
            total += bg.loss * bg.targets as f64;
            targets += bg.targets;
            let mut g = bg.grads.flatten();
            clip_global_norm(&mut g, cfg.clip_norm);
            adam_step(&mut flat, &g, &mut adam, &cfg.adam)?;
            if !all_finite(&flat) {
                return Err(Error::NonFinite {
                    context: format!("dynamic parameters at epoch {epoch}"),
                });
            }
            params.unflatten(&flat);
        }
        let entry = EpochLog {
            epoch,
            train_loss: total / targets.max(1) as f64,
            validation_loss: val_loss(&params)?,
        };
        info!(
            "dynamic epoch {epoch}: loss {:.6} val {:.6}",
            entry.train_loss, entry.validation_loss
        );
        log.push(entry);
    }
    Ok((
        DynamicModel {
            params,
            loss: cfg.loss,
            negatives: cfg.negatives,
            seed: cfg.seed,
        },
        log,
    ))
}
