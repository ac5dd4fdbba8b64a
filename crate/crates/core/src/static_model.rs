//! Content encoder plus per-customer logistic styles.
//!
//! Each article's content features go through a small fully connected
//! encoder to give its embedding `f`; each customer `k` has a style vector
//! `s_k` and bias `b_k`, and `P(k bought f) = σ(f · s_k + b_k)`. Encoder and
//! styles are fit jointly on the binary purchase matrix. New articles get
//! embeddings from the encoder alone.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use log::{debug, info};

use crate::binio::{ByteReader, ByteWriter};
use crate::catalog::PurchaseMatrix;
use crate::error::{Error, Result};
use crate::evaluation::{order_by_score, CandidateSet, Recommender, TestCustomer};
use crate::exec::Execution;
use crate::numerics::{
    adam_step, all_finite, dot_unchecked, sigmoid, softplus, AdamConfig, AdamState, Mat, Rng, RNG_ID,
};

/// Probabilities are kept inside `[CLAMP, 1 - CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Rectifier,
    Identity,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Rectifier => 0,
            Activation::Identity => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Rectifier),
            1 => Ok(Activation::Identity),
            _ => Err(Error::Checkpoint(format!("unknown activation code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<DenseLayer>,
}

/// Embedding of one article.
#[derive(Debug, Clone, PartialEq)]
pub struct FashionDna(pub Vec<f64>);

impl std::ops::Deref for FashionDna {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticCustomerProfile {
    pub style: Vec<f64>,
    pub bias: f64,
}

impl EncoderParams {
    /// Glorot-uniform weights, zero biases; rectifier on hidden layers and
    /// identity on the output. `dims = [input, hidden.., output]`.
    pub fn init(dims: &[usize], rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "encoder needs at least input and output dims");
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (dims[l], dims[l + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                DenseLayer {
                    weight: Mat::from_fn(fan_out, fan_in, |_, _| rng.uniform_range(-limit, limit)),
                    bias: vec![0.0; fan_out],
                    activation: if l + 1 == n {
                        Activation::Identity
                    } else {
                        Activation::Rectifier
                    },
                }
            })
            .collect();
        EncoderParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.cols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.rows())
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.weight.rows()));
        d
    }

    pub fn validate(&self) -> Result<()> {
        for pair in self.layers.windows(2) {
            if pair[0].weight.rows() != pair[1].weight.cols() {
                return Err(Error::dim(
                    "encoder layer chain",
                    pair[0].weight.rows(),
                    pair[1].weight.cols(),
                ));
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.weight.rows() {
                return Err(Error::dim("encoder bias", l.weight.rows(), l.bias.len()));
            }
        }
        match self.layers.last() {
            Some(l) if l.activation == Activation::Identity => Ok(()),
            Some(_) => Err(Error::Precondition("final encoder layer must be identity".into())),
            None => Err(Error::Precondition("encoder has no layers".into())),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: Mat::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                    activation: l.activation,
                })
                .collect(),
        }
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
    }

    fn unflatten_from(&mut self, src: &[f64]) -> usize {
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.as_mut_slice().copy_from_slice(&src[off..off + n]);
            off += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&src[off..off + n]);
            off += n;
        }
        off
    }
}

/// Forward pass of one feature vector.
pub fn encode_article(enc: &EncoderParams, x: &[f64]) -> Result<FashionDna> {
    if x.len() != enc.input_dim() {
        return Err(Error::dim("encode_article", enc.input_dim(), x.len()));
    }
    let mut a = x.to_vec();
    for l in &enc.layers {
        let mut z = vec![0.0; l.weight.rows()];
        l.weight.matvec_into(&a, &mut z);
        for (zi, bi) in z.iter_mut().zip(&l.bias) {
            *zi += bi;
            if l.activation == Activation::Rectifier && *zi < 0.0 {
                *zi = 0.0;
            }
        }
        a = z;
    }
    Ok(FashionDna(a))
}

/// Embeddings for a list of feature vectors as rows of a matrix.
pub fn encode_all(enc: &EncoderParams, features: &[Vec<f64>], exec: Execution) -> Result<Mat> {
    let rows: Vec<Result<FashionDna>> = exec.map(features, |x| encode_article(enc, x));
    let d = enc.output_dim();
    let mut out = Mat::zeros(features.len(), d);
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&r?);
    }
    Ok(out)
}

pub fn purchase_prob(f: &[f64], prof: &StaticCustomerProfile) -> Result<f64> {
    if f.len() != prof.style.len() {
        return Err(Error::dim("purchase_prob", prof.style.len(), f.len()));
    }
    Ok(sigmoid(dot_unchecked(f, &prof.style) + prof.bias))
}

/// Clamped cross-entropy for logit `z` and label `y`, and its derivative in `z`.
#[inline]
fn clamped_bce(z: f64, y: bool) -> (f64, f64) {
    let cap = -PROB_CLAMP.ln();
    // -ln σ(z) = softplus(-z); -ln(1 - σ(z)) = softplus(z)
    let raw = if y { softplus(-z) } else { softplus(z) };
    if raw >= cap {
        (cap, 0.0)
    } else {
        (raw, sigmoid(z) - if y { 1.0 } else { 0.0 })
    }
}

/// A batch for the static loss: article feature rows plus, per article, the
/// sorted indices of customers who bought it.
pub struct StaticBatch<'a> {
    pub features: Vec<&'a [f64]>,
    pub buyers: Vec<&'a [usize]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticGrads {
    pub encoder: EncoderParams,
    pub styles: Mat,
    pub biases: Vec<f64>,
}

struct ForwardCache {
    /// `acts[0]` is the input batch, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Mat>,
}

fn encoder_forward(enc: &EncoderParams, features: &[&[f64]], exec: Execution) -> Result<ForwardCache> {
    let b = features.len();
    let in_dim = enc.input_dim();
    let mut x = Mat::zeros(b, in_dim);
    for (i, f) in features.iter().enumerate() {
        if f.len() != in_dim {
            return Err(Error::dim("static batch features", in_dim, f.len()));
        }
        x.row_mut(i).copy_from_slice(f);
    }
    let mut acts = vec![x];
    for l in &enc.layers {
        let prev = acts.last().unwrap();
        let mut out = Mat::zeros(b, l.weight.rows());
        let width = l.weight.rows();
        exec.for_each_chunk_mut(out.as_mut_slice(), width.max(1), |r, row| {
            l.weight.matvec_into(prev.row(r), row);
            for (zi, bi) in row.iter_mut().zip(&l.bias) {
                *zi += bi;
                if l.activation == Activation::Rectifier && *zi < 0.0 {
                    *zi = 0.0;
                }
            }
        });
        acts.push(out);
    }
    Ok(ForwardCache { acts })
}

fn check_profiles(d: usize, profiles: &[StaticCustomerProfile]) -> Result<()> {
    for p in profiles {
        if p.style.len() != d {
            return Err(Error::dim("customer style", d, p.style.len()));
        }
    }
    Ok(())
}

/// Per-article cross-entropy rows: `(sum of losses, dL/dz per customer)`.
fn logit_rows(
    dna: &Mat,
    profiles: &[StaticCustomerProfile],
    buyers: &[&[usize]],
    exec: Execution,
    with_grad: bool,
) -> Vec<(f64, Vec<f64>)> {
    exec.map_range(dna.rows(), |b| {
        let f = dna.row(b);
        let bought = buyers[b];
        let mut next = 0;
        let mut loss = 0.0;
        let mut dz = if with_grad {
            vec![0.0; profiles.len()]
        } else {
            Vec::new()
        };
        for (k, p) in profiles.iter().enumerate() {
            let y = next < bought.len() && bought[next] == k;
            if y {
                next += 1;
            }
            let (l, g) = clamped_bce(dot_unchecked(f, &p.style) + p.bias, y);
            loss += l;
            if with_grad {
                dz[k] = g;
            }
        }
        (loss, dz)
    })
}

/// Mean over batch articles of the mean over customers of the clamped
/// binary cross-entropy.
pub fn static_loss(
    enc: &EncoderParams,
    profiles: &[StaticCustomerProfile],
    batch: &StaticBatch<'_>,
    exec: Execution,
) -> Result<f64> {
    check_profiles(enc.output_dim(), profiles)?;
    if batch.features.is_empty() || profiles.is_empty() {
        return Ok(0.0);
    }
    let cache = encoder_forward(enc, &batch.features, exec)?;
    let rows = logit_rows(cache.acts.last().unwrap(), profiles, &batch.buyers, exec, false);
    let total: f64 = rows.iter().map(|r| r.0).sum();
    Ok(total / (batch.features.len() * profiles.len()) as f64)
}

/// Loss and analytic gradient with respect to encoder weights, styles and
/// biases.
pub fn static_loss_grad(
    enc: &EncoderParams,
    profiles: &[StaticCustomerProfile],
    batch: &StaticBatch<'_>,
    exec: Execution,
) -> Result<(f64, StaticGrads)> {
    let d = enc.output_dim();
    check_profiles(d, profiles)?;
    let k_count = profiles.len();
    let mut grads = StaticGrads {
        encoder: enc.zeros_like(),
        styles: Mat::zeros(k_count, d),
        biases: vec![0.0; k_count],
    };
    let b_count = batch.features.len();
    if b_count == 0 || k_count == 0 {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / (b_count * k_count) as f64;
    let cache = encoder_forward(enc, &batch.features, exec)?;
    let dna = cache.acts.last().unwrap();
    let rows = logit_rows(dna, profiles, &batch.buyers, exec, true);
    let loss = rows.iter().map(|r| r.0).sum::<f64>() * scale;

    // dS_k = Σ_b dz[b,k] f_b ; dβ_k = Σ_b dz[b,k]
    let bias_grads: Vec<f64> = exec.map_range(k_count, |k| rows.iter().map(|r| r.1[k]).sum::<f64>() * scale);
    grads.biases = bias_grads;
    exec.for_each_chunk_mut(grads.styles.as_mut_slice(), d.max(1), |k, out| {
        for (b, r) in rows.iter().enumerate() {
            let g = r.1[k] * scale;
            if g != 0.0 {
                crate::numerics::axpy(g, dna.row(b), out);
            }
        }
    });

    // dF_b = Σ_k dz[b,k] s_k
    let mut delta = Mat::zeros(b_count, d);
    exec.for_each_chunk_mut(delta.as_mut_slice(), d.max(1), |b, out| {
        for (k, p) in profiles.iter().enumerate() {
            let g = rows[b].1[k] * scale;
            if g != 0.0 {
                crate::numerics::axpy(g, &p.style, out);
            }
        }
    });

    for (l, layer) in enc.layers.iter().enumerate().rev() {
        let out_act = &cache.acts[l + 1];
        if layer.activation == Activation::Rectifier {
            for (dv, &a) in delta.as_mut_slice().iter_mut().zip(out_act.as_slice()) {
                if a <= 0.0 {
                    *dv = 0.0;
                }
            }
        }
        let input = &cache.acts[l];
        let g = &mut grads.encoder.layers[l];
        let in_dim = layer.weight.cols();
        let delta_ref = &delta;
        exec.for_each_chunk_mut(g.weight.as_mut_slice(), in_dim.max(1), |r, row| {
            for b in 0..b_count {
                let dv = delta_ref.get(b, r);
                if dv != 0.0 {
                    crate::numerics::axpy(dv, input.row(b), row);
                }
            }
        });
        for (r, gb) in g.bias.iter_mut().enumerate() {
            *gb = (0..b_count).map(|b| delta.get(b, r)).sum();
        }
        if l > 0 {
            let mut next = Mat::zeros(b_count, in_dim);
            exec.for_each_chunk_mut(next.as_mut_slice(), in_dim.max(1), |b, row| {
                layer.weight.matvec_t_acc(delta_ref.row(b), row);
            });
            delta = next;
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticConfig {
    pub hidden: Vec<usize>,
    pub dim: usize,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub validation_articles: usize,
    pub style_init_scale: f64,
}

impl Default for StaticConfig {
    fn default() -> Self {
        StaticConfig {
            hidden: vec![256],
            dim: 128,
            adam: AdamConfig::default(),
            batch_size: 128,
            epochs: 10,
            seed: 0,
            validation_articles: 256,
            style_init_scale: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticModel {
    pub encoder: EncoderParams,
    pub customers: Vec<String>,
    pub profiles: Vec<StaticCustomerProfile>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

impl StaticModel {
    /// Initial parameters: Glorot encoder, small Gaussian styles, and biases
    /// at the logit of each customer's purchase rate (clamped to ±6).
    pub fn init(feature_dim: usize, matrix: &PurchaseMatrix, cfg: &StaticConfig, rng: &mut Rng) -> Self {
        let mut dims = vec![feature_dim];
        dims.extend(&cfg.hidden);
        dims.push(cfg.dim);
        let encoder = EncoderParams::init(&dims, rng);
        let n_articles = matrix.articles.len().max(1) as f64;
        let profiles = matrix
            .counts_by_customer()
            .into_iter()
            .map(|count| {
                let rate = count as f64 / n_articles;
                let bias = (rate / (1.0 - rate)).ln().clamp(-6.0, 6.0);
                StaticCustomerProfile {
                    style: (0..cfg.dim).map(|_| rng.normal() * cfg.style_init_scale).collect(),
                    bias,
                }
            })
            .collect();
        StaticModel {
            encoder,
            customers: matrix.customers.clone(),
            profiles,
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.parameter_count() + self.profiles.len() * (self.dim() + 1)
    }

    pub fn profile(&self, customer: &str) -> Option<&StaticCustomerProfile> {
        self.customers
            .iter()
            .position(|c| c == customer)
            .map(|i| &self.profiles[i])
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        self.encoder.flatten_into(&mut out);
        for p in &self.profiles {
            out.extend_from_slice(&p.style);
            out.push(p.bias);
        }
        out
    }

    pub fn unflatten(&mut self, src: &[f64]) {
        let mut off = self.encoder.unflatten_from(src);
        for p in &mut self.profiles {
            let d = p.style.len();
            p.style.copy_from_slice(&src[off..off + d]);
            p.bias = src[off + d];
            off += d + 1;
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::default();
        w.bytes(STATIC_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.str(RNG_ID);
        w.u64(self.dim() as u64);
        let dims = self.encoder.dims();
        w.u64(self.encoder.layers.len() as u64);
        for d in &dims {
            w.u64(*d as u64);
        }
        for l in &self.encoder.layers {
            w.u8(l.activation.code());
        }
        w.u64(self.profiles.len() as u64);
        for l in &self.encoder.layers {
            w.f64s(l.weight.as_slice());
            w.f64s(&l.bias);
        }
        for (id, p) in self.customers.iter().zip(&self.profiles) {
            w.str(id);
            w.f64s(&p.style);
            w.f64(p.bias);
        }
        fs::write(path, w.into_inner())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = ByteReader::new(&bytes);
        r.expect(STATIC_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let _rng_id = r.str()?;
        let d = r.usize()?;
        let n_layers = r.usize()?;
        let dims: Vec<usize> = (0..=n_layers).map(|_| r.usize()).collect::<Result<_>>()?;
        let acts: Vec<Activation> = (0..n_layers)
            .map(|_| r.u8().and_then(Activation::from_code))
            .collect::<Result<_>>()?;
        let k = r.usize()?;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let (rows, cols) = (dims[l + 1], dims[l]);
            layers.push(DenseLayer {
                weight: Mat::new(rows, cols, r.f64s(rows * cols)?)?,
                bias: r.f64s(rows)?,
                activation: acts[l],
            });
        }
        let encoder = EncoderParams { layers };
        encoder.validate()?;
        if encoder.output_dim() != d {
            return Err(Error::Checkpoint("header D disagrees with layer dims".into()));
        }
        let mut customers = Vec::with_capacity(k);
        let mut profiles = Vec::with_capacity(k);
        for _ in 0..k {
            customers.push(r.str()?);
            profiles.push(StaticCustomerProfile {
                style: r.f64s(d)?,
                bias: r.f64()?,
            });
        }
        r.finish()?;
        Ok(StaticModel {
            encoder,
            customers,
            profiles,
        })
    }
}

const STATIC_MAGIC: &[u8; 16] = b"STYLEREC-STATIC\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Fits encoder and customer profiles by mini-batch Adam over articles.
///
/// `features[a]` is the content vector of catalog article `a`; the matrix
/// article axis must be the same catalog order.
pub fn train_static(
    features: &[Vec<f64>],
    matrix: &PurchaseMatrix,
    cfg: &StaticConfig,
    exec: Execution,
) -> Result<(StaticModel, Vec<EpochLog>)> {
    if features.len() != matrix.articles.len() {
        return Err(Error::dim(
            "train_static articles",
            matrix.articles.len(),
            features.len(),
        ));
    }
    let feature_dim = features.first().map_or(0, Vec::len);
    let mut rng = Rng::new(cfg.seed);
    let mut model = StaticModel::init(feature_dim, matrix, cfg, &mut rng);
    let buyers = matrix.buyers_by_article();
    let n = features.len();

    let mut val_order: Vec<usize> = (0..n).collect();
    Rng::derived(cfg.seed, 0x5a17, 0).shuffle(&mut val_order);
    val_order.truncate(cfg.validation_articles.min(n));
    val_order.sort_unstable();
    let batch_of = |idx: &[usize]| StaticBatch {
        features: idx.iter().map(|&a| features[a].as_slice()).collect(),
        buyers: idx.iter().map(|&a| buyers[a].as_slice()).collect(),
    };
    let val_batch = batch_of(&val_order);
    let all: Vec<usize> = (0..n).collect();

    let mean_loss = |model: &StaticModel| -> Result<f64> {
        let mut total = 0.0;
        for chunk in all.chunks(cfg.batch_size.max(1)) {
            total += static_loss(&model.encoder, &model.profiles, &batch_of(chunk), exec)? * chunk.len() as f64;
        }
        Ok(total / n.max(1) as f64)
    };

    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: mean_loss(&model)?,
        validation_loss: static_loss(&model.encoder, &model.profiles, &val_batch, exec)?,
    }];
    info!(
        "static epoch 0: loss {:.6} val {:.6}",
        log[0].train_loss, log[0].validation_loss
    );

    let mut flat = model.flatten();
    let mut adam = AdamState::new(flat.len());
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let (loss, grads) = static_loss_grad(&model.encoder, &model.profiles, &batch_of(chunk), exec)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("static loss at epoch {epoch}, batch {bi}"),
                });
            }
            total += loss * chunk.len() as f64;
            let g = grads.flatten();
            adam_step(&mut flat, &g, &mut adam, &cfg.adam)?;
            if !all_finite(&flat) {
                return Err(Error::NonFinite {
                    context: format!("static parameters after epoch {epoch}, batch {bi}"),
                });
            }
            model.unflatten(&flat);
        }
        let entry = EpochLog {
            epoch,
            train_loss: total / n.max(1) as f64,
            validation_loss: static_loss(&model.encoder, &model.profiles, &val_batch, exec)?,
        };
        debug!("static epoch {epoch}: {entry:?}");
        info!(
            "static epoch {epoch}: loss {:.6} val {:.6}",
            entry.train_loss, entry.validation_loss
        );
        log.push(entry);
    }
    Ok((model, log))
}

impl StaticGrads {
    /// Same layout as [`StaticModel::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.encoder.flatten_into(&mut out);
        for (k, b) in self.biases.iter().enumerate() {
            out.extend_from_slice(self.styles.row(k));
            out.push(*b);
        }
        out
    }
}

/// Candidate positions by descending `f · s`; the bias shifts every score
/// of a customer equally and is left out. Ties by ascending article id.
pub fn static_rank(profile: &StaticCustomerProfile, candidates: &CandidateSet, dna: &Mat) -> Result<Vec<usize>> {
    let scores = crate::evaluation::intent_scores(&profile.style, dna)?;
    Ok(order_by_score(&candidates.ids, &scores))
}

/// Static model wrapped for the backtest. `dna` holds candidate rows in
/// candidate order.
pub struct StaticRecommender<'a> {
    model: &'a StaticModel,
    dna: Mat,
    index: HashMap<&'a str, usize>,
}

impl<'a> StaticRecommender<'a> {
    pub fn new(model: &'a StaticModel, candidate_dna: Mat) -> Self {
        let index = model
            .customers
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        StaticRecommender {
            model,
            dna: candidate_dna,
            index,
        }
    }
}

impl Recommender for StaticRecommender<'_> {
    fn name(&self) -> &str {
        "static"
    }

    fn rank(&self, _: usize, customer: &TestCustomer, candidates: &CandidateSet) -> Result<Vec<usize>> {
        match self.index.get(customer.customer.as_str()) {
            Some(&k) => static_rank(&self.model.profiles[k], candidates, &self.dna),
            None => {
                debug!("customer {} has no static profile; id order", customer.customer);
                Ok(order_by_score(&candidates.ids, &vec![0.0; candidates.len()]))
            }
        }
    }

    fn parameter_count(&self) -> Option<usize> {
        Some(self.model.parameter_count())
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::catalog::{Article, AvailabilityWindow, Catalog};
    use crate::numerics::finite_diff_grad;

    fn random_model(rng: &mut Rng, dims: &[usize], k: usize) -> StaticModel {
        let mut encoder = EncoderParams::init(dims, rng);
        for l in &mut encoder.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.normal() * 0.3);
        }
        let d = *dims.last().unwrap();
        StaticModel {
            encoder,
            customers: (0..k).map(|i| format!("k{i}")).collect(),
            profiles: (0..k)
                .map(|_| StaticCustomerProfile {
                    style: (0..d).map(|_| rng.normal()).collect(),
                    bias: rng.normal(),
                })
                .collect(),
        }
    }

    #[test]
    fn encoder_trivial_cases() {
        let mut enc = EncoderParams::init(&[3, 4, 2], &mut Rng::new(0));
        for l in &mut enc.layers {
            l.weight.as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
        }
        assert_eq!(encode_article(&enc, &[1.0, 2.0, 3.0]).unwrap().0, vec![0.0, 0.0]);
        let id = EncoderParams {
            layers: vec![DenseLayer {
                weight: Mat::identity(3),
                bias: vec![0.0; 3],
                activation: Activation::Identity,
            }],
        };
        assert_eq!(encode_article(&id, &[1.0, -2.0, 3.0]).unwrap().0, vec![1.0, -2.0, 3.0]);
        assert!(encode_article(&id, &[1.0]).is_err());
    }

    #[test]
    fn encoder_matches_composed_oracle() {
        let mut rng = Rng::new(4);
        let mut enc = EncoderParams::init(&[5, 4, 3], &mut rng);
        for l in &mut enc.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.normal());
        }
        let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let l0 = &enc.layers[0];
        let mut h = [0.0; 4];
        for r in 0..4 {
            let mut s = l0.bias[r];
            for c in 0..5 {
                s += l0.weight.get(r, c) * x[c];
            }
            h[r] = if s > 0.0 { s } else { 0.0 };
        }
        let l1 = &enc.layers[1];
        let got = encode_article(&enc, &x).unwrap();
        for r in 0..3 {
            let mut s = l1.bias[r];
            for c in 0..4 {
                s += l1.weight.get(r, c) * h[c];
            }
            assert!((got[r] - s).abs() < 1e-12);
        }
        assert_eq!(encode_article(&enc, &x).unwrap(), got);
    }

    #[test]
    fn purchase_prob_examples() {
        let p = |f: &[f64], s: &[f64], b: f64| {
            purchase_prob(
                f,
                &StaticCustomerProfile {
                    style: s.to_vec(),
                    bias: b,
                },
            )
            .unwrap()
        };
        assert_eq!(p(&[1.0, 0.0], &[0.0, 1.0], 0.0), 0.5);
        assert!(p(&[0.0], &[0.0], 50.0) >= 1.0 - 1e-20);
        assert_eq!(p(&[1.0, 1.0], &[0.5, 0.5], -1.0), 0.5);
        assert!(purchase_prob(
            &[1.0],
            &StaticCustomerProfile {
                style: vec![1.0, 2.0],
                bias: 0.0
            }
        )
        .is_err());
    }

    fn scalar_loss(m: &StaticModel, feats: &[Vec<f64>], bought: &[Vec<usize>]) -> f64 {
        let mut total = 0.0;
        for (a, x) in feats.iter().enumerate() {
            let f = encode_article(&m.encoder, x).unwrap();
            for (k, prof) in m.profiles.iter().enumerate() {
                let p = purchase_prob(&f, prof).unwrap().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                let y = if bought[a].contains(&k) { 1.0 } else { 0.0 };
                total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
        }
        total / (feats.len() * m.profiles.len()) as f64
    }

    #[test]
    fn loss_examples() {
        let mut rng = Rng::new(1);
        let mut m = random_model(&mut rng, &[3, 2], 4);
        for l in &mut m.encoder.layers {
            l.weight.as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
            l.bias.iter_mut().for_each(|w| *w = 0.0);
        }
        m.profiles.iter_mut().for_each(|p| p.bias = 0.0);
        let feats = [vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0]];
        let bought: Vec<Vec<usize>> = vec![vec![0, 2], vec![]];
        let batch = StaticBatch {
            features: feats.iter().map(Vec::as_slice).collect(),
            buyers: bought.iter().map(Vec::as_slice).collect(),
        };
        let l = static_loss(&m.encoder, &m.profiles, &batch, Execution::Sequential).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);

        m.profiles.iter_mut().for_each(|p| p.bias = 40.0);
        let all = vec![vec![0, 1, 2, 3]; 2];
        let batch = StaticBatch {
            features: feats.iter().map(Vec::as_slice).collect(),
            buyers: all.iter().map(Vec::as_slice).collect(),
        };
        assert!(static_loss(&m.encoder, &m.profiles, &batch, Execution::Sequential).unwrap() < 1e-15);

        // far on the wrong side of the clamp: finite
        m.profiles.iter_mut().for_each(|p| p.bias = -1e6);
        let l = static_loss(&m.encoder, &m.profiles, &batch, Execution::Sequential).unwrap();
        assert!((l - (-PROB_CLAMP.ln())).abs() < 1e-9);
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let mut rng = Rng::new(2);
        let m = random_model(&mut rng, &[4, 5, 3], 4);
        let feats: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.normal()).collect()).collect();
        let bought = vec![vec![1usize, 3], vec![0], vec![]];
        let batch = StaticBatch {
            features: feats.iter().map(Vec::as_slice).collect(),
            buyers: bought.iter().map(Vec::as_slice).collect(),
        };
        let got = static_loss(&m.encoder, &m.profiles, &batch, Execution::Parallel).unwrap();
        assert!((got - scalar_loss(&m, &feats, &bought)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences_on_toy() {
        let mut rng = Rng::new(3);
        let base = random_model(&mut rng, &[3, 2, 2], 2);
        let feats: Vec<Vec<f64>> = (0..2).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let bought = vec![vec![0usize], vec![0, 1]];
        let batch = StaticBatch {
            features: feats.iter().map(Vec::as_slice).collect(),
            buyers: bought.iter().map(Vec::as_slice).collect(),
        };
        let (_, g) = static_loss_grad(&base.encoder, &base.profiles, &batch, Execution::Sequential).unwrap();
        let analytic = g.flatten();
        let numeric = finite_diff_grad(
            |x| {
                let mut m = base.clone();
                m.unflatten(x);
                scalar_loss(&m, &feats, &bought)
            },
            &base.flatten(),
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-4, "analytic {a} numeric {n}");
        }
    }

    #[test]
    fn rank_orders_by_style_dot() {
        let art = |id: &str| Article {
            id: id.into(),
            tags: Default::default(),
            log_price: 0.0,
            fabric: Default::default(),
            image_feat: None,
            availability: vec![AvailabilityWindow { start: 0, end: 1 }],
        };
        let cat = Catalog::new(vec![art("a"), art("b"), art("c")]).unwrap();
        let prof = StaticCustomerProfile {
            style: vec![1.0, 0.0],
            bias: 3.0,
        };
        let single = CandidateSet::new(&cat, vec![1]);
        let dna = Mat::new(1, 2, vec![0.2, 0.1]).unwrap();
        assert_eq!(static_rank(&prof, &single, &dna).unwrap(), vec![0]);

        let two = CandidateSet::new(&cat, vec![0, 1]);
        let dna = Mat::new(2, 2, vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        assert_eq!(static_rank(&prof, &two, &dna).unwrap(), vec![1, 0]);
    }

    #[test]
    fn rank_matches_sort_oracle_and_ignores_bias() {
        let mut rng = Rng::new(7);
        let arts: Vec<Article> = (0..50)
            .map(|i| Article {
                id: format!("a{i:02}"),
                tags: Default::default(),
                log_price: 0.0,
                fabric: Default::default(),
                image_feat: None,
                availability: vec![],
            })
            .collect();
        let cat = Catalog::new(arts).unwrap();
        let cands = CandidateSet::new(&cat, (0..50).collect());
        let dna = Mat::from_fn(50, 4, |_, _| rng.normal());
        let mut prof = StaticCustomerProfile {
            style: (0..4).map(|_| rng.normal()).collect(),
            bias: 0.0,
        };
        let got = static_rank(&prof, &cands, &dna).unwrap();
        let mut oracle: Vec<(f64, usize)> = (0..50)
            .map(|i| ((0..4).map(|c| dna.get(i, c) * prof.style[c]).sum::<f64>(), i))
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        assert_eq!(got, oracle.iter().map(|x| x.1).collect::<Vec<_>>());
        prof.bias = 123.0;
        assert_eq!(static_rank(&prof, &cands, &dna).unwrap(), got);
    }

    fn toy_matrix(articles: usize, customers: usize, pairs: &[(usize, usize)]) -> PurchaseMatrix {
        PurchaseMatrix {
            customers: (0..customers).map(|k| format!("c{k}")).collect(),
            articles: (0..articles).map(|a| format!("a{a}")).collect(),
            pairs: pairs.iter().copied().collect(),
        }
    }

    fn toy_features(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|a| vec![a as f64 / n as f64, 1.0, (a % 2) as f64]).collect()
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let m = toy_matrix(6, 2, &[(0, 0), (3, 1)]);
        let cfg = StaticConfig {
            hidden: vec![4],
            dim: 2,
            epochs: 0,
            ..Default::default()
        };
        let (model, log) = train_static(&toy_features(6), &m, &cfg, Execution::Sequential).unwrap();
        let init = StaticModel::init(3, &m, &cfg, &mut Rng::new(cfg.seed));
        assert_eq!(model, init);
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn buyer_of_everything_gains_probability() {
        let n = 12;
        let pairs: Vec<(usize, usize)> = (0..n).map(|a| (a, 0)).chain([(0, 1)]).collect();
        let m = toy_matrix(n, 2, &pairs);
        let cfg = StaticConfig {
            hidden: vec![4],
            dim: 2,
            epochs: 40,
            batch_size: 4,
            adam: AdamConfig {
                lr: 0.02,
                ..Default::default()
            },
            ..Default::default()
        };
        let features = toy_features(n);
        let init = StaticModel::init(3, &m, &cfg, &mut Rng::new(cfg.seed));
        let (model, log) = train_static(&features, &m, &cfg, Execution::Sequential).unwrap();
        let mean_p = |model: &StaticModel| {
            features
                .iter()
                .map(|x| purchase_prob(&encode_article(&model.encoder, x).unwrap(), &model.profiles[0]).unwrap())
                .sum::<f64>()
                / n as f64
        };
        assert!(model.profiles[0].bias > init.profiles[0].bias);
        assert!(mean_p(&model) > mean_p(&init));
        assert!(mean_p(&model) > 0.95);
        assert!(log.last().unwrap().train_loss < log[0].train_loss);
    }

    #[test]
    fn training_is_deterministic_across_modes() {
        let m = toy_matrix(10, 3, &[(0, 0), (1, 0), (5, 1), (7, 2), (9, 2)]);
        let cfg = StaticConfig {
            hidden: vec![5],
            dim: 3,
            epochs: 3,
            batch_size: 3,
            ..Default::default()
        };
        let f = toy_features(10);
        let a = train_static(&f, &m, &cfg, Execution::Sequential).unwrap();
        let b = train_static(&f, &m, &cfg, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = toy_matrix(5, 2, &[(0, 0), (4, 1)]);
        let cfg = StaticConfig {
            hidden: vec![3],
            dim: 2,
            epochs: 1,
            ..Default::default()
        };
        let (model, _) = train_static(&toy_features(5), &m, &cfg, Execution::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ckpt");
        model.save(&p).unwrap();
        assert_eq!(StaticModel::load(&p).unwrap(), model);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, bytes).unwrap();
        assert!(StaticModel::load(&p).is_err());
    }
}
