//! Backtest protocol: per-customer rankings over the in-store candidate set,
//! ranks of purchased articles, the cumulative rank curve and its AUC.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Display;
use std::fs;
use std::hash::Hash;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::catalog::{Catalog, PurchaseSequence, Timestamp};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::numerics::{dot, dot_unchecked, Mat};

/// Articles being ranked, in catalog order, with their embeddings when a
/// content model is involved.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub articles: Vec<usize>,
    pub ids: Vec<String>,
    position: HashMap<usize, usize>,
}

impl CandidateSet {
    pub fn new(catalog: &Catalog, articles: Vec<usize>) -> Self {
        let ids = articles.iter().map(|&a| catalog.id(a).to_string()).collect();
        let position = articles.iter().enumerate().map(|(p, &a)| (a, p)).collect();
        CandidateSet {
            articles,
            ids,
            position,
        }
    }

    /// Everything in store at some moment of `[start, end)`.
    pub fn in_window(catalog: &Catalog, start: Timestamp, end: Timestamp) -> Self {
        CandidateSet::new(catalog, catalog.available_during(start, end))
    }

    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    pub fn position(&self, article: usize) -> Option<usize> {
        self.position.get(&article).copied()
    }

    /// Candidate rows gathered from a catalog-indexed embedding table.
    pub fn gather(&self, table: &Mat) -> Mat {
        let d = table.cols();
        let mut out = Mat::zeros(self.len(), d);
        for (p, &a) in self.articles.iter().enumerate() {
            out.row_mut(p).copy_from_slice(table.row(a));
        }
        out
    }
}

/// Candidate positions sorted by descending score, ties by ascending id.
pub fn order_by_score<S: AsRef<str>>(ids: &[S], scores: &[f64]) -> Vec<usize> {
    debug_assert_eq!(ids.len(), scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| ids[a].as_ref().cmp(ids[b].as_ref()))
    });
    order
}

/// `f_ν · d` for every candidate row. No link function, no bias.
pub fn intent_scores(d: &[f64], candidate_dna: &Mat) -> Result<Vec<f64>> {
    if candidate_dna.cols() != d.len() {
        return Err(Error::dim("intent_scores", candidate_dna.cols(), d.len()));
    }
    Ok((0..candidate_dna.rows())
        .map(|r| dot_unchecked(candidate_dna.row(r), d))
        .collect())
}

/// 1-based positions of `purchased` inside `ranking`.
pub fn rank_purchases<T>(ranking: &[T], purchased: &[T]) -> Result<Vec<usize>>
where
    T: Eq + Hash + Display,
{
    let pos: HashMap<&T, usize> = ranking.iter().enumerate().map(|(i, a)| (a, i + 1)).collect();
    purchased
        .iter()
        .map(|a| {
            pos.get(a)
                .copied()
                .ok_or_else(|| Error::Protocol(format!("purchased article {a} is not a candidate")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `cumulative[j]` = number of ranks `<= j`, for `j = 0..=z`.
    pub cumulative: Vec<u64>,
    pub auc: f64,
}

impl RocCurve {
    pub fn z(&self) -> usize {
        self.cumulative.len() - 1
    }

    pub fn total(&self) -> u64 {
        *self.cumulative.last().unwrap()
    }
}

/// Cumulative rank counts and the discrete AUC `mean((z - r) / (z - 1))`.
///
/// With a single candidate every rank is 1 and the AUC is taken as 1.
pub fn cumulative_rank(ranks: &[usize], z: usize) -> Result<RocCurve> {
    if ranks.is_empty() {
        return Err(Error::UndefinedAuc);
    }
    let mut hist = vec![0u64; z + 1];
    for &r in ranks {
        if r == 0 || r > z {
            return Err(Error::Precondition(format!("rank {r} outside [1, {z}]")));
        }
        hist[r] += 1;
    }
    let mut cumulative = vec![0u64; z + 1];
    for j in 1..=z {
        cumulative[j] = cumulative[j - 1] + hist[j];
    }
    let auc = if z == 1 {
        1.0
    } else {
        let num: u64 = ranks.iter().map(|&r| (z - r) as u64).sum();
        num as f64 / (ranks.len() as f64 * (z - 1) as f64)
    };
    Ok(RocCurve { cumulative, auc })
}

/// Smallest `j` with `R_j / R_z >= q`.
pub fn rank_quantile(curve: &RocCurve, q: f64) -> usize {
    let total = curve.total() as f64;
    curve
        .cumulative
        .iter()
        .position(|&c| c as f64 >= q * total)
        .unwrap_or(curve.z())
}

pub const REPORTED_QUANTILES: [f64; 3] = [0.1, 0.5, 0.9];

/// One customer to evaluate: their history before the window and the
/// distinct articles they bought inside it.
#[derive(Debug, Clone)]
pub struct TestCustomer {
    pub customer: String,
    pub history: PurchaseSequence,
    pub first_sale: Timestamp,
    /// Catalog indices, sorted, distinct.
    pub purchased: Vec<usize>,
}

/// Joins the pre-window history to the in-window purchases, one entry per
/// test customer in customer-id order.
pub fn test_customers(train: &[PurchaseSequence], test: &[PurchaseSequence]) -> Vec<TestCustomer> {
    let history: HashMap<&str, &PurchaseSequence> = train.iter().map(|s| (s.customer.as_str(), s)).collect();
    let mut out: Vec<TestCustomer> = test
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let purchased: BTreeSet<usize> = s.events.iter().map(|e| e.article).collect();
            TestCustomer {
                customer: s.customer.clone(),
                history: history.get(s.customer.as_str()).map_or_else(
                    || PurchaseSequence {
                        customer: s.customer.clone(),
                        events: Vec::new(),
                    },
                    |h| (*h).clone(),
                ),
                first_sale: s.events.iter().map(|e| e.t).min().unwrap(),
                purchased: purchased.into_iter().collect(),
            }
        })
        .collect();
    out.sort_by(|a, b| a.customer.cmp(&b.customer));
    out
}

/// Anything that can order the candidate set for one test customer.
pub trait Recommender: Sync {
    fn name(&self) -> &str;

    /// Candidate positions, best first. `index` is the customer's position in
    /// the evaluation order and may seed per-customer randomness.
    fn rank(&self, index: usize, customer: &TestCustomer, candidates: &CandidateSet) -> Result<Vec<usize>>;

    /// `None` for non-parametric models.
    fn parameter_count(&self) -> Option<usize>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedPurchase {
    pub customer: String,
    pub article: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankTable {
    pub z: usize,
    pub entries: Vec<RankedPurchase>,
}

impl RankTable {
    pub fn ranks(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.rank).collect()
    }

    /// Ranks of entries whose (customer, article) is in `subset`.
    pub fn ranks_in(&self, subset: &BTreeSet<(String, usize)>) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| subset.contains(&(e.customer.clone(), e.article)))
            .map(|e| e.rank)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub model: String,
    pub table: RankTable,
    pub curve: RocCurve,
    pub quantiles: [usize; 3],
    pub parameter_count: Option<usize>,
}

pub fn evaluate_model(
    model: &dyn Recommender,
    customers: &[TestCustomer],
    candidates: &CandidateSet,
    exec: Execution,
) -> Result<Evaluation> {
    let per_customer: Vec<Result<Vec<RankedPurchase>>> = exec.map_range(customers.len(), |i| {
        let c = &customers[i];
        let order = model.rank(i, c, candidates)?;
        if order.len() != candidates.len() {
            return Err(Error::Protocol(format!(
                "{} ranked {} of {} candidates",
                model.name(),
                order.len(),
                candidates.len()
            )));
        }
        let ranking: Vec<usize> = order.iter().map(|&p| candidates.articles[p]).collect();
        let ranks = rank_purchases(&ranking, &c.purchased).map_err(|_| {
            let missing = c
                .purchased
                .iter()
                .find(|a| candidates.position(**a).is_none())
                .copied()
                .unwrap_or(usize::MAX);
            Error::Protocol(format!(
                "customer {} bought article #{missing} which is not in the candidate set",
                c.customer
            ))
        })?;
        Ok(c.purchased
            .iter()
            .zip(ranks)
            .map(|(&article, rank)| RankedPurchase {
                customer: c.customer.clone(),
                article,
                rank,
            })
            .collect())
    });
    let mut entries = Vec::new();
    for r in per_customer {
        entries.extend(r?);
    }
    let table = RankTable {
        z: candidates.len(),
        entries,
    };
    let curve = cumulative_rank(&table.ranks(), table.z)?;
    let quantiles = REPORTED_QUANTILES.map(|q| rank_quantile(&curve, q));
    Ok(Evaluation {
        model: model.name().to_string(),
        table,
        curve,
        quantiles,
        parameter_count: model.parameter_count(),
    })
}

/// Test purchases `(customer, article)` whose article never sold in training.
pub fn cold_start_subset(test: &[PurchaseSequence], train: &[PurchaseSequence]) -> BTreeSet<(String, usize)> {
    let sold: BTreeSet<usize> = train.iter().flat_map(|s| s.events.iter().map(|e| e.article)).collect();
    test.iter()
        .flat_map(|s| {
            s.events
                .iter()
                .filter(|e| !sold.contains(&e.article))
                .map(move |e| (s.customer.clone(), e.article))
        })
        .collect()
}

/// Ranks candidates by a fixed score per catalog article; shared by every
/// customer.
pub struct SharedRanking {
    pub name: String,
    scores: BTreeMap<usize, f64>,
}

impl SharedRanking {
    pub fn new(name: impl Into<String>, scores: BTreeMap<usize, f64>) -> Self {
        SharedRanking {
            name: name.into(),
            scores,
        }
    }
}

impl Recommender for SharedRanking {
    fn name(&self) -> &str {
        &self.name
    }

    fn rank(&self, _: usize, _: &TestCustomer, candidates: &CandidateSet) -> Result<Vec<usize>> {
        // Candidates missing from the table rank after all scored ones.
        let scores: Vec<f64> = candidates
            .articles
            .iter()
            .map(|a| self.scores.get(a).copied().unwrap_or(f64::NEG_INFINITY))
            .collect();
        Ok(order_by_score(&candidates.ids, &scores))
    }

    fn parameter_count(&self) -> Option<usize> {
        None
    }
}

pub fn write_roc(path: &Path, eval: &Evaluation, seed: u64) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let curve = &eval.curve;
    writeln!(
        out,
        "# model={} z={} auc={} seed={}",
        eval.model,
        curve.z(),
        curve.auc,
        seed
    )?;
    writeln!(out, "j\tR_j\tR_j_over_R_z")?;
    let total = curve.total() as f64;
    for (j, &c) in curve.cumulative.iter().enumerate() {
        writeln!(out, "{j}\t{c}\t{}", c as f64 / total)?;
    }
    out.flush()?;
    Ok(())
}

/// One line of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub auc: f64,
    pub quantiles: [usize; 3],
    pub parameter_count: Option<usize>,
    pub cold_start_auc: Option<f64>,
    pub cold_start_purchases: usize,
}

impl MetricsRow {
    pub fn new(eval: &Evaluation, cold: &BTreeSet<(String, usize)>) -> Self {
        let cold_ranks = eval.table.ranks_in(cold);
        let cold_start_auc = cumulative_rank(&cold_ranks, eval.table.z).ok().map(|c| c.auc);
        MetricsRow {
            model: eval.model.clone(),
            auc: eval.curve.auc,
            quantiles: eval.quantiles,
            parameter_count: eval.parameter_count,
            cold_start_auc,
            cold_start_purchases: cold_ranks.len(),
        }
    }
}

const METRICS_HEADER: &str = "model\tauc\tq10\tq50\tq90\tparams\tcold_start_auc\tcold_start_purchases";

pub fn write_metrics(path: &Path, rows: &[MetricsRow], z: usize, purchases: usize, seed: u64) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "# z={z} purchases={purchases} seed={seed}")?;
    writeln!(out, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{}\t{:.6}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.model,
            r.auc,
            r.quantiles[0],
            r.quantiles[1],
            r.quantiles[2],
            r.parameter_count.map_or("-".to_string(), |p| p.to_string()),
            r.cold_start_auc.map_or("-".to_string(), |a| format!("{a:.6}")),
            r.cold_start_purchases
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            if line != METRICS_HEADER {
                return Err(perr(i + 1, "unexpected metrics header".into()));
            }
            header_seen = true;
            continue;
        }
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != 8 {
            return Err(perr(i + 1, format!("expected 8 columns, got {}", c.len())));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|e| perr(i + 1, format!("`{s}`: {e}"))) };
        let int = |s: &str| -> Result<usize> { s.parse().map_err(|e| perr(i + 1, format!("`{s}`: {e}"))) };
        rows.push(MetricsRow {
            model: c[0].to_string(),
            auc: num(c[1])?,
            quantiles: [int(c[2])?, int(c[3])?, int(c[4])?],
            parameter_count: if c[5] == "-" { None } else { Some(int(c[5])?) },
            cold_start_auc: if c[6] == "-" { None } else { Some(num(c[6])?) },
            cold_start_purchases: int(c[7])?,
        });
    }
    Ok(rows)
}

/// Checks one dot product per candidate; used by tests and debug paths.
pub fn intent_scores_checked(d: &[f64], dna: &[Vec<f64>]) -> Result<Vec<f64>> {
    dna.iter().map(|f| dot(f, d)).collect()
}
