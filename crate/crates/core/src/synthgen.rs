//! Seeded synthetic market with known ground truth.
//!
//! Articles are drawn around tag-cluster archetypes, so their content
//! features carry information about their latent taste vector, seasonal
//! phase and popularity. Customers have latent styles that drift between
//! shopping trips. At each trip an order of one or more articles is drawn
//! without replacement from the in-store articles, with probabilities
//! proportional to `exp(utility)`, using the Gumbel top-k trick. All items
//! in an order share one timestamp.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::debug;

use crate::catalog::{
    split_sequences, Article, AvailabilityWindow, Catalog, PurchaseSequence, Schema, SequenceEvent, Timestamp,
    MINUTES_PER_DAY, MINUTES_PER_YEAR,
};
use crate::error::{Error, Result};
use crate::evaluation::{order_by_score, CandidateSet, Recommender, TestCustomer};
use crate::numerics::{dot_unchecked, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub customers: usize,
    pub articles: usize,
    pub tags: usize,
    pub fibers: usize,
    pub latent_dim: usize,
    pub archetypes: usize,
    pub horizon_days: i64,
    pub test_days: i64,
    /// Style autocorrelation decays as `exp(-drift_rate * years)`.
    pub drift_rate: f64,
    pub season_amplitude: f64,
    pub taste_scale: f64,
    pub popularity_sd: f64,
    pub mean_order_size: f64,
    pub orders_per_year: f64,
    /// Exact trip count per customer instead of a Poisson process.
    pub orders_per_customer: Option<usize>,
    pub mean_lifetime_days: f64,
    /// Probability that an article's shelf life has a stock-out gap.
    pub churn_rate: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            customers: 2000,
            articles: 5000,
            tags: 60,
            fibers: 8,
            latent_dim: 8,
            archetypes: 20,
            horizon_days: 3 * 365,
            test_days: 8,
            drift_rate: 0.5,
            season_amplitude: 1.0,
            taste_scale: 2.0,
            popularity_sd: 0.6,
            mean_order_size: 1.8,
            orders_per_year: 12.0,
            orders_per_customer: None,
            mean_lifetime_days: 150.0,
            churn_rate: 0.3,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Generation(m.to_string()));
        if self.customers == 0
            || self.articles == 0
            || self.tags == 0
            || self.fibers == 0
            || self.latent_dim == 0
            || self.archetypes == 0
        {
            return bad("all counts must be at least 1");
        }
        if self.horizon_days <= self.test_days || self.test_days <= 0 {
            return bad("horizon must be longer than the positive test window");
        }
        if self.drift_rate < 0.0 || !self.drift_rate.is_finite() {
            return bad("drift rate must be >= 0");
        }
        if self.mean_order_size.is_nan() || self.mean_order_size < 1.0 {
            return bad("mean order size must be >= 1");
        }
        if self.mean_order_size > self.articles as f64 {
            return bad("mean order size exceeds the number of articles");
        }
        if !positive(self.orders_per_year) && self.orders_per_customer.is_none() {
            return bad("orders per year must be > 0");
        }
        if !positive(self.mean_lifetime_days) || !(0.0..=1.0).contains(&self.churn_rate) {
            return bad("lifetime must be > 0 and churn rate in [0, 1]");
        }
        Ok(())
    }

    pub fn horizon_end(&self) -> Timestamp {
        self.horizon_days * MINUTES_PER_DAY
    }

    /// `[start, end)` of the held-out test window.
    pub fn test_window(&self) -> (Timestamp, Timestamp) {
        let end = self.horizon_end();
        (end - self.test_days * MINUTES_PER_DAY, end)
    }
}

/// False for NaN.
fn positive(x: f64) -> bool {
    x > 0.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArticleTruth {
    pub latent: Vec<f64>,
    pub popularity: f64,
    pub season_amplitude: f64,
    /// Peak of the seasonal term as a fraction of the year.
    pub season_phase: f64,
}

/// Latent factors behind the generated sales. `articles` follows catalog
/// order; customer styles are already multiplied by the taste scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub articles: Vec<ArticleTruth>,
    /// Style in force from each timestamp until the next entry.
    pub styles: BTreeMap<String, Vec<(Timestamp, Vec<f64>)>>,
}

impl GroundTruth {
    pub fn style_at(&self, customer: &str, t: Timestamp) -> Option<&[f64]> {
        let path = self.styles.get(customer)?;
        let i = path.partition_point(|(from, _)| *from <= t);
        Some(&path[i.saturating_sub(1)].1)
    }

    pub fn utility(&self, article: usize, style: &[f64], t: Timestamp) -> f64 {
        let a = &self.articles[article];
        let frac = t.rem_euclid(MINUTES_PER_YEAR) as f64 / MINUTES_PER_YEAR as f64;
        dot_unchecked(style, &a.latent)
            + a.popularity
            + a.season_amplitude * (2.0 * std::f64::consts::PI * (frac - a.season_phase)).cos()
    }

    pub fn save(&self, path: &Path, catalog: &Catalog) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{TRUTH_MAGIC}")?;
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        for (i, a) in self.articles.iter().enumerate() {
            writeln!(
                out,
                "article\t{}\t{}\t{}\t{}\t{}",
                catalog.id(i),
                a.popularity,
                a.season_amplitude,
                a.season_phase,
                join(&a.latent)
            )?;
        }
        for (c, path) in &self.styles {
            for (t, s) in path {
                writeln!(out, "style\t{c}\t{t}\t{}", join(s))?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, catalog: &Catalog) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l) != Some(TRUTH_MAGIC) {
            return Err(perr(1, format!("expected `{TRUTH_MAGIC}`")));
        }
        let floats = |s: &str, line: usize| -> Result<Vec<f64>> {
            s.split(',')
                .map(|v| v.parse::<f64>().map_err(|e| perr(line, format!("`{v}`: {e}"))))
                .collect()
        };
        let num = |s: &str, line: usize| -> Result<f64> { s.parse().map_err(|e| perr(line, format!("`{s}`: {e}"))) };
        let mut articles: Vec<Option<ArticleTruth>> = vec![None; catalog.len()];
        let mut styles: BTreeMap<String, Vec<(Timestamp, Vec<f64>)>> = BTreeMap::new();
        for (i, line) in lines {
            let ln = i + 1;
            let c: Vec<&str> = line.split('\t').collect();
            match c.as_slice() {
                ["article", id, pop, amp, phase, latent] => {
                    let idx = catalog.index_of(id).ok_or_else(|| Error::UnknownId {
                        kind: "article",
                        id: id.to_string(),
                    })?;
                    articles[idx] = Some(ArticleTruth {
                        latent: floats(latent, ln)?,
                        popularity: num(pop, ln)?,
                        season_amplitude: num(amp, ln)?,
                        season_phase: num(phase, ln)?,
                    });
                }
                ["style", customer, t, s] => {
                    let t: Timestamp = t.parse().map_err(|e| perr(ln, format!("`{t}`: {e}")))?;
                    styles
                        .entry(customer.to_string())
                        .or_default()
                        .push((t, floats(s, ln)?));
                }
                _ => return Err(perr(ln, "unrecognized record".into())),
            }
        }
        let articles = articles
            .into_iter()
            .enumerate()
            .map(|(i, a)| {
                a.ok_or_else(|| Error::Invariant {
                    id: catalog.id(i).to_string(),
                    message: "no ground truth for article".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for path in styles.values_mut() {
            path.sort_by_key(|(t, _)| *t);
        }
        Ok(GroundTruth { articles, styles })
    }
}

const TRUTH_MAGIC: &str = "# stylerec ground truth v1";

#[derive(Debug, Clone)]
pub struct Market {
    pub schema: Schema,
    pub catalog: Catalog,
    /// All sales, grouped by customer.
    pub sales: Vec<PurchaseSequence>,
    pub train: Vec<PurchaseSequence>,
    pub test: Vec<PurchaseSequence>,
    pub truth: GroundTruth,
    pub test_window: (Timestamp, Timestamp),
}

pub const CATALOG_FILE: &str = "catalog.tsv";
pub const SALES_FILE: &str = "sales.tsv";
pub const SCHEMA_FILE: &str = "schema.txt";
pub const TRUTH_FILE: &str = "truth.tsv";

impl Market {
    /// Writes catalog, sales, schema and ground truth into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.catalog.save(&dir.join(CATALOG_FILE))?;
        crate::catalog::save_sales(&dir.join(SALES_FILE), &self.sales, &self.catalog)?;
        self.schema.save(&dir.join(SCHEMA_FILE))?;
        self.truth.save(&dir.join(TRUTH_FILE), &self.catalog)?;
        Ok(())
    }
}

struct Archetype {
    center: Vec<f64>,
    phase: f64,
    seasonal: bool,
    popularity: f64,
    price: f64,
    fibers: Vec<f64>,
    garment: bool,
    signature: [usize; 2],
}

fn normal_vec(rng: &mut Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| rng.normal() * sd).collect()
}

pub fn generate_market(cfg: &GenConfig) -> Result<Market> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let l = cfg.latent_dim;
    let schema = Schema {
        tags: (0..cfg.tags).map(|i| format!("tag{i:03}")).collect(),
        fibers: (0..cfg.fibers).map(|i| format!("fiber{i:02}")).collect(),
        image_dim: 0,
    };

    let archetypes: Vec<Archetype> = (0..cfg.archetypes)
        .map(|c| Archetype {
            center: normal_vec(&mut rng, l, 1.0),
            phase: rng.uniform(),
            seasonal: rng.bernoulli(0.7),
            popularity: rng.normal(),
            price: 3.0 + rng.normal() * 0.5,
            fibers: (0..cfg.fibers).map(|_| (rng.normal() * 1.5).exp()).collect(),
            garment: rng.bernoulli(0.8),
            signature: [(2 * c) % cfg.tags, (2 * c + 1) % cfg.tags],
        })
        .collect();
    let tag_dirs: Vec<Vec<f64>> = (0..cfg.tags)
        .map(|_| normal_vec(&mut rng, l, 1.0 / (l as f64).sqrt()))
        .collect();

    let end = cfg.horizon_end();
    let mut articles = Vec::with_capacity(cfg.articles);
    let mut truths = Vec::with_capacity(cfg.articles);
    for i in 0..cfg.articles {
        let arch = &archetypes[rng.index(cfg.archetypes)];
        let latent: Vec<f64> = arch.center.iter().map(|c| 0.8 * c + 0.6 * rng.normal()).collect();
        let mut tags = BTreeSet::new();
        for (j, dir) in tag_dirs.iter().enumerate() {
            let p = if arch.signature.contains(&j) {
                0.9
            } else {
                crate::numerics::sigmoid(2.5 * dot_unchecked(dir, &latent) - 3.0)
            };
            if rng.bernoulli(p) {
                tags.insert(schema.tags[j].clone());
            }
        }
        let mut fabric = BTreeMap::new();
        if arch.garment {
            let raw: Vec<f64> = arch.fibers.iter().map(|w| w * (rng.normal() * 0.3).exp()).collect();
            let total: f64 = raw.iter().sum();
            let kept: Vec<(usize, f64)> = raw
                .iter()
                .enumerate()
                .filter(|(_, w)| **w / total >= 0.03)
                .map(|(j, w)| (j, *w))
                .collect();
            let kept_total: f64 = kept.iter().map(|x| x.1).sum();
            for (j, w) in kept {
                fabric.insert(schema.fibers[j].clone(), w / kept_total);
            }
        }
        let log_price = arch.price + 0.3 * latent[0] + 0.2 * rng.normal();

        // shelf life, optionally broken by one stock-out gap
        let intro = rng.uniform_range(-180.0, cfg.horizon_days as f64) * MINUTES_PER_DAY as f64;
        let life = (rng.exponential(1.0 / cfg.mean_lifetime_days).max(7.0)) * MINUTES_PER_DAY as f64;
        let (start, stop) = (intro.max(0.0) as i64, (intro + life) as i64);
        let mut availability = Vec::new();
        if stop > start {
            if rng.bernoulli(cfg.churn_rate) && stop - start > 4 * MINUTES_PER_DAY {
                let cut = start + ((stop - start) as f64 * rng.uniform_range(0.3, 0.7)) as i64;
                let gap = ((rng.exponential(1.0 / 14.0) + 1.0) * MINUTES_PER_DAY as f64) as i64;
                availability.push(AvailabilityWindow { start, end: cut });
                availability.push(AvailabilityWindow {
                    start: cut + gap,
                    end: stop + gap,
                });
            } else {
                availability.push(AvailabilityWindow { start, end: stop });
            }
        }
        articles.push(Article {
            id: format!("art{i:05}"),
            tags,
            log_price,
            fabric,
            image_feat: None,
            availability,
        });
        truths.push(ArticleTruth {
            latent,
            popularity: cfg.popularity_sd * (0.6 * arch.popularity + 0.8 * rng.normal()),
            season_amplitude: if arch.seasonal { cfg.season_amplitude } else { 0.0 },
            season_phase: (arch.phase + 0.05 * rng.normal()).rem_euclid(1.0),
        });
    }
    let catalog = Catalog::new(articles)?;

    // articles touching each day, for fast in-store lookups
    let days = cfg.horizon_days as usize;
    let mut by_day: Vec<Vec<usize>> = vec![Vec::new(); days];
    for (i, a) in catalog.articles().iter().enumerate() {
        for w in &a.availability {
            let first = (w.start / MINUTES_PER_DAY).max(0) as usize;
            let last = (((w.end - 1) / MINUTES_PER_DAY) as usize).min(days - 1);
            for day in by_day.iter_mut().take(last + 1).skip(first) {
                if day.last() != Some(&i) {
                    day.push(i);
                }
            }
        }
    }

    let style_scale = cfg.taste_scale / (l as f64).sqrt();
    let mut truth = GroundTruth {
        articles: truths,
        styles: BTreeMap::new(),
    };
    let mut sales = Vec::with_capacity(cfg.customers);
    for k in 0..cfg.customers {
        let customer = format!("cust{k:05}");
        let mut style = normal_vec(&mut rng, l, 1.0);
        let rate = cfg.orders_per_year * (0.5 * rng.normal() - 0.125).exp();
        let mut times: Vec<Timestamp> = match cfg.orders_per_customer {
            Some(n) => {
                let mut ts: Vec<Timestamp> = (0..n).map(|_| rng.index(end as usize) as i64).collect();
                ts.sort_unstable();
                ts
            }
            None => {
                let mut ts = Vec::new();
                let mut t = rng.exponential(rate) * MINUTES_PER_YEAR as f64;
                while (t as i64) < end {
                    ts.push(t as i64);
                    t += rng.exponential(rate) * MINUTES_PER_YEAR as f64;
                }
                ts
            }
        };
        times.dedup();

        let mut path = Vec::with_capacity(times.len() + 1);
        path.push((0, style.iter().map(|s| s * style_scale).collect::<Vec<_>>()));
        let mut last_t = 0;
        let mut events = Vec::new();
        for t in times {
            let years = (t - last_t) as f64 / MINUTES_PER_YEAR as f64;
            let a = (-cfg.drift_rate * years).exp();
            if a < 1.0 {
                let b = (1.0 - a * a).sqrt();
                for s in style.iter_mut() {
                    *s = a * *s + b * rng.normal();
                }
            }
            last_t = t;
            let scaled: Vec<f64> = style.iter().map(|s| s * style_scale).collect();
            let day = (t / MINUTES_PER_DAY) as usize;
            let pool: Vec<usize> = by_day[day]
                .iter()
                .copied()
                .filter(|&i| catalog.article(i).available_at(t))
                .collect();
            let size = 1 + rng.poisson(cfg.mean_order_size - 1.0) as usize;
            if pool.is_empty() {
                debug!("no articles in store at {t}; {customer} skips a trip");
                continue;
            }
            let mut keyed: Vec<(f64, usize)> = pool
                .iter()
                .map(|&i| (truth.utility(i, &scaled, t) + rng.gumbel(), i))
                .collect();
            let take = size.min(keyed.len());
            keyed.select_nth_unstable_by(take - 1, |x, y| y.0.total_cmp(&x.0));
            keyed.truncate(take);
            keyed.sort_by(|x, y| y.0.total_cmp(&x.0));
            for (_, article) in keyed {
                events.push(SequenceEvent { article, t });
            }
            path.push((t, scaled));
        }
        truth.styles.insert(customer.clone(), path);
        if !events.is_empty() {
            sales.push(PurchaseSequence { customer, events });
        }
    }

    let test_window = cfg.test_window();
    let (train, test) = split_sequences(&sales, test_window.0, test_window.1);
    Ok(Market {
        schema,
        catalog,
        sales,
        train,
        test,
        truth,
        test_window,
    })
}

/// Candidate positions by descending true utility at `t`; ties by id.
/// Unknown customers are ranked with a zero style.
pub fn oracle_rank(truth: &GroundTruth, customer: &str, t: Timestamp, candidates: &CandidateSet) -> Vec<usize> {
    let zero;
    let style = match truth.style_at(customer, t) {
        Some(s) => s,
        None => {
            zero = vec![0.0; truth.articles.first().map_or(0, |a| a.latent.len())];
            &zero
        }
    };
    let scores: Vec<f64> = candidates
        .articles
        .iter()
        .map(|&a| truth.utility(a, style, t))
        .collect();
    order_by_score(&candidates.ids, &scores)
}

pub struct OracleRecommender<'a> {
    pub truth: &'a GroundTruth,
}

impl Recommender for OracleRecommender<'_> {
    fn name(&self) -> &str {
        "oracle"
    }

    fn rank(&self, _: usize, customer: &TestCustomer, candidates: &CandidateSet) -> Result<Vec<usize>> {
        Ok(oracle_rank(
            self.truth,
            &customer.customer,
            customer.first_sale,
            candidates,
        ))
    }

    fn parameter_count(&self) -> Option<usize> {
        None
    }
}

/// Map from customer id to test-window purchases, handy for tests.
pub fn purchases_by_customer(seqs: &[PurchaseSequence]) -> HashMap<&str, &PurchaseSequence> {
    seqs.iter().map(|s| (s.customer.as_str(), s)).collect()
}
