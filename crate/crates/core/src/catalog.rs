//! Articles, availability, sales records and their text formats.
//!
//! Timestamps are integer minutes since 2008-01-01T00:00Z. Availability
//! windows are half-open: `[start, end)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type Timestamp = i64;

pub const MINUTES_PER_DAY: i64 = 24 * 60;
/// Mean Gregorian-ish year of 365.25 days.
pub const MINUTES_PER_YEAR: i64 = 525_960;

const FABRIC_TOLERANCE: f64 = 1e-6;
const CATALOG_HEADER: &str = "id\ttags\tlog_price\tfabric\tavailability\timage_feat";
const SALES_HEADER: &str = "customer_id\tarticle_id\ttimestamp";
const SCHEMA_MAGIC: &str = "# stylerec schema v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AvailabilityWindow {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl AvailabilityWindow {
    pub fn contains(&self, t: Timestamp) -> bool {
        self.start <= t && t < self.end
    }

    pub fn overlaps(&self, start: Timestamp, end: Timestamp) -> bool {
        self.start < end && start < self.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Article {
    pub id: String,
    pub tags: BTreeSet<String>,
    pub log_price: f64,
    pub fabric: BTreeMap<String, f64>,
    pub image_feat: Option<Vec<f64>>,
    /// Sorted by start, non-overlapping.
    pub availability: Vec<AvailabilityWindow>,
}

impl Article {
    pub fn available_at(&self, t: Timestamp) -> bool {
        self.availability.iter().any(|w| w.contains(t))
    }

    pub fn available_during(&self, start: Timestamp, end: Timestamp) -> bool {
        self.availability.iter().any(|w| w.overlaps(start, end))
    }

    fn validate(&mut self) -> Result<()> {
        let bad = |message: String| Error::Invariant {
            id: self.id.clone(),
            message,
        };
        if self.id.is_empty() || self.id.contains(['\t', '\n']) {
            return Err(bad("article id must be non-empty and tab-free".into()));
        }
        if !self.log_price.is_finite() {
            return Err(bad("log_price is not finite".into()));
        }
        if !self.fabric.is_empty() {
            if let Some((fiber, frac)) = self.fabric.iter().find(|(_, f)| !(0.0..=1.0).contains(*f)) {
                return Err(bad(format!("fabric fraction {fiber}:{frac} outside [0,1]")));
            }
            let sum: f64 = self.fabric.values().sum();
            if (sum - 1.0).abs() > FABRIC_TOLERANCE {
                return Err(bad(format!("fabric fractions sum to {sum}, expected 1")));
            }
        }
        if let Some(img) = &self.image_feat {
            if !img.iter().all(|x| x.is_finite()) {
                return Err(bad("image features must be finite".into()));
            }
        }
        self.availability.sort();
        for w in &self.availability {
            if w.start >= w.end {
                return Err(bad(format!("window {}-{} is empty", w.start, w.end)));
            }
        }
        for pair in self.availability.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(bad(format!(
                    "windows {}-{} and {}-{} overlap",
                    pair[0].start, pair[0].end, pair[1].start, pair[1].end
                )));
            }
        }
        Ok(())
    }
}

/// Ordered tag and fiber vocabularies; fixes the feature layout.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Schema {
    pub tags: Vec<String>,
    pub fibers: Vec<String>,
    pub image_dim: usize,
}

impl Schema {
    pub fn feature_len(&self) -> usize {
        self.tags.len() + 1 + self.fibers.len() + self.image_dim
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l.trim_end() == SCHEMA_MAGIC => {}
            _ => return Err(perr(1, format!("expected header `{SCHEMA_MAGIC}`"))),
        }
        let mut schema = Schema::default();
        let mut seen = BTreeSet::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('\t')
                .ok_or_else(|| perr(i + 1, "expected `key<TAB>value`".into()))?;
            seen.insert(key.to_string());
            match key {
                "tags" => schema.tags = split_list(value),
                "fibers" => schema.fibers = split_list(value),
                "image_dim" => {
                    schema.image_dim = value
                        .trim()
                        .parse()
                        .map_err(|e| perr(i + 1, format!("image_dim: {e}")))?
                }
                other => return Err(perr(i + 1, format!("unknown key `{other}`"))),
            }
        }
        for key in ["tags", "fibers", "image_dim"] {
            if !seen.contains(key) {
                return Err(perr(0, format!("missing key `{key}`")));
            }
        }
        let unique_tags: BTreeSet<_> = schema.tags.iter().collect();
        let unique_fibers: BTreeSet<_> = schema.fibers.iter().collect();
        if unique_tags.len() != schema.tags.len() || unique_fibers.len() != schema.fibers.len() {
            return Err(perr(0, "duplicate tag or fiber id".into()));
        }
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = format!(
            "{SCHEMA_MAGIC}\ntags\t{}\nfibers\t{}\nimage_dim\t{}\n",
            self.tags.join(";"),
            self.fibers.join(";"),
            self.image_dim
        );
        fs::write(path, text)?;
        Ok(())
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(';')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(String::from)
        .collect()
}

/// Flattens an article into `[tags (T) | log_price (1) | fabric (F) | image (I)]`.
pub fn feature_vector(article: &Article, schema: &Schema) -> Result<Vec<f64>> {
    let mut x = vec![0.0; schema.feature_len()];
    for tag in &article.tags {
        let pos = schema
            .tags
            .iter()
            .position(|t| t == tag)
            .ok_or_else(|| Error::UnknownId {
                kind: "tag",
                id: tag.clone(),
            })?;
        x[pos] = 1.0;
    }
    let t = schema.tags.len();
    x[t] = article.log_price;
    for (fiber, frac) in &article.fabric {
        let pos = schema
            .fibers
            .iter()
            .position(|f| f == fiber)
            .ok_or_else(|| Error::UnknownId {
                kind: "fiber",
                id: fiber.clone(),
            })?;
        x[t + 1 + pos] = *frac;
    }
    if let Some(img) = &article.image_feat {
        if img.len() != schema.image_dim {
            return Err(Error::dim("image features", schema.image_dim, img.len()));
        }
        let off = t + 1 + schema.fibers.len();
        x[off..].copy_from_slice(img);
    }
    Ok(x)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    articles: Vec<Article>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(articles: Vec<Article>) -> Result<Self> {
        let mut index = HashMap::with_capacity(articles.len());
        let mut articles = articles;
        for (i, a) in articles.iter_mut().enumerate() {
            a.validate()?;
            if index.insert(a.id.clone(), i).is_some() {
                return Err(Error::Invariant {
                    id: a.id.clone(),
                    message: "duplicate article id".into(),
                });
            }
        }
        Ok(Catalog { articles, index })
    }

    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    pub fn articles(&self) -> &[Article] {
        &self.articles
    }

    pub fn article(&self, idx: usize) -> &Article {
        &self.articles[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.articles[idx].id
    }

    /// Checks tags, fibers and image widths against `schema`.
    pub fn check_schema(&self, schema: &Schema) -> Result<()> {
        for a in &self.articles {
            feature_vector(a, schema).map_err(|e| Error::Invariant {
                id: a.id.clone(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Catalog indices of articles in store at `t`, in catalog order.
    pub fn in_store(&self, t: Timestamp) -> Vec<usize> {
        (0..self.articles.len())
            .filter(|&i| self.articles[i].available_at(t))
            .collect()
    }

    pub fn in_store_ids(&self, t: Timestamp) -> BTreeSet<String> {
        self.in_store(t)
            .into_iter()
            .map(|i| self.articles[i].id.clone())
            .collect()
    }

    /// Articles in store at any moment of `[start, end)`.
    pub fn available_during(&self, start: Timestamp, end: Timestamp) -> Vec<usize> {
        (0..self.articles.len())
            .filter(|&i| self.articles[i].available_during(start, end))
            .collect()
    }

    pub fn features(&self, schema: &Schema) -> Result<Vec<Vec<f64>>> {
        self.articles.iter().map(|a| feature_vector(a, schema)).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let perr = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        match lines.next() {
            Some((_, h)) if h.trim_end() == CATALOG_HEADER => {}
            _ => return Err(perr(1, format!("expected header `{CATALOG_HEADER}`"))),
        }
        let mut articles = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let article = parse_article(line).map_err(|m| perr(i + 1, m))?;
            articles.push(article);
        }
        Catalog::new(articles)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{CATALOG_HEADER}")?;
        let mut line = String::new();
        for a in &self.articles {
            line.clear();
            let tags: Vec<&str> = a.tags.iter().map(String::as_str).collect();
            let fabric: Vec<String> = a.fabric.iter().map(|(k, v)| format!("{k}:{v}")).collect();
            let windows: Vec<String> = a
                .availability
                .iter()
                .map(|w| format!("{}-{}", w.start, w.end))
                .collect();
            let _ = write!(
                line,
                "{}\t{}\t{}\t{}\t{}\t",
                a.id,
                tags.join(";"),
                a.log_price,
                fabric.join(";"),
                windows.join(";")
            );
            if let Some(img) = &a.image_feat {
                let parts: Vec<String> = img.iter().map(|v| v.to_string()).collect();
                line.push_str(&parts.join(","));
            }
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }
}

fn parse_article(line: &str) -> std::result::Result<Article, String> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() < 5 || cols.len() > 6 {
        return Err(format!("expected 5 or 6 tab-separated columns, got {}", cols.len()));
    }
    let id = cols[0].trim().to_string();
    let tags = split_list(cols[1]).into_iter().collect();
    let log_price: f64 = cols[2]
        .trim()
        .parse()
        .map_err(|e| format!("log_price `{}`: {e}", cols[2]))?;
    let mut fabric = BTreeMap::new();
    for pair in split_list(cols[3]) {
        let (fiber, frac) = pair
            .split_once(':')
            .ok_or_else(|| format!("fabric entry `{pair}` is not fiber:fraction"))?;
        let frac: f64 = frac.parse().map_err(|e| format!("fabric fraction `{frac}`: {e}"))?;
        if fabric.insert(fiber.to_string(), frac).is_some() {
            return Err(format!("fiber `{fiber}` listed twice"));
        }
    }
    let mut availability = Vec::new();
    for pair in split_list(cols[4]) {
        let (s, e) = pair
            .split_once('-')
            .ok_or_else(|| format!("availability `{pair}` is not start-end"))?;
        let start = s.parse().map_err(|err| format!("window start `{s}`: {err}"))?;
        let end = e.parse().map_err(|err| format!("window end `{e}`: {err}"))?;
        availability.push(AvailabilityWindow { start, end });
    }
    let image_feat = match cols.get(5).map(|s| s.trim()) {
        None | Some("") => None,
        Some(s) => Some(
            s.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|e| format!("image feature `{v}`: {e}")))
                .collect::<std::result::Result<Vec<_>, _>>()?,
        ),
    };
    Ok(Article {
        id,
        tags,
        log_price,
        fabric,
        image_feat,
        availability,
    })
}

/// One sales record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PurchaseEvent {
    pub customer: String,
    pub article: String,
    pub t: Timestamp,
}

/// One purchase inside a [`PurchaseSequence`]; `article` is a catalog index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SequenceEvent {
    pub article: usize,
    pub t: Timestamp,
}

/// A customer's purchases, sorted by time with ties kept in input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PurchaseSequence {
    pub customer: String,
    pub events: Vec<SequenceEvent>,
}

impl PurchaseSequence {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn timestamps(&self) -> Vec<Timestamp> {
        self.events.iter().map(|e| e.t).collect()
    }

    /// Events with `t` in `[start, end)`, as a new sequence.
    pub fn slice_time(&self, start: Timestamp, end: Timestamp) -> PurchaseSequence {
        PurchaseSequence {
            customer: self.customer.clone(),
            events: self
                .events
                .iter()
                .filter(|e| start <= e.t && e.t < end)
                .copied()
                .collect(),
        }
    }
}

pub fn read_sales(path: &Path) -> Result<Vec<PurchaseEvent>> {
    let text = fs::read_to_string(path)?;
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == SALES_HEADER => {}
        _ => return Err(perr(1, format!("expected header `{SALES_HEADER}`"))),
    }
    let mut events = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(perr(i + 1, format!("expected 3 columns, got {}", cols.len())));
        }
        let t: Timestamp = cols[2]
            .trim()
            .parse()
            .map_err(|e| perr(i + 1, format!("malformed timestamp `{}`: {e}", cols[2])))?;
        events.push(PurchaseEvent {
            customer: cols[0].trim().to_string(),
            article: cols[1].trim().to_string(),
            t,
        });
    }
    Ok(events)
}

/// Groups sales by customer (sorted by customer id), each sorted stably by
/// time.
pub fn group_sales(events: &[PurchaseEvent], catalog: &Catalog) -> Result<Vec<PurchaseSequence>> {
    let mut by_customer: BTreeMap<&str, Vec<SequenceEvent>> = BTreeMap::new();
    for e in events {
        let article = catalog.index_of(&e.article).ok_or_else(|| Error::UnknownId {
            kind: "article",
            id: e.article.clone(),
        })?;
        by_customer
            .entry(e.customer.as_str())
            .or_default()
            .push(SequenceEvent { article, t: e.t });
    }
    Ok(by_customer
        .into_iter()
        .map(|(customer, mut events)| {
            events.sort_by_key(|e| e.t);
            PurchaseSequence {
                customer: customer.to_string(),
                events,
            }
        })
        .collect())
}

pub fn load_sales(path: &Path, catalog: &Catalog) -> Result<Vec<PurchaseSequence>> {
    group_sales(&read_sales(path)?, catalog)
}

pub fn save_sales(path: &Path, sequences: &[PurchaseSequence], catalog: &Catalog) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{SALES_HEADER}")?;
    for seq in sequences {
        for e in &seq.events {
            writeln!(out, "{}\t{}\t{}", seq.customer, catalog.id(e.article), e.t)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Splits every sequence into the part before `start` and the part in
/// `[start, end)`. Customers with no events in a part are dropped from it.
pub fn split_sequences(
    sequences: &[PurchaseSequence],
    start: Timestamp,
    end: Timestamp,
) -> (Vec<PurchaseSequence>, Vec<PurchaseSequence>) {
    let mut before = Vec::new();
    let mut during = Vec::new();
    for s in sequences {
        let b = s.slice_time(Timestamp::MIN, start);
        let d = s.slice_time(start, end);
        if !b.is_empty() {
            before.push(b);
        }
        if !d.is_empty() {
            during.push(d);
        }
    }
    (before, during)
}

/// Binary article x customer matrix. The article axis is catalog order.
#[derive(Debug, Clone, PartialEq)]
pub struct PurchaseMatrix {
    pub customers: Vec<String>,
    pub articles: Vec<String>,
    pub pairs: BTreeSet<(usize, usize)>,
}

impl PurchaseMatrix {
    pub fn contains(&self, article: usize, customer: usize) -> bool {
        self.pairs.contains(&(article, customer))
    }

    /// For each article, the sorted customer indices who bought it.
    pub fn buyers_by_article(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.articles.len()];
        for &(a, c) in &self.pairs {
            rows[a].push(c);
        }
        rows
    }

    /// Distinct articles bought per customer.
    pub fn counts_by_customer(&self) -> Vec<usize> {
        let mut counts = vec![0; self.customers.len()];
        for &(_, c) in &self.pairs {
            counts[c] += 1;
        }
        counts
    }
}

pub fn build_purchase_matrix(
    sequences: &[PurchaseSequence],
    customers: &[String],
    catalog: &Catalog,
) -> Result<PurchaseMatrix> {
    let cust_index: HashMap<&str, usize> = customers.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut pairs = BTreeSet::new();
    for seq in sequences {
        let k = *cust_index.get(seq.customer.as_str()).ok_or_else(|| Error::UnknownId {
            kind: "customer",
            id: seq.customer.clone(),
        })?;
        for e in &seq.events {
            if e.article >= catalog.len() {
                return Err(Error::UnknownId {
                    kind: "article",
                    id: format!("#{}", e.article),
                });
            }
            pairs.insert((e.article, k));
        }
    }
    Ok(PurchaseMatrix {
        customers: customers.to_vec(),
        articles: catalog.articles().iter().map(|a| a.id.clone()).collect(),
        pairs,
    })
}
