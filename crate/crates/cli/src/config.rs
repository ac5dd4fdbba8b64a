//! Run configuration, read from a sectioned TOML file.
//!
//! Every key is optional except `seed`, which may also come from the
//! command line. Unknown keys are rejected so typos do not silently fall
//! back to defaults.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use stylerec::catalog::{Timestamp, MINUTES_PER_DAY};
use stylerec::dynamic_model::{LossKind, TimeEncoding, TrainConfigDyn};
use stylerec::numerics::AdamConfig;
use stylerec::static_model::StaticConfig;
use stylerec::synthgen::{GenConfig, CATALOG_FILE, SALES_FILE, SCHEMA_FILE, TRUTH_FILE};

use crate::error::{CliError, CliResult};

pub const STATIC_CHECKPOINT: &str = "static.ckpt";
pub const DYNAMIC_CHECKPOINT: &str = "dynamic.ckpt";
pub const STATIC_LOSS_LOG: &str = "static_loss.tsv";
pub const DYNAMIC_LOSS_LOG: &str = "dynamic_loss.tsv";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const REPORT_FILE: &str = "report.txt";

pub fn roc_file(model: &str) -> String {
    format!("roc_{model}.tsv")
}

pub const MODELS: [&str; 4] = ["baseline", "static", "dynamic", "oracle"];

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub gen: GenSection,
    #[serde(default, rename = "static")]
    pub static_model: StaticSection,
    #[serde(default)]
    pub dynamic: DynamicSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Data files default to the output directory, where `gen` puts them.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub out: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub sales: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSection {
    pub customers: usize,
    pub articles: usize,
    pub tags: usize,
    pub fibers: usize,
    pub latent_dim: usize,
    pub archetypes: usize,
    pub horizon_days: i64,
    pub test_days: i64,
    pub drift_rate: f64,
    pub season_amplitude: f64,
    pub taste_scale: f64,
    pub popularity_sd: f64,
    pub mean_order_size: f64,
    pub orders_per_year: f64,
    pub orders_per_customer: Option<usize>,
    pub mean_lifetime_days: f64,
    pub churn_rate: f64,
}

impl Default for GenSection {
    fn default() -> Self {
        let g = GenConfig::default();
        GenSection {
            customers: g.customers,
            articles: g.articles,
            tags: g.tags,
            fibers: g.fibers,
            latent_dim: g.latent_dim,
            archetypes: g.archetypes,
            horizon_days: g.horizon_days,
            test_days: g.test_days,
            drift_rate: g.drift_rate,
            season_amplitude: g.season_amplitude,
            taste_scale: g.taste_scale,
            popularity_sd: g.popularity_sd,
            mean_order_size: g.mean_order_size,
            orders_per_year: g.orders_per_year,
            orders_per_customer: g.orders_per_customer,
            mean_lifetime_days: g.mean_lifetime_days,
            churn_rate: g.churn_rate,
        }
    }
}

impl GenSection {
    pub fn to_config(&self, seed: u64) -> GenConfig {
        GenConfig {
            customers: self.customers,
            articles: self.articles,
            tags: self.tags,
            fibers: self.fibers,
            latent_dim: self.latent_dim,
            archetypes: self.archetypes,
            horizon_days: self.horizon_days,
            test_days: self.test_days,
            drift_rate: self.drift_rate,
            season_amplitude: self.season_amplitude,
            taste_scale: self.taste_scale,
            popularity_sd: self.popularity_sd,
            mean_order_size: self.mean_order_size,
            orders_per_year: self.orders_per_year,
            orders_per_customer: self.orders_per_customer,
            mean_lifetime_days: self.mean_lifetime_days,
            churn_rate: self.churn_rate,
            seed,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaticSection {
    pub hidden: Vec<usize>,
    pub dim: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_articles: usize,
    pub style_init_scale: f64,
}

impl Default for StaticSection {
    fn default() -> Self {
        let s = StaticConfig::default();
        StaticSection {
            hidden: s.hidden,
            dim: s.dim,
            lr: s.adam.lr,
            beta1: s.adam.beta1,
            beta2: s.adam.beta2,
            eps: s.adam.eps,
            batch_size: s.batch_size,
            epochs: s.epochs,
            validation_articles: s.validation_articles,
            style_init_scale: s.style_init_scale,
        }
    }
}

fn adam(lr: f64, beta1: f64, beta2: f64, eps: f64) -> CliResult<AdamConfig> {
    let positive = |x: f64| x > 0.0;
    if !positive(lr) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !positive(eps) {
        return Err(CliError::Config(
            "optimizer needs lr > 0, betas in [0, 1) and eps > 0".into(),
        ));
    }
    Ok(AdamConfig { lr, beta1, beta2, eps })
}

impl StaticSection {
    pub fn to_config(&self, seed: u64) -> CliResult<StaticConfig> {
        if self.dim == 0 || self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(CliError::Config(
                "static dim, batch size and hidden widths must be >= 1".into(),
            ));
        }
        Ok(StaticConfig {
            hidden: self.hidden.clone(),
            dim: self.dim,
            adam: adam(self.lr, self.beta1, self.beta2, self.eps)?,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            validation_articles: self.validation_articles,
            style_init_scale: self.style_init_scale,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicSection {
    pub loss: String,
    pub negatives: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub hidden: usize,
    pub time_encoding: String,
    pub validation_sequences: usize,
}

impl Default for DynamicSection {
    fn default() -> Self {
        let d = TrainConfigDyn::default();
        DynamicSection {
            loss: d.loss.name().to_string(),
            negatives: d.negatives,
            lr: d.adam.lr,
            beta1: d.adam.beta1,
            beta2: d.adam.beta2,
            eps: d.adam.eps,
            epochs: d.epochs,
            batch_size: d.batch_size,
            clip_norm: d.clip_norm,
            hidden: d.hidden,
            time_encoding: "cyclic".into(),
            validation_sequences: d.validation_sequences,
        }
    }
}

impl DynamicSection {
    pub fn to_config(&self, seed: u64) -> CliResult<TrainConfigDyn> {
        let loss: LossKind = self.loss.parse().map_err(CliError::Config)?;
        let time_encoding = match self.time_encoding.as_str() {
            "cyclic" => TimeEncoding::Cyclic,
            "raw" => TimeEncoding::Raw,
            other => {
                return Err(CliError::Config(format!(
                    "unknown time encoding `{other}` (cyclic|raw)"
                )))
            }
        };
        if self.negatives == 0 || self.hidden == 0 || self.batch_size == 0 {
            return Err(CliError::Config("negatives, hidden and batch size must be >= 1".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(CliError::Config("clip_norm must be > 0".into()));
        }
        Ok(TrainConfigDyn {
            loss,
            negatives: self.negatives,
            adam: adam(self.lr, self.beta1, self.beta2, self.eps)?,
            epochs: self.epochs,
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
            seed,
            hidden: self.hidden,
            time_encoding,
            validation_sequences: self.validation_sequences,
        })
    }
}

/// Test window in minutes since the epoch. Without explicit bounds the
/// last `gen.test_days` days of the generated horizon are used.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub start: Option<Timestamp>,
    pub end: Option<Timestamp>,
    pub models: Vec<String>,
    pub popularity_days: i64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            start: None,
            end: None,
            models: MODELS.iter().map(|m| m.to_string()).collect(),
            popularity_days: stylerec::baseline::DEFAULT_WINDOW_DAYS,
        }
    }
}

/// Fully resolved configuration for one command.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub catalog: PathBuf,
    pub sales: PathBuf,
    pub schema: PathBuf,
    pub truth: PathBuf,
    pub gen: GenConfig,
    pub static_cfg: StaticConfig,
    pub dynamic_cfg: TrainConfigDyn,
    pub window: (Timestamp, Timestamp),
    pub models: Vec<String>,
    pub popularity_days: i64,
}

impl RunConfig {
    pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let raw: RawConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::resolve(raw, base, seed, out)
    }

    /// Relative paths in the file are taken relative to `base`.
    pub fn resolve(raw: RawConfig, base: &Path, seed: Option<u64>, out: Option<&Path>) -> CliResult<Self> {
        let seed = seed
            .or(raw.seed)
            .ok_or_else(|| CliError::Config("no seed given (set `seed` or pass --seed)".into()))?;
        let rel = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let out = match out {
            Some(o) => o.to_path_buf(),
            None => rel(raw.paths.out.as_deref().unwrap_or(Path::new("out"))),
        };
        let data = |p: &Option<PathBuf>, name: &str| p.as_deref().map_or_else(|| out.join(name), rel);
        let gen = raw.gen.to_config(seed);
        gen.validate().map_err(|e| CliError::Config(format!("[gen]: {e}")))?;
        let (default_start, default_end) = gen.test_window();
        let window = (
            raw.eval.start.unwrap_or(default_start),
            raw.eval.end.unwrap_or(default_end),
        );
        if window.0 >= window.1 {
            return Err(CliError::Config("eval start must be before eval end".into()));
        }
        for m in &raw.eval.models {
            if !MODELS.contains(&m.as_str()) {
                return Err(CliError::Config(format!("unknown model `{m}`")));
            }
        }
        if raw.eval.popularity_days <= 0 {
            return Err(CliError::Config("popularity_days must be >= 1".into()));
        }
        Ok(RunConfig {
            seed,
            catalog: data(&raw.paths.catalog, CATALOG_FILE),
            sales: data(&raw.paths.sales, SALES_FILE),
            schema: data(&raw.paths.schema, SCHEMA_FILE),
            truth: data(&raw.paths.truth, TRUTH_FILE),
            static_cfg: raw.static_model.to_config(seed)?,
            dynamic_cfg: raw.dynamic.to_config(seed)?,
            gen,
            window,
            models: raw.eval.models,
            popularity_days: raw.eval.popularity_days,
            out,
        })
    }

    pub fn window_days(&self) -> f64 {
        (self.window.1 - self.window.0) as f64 / MINUTES_PER_DAY as f64
    }
}
