//! The five commands. Each reads its inputs, writes fixed-name outputs
//! under the output directory and never touches its input files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use stylerec::baseline::popularity_before;
use stylerec::catalog::{build_purchase_matrix, load_sales, split_sequences, Catalog, PurchaseSequence, Schema};
use stylerec::dynamic_model::{train_dynamic, DynamicModel, DynamicRecommender};
use stylerec::evaluation::{
    cold_start_subset, evaluate_model, read_metrics, test_customers, write_metrics, write_roc, CandidateSet,
    MetricsRow, Recommender,
};
use stylerec::numerics::Mat;
use stylerec::static_model::{encode_all, train_static, StaticModel, StaticRecommender};
use stylerec::synthgen::{generate_market, GroundTruth, OracleRecommender};
use stylerec::Execution;

use crate::config::{
    roc_file, RunConfig, DYNAMIC_CHECKPOINT, DYNAMIC_LOSS_LOG, METRICS_FILE, REPORT_FILE, STATIC_CHECKPOINT,
    STATIC_LOSS_LOG,
};
use crate::error::{CliError, CliResult};

/// Catalog, schema and sales split around the evaluation window.
pub struct Data {
    pub schema: Schema,
    pub catalog: Catalog,
    pub train: Vec<PurchaseSequence>,
    pub test: Vec<PurchaseSequence>,
}

fn require(path: &Path, hint: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Dependency(format!("{} not found ({hint})", path.display())))
    }
}

pub fn load_data(cfg: &RunConfig) -> CliResult<Data> {
    for p in [&cfg.catalog, &cfg.sales, &cfg.schema] {
        require(p, "run `gen` first or set [paths]")?;
    }
    let schema = Schema::load(&cfg.schema)?;
    let catalog = Catalog::load(&cfg.catalog)?;
    catalog.check_schema(&schema)?;
    let sales = load_sales(&cfg.sales, &catalog)?;
    let (train, test) = split_sequences(&sales, cfg.window.0, cfg.window.1);
    info!(
        "loaded {} articles, {} customers with training sales, {} with test sales",
        catalog.len(),
        train.len(),
        test.len()
    );
    Ok(Data {
        schema,
        catalog,
        train,
        test,
    })
}

fn write_loss_log(path: &Path, rows: impl Iterator<Item = (usize, f64, f64)>) -> CliResult<()> {
    let mut s = String::from("epoch\ttrain_loss\tvalidation_loss\n");
    for (e, t, v) in rows {
        writeln!(s, "{e}\t{t}\t{v}").expect("writing to a String");
    }
    fs::write(path, s)?;
    Ok(())
}

/// Writes catalog, sales, schema and ground-truth files.
pub fn cmd_gen(cfg: &RunConfig) -> CliResult<()> {
    let market = generate_market(&cfg.gen)?;
    let sales: usize = market.sales.iter().map(PurchaseSequence::len).sum();
    info!(
        "generated {} articles, {} sales by {} customers",
        market.catalog.len(),
        sales,
        market.sales.len()
    );
    market.write(&cfg.out)?;
    Ok(())
}

pub fn cmd_train_static(cfg: &RunConfig, exec: Execution) -> CliResult<StaticModel> {
    let data = load_data(cfg)?;
    let features = data.catalog.features(&data.schema)?;
    let customers: Vec<String> = data.train.iter().map(|s| s.customer.clone()).collect();
    let matrix = build_purchase_matrix(&data.train, &customers, &data.catalog)?;
    let (model, log) = train_static(&features, &matrix, &cfg.static_cfg, exec)?;
    fs::create_dir_all(&cfg.out)?;
    model.save(&cfg.out.join(STATIC_CHECKPOINT))?;
    write_loss_log(
        &cfg.out.join(STATIC_LOSS_LOG),
        log.iter().map(|e| (e.epoch, e.train_loss, e.validation_loss)),
    )?;
    Ok(model)
}

fn load_static(cfg: &RunConfig, data: &Data, exec: Execution) -> CliResult<(StaticModel, Mat)> {
    let path = cfg.out.join(STATIC_CHECKPOINT);
    require(&path, "run `train-static` first")?;
    let model = StaticModel::load(&path)?;
    if model.encoder.input_dim() != data.schema.feature_len() {
        return Err(CliError::Dependency(format!(
            "{} was trained on {} features but the schema has {}",
            path.display(),
            model.encoder.input_dim(),
            data.schema.feature_len()
        )));
    }
    let features = data.catalog.features(&data.schema)?;
    let dna = encode_all(&model.encoder, &features, exec)?;
    Ok((model, dna))
}

pub fn cmd_train_dynamic(cfg: &RunConfig, exec: Execution) -> CliResult<DynamicModel> {
    let data = load_data(cfg)?;
    let (_, dna) = load_static(cfg, &data, exec)?;
    let (model, log) = train_dynamic(&data.catalog, &data.train, &dna, &cfg.dynamic_cfg, exec)?;
    model.save(&cfg.out.join(DYNAMIC_CHECKPOINT))?;
    write_loss_log(
        &cfg.out.join(DYNAMIC_LOSS_LOG),
        log.iter().map(|e| (e.epoch, e.train_loss, e.validation_loss)),
    )?;
    Ok(model)
}

/// Backtests the requested models over the evaluation window and writes
/// one ROC file per model plus the combined metrics table.
pub fn cmd_eval(cfg: &RunConfig, models: &[String], exec: Execution) -> CliResult<Vec<MetricsRow>> {
    // check every prerequisite before producing any output
    let wants = |m: &str| models.iter().any(|x| x == m);
    if wants("static") || wants("dynamic") {
        require(&cfg.out.join(STATIC_CHECKPOINT), "run `train-static` first")?;
    }
    if wants("dynamic") {
        require(&cfg.out.join(DYNAMIC_CHECKPOINT), "run `train-dynamic` first")?;
    }
    if wants("oracle") {
        require(&cfg.truth, "the oracle needs the generator's ground truth")?;
    }
    let data = load_data(cfg)?;
    let candidates = CandidateSet::in_window(&data.catalog, cfg.window.0, cfg.window.1);
    let customers = test_customers(&data.train, &data.test);
    let cold: BTreeSet<(String, usize)> = cold_start_subset(&data.test, &data.train);
    let purchases: usize = customers.iter().map(|c| c.purchased.len()).sum();
    info!(
        "evaluating {} customers, {} purchases, {} candidates ({} cold-start)",
        customers.len(),
        purchases,
        candidates.len(),
        cold.len()
    );

    let static_parts = if wants("static") || wants("dynamic") {
        Some(load_static(cfg, &data, exec)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for name in models {
        let eval = match name.as_str() {
            "baseline" => {
                let table = popularity_before(&data.train, &data.catalog, cfg.window.0, cfg.popularity_days)?;
                evaluate_model(&table.recommender(), &customers, &candidates, exec)?
            }
            "static" => {
                let (model, dna) = static_parts.as_ref().expect("loaded above");
                let rec = StaticRecommender::new(model, candidates.gather(dna));
                evaluate_model(&rec, &customers, &candidates, exec)?
            }
            "dynamic" => {
                let (_, dna) = static_parts.as_ref().expect("loaded above");
                let model = DynamicModel::load(&cfg.out.join(DYNAMIC_CHECKPOINT))?;
                if model.params.dna_dim != dna.cols() {
                    return Err(CliError::Dependency(format!(
                        "dynamic checkpoint expects {}-float embeddings, static model gives {}",
                        model.params.dna_dim,
                        dna.cols()
                    )));
                }
                let rec = DynamicRecommender::new(&model.params, dna, &candidates, cfg.seed);
                evaluate_model(&rec, &customers, &candidates, exec)?
            }
            "oracle" => {
                let truth = GroundTruth::load(&cfg.truth, &data.catalog)?;
                let rec = OracleRecommender { truth: &truth };
                evaluate_model(&rec as &dyn Recommender, &customers, &candidates, exec)?
            }
            other => return Err(CliError::Config(format!("unknown model `{other}`"))),
        };
        info!("{name}: auc {:.4}", eval.curve.auc);
        fs::create_dir_all(&cfg.out)?;
        write_roc(&cfg.out.join(roc_file(name)), &eval, cfg.seed)?;
        rows.push(MetricsRow::new(&eval, &cold));
    }
    write_metrics(
        &cfg.out.join(METRICS_FILE),
        &rows,
        candidates.len(),
        purchases,
        cfg.seed,
    )?;
    Ok(rows)
}

/// Renders the metrics table as aligned text, writes it to the report file
/// and returns it. The best learned model is starred.
pub fn cmd_report(cfg: &RunConfig) -> CliResult<String> {
    let path = cfg.out.join(METRICS_FILE);
    require(&path, "run `eval` first")?;
    let rows = read_metrics(&path)?;
    let header = fs::read_to_string(&path)?
        .lines()
        .next()
        .filter(|l| l.starts_with('#'))
        .map(|l| l.trim_start_matches('#').trim().to_string())
        .unwrap_or_default();
    let best = rows
        .iter()
        .filter(|r| r.model != "oracle")
        .max_by(|a, b| a.auc.total_cmp(&b.auc))
        .map(|r| r.model.clone());

    let mut s = String::new();
    writeln!(s, "backtest {header}").unwrap();
    writeln!(
        s,
        "{:<10} {:>8} {:>7} {:>7} {:>7} {:>10} {:>9} {:>6}",
        "model", "auc", "10%", "50%", "90%", "params", "cold_auc", "cold_n"
    )
    .unwrap();
    for r in &rows {
        let mark = if best.as_deref() == Some(r.model.as_str()) {
            "*"
        } else {
            ""
        };
        writeln!(
            s,
            "{:<10} {:>8} {:>7} {:>7} {:>7} {:>10} {:>9} {:>6}",
            format!("{}{mark}", r.model),
            format!("{:.4}", r.auc),
            r.quantiles[0],
            r.quantiles[1],
            r.quantiles[2],
            r.parameter_count.map_or("-".into(), |p| p.to_string()),
            r.cold_start_auc.map_or("-".into(), |a| format!("{a:.4}")),
            r.cold_start_purchases
        )
        .unwrap();
    }
    fs::write(cfg.out.join(REPORT_FILE), &s)?;
    Ok(s)
}
