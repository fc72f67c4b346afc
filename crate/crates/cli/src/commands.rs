use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use csai_core::csai::CsaiModel;
use csai_core::masking::{audit_mask_plan, plan_uniform_mask, MaskAudit, MaskMode, MaskPlan, MissingDistribution, SplitRole};
use csai_core::report::{
    ablation_fold_table, ablation_summary_table, cv_table, history_table, sweep_series, ReportTable,
};
use csai_core::trainer::{
    ablate, cross_validate, evaluate_split, prepare_splits, split_plan, split_result, train, AblationAxis,
    AblationReport, CvReport, PreparedSplits, SplitEvaluation, SplitResult,
};
use csai_core::tsdata::{write_table, NormStats, SplitIndices};

use crate::{CliError, Command, Common, ExperimentConfig, Format, TableKind};

/// Every JSON report: what produced it, the full resolved config, the payload.
#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    kind: &'a str,
    config: &'a ExperimentConfig,
    result: &'a T,
}

fn runtime(what: &str, path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{what} {}: {e}", path.display()))
}

fn out_dir(config: &ExperimentConfig) -> Result<&Path, CliError> {
    let dir = config.out_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| runtime("cannot create output directory", dir, e))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| runtime("cannot write", path, e))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn write_report<T: Serialize>(config: &ExperimentConfig, file: &str, kind: &str, result: &T) -> Result<PathBuf, CliError> {
    let path = out_dir(config)?.join(file);
    let json = serde_json::to_string_pretty(&Envelope { kind, config, result })
        .map_err(|e| CliError::Runtime(format!("serializing {kind} report: {e}")))?;
    write_text(&path, &(json + "\n"))?;
    Ok(path)
}

fn write_table_file(config: &ExperimentConfig, file: &str, table: &ReportTable) -> Result<(), CliError> {
    let path = out_dir(config)?.join(file);
    write_text(&path, &table.to_csv()?)
}

pub(crate) fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate(c) => generate(&c.resolve()?),
        Command::Preprocess(c) => preprocess(&c.resolve()?),
        Command::Mask(c) => mask(&c.resolve()?),
        Command::Train { common, cv } => {
            let config = common.resolve()?;
            if cv {
                train_cv(&config)
            } else {
                train_split(&config)
            }
        }
        Command::Evaluate { common, checkpoint } => evaluate(&common.resolve()?, checkpoint),
        Command::Ablate { common, axis, values } => run_ablation(&common, &axis, &values),
        Command::Audit(c) => audit(&c.resolve()?),
        Command::Report { input, format, table, output } => report(&input, format, table, output.as_deref()),
    }
}

#[derive(Serialize)]
struct Manifest {
    n_samples: usize,
    n_steps: usize,
    n_features: usize,
    feature_names: Vec<String>,
    observed_cells: usize,
    missing_rate: f64,
    has_labels: bool,
    files: Vec<String>,
}

fn generate(config: &ExperimentConfig) -> Result<(), CliError> {
    if config.synthetic().is_none() {
        return Err(CliError::Validation("generate needs a synthetic data source".into()));
    }
    let ds = config.dataset()?;
    let dir = out_dir(config)?;
    let mut files = vec!["data.csv".to_string()];
    write_table(&ds, &dir.join("data.csv"), false).map_err(|e| runtime("cannot write", &dir.join("data.csv"), e))?;
    if ds.truth.is_some() {
        write_table(&ds, &dir.join("truth.csv"), true).map_err(|e| runtime("cannot write", &dir.join("truth.csv"), e))?;
        files.push("truth.csv".into());
    }
    let dims = ds.batch.dims();
    let observed = ds.batch.n_observed();
    let manifest = Manifest {
        n_samples: dims.n,
        n_steps: dims.t,
        n_features: dims.d,
        feature_names: ds.feature_names.clone(),
        observed_cells: observed,
        missing_rate: 1.0 - observed as f64 / dims.cells() as f64,
        has_labels: ds.batch.labels().is_some(),
        files,
    };
    write_report(config, "manifest.json", "generate", &manifest)?;
    Ok(())
}

fn prepared(config: &ExperimentConfig) -> Result<(SplitIndices, PreparedSplits), CliError> {
    let ds = config.dataset()?;
    let split = config.split_indices(&ds)?;
    let data = prepare_splits(&ds, &split, "train")?;
    Ok((split, data))
}

#[derive(Serialize)]
struct Preprocessed<'a> {
    split: &'a SplitIndices,
    norm: &'a NormStats,
    tau: &'a [f64],
    missing: &'a MissingDistribution,
}

fn preprocess(config: &ExperimentConfig) -> Result<(), CliError> {
    let (split, data) = prepared(config)?;
    let result = Preprocessed { split: &split, norm: &data.stats, tau: &data.tau.tau, missing: &data.dist };
    write_report(config, "preprocess.json", "preprocess", &result)?;
    Ok(())
}

const ROLES: [SplitRole; 3] = [SplitRole::Train, SplitRole::Val, SplitRole::Test];

#[derive(Serialize)]
struct SplitPlan {
    split: SplitRole,
    plan: MaskPlan,
}

fn mask(config: &ExperimentConfig) -> Result<(), CliError> {
    let (_, data) = prepared(config)?;
    let plans = ROLES
        .iter()
        .map(|&role| Ok(SplitPlan { split: role, plan: split_plan(&config.train, &data, role)? }))
        .collect::<Result<Vec<_>, CliError>>()?;
    write_report(config, "mask.json", "mask", &plans)?;
    Ok(())
}

#[derive(Serialize)]
struct SplitAudit {
    split: SplitRole,
    configured: MaskAudit,
    uniform_corrected: MaskAudit,
    uniform_legacy: MaskAudit,
}

fn audit(config: &ExperimentConfig) -> Result<(), CliError> {
    let (_, data) = prepared(config)?;
    let mut rows = Vec::new();
    for (i, role) in ROLES.into_iter().enumerate() {
        let batch = match role {
            SplitRole::Train => &data.train,
            SplitRole::Val => &data.val,
            SplitRole::Test => &data.test,
        };
        let plan = split_plan(&config.train, &data, role)?;
        let rate = config.train.masking.rate;
        let seed = csai_core::rng::derive_seed(config.seed, 100 + i as u64);
        let uniform = |mode| -> Result<MaskAudit, CliError> {
            Ok(audit_mask_plan(&plan_uniform_mask(batch, rate, seed, mode)?, batch)?)
        };
        rows.push(SplitAudit {
            split: role,
            configured: audit_mask_plan(&plan, batch)?,
            uniform_corrected: uniform(MaskMode::Corrected)?,
            uniform_legacy: uniform(MaskMode::Legacy)?,
        });
    }
    write_report(config, "audit.json", "audit", &rows)?;
    Ok(())
}

fn train_split(config: &ExperimentConfig) -> Result<(), CliError> {
    let (_, data) = prepared(config)?;
    let outcome = train(&config.train, &data)?;
    let result = split_result(&config.train, &data, &outcome)?;
    info!(
        "test MAE {:.4} (mean {:.4}, LOCF {:.4}), best epoch {}",
        result.test.mae, result.baselines.mean.mae, result.baselines.locf.mae, result.best_epoch
    );
    let dir = out_dir(config)?;
    let ckpt = dir.join("model.ckpt");
    let file = fs::File::create(&ckpt).map_err(|e| runtime("cannot create", &ckpt, e))?;
    outcome
        .store
        .write_checkpoint(std::io::BufWriter::new(file))
        .map_err(|e| runtime("cannot write", &ckpt, e))?;
    write_report(config, "train.json", "train", &result)?;
    write_table_file(config, "history.csv", &history_table(&result.history))
}

fn train_cv(config: &ExperimentConfig) -> Result<(), CliError> {
    let ds = config.dataset()?;
    let report = cross_validate(&config.train, &ds)?;
    info!("cv MAE {:.4} +- {:.4}", report.summary.mae.mean, report.summary.mae.std);
    write_report(config, "cv.json", "cv", &report)?;
    write_table_file(config, "cv.csv", &cv_table(&report))
}

fn evaluate(config: &ExperimentConfig, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let ckpt = checkpoint.unwrap_or_else(|| config.out_dir.join("model.ckpt"));
    let file = fs::File::open(&ckpt)
        .map_err(|e| CliError::Validation(format!("cannot open checkpoint {}: {e}", ckpt.display())))?;
    let (_, data) = prepared(config)?;
    let dims = data.train.dims();
    let (model, mut store) = CsaiModel::init(config.train.model.clone(), dims.t, dims.d, Some(&data.tau), 0)?;
    store.read_checkpoint(std::io::BufReader::new(file))?;
    let result: SplitEvaluation = evaluate_split(&config.train, &data, &model, &store)?;
    info!("test MAE {:.4}", result.test.mae);
    write_report(config, "evaluate.json", "evaluate", &result)?;
    Ok(())
}

fn run_ablation(common: &Common, axis: &str, values: &str) -> Result<(), CliError> {
    let axis = AblationAxis::parse(axis, values)?;
    let config = common.resolve()?;
    let ds = config.dataset()?;
    let report = ablate(&config.train, &axis, &ds)?;
    write_report(&config, "ablation.json", "ablation", &report)?;
    write_table_file(&config, "ablation_folds.csv", &ablation_fold_table(&report))?;
    write_table_file(&config, "ablation_summary.csv", &ablation_summary_table(&report))?;
    write_table_file(&config, "sweep.csv", &sweep_series(&report))
}

#[derive(Deserialize)]
struct StoredReport {
    kind: String,
    result: Json,
}

fn parse_result<T: for<'de> Deserialize<'de>>(kind: &str, v: Json) -> Result<T, CliError> {
    serde_json::from_value(v).map_err(|e| CliError::Validation(format!("malformed {kind} report: {e}")))
}

fn table_from_report(stored: StoredReport, table: Option<TableKind>) -> Result<ReportTable, CliError> {
    let kind = stored.kind.as_str();
    let wrong = |t: TableKind| CliError::Validation(format!("a {kind} report has no {t:?} table"));
    match kind {
        "train" => {
            let r: SplitResult = parse_result(kind, stored.result)?;
            match table.unwrap_or(TableKind::History) {
                TableKind::History => Ok(history_table(&r.history)),
                t => Err(wrong(t)),
            }
        }
        "cv" => {
            let r: CvReport = parse_result(kind, stored.result)?;
            match table.unwrap_or(TableKind::Cv) {
                TableKind::Cv => Ok(cv_table(&r)),
                t => Err(wrong(t)),
            }
        }
        "ablation" => {
            let r: AblationReport = parse_result(kind, stored.result)?;
            match table.unwrap_or(TableKind::Summary) {
                TableKind::Summary => Ok(ablation_summary_table(&r)),
                TableKind::Folds => Ok(ablation_fold_table(&r)),
                TableKind::Sweep => Ok(sweep_series(&r)),
                t => Err(wrong(t)),
            }
        }
        other => Err(CliError::Validation(format!("no tables for {other:?} reports"))),
    }
}

fn report(input: &Path, format: Format, table: Option<TableKind>, output: Option<&Path>) -> Result<(), CliError> {
    let text = fs::read_to_string(input)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", input.display())))?;
    let is_csv = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let t = if is_csv {
        ReportTable::from_csv(&text)?
    } else if let Ok(stored) = serde_json::from_str::<StoredReport>(&text) {
        table_from_report(stored, table)?
    } else {
        ReportTable::from_json(&text)
            .map_err(|e| CliError::Validation(format!("{} is neither a report nor a table: {e}", input.display())))?
    };
    let rendered = match format {
        Format::Table => t.to_csv()?,
        Format::Json => t.to_json()? + "\n",
    };
    match output {
        Some(path) => write_text(path, &rendered),
        None => {
            print!("{rendered}");
            Ok(())
        }
    }
}
