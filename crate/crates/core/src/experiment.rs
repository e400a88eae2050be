//! Multi-instance experiment protocol: per-seed data, an exact GP and a SIP
//! model per instance, scores on held-out data, aggregation and reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::bridge::{dump_predictive_samples, PredictiveMixture};
use crate::csv::{Cell, CsvWriter};
use crate::datasets::{self, Dataset, DatasetKind, Standardization, DEFAULT_SIZE, X_HIGH, X_LOW};
use crate::error::{Result, SipError};
use crate::exact_gp::{dump_gp_predictive, GpFitConfig, GpModel};
use crate::metrics::{self, Method, MetricsRecord};
use crate::objective::{self, SipConfig, SipModel, TrainTrace};
use crate::rng::{Purpose, Rng};

/// Draws per test point for the sample-based CRPS.
pub const CRPS_DRAWS: usize = 1000;

pub const METRICS_INSTANCES: &str = "metrics_instances.csv";
pub const METRICS_AGGREGATE: &str = "metrics_aggregate.csv";
pub const REPORT_JSON: &str = "report.json";
pub const TABLE_TXT: &str = "table.txt";
pub const FIG_DATA: &str = "fig_data.csv";
pub const FIG_PRIOR_SAMPLES: &str = "fig_prior_samples.csv";
pub const FIG_SIP_SAMPLES: &str = "fig_sip_samples.csv";
pub const FIG_GP_PREDICTIVE: &str = "fig_gp_predictive.csv";
pub const TRACE_INSTANCE0: &str = "trace_instance0.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub n_instances: usize,
    pub base_seed: u64,
    /// Training and test points per instance.
    pub n_points: usize,
    pub sip: SipConfig,
    pub gp: GpFitConfig,
    pub out_dir: PathBuf,
    pub figure_grid: usize,
    pub figure_prior_samples: usize,
    pub figure_predictive_draws: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Bimodal,
            n_instances: 20,
            base_seed: 0,
            n_points: DEFAULT_SIZE,
            sip: SipConfig::default(),
            gp: GpFitConfig::default(),
            out_dir: PathBuf::from("results"),
            figure_grid: 201,
            figure_prior_samples: 20,
            figure_predictive_draws: 200,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SipError::Config(m.into()));
        if self.n_instances == 0 {
            return bad("n_instances must be at least 1");
        }
        if self.n_points < self.sip.m_inducing.max(2) {
            return bad("n_points must cover the inducing points");
        }
        if self.gp.restarts == 0 || self.gp.fit_points < 2 {
            return bad("gp needs restarts >= 1 and fit_points >= 2");
        }
        if self.figure_grid < 2 || self.figure_prior_samples == 0 || self.figure_predictive_draws == 0 {
            return bad("figure sizes must be positive");
        }
        self.sip.validate()
    }

    /// Applies a `key=value` override. Keys are dotted paths into the JSON
    /// form, e.g. `sip.alpha=0.5` or `dataset=heteroscedastic`; values are
    /// parsed as JSON and fall back to plain strings.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| SipError::Config(format!("override `{assignment}` is not key=value")))?;
        let value: serde_json::Value =
            serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self)?;
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| SipError::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(tree).map_err(|e| SipError::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SipError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| SipError::Config(format!("{}: {e}", path.display())))
    }

    /// SIP settings for instance seed `seed`.
    pub fn sip_for(&self, seed: u64) -> SipConfig {
        SipConfig {
            seed,
            ..self.sip.clone()
        }
    }
}

fn standardization(ds: &Dataset) -> Result<Standardization> {
    ds.standardization
        .ok_or_else(|| SipError::contract("expected a standardized dataset"))
}

fn original(values: &Tensor, st: &Standardization) -> Vec<f64> {
    values.data().iter().map(|v| st.y_inverse(*v)).collect()
}

/// A fitted exact GP with its held-out predictive in original units.
#[derive(Clone, Debug)]
pub struct GpOutcome {
    pub model: GpModel,
    pub lml_trace: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub record: MetricsRecord,
}

impl GpOutcome {
    /// Predictive mean and variance in original units at original-unit `x`.
    pub fn predict_original(&self, x: &[f64], st: &Standardization) -> Result<(Vec<f64>, Vec<f64>)> {
        let xs: Vec<f64> = x.iter().map(|v| st.x_forward(*v)).collect();
        let (m, v) = self.model.posterior_predict(&xs)?;
        let s2 = st.y_std * st.y_std;
        Ok((
            m.into_iter().map(|a| st.y_inverse(a)).collect(),
            v.into_iter().map(|a| a * s2).collect(),
        ))
    }
}

/// Fits the exact GP on a standardized dataset and scores it on the test split.
pub fn fit_gp(ds: &Dataset, cfg: &GpFitConfig) -> Result<GpOutcome> {
    let st = standardization(ds)?;
    let mut rng = Rng::for_purpose(ds.seed, Purpose::GpFit);
    let fit = GpModel::fit(ds.x_train.data(), ds.y_train.data(), cfg, &mut rng)?;
    let (m, v) = fit.model.posterior_predict(ds.x_test.data())?;
    let s2 = st.y_std * st.y_std;
    let mean: Vec<f64> = m.iter().map(|a| st.y_inverse(*a)).collect();
    let var: Vec<f64> = v.iter().map(|a| a * s2).collect();
    let std: Vec<f64> = var.iter().map(|a| a.sqrt()).collect();
    let y = original(&ds.y_test, &st);
    let record = MetricsRecord {
        dataset: ds.kind,
        seed: ds.seed,
        method: Method::ExactGp,
        rmse: metrics::rmse(&mean, &y)?,
        nll: metrics::nll_gaussian(&mean, &var, &y)?,
        crps: metrics::crps_gaussian(&mean, &std, &y)?,
    };
    Ok(GpOutcome {
        model: fit.model,
        lml_trace: fit.trace,
        mean,
        var,
        record,
    })
}

/// A trained SIP model with its held-out predictive in original units.
#[derive(Clone, Debug)]
pub struct SipOutcome {
    pub model: SipModel,
    pub trace: TrainTrace,
    pub mixture: PredictiveMixture,
    pub record: MetricsRecord,
}

impl SipOutcome {
    /// Predictive mixture in original units at original-unit `x`.
    pub fn predict_original(&self, x: &[f64], st: &Standardization, rng: &mut Rng) -> Result<PredictiveMixture> {
        let xs = Tensor::column(x.iter().map(|v| st.x_forward(*v)).collect());
        Ok(self.model.predict(&xs, rng)?.destandardize(st))
    }
}

/// Trains SIP on a standardized dataset and scores it on the test split.
pub fn train_sip(ds: &Dataset, cfg: &SipConfig) -> Result<SipOutcome> {
    let st = standardization(ds)?;
    let (model, trace) = objective::train(ds, cfg)?;
    let mut predict_rng = Rng::for_purpose(cfg.seed, Purpose::Predict);
    let mixture = model.predict(&ds.x_test, &mut predict_rng)?.destandardize(&st);
    let y = original(&ds.y_test, &st);
    let draws = mixture.sample(&mut Rng::for_purpose(cfg.seed, Purpose::MixtureDraws), CRPS_DRAWS)?;
    let record = MetricsRecord {
        dataset: ds.kind,
        seed: ds.seed,
        method: Method::Sip,
        rmse: metrics::rmse(&mixture.mean(), &y)?,
        nll: metrics::nll_mixture(&mixture, &y)?,
        crps: metrics::crps_samples(&draws, &y)?,
    };
    Ok(SipOutcome {
        model,
        trace,
        mixture,
        record,
    })
}

/// Everything produced for one seed.
#[derive(Clone, Debug)]
pub struct InstanceOutcome {
    pub index: usize,
    pub dataset: Dataset,
    pub gp: GpOutcome,
    pub sip: SipOutcome,
}

impl InstanceOutcome {
    pub fn records(&self) -> [MetricsRecord; 2] {
        [self.gp.record.clone(), self.sip.record.clone()]
    }
}

/// Standardized dataset for instance `index`.
pub fn instance_data(cfg: &ExperimentConfig, index: usize) -> Result<Dataset> {
    datasets::generate(cfg.dataset, cfg.base_seed + index as u64, cfg.n_points)?.standardize()
}

pub fn run_instance(cfg: &ExperimentConfig, index: usize) -> Result<InstanceOutcome> {
    let ds = instance_data(cfg, index)?;
    let gp = fit_gp(&ds, &cfg.gp)?;
    let sip = train_sip(&ds, &cfg.sip_for(ds.seed))?;
    Ok(InstanceOutcome {
        index,
        dataset: ds,
        gp,
        sip,
    })
}

/// Runs `f(i)` for `i in 0..n` on up to `jobs` threads; results come back in
/// index order.
pub fn run_indexed<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("result slots poisoned")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|s| s.expect("every index ran"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceFailure {
    pub index: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: DatasetKind,
    pub method: Method,
    pub metric: String,
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub records: Vec<MetricsRecord>,
    pub aggregate: Vec<AggregateRow>,
    pub failures: Vec<InstanceFailure>,
}

impl Report {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn find(&self, method: Method, metric: &str) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|r| r.method == method && r.metric == metric)
    }
}

/// Mean and standard error (sample standard deviation over `√n`).
pub fn mean_stderr(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(SipError::contract("mean_stderr needs at least one value"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

pub const METRIC_NAMES: [&str; 3] = ["rmse", "nll", "crps"];

fn metric_value(r: &MetricsRecord, metric: &str) -> f64 {
    match metric {
        "rmse" => r.rmse,
        "nll" => r.nll,
        _ => r.crps,
    }
}

/// Per `(dataset, method, metric)` mean and standard error, in first-seen
/// dataset order then method order.
pub fn aggregate(records: &[MetricsRecord]) -> Result<Vec<AggregateRow>> {
    if records.is_empty() {
        return Err(SipError::contract("no records to aggregate"));
    }
    let mut kinds: Vec<DatasetKind> = Vec::new();
    for r in records {
        if !kinds.contains(&r.dataset) {
            kinds.push(r.dataset);
        }
    }
    let mut rows = Vec::new();
    for kind in kinds {
        for method in [Method::ExactGp, Method::Sip] {
            let group: Vec<&MetricsRecord> =
                records.iter().filter(|r| r.dataset == kind && r.method == method).collect();
            if group.is_empty() {
                continue;
            }
            for metric in METRIC_NAMES {
                let vals: Vec<f64> = group.iter().map(|r| metric_value(r, metric)).collect();
                let (mean, stderr) = mean_stderr(&vals)?;
                rows.push(AggregateRow {
                    dataset: kind,
                    method,
                    metric: metric.to_string(),
                    mean,
                    stderr,
                    n: vals.len(),
                });
            }
        }
    }
    Ok(rows)
}

fn column_title(m: Method) -> &'static str {
    match m {
        Method::ExactGp => "Exact GP",
        Method::Sip => "SIP",
    }
}

/// Plain-text table with one block per dataset, rows RMSE/NLL/CRPS and one
/// column per method present. Returns the text and any warnings about
/// missing methods.
pub fn render_table(rows: &[AggregateRow]) -> Result<(String, Vec<String>)> {
    if rows.is_empty() {
        return Err(SipError::contract("no aggregate rows to render"));
    }
    let mut kinds: Vec<DatasetKind> = Vec::new();
    for r in rows {
        if !kinds.contains(&r.dataset) {
            kinds.push(r.dataset);
        }
    }
    let mut out = String::new();
    let mut warnings = Vec::new();
    for kind in kinds {
        let methods: Vec<Method> = [Method::ExactGp, Method::Sip]
            .into_iter()
            .filter(|m| rows.iter().any(|r| r.dataset == kind && r.method == *m))
            .collect();
        for m in [Method::ExactGp, Method::Sip] {
            if !methods.contains(&m) {
                warnings.push(format!("{kind}: no {m} records, column omitted"));
            }
        }
        let n = rows.iter().find(|r| r.dataset == kind).map_or(0, |r| r.n);
        let _ = writeln!(out, "{kind} ({n} instances)");
        let _ = write!(out, "{:<6}", "");
        for m in &methods {
            let _ = write!(out, "{:>20}", column_title(*m));
        }
        out.push('\n');
        for metric in METRIC_NAMES {
            let _ = write!(out, "{:<6}", metric.to_uppercase());
            for m in &methods {
                let cell = rows
                    .iter()
                    .find(|r| r.dataset == kind && r.method == *m && r.metric == metric)
                    .map_or_else(|| "-".to_string(), |r| format!("{:.3} ± {:.3}", r.mean, r.stderr));
                let _ = write!(out, "{cell:>20}");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    Ok((out, warnings))
}

/// Writes `metrics_instances.csv`, `metrics_aggregate.csv`, `report.json` and
/// `table.txt` into `dir`. Returns the report and table warnings.
pub fn emit_report(
    records: &[MetricsRecord],
    failures: &[InstanceFailure],
    dir: &Path,
) -> Result<(Report, Vec<String>)> {
    let rows = aggregate(records)?;
    fs::create_dir_all(dir).map_err(|e| SipError::io(dir, e))?;

    let mut w = CsvWriter::create(&dir.join(METRICS_INSTANCES), &["dataset", "seed", "method", "rmse", "nll", "crps"])?;
    for r in records {
        w.cells(&[
            Cell::Text(r.dataset.name()),
            Cell::Int(r.seed),
            Cell::Text(r.method.name()),
            Cell::Float(r.rmse),
            Cell::Float(r.nll),
            Cell::Float(r.crps),
        ])?;
    }
    w.finish()?;

    let mut w = CsvWriter::create(&dir.join(METRICS_AGGREGATE), &["dataset", "method", "metric", "mean", "stderr", "n"])?;
    for r in &rows {
        w.cells(&[
            Cell::Text(r.dataset.name()),
            Cell::Text(r.method.name()),
            Cell::Text(&r.metric),
            Cell::Float(r.mean),
            Cell::Float(r.stderr),
            Cell::Int(r.n as u64),
        ])?;
    }
    w.finish()?;

    let report = Report {
        records: records.to_vec(),
        aggregate: rows,
        failures: failures.to_vec(),
    };
    write_text(&dir.join(REPORT_JSON), &(report.to_json()? + "\n"))?;
    let (table, warnings) = render_table(&report.aggregate)?;
    write_text(&dir.join(TABLE_TXT), &table)?;
    Ok((report, warnings))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| SipError::io(path, e))
}

/// Figure CSVs for one instance: training data, prior function draws,
/// SIP predictive draws and GP mean/std on a grid, plus the training trace.
pub fn dump_figures(cfg: &ExperimentConfig, inst: &InstanceOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SipError::io(dir, e))?;
    let st = standardization(&inst.dataset)?;
    let grid = datasets::grid(X_LOW, X_HIGH, cfg.figure_grid);
    let grid_std: Vec<f64> = grid.iter().map(|x| st.x_forward(*x)).collect();
    let mut rng = Rng::for_purpose(inst.dataset.seed, Purpose::Figures);

    inst.dataset.export_csv(&dir.join(FIG_DATA))?;

    let model = &inst.sip.model;
    let prior = model
        .prior
        .sample_functions(&model.store, &mut rng, &Tensor::column(grid_std), cfg.figure_prior_samples)?;
    let mut w = CsvWriter::create(&dir.join(FIG_PRIOR_SAMPLES), &["sample_id", "x", "f"])?;
    for s in 0..cfg.figure_prior_samples {
        for (i, x) in grid.iter().enumerate() {
            w.cells(&[Cell::Int(s as u64), Cell::Float(*x), Cell::Float(st.y_inverse(prior.get(s, i)))])?;
        }
    }
    w.finish()?;

    let mix = inst.sip.predict_original(&grid, &st, &mut rng)?;
    let draws = mix.sample(&mut rng, cfg.figure_predictive_draws)?;
    dump_predictive_samples(&grid, &draws, &dir.join(FIG_SIP_SAMPLES))?;

    let (mean, var) = inst.gp.predict_original(&grid, &st)?;
    let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    dump_gp_predictive(&grid, &mean, &std, &dir.join(FIG_GP_PREDICTIVE))?;

    inst.sip.trace.write_csv(&dir.join(TRACE_INSTANCE0))
}

/// Separates failed instances. Fails when 20% or more of them failed.
fn split_failures<T>(outcomes: Vec<Result<T>>, base_seed: u64) -> Result<(Vec<T>, Vec<InstanceFailure>)> {
    let total = outcomes.len();
    let mut kept = Vec::with_capacity(total);
    let mut failures = Vec::new();
    for (i, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(v) => kept.push(v),
            Err(e) => failures.push(InstanceFailure {
                index: i,
                seed: base_seed + i as u64,
                error: e.to_string(),
            }),
        }
    }
    if !failures.is_empty() && failures.len() * 5 >= total {
        return Err(SipError::Instances {
            failed: failures.len(),
            total,
            details: failures
                .iter()
                .map(|f| format!("instance {} (seed {}): {}", f.index, f.seed, f.error))
                .collect::<Vec<_>>()
                .join("; "),
        });
    }
    Ok((kept, failures))
}

/// Outcome of [`run_experiment`]: instance 0 (when it succeeded) and the report.
pub struct ExperimentResult {
    pub first: Option<InstanceOutcome>,
    pub report: Report,
    pub warnings: Vec<String>,
}

/// Runs every instance, excludes failures when fewer than 20% fail, and
/// writes reports and instance-0 figures to `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<ExperimentResult> {
    cfg.validate()?;
    let outcomes = run_indexed(cfg.n_instances, jobs, |i| {
        run_instance(cfg, i).map(|o| {
            let keep = (i == 0).then(|| o.clone());
            (o.records(), keep)
        })
    });
    let (kept, failures) = split_failures(outcomes, cfg.base_seed)?;
    let mut records = Vec::new();
    let mut first = None;
    for (recs, keep) in kept {
        records.extend(recs);
        if keep.is_some() {
            first = keep;
        }
    }
    let (report, mut warnings) = emit_report(&records, &failures, &cfg.out_dir)?;
    for f in &failures {
        warnings.push(format!("instance {} (seed {}) excluded: {}", f.index, f.seed, f.error));
    }
    match &first {
        Some(inst) => dump_figures(cfg, inst, &cfg.out_dir)?,
        None => warnings.push("instance 0 failed; figure files not written".into()),
    }
    Ok(ExperimentResult {
        first,
        report,
        warnings,
    })
}
