use std::fs;
use std::path::Path;

use proptest::prelude::*;
use sip_core::datasets::DatasetKind;
use sip_core::experiment::*;
use sip_core::metrics::{Method, MetricsRecord};

fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: DatasetKind::Heteroscedastic,
        n_instances: 2,
        base_seed: 3,
        n_points: 60,
        out_dir: out.to_path_buf(),
        figure_grid: 11,
        figure_prior_samples: 3,
        figure_predictive_draws: 5,
        ..ExperimentConfig::default()
    };
    cfg.sip.epochs = 2;
    cfg.sip.batch_size = 20;
    cfg.sip.m_inducing = 6;
    cfg.sip.s_posterior = 4;
    cfg.sip.s_prior_moments = 20;
    cfg.sip.s_predict = 5;
    cfg.sip.rff_features = 40;
    cfg.sip.posterior_hidden = vec![8];
    cfg.sip.disc_hidden = vec![8];
    cfg.gp.restarts = 1;
    cfg.gp.steps = 20;
    cfg.gp.fit_points = 30;
    cfg
}

const OUTPUTS: [&str; 9] = [
    METRICS_INSTANCES,
    METRICS_AGGREGATE,
    REPORT_JSON,
    TABLE_TXT,
    FIG_DATA,
    FIG_PRIOR_SAMPLES,
    FIG_SIP_SAMPLES,
    FIG_GP_PREDICTIVE,
    TRACE_INSTANCE0,
];

#[test]
fn run_is_deterministic_across_job_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&tiny_config(a.path()), 1).unwrap();
    let rb = run_experiment(&tiny_config(b.path()), 2).unwrap();
    assert_eq!(ra.report, rb.report);
    assert_eq!(ra.report.records.len(), 4);
    for name in OUTPUTS {
        let fa = fs::read(a.path().join(name)).unwrap();
        let fb = fs::read(b.path().join(name)).unwrap();
        assert!(!fa.is_empty(), "{name} empty");
        assert_eq!(fa, fb, "{name} differs");
    }
    let table = fs::read_to_string(a.path().join(TABLE_TXT)).unwrap();
    assert!(table.contains("Exact GP") && table.contains("SIP") && table.contains('±'));
    let prior = fs::read_to_string(a.path().join(FIG_PRIOR_SAMPLES)).unwrap();
    assert_eq!(prior.lines().next().unwrap(), "sample_id,x,f");
    assert_eq!(prior.lines().count(), 1 + 3 * 11);
}

#[test]
fn config_overrides_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.apply_override("sip.alpha=0.5").unwrap();
    cfg.apply_override("dataset=heteroscedastic").unwrap();
    assert_eq!(cfg.sip.alpha, 0.5);
    assert_eq!(cfg.dataset, DatasetKind::Heteroscedastic);
    assert!(cfg.apply_override("sip.nope=1").is_err());
    assert!(cfg.apply_override("n_instances=-1").is_err());

    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"n_instances": 3, "gp": {"steps": 10}}"#).unwrap();
    let loaded = ExperimentConfig::from_json_file(&path).unwrap();
    assert_eq!(loaded.n_instances, 3);
    assert_eq!(loaded.gp.steps, 10);
    assert_eq!(loaded.gp.restarts, 3);
    fs::write(&path, r#"{"n_instance": 3}"#).unwrap();
    assert!(ExperimentConfig::from_json_file(&path).is_err());
}

fn record(method: Method, seed: u64, v: (f64, f64, f64)) -> MetricsRecord {
    MetricsRecord {
        dataset: DatasetKind::Bimodal,
        seed,
        method,
        rmse: v.0,
        nll: v.1,
        crps: v.2,
    }
}

fn triple() -> impl Strategy<Value = (f64, f64, f64)> {
    (0.01f64..10.0, -3.0f64..6.0, 0.01f64..5.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn aggregate_mean_is_arithmetic_mean(gp in prop::collection::vec(triple(), 1..25), sip in prop::collection::vec(triple(), 1..25)) {
        let mut records: Vec<MetricsRecord> = gp.iter().enumerate().map(|(i, v)| record(Method::ExactGp, i as u64, *v)).collect();
        records.extend(sip.iter().enumerate().map(|(i, v)| record(Method::Sip, i as u64, *v)));
        let rows = aggregate(&records).unwrap();
        for (method, vals) in [(Method::ExactGp, &gp), (Method::Sip, &sip)] {
            for (metric, pick) in [("rmse", 0), ("nll", 1), ("crps", 2)] {
                let xs: Vec<f64> = vals.iter().map(|v| [v.0, v.1, v.2][pick]).collect();
                let want = xs.iter().sum::<f64>() / xs.len() as f64;
                let row = rows.iter().find(|r| r.method == method && r.metric == metric).unwrap();
                prop_assert_eq!(row.n, xs.len());
                prop_assert!((row.mean - want).abs() <= 1e-12 * want.abs().max(1.0));
                if xs.len() > 1 {
                    let sd = (xs.iter().map(|x| (x - want).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
                    prop_assert!((row.stderr - sd / (xs.len() as f64).sqrt()).abs() <= 1e-12 * sd.max(1.0));
                }
            }
        }
    }

    #[test]
    fn report_json_round_trips(vals in prop::collection::vec(triple(), 1..10)) {
        let records: Vec<MetricsRecord> = vals.iter().enumerate().map(|(i, v)| record(Method::Sip, i as u64, *v)).collect();
        let dir = tempfile::tempdir().unwrap();
        let (report, _) = emit_report(&records, &[], dir.path()).unwrap();
        let parsed = Report::from_json(&fs::read_to_string(dir.path().join(REPORT_JSON)).unwrap()).unwrap();
        prop_assert_eq!(&parsed.records, &records);
        prop_assert_eq!(parsed, report);
    }
}

#[test]
fn partial_report_warns_and_omits_missing_method() {
    let dir = tempfile::tempdir().unwrap();
    let records = vec![record(Method::Sip, 0, (1.0, 2.0, 3.0)), record(Method::Sip, 1, (2.0, 3.0, 4.0))];
    let (_, warnings) = emit_report(&records, &[], dir.path()).unwrap();
    assert!(!warnings.is_empty());
    let table = fs::read_to_string(dir.path().join(TABLE_TXT)).unwrap();
    assert!(!table.contains("Exact GP"));
    assert!(table.contains("1.500 ± 0.500"), "{table}");
    for name in [METRICS_INSTANCES, METRICS_AGGREGATE, REPORT_JSON] {
        assert!(dir.path().join(name).exists());
    }
}
