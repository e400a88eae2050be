//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! Arguments select criteria by number (`cargo test --test acceptance -- 5 6`).
//! `SIP_ACCEPT_INSTANCES` sets instances per dataset (default 5).

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::thread;

use ndiff::{Graph, NodeId, Tensor};
use sip_core::bridge::{gp_conditional, PredictiveMixture};
use sip_core::checks::table_checks;
use sip_core::datasets::{grid, DatasetKind};
use sip_core::exact_gp::{log_marginal_likelihood, GpHyper, GpModel};
use sip_core::experiment::{run_experiment, ExperimentConfig, ExperimentResult, InstanceOutcome};
use sip_core::metrics::{crps_gaussian, crps_samples, nll_gaussian, nll_mixture};
use sip_core::objective::alpha_energy_term;
use sip_core::prior::{empirical_moments, rbf_kernel, RffPrior};
use sip_core::ratio::{kl_estimates, kl_from_logits, Discriminator};
use sip_core::rng::Rng;

/// Branch means of the bimodal generator at x = 0.
const BRANCH_HIGH: f64 = 8.776;
const BRANCH_LOW: f64 = -4.794;

struct Sub {
    name: String,
    passed: bool,
    detail: String,
}

fn sub(name: &str, passed: bool, detail: String) -> Sub {
    Sub {
        name: name.into(),
        passed,
        detail,
    }
}

fn report(id: usize, title: &str, subs: &[Sub]) -> bool {
    for s in subs {
        println!("    {} {}: {}", if s.passed { "ok  " } else { "FAIL" }, s.name, s.detail);
    }
    let passed = subs.iter().all(|s| s.passed);
    let failed: Vec<&str> = subs.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect();
    if passed {
        println!("PASS criterion {id}: {title}");
    } else {
        println!("FAIL criterion {id}: {title} (failed: {})", failed.join(", "));
    }
    passed
}

fn instances() -> usize {
    std::env::var("SIP_ACCEPT_INSTANCES")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(5)
}

fn run_dataset(kind: DatasetKind, out: &Path) -> ExperimentResult {
    let cfg = ExperimentConfig {
        dataset: kind,
        n_instances: instances(),
        out_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    let jobs = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    run_experiment(&cfg, jobs).expect("experiment run")
}

fn table_criterion(id: usize, kind: DatasetKind, res: &ExperimentResult) -> bool {
    let subs: Vec<Sub> = table_checks(&res.report, kind)
        .expect("complete report")
        .into_iter()
        .map(|c| sub(&c.name, c.passed, c.detail))
        .collect();
    let n = res.report.records.len() / 2;
    report(id, &format!("{kind} score table over {n} instances"), &subs)
}

/// Splits draws by sign; returns (mean, share) of the positive and negative parts.
fn sign_clusters(draws: &[f64]) -> ((f64, f64), (f64, f64)) {
    let stats = |v: Vec<f64>| {
        let share = v.len() as f64 / draws.len() as f64;
        let mean = if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        (mean, share)
    };
    (
        stats(draws.iter().cloned().filter(|y| *y > 0.0).collect()),
        stats(draws.iter().cloned().filter(|y| *y <= 0.0).collect()),
    )
}

fn bimodal_at_origin(draws: &[f64]) -> (bool, String) {
    let ((hi, hs), (lo, ls)) = sign_clusters(draws);
    let ok = (hi - BRANCH_HIGH).abs() <= 1.5 && (lo - BRANCH_LOW).abs() <= 1.5 && hs >= 0.25 && ls >= 0.25;
    (ok, format!("positive mean {hi:.3} ({:.1}%), negative mean {lo:.3} ({:.1}%)", 100.0 * hs, 100.0 * ls))
}

fn criterion3(inst: &InstanceOutcome) -> bool {
    let n = 10_000;
    let st = inst.dataset.standardization.expect("standardized");
    let mix = inst.sip.predict_original(&[0.0], &st, &mut Rng::new(31)).unwrap();
    let sip_draws = mix.sample(&mut Rng::new(32), n).unwrap().into_data();
    let (sip_ok, sip_detail) = bimodal_at_origin(&sip_draws);

    let (m, v) = inst.gp.predict_original(&[0.0], &st).unwrap();
    let mut rng = Rng::new(33);
    let gp_draws: Vec<f64> = (0..n).map(|_| m[0] + v[0].sqrt() * rng.standard_normal()).collect();
    let (gp_bimodal, gp_detail) = bimodal_at_origin(&gp_draws);
    report(
        3,
        "bimodal predictive at x=0",
        &[
            sub("sip_two_clusters", sip_ok, sip_detail),
            sub("gp_rejected", !gp_bimodal, gp_detail),
        ],
    )
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn criterion4(inst: &InstanceOutcome) -> bool {
    let st = inst.dataset.standardization.expect("standardized");
    let xs = grid(-4.0, 4.0, 101);
    let mix = inst.sip.predict_original(&xs, &st, &mut Rng::new(41)).unwrap();
    let sip_std = mix.std();
    let target: Vec<f64> = xs.iter().map(|x| x.sin().abs()).collect();
    let r = pearson(&sip_std, &target);

    // interior: |x| <= 3.6, away from the edges of the training range
    let (_, var) = inst.gp.predict_original(&xs[5..96], &st).unwrap();
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let n = sd.len() as f64;
    let mean = sd.iter().sum::<f64>() / n;
    let cv = (sd.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / mean;
    report(
        4,
        "heteroscedastic predictive spread",
        &[
            sub("sip_std_tracks_abs_sin", r >= 0.8, format!("pearson {r:.4} >= 0.8")),
            sub("gp_std_flat", cv <= 0.15, format!("coefficient of variation {cv:.4} <= 0.15")),
        ],
    )
}

// Dense reference linear algebra for the oracles below.

fn dense_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().cloned().chain((0..n).map(|j| (i == j) as u8 as f64)).collect())
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        let d = m[c][c];
        m[c].iter_mut().for_each(|v| *v /= d);
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                let pivot = m[c].clone();
                m[r].iter_mut().zip(&pivot).for_each(|(v, p)| *v -= f * p);
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn dense_log_det(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut m = a.to_vec();
    let mut total = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        total += m[c][c].abs().ln();
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            let pivot = m[c].clone();
            m[r].iter_mut().zip(&pivot).for_each(|(v, p)| *v -= f * p);
        }
    }
    total
}

fn matvec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter().map(|r| r.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

fn dense_kernel(a: &[f64], b: &[f64], l: f64, sv: f64) -> Vec<Vec<f64>> {
    a.iter()
        .map(|x| b.iter().map(|y| sv * (-(x - y).powi(2) / (2.0 * l * l)).exp()).collect())
        .collect()
}

fn oracle_autodiff() -> Sub {
    // loss = logsumexp(L⁻¹ b) + Σ log diag(L), L = chol(A Aᵀ + I)
    let f = |g: &mut Graph, a: NodeId, b: NodeId| -> NodeId {
        let at = g.transpose(a).unwrap();
        let aa = g.matmul(a, at).unwrap();
        let eye = g.constant(Tensor::eye(3));
        let spd = g.add(aa, eye).unwrap();
        let l = g.cholesky(spd).unwrap();
        let z = g.solve_triangular(l, b, false).unwrap();
        let s = g.logsumexp(z).unwrap();
        let d = g.diag(l).unwrap();
        let ld = g.log(d).unwrap();
        let t = g.sum(ld).unwrap();
        g.add(s, t).unwrap()
    };
    let a0 = Tensor::new(&[3, 3], vec![0.9, -0.3, 0.2, 0.1, 1.1, -0.4, 0.5, 0.2, 0.8]).unwrap();
    let b0 = Tensor::new(&[3, 1], vec![0.3, -1.2, 0.7]).unwrap();
    let value = |a: &Tensor, b: &Tensor| {
        let mut g = Graph::new();
        let (an, bn) = (g.constant(a.clone()), g.constant(b.clone()));
        let r = f(&mut g, an, bn);
        g.scalar(r)
    };
    let mut g = Graph::new();
    let an = g.variable(a0.clone());
    let bn = g.variable(b0.clone());
    let root = f(&mut g, an, bn);
    g.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for (which, base, node) in [(0, &a0, an), (1, &b0, bn)] {
        let analytic = g.grad(node).clone();
        let h = 1e-6;
        let mut num = Vec::new();
        for i in 0..base.len() {
            let eval = |d: f64| {
                let mut t = base.clone();
                t.data_mut()[i] += d;
                if which == 0 { value(&t, &b0) } else { value(&a0, &t) }
            };
            num.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        let diff = analytic.data().iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.norm().max(1e-8);
        worst = worst.max(diff / scale);
    }
    sub("autodiff_finite_differences", worst <= 1e-5, format!("relative error {worst:.2e} <= 1e-5"))
}

fn oracle_conditional_and_gp() -> Sub {
    let x = [-1.7, -0.6, 0.1, 0.9, 2.2];
    let (l, sv) = (0.8, 1.3);
    let k = dense_kernel(&x, &x, l, sv);
    let cov = Tensor::new(&[5, 5], k.iter().flatten().cloned().collect()).unwrap();
    let u = [0.4, -0.9];
    let c = gp_conditional(&Tensor::zeros(&[5]), &cov, &Tensor::new(&[1, 2], u.to_vec()).unwrap()).unwrap();
    let mut kuu = dense_kernel(&x[..2], &x[..2], l, sv);
    kuu.iter_mut().enumerate().for_each(|(i, r)| r[i] += c.jitter_used);
    let inv = dense_inverse(&kuu);
    let kfu = dense_kernel(&x[2..], &x[..2], l, sv);
    let mut err: f64 = 0.0;
    let w = matvec(&inv, &u);
    for (i, row) in kfu.iter().enumerate() {
        let mean: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
        let var = sv - row.iter().zip(matvec(&inv, row)).map(|(a, b)| a * b).sum::<f64>();
        err = err.max((c.mean.get(0, i) - mean).abs()).max((c.var.data()[i] - var.max(0.0)).abs());
    }

    let y = [0.3, -0.5, 1.1, 0.2, -1.4];
    let hyper = GpHyper {
        log_lengthscale: l.ln(),
        log_signal_var: sv.ln(),
        log_noise_var: (0.1f64).ln(),
    };
    let mut ky = k.clone();
    ky.iter_mut().enumerate().for_each(|(i, r)| r[i] += 0.1);
    let kinv = dense_inverse(&ky);
    let alpha = matvec(&kinv, &y);
    let lml = -0.5 * y.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>()
        - 0.5 * dense_log_det(&ky)
        - 2.5 * (2.0 * std::f64::consts::PI).ln();
    err = err.max((log_marginal_likelihood(&hyper, &x, &y).unwrap() - lml).abs());
    let model = GpModel::condition(hyper, &x, &y).unwrap();
    let xs = [-0.2, 1.5];
    let (pm, pv) = model.posterior_predict(&xs).unwrap();
    for (j, ks) in dense_kernel(&xs, &x, l, sv).iter().enumerate() {
        let mean: f64 = ks.iter().zip(&alpha).map(|(a, b)| a * b).sum();
        let var = sv + 0.1 - ks.iter().zip(matvec(&kinv, ks)).map(|(a, b)| a * b).sum::<f64>();
        err = err.max((pm[j] - mean).abs()).max((pv[j] - var).abs());
    }
    sub("conditional_and_exact_gp_vs_dense", err <= 1e-8, format!("max error {err:.2e} <= 1e-8"))
}

fn oracle_rff_kernel() -> Sub {
    let prior = RffPrior::new(&mut Rng::new(10), 500).unwrap();
    let mut store = ndiff::ParamStore::new();
    prior.init_params(&mut store);
    let x = grid(-4.0, 4.0, 21);
    let f = prior.sample_functions(&store, &mut Rng::new(11), &Tensor::column(x.clone()), 10_000).unwrap();
    let (_, cov) = empirical_moments(&f).unwrap();
    let err = cov.max_abs_diff(&rbf_kernel(&x, &x, 1.0, 1.0));
    sub("rff_kernel_vs_rbf", err <= 0.15, format!("max-abs error {err:.4} <= 0.15"))
}

fn oracle_discriminator() -> Sub {
    let mut d = Discriminator::new(1, &[100, 100], 0.01, 1e-3, &mut Rng::new(1)).unwrap();
    let (mut rq, mut rp) = (Rng::new(2), Rng::new(3));
    for _ in 0..4000 {
        let q = rq.normal(1.0, 1.0, &[256, 1]).unwrap();
        let p = rp.normal(0.0, 1.0, &[256, 1]).unwrap();
        d.step(&q, &p).unwrap();
    }
    let reference = Rng::new(4).normal(0.0, 1.0, &[100_000, 1]).unwrap();
    let u = grid(-1.0, 2.0, 61);
    let t = d.logits(&Tensor::column(u.clone()), &reference).unwrap();
    let mae = u.iter().zip(t.data()).map(|(u, t)| (t - (u - 0.5)).abs()).sum::<f64>() / u.len() as f64;
    let q = Rng::new(5).normal(1.0, 1.0, &[20_000, 1]).unwrap();
    let p = Rng::new(6).normal(0.0, 1.0, &[20_000, 1]).unwrap();
    let (kq, kp) = kl_estimates(&d, &q, &p).unwrap();
    sub(
        "discriminator_log_ratio",
        mae <= 0.1,
        format!("MAE {mae:.4} <= 0.1 (trained KL estimates {kq:.3}, {kp:.3})"),
    )
}

fn oracle_analytic_kl() -> Sub {
    let q = Rng::new(7).normal(1.0, 1.0, &[100_000]).unwrap();
    let p = Rng::new(8).normal(0.0, 1.0, &[100_000]).unwrap();
    let t = |u: &Tensor| u.data().iter().map(|u| u - 0.5).collect::<Vec<_>>();
    let (kq, kp) = kl_from_logits(&t(&q), &t(&p)).unwrap();
    let ok = (kq - 0.5).abs() <= 0.05 && (kp - 0.5).abs() <= 0.05;
    sub("kl_with_analytic_ratio", ok, format!("{kq:.4}, {kp:.4} within 0.05 of 0.5"))
}

fn oracle_crps() -> Sub {
    let (mu, sd, y) = ([0.4, -1.0, 2.0], [0.7, 1.0, 0.5], [1.0, -2.5, 2.2]);
    let mut rng = Rng::new(12);
    let k = 10_000;
    let draws: Vec<f64> = (0..k).flat_map(|_| (0..3).map(|i| mu[i] + sd[i] * rng.standard_normal()).collect::<Vec<_>>()).collect();
    let a = crps_samples(&Tensor::new(&[k, 3], draws).unwrap(), &y).unwrap();
    let b = crps_gaussian(&mu, &sd, &y).unwrap();
    sub("crps_samples_vs_closed_form", (a - b).abs() <= 1e-2, format!("|{a:.4} - {b:.4}| <= 1e-2"))
}

fn oracle_alpha_limit() -> Sub {
    let (s, n, nv) = (3, 2, 0.4);
    let f = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.5, -1.0], vec![-0.5, 0.3]]).unwrap();
    let y = Tensor::from_vec(vec![0.2, 0.4]);
    let got = alpha_energy_term(&f, &y, nv, 1e-4, n).unwrap();
    let mut want = 0.0;
    for i in 0..n {
        for k in 0..s {
            let r = y.data()[i] - f.get(k, i);
            want += (-0.5 * (2.0 * std::f64::consts::PI * nv).ln() - r * r / (2.0 * nv)) / s as f64;
        }
    }
    sub("alpha_energy_small_alpha_limit", (got - want).abs() <= 1e-3, format!("|{got:.5} - {want:.5}| <= 1e-3"))
}

fn oracle_mixture_collapse() -> Sub {
    let means = [0.3, -1.2, 2.5];
    let vars = [0.2, 0.5, 1.0];
    let noise = 0.15;
    let mix = PredictiveMixture::new(Tensor::new(&[1, 3], means.to_vec()).unwrap(), Tensor::new(&[1, 3], vars.to_vec()).unwrap(), noise).unwrap();
    let y = [0.0, -1.0, 4.0];
    let a = nll_mixture(&mix, &y).unwrap();
    let total: Vec<f64> = vars.iter().map(|v| v + noise).collect();
    let b = nll_gaussian(&means, &total, &y).unwrap();
    sub("single_component_mixture_nll", (a - b).abs() <= 1e-12 * b.abs(), format!("{a} vs {b}"))
}

fn criterion5() -> bool {
    let subs = [
        oracle_autodiff(),
        oracle_conditional_and_gp(),
        oracle_rff_kernel(),
        oracle_discriminator(),
        oracle_analytic_kl(),
        oracle_crps(),
        oracle_alpha_limit(),
        oracle_mixture_collapse(),
    ];
    report(5, "oracle suites", &subs)
}

fn criterion6() -> bool {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let overrides = [
        "n_instances=2",
        "n_points=80",
        "sip.epochs=3",
        "sip.batch_size=40",
        "sip.m_inducing=8",
        "sip.s_posterior=6",
        "sip.s_prior_moments=30",
        "sip.s_predict=6",
        "sip.rff_features=60",
        "sip.posterior_hidden=[10,10]",
        "sip.disc_hidden=[10]",
        "gp.restarts=2",
        "gp.steps=30",
        "gp.fit_points=40",
        "figure_grid=21",
    ];
    let mut subs = Vec::new();
    for d in &dirs {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_sip"));
        cmd.args(["run", "--jobs", "1", "--out", d.path().to_str().unwrap()]);
        for o in overrides {
            cmd.args(["--set", o]);
        }
        let out = cmd.output().unwrap();
        subs.push(sub("run_succeeds", out.status.success(), format!("exit {:?}", out.status.code())));
    }
    let mut names: Vec<_> = fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let mut differing = Vec::new();
    for n in &names {
        let a = fs::read(dirs[0].path().join(n)).unwrap();
        let b = fs::read(dirs[1].path().join(n)).ok();
        if b.as_deref() != Some(&a[..]) {
            differing.push(n.to_string_lossy().into_owned());
        }
    }
    subs.push(sub(
        "byte_identical_outputs",
        differing.is_empty() && names.len() >= 9,
        format!("{} files compared, differing: {differing:?}", names.len()),
    ));
    report(6, "repeat runs are byte-identical", &subs)
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |c: usize| selected.is_empty() || selected.contains(&c);
    let mut ok = true;

    if want(5) {
        ok &= criterion5();
    }
    if want(6) {
        ok &= criterion6();
    }
    if want(1) || want(3) {
        let dir = tempfile::tempdir().unwrap();
        let res = run_dataset(DatasetKind::Bimodal, dir.path());
        if want(1) {
            ok &= table_criterion(1, DatasetKind::Bimodal, &res);
        }
        if want(3) {
            ok &= criterion3(res.first.as_ref().expect("instance 0 succeeded"));
        }
    }
    if want(2) || want(4) {
        let dir = tempfile::tempdir().unwrap();
        let res = run_dataset(DatasetKind::Heteroscedastic, dir.path());
        if want(2) {
            ok &= table_criterion(2, DatasetKind::Heteroscedastic, &res);
        }
        if want(4) {
            ok &= criterion4(res.first.as_ref().expect("instance 0 succeeded"));
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
