//! Target bands for the aggregate score table of each dataset.

use crate::datasets::DatasetKind;
use crate::error::{Result, SipError};
use crate::experiment::Report;
use crate::metrics::Method;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            detail,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TableBands {
    pub gp_nll: (f64, f64),
    pub sip_nll: (f64, f64),
    pub min_nll_gap: f64,
    pub rmse: (f64, f64),
    /// Largest allowed |RMSE_gp − RMSE_sip|, if any.
    pub max_rmse_gap: Option<f64>,
}

pub fn bands(kind: DatasetKind) -> TableBands {
    match kind {
        DatasetKind::Bimodal => TableBands {
            gp_nll: (2.8, 3.3),
            sip_nll: (1.8, 2.5),
            min_nll_gap: 0.5,
            rmse: (4.8, 5.2),
            max_rmse_gap: Some(0.05),
        },
        DatasetKind::Heteroscedastic => TableBands {
            gp_nll: (1.6, 1.85),
            sip_nll: (1.3, 1.6),
            min_nll_gap: 0.15,
            rmse: (1.25, 1.45),
            max_rmse_gap: None,
        },
    }
}

fn within(v: f64, (lo, hi): (f64, f64)) -> bool {
    v >= lo && v <= hi
}

/// Evaluates the bands of `kind` on the aggregate means in `report`.
pub fn table_checks(report: &Report, kind: DatasetKind) -> Result<Vec<Check>> {
    let mean = |method: Method, metric: &str| {
        report
            .aggregate
            .iter()
            .find(|r| r.dataset == kind && r.method == method && r.metric == metric)
            .map(|r| r.mean)
            .ok_or_else(|| SipError::contract(format!("report lacks {kind} {method} {metric}")))
    };
    let b = bands(kind);
    let gp_nll = mean(Method::ExactGp, "nll")?;
    let sip_nll = mean(Method::Sip, "nll")?;
    let gp_rmse = mean(Method::ExactGp, "rmse")?;
    let sip_rmse = mean(Method::Sip, "rmse")?;
    let gp_crps = mean(Method::ExactGp, "crps")?;
    let sip_crps = mean(Method::Sip, "crps")?;
    let mut out = vec![
        Check::new("gp_nll", within(gp_nll, b.gp_nll), format!("{gp_nll:.4} in {:?}", b.gp_nll)),
        Check::new("sip_nll", within(sip_nll, b.sip_nll), format!("{sip_nll:.4} in {:?}", b.sip_nll)),
        Check::new(
            "nll_gap",
            gp_nll - sip_nll >= b.min_nll_gap,
            format!("{:.4} >= {}", gp_nll - sip_nll, b.min_nll_gap),
        ),
        Check::new("gp_rmse", within(gp_rmse, b.rmse), format!("{gp_rmse:.4} in {:?}", b.rmse)),
        Check::new("sip_rmse", within(sip_rmse, b.rmse), format!("{sip_rmse:.4} in {:?}", b.rmse)),
    ];
    if let Some(gap) = b.max_rmse_gap {
        let d = (gp_rmse - sip_rmse).abs();
        out.push(Check::new("rmse_gap", d <= gap, format!("{d:.4} <= {gap}")));
    }
    out.push(Check::new(
        "crps_order",
        sip_crps < gp_crps,
        format!("sip {sip_crps:.4} < gp {gp_crps:.4}"),
    ));
    Ok(out)
}
