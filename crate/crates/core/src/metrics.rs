//! Evaluation metrics over de-normalized predictions.
//!
//! MAE and RMSE are plain elementwise means. MAPE averages `|e/y|` over
//! entries with `|y| > 1e-8` and is reported as undefined when every target
//! is masked. RSE divides the prediction error norm by the error norm of the
//! whole-tensor mean predictor. CORR is the mean over variables of the
//! Pearson correlation between the predicted and true series; variables
//! whose true or predicted series has zero variance are excluded.

use crate::error::{Error, Result};

pub const MAPE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
    pub rse: Option<f64>,
    pub corr: Option<f64>,
}

/// `pred` and `target` are `[samples, steps, nodes]`, de-normalized.
pub fn metrics(pred: &[f64], target: &[f64], steps: usize, nodes: usize) -> Result<MetricReport> {
    if pred.len() != target.len() {
        return Err(Error::Dimension(format!(
            "metric operands differ: {} vs {} values",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() || steps == 0 || nodes == 0 || pred.len() % (steps * nodes) != 0 {
        return Err(Error::Contract("metrics need a non-empty [s,q,n] tensor".into()));
    }
    let count = pred.len() as f64;
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut mape_sum = 0.0;
    let mut mape_count = 0usize;
    let mut target_mean = 0.0;
    for (&p, &y) in pred.iter().zip(target) {
        let e = p - y;
        abs_sum += e.abs();
        sq_sum += e * e;
        if y.abs() > MAPE_EPS {
            mape_sum += (e / y).abs();
            mape_count += 1;
        }
        target_mean += y;
    }
    target_mean /= count;
    let mut denom = 0.0;
    for &y in target {
        let d = y - target_mean;
        denom += d * d;
    }
    let mae = abs_sum / count;
    let rmse = (sq_sum / count).sqrt();
    let mape = if mape_count > 0 { Some(mape_sum / mape_count as f64) } else { None };
    let rse = if denom > 0.0 { Some((sq_sum / denom).sqrt()) } else { None };

    // Per-variable Pearson correlation over the (sample, step) series.
    let samples = pred.len() / (steps * nodes);
    let series_len = (samples * steps) as f64;
    let mut corr_sum = 0.0;
    let mut corr_count = 0usize;
    for v in 0..nodes {
        let mut mp = 0.0;
        let mut my = 0.0;
        for s in 0..samples {
            for q in 0..steps {
                let at = (s * steps + q) * nodes + v;
                mp += pred[at];
                my += target[at];
            }
        }
        mp /= series_len;
        my /= series_len;
        let mut cov = 0.0;
        let mut vp = 0.0;
        let mut vy = 0.0;
        for s in 0..samples {
            for q in 0..steps {
                let at = (s * steps + q) * nodes + v;
                let dp = pred[at] - mp;
                let dy = target[at] - my;
                cov += dp * dy;
                vp += dp * dp;
                vy += dy * dy;
            }
        }
        if vp > 0.0 && vy > 0.0 {
            corr_sum += cov / (vp.sqrt() * vy.sqrt());
            corr_count += 1;
        }
    }
    let corr = if corr_count > 0 { Some(corr_sum / corr_count as f64) } else { None };

    Ok(MetricReport { mae, rmse, mape, rse, corr })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "undefined".to_string(),
    }
}

impl MetricReport {
    /// Single-line CSV with header.
    pub fn to_csv(&self) -> String {
        format!(
            "mae,rmse,mape,rse,corr\n{:.6},{:.6},{},{},{}\n",
            self.mae,
            self.rmse,
            fmt_opt(self.mape),
            fmt_opt(self.rse),
            fmt_opt(self.corr),
        )
    }

    /// Aligned human-readable table.
    pub fn to_table(&self) -> String {
        format!(
            "metric   value\n------   ----------\nmae      {:<12.6}\nrmse     {:<12.6}\nmape     {:<12}\nrse      {:<12}\ncorr     {:<12}\n",
            self.mae,
            self.rmse,
            fmt_opt(self.mape),
            fmt_opt(self.rse),
            fmt_opt(self.corr),
        )
    }
}
