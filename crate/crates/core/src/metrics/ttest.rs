//! Paired two-sided Student t-test.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub mean_a: f64,
    pub mean_b: f64,
    pub std_a: f64,
    pub std_b: f64,
    pub t_value: f64,
    pub p_value: f64,
    pub n: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Two-sided tail probability `P(|T| >= |t|)` for Student's t with `dof`
/// degrees of freedom, via the regularized incomplete beta function.
pub fn two_sided_p(t: f64, dof: f64) -> f64 {
    beta_reg(dof / 2.0, 0.5, dof / (dof + t * t))
}

pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{} vs {} paired measurements", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::invalid("paired t-test needs at least 2 pairs"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-test input"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean_d, std_d) = mean_std(&diffs);
    if std_d == 0.0 {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    let n = a.len();
    let t_value = mean_d * (n as f64).sqrt() / std_d;
    let (mean_a, std_a) = mean_std(a);
    let (mean_b, std_b) = mean_std(b);
    Ok(TTestResult {
        mean_a,
        mean_b,
        std_a,
        std_b,
        t_value,
        p_value: two_sided_p(t_value, (n - 1) as f64),
        n,
    })
}
