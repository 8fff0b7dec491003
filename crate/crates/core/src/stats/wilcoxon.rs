//! Two-sided Wilcoxon rank-sum (Mann–Whitney) test.
//!
//! Midranks for ties. Small tie-free samples (n_x + n_y ≤ 20) use the exact
//! null distribution of the rank sum; everything else uses the normal
//! approximation with tie-corrected variance and a 0.5 continuity correction.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest combined sample size handled by exact enumeration.
pub const EXACT_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    NormalApproximation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Rank sum of the first sample.
    pub statistic: f64,
    pub n_x: usize,
    pub n_y: usize,
    pub method: WilcoxonMethod,
    pub z: Option<f64>,
    pub p_two_sided: f64,
    pub tie_correction_applied: bool,
}

/// Midranks (1-based) of the pooled sample.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        // Positions i..j share the average of ranks i+1..=j.
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Sizes of the groups of tied values (only groups larger than one).
fn tie_groups(values: &[f64]) -> Vec<usize> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let mut j = i + 1;
        while j < v.len() && v[j] == v[i] {
            j += 1;
        }
        if j - i > 1 {
            out.push(j - i);
        }
        i = j;
    }
    out
}

fn check(x: &[f64], y: &[f64]) -> Result<()> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Argument("rank-sum test needs two nonempty samples".into()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::Argument("rank-sum test samples contain NaN".into()));
    }
    Ok(())
}

fn pooled(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().chain(y).copied().collect()
}

pub fn wilcoxon_rank_sum(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    check(x, y)?;
    let all = pooled(x, y);
    if x.len() + y.len() <= EXACT_MAX_N && tie_groups(&all).is_empty() {
        exact(x, y)
    } else {
        normal_approximation(x, y)
    }
}

/// Exact test; requires tie-free samples.
pub fn exact(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    check(x, y)?;
    let all = pooled(x, y);
    if !tie_groups(&all).is_empty() {
        return Err(Error::Argument("exact rank-sum test requires tie-free samples".into()));
    }
    let (nx, ny) = (x.len(), y.len());
    let n = nx + ny;
    if n > 60 {
        return Err(Error::Argument(format!("exact rank-sum test limited to 60 items, got {n}")));
    }
    let ranks = midranks(&all);
    let w = ranks[..nx].iter().sum::<f64>().round() as usize;

    // counts[k][s]: subsets of {1..=i} of size k with rank sum s.
    let max_sum = n * (n + 1) / 2;
    let mut counts = vec![vec![0f64; max_sum + 1]; nx + 1];
    counts[0][0] = 1.0;
    for r in 1..=n {
        for k in (1..=nx.min(r)).rev() {
            for s in (r..=max_sum).rev() {
                counts[k][s] += counts[k - 1][s - r];
            }
        }
    }
    let dist = &counts[nx];
    let total: f64 = dist.iter().sum();
    let lower: f64 = dist[..=w].iter().sum::<f64>() / total;
    let upper: f64 = dist[w..].iter().sum::<f64>() / total;
    Ok(WilcoxonResult {
        statistic: w as f64,
        n_x: nx,
        n_y: ny,
        method: WilcoxonMethod::Exact,
        z: None,
        p_two_sided: (2.0 * lower.min(upper)).min(1.0),
        tie_correction_applied: false,
    })
}

pub fn normal_approximation(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    check(x, y)?;
    let all = pooled(x, y);
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let n = nx + ny;
    let ranks = midranks(&all);
    let w: f64 = ranks[..x.len()].iter().sum();
    let u = w - nx * (nx + 1.0) / 2.0;
    let mean = nx * ny / 2.0;

    let ties = tie_groups(&all);
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = nx * ny / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));

    let base = WilcoxonResult {
        statistic: w,
        n_x: x.len(),
        n_y: y.len(),
        method: WilcoxonMethod::NormalApproximation,
        z: None,
        p_two_sided: 1.0,
        tie_correction_applied: !ties.is_empty(),
    };
    if var <= 0.0 {
        // Every value tied: no evidence of a difference.
        return Ok(base);
    }
    let diff = u - mean;
    let corrected = (diff.abs() - 0.5).max(0.0);
    let z = diff.signum() * corrected / var.sqrt();
    let std_normal = Normal::standard();
    let p = (2.0 * std_normal.sf(z.abs())).clamp(f64::MIN_POSITIVE, 1.0);
    Ok(WilcoxonResult {
        z: Some(z),
        p_two_sided: p,
        ..base
    })
}
