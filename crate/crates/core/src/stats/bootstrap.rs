//! Subsampling bootstrap comparison of two classifiers.
//!
//! Each iteration draws one subsample of patients without replacement and
//! scores both models on it, so the two F1 samples are paired by iteration.
//! The two F1 samples are then compared with the rank-sum test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::stats::metrics::{confusion, per_class_metrics, F1Average};
use crate::stats::wilcoxon::{wilcoxon_rank_sum, WilcoxonResult};

pub const DEFAULT_SAMPLE_SIZE: usize = 60;
pub const DEFAULT_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub sample_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl BootstrapConfig {
    pub fn with_seed(seed: u64) -> Self {
        BootstrapConfig {
            sample_size: DEFAULT_SAMPLE_SIZE,
            iterations: DEFAULT_ITERATIONS,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    /// Score on every patient.
    pub full_set_f1: f64,
    /// Mean over bootstrap iterations; this is the "Overall" figure in Table-1 style reports.
    pub bootstrap_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub iterations: usize,
    pub sample_size: usize,
    pub seed: u64,
    /// (model A, model B) F1 per iteration.
    pub f1_pairs: Vec<(f64, f64)>,
    /// Patient indices drawn in each iteration.
    pub indices: Vec<Vec<usize>>,
    pub model_a: ModelSummary,
    pub model_b: ModelSummary,
    pub test: WilcoxonResult,
    pub p_two_sided: f64,
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn class_set(vectors: &[&[u8]]) -> Vec<u8> {
    let mut seen = [false; 256];
    for v in vectors {
        for &l in *v {
            seen[l as usize] = true;
        }
    }
    (0..=255u8).filter(|&l| seen[l as usize]).collect()
}

fn score(gold: &[u8], pred: &[u8], classes: &[u8], average: F1Average) -> Result<f64> {
    Ok(average.score(&per_class_metrics(&confusion(gold, pred, classes)?)?))
}

pub fn bootstrap_compare(
    gold_a: &[u8],
    pred_a: &[u8],
    gold_b: &[u8],
    pred_b: &[u8],
    config: BootstrapConfig,
    average: F1Average,
) -> Result<BootstrapResult> {
    let n = gold_a.len();
    if pred_a.len() != n || gold_b.len() != n || pred_b.len() != n {
        return Err(Error::Argument(format!(
            "vectors are not aligned: {n}, {}, {}, {}",
            pred_a.len(),
            gold_b.len(),
            pred_b.len()
        )));
    }
    if config.sample_size == 0 || config.sample_size > n {
        return Err(Error::Argument(format!(
            "sample size {} must be in 1..={n}",
            config.sample_size
        )));
    }
    if config.iterations == 0 {
        return Err(Error::Argument("at least one bootstrap iteration is required".into()));
    }
    let classes = class_set(&[gold_a, pred_a, gold_b, pred_b]);

    let mut f1_pairs = Vec::with_capacity(config.iterations);
    let mut indices = Vec::with_capacity(config.iterations);
    let (mut ga, mut pa, mut gb, mut pb) = (
        Vec::with_capacity(config.sample_size),
        Vec::with_capacity(config.sample_size),
        Vec::with_capacity(config.sample_size),
        Vec::with_capacity(config.sample_size),
    );
    for it in 0..config.iterations {
        let mut stream = rng::indexed_stream(config.seed, "bootstrap", it as u64);
        let idx = rand::seq::index::sample(&mut stream, n, config.sample_size).into_vec();
        ga.clear();
        pa.clear();
        gb.clear();
        pb.clear();
        for &i in &idx {
            ga.push(gold_a[i]);
            pa.push(pred_a[i]);
            gb.push(gold_b[i]);
            pb.push(pred_b[i]);
        }
        f1_pairs.push((
            score(&ga, &pa, &classes, average)?,
            score(&gb, &pb, &classes, average)?,
        ));
        indices.push(idx);
    }

    let a: Vec<f64> = f1_pairs.iter().map(|p| p.0).collect();
    let b: Vec<f64> = f1_pairs.iter().map(|p| p.1).collect();
    let summarize = |samples: &[f64], gold: &[u8], pred: &[u8]| -> Result<ModelSummary> {
        Ok(ModelSummary {
            full_set_f1: score(gold, pred, &classes, average)?,
            bootstrap_mean: samples.iter().sum::<f64>() / samples.len() as f64,
            ci_low: percentile(samples, 0.025),
            ci_high: percentile(samples, 0.975),
        })
    };
    let test = wilcoxon_rank_sum(&a, &b)?;
    Ok(BootstrapResult {
        iterations: config.iterations,
        sample_size: config.sample_size,
        seed: config.seed,
        model_a: summarize(&a, gold_a, pred_a)?,
        model_b: summarize(&b, gold_b, pred_b)?,
        p_two_sided: test.p_two_sided,
        test,
        f1_pairs,
        indices,
    })
}
