use reader_bench::design::Arm;
use reader_bench::severity::{EyeGrade, PatientGrade, SeverityRuleTable, EYE_GRADE_COUNT};
use reader_bench::simulation::{simulate_timing_rows, TimingModel};
use reader_bench::stats::lmm::{fit_lmm, lmm_round_effects, Coefficient, Z_95};
use reader_bench::stats::wilcoxon::{midranks, wilcoxon_rank_sum, WilcoxonResult};
use serde::Serialize;

pub const MAX_CLINICIANS: usize = 200;
pub const MAX_CASES_PER_CELL: usize = 50;
pub const MAX_SAMPLE: usize = 500;

pub fn to_json(value: impl Serialize) -> Result<String, String> {
    serde_json::to_string(&value).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Serialize)]
pub struct SeverityView {
    pub level: u8,
    pub left_index: usize,
    pub right_index: usize,
    /// `D0 P0 L0` style labels in eye-grade index order.
    pub labels: Vec<String>,
    /// `grid[left][right]` is the level of that pairing.
    pub grid: Vec<Vec<u8>>,
}

fn label(g: EyeGrade) -> String {
    format!("D{} P{} L{}", g.drusen, g.pigment, g.late_amd)
}

pub fn severity(left: [u8; 3], right: [u8; 3]) -> Result<SeverityView, String> {
    let eye = |[d, p, l]: [u8; 3]| EyeGrade::new(d, p, l).map_err(|e| e.to_string());
    let (left, right) = (eye(left)?, eye(right)?);
    let rules = SeverityRuleTable::default();
    let grid = EyeGrade::all()
        .map(|l| EyeGrade::all().map(|r| rules.level(&PatientGrade::new(l, r)).value()).collect())
        .collect();
    Ok(SeverityView {
        level: rules.level(&PatientGrade::new(left, right)).value(),
        left_index: left.index(),
        right_index: right.index(),
        labels: (0..EYE_GRADE_COUNT).map(|i| label(EyeGrade::from_index(i))).collect(),
        grid,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RankSumView {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Pooled midranks, first sample then second.
    pub ranks_x: Vec<f64>,
    pub ranks_y: Vec<f64>,
    pub result: WilcoxonResult,
}

pub fn parse_sample(text: &str) -> Result<Vec<f64>, String> {
    let values = text
        .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("{t:?} is not a number"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.len() > MAX_SAMPLE {
        return Err(format!("at most {MAX_SAMPLE} values per sample"));
    }
    Ok(values)
}

pub fn rank_sum(x: &str, y: &str) -> Result<RankSumView, String> {
    let (x, y) = (parse_sample(x)?, parse_sample(y)?);
    let result = wilcoxon_rank_sum(&x, &y).map_err(|e| e.to_string())?;
    let pooled: Vec<f64> = x.iter().chain(&y).copied().collect();
    let mut ranks_x = midranks(&pooled);
    let ranks_y = ranks_x.split_off(x.len());
    Ok(RankSumView {
        x,
        y,
        ranks_x,
        ranks_y,
        result,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingParams {
    pub clinicians: usize,
    pub cases_per_cell: usize,
    pub clinician_sd: f64,
    pub residual_sd: f64,
    pub ai_effect: [f64; 4],
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellMean {
    pub round: u8,
    pub arm: Arm,
    pub observed: f64,
    pub generating: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectView {
    pub round: u8,
    pub truth: f64,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingView {
    pub rows: usize,
    pub cells: Vec<CellMean>,
    pub coefficients: Vec<Coefficient>,
    pub effects: Vec<EffectView>,
    pub clinician_variance: f64,
    pub residual_variance: f64,
    pub converged: bool,
}

pub fn timing_fit(p: &TimingParams) -> Result<TimingView, String> {
    if !(2..=MAX_CLINICIANS).contains(&p.clinicians) {
        return Err(format!("clinicians must be between 2 and {MAX_CLINICIANS}"));
    }
    if !(1..=MAX_CASES_PER_CELL).contains(&p.cases_per_cell) {
        return Err(format!("cases per cell must be between 1 and {MAX_CASES_PER_CELL}"));
    }
    if !(p.clinician_sd.is_finite() && p.clinician_sd >= 0.0 && p.residual_sd.is_finite() && p.residual_sd > 0.0) {
        return Err("standard deviations must be finite, the residual one positive".into());
    }
    let model = TimingModel {
        sigma_u2: p.clinician_sd * p.clinician_sd,
        sigma_e: p.residual_sd,
        ai_effect: p.ai_effect,
        ..TimingModel::default()
    };
    let rows = simulate_timing_rows(&model, p.clinicians, p.cases_per_cell, p.seed).map_err(|e| e.to_string())?;
    let fit = fit_lmm(&rows).map_err(|e| e.to_string())?;
    let effects = lmm_round_effects(&fit)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|e| {
            let truth = p.ai_effect[(e.round - 1) as usize];
            let (ci_low, ci_high) = (e.estimate - Z_95 * e.std_error, e.estimate + Z_95 * e.std_error);
            EffectView {
                round: e.round,
                truth,
                estimate: e.estimate,
                ci_low,
                ci_high,
                covered: ci_low <= truth && truth <= ci_high,
            }
        })
        .collect();
    let mut cells = Vec::with_capacity(8);
    for round in 1..=4u8 {
        for arm in [Arm::Manual, Arm::ManualPlusAI] {
            let times: Vec<f64> = rows
                .iter()
                .filter(|r| r.round == round && r.method == arm)
                .map(|r| r.seconds)
                .collect();
            cells.push(CellMean {
                round,
                arm,
                observed: times.iter().sum::<f64>() / times.len() as f64,
                generating: model.mean(round, arm),
            });
        }
    }
    Ok(TimingView {
        rows: rows.len(),
        cells,
        coefficients: fit.coefficients,
        effects,
        clinician_variance: fit.sigma_u2,
        residual_variance: fit.sigma_e2,
        converged: fit.converged,
    })
}
