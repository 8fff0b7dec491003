//! Study analysis and paper-style outputs.
//!
//! [`analyze`] turns an event log into a [`StudyReport`]; everything in the
//! report is a function of the log, the schedule, the manifest and the seed,
//! so re-running it yields identical bytes. Figure outputs are delimited data
//! files rather than images.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::design::{Arm, PatientRecord, Schedule, Workload};
use crate::error::{Error, Result};
use crate::grading::{audit_events, timing_completeness, EventViolation, GradingEvent, TimingCompleteness, ROUNDS};
use crate::predictor::{compare_models, ComparisonReport, PredictionSet, SuggestionCache};
use crate::rng;
use crate::stats::bootstrap::BootstrapConfig;
use crate::stats::lmm::{fit_lmm, lmm_round_effects, LmmFit, RoundEffect, TimingRow};
use crate::stats::metrics::{confusion, per_class_metrics};
use crate::stats::paired::{paired_grader_comparison, GoldLabels, GradingTarget, PairedComparison};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub tool_version: String,
    pub seed: u64,
    pub config_digest: String,
    pub event_log_digest: String,
    pub events: usize,
    /// Earliest presentation and latest submission in the log; wall-clock
    /// time is never recorded so reports stay reproducible.
    pub first_presented_at: Option<DateTime<Utc>>,
    pub last_submitted_at: Option<DateTime<Utc>>,
    pub schedule_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AiAloneScore {
    pub target: GradingTarget,
    pub f1: f64,
    pub per_scale: Vec<(u8, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingCell {
    pub round: u8,
    pub arm: Arm,
    pub n: usize,
    pub mean_seconds: f64,
    pub sd_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicianTiming {
    pub clinician_id: String,
    pub round: u8,
    pub arm: Arm,
    pub n: usize,
    pub mean_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSection {
    pub completeness: Vec<TimingCompleteness>,
    pub eligible_clinicians: Vec<String>,
    /// Per round and arm over eligible clinicians' cases.
    pub summary: Vec<TimingCell>,
    pub per_clinician: Vec<ClinicianTiming>,
    pub lmm: Option<LmmFit>,
    pub round_effects: Vec<RoundEffect>,
    pub lmm_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub metadata: ReportMetadata,
    pub workload: Option<Workload>,
    pub audit: Vec<EventViolation>,
    pub arm_comparison: Vec<PairedComparison>,
    pub ai_alone: Vec<AiAloneScore>,
    pub timing: TimingSection,
    pub model_comparison: Vec<ComparisonReport>,
}

impl StudyReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn comparison(&self, target: GradingTarget) -> Option<&PairedComparison> {
        self.arm_comparison.iter().find(|c| c.target == target)
    }
}

#[derive(Debug, Clone, Default)]
pub struct AnalyzeOptions {
    pub seed: u64,
    /// Raw configuration text; only its digest is recorded.
    pub config_text: String,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

fn ai_alone_scores(
    records: &[PatientRecord],
    schedule: &Schedule,
    suggestions: &SuggestionCache,
) -> Result<Vec<AiAloneScore>> {
    let scheduled = schedule.patient_ids();
    let mut out = Vec::new();
    for target in GradingTarget::ALL {
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for r in records.iter().filter(|r| scheduled.contains(r.patient_id.as_str())) {
            let Some(s) = suggestions.get(&r.patient_id) else {
                continue;
            };
            gold.extend(target.labels(&r.gold, r.gold_severity));
            pred.extend(target.labels(&s.grades(), s.severity));
        }
        if gold.is_empty() {
            continue;
        }
        let m = per_class_metrics(&confusion(&gold, &pred, &target.classes())?)?;
        out.push(AiAloneScore {
            target,
            f1: target.average().score(&m),
            per_scale: m.per_class.iter().filter(|c| c.support > 0).map(|c| (c.class, c.f1)).collect(),
        });
    }
    Ok(out)
}

fn timing_section(events: &[GradingEvent]) -> TimingSection {
    let completeness = timing_completeness(events);
    let eligible_clinicians: Vec<String> = completeness
        .iter()
        .filter(|c| c.eligible)
        .map(|c| c.clinician_id.clone())
        .collect();
    let eligible = |id: &str| eligible_clinicians.iter().any(|c| c == id);
    let rows: Vec<TimingRow> = events
        .iter()
        .filter(|e| eligible(&e.clinician_id))
        .filter_map(|e| {
            e.elapsed_seconds.map(|s| TimingRow {
                clinician_id: e.clinician_id.clone(),
                round: e.round_no,
                method: e.arm,
                seconds: s,
            })
        })
        .collect();

    let mut cells: BTreeMap<(u8, Arm), Vec<f64>> = BTreeMap::new();
    let mut per: BTreeMap<(String, u8, Arm), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        cells.entry((r.round, r.method)).or_default().push(r.seconds);
        per.entry((r.clinician_id.clone(), r.round, r.method)).or_default().push(r.seconds);
    }
    let summary = cells
        .into_iter()
        .map(|((round, arm), v)| {
            let (mean_seconds, sd_seconds) = mean_sd(&v);
            TimingCell {
                round,
                arm,
                n: v.len(),
                mean_seconds,
                sd_seconds,
            }
        })
        .collect();
    let per_clinician = per
        .into_iter()
        .map(|((clinician_id, round, arm), v)| ClinicianTiming {
            clinician_id,
            round,
            arm,
            n: v.len(),
            mean_seconds: mean_sd(&v).0,
        })
        .collect();
    let (lmm, round_effects, lmm_error) = match fit_lmm(&rows) {
        Ok(fit) => {
            let effects = lmm_round_effects(&fit).unwrap_or_default();
            (Some(fit), effects, None)
        }
        Err(e) => (None, Vec::new(), Some(e.to_string())),
    };
    TimingSection {
        completeness,
        eligible_clinicians,
        summary,
        per_clinician,
        lmm,
        round_effects,
        lmm_error,
    }
}

/// Full analysis of a grading study.
pub fn analyze(
    events: &[GradingEvent],
    schedule: &Schedule,
    records: &[PatientRecord],
    rules: &crate::severity::SeverityRuleTable,
    suggestions: Option<&SuggestionCache>,
    options: &AnalyzeOptions,
) -> Result<StudyReport> {
    let gold = GoldLabels::from_schedule(schedule, records)?;
    let mut log_bytes = Vec::new();
    crate::grading::write_events(events, &mut log_bytes)?;
    let metadata = ReportMetadata {
        tool_version: TOOL_VERSION.to_string(),
        seed: options.seed,
        config_digest: sha256_hex(options.config_text.as_bytes()),
        event_log_digest: sha256_hex(&log_bytes),
        events: events.len(),
        first_presented_at: events.iter().map(|e| e.presented_at).min(),
        last_submitted_at: events.iter().map(|e| e.submitted_at).max(),
        schedule_seed: schedule.seed,
    };
    let arm_comparison = GradingTarget::ALL
        .iter()
        .map(|&t| paired_grader_comparison(events, &gold, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyReport {
        metadata,
        workload: schedule.clinicians.first().map(|c| Workload::for_clinician(schedule, c)),
        audit: audit_events(events, schedule, rules),
        arm_comparison,
        ai_alone: match suggestions {
            Some(s) => ai_alone_scores(records, schedule, s)?,
            None => Vec::new(),
        },
        timing: timing_section(events),
        model_comparison: Vec::new(),
    })
}

/// Bootstrap seed used for one dataset's model comparison under a root seed.
pub fn dataset_seed(root: u64, dataset: &str) -> u64 {
    rng::derive_seed(root, &format!("table1/{dataset}"))
}

/// Compares two models named in a prediction file, seeding the bootstrap from
/// the root seed and the dataset name.
pub fn compare_prediction_set(
    dataset: &str,
    set: &PredictionSet,
    model_a: &str,
    model_b: &str,
    root_seed: u64,
) -> Result<ComparisonReport> {
    let a = set
        .model(model_a)
        .ok_or_else(|| Error::validation("model", format!("{dataset}: no column {model_a}")))?;
    let b = set
        .model(model_b)
        .ok_or_else(|| Error::validation("model", format!("{dataset}: no column {model_b}")))?;
    compare_models(
        dataset,
        (model_a, a),
        (model_b, b),
        &set.gold,
        BootstrapConfig::with_seed(dataset_seed(root_seed, dataset)),
    )
}

/// Table-style p-value: "<.001" below 0.001, two decimals otherwise.
pub fn format_p(p: f64) -> String {
    if p < 0.001 {
        "<.001".to_string()
    } else {
        format!("{p:.2}")
    }
}

/// Renders comparison reports as `dataset,scale,<model A>,<model B>,p`.
///
/// Datasets are sorted by name. Each starts with its Overall row (bootstrap
/// mean F1 and p-value) followed by one row per severity level present in
/// gold, ascending; with a single level, only the Overall row is emitted.
pub fn render_table1(reports: &[ComparisonReport]) -> Result<String> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Argument("no comparison reports to render".into()))?;
    let mut sorted: Vec<&ComparisonReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.dataset.cmp(&b.dataset));
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(["dataset", "scale", first.model_a.as_str(), first.model_b.as_str(), "p"])?;
    for r in sorted {
        if r.model_a != first.model_a || r.model_b != first.model_b {
            return Err(Error::validation(
                "models",
                format!("{} compares {} vs {}, expected {} vs {}", r.dataset, r.model_a, r.model_b, first.model_a, first.model_b),
            ));
        }
        let overall = [r.overall_a.bootstrap_mean, r.overall_b.bootstrap_mean, r.p_value];
        if overall.iter().any(|v| !v.is_finite()) || r.per_scale.is_empty() {
            return Err(Error::validation("overall", format!("{} has no overall row", r.dataset)));
        }
        w.write_record([
            r.dataset.clone(),
            "Overall".into(),
            format!("{:.4}", r.overall_a.bootstrap_mean),
            format!("{:.4}", r.overall_b.bootstrap_mean),
            format_p(r.p_value),
        ])?;
        if r.per_scale.len() > 1 {
            let mut scales = r.per_scale.clone();
            scales.sort_by_key(|s| s.scale);
            for s in scales {
                w.write_record([
                    r.dataset.clone(),
                    s.scale.to_string(),
                    format!("{:.4}", s.f1_a),
                    format!("{:.4}", s.f1_b),
                    String::new(),
                ])?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Figure data files keyed by file name.
pub fn figure_data(report: &StudyReport) -> BTreeMap<String, String> {
    let mut files = BTreeMap::new();

    let mut s = String::from("target,clinician_id,manual_f1,manual_plus_ai_f1,delta\n");
    for c in &report.arm_comparison {
        for k in &c.clinicians {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6}",
                c.target.as_str(),
                k.clinician_id,
                k.manual_f1,
                k.manual_plus_ai_f1,
                k.delta
            );
        }
    }
    files.insert("per_clinician_f1.csv".into(), s);

    let mut s = String::from("target,manual_mean,manual_ci_low,manual_ci_high,manual_plus_ai_mean,manual_plus_ai_ci_low,manual_plus_ai_ci_high,improved,clinicians,p,ai_alone\n");
    for c in &report.arm_comparison {
        let ai = report
            .ai_alone
            .iter()
            .find(|a| a.target == c.target)
            .map(|a| format!("{:.6}", a.f1))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{:.6e},{}",
            c.target.as_str(),
            c.manual.mean_f1,
            c.manual.ci_low,
            c.manual.ci_high,
            c.manual_plus_ai.mean_f1,
            c.manual_plus_ai.ci_low,
            c.manual_plus_ai.ci_high,
            c.improved,
            c.clinicians.len(),
            c.p_two_sided,
            ai
        );
    }
    files.insert("arm_comparison.csv".into(), s);

    let mut s = String::from("target,scale,manual_f1,manual_plus_ai_f1,ai_alone_f1\n");
    for c in &report.arm_comparison {
        let ai = report.ai_alone.iter().find(|a| a.target == c.target);
        for p in &c.per_scale {
            let ai_f1 = ai
                .and_then(|a| a.per_scale.iter().find(|(k, _)| *k == p.class))
                .map(|(_, f)| format!("{f:.6}"))
                .unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{}",
                c.target.as_str(),
                p.class,
                p.manual,
                p.manual_plus_ai,
                ai_f1
            );
        }
    }
    files.insert("per_scale_f1.csv".into(), s);

    let mut s = String::from("round,arm,n,mean_seconds,sd_seconds\n");
    for c in &report.timing.summary {
        let _ = writeln!(s, "{},{},{},{:.4},{:.4}", c.round, c.arm, c.n, c.mean_seconds, c.sd_seconds);
    }
    files.insert("timing_summary.csv".into(), s);

    let mut s = String::from("clinician_id,round,arm,n,mean_seconds\n");
    for c in &report.timing.per_clinician {
        let _ = writeln!(s, "{},{},{},{},{:.4}", c.clinician_id, c.round, c.arm, c.n, c.mean_seconds);
    }
    files.insert("timing_series.csv".into(), s);

    let mut s = String::from("term,estimate,std_error,z,p,ci_low,ci_high\n");
    if let Some(fit) = &report.timing.lmm {
        for c in &fit.coefficients {
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:.4},{:.6e},{:.4},{:.4}",
                c.name, c.estimate, c.std_error, c.z, c.p, c.ci_low, c.ci_high
            );
        }
    }
    files.insert("lmm_coefficients.csv".into(), s);

    let mut s = String::from("round,estimate,std_error,z,p\n");
    for e in &report.timing.round_effects {
        let _ = writeln!(s, "{},{:.4},{:.4},{:.4},{:.6e}", e.round, e.estimate, e.std_error, e.z, e.p);
    }
    files.insert("lmm_round_effects.csv".into(), s);

    let mut s = String::from("clinician_id,complete_rounds,eligible\n");
    for c in &report.timing.completeness {
        let rounds: Vec<String> = c.complete_rounds.iter().map(u8::to_string).collect();
        let _ = writeln!(s, "{},{},{}", c.clinician_id, rounds.join(" "), c.eligible);
    }
    files.insert("timing_completeness.csv".into(), s);
    files
}

/// Checks the counts a full schedule implies against the expected arithmetic.
pub fn rounds_complete(events: &[GradingEvent], clinician_id: &str) -> Vec<u8> {
    ROUNDS
        .into_iter()
        .filter(|r| events.iter().any(|e| e.clinician_id == clinician_id && e.round_no == *r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::ScaleRow;
    use crate::stats::bootstrap::ModelSummary;

    fn report(dataset: &str, scales: &[u8]) -> ComparisonReport {
        let summary = |v| ModelSummary {
            full_set_f1: v,
            bootstrap_mean: v,
            ci_low: v,
            ci_high: v,
        };
        ComparisonReport {
            dataset: dataset.into(),
            model_a: "A".into(),
            model_b: "B".into(),
            n_patients: 10,
            overall_a: summary(0.5),
            overall_b: summary(0.6),
            p_value: 0.0004,
            per_scale: scales
                .iter()
                .map(|&s| ScaleRow {
                    scale: s,
                    f1_a: 0.1 * f64::from(s),
                    f1_b: 0.2,
                })
                .collect(),
            bootstrap: None,
        }
    }

    #[test]
    fn table_order_is_canonical() {
        let a = render_table1(&[report("SEED", &[1, 0]), report("AREDS", &[3, 4])]).unwrap();
        let b = render_table1(&[report("AREDS", &[4, 3]), report("SEED", &[0, 1])]).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a,
            "dataset,scale,A,B,p\nAREDS,Overall,0.5000,0.6000,<.001\nAREDS,3,0.3000,0.2000,\nAREDS,4,0.4000,0.2000,\nSEED,Overall,0.5000,0.6000,<.001\nSEED,0,0.0000,0.2000,\nSEED,1,0.1000,0.2000,\n"
        );
    }

    #[test]
    fn missing_overall_is_an_error() {
        let mut r = report("X", &[1]);
        r.overall_a.bootstrap_mean = f64::NAN;
        assert!(render_table1(&[r]).is_err());
        assert!(render_table1(&[]).is_err());
    }

    #[test]
    fn p_formatting() {
        assert_eq!(format_p(0.9512), "0.95");
        assert_eq!(format_p(0.0009), "<.001");
        assert_eq!(format_p(1.0), "1.00");
    }
}
