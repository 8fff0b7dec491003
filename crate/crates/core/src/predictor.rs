//! AI predictor boundary.
//!
//! A predictor returns per-eye risk-feature grades for one patient. The
//! severity shown to clinicians is always recomputed from those grades with
//! the active rule table; a severity sent over the wire is only cross-checked.
//!
//! Wire protocol, one JSON object per request and per response:
//!
//! ```text
//! request:  {"patient_alias": "...", "images": {"left": "...", "right": "..."}}
//! response: {"left":  {"drusen": 0, "pigment": 0, "late_amd": 0, "confidence": {...}},
//!            "right": {...}}
//! ```
//!
//! Subprocess predictors exchange one object per line over stdin/stdout.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use rand::distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::design::{EyeImages, PatientRecord, Schedule};
use crate::error::{Error, Result};
use crate::rng;
use crate::severity::{compute_severity, EyeGrade, PatientGrade, SeverityLevel, SeverityRuleTable};
use crate::stats::bootstrap::{bootstrap_compare, BootstrapConfig, BootstrapResult, ModelSummary};
use crate::stats::metrics::{confusion, per_class_metrics, F1Average};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyePrediction {
    pub drusen: u8,
    pub pigment: u8,
    pub late_amd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<BTreeMap<String, f64>>,
}

impl EyePrediction {
    pub fn grade(&self) -> EyeGrade {
        EyeGrade {
            drusen: self.drusen,
            pigment: self.pigment,
            late_amd: self.late_amd,
        }
    }

    pub fn from_grade(g: EyeGrade) -> Self {
        EyePrediction {
            drusen: g.drusen,
            pigment: g.pigment,
            late_amd: g.late_amd,
            confidence: None,
        }
    }

    fn validate(&self) -> Result<()> {
        self.grade().validate()?;
        if let Some(conf) = &self.confidence {
            for (k, v) in conf {
                if !(0.0..=1.0).contains(v) {
                    return Err(Error::validation(
                        format!("confidence.{k}"),
                        format!("{v} is outside [0, 1]"),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePrediction {
    pub left: EyePrediction,
    pub right: EyePrediction,
}

impl FeaturePrediction {
    pub fn grades(&self) -> PatientGrade {
        PatientGrade::new(self.left.grade(), self.right.grade())
    }

    pub fn from_grades(g: &PatientGrade) -> Self {
        FeaturePrediction {
            left: EyePrediction::from_grade(g.left),
            right: EyePrediction::from_grade(g.right),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.left.validate()?;
        self.right.validate()
    }
}

/// What the Manual+AI arm shows: per-eye grades plus the derived severity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AiSuggestion {
    pub left: EyePrediction,
    pub right: EyePrediction,
    pub severity: SeverityLevel,
}

impl AiSuggestion {
    pub fn from_prediction(p: FeaturePrediction, rules: &SeverityRuleTable) -> Result<Self> {
        p.validate()?;
        let severity = compute_severity(&p.grades(), rules)?;
        Ok(AiSuggestion {
            left: p.left,
            right: p.right,
            severity,
        })
    }

    pub fn grades(&self) -> PatientGrade {
        PatientGrade::new(self.left.grade(), self.right.grade())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub patient_alias: String,
    pub images: EyeImages,
}

#[derive(Deserialize)]
struct WireResponse {
    left: EyePrediction,
    right: EyePrediction,
    #[serde(default)]
    severity: Option<u8>,
}

/// Parses one wire response. The optional `severity` field is checked against
/// the recomputed level and a mismatch is logged, never trusted.
pub fn parse_response(raw: &str, rules: &SeverityRuleTable) -> Result<AiSuggestion> {
    let wire: WireResponse = serde_json::from_str(raw.trim()).map_err(|e| Error::PredictorProtocol {
        reason: e.to_string(),
        raw: raw.to_string(),
    })?;
    let prediction = FeaturePrediction {
        left: wire.left,
        right: wire.right,
    };
    let suggestion = AiSuggestion::from_prediction(prediction, rules).map_err(|e| Error::PredictorProtocol {
        reason: e.to_string(),
        raw: raw.to_string(),
    })?;
    if let Some(claimed) = wire.severity {
        if claimed != suggestion.severity.value() {
            log::warn!(
                "predictor claimed severity {claimed}, recomputed {}; using recomputed",
                suggestion.severity
            );
        }
    }
    Ok(suggestion)
}

pub trait Predictor: Send + Sync {
    fn predict(&self, request: &PredictRequest, record: &PatientRecord) -> Result<FeaturePrediction>;
}

/// Runs a predictor and derives the severity suggestion.
pub fn predict(
    predictor: &dyn Predictor,
    alias: &str,
    record: &PatientRecord,
    rules: &SeverityRuleTable,
) -> Result<AiSuggestion> {
    let request = PredictRequest {
        patient_alias: alias.to_string(),
        images: record.images.clone(),
    };
    let prediction = predictor.predict(&request, record)?;
    AiSuggestion::from_prediction(prediction, rules)
}

/// Returns stored predictions, or echoes the gold grades for patients without one.
#[derive(Debug, Clone, Default)]
pub struct FixturePredictor {
    predictions: HashMap<String, FeaturePrediction>,
}

#[derive(Serialize, Deserialize)]
struct FixtureLine {
    patient_id: String,
    left: EyePrediction,
    right: EyePrediction,
}

impl FixturePredictor {
    pub fn echo_gold() -> Self {
        Self::default()
    }

    pub fn with_predictions(predictions: HashMap<String, FeaturePrediction>) -> Self {
        FixturePredictor { predictions }
    }

    /// JSON lines of `{"patient_id", "left", "right"}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut predictions = HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let l: FixtureLine = serde_json::from_str(line)
                .map_err(|e| Error::Parse(format!("fixture line {}: {e}", i + 1)))?;
            let p = FeaturePrediction {
                left: l.left,
                right: l.right,
            };
            p.validate()?;
            predictions.insert(l.patient_id, p);
        }
        Ok(FixturePredictor { predictions })
    }
}

impl Predictor for FixturePredictor {
    fn predict(&self, _request: &PredictRequest, record: &PatientRecord) -> Result<FeaturePrediction> {
        Ok(self
            .predictions
            .get(&record.patient_id)
            .cloned()
            .unwrap_or_else(|| FeaturePrediction::from_grades(&record.gold)))
    }
}

/// Row-stochastic confusion matrices (gold class → predicted distribution) per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedPredictorSpec {
    pub drusen: Vec<Vec<f64>>,
    pub pigment: Vec<Vec<f64>>,
    pub late_amd: Vec<Vec<f64>>,
    pub seed: u64,
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Keeps the gold class with probability `accuracy`, otherwise moves to an
/// adjacent class (split evenly when both neighbours exist).
pub fn adjacent_confusion(classes: usize, accuracy: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|i| {
            let mut row = vec![0.0; classes];
            row[i] = accuracy;
            let neighbours: Vec<usize> = [i.checked_sub(1), (i + 1 < classes).then_some(i + 1)]
                .into_iter()
                .flatten()
                .collect();
            for &j in &neighbours {
                row[j] += (1.0 - accuracy) / neighbours.len() as f64;
            }
            row
        })
        .collect()
}

impl SimulatedPredictorSpec {
    pub fn identity(seed: u64) -> Self {
        SimulatedPredictorSpec {
            drusen: identity(3),
            pigment: identity(2),
            late_amd: identity(2),
            seed,
        }
    }

    pub fn uniform(seed: u64) -> Self {
        SimulatedPredictorSpec {
            drusen: vec![vec![1.0 / 3.0; 3]; 3],
            pigment: vec![vec![0.5; 2]; 2],
            late_amd: vec![vec![0.5; 2]; 2],
            seed,
        }
    }

    /// Per-feature accuracies with errors to adjacent classes.
    pub fn with_accuracy(drusen: f64, pigment: f64, late_amd: f64, seed: u64) -> Self {
        SimulatedPredictorSpec {
            drusen: adjacent_confusion(3, drusen),
            pigment: adjacent_confusion(2, pigment),
            late_amd: adjacent_confusion(2, late_amd),
            seed,
        }
    }

    /// Stand-in for the study's model: severity macro-F1 of about 0.48 on a
    /// 40-per-level cohort.
    pub fn calibrated_ai(seed: u64) -> Self {
        Self::with_accuracy(
            CALIBRATED_AI_ACCURACY[0],
            CALIBRATED_AI_ACCURACY[1],
            CALIBRATED_AI_ACCURACY[2],
            seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m, k) in [
            ("drusen", &self.drusen, 3),
            ("pigment", &self.pigment, 2),
            ("late_amd", &self.late_amd, 2),
        ] {
            if m.len() != k || m.iter().any(|r| r.len() != k) {
                return Err(Error::validation(name, format!("confusion matrix must be {k}x{k}")));
            }
            for (i, row) in m.iter().enumerate() {
                if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return Err(Error::validation(name, format!("row {i} has a negative or non-finite entry")));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::validation(name, format!("row {i} sums to {s}, not 1")));
                }
            }
        }
        Ok(())
    }
}

/// Drusen, pigment and late-AMD accuracies of [`SimulatedPredictorSpec::calibrated_ai`].
pub const CALIBRATED_AI_ACCURACY: [f64; 3] = [0.78, 0.80, 0.89];

fn draw<R: rand::Rng>(row: &[f64], rng: &mut R) -> u8 {
    WeightedIndex::new(row).expect("validated row").sample(rng) as u8
}

fn sample_eye<R: rand::Rng>(spec: &SimulatedPredictorSpec, gold: EyeGrade, rng: &mut R) -> EyePrediction {
    EyePrediction {
        drusen: draw(&spec.drusen[gold.drusen as usize], rng),
        pigment: draw(&spec.pigment[gold.pigment as usize], rng),
        late_amd: draw(&spec.late_amd[gold.late_amd as usize], rng),
        confidence: None,
    }
}

/// Samples a prediction for `gold`; deterministic in `(spec.seed, draw_index)`.
pub fn simulate_predictor(
    spec: &SimulatedPredictorSpec,
    gold: &PatientGrade,
    draw_index: u64,
) -> Result<FeaturePrediction> {
    spec.validate()?;
    gold.validate()?;
    Ok(simulate_unchecked(spec, gold, draw_index))
}

fn simulate_unchecked(spec: &SimulatedPredictorSpec, gold: &PatientGrade, draw_index: u64) -> FeaturePrediction {
    let mut r = rng::indexed_stream(spec.seed, "simulated-predictor", draw_index);
    sample_prediction(spec, gold, &mut r)
}

/// Samples every per-eye field from `spec`'s rows using the caller's generator;
/// `spec.seed` is ignored. The spec must already be validated.
pub fn sample_prediction<R: rand::Rng>(spec: &SimulatedPredictorSpec, gold: &PatientGrade, rng: &mut R) -> FeaturePrediction {
    FeaturePrediction {
        left: sample_eye(spec, gold.left, rng),
        right: sample_eye(spec, gold.right, rng),
    }
}

/// Stable draw index for a patient, so predictions do not depend on cohort order.
pub fn patient_draw_index(patient_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in patient_id.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct SimulatedPredictor {
    spec: SimulatedPredictorSpec,
}

impl SimulatedPredictor {
    pub fn new(spec: SimulatedPredictorSpec) -> Result<Self> {
        spec.validate()?;
        Ok(SimulatedPredictor { spec })
    }
}

impl Predictor for SimulatedPredictor {
    fn predict(&self, _request: &PredictRequest, record: &PatientRecord) -> Result<FeaturePrediction> {
        Ok(simulate_unchecked(
            &self.spec,
            &record.gold,
            patient_draw_index(&record.patient_id),
        ))
    }
}

/// Long-lived child process speaking the line protocol on stdin/stdout.
pub struct SubprocessPredictor {
    inner: Mutex<SubprocessIo>,
    timeout: Duration,
}

struct SubprocessIo {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl SubprocessPredictor {
    pub fn spawn(command: &[String], timeout: Duration) -> Result<Self> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| Error::Argument("subprocess predictor needs a command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::PredictorUnavailable(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = child.stdout.take().expect("piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(SubprocessPredictor {
            inner: Mutex::new(SubprocessIo {
                child,
                stdin,
                lines: rx,
            }),
            timeout,
        })
    }
}

impl Drop for SubprocessPredictor {
    fn drop(&mut self) {
        if let Ok(io) = self.inner.get_mut() {
            let _ = io.child.kill();
            let _ = io.child.wait();
        }
    }
}

impl Predictor for SubprocessPredictor {
    fn predict(&self, request: &PredictRequest, _record: &PatientRecord) -> Result<FeaturePrediction> {
        let mut io = self.inner.lock().map_err(|_| Error::PredictorUnavailable("predictor lock poisoned".into()))?;
        let mut line = serde_json::to_string(request)?;
        line.push('\n');
        io.stdin
            .write_all(line.as_bytes())
            .and_then(|_| io.stdin.flush())
            .map_err(|e| Error::PredictorUnavailable(format!("write to predictor failed: {e}")))?;
        let raw = match io.lines.recv_timeout(self.timeout) {
            Ok(Ok(raw)) => raw,
            Ok(Err(e)) => return Err(Error::PredictorUnavailable(format!("read from predictor failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::PredictorUnavailable(format!(
                    "no response within {:.1} s",
                    self.timeout.as_secs_f64()
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::PredictorUnavailable("predictor process exited".into()))
            }
        };
        parse_prediction(&raw)
    }
}

/// Parses a wire response into a validated prediction (no severity derivation).
pub fn parse_prediction(raw: &str) -> Result<FeaturePrediction> {
    let wire: WireResponse = serde_json::from_str(raw.trim()).map_err(|e| Error::PredictorProtocol {
        reason: e.to_string(),
        raw: raw.to_string(),
    })?;
    let p = FeaturePrediction {
        left: wire.left,
        right: wire.right,
    };
    p.validate().map_err(|e| Error::PredictorProtocol {
        reason: e.to_string(),
        raw: raw.to_string(),
    })?;
    if let Some(claimed) = wire.severity {
        let recomputed = SeverityRuleTable::default().level(&p.grades());
        if claimed != recomputed.value() {
            log::warn!("predictor claimed severity {claimed}, default table gives {recomputed}");
        }
    }
    Ok(p)
}

fn default_timeout() -> f64 {
    30.0
}

fn default_accuracy() -> [f64; 3] {
    CALIBRATED_AI_ACCURACY
}

/// How a study reaches its predictor. Exactly one mode is active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PredictorBinding {
    /// Long-lived child process speaking the line protocol.
    Subprocess {
        command: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_seconds: f64,
    },
    /// `POST {endpoint}/predict` per patient.
    Http {
        endpoint: String,
        #[serde(default = "default_timeout")]
        timeout_seconds: f64,
    },
    /// Stored predictions; without a file every patient gets its gold grades.
    Fixture {
        #[serde(default)]
        path: Option<PathBuf>,
    },
    /// Adjacent-class errors at the given drusen, pigment and late-AMD accuracy.
    Simulated {
        #[serde(default = "default_accuracy")]
        accuracy: [f64; 3],
        /// Falls back to the study seed.
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl Default for PredictorBinding {
    fn default() -> Self {
        PredictorBinding::Simulated {
            accuracy: CALIBRATED_AI_ACCURACY,
            seed: None,
        }
    }
}

impl PredictorBinding {
    pub fn mode(&self) -> &'static str {
        match self {
            PredictorBinding::Subprocess { .. } => "subprocess",
            PredictorBinding::Http { .. } => "http",
            PredictorBinding::Fixture { .. } => "fixture",
            PredictorBinding::Simulated { .. } => "simulated",
        }
    }

    pub fn timeout(&self) -> Option<Duration> {
        match self {
            PredictorBinding::Subprocess { timeout_seconds, .. } | PredictorBinding::Http { timeout_seconds, .. } => {
                Some(Duration::from_secs_f64(*timeout_seconds))
            }
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PredictorBinding::Subprocess { command, timeout_seconds } => {
                if command.is_empty() || command[0].trim().is_empty() {
                    return Err(Error::validation("predictor.command", "empty command"));
                }
                check_timeout(*timeout_seconds)
            }
            PredictorBinding::Http { endpoint, timeout_seconds } => {
                if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) {
                    return Err(Error::validation("predictor.endpoint", format!("{endpoint} is not an http(s) URL")));
                }
                check_timeout(*timeout_seconds)
            }
            PredictorBinding::Fixture { .. } => Ok(()),
            PredictorBinding::Simulated { accuracy, .. } => {
                if accuracy.iter().any(|a| !(0.0..=1.0).contains(a)) {
                    return Err(Error::validation("predictor.accuracy", "accuracies must be in [0, 1]"));
                }
                Ok(())
            }
        }
    }

    /// Builds an in-process predictor. HTTP bindings need a network client
    /// and are rejected here.
    pub fn connect_local(&self, study_seed: u64) -> Result<Box<dyn Predictor>> {
        self.validate()?;
        Ok(match self {
            PredictorBinding::Subprocess { command, .. } => Box::new(SubprocessPredictor::spawn(
                command,
                self.timeout().expect("subprocess has a timeout"),
            )?),
            PredictorBinding::Http { .. } => {
                return Err(Error::Argument("http predictor bindings are connected by the network client".into()))
            }
            PredictorBinding::Fixture { path: Some(path) } => Box::new(FixturePredictor::load(path)?),
            PredictorBinding::Fixture { path: None } => Box::new(FixturePredictor::echo_gold()),
            PredictorBinding::Simulated { accuracy, seed } => {
                let [d, p, l] = *accuracy;
                Box::new(SimulatedPredictor::new(SimulatedPredictorSpec::with_accuracy(
                    d,
                    p,
                    l,
                    seed.unwrap_or(study_seed),
                ))?)
            }
        })
    }
}

fn check_timeout(seconds: f64) -> Result<()> {
    if seconds.is_finite() && seconds > 0.0 {
        Ok(())
    } else {
        Err(Error::validation("predictor.timeout_seconds", format!("{seconds} is not a positive duration")))
    }
}

/// Suggestions computed once per patient before a study opens.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SuggestionCache {
    pub by_patient: BTreeMap<String, AiSuggestion>,
    /// Patients whose prediction failed, with the reason.
    pub failures: BTreeMap<String, String>,
}

impl SuggestionCache {
    pub fn get(&self, patient_id: &str) -> Option<&AiSuggestion> {
        self.by_patient.get(patient_id)
    }
}

/// Predicts every scheduled patient, using each patient's first alias in the request.
pub fn precompute_suggestions(
    predictor: &dyn Predictor,
    schedule: &Schedule,
    records: &[PatientRecord],
    rules: &SeverityRuleTable,
) -> SuggestionCache {
    let mut first_alias: HashMap<&str, &str> = HashMap::new();
    for b in &schedule.batches {
        for a in &b.members {
            if let Some(pid) = schedule.patient_of(a) {
                first_alias.entry(pid).or_insert(a.as_str());
            }
        }
    }
    let mut cache = SuggestionCache::default();
    for r in records {
        let Some(alias) = first_alias.get(r.patient_id.as_str()) else {
            continue;
        };
        match predict(predictor, alias, r, rules) {
            Ok(s) => {
                cache.by_patient.insert(r.patient_id.clone(), s);
            }
            Err(e) => {
                log::warn!("prediction for {} failed: {e}", r.patient_id);
                cache.failures.insert(r.patient_id.clone(), e.to_string());
            }
        }
    }
    cache
}

/// Per-patient severity labels for one test set: gold plus one column per model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub models: Vec<String>,
    pub patient_ids: Vec<String>,
    pub gold: Vec<u8>,
    /// `predictions[m][i]` is model `m`'s label for patient `i`.
    pub predictions: Vec<Vec<u8>>,
}

impl PredictionSet {
    /// Delimited text with header `patient_id,gold,<model>...`.
    pub fn read<R: Read>(mut reader: R) -> Result<Self> {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(crate::severity::sniff_delimiter(&text))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = rdr.headers()?.clone();
        if headers.len() < 3 || &headers[0] != "patient_id" || &headers[1] != "gold" {
            return Err(Error::Parse(
                "prediction file header must be patient_id,gold,<model>...".into(),
            ));
        }
        let models: Vec<String> = headers.iter().skip(2).map(str::to_owned).collect();
        let mut set = PredictionSet {
            predictions: vec![Vec::new(); models.len()],
            models,
            patient_ids: Vec::new(),
            gold: Vec::new(),
        };
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let level = |k: usize| -> Result<u8> {
                let v: u8 = rec.get(k).unwrap_or("").parse().map_err(|_| {
                    Error::Parse(format!("line {}: column {} is not a level", i + 2, k + 1))
                })?;
                Ok(SeverityLevel::new(v)?.value())
            };
            set.patient_ids.push(rec.get(0).unwrap_or("").to_string());
            set.gold.push(level(1)?);
            for m in 0..set.models.len() {
                set.predictions[m].push(level(m + 2)?);
            }
        }
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(std::fs::File::open(path)?)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["patient_id".to_string(), "gold".to_string()];
        header.extend(self.models.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.gold.len() {
            let mut row = vec![self.patient_ids[i].clone(), self.gold[i].to_string()];
            row.extend(self.predictions.iter().map(|p| p[i].to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn model(&self, name: &str) -> Option<&[u8]> {
        self.models
            .iter()
            .position(|m| m == name)
            .map(|i| self.predictions[i].as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub scale: u8,
    pub f1_a: f64,
    pub f1_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub dataset: String,
    pub model_a: String,
    pub model_b: String,
    pub n_patients: usize,
    pub overall_a: ModelSummary,
    pub overall_b: ModelSummary,
    pub p_value: f64,
    /// Per-class F1 on the full set, for every level present in gold.
    pub per_scale: Vec<ScaleRow>,
    #[serde(skip)]
    pub bootstrap: Option<BootstrapResult>,
}

/// Table-1 style comparison of two models' severity predictions on one test set.
pub fn compare_models(
    dataset: &str,
    model_a: (&str, &[u8]),
    model_b: (&str, &[u8]),
    gold: &[u8],
    protocol: BootstrapConfig,
) -> Result<ComparisonReport> {
    if model_a.1.len() != gold.len() || model_b.1.len() != gold.len() {
        return Err(Error::Argument(format!(
            "prediction lengths {} and {} do not match {} gold labels",
            model_a.1.len(),
            model_b.1.len(),
            gold.len()
        )));
    }
    let boot = bootstrap_compare(gold, model_a.1, gold, model_b.1, protocol, F1Average::Macro)?;
    let levels: Vec<u8> = (0..=SeverityLevel::MAX).collect();
    let ma = per_class_metrics(&confusion(gold, model_a.1, &levels)?)?;
    let mb = per_class_metrics(&confusion(gold, model_b.1, &levels)?)?;
    let per_scale = ma
        .per_class
        .iter()
        .zip(&mb.per_class)
        .filter(|(a, _)| a.support > 0)
        .map(|(a, b)| ScaleRow {
            scale: a.class,
            f1_a: a.f1,
            f1_b: b.f1,
        })
        .collect();
    Ok(ComparisonReport {
        dataset: dataset.to_string(),
        model_a: model_a.0.to_string(),
        model_b: model_b.0.to_string(),
        n_patients: gold.len(),
        overall_a: boot.model_a.clone(),
        overall_b: boot.model_b.clone(),
        p_value: boot.p_two_sided,
        per_scale,
        bootstrap: Some(boot),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, gold: PatientGrade) -> PatientRecord {
        PatientRecord::new(
            id,
            gold,
            EyeImages {
                left: format!("{id}_L"),
                right: format!("{id}_R"),
            },
            &SeverityRuleTable::default(),
        )
        .unwrap()
    }

    fn all_grades() -> Vec<PatientGrade> {
        crate::severity::enumerate_rule_table(&SeverityRuleTable::default())
            .into_iter()
            .map(|(g, _)| g)
            .collect()
    }

    #[test]
    fn fixture_echo_matches_gold_severity() {
        let rules = SeverityRuleTable::default();
        for (i, g) in all_grades().into_iter().enumerate() {
            let r = record(&format!("p{i}"), g);
            let s = predict(&FixturePredictor::echo_gold(), "x", &r, &rules).unwrap();
            assert_eq!(s.severity, r.gold_severity);
        }
    }

    #[test]
    fn identity_simulation_equals_fixture() {
        let rules = SeverityRuleTable::default();
        let sim = SimulatedPredictor::new(SimulatedPredictorSpec::identity(4)).unwrap();
        for (i, g) in all_grades().into_iter().enumerate() {
            let r = record(&format!("p{i}"), g);
            assert_eq!(
                predict(&sim, "x", &r, &rules).unwrap(),
                predict(&FixturePredictor::echo_gold(), "x", &r, &rules).unwrap()
            );
        }
    }

    #[test]
    fn simulation_is_deterministic_per_draw() {
        let spec = SimulatedPredictorSpec::uniform(11);
        let g = PatientGrade::new(EyeGrade::new(1, 0, 0).unwrap(), EyeGrade::NONE);
        let a = simulate_predictor(&spec, &g, 42).unwrap();
        let b = simulate_predictor(&spec, &g, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_matrix_rejected() {
        let mut spec = SimulatedPredictorSpec::identity(0);
        spec.pigment[1] = vec![0.5, 0.6];
        assert!(matches!(spec.validate(), Err(Error::Validation { .. })));
        spec.pigment[1] = vec![1.5, -0.5];
        assert!(spec.validate().is_err());
        let mut spec = SimulatedPredictorSpec::identity(0);
        spec.drusen.pop();
        assert!(simulate_predictor(&spec, &PatientGrade::new(EyeGrade::NONE, EyeGrade::NONE), 0).is_err());
    }

    #[test]
    fn adjacent_rows_are_stochastic() {
        for k in [2, 3, 5] {
            for row in adjacent_confusion(k, 0.7) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        SimulatedPredictorSpec::calibrated_ai(0).validate().unwrap();
    }

    #[test]
    fn wire_severity_is_recomputed() {
        let raw = r#"{"left":{"drusen":2,"pigment":1,"late_amd":0},"right":{"drusen":2,"pigment":1,"late_amd":0},"severity":1}"#;
        let s = parse_response(raw, &SeverityRuleTable::default()).unwrap();
        assert_eq!(s.severity.value(), 4);
    }

    #[test]
    fn malformed_response_carries_payload() {
        for raw in [
            "not json",
            r#"{"left":{"drusen":2,"pigment":1,"late_amd":0}}"#,
            r#"{"left":{"drusen":3,"pigment":0,"late_amd":0},"right":{"drusen":0,"pigment":0,"late_amd":0}}"#,
            r#"{"left":{"drusen":0,"pigment":0,"late_amd":0,"confidence":{"drusen":1.5}},"right":{"drusen":0,"pigment":0,"late_amd":0}}"#,
        ] {
            match parse_response(raw, &SeverityRuleTable::default()) {
                Err(Error::PredictorProtocol { raw: r, .. }) => assert_eq!(r, raw),
                other => panic!("{raw}: {other:?}"),
            }
        }
    }

    #[test]
    fn request_wire_format() {
        let req = PredictRequest {
            patient_alias: "abc".into(),
            images: EyeImages {
                left: "l.png".into(),
                right: "r.png".into(),
            },
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"patient_alias":"abc","images":{"left":"l.png","right":"r.png"}}"#
        );
    }

    #[test]
    fn compare_models_rejects_misaligned() {
        let gold = vec![0u8, 1, 2, 3];
        assert!(matches!(
            compare_models("x", ("a", &gold), ("b", &gold[..3]), &gold, BootstrapConfig::with_seed(0)),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn identical_models_compare_with_p_one() {
        let gold: Vec<u8> = (0..120).map(|i| (i % 6) as u8).collect();
        let pred: Vec<u8> = (0..120).map(|i| ((i / 2) % 6) as u8).collect();
        let r = compare_models("x", ("a", &pred), ("b", &pred), &gold, BootstrapConfig::with_seed(9)).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.per_scale.len(), 6);
    }

    #[test]
    fn prediction_file_round_trip() {
        let set = PredictionSet {
            models: vec!["A".into(), "B".into()],
            patient_ids: vec!["p1".into(), "p2".into()],
            gold: vec![0, 5],
            predictions: vec![vec![0, 4], vec![1, 5]],
        };
        let mut buf = Vec::new();
        set.write(&mut buf).unwrap();
        assert_eq!(PredictionSet::read(buf.as_slice()).unwrap(), set);
        assert!(PredictionSet::read("id,gold,A\n".as_bytes()).is_err());
        assert!(PredictionSet::read("patient_id,gold,A\np,6,1\n".as_bytes()).is_err());
    }

    #[test]
    fn binding_modes_parse_and_validate() {
        let b: PredictorBinding =
            serde_json::from_str(r#"{"mode": "subprocess", "command": ["python3", "model.py"]}"#).unwrap();
        assert_eq!(b.mode(), "subprocess");
        assert_eq!(b.timeout(), Some(Duration::from_secs(30)));
        b.validate().unwrap();

        let http: PredictorBinding =
            serde_json::from_str(r#"{"mode": "http", "endpoint": "localhost:9000"}"#).unwrap();
        assert!(http.validate().unwrap_err().is_validation());
        assert!(serde_json::from_str::<PredictorBinding>(r#"{"mode": "carrier-pigeon"}"#).is_err());

        let bad = PredictorBinding::Subprocess {
            command: vec!["x".into()],
            timeout_seconds: 0.0,
        };
        assert!(bad.validate().is_err());
        assert!(PredictorBinding::Simulated {
            accuracy: [0.5, 1.5, 0.5],
            seed: None
        }
        .validate()
        .is_err());
    }

    #[test]
    fn local_bindings_predict() {
        let gold = PatientGrade::new(EyeGrade::new(2, 1, 0).unwrap(), EyeGrade::new(1, 0, 0).unwrap());
        let r = record("p1", gold);
        let req = PredictRequest {
            patient_alias: "X".into(),
            images: r.images.clone(),
        };
        let echo = PredictorBinding::Fixture { path: None }.connect_local(1).unwrap();
        assert_eq!(echo.predict(&req, &r).unwrap().grades(), gold);
        let perfect = PredictorBinding::Simulated {
            accuracy: [1.0; 3],
            seed: None,
        }
        .connect_local(1)
        .unwrap();
        assert_eq!(perfect.predict(&req, &r).unwrap().grades(), gold);
        let http = PredictorBinding::Http {
            endpoint: "http://127.0.0.1:1".into(),
            timeout_seconds: 1.0,
        };
        assert!(matches!(http.connect_local(1), Err(Error::Argument(_))));
    }
}
