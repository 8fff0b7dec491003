//! Grading sessions and the append-only event log.
//!
//! The service walks each clinician through a round in schedule order,
//! reveals AI suggestions only for ManualPlusAI cases, and times every case
//! on the server clock from presentation to submission. The log is one JSON
//! object per line; restarting the service replays it.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::design::{Arm, EyeImages, PatientRecord, Schedule};
use crate::error::{Error, Result};
use crate::predictor::{AiSuggestion, SuggestionCache};
use crate::severity::{compute_severity, PatientGrade, SeverityLevel, SeverityRuleTable};

pub const ROUNDS: [u8; 4] = [1, 2, 3, 4];

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to; used by simulations and tests.
#[derive(Debug)]
pub struct ManualClock {
    now: Mutex<DateTime<Utc>>,
}

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        ManualClock {
            now: Mutex::new(start),
        }
    }

    /// Starts at 2020-01-01T00:00:00Z.
    pub fn at_epoch() -> Self {
        Self::new(Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap())
    }

    pub fn advance(&self, seconds: f64) {
        let nanos = (seconds.max(0.0) * 1e9).round() as i64;
        *self.now.lock().unwrap() += chrono::Duration::nanoseconds(nanos);
    }

    pub fn set(&self, t: DateTime<Utc>) {
        *self.now.lock().unwrap() = t;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        *self.now.lock().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradingEvent {
    pub clinician_id: String,
    pub round_no: u8,
    pub arm: Arm,
    pub patient_alias: String,
    pub submitted: PatientGrade,
    pub derived_severity: SeverityLevel,
    /// Server-measured seconds from presentation to submission; null when the
    /// case was abandoned and its timing invalidated.
    pub elapsed_seconds: Option<f64>,
    pub presented_at: DateTime<Utc>,
    pub submitted_at: DateTime<Utc>,
    pub ai_suggestion_shown: bool,
    /// Duration reported by the client, kept for audit only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_elapsed_seconds: Option<f64>,
}

fn seconds_between(from: DateTime<Utc>, to: DateTime<Utc>) -> f64 {
    (to - from).num_nanoseconds().map_or_else(
        || (to - from).num_milliseconds() as f64 / 1e3,
        |n| n as f64 / 1e9,
    )
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFilter {
    pub clinician: Option<String>,
    pub round: Option<u8>,
    pub arm: Option<Arm>,
}

impl EventFilter {
    pub fn matches(&self, e: &GradingEvent) -> bool {
        self.clinician.as_ref().is_none_or(|c| *c == e.clinician_id)
            && self.round.is_none_or(|r| r == e.round_no)
            && self.arm.is_none_or(|a| a == e.arm)
    }
}

/// Conjunctive filter over events, preserving append order.
pub fn export_events<'a>(events: &'a [GradingEvent], filter: &'a EventFilter) -> impl Iterator<Item = &'a GradingEvent> + 'a {
    events.iter().filter(move |e| filter.matches(e))
}

/// Parses JSON-lines events; blank lines are skipped.
pub fn read_events<R: Read>(reader: R) -> Result<Vec<GradingEvent>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("event log line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn load_events(path: impl AsRef<Path>) -> Result<Vec<GradingEvent>> {
    read_events(File::open(path)?)
}

pub fn write_events<W: Write>(events: &[GradingEvent], mut writer: W) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut writer, e)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Append-only event store, optionally backed by a JSON-lines file.
///
/// Appends are serialized by one writer lock and hit the file before they
/// become visible, so readers always see a prefix of the file.
#[derive(Debug)]
pub struct EventLog {
    path: Option<PathBuf>,
    writer: Mutex<Option<File>>,
    events: RwLock<Vec<GradingEvent>>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        EventLog {
            path: None,
            writer: Mutex::new(None),
            events: RwLock::new(Vec::new()),
        }
    }

    /// Opens (or creates) a log and replays it. A torn final line left by a
    /// crash is dropped; corruption anywhere else is an error.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut text = String::new();
        file.read_to_string(&mut text)?;
        let mut events = Vec::new();
        let mut good_len = 0usize;
        let mut offset = 0usize;
        let lines: Vec<&str> = text.split_inclusive('\n').collect();
        for (i, line) in lines.iter().enumerate() {
            offset += line.len();
            if line.trim().is_empty() {
                good_len = offset;
                continue;
            }
            match serde_json::from_str::<GradingEvent>(line) {
                Ok(e) => {
                    events.push(e);
                    good_len = offset;
                }
                Err(_) if i + 1 == lines.len() && !line.ends_with('\n') => {
                    log::warn!("dropping torn final line of {}", path.display());
                }
                Err(e) => return Err(Error::Parse(format!("{} line {}: {e}", path.display(), i + 1))),
            }
        }
        if good_len < text.len() {
            file.set_len(good_len as u64)?;
            file.seek(std::io::SeekFrom::End(0))?;
        }
        Ok(EventLog {
            path: Some(path),
            writer: Mutex::new(Some(file)),
            events: RwLock::new(events),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(&self, event: GradingEvent) -> Result<()> {
        let mut writer = self.writer.lock().expect("event log writer poisoned");
        if let Some(file) = writer.as_mut() {
            let mut line = serde_json::to_string(&event)?;
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.events.write().expect("event log poisoned").push(event);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.events.read().expect("event log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Snapshot of all events in append order.
    pub fn events(&self) -> Vec<GradingEvent> {
        self.events.read().expect("event log poisoned").clone()
    }

    pub fn export(&self, filter: &EventFilter) -> Vec<GradingEvent> {
        let events = self.events.read().expect("event log poisoned");
        export_events(&events, filter).cloned().collect()
    }

    fn count_for(&self, clinician_id: &str, round_no: u8) -> usize {
        self.events
            .read()
            .expect("event log poisoned")
            .iter()
            .filter(|e| e.clinician_id == clinician_id && e.round_no == round_no)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub clinician_id: String,
    pub round_no: u8,
    pub position: usize,
    pub started_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseView {
    pub session_id: String,
    pub position: usize,
    pub total: usize,
    pub patient_alias: String,
    pub images: EyeImages,
    pub arm: Arm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ai_suggestion: Option<AiSuggestion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextCase {
    Case(CaseView),
    EndOfRound { session_id: String, round_no: u8, completed: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub patient_alias: String,
    pub grades: PatientGrade,
    #[serde(default)]
    pub client_elapsed_seconds: Option<f64>,
}

#[derive(Debug, Clone)]
struct CaseSlot {
    alias: String,
    arm: Arm,
}

#[derive(Debug)]
struct Presentation {
    presented_at: DateTime<Utc>,
    timing_invalid: bool,
}

#[derive(Debug)]
struct SessionState {
    session: Session,
    cases: Vec<CaseSlot>,
    presented: Option<Presentation>,
}

#[derive(Debug, Default)]
struct Sessions {
    by_id: HashMap<String, SessionState>,
    active: HashMap<(String, u8), String>,
    started: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressRow {
    pub clinician_id: String,
    pub round_no: u8,
    pub completed: usize,
    pub total: usize,
    pub active_session: Option<String>,
}

pub struct GradingService {
    schedule: Schedule,
    rules: SeverityRuleTable,
    records: HashMap<String, PatientRecord>,
    suggestions: SuggestionCache,
    log: EventLog,
    clock: Arc<dyn Clock>,
    sessions: Mutex<Sessions>,
}

impl GradingService {
    pub fn new(
        schedule: Schedule,
        records: Vec<PatientRecord>,
        rules: SeverityRuleTable,
        suggestions: SuggestionCache,
        log: EventLog,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        let records: HashMap<String, PatientRecord> =
            records.into_iter().map(|r| (r.patient_id.clone(), r)).collect();
        let missing: Vec<&str> = schedule
            .patient_ids()
            .into_iter()
            .filter(|p| !records.contains_key(*p))
            .collect();
        if !missing.is_empty() {
            return Err(Error::validation(
                "manifest",
                format!("scheduled patients missing from manifest: {}", missing.join(", ")),
            ));
        }
        Ok(GradingService {
            schedule,
            rules,
            records,
            suggestions,
            log,
            clock,
            sessions: Mutex::new(Sessions::default()),
        })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn rules(&self) -> &SeverityRuleTable {
        &self.rules
    }

    /// Opens a session at the first case not yet in the log for this pair.
    pub fn start_session(&self, clinician_id: &str, round_no: u8) -> Result<Session> {
        let round = self
            .schedule
            .round(round_no)
            .ok_or_else(|| Error::NotFound(format!("round {round_no}")))?;
        let plan = round
            .for_clinician(clinician_id)
            .ok_or_else(|| Error::NotFound(format!("clinician {clinician_id} in round {round_no}")))?;
        let mut sessions = self.sessions.lock().expect("sessions poisoned");
        let key = (clinician_id.to_string(), round_no);
        if let Some(existing) = sessions.active.get(&key) {
            return Err(Error::Conflict(format!(
                "session {existing} is already active for {clinician_id} round {round_no}"
            )));
        }
        sessions.started += 1;
        let session = Session {
            session_id: format!("{clinician_id}-r{round_no}-{}", sessions.started),
            clinician_id: clinician_id.to_string(),
            round_no,
            position: self.log.count_for(clinician_id, round_no),
            started_at: self.clock.now(),
        };
        let cases = plan
            .cases()
            .map(|(alias, arm, _)| CaseSlot {
                alias: alias.to_string(),
                arm,
            })
            .collect();
        sessions.active.insert(key, session.session_id.clone());
        sessions.by_id.insert(
            session.session_id.clone(),
            SessionState {
                session: session.clone(),
                cases,
                presented: None,
            },
        );
        Ok(session)
    }

    pub fn session(&self, session_id: &str) -> Result<Session> {
        let sessions = self.sessions.lock().expect("sessions poisoned");
        sessions
            .by_id
            .get(session_id)
            .map(|s| s.session.clone())
            .ok_or_else(|| Error::NotFound(format!("session {session_id}")))
    }

    /// Presents the current case; repeated calls return the same view and keep
    /// the original presentation time.
    pub fn next_case(&self, session_id: &str) -> Result<NextCase> {
        let mut sessions = self.sessions.lock().expect("sessions poisoned");
        let state = sessions
            .by_id
            .get_mut(session_id)
            .ok_or_else(|| Error::NotFound(format!("session {session_id}")))?;
        let pos = state.session.position;
        let Some(slot) = state.cases.get(pos).cloned() else {
            return Ok(NextCase::EndOfRound {
                session_id: session_id.to_string(),
                round_no: state.session.round_no,
                completed: pos,
            });
        };
        let patient_id = self
            .schedule
            .patient_of(&slot.alias)
            .ok_or_else(|| Error::InvariantViolation(format!("alias {} has no patient", slot.alias)))?;
        let record = &self.records[patient_id];
        let ai_suggestion = match slot.arm {
            Arm::Manual => None,
            Arm::ManualPlusAI => Some(self.suggestions.get(patient_id).cloned().ok_or_else(|| {
                Error::PredictorUnavailable(format!(
                    "no suggestion available for case {}{}",
                    slot.alias,
                    self.suggestions
                        .failures
                        .get(patient_id)
                        .map(|r| format!(": {r}"))
                        .unwrap_or_default()
                ))
            })?),
        };
        if state.presented.is_none() {
            state.presented = Some(Presentation {
                presented_at: self.clock.now(),
                timing_invalid: false,
            });
        }
        Ok(NextCase::Case(CaseView {
            session_id: session_id.to_string(),
            position: pos,
            total: state.cases.len(),
            patient_alias: slot.alias,
            images: record.images.clone(),
            arm: slot.arm,
            ai_suggestion,
        }))
    }

    /// Marks the presented case as interrupted: it must still be graded, but
    /// its time is recorded as missing.
    pub fn abandon_case(&self, session_id: &str) -> Result<()> {
        let mut sessions = self.sessions.lock().expect("sessions poisoned");
        let state = sessions
            .by_id
            .get_mut(session_id)
            .ok_or_else(|| Error::NotFound(format!("session {session_id}")))?;
        match state.presented.as_mut() {
            Some(p) => {
                p.timing_invalid = true;
                Ok(())
            }
            None => Err(Error::Protocol("no case is currently presented".into())),
        }
    }

    pub fn submit(&self, session_id: &str, submission: Submission) -> Result<GradingEvent> {
        let mut sessions = self.sessions.lock().expect("sessions poisoned");
        let state = sessions
            .by_id
            .get_mut(session_id)
            .ok_or_else(|| Error::NotFound(format!("session {session_id}")))?;
        let pos = state.session.position;
        let slot = state.cases.get(pos).cloned().ok_or_else(|| Error::OutOfOrder {
            expected: "end of round".into(),
            got: submission.patient_alias.clone(),
        })?;
        if slot.alias != submission.patient_alias {
            return Err(Error::OutOfOrder {
                expected: slot.alias,
                got: submission.patient_alias,
            });
        }
        let presentation = state
            .presented
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("case {} has not been presented", slot.alias)))?;
        let derived_severity = compute_severity(&submission.grades, &self.rules)?;
        if let Some(c) = submission.client_elapsed_seconds {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::validation("client_elapsed_seconds", format!("{c} is not a nonnegative duration")));
            }
        }
        let presented_at = presentation.presented_at;
        let submitted_at = self.clock.now().max(presented_at);
        let event = GradingEvent {
            clinician_id: state.session.clinician_id.clone(),
            round_no: state.session.round_no,
            arm: slot.arm,
            patient_alias: slot.alias,
            submitted: submission.grades,
            derived_severity,
            elapsed_seconds: (!presentation.timing_invalid).then(|| seconds_between(presented_at, submitted_at)),
            presented_at,
            submitted_at,
            ai_suggestion_shown: slot.arm == Arm::ManualPlusAI,
            client_elapsed_seconds: submission.client_elapsed_seconds,
        };
        self.log.append(event.clone())?;
        state.session.position += 1;
        state.presented = None;
        if state.session.position == state.cases.len() {
            let key = (state.session.clinician_id.clone(), state.session.round_no);
            sessions.active.remove(&key);
        }
        Ok(event)
    }

    pub fn progress(&self) -> Vec<ProgressRow> {
        let sessions = self.sessions.lock().expect("sessions poisoned");
        let mut counts: HashMap<(&str, u8), usize> = HashMap::new();
        let events = self.log.events();
        for e in &events {
            *counts.entry((e.clinician_id.as_str(), e.round_no)).or_default() += 1;
        }
        let mut rows = Vec::new();
        for round in &self.schedule.rounds {
            for c in &round.clinicians {
                rows.push(ProgressRow {
                    clinician_id: c.clinician_id.clone(),
                    round_no: round.round_no,
                    completed: counts.get(&(c.clinician_id.as_str(), round.round_no)).copied().unwrap_or(0),
                    total: c.case_count(),
                    active_session: sessions.active.get(&(c.clinician_id.clone(), round.round_no)).cloned(),
                });
            }
        }
        rows
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingCompleteness {
    pub clinician_id: String,
    /// Rounds with at least one event and a time on every event.
    pub complete_rounds: Vec<u8>,
    pub eligible: bool,
}

/// Per-clinician timing coverage. Only clinicians with complete times in all
/// four rounds enter the time model; accuracy analysis ignores this.
pub fn timing_completeness(events: &[GradingEvent]) -> Vec<TimingCompleteness> {
    let mut by: BTreeMap<&str, BTreeMap<u8, bool>> = BTreeMap::new();
    for e in events {
        let ok = by.entry(&e.clinician_id).or_default().entry(e.round_no).or_insert(true);
        *ok &= e.elapsed_seconds.is_some();
    }
    by.into_iter()
        .map(|(c, rounds)| {
            let complete_rounds: Vec<u8> = rounds.into_iter().filter(|(_, ok)| *ok).map(|(r, _)| r).collect();
            TimingCompleteness {
                clinician_id: c.to_string(),
                eligible: ROUNDS.iter().all(|r| complete_rounds.contains(r)),
                complete_rounds,
            }
        })
        .collect()
}

/// Field names that carry predictor output and must never reach a Manual case.
pub const PREDICTOR_FIELDS: [&str; 5] = ["ai_suggestion", "suggestion", "prediction", "confidence", "predicted_severity"];

/// Lists predictor-output keys found anywhere in a Manual-arm payload.
pub fn audit_manual_payload(payload: &serde_json::Value) -> Vec<String> {
    let mut found = Vec::new();
    fn walk(v: &serde_json::Value, path: &str, found: &mut Vec<String>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, child) in map {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    if PREDICTOR_FIELDS.contains(&k.as_str()) {
                        found.push(p.clone());
                    }
                    walk(child, &p, found);
                }
            }
            serde_json::Value::Array(items) => {
                for (i, child) in items.iter().enumerate() {
                    walk(child, &format!("{path}[{i}]"), found);
                }
            }
            _ => {}
        }
    }
    walk(payload, "", &mut found);
    found
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventViolation {
    pub index: usize,
    pub rule: String,
    pub detail: String,
}

/// Re-checks the stored invariants of a log: severity consistency, arm/AI
/// flag agreement, timing monotonicity, and agreement with the schedule.
pub fn audit_events(events: &[GradingEvent], schedule: &Schedule, rules: &SeverityRuleTable) -> Vec<EventViolation> {
    let mut arms: HashMap<(&str, u8, &str), Arm> = HashMap::new();
    for round in &schedule.rounds {
        for c in &round.clinicians {
            for (alias, arm, _) in c.cases() {
                arms.insert((c.clinician_id.as_str(), round.round_no, alias), arm);
            }
        }
    }
    let mut out = Vec::new();
    let mut push = |index: usize, rule: &str, detail: String| {
        out.push(EventViolation {
            index,
            rule: rule.into(),
            detail,
        })
    };
    for (i, e) in events.iter().enumerate() {
        match compute_severity(&e.submitted, rules) {
            Ok(s) if s == e.derived_severity => {}
            Ok(s) => push(i, "severity_consistency", format!("stored {}, recomputed {s}", e.derived_severity)),
            Err(err) => push(i, "severity_consistency", err.to_string()),
        }
        if e.ai_suggestion_shown != (e.arm == Arm::ManualPlusAI) {
            push(i, "arm_blinding", format!("arm {} with ai_suggestion_shown={}", e.arm, e.ai_suggestion_shown));
        }
        if e.submitted_at < e.presented_at {
            push(i, "timing_monotonicity", format!("submitted {} before presented {}", e.submitted_at, e.presented_at));
        }
        if let Some(s) = e.elapsed_seconds {
            let expect = seconds_between(e.presented_at, e.submitted_at);
            if s < 0.0 || (s - expect).abs() > 1e-6 {
                push(i, "elapsed_seconds", format!("{s} vs {expect}"));
            }
        }
        match arms.get(&(e.clinician_id.as_str(), e.round_no, e.patient_alias.as_str())) {
            Some(a) if *a == e.arm => {}
            Some(a) => push(i, "schedule_arm", format!("scheduled {a}, logged {}", e.arm)),
            None => push(i, "schedule_case", format!("{} not scheduled for {} round {}", e.patient_alias, e.clinician_id, e.round_no)),
        }
    }
    out
}
