//! Cohort construction, batch partitioning and the four-round crossover schedule.
//!
//! The canonical protocol uses four batches. Rounds 1–2 show every batch once
//! per clinician (two Manual, two Manual+AI). A washout then renames every
//! batch and patient alias, reshuffles presentation, and rounds 3–4 show each
//! batch lineage under the opposite arm, starting with the opposite arm of
//! round 1.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::severity::{compute_severity, EyeGrade, PatientGrade, SeverityLevel, SeverityRuleTable};

pub const CANONICAL_BATCHES: usize = 4;

/// Columns of the manifest file, in order.
pub const MANIFEST_COLUMNS: [&str; 9] = [
    "patient_id", "drusen_L", "pigment_L", "late_L", "drusen_R", "pigment_R", "late_R", "image_L",
    "image_R",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    Manual,
    ManualPlusAI,
}

impl Arm {
    pub fn opposite(self) -> Arm {
        match self {
            Arm::Manual => Arm::ManualPlusAI,
            Arm::ManualPlusAI => Arm::Manual,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Manual => "Manual",
            Arm::ManualPlusAI => "ManualPlusAI",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Arm> {
        match s {
            "Manual" => Ok(Arm::Manual),
            "ManualPlusAI" => Ok(Arm::ManualPlusAI),
            other => Err(Error::validation("arm", format!("unknown arm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EyeImages {
    pub left: String,
    pub right: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub gold: PatientGrade,
    pub gold_severity: SeverityLevel,
    pub images: EyeImages,
}

impl PatientRecord {
    pub fn new(
        patient_id: impl Into<String>,
        gold: PatientGrade,
        images: EyeImages,
        rules: &SeverityRuleTable,
    ) -> Result<Self> {
        let gold_severity = compute_severity(&gold, rules)?;
        Ok(PatientRecord {
            patient_id: patient_id.into(),
            gold,
            gold_severity,
            images,
        })
    }
}

/// Reads a manifest, deriving each gold severity from `rules`.
pub fn read_manifest<R: Read>(mut reader: R, rules: &SeverityRuleTable) -> Result<Vec<PatientRecord>> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(crate::severity::sniff_delimiter(&text))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let mut col = [0usize; 9];
    for (slot, name) in col.iter_mut().zip(MANIFEST_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("manifest is missing column {name}")))?;
    }

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let get = |k: usize| rec.get(col[k]).unwrap_or("");
        let num = |k: usize| -> Result<u8> {
            get(k).parse().map_err(|_| {
                Error::Parse(format!(
                    "line {line}: {} = {:?} is not an integer",
                    MANIFEST_COLUMNS[k],
                    get(k)
                ))
            })
        };
        let patient_id = get(0).to_string();
        if patient_id.is_empty() {
            return Err(Error::validation("patient_id", format!("line {line}: empty")));
        }
        if !seen.insert(patient_id.clone()) {
            return Err(Error::validation(
                "patient_id",
                format!("line {line}: duplicate patient {patient_id}"),
            ));
        }
        let gold = PatientGrade::new(
            EyeGrade {
                drusen: num(1)?,
                pigment: num(2)?,
                late_amd: num(3)?,
            },
            EyeGrade {
                drusen: num(4)?,
                pigment: num(5)?,
                late_amd: num(6)?,
            },
        );
        gold.validate().map_err(|e| match e {
            Error::Validation { field, message } => Error::Validation {
                field,
                message: format!("line {line} ({patient_id}): {message}"),
            },
            other => other,
        })?;
        let images = EyeImages {
            left: get(7).to_string(),
            right: get(8).to_string(),
        };
        if images.left.is_empty() || images.right.is_empty() {
            return Err(Error::validation(
                "images",
                format!("line {line} ({patient_id}): both eye images are required"),
            ));
        }
        out.push(PatientRecord::new(patient_id, gold, images, rules)?);
    }
    Ok(out)
}

pub fn write_manifest<W: Write>(records: &[PatientRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MANIFEST_COLUMNS)?;
    for r in records {
        let g = &r.gold;
        w.write_record([
            r.patient_id.clone(),
            g.left.drusen.to_string(),
            g.left.pigment.to_string(),
            g.left.late_amd.to_string(),
            g.right.drusen.to_string(),
            g.right.pigment.to_string(),
            g.right.late_amd.to_string(),
            r.images.left.clone(),
            r.images.right.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-level record counts, levels 0–5.
pub fn level_counts(records: &[PatientRecord]) -> [usize; 6] {
    let mut counts = [0; 6];
    for r in records {
        counts[r.gold_severity.value() as usize] += 1;
    }
    counts
}

/// Draws `n_per_level` records uniformly from each severity level.
///
/// The cohort lists level 0 first; within a level, records keep manifest order.
pub fn stratified_sample(
    manifest: &[PatientRecord],
    n_per_level: usize,
    seed: u64,
) -> Result<Vec<PatientRecord>> {
    let mut by_level: [Vec<&PatientRecord>; 6] = Default::default();
    for r in manifest {
        by_level[r.gold_severity.value() as usize].push(r);
    }
    for (level, members) in by_level.iter().enumerate() {
        if members.len() < n_per_level {
            return Err(Error::InsufficientLevel {
                level: level as u8,
                available: members.len(),
                required: n_per_level,
            });
        }
    }

    let mut rng = rng::stream(seed, "cohort");
    let mut cohort = Vec::with_capacity(n_per_level * 6);
    for members in &by_level {
        let mut picked = rand::seq::index::sample(&mut rng, members.len(), n_per_level).into_vec();
        picked.sort_unstable();
        cohort.extend(picked.into_iter().map(|i| members[i].clone()));
    }
    Ok(cohort)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: String,
    pub members: Vec<String>,
}

/// Label for the `i`-th batch: A, B, …, Z, AA, AB, …
pub fn batch_label(i: usize) -> String {
    let mut n = i;
    let mut s = Vec::new();
    loop {
        s.push(b'A' + (n % 26) as u8);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    s.reverse();
    String::from_utf8(s).expect("ascii")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionOptions {
    /// Balance severity levels across batches instead of a plain random split.
    pub stratified: bool,
    /// Permit batch sizes differing by one when `k` does not divide the cohort.
    pub allow_remainder: bool,
}

impl Default for PartitionOptions {
    fn default() -> Self {
        PartitionOptions {
            stratified: true,
            allow_remainder: false,
        }
    }
}

/// Splits the cohort into `k` disjoint batches of patient ids.
pub fn partition_batches(
    cohort: &[PatientRecord],
    k: usize,
    seed: u64,
    options: PartitionOptions,
) -> Result<Vec<Batch>> {
    if k == 0 || k > cohort.len() {
        return Err(Error::Argument(format!(
            "batch count {k} must be in 1..={}",
            cohort.len()
        )));
    }
    if !cohort.len().is_multiple_of(k) && !options.allow_remainder {
        return Err(Error::Argument(format!(
            "batch count {k} does not divide cohort size {}",
            cohort.len()
        )));
    }
    let mut ids = HashSet::new();
    for r in cohort {
        if !ids.insert(r.patient_id.as_str()) {
            return Err(Error::validation(
                "cohort",
                format!("patient {} listed twice", r.patient_id),
            ));
        }
    }

    let mut rng = rng::stream(seed, "partition");
    let mut members: Vec<Vec<String>> = vec![Vec::new(); k];
    if options.stratified {
        let mut next = 0usize;
        for level in SeverityLevel::all() {
            let mut group: Vec<&str> = cohort
                .iter()
                .filter(|r| r.gold_severity == level)
                .map(|r| r.patient_id.as_str())
                .collect();
            group.shuffle(&mut rng);
            for id in group {
                members[next % k].push(id.to_string());
                next += 1;
            }
        }
        for m in &mut members {
            m.shuffle(&mut rng);
        }
    } else {
        let mut all: Vec<&str> = cohort.iter().map(|r| r.patient_id.as_str()).collect();
        all.shuffle(&mut rng);
        for (i, id) in all.into_iter().enumerate() {
            members[i % k].push(id.to_string());
        }
    }

    Ok(members
        .into_iter()
        .enumerate()
        .map(|(i, members)| Batch {
            batch_id: batch_label(i),
            members,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchOrder {
    /// Every clinician sees batches A–D in the same round slots.
    Shared,
    /// Each clinician gets an independent random assignment of batches to slots.
    PerClinician,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleOptions {
    /// Alternate the starting arm between consecutive clinicians.
    pub counterbalance_arms: bool,
    pub batch_order: BatchOrder,
    /// Shuffle presentation order per clinician and round.
    pub shuffle_presentation: bool,
    /// Allow a washout alias to coincide with the alias it replaces.
    pub allow_fixed_alias: bool,
    /// Recorded only; not enforced.
    pub washout_days: u32,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions {
            counterbalance_arms: true,
            batch_order: BatchOrder::Shared,
            shuffle_presentation: true,
            allow_fixed_alias: false,
            washout_days: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub batch_id: String,
    pub arm: Arm,
    pub order: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicianRound {
    pub clinician_id: String,
    pub assignments: Vec<Assignment>,
}

impl ClinicianRound {
    /// Cases in presentation order.
    pub fn cases(&self) -> impl Iterator<Item = (&str, Arm, &str)> + '_ {
        self.assignments.iter().flat_map(|a| {
            a.order
                .iter()
                .map(move |alias| (alias.as_str(), a.arm, a.batch_id.as_str()))
        })
    }

    pub fn case_count(&self) -> usize {
        self.assignments.iter().map(|a| a.order.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub round_no: u8,
    pub clinicians: Vec<ClinicianRound>,
}

impl RoundPlan {
    pub fn for_clinician(&self, clinician_id: &str) -> Option<&ClinicianRound> {
        self.clinicians.iter().find(|c| c.clinician_id == clinician_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WashoutMap {
    pub seed: u64,
    pub alias_map: BTreeMap<String, String>,
    pub batch_map: BTreeMap<String, String>,
}

impl WashoutMap {
    pub fn inverse_alias_map(&self) -> BTreeMap<String, String> {
        self.alias_map.iter().map(|(k, v)| (v.clone(), k.clone())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub seed: u64,
    pub options: ScheduleOptions,
    pub clinicians: Vec<String>,
    /// Every alias in use, in both periods, mapped to its patient id.
    pub aliases: BTreeMap<String, String>,
    pub batches: Vec<Batch>,
    pub rounds: Vec<RoundPlan>,
    pub washout: Option<WashoutMap>,
}

impl Schedule {
    pub fn round(&self, round_no: u8) -> Option<&RoundPlan> {
        self.rounds.iter().find(|r| r.round_no == round_no)
    }

    pub fn batch(&self, batch_id: &str) -> Option<&Batch> {
        self.batches.iter().find(|b| b.batch_id == batch_id)
    }

    pub fn patient_of(&self, alias: &str) -> Option<&str> {
        self.aliases.get(alias).map(String::as_str)
    }

    pub fn patient_ids(&self) -> BTreeSet<&str> {
        self.aliases.values().map(String::as_str).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Schedule> {
        Ok(serde_json::from_str(text)?)
    }
}

fn fresh_alias<R: Rng>(rng: &mut R, taken: &mut HashSet<String>) -> String {
    const ALPHABET: &[u8] = b"abcdefghjkmnpqrstuvwxyz23456789";
    loop {
        let s: String = (0..10)
            .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
            .collect();
        if taken.insert(s.clone()) {
            return s;
        }
    }
}

fn shuffled<R: Rng>(items: &[String], rng: &mut R, shuffle: bool) -> Vec<String> {
    let mut v = items.to_vec();
    if shuffle {
        v.shuffle(rng);
    }
    v
}

/// Builds rounds 1–2 over four patient-id batches.
pub fn build_crossover_schedule(
    batches: &[Batch],
    clinicians: &[String],
    seed: u64,
    options: ScheduleOptions,
) -> Result<Schedule> {
    if batches.len() != CANONICAL_BATCHES {
        return Err(Error::Argument(format!(
            "crossover protocol needs exactly {CANONICAL_BATCHES} batches, got {}",
            batches.len()
        )));
    }
    if clinicians.is_empty() {
        return Err(Error::Argument("at least one clinician is required".into()));
    }
    let mut uniq = HashSet::new();
    for c in clinicians {
        if !uniq.insert(c) {
            return Err(Error::Argument(format!("clinician {c} listed twice")));
        }
    }
    let mut seen = HashSet::new();
    for b in batches {
        if b.members.is_empty() {
            return Err(Error::Argument(format!("batch {} is empty", b.batch_id)));
        }
        for m in &b.members {
            if !seen.insert(m.as_str()) {
                return Err(Error::Argument(format!(
                    "patient {m} appears in more than one batch"
                )));
            }
        }
    }

    let mut alias_rng = rng::stream(seed, "aliases/period1");
    let mut taken = HashSet::new();
    let mut aliases = BTreeMap::new();
    let aliased: Vec<Batch> = batches
        .iter()
        .map(|b| Batch {
            batch_id: b.batch_id.clone(),
            members: b
                .members
                .iter()
                .map(|pid| {
                    let a = fresh_alias(&mut alias_rng, &mut taken);
                    aliases.insert(a.clone(), pid.clone());
                    a
                })
                .collect(),
        })
        .collect();

    let mut order_rng = rng::stream(seed, "batch-order");
    let mut round1 = Vec::with_capacity(clinicians.len());
    let mut round2 = Vec::with_capacity(clinicians.len());
    for (ci, clinician) in clinicians.iter().enumerate() {
        let mut slots: Vec<usize> = (0..CANONICAL_BATCHES).collect();
        if options.batch_order == BatchOrder::PerClinician {
            slots.shuffle(&mut order_rng);
        }
        let first_arm = if options.counterbalance_arms && ci % 2 == 1 {
            Arm::ManualPlusAI
        } else {
            Arm::Manual
        };
        let mut pres_rng = rng::stream(seed, &format!("presentation/{clinician}/period1"));
        let mut assign = |slot: usize, arm: Arm| {
            let b = &aliased[slots[slot]];
            Assignment {
                batch_id: b.batch_id.clone(),
                arm,
                order: shuffled(&b.members, &mut pres_rng, options.shuffle_presentation),
            }
        };
        let r1 = vec![assign(0, first_arm), assign(1, first_arm.opposite())];
        let r2 = vec![assign(2, first_arm.opposite()), assign(3, first_arm)];
        round1.push(ClinicianRound {
            clinician_id: clinician.clone(),
            assignments: r1,
        });
        round2.push(ClinicianRound {
            clinician_id: clinician.clone(),
            assignments: r2,
        });
    }

    Ok(Schedule {
        seed,
        options,
        clinicians: clinicians.to_vec(),
        aliases,
        batches: aliased,
        rounds: vec![
            RoundPlan {
                round_no: 1,
                clinicians: round1,
            },
            RoundPlan {
                round_no: 2,
                clinicians: round2,
            },
        ],
        washout: None,
    })
}

/// Renames batches and aliases, then fills rounds 3–4 with every arm flipped.
pub fn apply_washout(schedule: &Schedule, seed: u64) -> Result<Schedule> {
    if schedule.washout.is_some() || schedule.rounds.len() != 2 {
        return Err(Error::Protocol(
            "washout already applied; rounds 3-4 exist".into(),
        ));
    }
    let shuffle = schedule.options.shuffle_presentation;
    let mut alias_rng = rng::stream(seed, "aliases/period2");
    let mut taken: HashSet<String> = schedule.aliases.keys().cloned().collect();
    let mut alias_map = BTreeMap::new();
    let mut aliases = schedule.aliases.clone();
    // Generate in batch order so the map is reproducible independent of BTreeMap layout.
    for b in &schedule.batches {
        for old in &b.members {
            let new = fresh_alias(&mut alias_rng, &mut taken);
            aliases.insert(new.clone(), schedule.aliases[old].clone());
            alias_map.insert(old.clone(), new);
        }
    }

    let period1 = schedule.batches.len();
    let mut batch_map = BTreeMap::new();
    let mut member_rng = rng::stream(seed, "washout/members");
    let mut renamed = Vec::with_capacity(period1);
    for (i, b) in schedule.batches.iter().enumerate() {
        let new_id = batch_label(period1 + i);
        batch_map.insert(b.batch_id.clone(), new_id.clone());
        let mut members: Vec<String> = b.members.iter().map(|a| alias_map[a].clone()).collect();
        members.shuffle(&mut member_rng);
        renamed.push(Batch {
            batch_id: new_id,
            members,
        });
    }
    let renamed_by_id: HashMap<&str, &Batch> =
        renamed.iter().map(|b| (b.batch_id.as_str(), b)).collect();

    let mut later = Vec::with_capacity(2);
    for (k, plan) in schedule.rounds.iter().enumerate() {
        let clinicians = plan
            .clinicians
            .iter()
            .map(|cr| {
                let mut pres_rng = rng::stream(
                    seed,
                    &format!("presentation/{}/round{}", cr.clinician_id, k + 3),
                );
                ClinicianRound {
                    clinician_id: cr.clinician_id.clone(),
                    assignments: cr
                        .assignments
                        .iter()
                        .map(|a| {
                            let b = renamed_by_id[batch_map[&a.batch_id].as_str()];
                            Assignment {
                                batch_id: b.batch_id.clone(),
                                arm: a.arm.opposite(),
                                order: shuffled(&b.members, &mut pres_rng, shuffle),
                            }
                        })
                        .collect(),
                }
            })
            .collect();
        later.push(RoundPlan {
            round_no: plan.round_no + 2,
            clinicians,
        });
    }

    let mut out = schedule.clone();
    out.aliases = aliases;
    out.batches.extend(renamed);
    out.rounds.extend(later);
    out.washout = Some(WashoutMap {
        seed,
        alias_map,
        batch_map,
    });
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub offending: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

struct Checks(Vec<CheckResult>);

impl Checks {
    fn push(&mut self, name: &str, mut offending: Vec<String>) {
        offending.sort();
        offending.dedup();
        self.0.push(CheckResult {
            name: name.to_string(),
            passed: offending.is_empty(),
            offending,
        });
    }
}

/// Audits every schedule invariant. Failures are report content, never errors.
pub fn verify_schedule(schedule: &Schedule) -> VerificationReport {
    let mut checks = Checks(Vec::new());
    let patient = |alias: &str| -> String {
        schedule
            .aliases
            .get(alias)
            .cloned()
            .unwrap_or_else(|| format!("<unknown alias {alias}>"))
    };
    let (period1, period2): (Vec<&Batch>, Vec<&Batch>) = match &schedule.washout {
        Some(w) => schedule
            .batches
            .iter()
            .partition(|b| w.batch_map.contains_key(&b.batch_id)),
        None => (schedule.batches.iter().collect(), Vec::new()),
    };
    let periods: Vec<&[&Batch]> = if schedule.washout.is_some() {
        vec![&period1, &period2]
    } else {
        vec![&period1]
    };
    let cohort: BTreeSet<String> = schedule.aliases.values().cloned().collect();

    // Disjointness and coverage, per period.
    let mut dup = Vec::new();
    let mut uncovered = Vec::new();
    for batches in &periods {
        let mut owner: HashMap<String, &str> = HashMap::new();
        for b in batches.iter() {
            for alias in &b.members {
                let pid = patient(alias);
                if let Some(prev) = owner.insert(pid.clone(), &b.batch_id) {
                    dup.push(format!("{pid} in batches {prev} and {}", b.batch_id));
                }
            }
        }
        for pid in &cohort {
            if !owner.contains_key(pid) {
                uncovered.push(pid.clone());
            }
        }
    }
    checks.push("batch_disjointness", dup);
    checks.push("cohort_coverage", uncovered);

    // Round structure: one Manual and one Manual+AI batch per clinician per round.
    let mut structure = Vec::new();
    let expected_rounds = if schedule.washout.is_some() { 4 } else { 2 };
    if schedule.rounds.len() != expected_rounds {
        structure.push(format!(
            "expected {expected_rounds} rounds, found {}",
            schedule.rounds.len()
        ));
    }
    for (i, plan) in schedule.rounds.iter().enumerate() {
        if plan.round_no as usize != i + 1 {
            structure.push(format!("round at position {i} is numbered {}", plan.round_no));
        }
        for c in &schedule.clinicians {
            let Some(cr) = plan.for_clinician(c) else {
                structure.push(format!("round {}: clinician {c} missing", plan.round_no));
                continue;
            };
            let arms: Vec<Arm> = cr.assignments.iter().map(|a| a.arm).collect();
            if arms.len() != 2 || arms[0] == arms[1] {
                structure.push(format!("round {}: clinician {c} arms {arms:?}", plan.round_no));
            }
            for a in &cr.assignments {
                match schedule.batch(&a.batch_id) {
                    None => structure.push(format!(
                        "round {}: clinician {c} unknown batch {}",
                        plan.round_no, a.batch_id
                    )),
                    Some(b) => {
                        let mut want = b.members.clone();
                        let mut got = a.order.clone();
                        want.sort();
                        got.sort();
                        if want != got {
                            structure.push(format!(
                                "round {}: clinician {c} order for batch {} is not a permutation of its members",
                                plan.round_no, a.batch_id
                            ));
                        }
                    }
                }
            }
        }
    }
    checks.push("round_structure", structure);

    // Arm alternation inside each pair of rounds.
    let first_arm = |round_no: u8, c: &str| -> Option<Arm> {
        schedule
            .round(round_no)?
            .for_clinician(c)?
            .assignments
            .first()
            .map(|a| a.arm)
    };
    let mut alternation = Vec::new();
    for (a, b) in [(1u8, 2u8), (3, 4)] {
        for c in &schedule.clinicians {
            if let (Some(x), Some(y)) = (first_arm(a, c), first_arm(b, c)) {
                if x == y {
                    alternation.push(format!("{c}: rounds {a} and {b} both start {x}"));
                }
            }
        }
    }
    checks.push("arm_alternation", alternation);

    // Coverage after rounds 1–2: every patient once, half per arm.
    let mut once = Vec::new();
    for c in &schedule.clinicians {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut per_arm: HashMap<Arm, usize> = HashMap::new();
        for r in [1u8, 2] {
            if let Some(cr) = schedule.round(r).and_then(|p| p.for_clinician(c)) {
                for (alias, arm, _) in cr.cases() {
                    *counts.entry(patient(alias)).or_default() += 1;
                    *per_arm.entry(arm).or_default() += 1;
                }
            }
        }
        for pid in &cohort {
            let n = counts.get(pid).copied().unwrap_or(0);
            if n != 1 {
                once.push(format!("{c}: patient {pid} graded {n} time(s) in rounds 1-2"));
            }
        }
        let m = per_arm.get(&Arm::Manual).copied().unwrap_or(0);
        let ai = per_arm.get(&Arm::ManualPlusAI).copied().unwrap_or(0);
        if m.abs_diff(ai) > batch_size_slack(schedule) {
            once.push(format!("{c}: rounds 1-2 split {m} Manual vs {ai} ManualPlusAI"));
        }
    }
    checks.push("period1_coverage", once);

    if let Some(w) = &schedule.washout {
        let mut bij = Vec::new();
        let p1_aliases: BTreeSet<&String> = period1.iter().flat_map(|b| b.members.iter()).collect();
        let keys: BTreeSet<&String> = w.alias_map.keys().collect();
        if keys != p1_aliases {
            bij.push("alias_map domain differs from period-1 aliases".to_string());
        }
        let mut images = HashSet::new();
        for (old, new) in &w.alias_map {
            if !images.insert(new) {
                bij.push(format!("alias {new} is the image of more than one alias"));
            }
            if old == new && !schedule.options.allow_fixed_alias {
                bij.push(format!("alias {old} maps to itself"));
            }
            if schedule.aliases.get(old) != schedule.aliases.get(new) {
                bij.push(format!("alias {old} -> {new} changes patient"));
            }
        }
        let mut batch_images = HashSet::new();
        for (old, new) in &w.batch_map {
            if !batch_images.insert(new) {
                bij.push(format!("batch {new} is the image of more than one batch"));
            }
            if old == new {
                bij.push(format!("batch {old} was not renamed"));
            }
            match (schedule.batch(old), schedule.batch(new)) {
                (Some(ob), Some(nb)) => {
                    let mut want: Vec<&String> = ob.members.iter().map(|a| &w.alias_map[a]).collect();
                    let mut got: Vec<&String> = nb.members.iter().collect();
                    want.sort();
                    got.sort();
                    if want != got {
                        bij.push(format!("batch {new} does not hold the renamed members of {old}"));
                    }
                }
                _ => bij.push(format!("batch lineage {old} -> {new} references a missing batch")),
            }
        }
        checks.push("washout_bijection", bij);

        // Arm swap along each batch lineage.
        let mut swap = Vec::new();
        let mut reversed = Vec::new();
        let lineage_of: HashMap<&str, &str> = w
            .batch_map
            .iter()
            .map(|(o, n)| (n.as_str(), o.as_str()))
            .collect();
        for c in &schedule.clinicians {
            let mut early: HashMap<&str, Arm> = HashMap::new();
            for r in [1u8, 2] {
                if let Some(cr) = schedule.round(r).and_then(|p| p.for_clinician(c)) {
                    for a in &cr.assignments {
                        early.insert(a.batch_id.as_str(), a.arm);
                    }
                }
            }
            for r in [3u8, 4] {
                if let Some(cr) = schedule.round(r).and_then(|p| p.for_clinician(c)) {
                    for a in &cr.assignments {
                        let origin = lineage_of.get(a.batch_id.as_str()).copied();
                        match origin.and_then(|o| early.get(o).map(|arm| (o, arm))) {
                            Some((_, &arm)) if arm != a.arm => {}
                            Some((o, &arm)) => swap.push(format!(
                                "{c}: batch {o} was {arm} and its successor {} is also {} in round {r}",
                                a.batch_id, a.arm
                            )),
                            None => swap.push(format!("{c}: batch {} has no lineage", a.batch_id)),
                        }
                    }
                }
            }
            if let (Some(x), Some(y)) = (first_arm(1, c), first_arm(3, c)) {
                if x == y {
                    reversed.push(format!("{c}: rounds 1 and 3 both start {x}"));
                }
            }
        }
        checks.push("arm_swap", swap);
        checks.push("round3_start_reversed", reversed);

        // Exactly twice, once per arm.
        let mut twice = Vec::new();
        for c in &schedule.clinicians {
            let mut arms: HashMap<String, Vec<Arm>> = HashMap::new();
            for plan in &schedule.rounds {
                if let Some(cr) = plan.for_clinician(c) {
                    for (alias, arm, _) in cr.cases() {
                        arms.entry(patient(alias)).or_default().push(arm);
                    }
                }
            }
            for pid in &cohort {
                let mut got = arms.get(pid).cloned().unwrap_or_default();
                got.sort();
                if got != [Arm::Manual, Arm::ManualPlusAI] {
                    twice.push(format!("{c}: patient {pid} graded under {got:?}"));
                }
            }
        }
        checks.push("exactly_twice_coverage", twice);
    }

    VerificationReport { checks: checks.0 }
}

fn batch_size_slack(schedule: &Schedule) -> usize {
    let sizes: Vec<usize> = schedule.batches.iter().map(|b| b.members.len()).collect();
    let max = sizes.iter().max().copied().unwrap_or(0);
    let min = sizes.iter().min().copied().unwrap_or(0);
    2 * (max - min)
}

/// Grading workload implied by a complete schedule, per clinician.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub patients: usize,
    pub images: usize,
    pub image_gradings: usize,
    pub feature_gradings: usize,
    pub patient_gradings: usize,
}

pub const FEATURES_PER_EYE: usize = 3;

impl Workload {
    /// Counts the cases actually scheduled for `clinician_id`.
    pub fn for_clinician(schedule: &Schedule, clinician_id: &str) -> Workload {
        let patient_gradings: usize = schedule
            .rounds
            .iter()
            .filter_map(|p| p.for_clinician(clinician_id))
            .map(ClinicianRound::case_count)
            .sum();
        let patients = schedule.patient_ids().len();
        Workload {
            patients,
            images: 2 * patients,
            patient_gradings,
            image_gradings: 2 * patient_gradings,
            feature_gradings: 2 * patient_gradings * FEATURES_PER_EYE,
        }
    }
}
