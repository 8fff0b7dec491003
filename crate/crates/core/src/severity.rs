//! Patient-level AMD severity (0–5) from per-eye risk-feature grades.
//!
//! Each eye carries three ordinal risk features: drusen (0–2), pigmentary
//! abnormality (0–1) and late AMD (0–1). A [`SeverityRuleTable`] maps every
//! one of the 12 × 12 = 144 two-eye combinations to a level. The built-in
//! table follows the simplified severity scale:
//!
//! * late AMD in either eye → 5
//! * otherwise one point per eye with large drusen, one point per eye with
//!   pigment, and one point when both eyes have medium drusen and neither has
//!   large drusen; the sum is capped at 4.
//!
//! Tables can be replaced from a delimited file (see [`load_rule_table`]).

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EYE_GRADE_COUNT: usize = 12;
pub const COMBINATION_COUNT: usize = EYE_GRADE_COUNT * EYE_GRADE_COUNT;

/// Header of the rule-table file, in column order.
pub const RULE_TABLE_COLUMNS: [&str; 7] = [
    "drusen_L", "pigment_L", "late_L", "drusen_R", "pigment_R", "late_R", "level",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EyeGrade {
    pub drusen: u8,
    pub pigment: u8,
    pub late_amd: u8,
}

impl EyeGrade {
    pub const NONE: EyeGrade = EyeGrade {
        drusen: 0,
        pigment: 0,
        late_amd: 0,
    };

    /// Builds a grade, rejecting out-of-range fields.
    pub fn new(drusen: u8, pigment: u8, late_amd: u8) -> Result<Self> {
        let g = EyeGrade {
            drusen,
            pigment,
            late_amd,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.drusen > 2 {
            return Err(Error::validation(
                "drusen",
                format!("{} is outside 0..=2", self.drusen),
            ));
        }
        if self.pigment > 1 {
            return Err(Error::validation(
                "pigment",
                format!("{} is outside 0..=1", self.pigment),
            ));
        }
        if self.late_amd > 1 {
            return Err(Error::validation(
                "late_amd",
                format!("{} is outside 0..=1", self.late_amd),
            ));
        }
        Ok(())
    }

    /// Position in lexicographic (drusen, pigment, late_amd) order.
    pub fn index(&self) -> usize {
        self.drusen as usize * 4 + self.pigment as usize * 2 + self.late_amd as usize
    }

    pub fn from_index(idx: usize) -> EyeGrade {
        assert!(idx < EYE_GRADE_COUNT, "eye-grade index {idx} out of range");
        EyeGrade {
            drusen: (idx / 4) as u8,
            pigment: ((idx / 2) % 2) as u8,
            late_amd: (idx % 2) as u8,
        }
    }

    /// All 12 valid grades in lexicographic order.
    pub fn all() -> impl Iterator<Item = EyeGrade> {
        (0..EYE_GRADE_COUNT).map(EyeGrade::from_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatientGrade {
    pub left: EyeGrade,
    pub right: EyeGrade,
}

impl PatientGrade {
    pub fn new(left: EyeGrade, right: EyeGrade) -> Self {
        PatientGrade { left, right }
    }

    pub fn validate(&self) -> Result<()> {
        self.left.validate().map_err(|e| prefix_field(e, "left"))?;
        self.right.validate().map_err(|e| prefix_field(e, "right"))
    }

    pub fn swapped(&self) -> PatientGrade {
        PatientGrade {
            left: self.right,
            right: self.left,
        }
    }

    fn index(&self) -> usize {
        self.left.index() * EYE_GRADE_COUNT + self.right.index()
    }
}

fn prefix_field(err: Error, eye: &str) -> Error {
    match err {
        Error::Validation { field, message } => Error::Validation {
            field: format!("{eye}.{field}"),
            message,
        },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct SeverityLevel(u8);

impl SeverityLevel {
    pub const MAX: u8 = 5;

    pub fn new(level: u8) -> Result<Self> {
        if level > Self::MAX {
            return Err(Error::validation(
                "level",
                format!("{level} is outside 0..=5"),
            ));
        }
        Ok(SeverityLevel(level))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = SeverityLevel> {
        (0..=Self::MAX).map(SeverityLevel)
    }
}

impl TryFrom<u8> for SeverityLevel {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        SeverityLevel::new(v)
    }
}

impl From<SeverityLevel> for u8 {
    fn from(l: SeverityLevel) -> u8 {
        l.0
    }
}

impl fmt::Display for SeverityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Total mapping from two-eye grades to a severity level.
#[derive(Clone, PartialEq, Eq)]
pub struct SeverityRuleTable {
    levels: [SeverityLevel; COMBINATION_COUNT],
}

impl fmt::Debug for SeverityRuleTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SeverityRuleTable")
            .field("is_default", &(*self == Self::default()))
            .finish()
    }
}

impl Default for SeverityRuleTable {
    fn default() -> Self {
        let mut levels = [SeverityLevel(0); COMBINATION_COUNT];
        for left in EyeGrade::all() {
            for right in EyeGrade::all() {
                let g = PatientGrade { left, right };
                levels[g.index()] = simplified_scale(&g);
            }
        }
        SeverityRuleTable { levels }
    }
}

fn simplified_scale(g: &PatientGrade) -> SeverityLevel {
    let eyes = [g.left, g.right];
    if eyes.iter().any(|e| e.late_amd == 1) {
        return SeverityLevel(5);
    }
    let large = eyes.iter().filter(|e| e.drusen == 2).count();
    let pigment = eyes.iter().filter(|e| e.pigment == 1).count();
    let bilateral_medium = large == 0 && eyes.iter().all(|e| e.drusen == 1);
    let score = large + pigment + usize::from(bilateral_medium);
    SeverityLevel(score.min(4) as u8)
}

impl SeverityRuleTable {
    pub fn level(&self, grade: &PatientGrade) -> SeverityLevel {
        self.levels[grade.index()]
    }

    /// Builds a table from explicit rows, checking every table invariant.
    pub fn from_rows(rows: &[(PatientGrade, SeverityLevel)]) -> Result<Self> {
        let mut slots: [Option<SeverityLevel>; COMBINATION_COUNT] = [None; COMBINATION_COUNT];
        for (grade, level) in rows {
            grade.validate()?;
            let has_late = grade.left.late_amd == 1 || grade.right.late_amd == 1;
            if has_late && level.value() != 5 {
                return Err(Error::InvariantViolation(format!(
                    "{} maps to {level}, late AMD must map to 5",
                    describe(grade)
                )));
            }
            let slot = &mut slots[grade.index()];
            match slot {
                Some(prev) if prev != level => {
                    return Err(Error::validation(
                        "row",
                        format!("{} listed twice with levels {prev} and {level}", describe(grade)),
                    ))
                }
                _ => *slot = Some(*level),
            }
        }

        let missing: Vec<String> = (0..COMBINATION_COUNT)
            .filter(|&i| slots[i].is_none())
            .map(|i| describe(&grade_at(i)))
            .collect();
        if !missing.is_empty() {
            return Err(Error::IncompleteTable { missing });
        }

        let levels = slots.map(|s| s.expect("checked above"));
        for i in 0..COMBINATION_COUNT {
            let g = grade_at(i);
            let swapped = g.swapped();
            if levels[i] != levels[swapped.index()] {
                return Err(Error::Asymmetry(format!(
                    "{} -> {} but {} -> {}",
                    describe(&g),
                    levels[i],
                    describe(&swapped),
                    levels[swapped.index()]
                )));
            }
        }
        Ok(SeverityRuleTable { levels })
    }
}

fn grade_at(i: usize) -> PatientGrade {
    PatientGrade {
        left: EyeGrade::from_index(i / EYE_GRADE_COUNT),
        right: EyeGrade::from_index(i % EYE_GRADE_COUNT),
    }
}

fn describe(g: &PatientGrade) -> String {
    format!(
        "({},{},{},{},{},{})",
        g.left.drusen, g.left.pigment, g.left.late_amd, g.right.drusen, g.right.pigment, g.right.late_amd
    )
}

pub fn compute_severity(grade: &PatientGrade, rules: &SeverityRuleTable) -> Result<SeverityLevel> {
    grade.validate()?;
    Ok(rules.level(grade))
}

/// All 144 (grade, level) rows in lexicographic field order.
pub fn enumerate_rule_table(rules: &SeverityRuleTable) -> Vec<(PatientGrade, SeverityLevel)> {
    (0..COMBINATION_COUNT)
        .map(|i| {
            let g = grade_at(i);
            (g, rules.level(&g))
        })
        .collect()
}

pub fn load_rule_table(path: impl AsRef<Path>) -> Result<SeverityRuleTable> {
    let file = std::fs::File::open(path.as_ref())?;
    read_rule_table(file)
}

/// Reads a comma- or tab-delimited rule table with a header row.
pub fn read_rule_table<R: Read>(mut reader: R) -> Result<SeverityRuleTable> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    let delimiter = sniff_delimiter(&text);
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let headers = rdr.headers()?.clone();
    let mut column = [0usize; 7];
    for (slot, name) in column.iter_mut().zip(RULE_TABLE_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse(format!("rule table is missing column {name}")))?;
    }

    let mut rows = Vec::with_capacity(COMBINATION_COUNT);
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let mut values = [0u8; 7];
        for (k, &col) in column.iter().enumerate() {
            let raw = record.get(col).unwrap_or("");
            values[k] = raw.parse().map_err(|_| {
                Error::Parse(format!(
                    "row {}: {} = {raw:?} is not an integer",
                    line + 2,
                    RULE_TABLE_COLUMNS[k]
                ))
            })?;
        }
        let left = EyeGrade::new(values[0], values[1], values[2]).map_err(|e| prefix_field(e, "left"))?;
        let right = EyeGrade::new(values[3], values[4], values[5]).map_err(|e| prefix_field(e, "right"))?;
        rows.push((PatientGrade { left, right }, SeverityLevel::new(values[6])?));
    }
    SeverityRuleTable::from_rows(&rows)
}

pub(crate) fn sniff_delimiter(text: &str) -> u8 {
    let header = text.lines().next().unwrap_or("");
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

pub fn write_rule_table<W: Write>(rules: &SeverityRuleTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RULE_TABLE_COLUMNS)?;
    for (g, level) in enumerate_rule_table(rules) {
        w.write_record(
            [
                g.left.drusen,
                g.left.pigment,
                g.left.late_amd,
                g.right.drusen,
                g.right.pigment,
                g.right.late_amd,
                level.value(),
            ]
            .map(|v| v.to_string()),
        )?;
    }
    w.flush()?;
    Ok(())
}
