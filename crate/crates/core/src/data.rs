//! Survey + follow-up records, CSV ingestion and preprocessing.
//!
//! One row per sampled person. Ages are whole years; fractional ages in the
//! input are floored on load. Missing values are empty fields.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// Exact column order of the dataset CSV.
pub const DATASET_HEADER: [&str; 10] = [
    "id",
    "gender",
    "region",
    "study_year",
    "age",
    "participation",
    "smoking",
    "event_flag",
    "t_obs",
    "t_cens",
];

/// Calendar years of the eight survey rounds.
pub const STUDY_YEARS: [u16; 8] = [1972, 1977, 1982, 1987, 1992, 1997, 2002, 2007];
pub const N_YEARS: usize = STUDY_YEARS.len();

/// Number of (year, region, gender) reporting cells.
pub const N_CELLS: usize = N_YEARS * 2 * 2;

/// Youngest admissible age at survey across all rounds.
pub const MIN_SURVEY_AGE: u32 = 25;
/// Oldest admissible age at survey across all rounds.
pub const MAX_SURVEY_AGE: u32 = 64;

/// Default single-imputation probabilities P(region = Northern Savonia).
pub const DEFAULT_REGION_P1972: f64 = 0.495;
pub const DEFAULT_REGION_P1977: f64 = 0.493;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    Men = 0,
    Women = 1,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Men, Gender::Women];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Gender::Men),
            1 => Some(Gender::Women),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    NorthKarelia = 0,
    NorthernSavonia = 1,
}

impl Region {
    pub const ALL: [Region; 2] = [Region::NorthKarelia, Region::NorthernSavonia];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Region::NorthKarelia),
            1 => Some(Region::NorthernSavonia),
            _ => None,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Region::NorthKarelia => "NK",
            Region::NorthernSavonia => "NS",
        }
    }
}

/// Survey round, stored as an index into [`STUDY_YEARS`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StudyYear(u8);

impl StudyYear {
    pub fn all() -> impl Iterator<Item = StudyYear> {
        (0..N_YEARS as u8).map(StudyYear)
    }

    pub fn from_year(year: i64) -> Option<Self> {
        STUDY_YEARS
            .iter()
            .position(|&y| i64::from(y) == year)
            .map(|i| StudyYear(i as u8))
    }

    pub fn from_index(i: usize) -> Option<Self> {
        (i < N_YEARS).then_some(StudyYear(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn year(self) -> u16 {
        STUDY_YEARS[self.index()]
    }

    /// Inclusive admissible age range at survey for this round.
    pub fn age_range(self) -> (u32, u32) {
        match self.year() {
            1972 => (25, 59),
            1977 => (30, 64),
            _ => (MIN_SURVEY_AGE, MAX_SURVEY_AGE),
        }
    }
}

impl fmt::Display for StudyYear {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.year())
    }
}

/// A (study year, region, gender) reporting cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub year: StudyYear,
    pub region: Region,
    pub gender: Gender,
}

impl Cell {
    /// Cells in table order: year-major, then NK men, NK women, NS men, NS women.
    pub fn all() -> impl Iterator<Item = Cell> {
        (0..N_CELLS).map(Cell::from_index)
    }

    pub fn index(self) -> usize {
        self.year.index() * 4 + self.region.index() * 2 + self.gender.index()
    }

    pub fn from_index(i: usize) -> Cell {
        assert!(i < N_CELLS, "cell index {i} out of range");
        Cell {
            year: StudyYear((i / 4) as u8),
            region: Region::from_index((i / 2) % 2).unwrap(),
            gender: Gender::from_index(i % 2).unwrap(),
        }
    }

    pub fn label(self) -> String {
        let g = match self.gender {
            Gender::Men => "men",
            Gender::Women => "women",
        };
        format!("{}-{}-{}", self.year.year(), self.region.short_name(), g)
    }
}

/// One sampled individual.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonRecord {
    pub id: u64,
    pub gender: Gender,
    /// Missing only for non-participants of the 1972 and 1977 rounds.
    pub region: Option<Region>,
    pub year: StudyYear,
    /// Age at survey in whole years.
    pub age: u32,
    pub participated: bool,
    /// Observed daily smoking; present iff `participated`.
    pub smoking: Option<bool>,
    pub event: bool,
    /// Age at event or censoring, whichever came first.
    pub t_obs: u32,
    /// Age at end of follow-up or death from another cause.
    pub t_cens: u32,
}

impl PersonRecord {
    pub fn cell(&self) -> Option<Cell> {
        self.region.map(|region| Cell {
            year: self.year,
            region,
            gender: self.gender,
        })
    }

    /// Checks every per-record invariant, naming the first one violated.
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |rule: &str| {
            Err(DataError::Invariant {
                id: self.id,
                rule: rule.to_string(),
            })
        };
        match (self.participated, self.smoking) {
            (false, Some(_)) => return fail("smoking present for non-participant"),
            (true, None) => return fail("smoking missing for participant"),
            _ => {}
        }
        let (lo, hi) = self.year.age_range();
        if self.age < lo || self.age > hi {
            return fail(&format!(
                "age {} outside admissible range {lo}-{hi} for {}",
                self.age, self.year
            ));
        }
        if self.t_obs < self.age {
            return fail("follow-up precedes entry");
        }
        if self.event {
            if self.t_obs > self.t_cens {
                return fail("event after censoring");
            }
            if self.t_obs == self.age {
                return fail("event at entry age");
            }
        } else if self.t_obs != self.t_cens {
            return fail("censored record with t_obs != t_cens");
        }
        if self.region.is_none() {
            let early = matches!(self.year.year(), 1972 | 1977);
            if !early || self.participated {
                return fail("region missing outside non-participants of 1972/1977");
            }
        }
        Ok(())
    }
}

fn parse_flag(field: &str, name: &str, line: u64) -> Result<bool, DataError> {
    match field {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(DataError::Malformed {
            line,
            reason: format!("{name} must be 0 or 1, found `{other}`"),
        }),
    }
}

fn parse_optional_flag(field: &str, name: &str, line: u64) -> Result<Option<bool>, DataError> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_flag(field, name, line).map(Some)
    }
}

fn parse_age(field: &str, name: &str, line: u64) -> Result<u32, DataError> {
    let value: f64 = field.parse().map_err(|_| DataError::Malformed {
        line,
        reason: format!("{name} is not a number: `{field}`"),
    })?;
    if !value.is_finite() || !(0.0..=200.0).contains(&value) {
        return Err(DataError::Malformed {
            line,
            reason: format!("{name} out of range: {field}"),
        });
    }
    Ok(value.floor() as u32)
}

fn parse_row(record: &csv::StringRecord, line: u64) -> Result<PersonRecord, DataError> {
    if record.len() != DATASET_HEADER.len() {
        return Err(DataError::Malformed {
            line,
            reason: format!(
                "expected {} fields, found {}",
                DATASET_HEADER.len(),
                record.len()
            ),
        });
    }
    let f = |i: usize| record.get(i).unwrap().trim();
    let id: u64 = f(0).parse().map_err(|_| DataError::Malformed {
        line,
        reason: format!("id is not a nonnegative integer: `{}`", f(0)),
    })?;
    let gender = if parse_flag(f(1), "gender", line)? {
        Gender::Women
    } else {
        Gender::Men
    };
    let region = parse_optional_flag(f(2), "region", line)?.map(|ns| {
        if ns {
            Region::NorthernSavonia
        } else {
            Region::NorthKarelia
        }
    });
    let year_raw: i64 = f(3).parse().map_err(|_| DataError::Malformed {
        line,
        reason: format!("study_year is not an integer: `{}`", f(3)),
    })?;
    let year = StudyYear::from_year(year_raw).ok_or(DataError::UnknownStudyYear {
        line,
        year: year_raw,
    })?;
    Ok(PersonRecord {
        id,
        gender,
        region,
        year,
        age: parse_age(f(4), "age", line)?,
        participated: parse_flag(f(5), "participation", line)?,
        smoking: parse_optional_flag(f(6), "smoking", line)?,
        event: parse_flag(f(7), "event_flag", line)?,
        t_obs: parse_age(f(8), "t_obs", line)?,
        t_cens: parse_age(f(9), "t_cens", line)?,
    })
}

/// Parses and validates a dataset from any reader.
pub fn read_dataset<R: Read>(reader: R) -> Result<Vec<PersonRecord>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let found: Vec<&str> = header.iter().map(str::trim).collect();
    if found != DATASET_HEADER {
        return Err(DataError::Header {
            expected: DATASET_HEADER.join(","),
            found: found.join(","),
        });
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let rec = parse_row(&row, line)?;
        rec.validate()?;
        if !seen.insert(rec.id) {
            return Err(DataError::DuplicateId(rec.id));
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn load_dataset(path: &Path) -> Result<Vec<PersonRecord>, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_dataset(std::io::BufReader::new(file))
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Writes records in canonical form (integers, empty field for missing).
pub fn write_dataset<W: Write>(records: &[PersonRecord], writer: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(DATASET_HEADER)?;
    for r in records {
        let region = r.region.map_or("", |reg| flag(reg == Region::NorthernSavonia));
        let smoking = r.smoking.map_or("", flag);
        wtr.write_record([
            r.id.to_string().as_str(),
            flag(r.gender == Gender::Women),
            region,
            &r.year.year().to_string(),
            &r.age.to_string(),
            flag(r.participated),
            smoking,
            flag(r.event),
            &r.t_obs.to_string(),
            &r.t_cens.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| DataError::Csv(e.into()))?;
    Ok(())
}

pub fn save_dataset(records: &[PersonRecord], path: &Path) -> Result<(), DataError> {
    let file = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_dataset(records, std::io::BufWriter::new(file))
}

/// Single imputation of missing regions with fixed per-round probabilities
/// of Northern Savonia.
///
/// Only non-participants of 1972 and 1977 may carry a missing region; any
/// other missing region is an error.
pub fn impute_region_fixed(
    records: &[PersonRecord],
    p1972: f64,
    p1977: f64,
    seed: u64,
) -> Result<Vec<PersonRecord>, DataError> {
    for p in [p1972, p1977] {
        if !(0.0..=1.0).contains(&p) {
            return Err(DataError::Probability(p));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let mut rec = rec.clone();
        if rec.region.is_none() {
            let p = match rec.year.year() {
                1972 if !rec.participated => p1972,
                1977 if !rec.participated => p1977,
                _ => return Err(DataError::RegionNotImputable { id: rec.id }),
            };
            let ns = rng.random::<f64>() < p;
            rec.region = Some(if ns {
                Region::NorthernSavonia
            } else {
                Region::NorthKarelia
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Number of persons per reporting cell. Records without a region are skipped.
pub fn cell_sizes(records: &[PersonRecord]) -> [u32; N_CELLS] {
    let mut sizes = [0u32; N_CELLS];
    for cell in records.iter().filter_map(PersonRecord::cell) {
        sizes[cell.index()] += 1;
    }
    sizes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<PersonRecord>, DataError> {
        read_dataset(text.as_bytes())
    }

    const HEADER: &str = "id,gender,region,study_year,age,participation,smoking,event_flag,t_obs,t_cens\n";

    #[test]
    fn maps_fields_directly() {
        let recs = parse(&format!("{HEADER}1,0,0,1992,45,1,1,0,65,65\n")).unwrap();
        assert_eq!(
            recs[0],
            PersonRecord {
                id: 1,
                gender: Gender::Men,
                region: Some(Region::NorthKarelia),
                year: StudyYear::from_year(1992).unwrap(),
                age: 45,
                participated: true,
                smoking: Some(true),
                event: false,
                t_obs: 65,
                t_cens: 65,
            }
        );
    }

    #[test]
    fn rejects_smoking_for_non_participant() {
        let err = parse(&format!("{HEADER}1,0,0,1992,45,0,1,0,65,65\n")).unwrap_err();
        assert!(err.to_string().contains("smoking present for non-participant"));
    }

    #[test]
    fn rejects_follow_up_before_entry() {
        let err = parse(&format!("{HEADER}7,1,1,1992,30,1,0,0,24,24\n")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("follow-up precedes entry"), "{msg}");
        assert!(msg.contains("record 7"));
    }

    #[test]
    fn reports_line_of_malformed_row() {
        let text = format!("{HEADER}1,0,0,1992,45,1,1,0,65,65\n2,0,x,1992,45,1,1,0,65,65\n");
        match parse(&text).unwrap_err() {
            DataError::Malformed { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_year_and_bad_header() {
        let err = parse(&format!("{HEADER}1,0,0,1990,45,1,1,0,65,65\n")).unwrap_err();
        assert!(matches!(err, DataError::UnknownStudyYear { year: 1990, .. }));
        let err = parse("id,sex\n1,0\n").unwrap_err();
        assert!(matches!(err, DataError::Header { .. }));
    }

    #[test]
    fn age_range_depends_on_round() {
        assert!(parse(&format!("{HEADER}1,0,0,1972,62,1,1,0,80,80\n")).is_err());
        assert!(parse(&format!("{HEADER}1,0,0,1977,27,1,1,0,60,60\n")).is_err());
        assert!(parse(&format!("{HEADER}1,0,0,1977,64,1,1,0,99,99\n")).is_ok());
    }

    #[test]
    fn region_missing_only_for_early_non_participants() {
        assert!(parse(&format!("{HEADER}1,0,,1972,40,0,,0,80,80\n")).is_ok());
        assert!(parse(&format!("{HEADER}1,0,,1972,40,1,0,0,80,80\n")).is_err());
        assert!(parse(&format!("{HEADER}1,0,,1982,40,0,,0,70,70\n")).is_err());
    }

    #[test]
    fn fractional_ages_are_floored() {
        let recs = parse(&format!("{HEADER}1,0,0,1992,45.8,1,1,1,50.2,65.9\n")).unwrap();
        assert_eq!((recs[0].age, recs[0].t_obs, recs[0].t_cens), (45, 50, 65));
    }

    #[test]
    fn canonical_round_trip_is_byte_identical() {
        let text = format!(
            "{HEADER}1,0,0,1992,45,1,1,0,65,65\n2,1,,1977,33,0,,1,50,68\n3,1,1,2007,64,0,,0,69,69\n"
        );
        let recs = parse(&text).unwrap();
        let mut out = Vec::new();
        write_dataset(&recs, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    fn missing_region_rows(n: usize, year: u16) -> Vec<PersonRecord> {
        (0..n as u64)
            .map(|id| PersonRecord {
                id,
                gender: Gender::Men,
                region: None,
                year: StudyYear::from_year(year.into()).unwrap(),
                age: 40,
                participated: false,
                smoking: None,
                event: false,
                t_obs: 70,
                t_cens: 70,
            })
            .collect()
    }

    #[test]
    fn region_imputation_degenerate_probability() {
        let recs = missing_region_rows(200, 1977);
        let out = impute_region_fixed(&recs, 0.0, 1.0, 3).unwrap();
        assert!(out
            .iter()
            .all(|r| r.region == Some(Region::NorthernSavonia)));
    }

    #[test]
    fn region_imputation_concentrates() {
        let recs = missing_region_rows(10_000, 1972);
        for seed in [0, 1, 99] {
            let out = impute_region_fixed(&recs, 0.5, 0.5, seed).unwrap();
            let ns = out
                .iter()
                .filter(|r| r.region == Some(Region::NorthernSavonia))
                .count() as f64
                / 10_000.0;
            assert!((0.47..=0.53).contains(&ns), "{ns}");
        }
    }

    #[test]
    fn region_imputation_leaves_complete_rows_alone() {
        let mut recs = missing_region_rows(3, 1972);
        recs[1].region = Some(Region::NorthKarelia);
        let out = impute_region_fixed(
            &recs,
            DEFAULT_REGION_P1972,
            DEFAULT_REGION_P1977,
            5,
        )
        .unwrap();
        assert_eq!(out[1], recs[1]);
        assert!(out.iter().all(|r| r.region.is_some()));
        assert!(impute_region_fixed(&recs, 1.5, 0.5, 0).is_err());
    }

    #[test]
    fn cell_index_round_trips() {
        for i in 0..N_CELLS {
            assert_eq!(Cell::from_index(i).index(), i);
        }
        let c = Cell::from_index(5);
        assert_eq!(c.label(), "1977-NK-women");
    }
}
