//! Synthetic survey + follow-up data drawn from the full generative model.

use std::io::Write;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Cell, PersonRecord, Region, StudyYear, N_CELLS, N_YEARS};
use crate::error::{DataError, ModelError};
use crate::exposure::{FIRST_AGE, LAST_AGE};
use crate::model::{hazard, participation_prob, smoking_prob, ModelParams};

/// Versioned default scenario shipped with the crate.
pub const PAPER_SHAPE_SCENARIO: &str = include_str!("../scenarios/paper_shape_v1.json");

/// Survey sample sizes per (year, region, gender) cell in [`Cell`] order.
pub const SURVEY_SAMPLE_SIZES: [u32; N_CELLS] = [
    2641, 2607, 3574, 3555, // 1972
    2323, 2382, 3223, 3391, // 1977
    2007, 2019, 1810, 1566, // 1982
    1971, 1976, 979, 988, // 1987
    984, 993, 982, 990, // 1992
    1052, 1020, 990, 997, // 1997
    1021, 1011, 1000, 1000, // 2002
    811, 825, 817, 820, // 2007
];

/// On-disk scenario description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub version: u32,
    #[serde(default)]
    pub description: String,
    pub base_sizes: Vec<u32>,
    pub follow_up_end: u16,
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Persons per reporting cell, [`Cell`] order.
    pub sizes: Vec<u32>,
    pub params: ModelParams,
    pub follow_up_end: u16,
    /// Inclusive admissible survey ages per round.
    pub age_ranges: Vec<(u32, u32)>,
    pub seed: u64,
    /// Blank the region of 1972/1977 non-participants, as in the field data.
    #[serde(default)]
    pub mask_early_regions: bool,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.sizes.len() != N_CELLS {
            return Err(ModelError::Config(format!(
                "scenario needs {N_CELLS} cell sizes, found {}",
                self.sizes.len()
            )));
        }
        if let Some(i) = self.sizes.iter().position(|&n| n == 0) {
            return Err(ModelError::Config(format!(
                "cell {} has zero persons",
                Cell::from_index(i).label()
            )));
        }
        if self.age_ranges.len() != N_YEARS {
            return Err(ModelError::Config("need one age range per study year".into()));
        }
        for (s, &(lo, hi)) in self.age_ranges.iter().enumerate() {
            let year = StudyYear::from_index(s).unwrap();
            let (min, max) = year.age_range();
            if lo > hi || lo < min || hi > max {
                return Err(ModelError::Config(format!(
                    "age range {lo}-{hi} for {year} outside {min}-{max}"
                )));
            }
            if u32::from(self.follow_up_end) < u32::from(year.year()) {
                return Err(ModelError::Config("follow-up ends before a survey round".into()));
            }
        }
        self.params.validate(20.0)
    }

    pub fn from_file(file: ScenarioFile, scale: f64, seed: u64) -> Result<Self, ModelError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(ModelError::Config(format!("scale must be positive, got {scale}")));
        }
        if file.base_sizes.len() != N_CELLS {
            return Err(ModelError::Config(format!(
                "scenario needs {N_CELLS} base sizes, found {}",
                file.base_sizes.len()
            )));
        }
        let sizes: Vec<u32> = file
            .base_sizes
            .iter()
            .map(|&n| (scale * f64::from(n)).round() as u32)
            .collect();
        let config = ScenarioConfig {
            sizes,
            params: file.params,
            follow_up_end: file.follow_up_end,
            age_ranges: StudyYear::all().map(StudyYear::age_range).collect(),
            seed,
            mask_early_regions: false,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn total_persons(&self) -> u64 {
        self.sizes.iter().map(|&n| u64::from(n)).sum()
    }
}

/// Scenario with survey sizes scaled from the field study and the bundled
/// default true parameters.
pub fn scenario_from_paper_shape(scale: f64, seed: u64) -> Result<ScenarioConfig, ModelError> {
    let file: ScenarioFile = serde_json::from_str(PAPER_SHAPE_SCENARIO)
        .map_err(|e| ModelError::Config(format!("bundled scenario: {e}")))?;
    ScenarioConfig::from_file(file, scale, seed)
}

pub fn load_scenario_file(path: &Path) -> Result<ScenarioFile, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| DataError::Malformed {
        line: e.line() as u64,
        reason: format!("scenario file: {e}"),
    })
}

/// Realized smoking prevalence (%) per reporting cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthTable {
    pub prevalence_percent: [f64; N_CELLS],
}

impl TruthTable {
    pub fn from_counts(smokers: &[u32; N_CELLS], sizes: &[u32; N_CELLS]) -> Self {
        let mut prevalence_percent = [f64::NAN; N_CELLS];
        for i in 0..N_CELLS {
            if sizes[i] > 0 {
                prevalence_percent[i] = 100.0 * f64::from(smokers[i]) / f64::from(sizes[i]);
            }
        }
        TruthTable { prevalence_percent }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["study_year", "region", "gender", "true_prevalence_percent"])?;
        for cell in Cell::all() {
            w.write_record([
                cell.year.year().to_string(),
                cell.region.index().to_string(),
                cell.gender.index().to_string(),
                self.prevalence_percent[cell.index()].to_string(),
            ])?;
        }
        w.flush().map_err(|e| DataError::Csv(e.into()))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self, DataError> {
        let mut r = csv::Reader::from_reader(reader);
        let mut prevalence_percent = [f64::NAN; N_CELLS];
        let mut seen = [false; N_CELLS];
        for row in r.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let bad = |reason: &str| DataError::Malformed {
                line,
                reason: reason.to_string(),
            };
            if row.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let year: i64 = row[0].parse().map_err(|_| bad("study_year"))?;
            let year =
                StudyYear::from_year(year).ok_or(DataError::UnknownStudyYear { line, year })?;
            let idx = |s: &str| match s {
                "0" => Ok(0),
                "1" => Ok(1),
                _ => Err(bad("region/gender must be 0 or 1")),
            };
            let cell = Cell {
                year,
                region: Region::from_index(idx(&row[1])?).unwrap(),
                gender: crate::data::Gender::from_index(idx(&row[2])?).unwrap(),
            };
            let value: f64 = row[3].parse().map_err(|_| bad("true_prevalence_percent"))?;
            prevalence_percent[cell.index()] = value;
            seen[cell.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(DataError::Malformed {
                line: 0,
                reason: format!("truth table lacks cell {}", Cell::from_index(i).label()),
            });
        }
        Ok(TruthTable { prevalence_percent })
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub records: Vec<PersonRecord>,
    pub truth: TruthTable,
    /// Latent smoking status of every person, aligned with `records`.
    pub latent_smoking: Vec<bool>,
}

fn simulate_person(config: &ScenarioConfig, cell: Cell, index: u64) -> (PersonRecord, bool) {
    let p = &config.params;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let (g, r, s) = (cell.gender.index(), cell.region.index(), cell.year.index());
    let (lo, hi) = config.age_ranges[s];
    let age = rng.random_range(lo..=hi);
    let year = f64::from(cell.year.year());
    let smokes = rng.random::<f64>() < smoking_prob(p, g, r, s, year, f64::from(age));
    let participates =
        rng.random::<f64>() < participation_prob(p, g, s, f64::from(age), r, usize::from(smokes));
    let t_cens = age + u32::from(config.follow_up_end - cell.year.year());
    let mut t_obs = t_cens;
    let mut event = false;
    for t in age..t_cens.min(LAST_AGE) {
        if t < FIRST_AGE {
            continue;
        }
        let lambda = hazard(p, g, usize::from(smokes), i64::from(t)).unwrap();
        if rng.random::<f64>() < -(-lambda).exp_m1() {
            event = true;
            t_obs = t + 1;
            break;
        }
    }
    let region = if config.mask_early_regions
        && !participates
        && matches!(cell.year.year(), 1972 | 1977)
    {
        None
    } else {
        Some(cell.region)
    };
    let rec = PersonRecord {
        id: index + 1,
        gender: cell.gender,
        region,
        year: cell.year,
        age,
        participated: participates,
        smoking: participates.then_some(smokes),
        event,
        t_obs,
        t_cens,
    };
    (rec, smokes)
}

/// Draws a complete dataset. Each person has its own random stream, so the
/// result is identical for any number of worker threads.
pub fn simulate_dataset(config: &ScenarioConfig) -> Result<SimulatedData, ModelError> {
    config.validate()?;
    let mut jobs = Vec::with_capacity(config.total_persons() as usize);
    let mut index = 0u64;
    for cell in Cell::all() {
        for _ in 0..config.sizes[cell.index()] {
            jobs.push((cell, index));
            index += 1;
        }
    }
    let people: Vec<(PersonRecord, bool)> = jobs
        .par_iter()
        .map(|&(cell, i)| simulate_person(config, cell, i))
        .collect();
    let mut smokers = [0u32; N_CELLS];
    let mut sizes = [0u32; N_CELLS];
    for ((_, smokes), (cell, _)) in people.iter().zip(&jobs) {
        sizes[cell.index()] += 1;
        smokers[cell.index()] += u32::from(*smokes);
    }
    let (records, latent_smoking) = people.into_iter().unzip();
    Ok(SimulatedData {
        records,
        truth: TruthTable::from_counts(&smokers, &sizes),
        latent_smoking,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{write_dataset, Gender};

    #[test]
    fn paper_shape_sizes() {
        let c = scenario_from_paper_shape(1.0, 1).unwrap();
        assert_eq!(c.total_persons(), 52_325);
        assert_eq!(c.sizes, SURVEY_SAMPLE_SIZES.to_vec());
        let nk_men_2007 = Cell {
            year: StudyYear::from_year(2007).unwrap(),
            region: Region::NorthKarelia,
            gender: Gender::Men,
        };
        assert_eq!(c.sizes[nk_men_2007.index()], 811);
        let small = scenario_from_paper_shape(0.1, 1).unwrap();
        assert!((small.total_persons() as i64 - 5232).abs() <= 16);
        assert!(scenario_from_paper_shape(0.0001, 1).is_err());
        assert!(scenario_from_paper_shape(-1.0, 1).is_err());
    }

    #[test]
    fn bundled_scenario_has_required_shape() {
        let c = scenario_from_paper_shape(1.0, 1).unwrap();
        let p = &c.params;
        assert!(p.eta.iter().flatten().all(|&e| e < 0.0));
        // participation intercepts decline over rounds
        for g in 0..2 {
            assert!(p.alpha0[g][0] > p.alpha0[g][N_YEARS - 1]);
        }
    }

    #[test]
    fn records_pass_validation_and_reproduce() {
        let mut c = scenario_from_paper_shape(0.02, 11).unwrap();
        c.mask_early_regions = true;
        let a = simulate_dataset(&c).unwrap();
        for r in &a.records {
            r.validate().unwrap();
        }
        assert!(a.records.iter().any(|r| r.region.is_none()));
        let b = simulate_dataset(&c).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_dataset(&a.records, &mut x).unwrap();
        write_dataset(&b.records, &mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn null_hazard_gives_no_events() {
        let mut c = scenario_from_paper_shape(0.02, 3).unwrap();
        c.params.h0 = [vec![0.0; 76], vec![0.0; 76]];
        let d = simulate_dataset(&c).unwrap();
        assert!(d.records.iter().all(|r| !r.event && r.t_obs == r.t_cens));
    }

    #[test]
    fn smoking_multiplies_event_rate() {
        // flat hazards so age structure cannot confound the crude ratio
        let mut c = scenario_from_paper_shape(1.0, 8).unwrap();
        c.params.gamma = [3f64.ln(); 2];
        c.params.h0 = [vec![0.01; 76], vec![0.01; 76]];
        let d = simulate_dataset(&c).unwrap();
        let mut events = [0.0; 2];
        let mut years = [0.0; 2];
        for (r, &y) in d.records.iter().zip(&d.latent_smoking) {
            let y = usize::from(y);
            events[y] += f64::from(u8::from(r.event));
            years[y] += f64::from(r.t_obs.min(LAST_AGE) - r.age);
        }
        let ratio = (events[1] / years[1]) / (events[0] / years[0]);
        assert!((2.7..=3.3).contains(&ratio), "{ratio}");
    }

    #[test]
    fn negative_eta_lowers_smoker_participation() {
        let c = scenario_from_paper_shape(0.5, 9).unwrap();
        let d = simulate_dataset(&c).unwrap();
        let mut part = [[0.0; 2]; 2];
        let mut n = [[0.0; 2]; 2];
        for (r, &y) in d.records.iter().zip(&d.latent_smoking) {
            let (g, y) = (r.gender.index(), usize::from(y));
            n[g][y] += 1.0;
            part[g][y] += f64::from(u8::from(r.participated));
        }
        for g in 0..2 {
            assert!(part[g][1] / n[g][1] < part[g][0] / n[g][0] - 0.05);
        }
        // complete cases understate prevalence in nearly every cell
        let mut k = [0u32; N_CELLS];
        let mut m = [0u32; N_CELLS];
        for r in d.records.iter().filter(|r| r.participated) {
            let c = r.cell().unwrap().index();
            m[c] += 1;
            k[c] += u32::from(r.smoking == Some(true));
        }
        let below = (0..N_CELLS)
            .filter(|&i| 100.0 * f64::from(k[i]) / f64::from(m[i]) < d.truth.prevalence_percent[i])
            .count();
        assert!(below >= 28, "{below}");
    }

    #[test]
    fn truth_csv_round_trips() {
        let c = scenario_from_paper_shape(0.02, 5).unwrap();
        let d = simulate_dataset(&c).unwrap();
        let mut buf = Vec::new();
        d.truth.write_csv(&mut buf).unwrap();
        let back = TruthTable::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, d.truth);
    }
}
