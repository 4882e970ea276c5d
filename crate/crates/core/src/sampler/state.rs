//! Compact per-person data and the completed-data sufficient statistics.

use crate::data::{PersonRecord, MAX_SURVEY_AGE, MIN_SURVEY_AGE, N_CELLS, N_YEARS};
use crate::error::ModelError;
use crate::exposure::{FollowUp, RiskGroupTable, N_AGE_BINS};

pub(crate) const N_SURVEY_AGES: usize = (MAX_SURVEY_AGE - MIN_SURVEY_AGE + 1) as usize;

/// Per-person covariates in index form.
#[derive(Debug, Clone)]
pub(crate) struct Person {
    pub g: usize,
    pub s: usize,
    pub r: usize,
    pub age_idx: usize,
    pub cell: usize,
    pub follow: FollowUp,
}

/// Immutable, validated data shared by all chains.
#[derive(Debug)]
pub struct PreparedData {
    pub(crate) records: Vec<PersonRecord>,
    pub(crate) persons: Vec<Person>,
    /// Indices of non-participants.
    pub(crate) missing: Vec<usize>,
    pub(crate) cell_sizes: [u32; N_CELLS],
    pub(crate) observed_smokers: [u32; N_CELLS],
    /// Non-participants per (gender, year), indexed `g * N_YEARS + s`.
    pub(crate) missing_by_round: Vec<Vec<usize>>,
    /// Participants per smoking cell (g, r, s, age).
    pub(crate) obs_smk_n: Vec<u32>,
    /// Observed smokers per smoking cell.
    pub(crate) obs_smk_k: Vec<u32>,
}

impl PreparedData {
    pub fn new(records: Vec<PersonRecord>) -> Result<Self, ModelError> {
        let mut persons = Vec::with_capacity(records.len());
        let mut missing = Vec::new();
        let mut cell_sizes = [0u32; N_CELLS];
        let mut observed_smokers = [0u32; N_CELLS];
        let mut missing_by_round = vec![Vec::new(); 2 * N_YEARS];
        let mut obs_smk_n = vec![0; 2 * 2 * N_YEARS * N_SURVEY_AGES];
        let mut obs_smk_k = vec![0; 2 * 2 * N_YEARS * N_SURVEY_AGES];
        for (i, rec) in records.iter().enumerate() {
            let cell = rec.cell().ok_or(ModelError::MissingRegion(rec.id))?;
            if rec.age < MIN_SURVEY_AGE || rec.age > MAX_SURVEY_AGE {
                return Err(ModelError::Config(format!(
                    "record {}: age {} outside survey range",
                    rec.id, rec.age
                )));
            }
            let ci = cell.index();
            cell_sizes[ci] += 1;
            let person = Person {
                g: rec.gender.index(),
                s: rec.year.index(),
                r: cell.region.index(),
                age_idx: (rec.age - MIN_SURVEY_AGE) as usize,
                cell: ci,
                follow: FollowUp::of(rec),
            };
            if !rec.participated {
                missing.push(i);
                missing_by_round[person.g * N_YEARS + person.s].push(i);
            } else {
                let slot = smk_slot(person.g, person.r, person.s, person.age_idx);
                obs_smk_n[slot] += 1;
                if rec.smoking == Some(true) {
                    observed_smokers[ci] += 1;
                    obs_smk_k[slot] += 1;
                }
            }
            persons.push(person);
        }
        Ok(PreparedData {
            records,
            persons,
            missing,
            cell_sizes,
            observed_smokers,
            missing_by_round,
            obs_smk_n,
            obs_smk_k,
        })
    }

    pub fn records(&self) -> &[PersonRecord] {
        &self.records
    }

    pub fn n_missing(&self) -> usize {
        self.missing.len()
    }

    pub fn cell_sizes(&self) -> &[u32; N_CELLS] {
        &self.cell_sizes
    }

    pub fn observed_smokers(&self) -> &[u32; N_CELLS] {
        &self.observed_smokers
    }
}

#[inline]
pub(crate) fn part_slot(g: usize, s: usize, r: usize, y: usize, a: usize) -> usize {
    (((g * N_YEARS + s) * 2 + r) * 2 + y) * N_SURVEY_AGES + a
}

#[inline]
pub(crate) fn smk_slot(g: usize, r: usize, s: usize, a: usize) -> usize {
    ((g * 2 + r) * N_YEARS + s) * N_SURVEY_AGES + a
}

/// Completed-data sufficient statistics for the current imputation.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    /// Persons per participation cell (g, s, r, y, age).
    pub(crate) part_n: Vec<u32>,
    /// Participants per participation cell.
    pub(crate) part_m: Vec<u32>,
    /// Persons per smoking cell (g, r, s, age).
    pub(crate) smk_n: Vec<u32>,
    /// Smokers per smoking cell.
    pub(crate) smk_k: Vec<u32>,
    pub(crate) table: RiskGroupTable,
    pub(crate) smokers: [u32; N_CELLS],
}

impl SuffStats {
    /// Statistics of the completed data. `ys` must keep every participant's
    /// observed status.
    pub fn new(data: &PreparedData, ys: &[bool]) -> Result<Self, ModelError> {
        if ys.len() != data.records.len() {
            return Err(ModelError::Config(format!(
                "assignment has {} entries for {} records",
                ys.len(),
                data.records.len()
            )));
        }
        if let Some((rec, _)) = data
            .records
            .iter()
            .zip(ys)
            .find(|(r, &y)| r.smoking.is_some_and(|obs| obs != y))
        {
            return Err(ModelError::Participant(rec.id));
        }
        Ok(Self::build(data, ys))
    }

    pub(crate) fn build(data: &PreparedData, ys: &[bool]) -> Self {
        let mut st = SuffStats {
            part_n: vec![0; 2 * N_YEARS * 2 * 2 * N_SURVEY_AGES],
            part_m: vec![0; 2 * N_YEARS * 2 * 2 * N_SURVEY_AGES],
            smk_n: vec![0; 2 * 2 * N_YEARS * N_SURVEY_AGES],
            smk_k: vec![0; 2 * 2 * N_YEARS * N_SURVEY_AGES],
            table: RiskGroupTable::new(),
            smokers: [0; N_CELLS],
        };
        for ((p, rec), &y) in data.persons.iter().zip(&data.records).zip(ys) {
            let yi = usize::from(y);
            let ps = part_slot(p.g, p.s, p.r, yi, p.age_idx);
            st.part_n[ps] += 1;
            if rec.participated {
                st.part_m[ps] += 1;
            }
            let ss = smk_slot(p.g, p.r, p.s, p.age_idx);
            st.smk_n[ss] += 1;
            if y {
                st.smk_k[ss] += 1;
                st.smokers[p.cell] += 1;
            }
            st.table.apply(p.g, yi, &p.follow, 1);
        }
        st
    }

    /// Moves a non-participant between smoking states.
    pub(crate) fn flip(&mut self, p: &Person, to: bool) {
        let (from, to_i) = (usize::from(!to), usize::from(to));
        self.part_n[part_slot(p.g, p.s, p.r, from, p.age_idx)] -= 1;
        self.part_n[part_slot(p.g, p.s, p.r, to_i, p.age_idx)] += 1;
        let ss = smk_slot(p.g, p.r, p.s, p.age_idx);
        if to {
            self.smk_k[ss] += 1;
            self.smokers[p.cell] += 1;
        } else {
            self.smk_k[ss] -= 1;
            self.smokers[p.cell] -= 1;
        }
        self.table.move_person(p.g, from, to_i, &p.follow);
    }

    pub fn table(&self) -> &RiskGroupTable {
        &self.table
    }

    pub fn smokers(&self) -> &[u32; N_CELLS] {
        &self.smokers
    }

    /// Pooled per-bin events and exposure for one gender, ignoring smoking.
    pub(crate) fn pooled_rates(&self, g: usize) -> (Vec<f64>, Vec<f64>) {
        let mut d = vec![0.0; N_AGE_BINS];
        let mut e = vec![0.0; N_AGE_BINS];
        for b in 0..N_AGE_BINS {
            for y in 0..2 {
                d[b] += self.table.events(g, y, b) as f64;
                e[b] += self.table.exposure(g, y, b);
            }
        }
        (d, e)
    }
}
