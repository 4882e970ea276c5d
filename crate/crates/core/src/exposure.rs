//! Person-year exposure and event counts aggregated by (gender, smoking, age bin).

use std::ops::AddAssign;

use crate::data::PersonRecord;
use crate::error::DataError;

/// First age bin of the hazard grid.
pub const FIRST_AGE: u32 = 25;
/// Last age bin of the hazard grid; follow-up is truncated at this age.
pub const LAST_AGE: u32 = 100;
pub const N_AGE_BINS: usize = (LAST_AGE - FIRST_AGE + 1) as usize;

/// Follow-up of one person in whole-year bins `[entry, exit)`.
///
/// Bin indices are offsets from [`FIRST_AGE`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FollowUp {
    pub entry: usize,
    pub exit: usize,
    /// Bin holding the event, if it happened before the truncation age.
    pub event_bin: Option<usize>,
}

impl FollowUp {
    pub fn of(rec: &PersonRecord) -> Self {
        let entry = rec.age.clamp(FIRST_AGE, LAST_AGE) - FIRST_AGE;
        let exit = rec.t_obs.clamp(FIRST_AGE, LAST_AGE) - FIRST_AGE;
        let event_bin = (rec.event && rec.t_obs <= LAST_AGE && rec.t_obs > rec.age)
            .then(|| (rec.t_obs - 1 - FIRST_AGE) as usize);
        FollowUp {
            entry: entry as usize,
            exit: (exit as usize).max(entry as usize),
            event_bin,
        }
    }

    pub fn person_years(&self) -> f64 {
        (self.exit - self.entry) as f64
    }

    pub fn events(&self) -> u32 {
        u32::from(self.event_bin.is_some())
    }
}

/// Event counts `D(g, y, t)` and exposures `E(g, y, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskGroupTable {
    events: Vec<u64>,
    exposure: Vec<f64>,
}

impl Default for RiskGroupTable {
    fn default() -> Self {
        Self::new()
    }
}

impl RiskGroupTable {
    pub fn new() -> Self {
        let n = 2 * 2 * N_AGE_BINS;
        RiskGroupTable {
            events: vec![0; n],
            exposure: vec![0.0; n],
        }
    }

    #[inline]
    fn slot(gender: usize, smoking: usize, bin: usize) -> usize {
        debug_assert!(gender < 2 && smoking < 2 && bin < N_AGE_BINS);
        (gender * 2 + smoking) * N_AGE_BINS + bin
    }

    /// Events in the cell with age bin index `bin` (age `FIRST_AGE + bin`).
    pub fn events(&self, gender: usize, smoking: usize, bin: usize) -> u64 {
        self.events[Self::slot(gender, smoking, bin)]
    }

    pub fn exposure(&self, gender: usize, smoking: usize, bin: usize) -> f64 {
        self.exposure[Self::slot(gender, smoking, bin)]
    }

    pub fn set(&mut self, gender: usize, smoking: usize, bin: usize, events: u64, exposure: f64) {
        let s = Self::slot(gender, smoking, bin);
        self.events[s] = events;
        self.exposure[s] = exposure;
    }

    pub fn total_events(&self) -> u64 {
        self.events.iter().sum()
    }

    pub fn total_exposure(&self) -> f64 {
        self.exposure.iter().sum()
    }

    /// Adds (`sign = 1`) or removes (`sign = -1`) one person's follow-up.
    pub fn apply(&mut self, gender: usize, smoking: usize, follow: &FollowUp, sign: i8) {
        let base = Self::slot(gender, smoking, 0);
        let delta = f64::from(sign);
        for e in &mut self.exposure[base + follow.entry..base + follow.exit] {
            *e += delta;
        }
        if let Some(bin) = follow.event_bin {
            let d = &mut self.events[base + bin];
            if sign > 0 {
                *d += 1;
            } else {
                *d -= 1;
            }
        }
    }

    /// Moves one person's follow-up between the non-smoker and smoker cells.
    pub fn move_person(&mut self, gender: usize, from: usize, to: usize, follow: &FollowUp) {
        if from != to {
            self.apply(gender, from, follow, -1);
            self.apply(gender, to, follow, 1);
        }
    }
}

impl AddAssign<&RiskGroupTable> for RiskGroupTable {
    fn add_assign(&mut self, rhs: &RiskGroupTable) {
        for (a, b) in self.events.iter_mut().zip(&rhs.events) {
            *a += b;
        }
        for (a, b) in self.exposure.iter_mut().zip(&rhs.exposure) {
            *a += b;
        }
    }
}

/// Aggregates follow-up under a complete smoking assignment.
///
/// `assignment[i]` is the smoking status used for `records[i]`: the observed
/// value for participants, the current imputation otherwise.
pub fn aggregate_risk_groups(
    records: &[PersonRecord],
    assignment: &[Option<bool>],
) -> Result<RiskGroupTable, DataError> {
    if assignment.len() < records.len() {
        let missing = &records[assignment.len()];
        return Err(DataError::MissingAssignment(missing.id));
    }
    let mut table = RiskGroupTable::new();
    for (rec, y) in records.iter().zip(assignment) {
        let y = y.ok_or(DataError::MissingAssignment(rec.id))?;
        table.apply(rec.gender.index(), usize::from(y), &FollowUp::of(rec), 1);
    }
    Ok(table)
}

/// Observed smoking for participants, `None` for non-participants.
pub fn observed_assignment(records: &[PersonRecord]) -> Vec<Option<bool>> {
    records.iter().map(|r| r.smoking).collect()
}
