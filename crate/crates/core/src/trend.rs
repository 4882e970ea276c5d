//! Prevalence trend tables: one estimate per (year, region, gender) cell.

use std::io::{Read, Write};

use crate::data::{Cell, Gender, Region, StudyYear, N_CELLS};
use crate::error::{AnalysisError, DataError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellEstimate {
    /// Prevalence in percent.
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl CellEstimate {
    pub fn point(value: f64) -> Self {
        CellEstimate {
            mean: value,
            lower: value,
            upper: value,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendTable {
    pub method: String,
    /// Indexed by [`Cell::index`]; `None` marks a cell with no usable data.
    pub cells: Vec<Option<CellEstimate>>,
}

/// Column order of the wide layout.
const WIDE_COLUMNS: [(Region, Gender); 4] = [
    (Region::NorthKarelia, Gender::Men),
    (Region::NorthKarelia, Gender::Women),
    (Region::NorthernSavonia, Gender::Men),
    (Region::NorthernSavonia, Gender::Women),
];

fn gender_name(gender: Gender) -> &'static str {
    match gender {
        Gender::Men => "men",
        Gender::Women => "women",
    }
}

fn column_label(region: Region, gender: Gender) -> String {
    format!("{}-{}", region.short_name(), gender_name(gender))
}

impl TrendTable {
    pub fn new(method: impl Into<String>) -> Self {
        TrendTable {
            method: method.into(),
            cells: vec![None; N_CELLS],
        }
    }

    pub fn from_points(method: impl Into<String>, values: &[f64]) -> Result<Self, AnalysisError> {
        if values.len() != N_CELLS {
            return Err(AnalysisError::CellMismatch);
        }
        let mut t = TrendTable::new(method);
        for (slot, &v) in t.cells.iter_mut().zip(values) {
            *slot = v.is_finite().then(|| CellEstimate::point(v));
        }
        Ok(t)
    }

    pub fn get(&self, cell: Cell) -> Option<&CellEstimate> {
        self.cells.get(cell.index()).and_then(Option::as_ref)
    }

    /// Point estimates; errors on the first missing cell.
    pub fn means(&self) -> Result<Vec<f64>, AnalysisError> {
        if self.cells.len() != N_CELLS {
            return Err(AnalysisError::CellMismatch);
        }
        self.cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.map(|c| c.mean)
                    .ok_or_else(|| AnalysisError::MissingCell(Cell::from_index(i).label()))
            })
            .collect()
    }

    /// Writes one row per cell with full precision.
    pub fn write_long<W: Write>(tables: &[&TrendTable], writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["year", "region", "gender", "method", "mean", "lower", "upper"])?;
        for t in tables {
            for cell in Cell::all() {
                let (m, l, u) = match t.get(cell) {
                    Some(e) => (e.mean.to_string(), e.lower.to_string(), e.upper.to_string()),
                    None => ("NA".into(), "NA".into(), "NA".into()),
                };
                w.write_record([
                    cell.year.year().to_string(),
                    cell.region.short_name().to_string(),
                    gender_name(cell.gender).to_string(),
                    t.method.clone(),
                    m,
                    l,
                    u,
                ])?;
            }
        }
        w.flush().map_err(|e| DataError::Csv(e.into()))?;
        Ok(())
    }

    /// Reads tables written by [`TrendTable::write_long`], in order of first appearance.
    pub fn read_long<R: Read>(reader: R) -> Result<Vec<TrendTable>, DataError> {
        let mut r = csv::Reader::from_reader(reader);
        let mut tables: Vec<TrendTable> = Vec::new();
        for row in r.records() {
            let row = row?;
            let line = row.position().map_or(0, |p| p.line());
            let bad = |reason: String| DataError::Malformed { line, reason };
            if row.len() != 7 {
                return Err(bad("expected 7 fields".into()));
            }
            let year: i64 = row[0].parse().map_err(|_| bad("year".into()))?;
            let year =
                StudyYear::from_year(year).ok_or(DataError::UnknownStudyYear { line, year })?;
            let region = Region::ALL
                .into_iter()
                .find(|r| r.short_name() == &row[1])
                .ok_or_else(|| bad(format!("unknown region {}", &row[1])))?;
            let gender = match &row[2] {
                "men" => Gender::Men,
                "women" => Gender::Women,
                other => return Err(bad(format!("unknown gender {other}"))),
            };
            let num = |s: &str| -> Result<Option<f64>, DataError> {
                if s == "NA" {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(format!("bad number {s}")))
                }
            };
            let est = match (num(&row[4])?, num(&row[5])?, num(&row[6])?) {
                (Some(mean), Some(lower), Some(upper)) => Some(CellEstimate { mean, lower, upper }),
                _ => None,
            };
            let method = &row[3];
            let pos = match tables.iter().position(|t| t.method == method) {
                Some(p) => p,
                None => {
                    tables.push(TrendTable::new(method));
                    tables.len() - 1
                }
            };
            tables[pos].cells[Cell { year, region, gender }.index()] = est;
        }
        Ok(tables)
    }

    /// Layout used in published trend tables: one row per year and method,
    /// one "mean (lower, upper)" column per region and gender.
    pub fn write_wide<W: Write>(tables: &[&TrendTable], writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["year".to_string(), "method".to_string()];
        header.extend(WIDE_COLUMNS.iter().map(|&(r, g)| column_label(r, g)));
        w.write_record(&header)?;
        for year in StudyYear::all() {
            for t in tables {
                let mut row = vec![year.year().to_string(), t.method.clone()];
                for &(region, gender) in &WIDE_COLUMNS {
                    let cell = Cell { year, region, gender };
                    row.push(match t.get(cell) {
                        Some(e) if e.lower == e.upper => format!("{:.1}", e.mean),
                        Some(e) => format!("{:.1} ({:.1}, {:.1})", e.mean, e.lower, e.upper),
                        None => "NA".to_string(),
                    });
                }
                w.write_record(&row)?;
            }
        }
        w.flush().map_err(|e| DataError::Csv(e.into()))?;
        Ok(())
    }
}
