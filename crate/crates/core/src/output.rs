//! Chain output files and run manifests.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Cell, N_CELLS};
use crate::error::DataError;
use crate::model::{parameter_names, PriorSpec, N_PARAMS};
use crate::sampler::{BlockAcceptance, ChainOutput, SamplerConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn sha256_file(path: &Path) -> Result<String, DataError> {
    Ok(sha256_hex(&read_bytes(path)?))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn chain_file_name(chain: usize) -> String {
    format!("chain_{chain}.csv")
}

pub fn smoker_column_name(cell: Cell) -> String {
    format!(
        "smokers_s{}_r{}_g{}",
        cell.year.year(),
        cell.region.index(),
        cell.gender.index()
    )
}

pub fn chain_header() -> Vec<String> {
    let mut h = vec!["draw".to_string()];
    h.extend(parameter_names());
    h.extend(Cell::all().map(smoker_column_name));
    h
}

/// Recorded draws of one chain as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub draws: Vec<Vec<f64>>,
    pub smokers: Vec<[u32; N_CELLS]>,
}

impl From<&ChainOutput> for ChainTrace {
    fn from(c: &ChainOutput) -> Self {
        ChainTrace {
            draws: c.draws.clone(),
            smokers: c.smokers.clone(),
        }
    }
}

/// Writes one row per recorded draw. Floats use the shortest representation
/// that parses back to the same value.
pub fn write_chain_csv<W: Write>(trace: &ChainTrace, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(chain_header())?;
    for (k, (draw, smk)) in trace.draws.iter().zip(&trace.smokers).enumerate() {
        let mut row = Vec::with_capacity(1 + draw.len() + N_CELLS);
        row.push(k.to_string());
        row.extend(draw.iter().map(f64::to_string));
        row.extend(smk.iter().map(u32::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| DataError::Csv(e.into()))?;
    Ok(())
}

pub fn read_chain_csv<R: Read>(reader: R) -> Result<ChainTrace, DataError> {
    let mut r = csv::Reader::from_reader(reader);
    let expected = chain_header();
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != expected {
        return Err(DataError::Header {
            expected: format!("draw, {N_PARAMS} parameters, {N_CELLS} smoker counts"),
            found: format!("{} columns", found.len()),
        });
    }
    let mut trace = ChainTrace {
        draws: Vec::new(),
        smokers: Vec::new(),
    };
    for row in r.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let bad = |what: &str| DataError::Malformed {
            line,
            reason: format!("unparsable {what}"),
        };
        let draw: Vec<f64> = (1..=N_PARAMS)
            .map(|j| row[j].parse::<f64>().map_err(|_| bad(&expected[j])))
            .collect::<Result<_, _>>()?;
        let mut smk = [0u32; N_CELLS];
        for (c, slot) in smk.iter_mut().enumerate() {
            let j = 1 + N_PARAMS + c;
            *slot = row[j].parse().map_err(|_| bad(&expected[j]))?;
        }
        trace.draws.push(draw);
        trace.smokers.push(smk);
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionImputation {
    pub p1972: f64,
    pub p1977: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub chain: usize,
    pub file: String,
    pub sha256: String,
    /// ChaCha8 stream the chain read from, under the master seed.
    pub stream: u64,
    pub acceptance: Vec<BlockAcceptance>,
    pub seconds_per_iteration: f64,
    pub warnings: Vec<String>,
}

/// Everything needed to rerun a fit and check its chain files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitManifest {
    pub tool_version: String,
    pub config: SamplerConfig,
    pub prior: PriorSpec,
    pub data_file: String,
    pub data_sha256: String,
    pub n_records: usize,
    pub n_missing: usize,
    pub cell_sizes: Vec<u32>,
    pub region_imputation: Option<RegionImputation>,
    pub chains: Vec<ChainRecord>,
}

/// Writes chain files and the manifest into `dir`, creating it if needed.
pub fn write_fit(dir: &Path, manifest_base: FitManifest, outputs: &[ChainOutput]) -> Result<FitManifest, DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = manifest_base;
    manifest.chains.clear();
    for out in outputs {
        let mut buf = Vec::new();
        write_chain_csv(&ChainTrace::from(out), &mut buf)?;
        let file = chain_file_name(out.chain);
        let path = dir.join(&file);
        fs::write(&path, &buf).map_err(io_err(&path))?;
        manifest.chains.push(ChainRecord {
            chain: out.chain,
            file,
            sha256: sha256_hex(&buf),
            stream: out.chain as u64 + 1,
            acceptance: out.acceptance.clone(),
            seconds_per_iteration: out.seconds_per_iteration,
            warnings: out.warnings.clone(),
        });
    }
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| DataError::Incompatible {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| DataError::Incompatible {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone)]
pub struct LoadedFit {
    pub dir: PathBuf,
    pub manifest: FitManifest,
    pub chains: Vec<ChainTrace>,
}

impl LoadedFit {
    pub fn cell_sizes(&self) -> [u32; N_CELLS] {
        let mut out = [0u32; N_CELLS];
        out.copy_from_slice(&self.manifest.cell_sizes);
        out
    }

    pub fn draw_slices(&self) -> Vec<&[Vec<f64>]> {
        self.chains.iter().map(|c| c.draws.as_slice()).collect()
    }

    pub fn smoker_slices(&self) -> Vec<&[[u32; N_CELLS]]> {
        self.chains.iter().map(|c| c.smokers.as_slice()).collect()
    }
}

/// Reads a fit directory, checking every chain file against the manifest.
pub fn load_fit(dir: &Path) -> Result<LoadedFit, DataError> {
    let manifest: FitManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let incompatible = |path: &Path, reason: String| DataError::Incompatible {
        path: path.to_path_buf(),
        reason,
    };
    if manifest.cell_sizes.len() != N_CELLS {
        return Err(incompatible(dir, "manifest lists the wrong number of cells".into()));
    }
    if manifest.chains.len() != manifest.config.n_chains {
        return Err(incompatible(
            dir,
            format!(
                "manifest lists {} chain files for {} chains",
                manifest.chains.len(),
                manifest.config.n_chains
            ),
        ));
    }
    let mut chains = Vec::with_capacity(manifest.chains.len());
    for rec in &manifest.chains {
        let path = dir.join(&rec.file);
        let bytes = read_bytes(&path)?;
        if sha256_hex(&bytes) != rec.sha256 {
            return Err(incompatible(&path, "file does not match its manifest hash".into()));
        }
        let trace = read_chain_csv(bytes.as_slice())?;
        if trace.draws.len() != manifest.config.recorded_draws() {
            return Err(incompatible(
                &path,
                format!(
                    "{} draws, manifest expects {}",
                    trace.draws.len(),
                    manifest.config.recorded_draws()
                ),
            ));
        }
        chains.push(trace);
    }
    Ok(LoadedFit {
        dir: dir.to_path_buf(),
        manifest,
        chains,
    })
}
