//! Provenance record written next to every command's outputs.

use std::path::{Path, PathBuf};

use mnar_core::output::{sha256_file, write_json};
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

#[derive(Debug, Serialize)]
pub struct CommandManifest<'a, A: Serialize> {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub arguments: &'a A,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl<'a, A: Serialize> CommandManifest<'a, A> {
    pub fn new(command: &'static str, arguments: &'a A) -> Self {
        CommandManifest {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            arguments,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_json(path, self)?;
        Ok(())
    }
}
