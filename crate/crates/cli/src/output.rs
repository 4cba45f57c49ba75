//! Output directory bookkeeping: tensor files, CSV exports, the fit report
//! and a manifest with SHA-256 hashes of every input and output.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use multiway::io::{load_real, save_real, write_csv_matrix};
use multiway::penalties::FitReport;
use multiway::{DenseTensor, Mat};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Params;
use crate::CliError;

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    parameters: &'a std::collections::BTreeMap<String, String>,
    inputs: &'a [FileEntry],
    outputs: &'a [FileEntry],
}

pub struct Run {
    pub dir: PathBuf,
    pub params: Params,
    pub seed: u64,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Run {
    pub fn new(dir: PathBuf, params: Params, seed: u64) -> Result<Self, CliError> {
        fs::create_dir_all(&dir)?;
        Ok(Self { dir, params, seed, inputs: Vec::new(), outputs: Vec::new() })
    }

    /// Path of input `key`; checked for existence before any work starts.
    pub fn input_path(&self, key: &str) -> Result<PathBuf, CliError> {
        let p: String = self.params.require(key)?;
        let path = PathBuf::from(p);
        if !path.is_file() {
            return Err(CliError::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("input '{key}' not found: {}", path.display()),
            )));
        }
        Ok(path)
    }

    pub fn tensor(&mut self, key: &str) -> Result<DenseTensor, CliError> {
        let path = self.input_path(key)?;
        let t = load_real(&path)?;
        self.inputs.push(FileEntry { path: path.display().to_string(), sha256: sha256_file(&path)? });
        Ok(t)
    }

    pub fn matrix(&mut self, key: &str) -> Result<Mat, CliError> {
        let t = self.tensor(key)?;
        match t.order() {
            1 => Ok(Mat::from_column_slice(t.len(), 1, t.data())),
            2 => Ok(t.to_matrix()?),
            _ => Err(CliError::Lib(multiway::Error::Format(format!("input '{key}' is not a matrix: shape {:?}", t.shape())))),
        }
    }

    fn record(&mut self, name: &str) -> Result<(), CliError> {
        let sha256 = sha256_file(&self.dir.join(name))?;
        self.outputs.retain(|e| e.path != name);
        self.outputs.push(FileEntry { path: name.to_string(), sha256 });
        Ok(())
    }

    pub fn save_tensor(&mut self, name: &str, t: &DenseTensor) -> Result<(), CliError> {
        save_real(self.dir.join(name), t)?;
        self.record(name)
    }

    pub fn save_matrix(&mut self, name: &str, m: &Mat) -> Result<(), CliError> {
        self.save_tensor(name, &DenseTensor::from_matrix(m))
    }

    /// CSV with columns named `{prefix}1..`.
    pub fn save_csv(&mut self, name: &str, prefix: &str, m: &Mat) -> Result<(), CliError> {
        let header: Vec<String> = (1..=m.ncols()).map(|r| format!("{prefix}{r}")).collect();
        let mut w = BufWriter::new(fs::File::create(self.dir.join(name))?);
        write_csv_matrix(&mut w, &header, m)?;
        w.flush()?;
        drop(w);
        self.record(name)
    }

    pub fn save_text(&mut self, name: &str, body: &[u8]) -> Result<(), CliError> {
        fs::write(self.dir.join(name), body)?;
        self.record(name)
    }

    pub fn save_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut body = serde_json::to_vec_pretty(value)?;
        body.push(b'\n');
        self.save_text(name, &body)
    }

    pub fn save_report(&mut self, report: &FitReport) -> Result<(), CliError> {
        self.save_json("fit_report.json", report)
    }

    pub fn finish(self) -> Result<PathBuf, CliError> {
        let m = Manifest {
            tool: "multiway",
            version: env!("CARGO_PKG_VERSION"),
            command: &self.params.command,
            seed: self.seed,
            parameters: &self.params.values,
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let mut body = serde_json::to_vec_pretty(&m)?;
        body.push(b'\n');
        fs::write(self.dir.join("manifest.json"), body)?;
        Ok(self.dir)
    }
}
