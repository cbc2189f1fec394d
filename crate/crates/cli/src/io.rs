//! Atomic file output: every table is written to a sibling temp file and
//! renamed into place, so readers never see a partial file.

use std::fs;
use std::path::{Path, PathBuf};

use trsbts_core::path::{read_paths_csv, write_paths_csv};
use trsbts_core::CoarsePath;

use crate::error::{CliError, Result};

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serialises rows with `csv` and writes them atomically.
pub fn write_csv_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<()>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        fill(&mut w)?;
        w.flush()?;
    }
    write_atomic(path, &buf)
}

pub fn write_paths(path: &Path, paths: &[CoarsePath]) -> Result<()> {
    let mut buf = Vec::new();
    write_paths_csv(&mut buf, paths)?;
    write_atomic(path, &buf)
}

pub fn read_paths(path: &Path, dt: f64) -> Result<Vec<CoarsePath>> {
    let f = fs::File::open(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let paths = read_paths_csv(std::io::BufReader::new(f), dt)?;
    if paths.is_empty() {
        return Err(CliError::data(format!("{} holds no paths", path.display())));
    }
    Ok(paths)
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
