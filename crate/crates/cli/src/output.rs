//! Run directories and the CSV/JSON artifacts written into them.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// A CSV row type with a fixed column order.
pub trait Record: Serialize {
    const HEADER: &'static [&'static str];
}

/// `<root>/<UTC timestamp>`, suffixed `-1`, `-2`, ... on collision.
#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string();
        for i in 0..1000 {
            let name = if i == 0 { stamp.clone() } else { format!("{stamp}-{i}") };
            let path = root.join(name);
            match fs::create_dir(&path) {
                Ok(()) => return Ok(RunDir { path }),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e.into()),
            }
        }
        Err(CliError::Run(format!("could not create a fresh run directory under {}", root.display())))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value)?;
        fs::write(self.path.join(name), text + "\n")?;
        Ok(())
    }

    pub fn write_csv<R: Record>(&self, name: &str, rows: &[R]) -> Result<(), CliError> {
        write_csv(&self.path.join(name), rows)
    }
}

/// Writes the header even when `rows` is empty.
pub fn write_csv<R: Record>(path: &Path, rows: &[R]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(R::HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
