//! Output directory handling. Reports carry the crate version and master
//! seed, and nothing here writes a timestamp, so rerunning a command with
//! the same inputs reproduces every file byte for byte.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

pub struct OutDir {
    path: PathBuf,
}

impl OutDir {
    pub fn create(path: &Path) -> io::Result<OutDir> {
        fs::create_dir_all(path)?;
        Ok(OutDir { path: path.to_owned() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes one CSV file; rows are preformatted lines without newlines.
    pub fn write_csv<I>(&self, name: &str, header: &str, rows: I) -> io::Result<PathBuf>
    where
        I: IntoIterator,
        I::Item: AsRef<str>,
    {
        let path = self.file(name);
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "{header}")?;
        for row in rows {
            writeln!(w, "{}", row.as_ref())?;
        }
        w.flush()?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> io::Result<PathBuf> {
        let path = self.file(name);
        let mut w = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(path)
    }
}

/// Envelope for every JSON report: what produced it and from which seed.
#[derive(Serialize)]
pub struct Report<T: Serialize> {
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    #[serde(flatten)]
    pub body: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(command: &'static str, seed: u64, body: T) -> Self {
        Report { version: env!("CARGO_PKG_VERSION"), command, seed, body }
    }
}
