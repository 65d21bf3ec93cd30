//! Artifact writing.
//!
//! Run CSVs carry one `#` metadata line (the only place a timestamp appears),
//! then a header row, then data rows. Floats use 17 significant digits so
//! they round-trip exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};

/// One CSV field.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(u64),
    Float(f64),
    Text(String),
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// Formats a float with 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_cell(line: &mut String, cell: &Cell) {
    match cell {
        Cell::Int(v) => write!(line, "{v}").expect("writing to a String"),
        Cell::Float(v) => line.push_str(&fmt_float(*v)),
        Cell::Text(v) => line.push_str(v),
    }
}

/// Renders header and rows, without the metadata line.
pub fn render_csv(columns: &[&str], rows: &[Vec<Cell>]) -> String {
    let mut text = columns.join(",");
    text.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), columns.len());
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                text.push(',');
            }
            push_cell(&mut text, cell);
        }
        text.push('\n');
    }
    text
}

/// Data lines of an artifact: everything after the `#` metadata line.
pub fn payload(text: &str) -> &str {
    match text.strip_prefix('#') {
        Some(rest) => rest.split_once('\n').map_or("", |(_, tail)| tail),
        None => text,
    }
}

/// Writes the artifacts of one run and removes them again if the run fails.
pub struct Artifacts {
    dir: PathBuf,
    created_dir: bool,
    written: Vec<PathBuf>,
    meta: String,
    committed: bool,
}

impl Artifacts {
    pub fn create(dir: &Path, meta: &str) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        let stamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            written: Vec::new(),
            meta: format!(
                "# negguide {} generated_unix={stamp} {meta}\n",
                env!("CARGO_PKG_VERSION")
            ),
            committed: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_raw(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        // Record before writing so a half-written file is cleaned up too.
        self.written.push(path.clone());
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn write_csv(
        &mut self,
        name: &str,
        columns: &[&str],
        rows: &[Vec<Cell>],
    ) -> Result<PathBuf> {
        let text = format!("{}{}", self.meta, render_csv(columns, rows));
        self.write_raw(name, &text)
    }

    /// File names written so far, in write order.
    pub fn written_names(&self) -> Vec<String> {
        self.written
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect()
    }

    /// Keeps the written files.
    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.written)
    }
}

impl Drop for Artifacts {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for path in &self.written {
            let _ = fs::remove_file(path);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0] {
            let s = fmt_float(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
        assert_eq!(fmt_float(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn csv_layout() {
        let rows = vec![vec![Cell::from(3usize), Cell::from(0.5), Cell::from("np")]];
        assert_eq!(
            render_csv(&["a", "b", "c"], &rows),
            "a,b,c\n3,5.0000000000000000e-1,np\n"
        );
        assert_eq!(payload("# meta\na,b\n1,2\n"), "a,b\n1,2\n");
        assert_eq!(payload("a,b\n"), "a,b\n");
    }

    #[test]
    fn uncommitted_artifacts_are_removed() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("run");
        {
            let mut a = Artifacts::create(&dir, "kind=test").unwrap();
            a.write_csv("x.csv", &["a"], &[vec![Cell::from(1usize)]])
                .unwrap();
            assert!(dir.join("x.csv").exists());
        }
        assert!(!dir.exists());

        let mut a = Artifacts::create(&dir, "kind=test").unwrap();
        a.write_csv("x.csv", &["a"], &[]).unwrap();
        let files = a.commit();
        assert_eq!(files, vec![dir.join("x.csv")]);
        let text = fs::read_to_string(dir.join("x.csv")).unwrap();
        assert!(text.starts_with("# negguide "));
        assert_eq!(payload(&text), "a\n");
    }

    #[test]
    fn existing_directories_survive_failure() {
        let root = tempfile::tempdir().unwrap();
        fs::write(root.path().join("keep.txt"), "x").unwrap();
        {
            let mut a = Artifacts::create(root.path(), "").unwrap();
            a.write_raw("tmp.csv", "a\n").unwrap();
        }
        assert!(root.path().join("keep.txt").exists());
        assert!(!root.path().join("tmp.csv").exists());
    }
}
