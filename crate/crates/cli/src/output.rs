use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Metadata stamped on every output file.
#[derive(Clone, Debug)]
pub struct Provenance {
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn new(config_text: &str, seed: u64) -> Self {
        Provenance { config_sha256: sha256_hex(config_text.as_bytes()), seed }
    }
}

/// A CSV table with `#` metadata lines above the column header.
pub struct Table {
    schema: String,
    columns: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    /// `schema` names the column set, e.g. `chain-bp/1`. Bump the suffix when
    /// columns change.
    pub fn new(schema: &str, columns: &[&'static str]) -> Self {
        Table { schema: schema.to_string(), columns: columns.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn render(&self, prov: &Provenance) -> String {
        let mut s = String::new();
        writeln!(s, "# schema: {}", self.schema).unwrap();
        writeln!(s, "# version: {}", env!("CARGO_PKG_VERSION")).unwrap();
        writeln!(s, "# config_sha256: {}", prov.config_sha256).unwrap();
        writeln!(s, "# seed: {}", prov.seed).unwrap();
        writeln!(s, "{}", self.columns.join(",")).unwrap();
        for r in &self.rows {
            writeln!(s, "{}", r.join(",")).unwrap();
        }
        s
    }
}

/// Shortest representation that parses back to the same `f64`, in exponent
/// form for very small or large magnitudes.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || !a.is_finite() || (1e-4..1e15).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub struct OutDir(PathBuf);

impl OutDir {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(OutDir(path.to_path_buf()))
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let p = self.0.join(name);
        fs::write(&p, contents).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_then_rows() {
        let mut t = Table::new("demo/1", &["a", "b"]);
        t.push(vec![num(0.1), num(2.0)]);
        let s = t.render(&Provenance::new("x = 1\n", 7));
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "# schema: demo/1");
        assert!(lines[2].starts_with("# config_sha256: "));
        assert_eq!(lines[3], "# seed: 7");
        assert_eq!(lines[4], "a,b");
        assert_eq!(lines[5], "0.1,2");
    }

    #[test]
    fn numbers_round_trip() {
        for x in [1.0 / 3.0, -1.2732395447351628, 1e-300, 5e-324, 2.1649348980190553e-15, 3e20] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(2.5e-7), "2.5e-7");
        assert_eq!(num(10.0), "10");
    }

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
