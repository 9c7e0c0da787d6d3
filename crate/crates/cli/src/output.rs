//! Artifact directories: RFC-4180 CSVs, gnuplot scripts and a JSON
//! manifest. Nothing time- or host-dependent is written, so reruns with
//! the same configuration produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Data augmentation applied to MNIST; recorded in every manifest.
pub const AUGMENTATION: &str = "none";

pub struct ArtifactDir {
    root: PathBuf,
    files: Vec<String>,
}

impl ArtifactDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::Runtime(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    fn target(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.root.join(name)
    }

    /// Writes `rows` with a header derived from the row type. An empty
    /// slice still produces the header when `header` is given.
    pub fn csv<S: Serialize>(&mut self, name: &str, header: &[&str], rows: &[S]) -> Result<(), CliError> {
        let path = self.target(name);
        let io = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
        let mut w = csv::WriterBuilder::new().has_headers(!rows.is_empty()).from_path(&path).map_err(io)?;
        if rows.is_empty() {
            w.write_record(header).map_err(io)?;
        }
        for r in rows {
            w.serialize(r).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Runtime(e.to_string()))
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.target(name);
        fs::write(&path, body).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    pub fn bytes(&mut self, name: &str, body: &[u8]) -> Result<(), CliError> {
        let path = self.target(name);
        fs::write(&path, body).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    /// Writes `manifest.json` listing every file produced so far.
    pub fn manifest<C: Serialize>(&mut self, kind: &str, name: &str, config: &C, seeds: &[u64], data: &str) -> Result<Manifest, CliError> {
        let config = serde_json::to_value(config).map_err(|e| CliError::Runtime(e.to_string()))?;
        let m = Manifest {
            kind: kind.into(),
            name: name.into(),
            config_hash: config_hash(&config),
            config,
            seeds: seeds.to_vec(),
            data: data.into(),
            augmentation: AUGMENTATION.into(),
            versions: versions(),
            files: self.files.clone(),
        };
        let body = serde_json::to_string_pretty(&m).map_err(|e| CliError::Runtime(e.to_string()))?;
        self.text("manifest.json", &(body + "\n"))?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub kind: String,
    pub name: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub data: String,
    pub augmentation: String,
    pub versions: BTreeMap<String, String>,
    pub files: Vec<String>,
}

/// SHA-256 of the compact JSON encoding (object keys sorted).
pub fn config_hash(config: &serde_json::Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("sparselab".to_string(), sparselab_version().to_string()),
        ("sparselab-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
    ])
}

fn sparselab_version() -> &'static str {
    // Both crates share the workspace version.
    env!("CARGO_PKG_VERSION")
}

/// A gnuplot script drawing `y` against `x` from `csv`, one line per value
/// of the column `group` (1-based column numbers).
pub fn gnuplot_lines(csv: &str, title: &str, x: usize, y: usize, group: Option<usize>, logy: bool) -> String {
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set key autotitle columnhead outside\n");
    s.push_str(&format!("set title '{title}'\n"));
    if logy {
        s.push_str("set logscale y\n");
    }
    let png = csv.trim_end_matches(".csv");
    s.push_str(&format!("set terminal pngcairo size 900,600\nset output '{png}.png'\n"));
    match group {
        Some(g) => {
            s.push_str(&format!(
                "groups = system(\"tail -n +2 {csv} | cut -d, -f{g} | sort -u | tr '\\n' ' '\")\n"
            ));
            s.push_str(&format!(
                "plot for [k in groups] '{csv}' using (strcol({g}) eq k ? ${x} : 1/0):{y} with linespoints title k\n"
            ));
        }
        None => s.push_str(&format!("plot '{csv}' using {x}:{y} with linespoints\n")),
    }
    s
}
