//! Plot-ready tab-separated tables plus a JSON manifest.
//!
//! Layout under the output directory:
//!
//! | file | columns |
//! |---|---|
//! | `curves/bon-<label>.tsv` | `k  expected_rfs  logged_rfs` |
//! | `diversity/summary.tsv` | `label  d1  d2  d3_1  d3_16  gap  n_scenes` |
//! | `diversity/<label>.tsv` | `scene_id  d1  d2  d3_1  d3_16  single_intent` |
//! | `heldout/summary.tsv` | `label  rfs_mean  trust_region_rate  n_scenes` |
//! | `heldout/<label>.tsv` | `scene_id  intent  rfs  trust_region` |
//! | `manifest.json` | every file above with its kind, columns and row count |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BonCurve, DiversityReport, HeldOutReport};
use crate::error::{Error, Result};

pub const EXPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct AnalysisBundle {
    /// `(label, curve)`; the label names the file.
    pub curves: Vec<(String, BonCurve)>,
    pub diversity: Vec<(String, DiversityReport)>,
    pub heldout: Vec<(String, HeldOutReport)>,
    /// Free-form key/value pairs copied into the manifest.
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub kind: String,
    pub columns: Vec<String>,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub files: Vec<ManifestEntry>,
    pub metadata: BTreeMap<String, String>,
}

struct Table {
    kind: &'static str,
    columns: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(kind: &'static str, columns: &[&'static str]) -> Self {
        Table {
            kind,
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn render(&self) -> String {
        let mut out = self.columns.join("\t");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.join("\t"));
        }
        out
    }
}

fn label_ok(label: &str) -> bool {
    !label.is_empty() && label.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !label.starts_with('.')
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// Writes every table of `bundle` and returns the manifest.
pub fn export_analysis(bundle: &AnalysisBundle, out_dir: &Path) -> Result<Manifest> {
    let labels = bundle
        .curves
        .iter()
        .map(|(l, _)| l)
        .chain(bundle.diversity.iter().map(|(l, _)| l))
        .chain(bundle.heldout.iter().map(|(l, _)| l));
    for label in labels {
        if !label_ok(label) || label == "summary" {
            return Err(Error::Config(format!("export label {label:?} is not a safe file name")));
        }
    }
    let mut tables: Vec<(String, Table)> = Vec::new();
    for (label, c) in &bundle.curves {
        let mut t = Table::new("bon_curve", &["k", "expected_rfs", "logged_rfs"]);
        for (k, e) in c.k_values.iter().zip(&c.expected) {
            t.push(vec![k.to_string(), num(*e), num(c.logged_score)]);
        }
        tables.push((format!("curves/bon-{label}.tsv"), t));
    }
    if !bundle.diversity.is_empty() {
        let mut summary = Table::new("diversity_summary", &["label", "d1", "d2", "d3_1", "d3_16", "gap", "n_scenes"]);
        for (label, r) in &bundle.diversity {
            summary.push(vec![
                label.clone(),
                num(r.d1),
                num(r.d2),
                num(r.d3_1),
                num(r.d3_16),
                num(r.gap),
                r.per_scene.len().to_string(),
            ]);
            let mut t = Table::new("diversity_scenes", &["scene_id", "d1", "d2", "d3_1", "d3_16", "single_intent"]);
            for s in &r.per_scene {
                t.push(vec![
                    s.scene_id.clone(),
                    num(s.d1),
                    num(s.d2),
                    num(s.d3_1),
                    num(s.d3_16),
                    s.single_intent.name().to_string(),
                ]);
            }
            tables.push((format!("diversity/{label}.tsv"), t));
        }
        tables.push(("diversity/summary.tsv".into(), summary));
    }
    if !bundle.heldout.is_empty() {
        let mut summary = Table::new("heldout_summary", &["label", "rfs_mean", "trust_region_rate", "n_scenes"]);
        for (label, r) in &bundle.heldout {
            summary.push(vec![label.clone(), num(r.rfs_mean), num(r.trust_region_rate), r.per_scene.len().to_string()]);
            let mut t = Table::new("heldout_scenes", &["scene_id", "intent", "rfs", "trust_region"]);
            for s in &r.per_scene {
                t.push(vec![s.scene_id.clone(), s.intent.name().to_string(), num(s.rfs), u8::from(s.trust_region).to_string()]);
            }
            tables.push((format!("heldout/{label}.tsv"), t));
        }
        tables.push(("heldout/summary.tsv".into(), summary));
    }

    let mut seen = std::collections::BTreeSet::new();
    for (path, _) in &tables {
        if !seen.insert(path.clone()) {
            return Err(Error::Config(format!("duplicate export file {path}")));
        }
    }

    let mut files = Vec::new();
    for (rel, t) in &tables {
        let path = out_dir.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&path, t.render()).map_err(|e| Error::io(&path, e))?;
        files.push(ManifestEntry {
            path: rel.clone(),
            kind: t.kind.to_string(),
            columns: t.columns.iter().map(|c| c.to_string()).collect(),
            rows: t.rows.len(),
        });
    }
    let manifest = Manifest {
        format_version: EXPORT_VERSION,
        files,
        metadata: bundle.metadata.clone(),
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(out_dir: &Path) -> Result<Manifest> {
    let path = out_dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        record: None,
        message: e.to_string(),
    })
}
