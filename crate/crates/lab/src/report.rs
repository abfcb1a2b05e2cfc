//! Per-cell result records and their rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spt_core::eval::StructureCheck;
use spt_core::spt::MonotonicityReport;
use spt_core::NUM_CLASSES;

use crate::checkpoint::write_atomic;
use crate::config::{AttackKind, Defense};
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Whitebox,
    Blackbox,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Whitebox => "whitebox",
            Protocol::Blackbox => "blackbox",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureSummary {
    pub passed: bool,
    pub violations: usize,
    pub patterns: usize,
    pub images: usize,
}

impl From<&StructureCheck> for StructureSummary {
    fn from(c: &StructureCheck) -> Self {
        Self {
            passed: c.passed(),
            violations: c.violation_count,
            patterns: c.patterns,
            images: c.images,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicitySummary {
    pub grid_points: usize,
    pub strictly_increasing: bool,
    pub strictly_decreasing: bool,
    pub collisions: usize,
}

impl From<&MonotonicityReport> for MonotonicitySummary {
    fn from(m: &MonotonicityReport) -> Self {
        Self {
            grid_points: m.grid_points,
            strictly_increasing: m.strictly_increasing,
            strictly_decreasing: m.strictly_decreasing,
            collisions: m.collisions,
        }
    }
}

/// SPT-only measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SptSummary {
    pub structure: StructureSummary,
    pub monotonicity: MonotonicitySummary,
    pub mean_brightness: f64,
    pub init_seed: u64,
    pub weights: Vec<f64>,
}

/// One (protocol, defense, attack, source, target) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub dataset: String,
    pub protocol: Protocol,
    pub defense: Defense,
    pub defense_digest: String,
    pub attack: AttackKind,
    pub attack_digest: String,
    /// Model the attack was crafted against.
    pub source: String,
    pub target: String,
    /// Source and target coincide in a black-box table.
    pub whitebox_reference: bool,
    pub examples: usize,
    pub accuracy: f64,
    pub histogram: [f64; NUM_CLASSES],
    pub seed: u64,
    /// Digest of everything that determines this cell.
    pub config_digest: String,
    pub spt: Option<SptSummary>,
    pub artifacts: Vec<String>,
}

impl CellRecord {
    /// Stable file stem identifying the cell within a run.
    pub fn key(protocol: Protocol, defense: Defense, attack: AttackKind, source: &str, target: &str) -> String {
        format!("{}-{}-{}-{}-{}", protocol.as_str(), defense, attack, source, target)
    }

    pub fn modal_class(&self) -> (usize, f64) {
        self.histogram
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best })
    }
}

pub fn save_cell(record: &CellRecord, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(record).expect("records serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_cell(path: &Path) -> Result<CellRecord> {
    let text = fs::read_to_string(path).map_err(LabError::io(path))?;
    serde_json::from_str(&text).map_err(|e| LabError::format(path, e.to_string()))
}

/// One JSON object per line, in the given order.
pub fn to_json_lines(records: &[CellRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn from_json_lines(path: &Path, text: &str) -> Result<Vec<CellRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| LabError::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Accuracy table: one row per target, one column per attack. Black-box
/// entries where source equals target are starred.
pub fn render_table(records: &[CellRecord]) -> String {
    let mut attacks: Vec<AttackKind> = records.iter().map(|r| r.attack).collect();
    attacks.sort();
    attacks.dedup();
    let mut targets: Vec<&str> = Vec::new();
    for r in records {
        if !targets.contains(&r.target.as_str()) {
            targets.push(&r.target);
        }
    }
    let mut cells: BTreeMap<(&str, AttackKind), String> = BTreeMap::new();
    for r in records {
        let star = if r.whitebox_reference { "*" } else { "" };
        cells.insert((r.target.as_str(), r.attack), format!("{:.2}%{star}", 100.0 * r.accuracy));
    }
    let mut header = vec!["model".to_string()];
    header.extend(attacks.iter().map(|a| if *a == AttackKind::None { "no-attack".into() } else { a.to_string() }));
    let mut rows = vec![header];
    for t in &targets {
        let mut row = vec![t.to_string()];
        for a in &attacks {
            row.push(cells.get(&(*t, *a)).cloned().unwrap_or_else(|| "-".into()));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
        if i == 0 {
            writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))).unwrap();
        }
    }
    out
}

/// Per-target prediction histograms for the rows that carry SPT results.
pub fn render_histograms(records: &[CellRecord]) -> String {
    let mut out = String::new();
    for r in records.iter().filter(|r| r.attack == AttackKind::Spt) {
        let bins: Vec<String> = r.histogram.iter().map(|v| format!("{:5.1}", 100.0 * v)).collect();
        writeln!(out, "{:<5} -> {:<5} {}", r.source, r.target, bins.join(" ")).unwrap();
    }
    out
}
