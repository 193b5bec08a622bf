//! Markdown tables over every run manifest found under a results directory.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;

use super::manifest::walk;
use super::{Manifest, MANIFEST_FILE};
use crate::error::Result;

/// Layout of one report table; rows come from manifests whose `track` matches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReportTable {
    pub track: &'static str,
    pub title: &'static str,
    pub columns: &'static [&'static str],
}

const ACCURACY: &[&str] = &["Verb Top1", "Noun Top1", "Action Top1", "Verb Top5", "Noun Top5"];

pub const TABLES: [ReportTable; 9] = [
    ReportTable { track: "corpus", title: "Corpus", columns: &["Clips", "Pairs", "Selected", "Target clips"] },
    ReportTable {
        track: "pretrain",
        title: "Post-pretraining",
        columns: &["Pairs", "First loss", "Last loss", "Temperature"],
    },
    ReportTable { track: "nlq", title: "Natural language queries", columns: &["R1@0.3", "R1@0.5", "R5@0.3", "R5@0.5"] },
    ReportTable { track: "goalstep", title: "Step grounding", columns: &["R1@0.3", "R1@0.5", "R5@0.3", "R5@0.5"] },
    ReportTable {
        track: "mq",
        title: "Moment queries",
        columns: &["mAP@0.1", "mAP@0.2", "mAP@0.3", "mAP@0.4", "mAP@0.5", "Avg mAP", "R1@0.5"],
    },
    ReportTable {
        track: "lta",
        title: "Long-term action anticipation",
        columns: &["Verb Top1", "Noun Top1", "Action Top1", "Verb ED", "Noun ED", "Action ED"],
    },
    ReportTable { track: "ek_ar", title: "Action recognition", columns: ACCURACY },
    ReportTable {
        track: "ek_mir",
        title: "Multi-instance retrieval",
        columns: &["mAP V2T", "mAP T2V", "mAP Avg", "nDCG V2T", "nDCG T2V", "nDCG Avg"],
    },
    ReportTable {
        track: "ek_uda",
        title: "Domain adaptation",
        columns: &["Verb Top1", "Noun Top1", "Action Top1", "Chance"],
    },
];

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub markdown: String,
    /// Manifests that could not be parsed.
    pub skipped: Vec<PathBuf>,
    pub manifests: usize,
}

fn find_manifests(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        warn!("results directory {} does not exist", dir.display());
        return Ok(Vec::new());
    }
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files.retain(|p| p.file_name().is_some_and(|n| n == MANIFEST_FILE));
    Ok(files)
}

/// One table per track with fixed column headers; absent cells are `-` and
/// values have two decimals. Unparseable manifests are skipped with a warning.
pub fn render_report(dir: &Path) -> Result<Report> {
    let mut manifests: Vec<(String, Manifest)> = Vec::new();
    let mut skipped = Vec::new();
    for path in find_manifests(dir)? {
        match Manifest::load(&path) {
            Ok(m) => {
                let rel = path
                    .parent()
                    .and_then(|p| p.strip_prefix(dir).ok())
                    .map(|p| p.display().to_string())
                    .unwrap_or_default();
                manifests.push((rel, m));
            }
            Err(e) => {
                warn!("skipping manifest {}: {e}", path.display());
                skipped.push(path);
            }
        }
    }
    let mut md = String::new();
    for table in &TABLES {
        let rows: Vec<(&str, &str, &std::collections::BTreeMap<String, f64>)> = manifests
            .iter()
            .filter(|(_, m)| m.track == table.track)
            .flat_map(|(rel, m)| m.metrics.iter().map(move |(label, cells)| (rel.as_str(), label.as_str(), cells)))
            .collect();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for (_, label, _) in &rows {
            *counts.entry(label).or_default() += 1;
        }
        let _ = writeln!(md, "## {}\n", table.title);
        let _ = writeln!(md, "| Model | {} |", table.columns.join(" | "));
        let _ = writeln!(md, "|---|{}", "---:|".repeat(table.columns.len()));
        for (rel, label, cells) in rows {
            // the same row from two runs is told apart by its directory
            let name = if counts[label] > 1 { format!("{rel}: {label}") } else { label.to_string() };
            let values: Vec<String> = table
                .columns
                .iter()
                .map(|c| cells.get(*c).map_or_else(|| "-".to_string(), |v| format!("{v:.2}")))
                .collect();
            let _ = writeln!(md, "| {} | {} |", name.replace('|', "/"), values.join(" | "));
        }
        md.push('\n');
    }
    Ok(Report { markdown: md, skipped, manifests: manifests.len() })
}

/// A table read back from rendered markdown.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedTable {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

/// Inverse of the table layout written by [`render_report`].
pub fn parse_report_tables(markdown: &str) -> Vec<ParsedTable> {
    let cells = |line: &str| -> Vec<String> {
        line.trim().trim_start_matches('|').trim_end_matches('|').split('|').map(|c| c.trim().to_string()).collect()
    };
    let mut tables: Vec<ParsedTable> = Vec::new();
    let mut lines = markdown.lines().peekable();
    while let Some(line) = lines.next() {
        if let Some(title) = line.strip_prefix("## ") {
            tables.push(ParsedTable { title: title.to_string(), columns: Vec::new(), rows: Vec::new() });
        } else if line.starts_with("| Model |") {
            if let Some(t) = tables.last_mut() {
                t.columns = cells(line).into_iter().skip(1).collect();
            }
            lines.next();
        } else if line.starts_with('|') {
            if let Some(t) = tables.last_mut() {
                let mut c = cells(line).into_iter();
                let label = c.next().unwrap_or_default();
                t.rows.push((label, c.map(|v| v.parse().ok()).collect()));
            }
        }
    }
    tables
}
