use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use esnmpc::mpc::{mean_std, ControlSummary};

/// Summary files matched by `pattern`. A match that is a directory contributes its
/// `summary.json`; a pattern matching nothing is retried with a `.json` suffix.
pub fn collect(pattern: &str) -> Result<Vec<PathBuf>> {
    let resolve = |p: &str| -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for entry in glob::glob(p).with_context(|| format!("bad glob {p:?}"))? {
            let path = entry?;
            let path = if path.is_dir() { path.join("summary.json") } else { path };
            if path.is_file() {
                out.push(path);
            }
        }
        Ok(out)
    };
    let mut paths = resolve(pattern)?;
    if paths.is_empty() {
        paths = resolve(&format!("{pattern}.json"))?;
    }
    paths.sort();
    Ok(paths)
}

pub fn load(path: &Path) -> Result<ControlSummary> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not a control summary", path.display()))
}

/// Mean and sample standard deviation of `J` per label, as a Markdown table.
pub fn table(summaries: &[ControlSummary]) -> String {
    let mut groups: BTreeMap<&str, Vec<&ControlSummary>> = BTreeMap::new();
    for s in summaries {
        groups.entry(s.label.as_str()).or_default().push(s);
    }
    let mut out = String::from("| Model | Runs | Mean J | Std J | Mean J (plant units) | Std J (plant units) |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for (label, runs) in groups {
        let (m, s) = mean_std(&runs.iter().map(|r| r.total_cost).collect::<Vec<_>>());
        let (mp, sp) = mean_std(&runs.iter().map(|r| r.total_cost_plant).collect::<Vec<_>>());
        let name = if label.is_empty() { "-" } else { label };
        out.push_str(&format!("| {name} | {} | {m:.4} | {s:.4} | {mp:.4} | {sp:.4} |\n", runs.len()));
    }
    out
}

pub fn run(patterns: &[String]) -> Result<String> {
    let mut summaries = Vec::new();
    for p in patterns {
        for path in collect(p)? {
            summaries.push(load(&path)?);
        }
    }
    if summaries.is_empty() {
        bail!("no summaries match {patterns:?}");
    }
    Ok(table(&summaries))
}
