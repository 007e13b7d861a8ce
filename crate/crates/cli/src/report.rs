//! Comparison tables and plots rebuilt from stored run directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use coalfake::pipeline::{RunConfig, RunState};

use crate::plot;
use crate::run::{write_json, CONFIG_FILE, STATE_FILE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyRow {
    pub run: String,
    pub strategy: String,
    pub seed: u64,
    pub rho: f64,
    pub round: usize,
    pub labelled: usize,
    pub labelled_fraction: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhoRow {
    pub rho: f64,
    pub runs: usize,
    pub mean_final_macro_f1: f64,
    pub mean_total_usd: f64,
    pub mean_human_usd: f64,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub strategies: Vec<StrategyRow>,
    pub rho: Vec<RhoRow>,
}

struct StoredRun {
    name: String,
    config: RunConfig,
    state: RunState,
}

/// Directories under `root` (inclusive) holding a state file.
fn find_runs(root: &Path, found: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    if !root.is_dir() {
        return Err(coalfake::pipeline::PipelineError::MissingFile(root.to_path_buf()).into());
    }
    if root.join(STATE_FILE).is_file() {
        found.push(root.to_path_buf());
    }
    let mut children: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for child in children {
        find_runs(&child, found)?;
    }
    Ok(())
}

fn load_runs(inputs: &[PathBuf]) -> anyhow::Result<Vec<StoredRun>> {
    let mut dirs = Vec::new();
    for input in inputs {
        find_runs(input, &mut dirs)?;
    }
    dirs.sort();
    dirs.dedup();
    dirs.into_iter()
        .map(|dir| {
            let state = RunState::load(&dir.join(STATE_FILE))?;
            let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
            Ok(StoredRun {
                name: dir.display().to_string(),
                config,
                state,
            })
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn build(runs: &[StoredRun]) -> Report {
    let mut strategies = Vec::new();
    for run in runs {
        let s = &run.state;
        let pool = s.labelled.len() + s.pool_remaining.len() + s.pending.as_ref().map_or(0, |p| p.selected.len());
        for r in &s.rounds {
            strategies.push(StrategyRow {
                run: run.name.clone(),
                strategy: run.config.sampling.strategy.as_str().to_string(),
                seed: run.config.seed,
                rho: run.config.annotator.rho,
                round: r.metrics.round,
                labelled: r.labelled_total,
                labelled_fraction: if pool == 0 { 0.0 } else { r.labelled_total as f64 / pool as f64 },
                macro_f1: r.metrics.macro_f1,
            });
        }
    }
    strategies.sort_by(|a, b| (&a.strategy, a.seed, &a.run, a.round).cmp(&(&b.strategy, b.seed, &b.run, b.round)));

    let mut by_rho: Vec<(f64, Vec<&StoredRun>)> = Vec::new();
    for run in runs.iter().filter(|r| !r.state.rounds.is_empty()) {
        let rho = run.config.annotator.rho;
        match by_rho.iter_mut().find(|(r, _)| *r == rho) {
            Some((_, group)) => group.push(run),
            None => by_rho.push((rho, vec![run])),
        }
    }
    by_rho.sort_by(|a, b| a.0.total_cmp(&b.0));
    let rho = by_rho
        .into_iter()
        .map(|(rho, group)| RhoRow {
            rho,
            runs: group.len(),
            mean_final_macro_f1: mean(group.iter().filter_map(|r| r.state.rounds.last()).map(|r| r.metrics.macro_f1)),
            mean_total_usd: mean(group.iter().map(|r| r.state.ledger.cost().total_usd)),
            mean_human_usd: mean(group.iter().map(|r| r.state.ledger.cost().human_usd)),
        })
        .collect();
    Report { strategies, rho }
}

/// Per strategy, the seed-averaged (labelled fraction, macro-F1) of each round.
fn strategy_curves(rows: &[StrategyRow]) -> Vec<plot::Series> {
    let mut acc: BTreeMap<&str, BTreeMap<usize, Vec<(f64, f64)>>> = BTreeMap::new();
    for r in rows {
        acc.entry(&r.strategy)
            .or_default()
            .entry(r.round)
            .or_default()
            .push((r.labelled_fraction, r.macro_f1));
    }
    acc.into_iter()
        .map(|(name, rounds)| {
            let pts = rounds
                .into_values()
                .map(|v| (mean(v.iter().map(|p| p.0)), mean(v.iter().map(|p| p.1))))
                .collect();
            (name.to_string(), pts)
        })
        .collect()
}

pub fn report(inputs: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    let runs = load_runs(inputs)?;
    if runs.is_empty() {
        anyhow::bail!("no run directories with {STATE_FILE} under the given inputs");
    }
    let report = build(&runs);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut w = csv::Writer::from_path(out.join("strategies.csv"))?;
    for row in &report.strategies {
        w.serialize(row)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("rho.csv"))?;
    for row in &report.rho {
        w.serialize(row)?;
    }
    w.flush()?;
    write_json(&out.join("report.json"), &report)?;

    plot::line_chart(
        &out.join("strategies.svg"),
        "macro-F1 vs labelled fraction",
        "labelled fraction of pool",
        "macro-F1",
        &strategy_curves(&report.strategies),
    )?;
    let f1: Vec<(f64, f64)> = report.rho.iter().map(|r| (r.rho, r.mean_final_macro_f1)).collect();
    plot::line_chart(&out.join("rho_f1.svg"), "final macro-F1 vs rho", "rho", "macro-F1", &[("macro-F1".into(), f1)])?;
    let cost: Vec<(f64, f64)> = report.rho.iter().map(|r| (r.rho, r.mean_total_usd)).collect();
    plot::line_chart(&out.join("rho_cost.svg"), "total cost vs rho", "rho", "USD", &[("total cost".into(), cost)])?;

    println!(
        "{} runs: {} strategy rows, {} rho rows written to {}",
        runs.len(),
        report.strategies.len(),
        report.rho.len(),
        out.display()
    );
    Ok(())
}
