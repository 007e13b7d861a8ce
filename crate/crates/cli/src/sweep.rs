use std::cmp::Ordering;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;

use anyhow::{anyhow, bail};
use serde::Serialize;
use serde_json::Value;

use coalfake::pipeline::RunConfig;

use crate::plot;
use crate::run::{log_header, run_to_completion, write_json};

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

pub fn parse_axis(raw: &str) -> anyhow::Result<Axis> {
    let (key, values) = raw
        .split_once('=')
        .ok_or_else(|| anyhow!("grid axis {raw:?} is not key=v1,v2,..."))?;
    let values: Vec<String> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect();
    if key.trim().is_empty() || values.is_empty() {
        bail!("grid axis {raw:?} needs a key and at least one value");
    }
    Ok(Axis {
        key: key.trim().to_string(),
        values,
    })
}

/// Numbers compare numerically, anything else as text.
fn cmp_value(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.cmp(b),
    }
}

/// Every grid point, sorted axis by axis, without duplicates.
pub fn grid_points(axes: &[Axis]) -> Vec<Vec<String>> {
    let mut points: Vec<Vec<String>> = vec![Vec::new()];
    for axis in axes {
        let mut values = axis.values.clone();
        values.sort_by(|a, b| cmp_value(a, b));
        values.dedup_by(|a, b| cmp_value(a, b) == Ordering::Equal);
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(v.clone());
                    q
                })
            })
            .collect();
    }
    points
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub setting: serde_json::Map<String, Value>,
    pub rounds: usize,
    pub final_macro_f1: f64,
    pub mean_macro_f1: f64,
    pub total_usd: f64,
    pub macro_f1_per_round: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct SweepOutput<'a> {
    axes: Vec<&'a str>,
    rows: &'a [SweepRow],
}

fn slug(axes: &[Axis], point: &[String]) -> String {
    axes.iter()
        .zip(point)
        .map(|(a, v)| format!("{}={}", a.key, v))
        .collect::<Vec<_>>()
        .join(",")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "=.,-_".contains(c) { c } else { '_' })
        .collect()
}

fn run_point(base: &RunConfig, axes: &[Axis], point: &[String], out: &Path) -> anyhow::Result<SweepRow> {
    let overrides: Vec<String> = axes.iter().zip(point).map(|(a, v)| format!("{}={}", a.key, v)).collect();
    let config = base.with_overrides(&overrides)?;
    let state = run_to_completion(&config, &out.join("points").join(slug(axes, point)), false)?;
    let f1: Vec<f64> = state.metrics().iter().map(|m| m.macro_f1).collect();
    let setting = axes
        .iter()
        .zip(point)
        .map(|(a, v)| (a.key.clone(), serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone()))))
        .collect();
    Ok(SweepRow {
        setting,
        rounds: f1.len(),
        final_macro_f1: f1.last().copied().unwrap_or(0.0),
        mean_macro_f1: if f1.is_empty() { 0.0 } else { f1.iter().sum::<f64>() / f1.len() as f64 },
        total_usd: state.ledger.cost().total_usd,
        macro_f1_per_round: f1,
    })
}

pub fn sweep(base: &RunConfig, grid: &[String], jobs: usize, out: &Path) -> anyhow::Result<()> {
    log_header("sweep", base);
    let axes = grid.iter().map(|g| parse_axis(g)).collect::<anyhow::Result<Vec<_>>>()?;
    let points = grid_points(&axes);
    // Reject bad keys before spending time on any run.
    for point in &points {
        let overrides: Vec<String> = axes.iter().zip(point).map(|(a, v)| format!("{}={}", a.key, v)).collect();
        base.with_overrides(&overrides)?;
    }
    tracing::info!(points = points.len(), jobs, "sweep grid");

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<anyhow::Result<SweepRow>>>> = Mutex::new((0..points.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, points.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, AtomicOrdering::SeqCst);
                let Some(point) = points.get(i) else { break };
                let row = run_point(base, &axes, point, out);
                results.lock().expect("results lock")[i] = Some(row);
            });
        }
    });
    let rows = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every point ran"))
        .collect::<anyhow::Result<Vec<_>>>()?;

    write_csv(&out.join("sweep.csv"), &axes, &points, &rows)?;
    let keys: Vec<&str> = axes.iter().map(|a| a.key.as_str()).collect();
    write_json(&out.join("sweep.json"), &SweepOutput { axes: keys, rows: &rows })?;
    if axes.len() == 1 {
        let xs: Option<Vec<f64>> = points.iter().map(|p| p[0].parse().ok()).collect();
        if let Some(xs) = xs {
            let ys: Vec<f64> = rows.iter().map(|r| r.final_macro_f1).collect();
            plot::line_chart(
                &out.join("sweep.svg"),
                &format!("final macro-F1 vs {}", axes[0].key),
                &axes[0].key,
                "macro-F1",
                &[("final macro-F1".to_string(), xs.into_iter().zip(ys).collect())],
            )?;
        }
    }
    for row in &rows {
        println!("{} final={:.4} mean={:.4}", Value::Object(row.setting.clone()), row.final_macro_f1, row.mean_macro_f1);
    }
    Ok(())
}

fn write_csv(path: &Path, axes: &[Axis], points: &[Vec<String>], rows: &[SweepRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = axes.iter().map(|a| a.key.clone()).collect();
    header.extend(["rounds", "final_macro_f1", "mean_macro_f1", "total_usd"].map(String::from));
    w.write_record(&header)?;
    for (point, row) in points.iter().zip(rows) {
        let mut record = point.clone();
        record.push(row.rounds.to_string());
        record.push(format!("{:.6}", row.final_macro_f1));
        record.push(format!("{:.6}", row.mean_macro_f1));
        record.push(format!("{:.6}", row.total_usd));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}
