//! Grid runs. Each cell is a separate `featrecon train` process so a
//! diverging or misconfigured cell cannot take the grid down with it.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use featrecon::engine::{self, LogRecord, RunConfig, RunSummary};
use featrecon::graph::{LossKind, Variant};
use featrecon::metrics::MetricSet;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{internal, write_file, CliResult, Failure, Grid};

pub const VARIANT_COLUMNS: [&str; 13] = [
    "variant",
    "loss",
    "optimize_encoder",
    "stop_gradient",
    "paired_encoders",
    "final_i_auroc",
    "final_p_auroc",
    "final_aupro",
    "best_i_auroc",
    "best_p_auroc",
    "best_aupro",
    "best_iteration",
    "status",
];

pub const ALPHA_COLUMNS: [&str; 11] = [
    "alpha",
    "gaussian_discard_rate",
    "measured_discard_rate",
    "final_i_auroc",
    "final_p_auroc",
    "final_aupro",
    "best_i_auroc",
    "best_p_auroc",
    "best_aupro",
    "best_iteration",
    "status",
];

struct Cell {
    name: String,
    overrides: Vec<String>,
    /// Leading CSV fields describing the cell.
    key: Vec<String>,
}

struct Outcome {
    summary: Option<RunSummary>,
    measured_discard: Option<f64>,
}

/// Fraction of a standard normal population below `alpha`.
pub fn gaussian_discard_rate(alpha: f64) -> f64 {
    Normal::standard().cdf(alpha)
}

fn loss_name(kind: LossKind) -> &'static str {
    match kind {
        LossKind::Regional => "regional",
        LossKind::Global => "global",
        LossKind::GlobalHm => "global_hm",
    }
}

fn variant_cells(names: Option<Vec<String>>) -> CliResult<Vec<Cell>> {
    let variants = match names {
        Some(names) => names
            .iter()
            .map(|n| n.parse::<Variant>())
            .collect::<featrecon::Result<Vec<_>>>()?,
        None => Variant::ALL.to_vec(),
    };
    Ok(variants
        .into_iter()
        .map(|v| {
            let s = v.spec();
            Cell {
                name: format!("variant_{v}"),
                overrides: vec![format!("variant=\"{v}\"")],
                key: vec![
                    v.to_string(),
                    loss_name(s.loss_kind).into(),
                    s.optimize_encoder.to_string(),
                    s.stop_gradient.to_string(),
                    s.paired_encoders.to_string(),
                ],
            }
        })
        .collect())
}

fn alpha_cells(base: &RunConfig, alphas: Option<Vec<String>>) -> Vec<Cell> {
    let alphas =
        alphas.unwrap_or_else(|| ["-2", "-1.5", "-1", "-0.5", "0", "0.5", "1", "1.5", "2"].map(String::from).to_vec());
    // Thresholds only matter for the hard-mining loss.
    let variant = if base.variant.spec().loss_kind == LossKind::GlobalHm {
        base.variant
    } else {
        Variant::Ours
    };
    alphas
        .into_iter()
        .map(|a| {
            let rate = a
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .map(|x| format!("{:.6}", gaussian_discard_rate(x)))
                .unwrap_or_default();
            Cell {
                name: format!("alpha_{}", a.trim()),
                overrides: vec![
                    format!("variant=\"{variant}\""),
                    format!("hard_mining.alpha_end={}", a.trim()),
                ],
                key: vec![a.trim().to_string(), rate],
            }
        })
        .collect()
}

/// Mean logged discard rate once the threshold schedule has settled.
fn measured_discard(run_dir: &Path, cfg: &RunConfig) -> Option<f64> {
    let text = fs::read_to_string(run_dir.join(engine::LOG_FILE)).ok()?;
    let settled = (cfg.hard_mining.warmup_fraction * cfg.iterations as f64).ceil() as usize;
    let rates: Vec<f64> = text
        .lines()
        .filter_map(|l| serde_json::from_str::<LogRecord>(l).ok())
        .filter_map(|r| match r {
            LogRecord::Step {
                iteration,
                discard_rate: Some(d),
                ..
            } if iteration >= settled => Some(d),
            _ => None,
        })
        .collect();
    (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
}

fn run_cell(exe: &Path, config: &Path, cells_dir: &Path, cell: &Cell, sequential: bool) -> Outcome {
    let out = cells_dir.join(&cell.name);
    let mut cmd = Command::new(exe);
    if sequential {
        cmd.arg("--sequential");
    }
    cmd.arg("train").arg("--config").arg(config).arg("--output").arg(&out).args(&cell.overrides);
    let status = cmd.status();
    let ok = matches!(&status, Ok(s) if s.success());
    if !ok {
        log::warn!("cell {} failed ({status:?})", cell.name);
        return Outcome {
            summary: None,
            measured_discard: None,
        };
    }
    let summary = fs::read_to_string(out.join(engine::SUMMARY_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<RunSummary>(&t).ok());
    let measured = RunConfig::from_file(&out.join(engine::CONFIG_SNAPSHOT), &[])
        .ok()
        .and_then(|cfg| measured_discard(&out, &cfg));
    Outcome {
        summary,
        measured_discard: measured,
    }
}

fn metric_fields(m: Option<&MetricSet>) -> [String; 3] {
    let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    match m {
        Some(m) => [f(m.i_auroc), f(m.p_auroc), f(m.aupro)],
        None => Default::default(),
    }
}

pub fn run(
    base: &RunConfig,
    output: &Path,
    grid: Grid,
    variants: Option<Vec<String>>,
    alphas: Option<Vec<String>>,
    jobs: usize,
    sequential: bool,
) -> CliResult<()> {
    if jobs == 0 {
        return Err(Failure::User("--jobs must be at least 1".into()));
    }
    fs::create_dir_all(output).map_err(|e| Failure::User(format!("cannot create {}: {e}", output.display())))?;
    let config = output.join(engine::CONFIG_SNAPSHOT);
    write_file(&config, base.to_toml()?)?;
    let (cells, columns): (Vec<Cell>, &[&str]) = match grid {
        Grid::Variants => (variant_cells(variants)?, &VARIANT_COLUMNS),
        Grid::Alpha => (alpha_cells(base, alphas), &ALPHA_COLUMNS),
    };
    let exe: PathBuf = std::env::current_exe().map_err(|e| internal("locating executable", e))?;
    let cells_dir = output.join("cells");

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Outcome>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let r = run_cell(&exe, &config, &cells_dir, cell, sequential);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().unwrap();

    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(columns).map_err(|e| internal("writing csv", e))?;
    let mut failed = 0;
    for (cell, r) in cells.iter().zip(results) {
        let r = r.ok_or_else(|| Failure::Internal(format!("cell {} never ran", cell.name)))?;
        let mut row = cell.key.clone();
        if grid == Grid::Alpha {
            row.push(r.measured_discard.map(|d| format!("{d:.6}")).unwrap_or_default());
        }
        let s = r.summary.as_ref();
        row.extend(metric_fields(s.and_then(|s| s.final_metrics.as_ref())));
        row.extend(metric_fields(s.and_then(|s| s.best_metrics.as_ref())));
        row.push(s.and_then(|s| s.best_iteration).map(|i| i.to_string()).unwrap_or_default());
        row.push(if s.is_some() { "ok".into() } else { "FAILED".into() });
        if s.is_none() {
            failed += 1;
        }
        println!("{}", row.join("\t"));
        wtr.write_record(&row).map_err(|e| internal("writing csv", e))?;
    }
    let bytes = wtr.into_inner().map_err(|e| internal("writing csv", e))?;
    write_file(&output.join("ablation.csv"), bytes)?;
    if failed > 0 {
        eprintln!("warning: {failed} of {} cells failed", cells.len());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_rates_match_the_normal_table() {
        for (a, rate) in [(-2.0, 0.023), (-1.0, 0.159), (0.0, 0.5), (1.0, 0.841), (2.0, 0.977)] {
            assert!((gaussian_discard_rate(a) - rate).abs() < 5e-4, "{a}");
        }
    }
}
