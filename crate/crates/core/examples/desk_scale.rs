//! Trains one variant on a freshly generated synthetic dataset and prints
//! the evaluation trajectory.
//!
//! Usage: `cargo run --release --example desk_scale -- [VARIANT] [ITERATIONS] [key=value ...]`

use featrecon::data::{make_synthetic_dataset, SyntheticConfig};
use featrecon::engine::{train, LogRecord, RunConfig, TrainOptions};
use featrecon::par::Exec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant = args.first().cloned().unwrap_or_else(|| "OURS".into());
    let iterations = args.get(1).cloned().unwrap_or_else(|| "1000".into());
    let dir = tempfile::tempdir()?;
    let (spec, _) = make_synthetic_dataset(&SyntheticConfig::new(7, 200, 50, 50, 64), dir.path(), Exec::Auto)?;
    let mut overrides = vec![format!("variant={variant}"), format!("iterations={iterations}")];
    overrides.extend(args.iter().skip(2).cloned());
    let cfg = RunConfig::desk_scale(spec).with_overrides(&overrides)?;
    let out = train(&cfg, &TrainOptions::default())?;
    for r in &out.log {
        if let LogRecord::Eval { iteration, diversity, metrics } = r {
            let m = metrics.as_ref();
            println!(
                "it {iteration:5} diversity {:.4} {:.4} {:.4} i_auroc {:?} aupro {:?} p_auroc {:?}",
                diversity[0],
                diversity[1],
                diversity[2],
                m.and_then(|m| m.i_auroc),
                m.and_then(|m| m.aupro),
                m.and_then(|m| m.p_auroc)
            );
        }
    }
    println!("final loss {:.5}", out.final_loss);
    Ok(())
}
