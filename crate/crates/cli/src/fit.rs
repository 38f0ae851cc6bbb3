use std::path::PathBuf;

use anyhow::{bail, Context};
use pseudocal::calibration::{fit, CalibrationSample};
use serde::Deserialize;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// CSV with columns `p_hat,m`.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Debug, Deserialize)]
struct Row {
    p_hat: f64,
    m: u8,
}

fn read_samples(path: &PathBuf) -> anyhow::Result<Vec<CalibrationSample>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        if row.m > 1 {
            bail!("{}: row {}: m must be 0 or 1", path.display(), i + 1);
        }
        out.push(CalibrationSample::new(row.p_hat, row.m == 1).with_context(|| format!("row {}", i + 1))?);
    }
    Ok(out)
}

pub fn run(args: &Args) -> anyhow::Result<()> {
    let samples = read_samples(&args.input)?;
    if samples.is_empty() {
        bail!("{}: no samples", args.input.display());
    }
    let outcome = fit(&samples)?;
    println!("a,b,nll");
    println!("{},{},{}", outcome.params.a, outcome.params.b, outcome.nll);
    Ok(())
}
