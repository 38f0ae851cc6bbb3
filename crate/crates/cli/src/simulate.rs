//! The `simulate` command and its run manifest.
//!
//! The manifest holds the fully resolved configuration (file values, then
//! flag overrides, then the derived split seed) and is written before any
//! other output, so `--manifest` replays a run byte for byte.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use pseudocal::calibration::write_trajectory_csv;
use pseudocal::pseudo_labeling::PipelineConfig;
use pseudocal::simulator::{run_training_loop, RunConfig, RunReport, SimConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// JSON file with optional `sim`, `pipeline` and `run` sections.
    #[arg(long, conflicts_with = "manifest")]
    config: Option<PathBuf>,
    /// Replay the resolved configuration of an earlier run.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Also write every emitted detection to predictions.csv.
    #[arg(long)]
    dump_predictions: bool,
    /// Output directory. Defaults to the manifest's when replaying.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunFile {
    pub sim: SimConfig,
    pub pipeline: PipelineConfig,
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub simulation: u64,
    pub split: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: String,
    pub config_path: Option<PathBuf>,
    pub seeds: Seeds,
    pub config: RunFile,
    pub output_dir: PathBuf,
    /// Files the run writes, relative to `output_dir`.
    pub outputs: Vec<String>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        anyhow::anyhow!("{}: field `{}`: {}", path.display(), field, e.inner())
    })
}

fn reliability_name(checkpoint: usize, kind: &str) -> String {
    format!("reliability/ckpt_{checkpoint:04}_{kind}.csv")
}

fn planned_outputs(cfg: &RunFile) -> Vec<String> {
    let mut out = vec!["manifest.json".to_string(), "run.csv".into(), "trajectory.csv".into()];
    let checkpoints = (cfg.run.iterations / cfg.run.checkpoint_every) as usize;
    for c in 0..checkpoints {
        out.push(reliability_name(c, "raw"));
        out.push(reliability_name(c, "cal"));
    }
    if cfg.run.keep_predictions {
        out.push("predictions.csv".into());
    }
    out
}

fn resolve(args: &Args) -> anyhow::Result<RunManifest> {
    let (mut cfg, config_path, default_out) = match (&args.manifest, &args.config) {
        (Some(m), _) => {
            let manifest: RunManifest = read_json(m)?;
            (manifest.config, manifest.config_path, Some(manifest.output_dir))
        }
        (None, Some(c)) => (read_json::<RunFile>(c)?, Some(c.clone()), None),
        (None, None) => (RunFile::default(), None, None),
    };
    if let Some(n) = args.iterations {
        cfg.run.iterations = n;
    }
    if let Some(s) = args.seed {
        if cfg.sim.seed != s {
            // a new simulation seed also re-derives an implicit split seed
            cfg.sim.split.seed = None;
        }
        cfg.sim.seed = s;
    }
    if let Some(k) = args.checkpoint_every {
        cfg.run.checkpoint_every = k;
    }
    if args.dump_predictions {
        cfg.run.keep_predictions = true;
    }
    cfg.run.keep_reliability = true;
    cfg.sim.validate()?;
    cfg.pipeline.validate()?;
    cfg.run.validate()?;
    let split = cfg.sim.split_spec();
    split.validate()?;
    cfg.sim.split.seed = Some(split.seed);

    let Some(output_dir) = args.out.clone().or(default_out) else {
        bail!("--out is required unless replaying a manifest");
    };
    Ok(RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_path,
        seeds: Seeds { simulation: cfg.sim.seed, split: split.seed },
        outputs: planned_outputs(&cfg),
        config: cfg,
        output_dir,
    })
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_outputs(report: &RunReport, dir: &Path) -> anyhow::Result<()> {
    let mut w = create(dir, "run.csv")?;
    report.write_csv(&mut w)?;
    w.flush()?;

    let mut w = create(dir, "trajectory.csv")?;
    write_trajectory_csv(&report.trajectory, &mut w)?;
    w.flush()?;

    fs::create_dir_all(dir.join("reliability"))?;
    for c in &report.checkpoints {
        let entry = report.reliability.iter().find(|r| r.checkpoint == c.checkpoint);
        for kind in ["raw", "cal"] {
            let mut w = create(dir, &reliability_name(c.checkpoint, kind))?;
            match entry {
                Some(r) if kind == "raw" => r.raw.write_csv(&mut w)?,
                Some(r) => r.calibrated.write_csv(&mut w)?,
                // nothing emitted inside the window yet
                None => writeln!(w, "bin_lo,bin_hi,count,mean_conf,precision\nece,")?,
            }
            w.flush()?;
        }
    }

    if !report.predictions.is_empty() {
        let mut w = create(dir, "predictions.csv")?;
        report.write_predictions_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

pub fn run(args: &Args) -> anyhow::Result<()> {
    let manifest = resolve(args)?;
    let dir = &manifest.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut w = create(dir, "manifest.json")?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    writeln!(w)?;
    w.flush()?;

    let cfg = &manifest.config;
    let report = run_training_loop(&cfg.sim, &cfg.pipeline, &cfg.run)?;
    if cfg.run.keep_predictions && report.predictions.is_empty() {
        // keep the file listing in the manifest truthful
        let mut w = create(dir, "predictions.csv")?;
        report.write_predictions_csv(&mut w)?;
        w.flush()?;
    }
    write_outputs(&report, dir)?;

    if let Some(last) = report.checkpoints.last() {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        eprintln!(
            "{} iterations, {} refits; final ece raw {} cal {}, calibrator a={:.4} b={:.4}",
            cfg.run.iterations,
            report.trajectory.len(),
            fmt(last.ece_raw),
            fmt(last.ece_cal),
            last.a,
            last.b
        );
    }
    Ok(())
}
