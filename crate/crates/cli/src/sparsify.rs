use std::collections::HashSet;
use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::Context;
use pseudocal::dataset::{load_dataset, save_dataset, sparsify, write_document, CocoDocument, SplitMode, SplitSpec};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// per-class, per-image-class, class-agnostic, easy, hard or extreme
    #[arg(long)]
    mode: SplitMode,
    /// Deletion percentage for the percentage-based modes.
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u32).range(0..=100))]
    percent: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Deletion report CSV. Defaults to `<OUTPUT stem>.deletions.csv`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write the deleted annotations as a COCO file.
    #[arg(long)]
    withheld: Option<PathBuf>,
    input: PathBuf,
    output: PathBuf,
}

pub fn run(args: &Args) -> anyhow::Result<()> {
    let spec = SplitSpec::new(args.mode, args.percent, args.seed)?;
    let full = load_dataset(&args.input)?;
    let (sparse, report) = sparsify(&full, &spec)?;
    save_dataset(&sparse, &args.output)?;

    let report_path = args.report.clone().unwrap_or_else(|| args.output.with_extension("deletions.csv"));
    let file = File::create(&report_path).with_context(|| format!("creating {}", report_path.display()))?;
    report.write_csv(BufWriter::new(file)).with_context(|| format!("writing {}", report_path.display()))?;

    if let Some(path) = &args.withheld {
        let deleted: HashSet<_> = report.deleted.iter().copied().collect();
        let mut doc = CocoDocument::from(&full);
        doc.annotations.retain(|a| deleted.contains(&a.id));
        write_document(&doc, path)?;
    }

    let (_, _, before) = full.counts();
    let (_, _, after) = sparse.counts();
    eprintln!("kept {after} of {before} annotations ({} deleted)", before - after);
    Ok(())
}
