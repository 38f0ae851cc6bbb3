use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use pseudocal::dataset::{read_document, Annotation, AnnotationRecord, ImageId};
use pseudocal::geometry::BBox;
use pseudocal::metrics::{pseudo_pr, reliability, PrCounts, ReliabilityReport, DEFAULT_BINS, DEFAULT_MATCH_IOU};
use pseudocal::pseudo_labeling::PseudoLabel;
use serde::Deserialize;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// CSV with columns `p_raw,m` and optionally `p_cal`; other columns are ignored.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    bins: usize,
    /// COCO file of pseudo labels, scored against `--withheld`.
    #[arg(long, requires = "withheld")]
    pseudo: Option<PathBuf>,
    /// COCO file of annotations removed by sparsification.
    #[arg(long, requires = "pseudo")]
    withheld: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MATCH_IOU)]
    match_iou: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Deserialize)]
struct Row {
    p_raw: f64,
    #[serde(default)]
    p_cal: Option<f64>,
    m: u8,
}

fn read_rows(path: &Path) -> anyhow::Result<Vec<Row>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row: Row = row.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        if row.m > 1 {
            bail!("{}: row {}: m must be 0 or 1", path.display(), i + 1);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{}: no predictions", path.display());
    }
    Ok(rows)
}

fn write_report(report: &ReliabilityReport, path: &Path) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    report.write_csv(BufWriter::new(file)).with_context(|| format!("writing {}", path.display()))
}

fn by_image<T>(records: &[AnnotationRecord], f: impl Fn(usize, &AnnotationRecord, BBox) -> T) -> anyhow::Result<BTreeMap<ImageId, Vec<T>>> {
    let mut out: BTreeMap<ImageId, Vec<T>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let [x, y, w, h] = r.bbox;
        let bbox = BBox::from_xywh(x, y, w, h).with_context(|| format!("annotation {}", r.id))?;
        out.entry(r.image_id).or_default().push(f(i, r, bbox));
    }
    Ok(out)
}

fn pseudo_counts(pseudo: &Path, withheld: &Path, tau: f64) -> anyhow::Result<PrCounts> {
    let labels = by_image(&read_document(pseudo)?.annotations, |i, r, bbox| {
        let score = r.score.unwrap_or(1.0);
        PseudoLabel { category: r.category_id, bbox, score, raw_confidence: score, detection: i }
    })?;
    let truth = by_image(&read_document(withheld)?.annotations, |_, r, bbox| Annotation {
        id: r.id,
        image_id: r.image_id,
        category: r.category_id,
        bbox,
    })?;
    let mut total = PrCounts::default();
    let images: std::collections::BTreeSet<_> = labels.keys().chain(truth.keys()).copied().collect();
    for id in images {
        let p = labels.get(&id).map(Vec::as_slice).unwrap_or_default();
        let t = truth.get(&id).map(Vec::as_slice).unwrap_or_default();
        total += pseudo_pr(p, t, tau);
    }
    Ok(total)
}

pub fn run(args: &Args) -> anyhow::Result<()> {
    if args.bins == 0 {
        bail!("--bins must be positive");
    }
    let rows = read_rows(&args.input)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let raw = reliability(rows.iter().map(|r| (r.p_raw, r.m == 1)), args.bins)?;
    write_report(&raw, &args.out.join("reliability_raw.csv"))?;
    let mut summary = vec![("n".to_string(), rows.len().to_string()), ("ece_raw".into(), raw.ece.to_string())];

    let cal: Option<Vec<(f64, bool)>> = rows.iter().map(|r| r.p_cal.map(|p| (p, r.m == 1))).collect();
    if let Some(cal) = cal {
        let cal = reliability(cal, args.bins)?;
        write_report(&cal, &args.out.join("reliability_cal.csv"))?;
        summary.push(("ece_cal".into(), cal.ece.to_string()));
    }

    if let (Some(p), Some(w)) = (&args.pseudo, &args.withheld) {
        let pr = pseudo_counts(p, w, args.match_iou)?;
        summary.push(("pseudo_precision".into(), pr.precision().to_string()));
        summary.push(("pseudo_recall".into(), pr.recall().to_string()));
        summary.push(("pseudo_matched".into(), pr.matched.to_string()));
        summary.push(("pseudo_labels".into(), pr.pseudo.to_string()));
        summary.push(("withheld".into(), pr.withheld.to_string()));
    }

    let path = args.out.join("summary.csv");
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "metric,value")?;
    for (k, v) in &summary {
        writeln!(w, "{k},{v}")?;
        println!("{k}: {v}");
    }
    w.flush()?;
    Ok(())
}
