//! Synthetic scenes, a parametric miscalibrated detector and the training
//! loop that drives the pseudo-labeling pipeline over them.
//!
//! Each emitted detection has a hidden match probability `q`. It is a true
//! match with probability `q`; a match is placed on its object with only box
//! jitter, a miss is shifted off the object into a mid-IoU band. The raw
//! confidence the pipeline sees is `sigmoid(warp_a * logit(q) + warp_b)`, so
//! the ideal calibrator is the inverse warp. The geometric match label
//! against the full ground truth is kept in a hidden channel that only the
//! evaluation code reads.
//!
//! All randomness is ChaCha8 keyed by the config seed. Scene generation,
//! detector initialisation and every iteration use their own stream, so
//! results do not depend on evaluation order.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibratorParams, FitError, RefitRecord};
use crate::dataset::{
    sparsify, Annotation, AnnotationId, Category, CategoryId, Dataset, DatasetError, ImageId, ImageInfo, SplitMode,
    SplitSpec,
};
use crate::geometry::{iou, BBox};
use crate::metrics::{pseudo_pr, reliability, PrCounts, ReliabilityReport};
use crate::pseudo_labeling::{step, Detection, PipelineConfig, PipelineError, PipelineState, RefitOutcome, Route};
use crate::scalar::{logit, sigmoid};

/// Quality never leaves this band under drift.
pub const QUALITY_BOUNDS: (f64, f64) = (0.05, 0.98);

const STREAM_SCENES: u64 = 0;
const STREAM_DETECTOR_INIT: u64 = u64::MAX;
const STREAM_SPLIT: u64 = u64::MAX - 1;
const PLACEMENT_ATTEMPTS: usize = 50;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("cannot pack {objects} objects of at least {min_area:.1} px^2 into a {width}x{height} image")]
    InfeasiblePacking { objects: usize, min_area: f64, width: f64, height: f64 },
    #[error("detector state length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("iteration {iteration} failed: {source}")]
    Iteration {
        iteration: u64,
        #[source]
        source: PipelineError,
    },
}

/// Sparse-annotation protocol applied to the generated scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSplit {
    pub mode: SplitMode,
    #[serde(default)]
    pub percent: u32,
    /// Derived from the simulator seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n_images: usize,
    /// Inclusive range of objects per image.
    pub objects_per_image: [usize; 2],
    pub n_classes: usize,
    /// `[width, height]`
    pub image_size: [f64; 2],
    /// Object side length as a fraction of the image side.
    pub box_scale: [f64; 2],
    /// Slope of the true logit-domain miscalibration.
    pub warp_a: f64,
    /// Intercept of the true logit-domain miscalibration.
    pub warp_b: f64,
    /// Range the initial per-class quality is drawn from.
    pub quality: [f64; 2],
    /// Std-dev of per-detection noise around the class quality, in logit units.
    pub score_noise: f64,
    /// Per-iteration change of student quality (even classes up, odd down).
    pub drift_rate: f64,
    /// Expected background detections per image.
    pub false_positive_rate: f64,
    /// Range of the hidden match probability of background detections.
    pub false_positive_q: [f64; 2],
    /// Corner jitter std-dev as a fraction of the box side.
    pub jitter_sigma: f64,
    /// IoU band for detections that miss their object.
    pub miss_iou: [f64; 2],
    /// IoU above which a detection counts as a true match.
    pub match_iou: f64,
    pub ema_momentum: f64,
    pub split: SimSplit,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_images: 500,
            objects_per_image: [2, 8],
            n_classes: 5,
            image_size: [640.0, 480.0],
            box_scale: [0.08, 0.25],
            warp_a: 2.5,
            warp_b: -1.0,
            quality: [0.8, 0.82],
            score_noise: 0.15,
            drift_rate: 0.0,
            false_positive_rate: 0.05,
            false_positive_q: [0.001, 0.02],
            jitter_sigma: 0.01,
            miss_iou: [0.62, 0.72],
            match_iou: 0.75,
            ema_momentum: 0.99,
            split: SimSplit { mode: SplitMode::PerClass, percent: 50, seed: None },
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        fn bad(field: &'static str, reason: &str) -> Result<(), SimError> {
            Err(SimError::InvalidConfig { field, reason: reason.into() })
        }
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if self.n_images == 0 {
            return bad("n_images", "must be positive");
        }
        let [lo, hi] = self.objects_per_image;
        if lo == 0 || lo > hi {
            return bad("objects_per_image", "must be [min, max] with 1 <= min <= max");
        }
        if self.n_classes == 0 {
            return bad("n_classes", "must be positive");
        }
        if !self.image_size.iter().all(|v| v.is_finite() && *v > 0.0) {
            return bad("image_size", "must be positive and finite");
        }
        let [s0, s1] = self.box_scale;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return bad("box_scale", "must satisfy 0 < min <= max <= 1");
        }
        if !(self.warp_a > 0.0 && self.warp_a.is_finite()) {
            return bad("warp_a", "must be positive and finite");
        }
        if !self.warp_b.is_finite() {
            return bad("warp_b", "must be finite");
        }
        let [q0, q1] = self.quality;
        if !(unit(q0) && unit(q1) && q0 <= q1) {
            return bad("quality", "must be [min, max] inside (0, 1)");
        }
        if !(self.score_noise >= 0.0 && self.score_noise.is_finite()) {
            return bad("score_noise", "must be non-negative");
        }
        if !self.drift_rate.is_finite() {
            return bad("drift_rate", "must be finite");
        }
        if !(self.false_positive_rate >= 0.0 && self.false_positive_rate.is_finite()) {
            return bad("false_positive_rate", "must be non-negative");
        }
        let [f0, f1] = self.false_positive_q;
        if !(unit(f0) && unit(f1) && f0 <= f1) {
            return bad("false_positive_q", "must be [min, max] inside (0, 1)");
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return bad("jitter_sigma", "must be non-negative");
        }
        let [m0, m1] = self.miss_iou;
        if !(unit(m0) && unit(m1) && m0 <= m1 && m1 < self.match_iou) {
            return bad("miss_iou", "must be [min, max] inside (0, match_iou)");
        }
        if !unit(self.match_iou) {
            return bad("match_iou", "must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return bad("ema_momentum", "must lie in [0, 1]");
        }
        if self.split.percent > 100 {
            return bad("split.percent", "must lie in [0, 100]");
        }
        Ok(())
    }

    /// The split protocol with its seed resolved. Without an explicit split
    /// seed one is drawn from a dedicated stream of the simulator seed.
    pub fn split_spec(&self) -> SplitSpec {
        let seed = self.split.seed.unwrap_or_else(|| self.rng(STREAM_SPLIT).random());
        SplitSpec { mode: self.split.mode, percent: self.split.percent, seed }
    }

    /// Raw confidence the detector reports for hidden match probability `q`.
    pub fn warp(&self, q: f64) -> f64 {
        sigmoid(self.warp_a * logit(q) + self.warp_b)
    }

    /// The calibrator that exactly undoes [`warp`](Self::warp).
    pub fn ideal_calibrator(&self) -> CalibratorParams {
        CalibratorParams::new(1.0 / self.warp_a, -self.warp_b / self.warp_a)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Per-class detector quality in `(0, 1)`; stands in for network weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorState {
    pub quality: Vec<f64>,
}

impl DetectorState {
    /// Quality drawn uniformly from `cfg.quality` per class.
    pub fn initial(cfg: &SimConfig) -> Self {
        let mut rng = cfg.rng(STREAM_DETECTOR_INIT);
        let [lo, hi] = cfg.quality;
        Self { quality: (0..cfg.n_classes).map(|_| if lo < hi { rng.random_range(lo..=hi) } else { lo }).collect() }
    }

    /// Moves even classes up and odd classes down by `rate`, clamped to
    /// [`QUALITY_BOUNDS`].
    pub fn drift(&mut self, rate: f64) {
        for (c, q) in self.quality.iter_mut().enumerate() {
            let dir = if c % 2 == 0 { 1.0 } else { -1.0 };
            *q = (*q + dir * rate).clamp(QUALITY_BOUNDS.0, QUALITY_BOUNDS.1);
        }
    }

    fn of(&self, category: CategoryId) -> f64 {
        self.quality[(category.0 as usize - 1) % self.quality.len()]
    }
}

/// `momentum * teacher + (1 - momentum) * student`, elementwise.
pub fn ema_update(teacher: &DetectorState, student: &DetectorState, momentum: f64) -> Result<DetectorState, SimError> {
    if teacher.quality.len() != student.quality.len() {
        return Err(SimError::LengthMismatch { left: teacher.quality.len(), right: student.quality.len() });
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(SimError::InvalidConfig { field: "ema_momentum", reason: "must lie in [0, 1]".into() });
    }
    let quality = teacher
        .quality
        .iter()
        .zip(&student.quality)
        .map(|(t, s)| momentum * t + (1.0 - momentum) * s)
        .collect();
    Ok(DetectorState { quality })
}

/// Generates fully annotated scenes. Objects are placed without overlap
/// when a free spot is found within a bounded number of attempts.
pub fn generate_scenes(cfg: &SimConfig) -> Result<Dataset, SimError> {
    cfg.validate()?;
    let [w, h] = cfg.image_size;
    let [s0, s1] = cfg.box_scale;
    let [lo, hi] = cfg.objects_per_image;
    let min_area = s0 * w * s0 * h;
    if hi as f64 * min_area > w * h {
        return Err(SimError::InfeasiblePacking { objects: hi, min_area, width: w, height: h });
    }

    let mut rng = cfg.rng(STREAM_SCENES);
    let images: Vec<ImageInfo> =
        (1..=cfg.n_images as u64).map(|id| ImageInfo { id: ImageId(id), width: w, height: h }).collect();
    let categories =
        (1..=cfg.n_classes as u64).map(|c| Category { id: CategoryId(c), name: format!("class_{c}") }).collect();
    let mut annotations = Vec::new();
    for img in &images {
        let k = rng.random_range(lo..=hi);
        let mut placed: Vec<BBox> = Vec::with_capacity(k);
        for _ in 0..k {
            let category = CategoryId(rng.random_range(1..=cfg.n_classes as u64));
            let mut candidate = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let bw = rng.random_range(s0..=s1) * w;
                let bh = rng.random_range(s0..=s1) * h;
                let x = rng.random_range(0.0..=(w - bw));
                let y = rng.random_range(0.0..=(h - bh));
                let b = BBox::new(x, y, x + bw, y + bh).expect("positive extents");
                let free = placed.iter().all(|p| p.intersection_area(&b) == 0.0);
                candidate = Some(b);
                if free {
                    break;
                }
            }
            let bbox = candidate.expect("at least one attempt");
            placed.push(bbox);
            annotations.push(Annotation {
                id: AnnotationId(annotations.len() as u64 + 1),
                image_id: img.id,
                category,
                bbox,
            });
        }
    }
    Ok(Dataset::new(images, categories, annotations)?)
}

/// Oracle-only truth about one emitted detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HiddenTruth {
    /// Match probability the score was derived from.
    pub q: f64,
    /// Same-class IoU with the full ground truth exceeds `match_iou`.
    pub matched: bool,
    /// Best same-class IoU with the full ground truth.
    pub iou: f64,
    /// Object the detection was generated from; `None` for background.
    pub source: Option<AnnotationId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDetections {
    pub detections: Vec<Detection>,
    /// Parallel to `detections`.
    pub hidden: Vec<HiddenTruth>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn jitter(b: &BBox, sigma: f64, rng: &mut ChaCha8Rng) -> [f64; 4] {
    let [x1, y1, x2, y2] = b.corners();
    if sigma == 0.0 {
        return [x1, y1, x2, y2];
    }
    let (bw, bh) = (b.width(), b.height());
    [
        x1 + sigma * bw * normal(rng),
        y1 + sigma * bh * normal(rng),
        x2 + sigma * bw * normal(rng),
        y2 + sigma * bh * normal(rng),
    ]
}

/// Box from possibly unordered corners, clipped to the image.
fn settle(c: [f64; 4], w: f64, h: f64) -> BBox {
    let b = BBox::new(c[0].min(c[2]), c[1].min(c[3]), c[0].max(c[2]), c[1].max(c[3])).expect("finite corners");
    b.clamp_to(w, h)
}

/// Shifts `b` along one axis so its IoU with `b` is `target`, preferring
/// directions that keep the box inside a `w` x `h` image.
fn shifted(b: &BBox, target: f64, w: f64, h: f64, rng: &mut ChaCha8Rng) -> [f64; 4] {
    // a 1-D shift by fraction f of the side gives IoU (1 - f) / (1 + f)
    let f = (1.0 - target) / (1.0 + target);
    let [x1, y1, x2, y2] = b.corners();
    let moves = [(f * b.width(), 0.0), (-f * b.width(), 0.0), (0.0, f * b.height()), (0.0, -f * b.height())];
    let inside = |&(dx, dy): &(f64, f64)| x1 + dx >= 0.0 && x2 + dx <= w && y1 + dy >= 0.0 && y2 + dy <= h;
    let fitting: Vec<_> = moves.iter().copied().filter(inside).collect();
    let (dx, dy) = if fitting.is_empty() {
        moves[rng.random_range(0..4)]
    } else {
        fitting[rng.random_range(0..fitting.len())]
    };
    [x1 + dx, y1 + dy, x2 + dx, y2 + dy]
}

fn clamp_open(p: f64) -> f64 {
    p.clamp(1e-9, 1.0 - 1e-9)
}

/// Emits detections for one image given its full ground truth.
pub fn simulate_detector(
    image: &ImageInfo,
    ground_truth: &[Annotation],
    state: &DetectorState,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> SimulatedDetections {
    let (w, h) = (image.width, image.height);
    let mut out = SimulatedDetections { detections: Vec::new(), hidden: Vec::new() };
    let mut emit = |category: CategoryId, q: f64, bbox: BBox, source: Option<AnnotationId>| {
        let best = ground_truth
            .iter()
            .filter(|g| g.category == category)
            .map(|g| iou(&bbox, &g.bbox))
            .fold(0.0, f64::max);
        let raw = clamp_open(cfg.warp(q));
        let det = Detection::new(category, raw, bbox).expect("confidence clamped into (0, 1)");
        out.detections.push(det);
        out.hidden.push(HiddenTruth { q, matched: best > cfg.match_iou, iou: best, source });
    };

    for gt in ground_truth {
        let quality = state.of(gt.category);
        if !rng.random_bool(quality.clamp(0.0, 1.0)) {
            continue;
        }
        let q = clamp_open(sigmoid(logit(quality) + cfg.score_noise * normal(rng)));
        let corners = if rng.random_bool(q) {
            jitter(&gt.bbox, cfg.jitter_sigma, rng)
        } else {
            let [m0, m1] = cfg.miss_iou;
            let target = if m0 < m1 { rng.random_range(m0..=m1) } else { m0 };
            let moved = settle(shifted(&gt.bbox, target, w, h, rng), f64::INFINITY, f64::INFINITY);
            jitter(&moved, cfg.jitter_sigma, rng)
        };
        emit(gt.category, q, settle(corners, w, h), Some(gt.id));
    }

    let n_fp = if cfg.false_positive_rate > 0.0 {
        let draw: f64 = Poisson::new(cfg.false_positive_rate).expect("positive rate").sample(rng);
        draw as usize
    } else {
        0
    };
    let [s0, s1] = cfg.box_scale;
    let [f0, f1] = cfg.false_positive_q;
    for _ in 0..n_fp {
        let category = CategoryId(rng.random_range(1..=cfg.n_classes as u64));
        let bw = rng.random_range(s0..=s1) * w;
        let bh = rng.random_range(s0..=s1) * h;
        let x = rng.random_range(0.0..=(w - bw));
        let y = rng.random_range(0.0..=(h - bh));
        let q = if f0 < f1 { rng.random_range(f0..=f1) } else { f0 };
        emit(category, q, BBox::new(x, y, x + bw, y + bh).expect("positive extents"), None);
    }
    out
}

/// Loop length, checkpointing and evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub iterations: u64,
    pub checkpoint_every: u64,
    /// Trailing emissions used for windowed ECE.
    pub window: usize,
    pub n_bins: usize,
    /// IoU for matching pseudo labels to withheld annotations.
    pub tau_match: f64,
    pub keep_reliability: bool,
    pub keep_predictions: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            checkpoint_every: 500,
            window: 5_000,
            n_bins: crate::metrics::DEFAULT_BINS,
            tau_match: crate::metrics::DEFAULT_MATCH_IOU,
            keep_reliability: false,
            keep_predictions: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |field, reason: &str| Err(SimError::InvalidConfig { field, reason: reason.into() });
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be positive");
        }
        if self.window == 0 {
            return bad("window", "must be positive");
        }
        if self.n_bins == 0 {
            return bad("n_bins", "must be positive");
        }
        if !(self.tau_match > 0.0 && self.tau_match < 1.0) {
            return bad("tau_match", "must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Checkpoint {
    pub checkpoint: usize,
    pub iteration: u64,
    /// Windowed ECE of raw confidences against hidden match labels.
    pub ece_raw: Option<f64>,
    /// Windowed ECE of the same emissions under the current calibrator.
    pub ece_cal: Option<f64>,
    pub a: f64,
    pub b: f64,
    pub queue_size: usize,
    /// Against withheld annotations, over iterations since the last checkpoint.
    pub pseudo_precision: f64,
    pub pseudo_recall: f64,
    pub pseudo_labels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointReliability {
    pub checkpoint: usize,
    pub raw: ReliabilityReport,
    pub calibrated: ReliabilityReport,
}

/// One considered-or-not emission, for offline evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRow {
    pub iteration: u64,
    pub p_raw: f64,
    /// Score under the calibrator in force when the detection was routed.
    pub p_cal: f64,
    pub matched: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub initial_params: CalibratorParams,
    pub queue_capacity: usize,
    pub checkpoints: Vec<Checkpoint>,
    pub trajectory: Vec<RefitRecord>,
    /// Refits whose parameters were retained, with the fit error.
    pub refit_failures: Vec<(u64, FitError)>,
    /// Queue samples whose IoU-rule label agrees with the hidden label.
    pub queue_label_agreement: usize,
    pub queue_samples_total: usize,
    pub images_seen: u64,
    pub reliability: Vec<CheckpointReliability>,
    pub predictions: Vec<PredictionRow>,
}

impl RunReport {
    /// Average queue samples contributed per image, i.e. how many images
    /// of predictions the queue capacity corresponds to is
    /// `queue_capacity / samples_per_image`.
    pub fn samples_per_image(&self) -> f64 {
        if self.images_seen == 0 {
            0.0
        } else {
            self.queue_samples_total as f64 / self.images_seen as f64
        }
    }

    pub fn queue_label_agreement_rate(&self) -> f64 {
        if self.queue_samples_total == 0 {
            1.0
        } else {
            self.queue_label_agreement as f64 / self.queue_samples_total as f64
        }
    }

    /// `checkpoint,iteration,ece_raw,ece_cal,a,b,queue_size,pseudo_precision,pseudo_recall`
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "checkpoint,iteration,ece_raw,ece_cal,a,b,queue_size,pseudo_precision,pseudo_recall")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.checkpoints {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                c.checkpoint,
                c.iteration,
                opt(c.ece_raw),
                opt(c.ece_cal),
                c.a,
                c.b,
                c.queue_size,
                c.pseudo_precision,
                c.pseudo_recall
            )?;
        }
        Ok(())
    }

    /// `iteration,p_raw,p_cal,m`
    pub fn write_predictions_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "iteration,p_raw,p_cal,m")?;
        for r in &self.predictions {
            writeln!(w, "{},{},{},{}", r.iteration, r.p_raw, r.p_cal, u8::from(r.matched))?;
        }
        Ok(())
    }
}

/// Runs the pseudo-labeling pipeline for `run.iterations` steps over
/// generated scenes with sparse annotations.
///
/// Each iteration samples one image, simulates teacher detections on its
/// full ground truth, runs [`step`] against the sparse annotations, then
/// drifts the student and EMA-updates the teacher. Checkpoints record
/// windowed ECE (raw and under the current calibrator) against hidden
/// match labels, and pseudo-label precision/recall against the withheld
/// annotations.
pub fn run_training_loop(sim: &SimConfig, pipe: &PipelineConfig, run: &RunConfig) -> Result<RunReport, SimError> {
    sim.validate()?;
    pipe.validate()?;
    run.validate()?;

    let full = generate_scenes(sim)?;
    let (sparse, deletions) = sparsify(&full, &sim.split_spec())?;
    let deleted: HashSet<AnnotationId> = deletions.deleted.iter().copied().collect();
    let full_by_image = full.annotations_by_image();
    let sparse_by_image = sparse.annotations_by_image();
    let withheld_by_image: BTreeMap<ImageId, Vec<Annotation>> = full_by_image
        .iter()
        .map(|(id, v)| (*id, v.iter().filter(|a| deleted.contains(&a.id)).copied().collect()))
        .collect();
    let images = full.images();

    let mut state = PipelineState::new(pipe)?;
    let mut student = DetectorState::initial(sim);
    let mut teacher = student.clone();

    let mut report = RunReport {
        initial_params: state.params,
        queue_capacity: pipe.queue_capacity,
        checkpoints: Vec::new(),
        trajectory: Vec::new(),
        refit_failures: Vec::new(),
        queue_label_agreement: 0,
        queue_samples_total: 0,
        images_seen: 0,
        reliability: Vec::new(),
        predictions: Vec::new(),
    };
    let mut window: VecDeque<(f64, bool)> = VecDeque::with_capacity(run.window);
    let mut pr = PrCounts::default();

    for t in 1..=run.iterations {
        let mut rng = sim.rng(t);
        let image = &images[rng.random_range(0..images.len())];
        let sim_dets = simulate_detector(image, &full_by_image[&image.id], &teacher, sim, &mut rng);
        let params_before = state.params;
        let out = step(&sim_dets.detections, &sparse_by_image[&image.id], &mut state, pipe)
            .map_err(|source| SimError::Iteration { iteration: t, source })?;
        report.images_seen += 1;

        for (route, hidden) in out.routes.iter().zip(&sim_dets.hidden) {
            if let Route::Enqueued { matched } = route {
                report.queue_samples_total += 1;
                if *matched == hidden.matched {
                    report.queue_label_agreement += 1;
                }
            }
        }
        if let Some(RefitOutcome::Retained(e)) = out.refit {
            report.refit_failures.push((t, e));
        }
        pr += pseudo_pr(&out.labels.pseudo, &withheld_by_image[&image.id], run.tau_match);

        for (det, hidden) in sim_dets.detections.iter().zip(&sim_dets.hidden) {
            if window.len() == run.window {
                window.pop_front();
            }
            window.push_back((det.confidence(), hidden.matched));
            if run.keep_predictions {
                report.predictions.push(PredictionRow {
                    iteration: t,
                    p_raw: det.confidence(),
                    p_cal: params_before.calibrate_clamped(det.confidence()),
                    matched: hidden.matched,
                });
            }
        }

        student.drift(sim.drift_rate);
        teacher = ema_update(&teacher, &student, sim.ema_momentum)?;

        if t % run.checkpoint_every == 0 {
            let index = report.checkpoints.len();
            let params = state.params;
            let raw = reliability(window.iter().copied(), run.n_bins).ok();
            let cal = reliability(window.iter().map(|&(p, m)| (params.calibrate_clamped(p), m)), run.n_bins).ok();
            report.checkpoints.push(Checkpoint {
                checkpoint: index,
                iteration: t,
                ece_raw: raw.as_ref().map(|r| r.ece),
                ece_cal: cal.as_ref().map(|r| r.ece),
                a: params.a,
                b: params.b,
                queue_size: state.queue.len(),
                pseudo_precision: pr.precision(),
                pseudo_recall: pr.recall(),
                pseudo_labels: pr.pseudo,
            });
            if run.keep_reliability {
                if let (Some(raw), Some(calibrated)) = (raw, cal) {
                    report.reliability.push(CheckpointReliability { checkpoint: index, raw, calibrated });
                }
            }
            pr = PrCounts::default();
        }
    }
    report.trajectory = state.trajectory;
    Ok(report)
}
