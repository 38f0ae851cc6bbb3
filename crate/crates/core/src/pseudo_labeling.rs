//! Pseudo-label selection with an online-calibrated teacher.
//!
//! Each teacher prediction whose raw confidence clears `raw_floor` is routed
//! by its best same-class IoU against the sparse ground truth:
//!
//! * `iou < tau_minus`: a candidate for a missing object. It becomes a pseudo
//!   label when its *calibrated* score exceeds `tau_s`.
//! * `iou > tau_minus`: it overlaps a known object and feeds the calibration
//!   queue with label `iou > tau_plus`.
//!
//! Every `refit_interval` steps the calibrator is refitted on the queue.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{
    CalibrationError, CalibrationQueue, CalibrationSample, CalibratorParams, FitError, FitOutcome, RefitRecord,
};
use crate::dataset::{Annotation, AnnotationId, AnnotationRecord, CategoryId, ImageId};
use crate::geometry::{iou, BBox};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("invalid threshold schedule: {0}")]
    InvalidSchedule(String),
    #[error("epoch {epoch} is past the end of the schedule ({e_plus})")]
    EpochOutOfRange { epoch: i64, e_plus: i64 },
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

/// A scored, classed box predicted by the teacher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection<T: Scalar = f64> {
    category: CategoryId,
    confidence: T,
    bbox: BBox<T>,
}

impl<T: Scalar> Detection<T> {
    pub fn new(category: CategoryId, confidence: T, bbox: BBox<T>) -> Result<Self, CalibrationError> {
        if !(confidence > T::zero() && confidence < T::one()) {
            return Err(CalibrationError::ConfidenceOutOfRange(confidence.to_f64_lossy()));
        }
        Ok(Self { category, confidence, bbox })
    }

    pub fn category(&self) -> CategoryId {
        self.category
    }

    pub fn confidence(&self) -> T {
        self.confidence
    }

    pub fn bbox(&self) -> &BBox<T> {
        &self.bbox
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig<T: Scalar = f64> {
    /// IoU filter separating candidates from queue samples.
    pub tau_minus: T,
    /// Stricter IoU for a queue sample to count as a match.
    pub tau_plus: T,
    /// Calibrated-score threshold for promotion to pseudo label.
    pub tau_s: T,
    /// Predictions at or below this raw confidence are ignored.
    pub raw_floor: T,
    /// Refit the calibrator every this many steps.
    pub refit_interval: u64,
    /// Queue length in samples.
    pub queue_capacity: usize,
}

impl<T: Scalar> Default for PipelineConfig<T> {
    fn default() -> Self {
        Self {
            tau_minus: T::lit(0.6),
            tau_plus: T::lit(0.75),
            tau_s: T::lit(0.7),
            raw_floor: T::lit(0.4),
            refit_interval: 500,
            queue_capacity: 8000,
        }
    }
}

impl<T: Scalar> PipelineConfig<T> {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |field, reason: &str| Err(PipelineError::InvalidConfig { field, reason: reason.into() });
        let (zero, one) = (T::zero(), T::one());
        if !(self.tau_minus > zero && self.tau_minus < one) {
            return bad("tau_minus", "must lie in (0, 1)");
        }
        if !(self.tau_plus > self.tau_minus && self.tau_plus < one) {
            return bad("tau_plus", "must lie in (tau_minus, 1)");
        }
        if !(self.tau_s > zero && self.tau_s < one) {
            return bad("tau_s", "must lie in (0, 1)");
        }
        if !(self.raw_floor >= zero && self.raw_floor < one) {
            return bad("raw_floor", "must lie in [0, 1)");
        }
        if self.refit_interval == 0 {
            return bad("refit_interval", "must be positive");
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity", "must be positive");
        }
        Ok(())
    }
}

/// Largest IoU between `det` and a ground-truth box of the same category,
/// 0 when there is none.
pub fn match_max_iou<T: Scalar>(det: &Detection<T>, gts: &[Annotation<T>]) -> T {
    gts.iter()
        .filter(|g| g.category == det.category)
        .map(|g| iou(&det.bbox, &g.bbox))
        .fold(T::zero(), T::max)
}

/// A teacher prediction promoted to a training target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel<T: Scalar = f64> {
    pub category: CategoryId,
    pub bbox: BBox<T>,
    /// Calibrated score.
    pub score: T,
    pub raw_confidence: T,
    /// Index of the originating detection in the step input.
    pub detection: usize,
}

/// Training targets for one image: the sparse ground truth plus pseudo labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet<T: Scalar = f64> {
    pub ground_truth: Vec<Annotation<T>>,
    pub pseudo: Vec<PseudoLabel<T>>,
}

impl<T: Scalar> LabelSet<T> {
    pub fn len(&self) -> usize {
        self.ground_truth.len() + self.pseudo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All boxes, ground truth first.
    pub fn boxes(&self) -> impl Iterator<Item = &BBox<T>> {
        self.ground_truth.iter().map(|a| &a.bbox).chain(self.pseudo.iter().map(|p| &p.bbox))
    }

    /// Annotation records for the JSON label file. Ground truth keeps its ids;
    /// pseudo labels get consecutive ids from `first_pseudo_id` and carry
    /// `pseudo: true` and their calibrated `score`.
    pub fn to_records(&self, image_id: ImageId, first_pseudo_id: u64) -> Vec<AnnotationRecord> {
        let gt = self.ground_truth.iter().map(|a| AnnotationRecord::from(&a.cast::<f64>()));
        let pseudo = self.pseudo.iter().enumerate().map(|(i, p)| AnnotationRecord {
            id: AnnotationId(first_pseudo_id + i as u64),
            image_id,
            category_id: p.category,
            bbox: p.bbox.cast::<f64>().to_xywh(),
            pseudo: Some(true),
            score: Some(p.score.to_f64_lossy()),
        });
        gt.chain(pseudo).collect()
    }
}

/// What happened to one detection during a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// Raw confidence at or below the floor.
    Ignored,
    /// Low IoU and calibrated score above `tau_s`.
    Pseudo,
    /// Low IoU but calibrated score too low.
    Rejected,
    /// Overlaps ground truth; pushed to the queue with this match label.
    Enqueued { matched: bool },
    /// IoU exactly `tau_minus`: neither branch applies.
    Boundary,
}

/// Calibrator, queue and step counter carried across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineState<T: Scalar = f64> {
    pub queue: CalibrationQueue<T>,
    pub params: CalibratorParams<T>,
    /// Number of completed steps.
    pub iteration: u64,
    pub trajectory: Vec<RefitRecord<T>>,
}

impl<T: Scalar> PipelineState<T> {
    /// Empty queue and identity calibrator.
    pub fn new(cfg: &PipelineConfig<T>) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            queue: CalibrationQueue::new(cfg.queue_capacity)?,
            params: CalibratorParams::identity(),
            iteration: 0,
            trajectory: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RefitOutcome<T: Scalar = f64> {
    Updated(FitOutcome<T>),
    /// The fit failed; the previous parameters were kept.
    Retained(FitError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome<T: Scalar = f64> {
    pub labels: LabelSet<T>,
    /// One entry per input detection.
    pub routes: Vec<Route>,
    /// Present when this step hit the refit interval.
    pub refit: Option<RefitOutcome<T>>,
}

/// Runs one pseudo-labeling step for a single image.
///
/// The step index is `state.iteration + 1`; when it is a multiple of
/// `cfg.refit_interval` the calibrator is refitted after all detections
/// have been routed. A failed refit keeps the current parameters.
pub fn step<T: Scalar>(
    dets: &[Detection<T>],
    gts: &[Annotation<T>],
    state: &mut PipelineState<T>,
    cfg: &PipelineConfig<T>,
) -> Result<StepOutcome<T>, PipelineError> {
    cfg.validate()?;
    let t = state.iteration + 1;
    let mut labels = LabelSet { ground_truth: gts.to_vec(), pseudo: Vec::new() };
    let mut routes = Vec::with_capacity(dets.len());
    let mut samples = Vec::new();

    for (i, det) in dets.iter().enumerate() {
        if det.confidence <= cfg.raw_floor {
            routes.push(Route::Ignored);
            continue;
        }
        let overlap = match_max_iou(det, gts);
        let score = state.params.calibrate_clamped(det.confidence);
        let route = if overlap < cfg.tau_minus {
            if score > cfg.tau_s {
                labels.pseudo.push(PseudoLabel {
                    category: det.category,
                    bbox: det.bbox,
                    score,
                    raw_confidence: det.confidence,
                    detection: i,
                });
                Route::Pseudo
            } else {
                Route::Rejected
            }
        } else if overlap > cfg.tau_minus {
            let matched = overlap > cfg.tau_plus;
            samples.push(CalibrationSample::new(det.confidence, matched)?);
            Route::Enqueued { matched }
        } else {
            Route::Boundary
        };
        routes.push(route);
    }

    // all fallible work is done; commit
    for s in samples {
        state.queue.enqueue(s);
    }
    state.iteration = t;
    let refit = (t % cfg.refit_interval == 0).then(|| match state.queue.fit() {
        Ok(out) => {
            state.params = out.params;
            state.trajectory.push(RefitRecord {
                iteration: t,
                a: out.params.a,
                b: out.params.b,
                nll: out.nll,
                queue_size: state.queue.len(),
            });
            RefitOutcome::Updated(out)
        }
        Err(e) => RefitOutcome::Retained(e),
    });

    Ok(StepOutcome { labels, routes, refit })
}

/// Pseudo labels chosen by a plain raw-score threshold (no calibration),
/// with the same IoU filter and raw-confidence floor as [`step`].
pub fn threshold_select<T: Scalar>(
    dets: &[Detection<T>],
    gts: &[Annotation<T>],
    threshold: T,
    cfg: &PipelineConfig<T>,
) -> Vec<PseudoLabel<T>> {
    dets.iter()
        .enumerate()
        .filter(|(_, d)| d.confidence > cfg.raw_floor && d.confidence > threshold)
        .filter(|(_, d)| match_max_iou(d, gts) < cfg.tau_minus)
        .map(|(i, d)| PseudoLabel {
            category: d.category,
            bbox: d.bbox,
            score: d.confidence,
            raw_confidence: d.confidence,
            detection: i,
        })
        .collect()
}

/// Log-growth threshold schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig<T: Scalar = f64> {
    /// Threshold before and at the first scheduled epoch.
    pub tau0: T,
    /// Epoch after which the threshold starts to rise.
    pub e_minus: i64,
    /// Final epoch; the threshold reaches 1 here.
    pub e_plus: i64,
}

/// `tau0 + (1 - tau0) * ln(e - e_minus) / ln(e_plus - e_minus)` for
/// `e_minus < e <= e_plus`, and `tau0` for `e <= e_minus`.
pub fn dynamic_threshold<T: Scalar>(epoch: i64, s: &ScheduleConfig<T>) -> Result<T, PipelineError> {
    if !(s.tau0 > T::zero() && s.tau0 < T::one()) {
        return Err(PipelineError::InvalidSchedule(format!("tau0 = {} must lie in (0, 1)", s.tau0)));
    }
    if s.e_plus - s.e_minus < 2 {
        return Err(PipelineError::InvalidSchedule(format!(
            "e_plus - e_minus = {} must be at least 2",
            s.e_plus - s.e_minus
        )));
    }
    if epoch > s.e_plus {
        return Err(PipelineError::EpochOutOfRange { epoch, e_plus: s.e_plus });
    }
    if epoch <= s.e_minus {
        return Ok(s.tau0);
    }
    let num = T::lit((epoch - s.e_minus) as f64).ln();
    let den = T::lit((s.e_plus - s.e_minus) as f64).ln();
    Ok(s.tau0 + (T::one() - s.tau0) * num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn gt(id: u64, c: u64, b: BBox) -> Annotation {
        Annotation { id: AnnotationId(id), image_id: ImageId(1), category: CategoryId(c), bbox: b }
    }

    fn det(c: u64, p: f64, b: BBox) -> Detection {
        Detection::new(CategoryId(c), p, b).unwrap()
    }

    #[test]
    fn max_iou_respects_class() {
        let d = det(1, 0.9, bx(0., 0., 10., 10.));
        assert_eq!(match_max_iou(&d, &[gt(1, 1, bx(0., 0., 10., 10.))]), 1.0);
        assert_eq!(match_max_iou(&d, &[gt(1, 2, bx(0., 0., 10., 10.))]), 0.0);
        assert_eq!(match_max_iou(&d, &[]), 0.0);
        let v = match_max_iou(&d, &[gt(1, 1, bx(0., 0., 10., 15.)), gt(2, 1, bx(20., 20., 30., 30.))]);
        assert!((v - 100.0 / 150.0).abs() < 1e-15);
    }

    #[test]
    fn hand_traced_step() {
        let cfg = PipelineConfig::default();
        let mut state = PipelineState::new(&cfg).unwrap();
        let gts = [gt(1, 1, bx(0., 0., 10., 10.))];
        let dets = [
            det(1, 0.9, bx(0., 0., 10., 10.)),
            det(1, 0.8, bx(20., 20., 30., 30.)),
            det(1, 0.5, bx(40., 40., 50., 50.)),
            det(1, 0.9, bx(0., 0., 10., 15.)),
        ];
        let out = step(&dets, &gts, &mut state, &cfg).unwrap();
        assert_eq!(
            out.routes,
            vec![Route::Enqueued { matched: true }, Route::Pseudo, Route::Rejected, Route::Enqueued { matched: false }]
        );
        assert_eq!(out.labels.ground_truth, gts.to_vec());
        assert_eq!(out.labels.pseudo.len(), 1);
        assert_eq!(out.labels.pseudo[0].bbox, bx(20., 20., 30., 30.));
        assert_eq!(out.labels.pseudo[0].score, 0.8);
        let q: Vec<_> = state.queue.iter().map(|s| (s.p_hat(), s.matched())).collect();
        assert_eq!(q, vec![(0.9, true), (0.9, false)]);
        assert_eq!(state.iteration, 1);
        assert!(out.refit.is_none());
    }

    #[test]
    fn empty_step_only_advances_iteration() {
        let cfg = PipelineConfig::default();
        let mut state = PipelineState::new(&cfg).unwrap();
        let before = state.clone();
        let gts = [gt(1, 1, bx(0., 0., 1., 1.))];
        let out = step(&[], &gts, &mut state, &cfg).unwrap();
        assert_eq!(out.labels.ground_truth, gts.to_vec());
        assert!(out.labels.pseudo.is_empty());
        assert_eq!(state.iteration, 1);
        assert_eq!(PipelineState { iteration: 0, ..state }, before);
    }

    #[test]
    fn below_floor_is_ignored() {
        let cfg = PipelineConfig::default();
        let mut state = PipelineState::new(&cfg).unwrap();
        let gts = [gt(1, 1, bx(0., 0., 10., 10.))];
        let dets = [det(1, 0.3, bx(0., 0., 10., 10.)), det(1, 0.3, bx(50., 50., 60., 60.))];
        // an aggressive calibrator would lift 0.3 above tau_s; still ignored
        state.params = CalibratorParams::new(1.0, 5.0);
        let out = step(&dets, &gts, &mut state, &cfg).unwrap();
        assert_eq!(out.routes, vec![Route::Ignored, Route::Ignored]);
        assert!(state.queue.is_empty());
    }

    #[test]
    fn boundary_iou_takes_neither_branch() {
        // gt 10x10, det 10x6 inside it: IoU = 60/100 = tau_minus exactly
        let cfg = PipelineConfig::default();
        let mut state = PipelineState::new(&cfg).unwrap();
        let gts = [gt(1, 1, bx(0., 0., 10., 10.))];
        let d = det(1, 0.95, bx(0., 0., 10., 6.));
        assert_eq!(match_max_iou(&d, &gts), 0.6);
        let out = step(&[d], &gts, &mut state, &cfg).unwrap();
        assert_eq!(out.routes, vec![Route::Boundary]);
        assert!(out.labels.pseudo.is_empty() && state.queue.is_empty());
    }

    #[test]
    fn refit_on_interval_and_retain_on_failure() {
        let cfg = PipelineConfig { refit_interval: 2, ..PipelineConfig::default() };
        let mut state = PipelineState::new(&cfg).unwrap();
        let gts = [gt(1, 1, bx(0., 0., 10., 10.))];
        state.params = CalibratorParams::new(0.7, 0.1);
        step(&[], &gts, &mut state, &cfg).unwrap();
        let out = step(&[det(1, 0.9, bx(0., 0., 10., 10.))], &gts, &mut state, &cfg).unwrap();
        assert!(matches!(out.refit, Some(RefitOutcome::Retained(FitError::Degenerate { .. }))));
        assert_eq!(state.params, CalibratorParams::new(0.7, 0.1));
        assert!(state.trajectory.is_empty());

        // matched at high confidence, unmatched at lower confidence
        let mut dets = Vec::new();
        for (k, &p) in [0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.65, 0.6, 0.55, 0.5].iter().enumerate() {
            let b = if [0, 1, 2, 5].contains(&k) { bx(0., 0., 10., 10.) } else { bx(0., 0., 10., 14.) };
            dets.push(det(1, p, b));
        }
        step(&dets, &gts, &mut state, &cfg).unwrap();
        let out = step(&dets, &gts, &mut state, &cfg).unwrap();
        assert!(matches!(out.refit, Some(RefitOutcome::Updated(_))), "{:?}", out.refit);
        assert_eq!(state.trajectory.len(), 1);
        assert_eq!(state.trajectory[0].iteration, 4);
        assert_eq!(state.trajectory[0].queue_size, state.queue.len());
    }

    #[test]
    fn invalid_config_leaves_state_untouched() {
        let cfg = PipelineConfig::default();
        let mut state = PipelineState::new(&cfg).unwrap();
        let before = state.clone();
        let bad = PipelineConfig { tau_plus: 0.5, ..cfg };
        let err = step(&[det(1, 0.9, bx(0., 0., 1., 1.))], &[], &mut state, &bad).unwrap_err();
        assert!(matches!(err, PipelineError::InvalidConfig { field: "tau_plus", .. }));
        assert_eq!(state, before);
        assert!(PipelineConfig { refit_interval: 0, ..cfg }.validate().is_err());
        assert!(PipelineConfig { raw_floor: 1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn records_flag_pseudo_labels() {
        let labels = LabelSet {
            ground_truth: vec![gt(5, 1, bx(0., 0., 2., 2.))],
            pseudo: vec![PseudoLabel { category: CategoryId(2), bbox: bx(1., 1., 4., 5.), score: 0.8, raw_confidence: 0.9, detection: 0 }],
        };
        let recs = labels.to_records(ImageId(1), 100);
        assert_eq!(recs.len(), 2);
        assert!(!recs[0].is_pseudo() && recs[0].id == AnnotationId(5));
        assert!(recs[1].is_pseudo());
        assert_eq!((recs[1].id, recs[1].bbox, recs[1].score), (AnnotationId(100), [1., 1., 3., 4.], Some(0.8)));
    }

    #[test]
    fn fixed_threshold_baseline() {
        let cfg = PipelineConfig::default();
        let gts = [gt(1, 1, bx(0., 0., 10., 10.))];
        let dets = [det(1, 0.55, bx(20., 20., 30., 30.)), det(1, 0.45, bx(40., 40., 50., 50.)), det(1, 0.9, bx(0., 0., 10., 10.))];
        let sel = threshold_select(&dets, &gts, 0.5, &cfg);
        assert_eq!(sel.iter().map(|p| p.detection).collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn schedule_values() {
        let s = ScheduleConfig::<f64> { tau0: 0.5, e_minus: 0, e_plus: 10 };
        assert_eq!(dynamic_threshold(1, &s).unwrap(), 0.5);
        assert!((dynamic_threshold(10, &s).unwrap() - 1.0).abs() < 1e-15);
        assert!((dynamic_threshold(5, &s).unwrap() - 0.849_485_002_168_009_4).abs() < 1e-14);
        assert_eq!(dynamic_threshold(-3, &s).unwrap(), 0.5);
        assert!(matches!(dynamic_threshold(11, &s), Err(PipelineError::EpochOutOfRange { .. })));
        let short = ScheduleConfig::<f64> { tau0: 0.5, e_minus: 3, e_plus: 4 };
        assert!(matches!(dynamic_threshold(4, &short), Err(PipelineError::InvalidSchedule(_))));
    }

    proptest! {
        #[test]
        fn schedule_non_decreasing(tau0 in 0.01..0.99f64, e_minus in -5i64..20, span in 2i64..40) {
            let s = ScheduleConfig { tau0, e_minus, e_plus: e_minus + span };
            let mut prev = tau0;
            for e in (e_minus + 1)..=(e_minus + span) {
                let v = dynamic_threshold(e, &s).unwrap();
                prop_assert!(v >= prev && v <= 1.0 + 1e-12 && v >= tau0);
                prev = v;
            }
        }
    }
}
