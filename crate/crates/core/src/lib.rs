//! Online-calibrated pseudo-labeling for sparsely annotated object detection.
//!
//! The numeric modules ([`geometry`], [`calibration`], [`pseudo_labeling`],
//! [`losses`], [`metrics`]) are generic over a [`Scalar`] (`f32` or `f64`);
//! their types default to `f64`, and the aliases below name both widths.
//! [`dataset`] and [`simulator`] work in `f64`.

pub mod calibration;
pub mod dataset;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod pseudo_labeling;
pub mod scalar;
pub mod simulator;

pub use calibration::{calibrate, fit, CalibrationQueue, CalibrationSample, CalibratorParams, FitError, FitOutcome};
pub use dataset::{Annotation, AnnotationId, CategoryId, Dataset, ImageId, SplitMode, SplitSpec};
pub use geometry::{iou, BBox};
pub use losses::{fiou_weight, focal_loss_neg, FIoUConfig};
pub use metrics::{pseudo_pr, reliability, PrCounts, ReliabilityReport};
pub use pseudo_labeling::{dynamic_threshold, match_max_iou, step, Detection, PipelineConfig, PipelineState, ScheduleConfig};
pub use scalar::Scalar;

pub type BBoxF32 = BBox<f32>;
pub type BBoxF64 = BBox<f64>;
pub type DetectionF32 = Detection<f32>;
pub type DetectionF64 = Detection<f64>;
pub type CalibratorParamsF32 = CalibratorParams<f32>;
pub type CalibratorParamsF64 = CalibratorParams<f64>;
pub type CalibrationQueueF32 = CalibrationQueue<f32>;
pub type CalibrationQueueF64 = CalibrationQueue<f64>;
pub type PipelineConfigF32 = PipelineConfig<f32>;
pub type PipelineConfigF64 = PipelineConfig<f64>;
pub type PipelineStateF32 = PipelineState<f32>;
pub type PipelineStateF64 = PipelineState<f64>;
pub type FIoUConfigF32 = FIoUConfig<f32>;
pub type FIoUConfigF64 = FIoUConfig<f64>;
