//! Reliability diagrams, expected calibration error and pseudo-label
//! precision/recall.

use std::io::{self, Write};
use std::ops::{Add, AddAssign};

use thiserror::Error;

use crate::dataset::Annotation;
use crate::geometry::iou;
use crate::pseudo_labeling::PseudoLabel;
use crate::scalar::Scalar;

pub const DEFAULT_BINS: usize = 15;
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("bin count must be positive")]
    ZeroBins,
    #[error("confidence {0} is outside [0, 1]")]
    ConfidenceOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReliabilityBin<T: Scalar = f64> {
    pub lower: T,
    pub upper: T,
    pub count: usize,
    /// `None` for empty bins.
    pub mean_confidence: Option<T>,
    /// Fraction of matched samples; `None` for empty bins.
    pub precision: Option<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityReport<T: Scalar = f64> {
    pub bins: Vec<ReliabilityBin<T>>,
    pub ece: T,
    pub total: usize,
}

impl<T: Scalar> ReliabilityReport<T> {
    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    /// Largest per-bin gap between mean confidence and precision.
    pub fn max_gap(&self) -> T {
        self.bins
            .iter()
            .filter_map(|b| Some((b.mean_confidence? - b.precision?).abs()))
            .fold(T::zero(), T::max)
    }

    /// `bin_lo,bin_hi,count,mean_conf,precision` rows followed by an
    /// `ece,<value>` line. Empty bins leave the mean and precision blank.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "bin_lo,bin_hi,count,mean_conf,precision")?;
        let opt = |v: Option<T>| v.map(|x| x.to_string()).unwrap_or_default();
        for b in &self.bins {
            writeln!(w, "{},{},{},{},{}", b.lower, b.upper, b.count, opt(b.mean_confidence), opt(b.precision))?;
        }
        writeln!(w, "ece,{}", self.ece)
    }
}

/// Bins `(confidence, matched)` pairs into `n_bins` equal-width intervals
/// over `[0, 1]` and computes the expected calibration error.
///
/// A confidence `p` goes to bin `floor(p * n_bins)`, with `p = 1` in the
/// last bin.
pub fn reliability<T: Scalar>(
    samples: impl IntoIterator<Item = (T, bool)>,
    n_bins: usize,
) -> Result<ReliabilityReport<T>, MetricsError> {
    if n_bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    let nb = T::from_count(n_bins);
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![T::zero(); n_bins];
    let mut hit_sum = vec![0usize; n_bins];
    for (p, matched) in samples {
        if !(p >= T::zero() && p <= T::one()) {
            return Err(MetricsError::ConfidenceOutOfRange(p.to_f64_lossy()));
        }
        let b = (p * nb).floor().to_usize().unwrap_or(0).min(n_bins - 1);
        count[b] += 1;
        conf_sum[b] = conf_sum[b] + p;
        hit_sum[b] += usize::from(matched);
    }
    let total: usize = count.iter().sum();
    if total == 0 {
        return Err(MetricsError::Empty);
    }

    let mut ece = T::zero();
    let bins = (0..n_bins)
        .map(|b| {
            let n = count[b];
            let (mean_confidence, precision) = if n == 0 {
                (None, None)
            } else {
                let nn = T::from_count(n);
                // weight n/N times |mean gap| equals |sum gap| / N
                ece = ece + (conf_sum[b] - T::from_count(hit_sum[b])).abs();
                (Some(conf_sum[b] / nn), Some(T::from_count(hit_sum[b]) / nn))
            };
            ReliabilityBin {
                lower: T::from_count(b) / nb,
                upper: T::from_count(b + 1) / nb,
                count: n,
                mean_confidence,
                precision,
            }
        })
        .collect();
    let ece = (ece / T::from_count(total)).min(T::one());
    Ok(ReliabilityReport { bins, ece, total })
}

/// Match counts behind pseudo-label precision and recall. Counts from
/// several images can be summed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PrCounts {
    pub matched: usize,
    pub pseudo: usize,
    pub withheld: usize,
}

impl PrCounts {
    /// `matched / pseudo`, or 1 when there are no pseudo labels.
    pub fn precision(&self) -> f64 {
        if self.pseudo == 0 {
            1.0
        } else {
            self.matched as f64 / self.pseudo as f64
        }
    }

    /// `matched / withheld`, or 1 when nothing was withheld.
    pub fn recall(&self) -> f64 {
        if self.withheld == 0 {
            1.0
        } else {
            self.matched as f64 / self.withheld as f64
        }
    }
}

impl Add for PrCounts {
    type Output = PrCounts;

    fn add(self, o: PrCounts) -> PrCounts {
        PrCounts { matched: self.matched + o.matched, pseudo: self.pseudo + o.pseudo, withheld: self.withheld + o.withheld }
    }
}

impl AddAssign for PrCounts {
    fn add_assign(&mut self, o: PrCounts) {
        *self = *self + o;
    }
}

/// Greedy one-to-one matching of pseudo labels (highest score first) to
/// withheld annotations of the same category with IoU >= `tau_match`.
/// Each pseudo label takes the unmatched withheld box it overlaps most.
pub fn pseudo_pr<T: Scalar>(pseudo: &[PseudoLabel<T>], withheld: &[Annotation<T>], tau_match: T) -> PrCounts {
    let mut order: Vec<usize> = (0..pseudo.len()).collect();
    order.sort_by(|&i, &j| {
        pseudo[j].score.partial_cmp(&pseudo[i].score).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut taken = vec![false; withheld.len()];
    let mut matched = 0;
    for i in order {
        let p = &pseudo[i];
        let best = withheld
            .iter()
            .enumerate()
            .filter(|(j, w)| !taken[*j] && w.category == p.category)
            .map(|(j, w)| (j, iou(&p.bbox, &w.bbox)))
            .filter(|&(_, v)| v >= tau_match)
            .fold(None, |acc: Option<(usize, T)>, (j, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((j, v)),
            });
        if let Some((j, _)) = best {
            taken[j] = true;
            matched += 1;
        }
    }
    PrCounts { matched, pseudo: pseudo.len(), withheld: withheld.len() }
}
