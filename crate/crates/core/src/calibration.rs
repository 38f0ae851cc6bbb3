//! Platt-scaling calibrator, its maximum-likelihood fit and the bounded
//! sample queue it is fitted on.
//!
//! The calibrator maps a raw confidence `p` to `sigmoid(a * logit(p) + b)`.
//! `(a, b) = (1, 0)` is the identity. Fitting minimises the Bernoulli
//! negative log-likelihood of the queued `(p, matched)` pairs, which is a
//! two-feature logistic regression and therefore convex.

use std::collections::VecDeque;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{logit, sigmoid, softplus, Scalar};

/// Raw confidences are clamped into `[EPS, 1 - EPS]` before taking the logit.
pub const CONFIDENCE_EPS: f64 = 1e-7;

/// Default iteration cap for [`fit`].
pub const MAX_FIT_ITERATIONS: usize = 200;

/// Default convergence threshold on the max-norm of the mean-NLL gradient.
pub const GRADIENT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("confidence {0} is outside the open interval (0, 1)")]
    ConfidenceOutOfRange(f64),
    #[error("queue capacity must be positive")]
    ZeroCapacity,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("degenerate queue: need at least 2 matched and 2 unmatched samples, have {positives} matched and {negatives} unmatched")]
    Degenerate { positives: usize, negatives: usize },
    #[error("calibrator fit did not converge after {iterations} iterations (gradient max-norm {gradient:e})")]
    NonConvergence { iterations: usize, gradient: f64 },
    #[error("fitted slope a = {a} is not positive; the calibrator would not be monotone")]
    NonMonotone { a: f64 },
}

/// Slope `a` and intercept `b` of the logit-domain Platt map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratorParams<T: Scalar = f64> {
    pub a: T,
    pub b: T,
}

impl<T: Scalar> Default for CalibratorParams<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Scalar> CalibratorParams<T> {
    pub fn new(a: T, b: T) -> Self {
        Self { a, b }
    }

    pub fn identity() -> Self {
        Self { a: T::one(), b: T::zero() }
    }

    /// Calibrated score for a raw confidence in `(0, 1)`.
    pub fn calibrate(&self, p_hat: T) -> Result<T, CalibrationError> {
        if !(p_hat > T::zero() && p_hat < T::one()) {
            return Err(CalibrationError::ConfidenceOutOfRange(p_hat.to_f64_lossy()));
        }
        Ok(self.calibrate_clamped(p_hat))
    }

    /// Like [`calibrate`](Self::calibrate) but clamps any input into
    /// `[CONFIDENCE_EPS, 1 - CONFIDENCE_EPS]` first, so it never fails.
    pub fn calibrate_clamped(&self, p_hat: T) -> T {
        sigmoid(self.a * logit(clamp_confidence(p_hat)) + self.b)
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite()
    }
}

/// Calibrated score `sigmoid(a * logit(p_hat) + b)`.
pub fn calibrate<T: Scalar>(p_hat: T, params: &CalibratorParams<T>) -> Result<T, CalibrationError> {
    params.calibrate(p_hat)
}

pub fn clamp_confidence<T: Scalar>(p: T) -> T {
    let eps = T::lit(CONFIDENCE_EPS);
    if p.is_nan() {
        return T::lit(0.5);
    }
    p.max(eps).min(T::one() - eps)
}

/// A raw confidence paired with whether the prediction matched ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationSample<T: Scalar = f64> {
    p_hat: T,
    matched: bool,
}

impl<T: Scalar> CalibrationSample<T> {
    pub fn new(p_hat: T, matched: bool) -> Result<Self, CalibrationError> {
        if !(p_hat > T::zero() && p_hat < T::one()) {
            return Err(CalibrationError::ConfidenceOutOfRange(p_hat.to_f64_lossy()));
        }
        Ok(Self { p_hat, matched })
    }

    pub fn p_hat(&self) -> T {
        self.p_hat
    }

    pub fn matched(&self) -> bool {
        self.matched
    }
}

/// Fixed-capacity FIFO of calibration samples; the oldest entry is evicted
/// when a push would exceed the capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationQueue<T: Scalar = f64> {
    capacity: usize,
    entries: VecDeque<CalibrationSample<T>>,
}

impl<T: Scalar> CalibrationQueue<T> {
    pub fn new(capacity: usize) -> Result<Self, CalibrationError> {
        if capacity == 0 {
            return Err(CalibrationError::ZeroCapacity);
        }
        Ok(Self { capacity, entries: VecDeque::with_capacity(capacity.min(1 << 16)) })
    }

    pub fn enqueue(&mut self, sample: CalibrationSample<T>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(sample);
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl ExactSizeIterator<Item = &CalibrationSample<T>> + Clone {
        self.entries.iter()
    }

    /// `(matched, unmatched)`
    pub fn class_counts(&self) -> (usize, usize) {
        class_counts(self.entries.iter())
    }

    pub fn fit(&self) -> Result<FitOutcome<T>, FitError> {
        fit(self.entries.iter())
    }
}

fn class_counts<'a, T: Scalar>(samples: impl Iterator<Item = &'a CalibrationSample<T>>) -> (usize, usize) {
    samples.fold((0, 0), |(p, n), s| if s.matched { (p + 1, n) } else { (p, n + 1) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOutcome<T: Scalar = f64> {
    pub params: CalibratorParams<T>,
    /// Mean negative log-likelihood per sample at `params`.
    pub nll: T,
    pub iterations: usize,
    pub gradient: T,
}

/// Logit feature and 0/1 target, precomputed once per fit.
fn design<'a, T: Scalar>(samples: impl IntoIterator<Item = &'a CalibrationSample<T>>) -> Vec<(T, T)> {
    samples
        .into_iter()
        .map(|s| (logit(clamp_confidence(s.p_hat)), if s.matched { T::one() } else { T::zero() }))
        .collect()
}

fn mean_nll<T: Scalar>(xy: &[(T, T)], a: T, b: T) -> T {
    let sum = xy.iter().fold(T::zero(), |acc, &(x, y)| {
        let z = a * x + b;
        acc + softplus(z) - y * z
    });
    sum / T::from_count(xy.len())
}

/// Gradient and Hessian of the mean NLL with respect to `(a, b)`.
fn derivatives<T: Scalar>(xy: &[(T, T)], a: T, b: T) -> ([T; 2], [T; 3]) {
    let mut g = [T::zero(); 2];
    let mut h = [T::zero(); 3];
    for &(x, y) in xy {
        let q = sigmoid(a * x + b);
        let r = q - y;
        let w = q * (T::one() - q);
        g[0] = g[0] + r * x;
        g[1] = g[1] + r;
        h[0] = h[0] + w * x * x;
        h[1] = h[1] + w * x;
        h[2] = h[2] + w;
    }
    let n = T::from_count(xy.len());
    (g.map(|v| v / n), h.map(|v| v / n))
}

/// Mean negative log-likelihood of the samples under `params`.
pub fn nll<'a, T: Scalar>(
    samples: impl IntoIterator<Item = &'a CalibrationSample<T>>,
    params: &CalibratorParams<T>,
) -> T {
    let xy = design(samples);
    if xy.is_empty() {
        return T::zero();
    }
    mean_nll(&xy, params.a, params.b)
}

/// Analytic gradient `[d/da, d/db]` of [`nll`].
pub fn nll_gradient<'a, T: Scalar>(
    samples: impl IntoIterator<Item = &'a CalibrationSample<T>>,
    params: &CalibratorParams<T>,
) -> [T; 2] {
    let xy = design(samples);
    if xy.is_empty() {
        return [T::zero(); 2];
    }
    derivatives(&xy, params.a, params.b).0
}

/// Fits `(a, b)` by damped Newton-Raphson starting from the identity map.
pub fn fit<'a, T: Scalar>(
    samples: impl IntoIterator<Item = &'a CalibrationSample<T>>,
) -> Result<FitOutcome<T>, FitError> {
    fit_with(samples, MAX_FIT_ITERATIONS)
}

pub fn fit_with<'a, T: Scalar>(
    samples: impl IntoIterator<Item = &'a CalibrationSample<T>>,
    max_iterations: usize,
) -> Result<FitOutcome<T>, FitError> {
    let xy = design(samples);
    let positives = xy.iter().filter(|&&(_, y)| y > T::zero()).count();
    let negatives = xy.len() - positives;
    if positives < 2 || negatives < 2 {
        return Err(FitError::Degenerate { positives, negatives });
    }

    // f32 cannot resolve a 1e-8 gradient; scale the tolerance with precision
    let tol = T::lit(GRADIENT_TOLERANCE).max(T::epsilon() * T::lit(100.0));
    let ridge = T::epsilon() * T::lit(1e4);
    let (mut a, mut b) = (T::one(), T::zero());
    let mut f = mean_nll(&xy, a, b);

    for iter in 0..max_iterations {
        let (g, h) = derivatives(&xy, a, b);
        let gmax = g[0].abs().max(g[1].abs());
        if gmax < tol {
            return finish(a, b, f, iter, gmax);
        }
        // Newton direction from the 2x2 system (H + ridge I) d = -g
        let (h00, h01, h11) = (h[0] + ridge, h[1], h[2] + ridge);
        let det = h00 * h11 - h01 * h01;
        let (da, db) = if det > T::zero() && det.is_finite() {
            ((-g[0] * h11 + g[1] * h01) / det, (g[0] * h01 - g[1] * h00) / det)
        } else {
            (-g[0], -g[1])
        };
        let slope = g[0] * da + g[1] * db;

        let mut t = T::one();
        let accepted = loop {
            let (na, nb) = (a + t * da, b + t * db);
            let nf = mean_nll(&xy, na, nb);
            // slack of a few ulps so steps below the rounding level of the
            // mean are not rejected near the optimum
            let slack = T::epsilon() * T::lit(16.0) * f.abs();
            if nf.is_finite() && nf <= f + T::lit(1e-4) * t * slope + slack {
                break Some((na, nb, nf));
            }
            t = t * T::lit(0.5);
            if t < T::lit(1e-12) {
                break None;
            }
        };
        match accepted {
            Some((na, nb, nf)) => {
                a = na;
                b = nb;
                f = nf;
            }
            // no further decrease is representable at this precision
            None if gmax < T::epsilon().sqrt() => return finish(a, b, f, iter + 1, gmax),
            None => {
                return Err(FitError::NonConvergence { iterations: iter + 1, gradient: gmax.to_f64_lossy() })
            }
        }
    }
    let (g, _) = derivatives(&xy, a, b);
    let gmax = g[0].abs().max(g[1].abs());
    if gmax < tol {
        return finish(a, b, f, max_iterations, gmax);
    }
    Err(FitError::NonConvergence { iterations: max_iterations, gradient: gmax.to_f64_lossy() })
}

fn finish<T: Scalar>(a: T, b: T, nll: T, iterations: usize, gradient: T) -> Result<FitOutcome<T>, FitError> {
    if !(a > T::zero()) || !a.is_finite() || !b.is_finite() {
        return Err(FitError::NonMonotone { a: a.to_f64_lossy() });
    }
    Ok(FitOutcome { params: CalibratorParams { a, b }, nll, iterations, gradient })
}

/// One successful refit, as emitted in the trajectory CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RefitRecord<T: Scalar = f64> {
    pub iteration: u64,
    pub a: T,
    pub b: T,
    /// Mean NLL per queued sample.
    pub nll: T,
    pub queue_size: usize,
}

/// `iteration,a,b,nll,queue_size`
pub fn write_trajectory_csv<T: Scalar, W: Write>(records: &[RefitRecord<T>], mut w: W) -> io::Result<()> {
    writeln!(w, "iteration,a,b,nll,queue_size")?;
    for r in records {
        writeln!(w, "{},{},{},{},{}", r.iteration, r.a, r.b, r.nll, r.queue_size)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(p: f64, m: bool) -> CalibrationSample {
        CalibrationSample::new(p, m).unwrap()
    }

    /// Draws `n` samples with p ~ U(0.05, 0.95) and m ~ Bernoulli(sigmoid(a*logit(p)+b)).
    fn generate(n: usize, a: f64, b: f64, seed: u64) -> Vec<CalibrationSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let p: f64 = rng.random_range(0.05..0.95);
                let q = 1.0 / (1.0 + (-(a * (p / (1.0 - p)).ln() + b)).exp());
                s(p, rng.random_bool(q))
            })
            .collect()
    }

    #[test]
    fn identity_map() {
        let id = CalibratorParams::<f64>::identity();
        for p in [0.1, 0.5, 0.9] {
            assert!((calibrate(p, &id).unwrap() - p).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_point() {
        assert_eq!(calibrate(0.5, &CalibratorParams::new(2.0, 0.0)).unwrap(), 0.5);
    }

    #[test]
    fn closed_form_value() {
        // sigmoid(ln 4 - 1), 40-digit reference
        let v: f64 = calibrate(0.8, &CalibratorParams::new(1.0, -1.0)).unwrap();
        assert!((v - 0.595_390_324_808_310_3).abs() < 1e-14, "{v}");
    }

    #[test]
    fn rejects_out_of_range() {
        let id = CalibratorParams::<f64>::identity();
        for p in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(calibrate(p, &id).is_err(), "{p}");
        }
        assert!(CalibrationSample::new(1.0, true).is_err());
        // clamped variant stays finite at the edges
        assert!(id.calibrate_clamped(1.0) < 1.0);
        assert!(id.calibrate_clamped(0.0) > 0.0);
    }

    #[test]
    fn queue_fifo() {
        let mut q = CalibrationQueue::new(2).unwrap();
        q.enqueue(s(0.1, true));
        assert_eq!(q.iter().map(|x| x.p_hat()).collect::<Vec<_>>(), vec![0.1]);
        q.enqueue(s(0.2, false));
        q.enqueue(s(0.3, true));
        assert_eq!(q.iter().map(|x| x.p_hat()).collect::<Vec<_>>(), vec![0.2, 0.3]);

        let mut q = CalibrationQueue::new(3).unwrap();
        for p in [0.1, 0.2, 0.3, 0.4, 0.5] {
            q.enqueue(s(p, false));
        }
        assert_eq!(q.iter().map(|x| x.p_hat()).collect::<Vec<_>>(), vec![0.3, 0.4, 0.5]);
        assert!(CalibrationQueue::<f64>::new(0).is_err());
    }

    #[test]
    fn recovers_known_warp() {
        let data = generate(20_000, 2.0, -1.0, 7);
        let out = fit(&data).unwrap();
        assert!((out.params.a - 2.0).abs() < 0.05, "{:?}", out.params);
        assert!((out.params.b + 1.0).abs() < 0.05, "{:?}", out.params);
        assert!(out.gradient < GRADIENT_TOLERANCE);
    }

    #[test]
    fn calibrated_data_fits_identity() {
        let data = generate(50_000, 1.0, 0.0, 3);
        let out = fit(&data).unwrap();
        assert!((out.params.a - 1.0).abs() < 0.05 && out.params.b.abs() < 0.05, "{:?}", out.params);
    }

    #[test]
    fn degenerate_queue() {
        let data: Vec<_> = (1..10).map(|i| s(i as f64 / 10.0, true)).collect();
        assert!(matches!(fit(&data), Err(FitError::Degenerate { positives: 9, negatives: 0 })));
        let data = vec![s(0.2, true), s(0.3, false), s(0.4, false), s(0.5, false)];
        assert!(matches!(fit(&data), Err(FitError::Degenerate { positives: 1, .. })));
        assert!(fit(&[] as &[CalibrationSample]).is_err());
    }

    #[test]
    fn anti_correlated_data_is_rejected() {
        let data = generate(5_000, -1.5, 0.0, 1);
        assert!(matches!(fit(&data), Err(FitError::NonMonotone { .. })));
    }

    #[test]
    fn iteration_cap_reports_count() {
        let data = generate(2_000, 3.0, 0.5, 2);
        match fit_with(&data, 1) {
            Err(FitError::NonConvergence { iterations, .. }) => assert_eq!(iterations, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fit_in_f32() {
        let data: Vec<CalibrationSample<f32>> = generate(4_000, 2.0, -1.0, 5)
            .iter()
            .map(|x| CalibrationSample::new(x.p_hat() as f32, x.matched()).unwrap())
            .collect();
        let out = fit(&data).unwrap();
        assert!((out.params.a - 2.0).abs() < 0.2 && (out.params.b + 1.0).abs() < 0.2, "{:?}", out.params);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let data = generate(500, 1.7, 0.3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let h: f64 = 1e-5;
        for _ in 0..10 {
            let p = CalibratorParams::new(rng.random_range(0.2..3.0), rng.random_range(-2.0..2.0));
            let g = nll_gradient(&data, &p);
            let fd_a = (nll(&data, &CalibratorParams::new(p.a + h, p.b)) - nll(&data, &CalibratorParams::new(p.a - h, p.b))) / (2.0 * h);
            let fd_b = (nll(&data, &CalibratorParams::new(p.a, p.b + h)) - nll(&data, &CalibratorParams::new(p.a, p.b - h))) / (2.0 * h);
            for (an, fd) in [(g[0], fd_a), (g[1], fd_b)] {
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-12);
                assert!(rel < 1e-4, "analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn trajectory_csv() {
        let rec = [RefitRecord { iteration: 500, a: 0.5, b: 0.25, nll: 0.5, queue_size: 10 }];
        let mut buf = Vec::new();
        write_trajectory_csv(&rec, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,a,b,nll,queue_size\n500,0.5,0.25,0.5,10\n");
    }

    proptest! {
        #[test]
        fn fit_never_worse_than_identity(seed in 0u64..1000, a in 0.3..3.0f64, b in -1.5..1.5f64, n in 50usize..400) {
            let data = generate(n, a, b, seed);
            if let Ok(out) = fit(&data) {
                let at_identity = nll(&data, &CalibratorParams::identity());
                prop_assert!(out.nll <= at_identity + 1e-12);
                prop_assert!(out.params.a > 0.0);
            }
        }

        #[test]
        fn monotone_for_positive_slope(a in 0.01..10.0f64, b in -5.0..5.0f64, p1 in 0.001..0.999f64, p2 in 0.001..0.999f64) {
            prop_assume!(p1 < p2 && p2 - p1 > 1e-6);
            let params = CalibratorParams::new(a, b);
            prop_assert!(params.calibrate(p1).unwrap() <= params.calibrate(p2).unwrap());
        }

        #[test]
        fn queue_holds_most_recent(cap in 1usize..20, n in 0usize..60) {
            let mut q = CalibrationQueue::new(cap).unwrap();
            for i in 0..n {
                q.enqueue(s((i as f64 + 1.0) / 100.0, i % 2 == 0));
            }
            prop_assert_eq!(q.len(), n.min(cap));
            let expect: Vec<f64> = (n.saturating_sub(cap)..n).map(|i| (i as f64 + 1.0) / 100.0).collect();
            prop_assert_eq!(q.iter().map(|x| x.p_hat()).collect::<Vec<_>>(), expect);
        }
    }
}
