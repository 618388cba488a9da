//! Small statistics helpers: batch-means confidence intervals, time-weighted
//! batch accumulation and least-squares line fits.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Two-sided 95% Student-t quantile `t_{0.975, dof}`.
pub fn t975(dof: usize) -> f64 {
    if dof == 0 {
        return f64::INFINITY;
    }
    StudentsT::new(0.0, 1.0, dof as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975)
}

/// Sample mean and 95% half-width treating `values` as i.i.d. (batch means).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci: f64,
}

impl MeanCi {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                ci: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Self {
                mean,
                ci: f64::INFINITY,
            };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Self {
            mean,
            ci: t975(n - 1) * (var / n as f64).sqrt(),
        }
    }

    /// Splits a sequence into `batches` contiguous groups of (nearly) equal
    /// size and applies [`MeanCi::from_samples`] to the group means.
    pub fn batch_means(values: &[f64], batches: usize) -> Self {
        let batches = batches.min(values.len()).max(1);
        let means: Vec<f64> = (0..batches)
            .map(|b| {
                let lo = b * values.len() / batches;
                let hi = (b + 1) * values.len() / batches;
                values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect();
        let mut out = Self::from_samples(&means);
        // the grand mean is the plain sample mean even with uneven batches
        out.mean = values.iter().sum::<f64>() / values.len() as f64;
        out
    }

    /// True when `|mean - target| <= k * ci`.
    pub fn covers(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.ci
    }
}

/// Accumulates time integrals of piecewise-constant quantities over
/// `batches` equal-length windows covering `[start, end)`.
#[derive(Debug, Clone)]
pub struct TimeBatches {
    start: f64,
    end: f64,
    batch_len: f64,
    width: usize,
    sums: Vec<f64>,
}

impl TimeBatches {
    pub fn new(start: f64, end: f64, batches: usize, width: usize) -> Self {
        assert!(end > start && batches > 0);
        Self {
            start,
            end,
            batch_len: (end - start) / batches as f64,
            width,
            sums: vec![0.0; batches * width],
        }
    }

    pub fn batches(&self) -> usize {
        self.sums.len() / self.width.max(1)
    }

    /// Adds `values` held constant on `[t0, t1)`.
    pub fn add(&mut self, t0: f64, t1: f64, values: &[f64]) {
        let a = t0.max(self.start);
        let b = t1.min(self.end);
        if b <= a {
            return;
        }
        let nb = self.batches();
        let mut lo = a;
        let mut idx = (((a - self.start) / self.batch_len) as usize).min(nb - 1);
        while lo < b {
            let edge = if idx + 1 == nb {
                self.end
            } else {
                self.start + (idx + 1) as f64 * self.batch_len
            };
            let hi = b.min(edge);
            let dt = hi - lo;
            if dt > 0.0 {
                let row = &mut self.sums[idx * self.width..(idx + 1) * self.width];
                for (s, v) in row.iter_mut().zip(values) {
                    *s += v * dt;
                }
            }
            lo = hi;
            idx += 1;
            if idx >= nb {
                break;
            }
        }
    }

    /// Time-average of quantity `q` within each batch.
    pub fn batch_means(&self, q: usize) -> Vec<f64> {
        (0..self.batches())
            .map(|b| self.sums[b * self.width + q] / self.batch_len)
            .collect()
    }

    pub fn summary(&self, q: usize) -> MeanCi {
        MeanCi::from_samples(&self.batch_means(q))
    }
}

/// Ordinary least squares `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_stderr = if n > 2 {
        let rss: f64 = x
            .iter()
            .zip(y)
            .map(|(a, b)| (b - intercept - slope * a).powi(2))
            .sum();
        (rss / (n - 2) as f64 / sxx).sqrt()
    } else {
        f64::NAN
    };
    Some(LineFit {
        slope,
        intercept,
        slope_stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn t_quantiles() {
        assert!((t975(1) - 12.706204736).abs() < 1e-6);
        assert!((t975(19) - 2.093024054).abs() < 1e-6);
        assert!((t975(10_000) - 1.96).abs() < 1e-3);
    }

    #[test]
    fn mean_ci_basic() {
        let m = MeanCi::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((m.ci - t975(3) * sd / 2.0).abs() < 1e-12);
        assert!(m.covers(2.5, 0.0));
    }

    #[test]
    fn time_batches_split_intervals() {
        let mut tb = TimeBatches::new(0.0, 4.0, 4, 1);
        tb.add(-1.0, 0.5, &[2.0]);
        tb.add(0.5, 2.5, &[4.0]);
        tb.add(2.5, 10.0, &[1.0]);
        assert_eq!(tb.batch_means(0), vec![3.0, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn line_fit_exact() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 2.0 * v).collect();
        let f = fit_line(&x, &y).unwrap();
        assert!((f.slope + 2.0).abs() < 1e-14);
        assert!((f.intercept - 1.0).abs() < 1e-14);
        assert!(f.slope_stderr < 1e-12);
        assert!(fit_line(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }
}
