//! Small statistical helpers: streaming moments, batch-means standard errors,
//! the Kolmogorov–Smirnov test against N(0, 1), quantiles and least squares.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Streaming mean and variance (Welford).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Combines two accumulators (Chan et al.).
    pub fn merge(&mut self, other: &Welford) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * self.n as f64 * other.n as f64 / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; 0 with fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean for independent samples.
    pub fn stderr_of_mean(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        (self.variance() / self.n as f64).sqrt()
    }
}

/// Standard error of the mean of a correlated series by non-overlapping
/// batch means. Trailing samples that do not fill a batch are dropped from
/// the error estimate.
pub fn batch_means_stderr(series: &[f64], n_batches: usize) -> f64 {
    assert!(n_batches >= 2, "need at least two batches");
    let size = series.len() / n_batches;
    assert!(size >= 1, "series shorter than the number of batches");
    let mut acc = Welford::default();
    for b in 0..n_batches {
        let chunk = &series[b * size..(b + 1) * size];
        acc.push(chunk.iter().sum::<f64>() / size as f64);
    }
    acc.stderr_of_mean()
}

/// Batch means accumulated on the fly for a series of known length.
#[derive(Clone, Debug)]
pub struct BatchMeans {
    batch_size: u64,
    current: f64,
    filled: u64,
    batches: Welford,
    all: Welford,
}

impl BatchMeans {
    pub fn new(batch_size: u64) -> Self {
        assert!(batch_size >= 1);
        Self {
            batch_size,
            current: 0.0,
            filled: 0,
            batches: Welford::default(),
            all: Welford::default(),
        }
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        self.all.push(x);
        self.current += x;
        self.filled += 1;
        if self.filled == self.batch_size {
            self.batches.push(self.current / self.batch_size as f64);
            self.current = 0.0;
            self.filled = 0;
        }
    }

    pub fn mean(&self) -> f64 {
        self.all.mean()
    }

    pub fn count(&self) -> u64 {
        self.all.count()
    }

    pub fn n_batches(&self) -> u64 {
        self.batches.count()
    }

    /// Standard error of the overall mean from the batch means.
    pub fn stderr(&self) -> f64 {
        self.batches.stderr_of_mean()
    }
}

pub fn standard_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Asymptotic Kolmogorov survival function P(K > λ).
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Kolmogorov–Smirnov statistic of `samples` against N(0, 1) and its p-value
/// (with the Stephens small-sample correction).
pub fn ks_standard_normal(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    assert!(n > 0);
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = standard_normal_cdf(x);
        d = d
            .max(((i + 1) as f64 / nf - f).abs())
            .max((f - i as f64 / nf).abs());
    }
    let sq = nf.sqrt();
    (d, kolmogorov_survival((sq + 0.12 + 0.11 / sq) * d))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Ordinary least squares y ≈ a + b·x; returns (intercept, slope, R²).
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    (my - slope * mx, slope, r2)
}
