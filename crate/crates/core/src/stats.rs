//! Small statistics toolkit: running moments, trace covariance, percentile
//! bootstrap and log-log slope fits.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two samples.
pub fn variance(xs: &[f64]) -> f64 {
    let mut m = Moments::default();
    for &x in xs {
        m.push(x);
    }
    m.variance()
}

/// Welford running mean and variance of a scalar.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn std_err(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        libm::sqrt(self.variance() / self.n as f64)
    }

    /// Pooled moments of two disjoint sample sets.
    pub fn merge(&self, other: &Moments) -> Moments {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        let mean = self.mean + d * other.n as f64 / n as f64;
        let m2 = self.m2 + other.m2 + d * d * (self.n as f64 * other.n as f64) / n as f64;
        Moments { n, mean, m2 }
    }
}

/// Per-coordinate Welford moments of a vector-valued estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorMoments {
    coords: Vec<Moments>,
}

impl VectorMoments {
    pub fn new(dim: usize) -> Self {
        Self { coords: alloc::vec![Moments::default(); dim] }
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.coords.len());
        for (m, &v) in self.coords.iter_mut().zip(x) {
            m.push(v);
        }
    }

    pub fn merge(&self, other: &VectorMoments) -> VectorMoments {
        VectorMoments { coords: self.coords.iter().zip(&other.coords).map(|(a, b)| a.merge(b)).collect() }
    }

    pub fn count(&self) -> u64 {
        self.coords.first().map_or(0, Moments::count)
    }

    pub fn mean(&self) -> Vec<f64> {
        self.coords.iter().map(Moments::mean).collect()
    }

    pub fn std_err(&self) -> Vec<f64> {
        self.coords.iter().map(Moments::std_err).collect()
    }

    /// Sum of per-coordinate variances (trace of the sample covariance).
    pub fn trace_variance(&self) -> f64 {
        self.coords.iter().map(Moments::variance).sum()
    }
}

/// Unbiased trace-covariance estimate `(1/(R-1)) sum_r |g_r - mean|^2`.
pub fn trcov(samples: &[Vec<f64>]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(contract!("trace covariance needs R >= 2 samples, got {}", samples.len()));
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(contract!("trace covariance samples have mixed dimensions"));
    }
    let mut vm = VectorMoments::new(dim);
    for s in samples {
        vm.push(s);
    }
    Ok(vm.trace_variance())
}

/// Quantile with linear interpolation between order statistics; `sorted`
/// must be ascending and nonempty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap CI for the mean of paired differences.
pub fn bootstrap_ci(diffs: &[f64], resamples: usize, level: f64, rng: &mut impl Rng) -> Result<(f64, f64)> {
    if diffs.len() < 2 {
        return Err(contract!("bootstrap needs at least two paired samples"));
    }
    if resamples == 0 || !(level > 0.0 && level < 1.0) {
        return Err(contract!("bootstrap needs resamples > 0 and level in (0, 1)"));
    }
    let n = diffs.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| diffs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&means, tail), quantile(&means, 1.0 - tail)))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(contract!("slope fit needs at least two matched points"));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(contract!("log-log fit needs positive values"));
    }
    let lx: Vec<f64> = xs.iter().map(|&x| libm::log(x)).collect();
    let ly: Vec<f64> = ys.iter().map(|&y| libm::log(y)).collect();
    let mx = mean(&lx);
    let my = mean(&ly);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(contract!("slope fit needs distinct x values"));
    }
    Ok(sxy / sxx)
}
