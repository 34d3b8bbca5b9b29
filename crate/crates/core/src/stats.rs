//! Streaming mean/variance accumulators for Monte-Carlo estimates.

/// Welford accumulator; merging is deterministic given the merge order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Accumulator {
    n: u64,
    mean: f64,
    m2: f64,
    sum_abs: f64,
    sum_sq: f64,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
        self.sum_abs += x.abs();
        self.sum_sq += x * x;
    }

    pub fn merge(&mut self, other: &Accumulator) {
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
        self.m2 += other.m2 + delta * delta * (self.n as f64) * (other.n as f64) / n as f64;
        self.n = n;
        self.sum_abs += other.sum_abs;
        self.sum_sq += other.sum_sq;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    pub fn estimate(&self) -> Estimate {
        let ess = if self.sum_sq > 0.0 {
            self.sum_abs * self.sum_abs / self.sum_sq
        } else {
            self.n as f64
        };
        Estimate {
            mean: self.mean,
            std_error: self.std_error(),
            n: self.n,
            ess,
        }
    }
}

impl FromIterator<f64> for Accumulator {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Accumulator::new();
        for x in iter {
            acc.push(x);
        }
        acc
    }
}

/// A Monte-Carlo estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: u64,
    /// `(sum |x|)^2 / sum x^2`: equals `n` for constant samples and drops
    /// when a few large values dominate.
    pub ess: f64,
}

impl Estimate {
    /// `(mean - target) / std_error`, with zero error treated as exact.
    pub fn z_score(&self, target: f64) -> f64 {
        let diff = self.mean - target;
        if self.std_error > 0.0 {
            diff / self.std_error
        } else if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        }
    }

    /// `|mean - target| <= k * std_error`, with a small absolute slack for
    /// floating-point rounding of exact estimates.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.std_error + 1e-12 * (1.0 + target.abs())
    }
}

/// Merges accumulators in the given order.
pub fn merge_all<'a, I: IntoIterator<Item = &'a Accumulator>>(parts: I) -> Accumulator {
    let mut acc = Accumulator::new();
    for p in parts {
        acc.merge(p);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basic_moments() {
        let acc: Accumulator = [1.0, 2.0, 3.0, 4.0].into_iter().collect();
        assert_eq!(acc.mean(), 2.5);
        assert!((acc.variance() - 5.0 / 3.0).abs() < 1e-12);
        assert_eq!(acc.estimate().ess, 100.0 / 30.0);
    }

    #[test]
    fn constant_samples_are_exact() {
        let acc: Accumulator = std::iter::repeat_n(0.5, 10).collect();
        let e = acc.estimate();
        assert_eq!(e.std_error, 0.0);
        assert!(e.within(0.5, 0.0));
        assert_eq!(e.z_score(0.5), 0.0);
    }

    proptest! {
        #[test]
        fn merge_matches_single_pass(xs in proptest::collection::vec(-10.0f64..10.0, 2..60), cut in 0usize..60) {
            let cut = cut.min(xs.len());
            let whole: Accumulator = xs.iter().copied().collect();
            let mut left: Accumulator = xs[..cut].iter().copied().collect();
            let right: Accumulator = xs[cut..].iter().copied().collect();
            left.merge(&right);
            prop_assert_eq!(left.count(), whole.count());
            prop_assert!((left.mean() - whole.mean()).abs() < 1e-9);
            prop_assert!((left.variance() - whole.variance()).abs() < 1e-8);
        }
    }
}
