//! Empirical 1-D distributions and the 1-Wasserstein distance between them.
//!
//! Histograms are sample-based (uniform weight 1/n per sample) rather than
//! binned, so the distance is exact and there is no bin-width knob.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    samples: Vec<f64>, // sorted ascending, nonempty
}

impl Histogram {
    pub fn new(mut samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyHistogram);
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Histogram::new", step: 0 });
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn min(&self) -> f64 {
        self.samples[0]
    }

    pub fn max(&self) -> f64 {
        *self.samples.last().unwrap()
    }

    /// max - min of the samples.
    pub fn range(&self) -> f64 {
        self.max() - self.min()
    }
}

/// 1-Wasserstein distance between two empirical distributions, computed as
/// the L1 distance between their CDFs. For equal sample counts this equals
/// the mean absolute difference of the sorted samples.
pub fn wasserstein1(a: &Histogram, b: &Histogram) -> f64 {
    let (xs, ys) = (a.samples(), b.samples());
    let (n, m) = (xs.len() as f64, ys.len() as f64);
    let mut i = 0usize;
    let mut j = 0usize;
    let mut dist = 0.0;
    let mut prev = f64::NAN;
    while i < xs.len() || j < ys.len() {
        let next = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        if prev.is_finite() && next > prev {
            let fa = i as f64 / n;
            let fb = j as f64 / m;
            dist += (fa - fb).abs() * (next - prev);
        }
        while i < xs.len() && xs[i] == next {
            i += 1;
        }
        while j < ys.len() && ys[j] == next {
            j += 1;
        }
        prev = next;
    }
    dist
}

/// `wasserstein1` divided by the range of `a`, the benign reference.
/// A zero-range reference is accepted only when the distance is also zero.
pub fn wasserstein1_normalized(a: &Histogram, b: &Histogram) -> Result<f64> {
    let d = wasserstein1(a, b);
    let range = a.range();
    if range > 0.0 {
        Ok(d / range)
    } else if d == 0.0 {
        Ok(0.0)
    } else {
        Err(Error::DegenerateReference)
    }
}
