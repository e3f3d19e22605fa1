//! Small set of parametric distributions used by the behavior models.

use core::time::Duration;

use rand::Rng;

/// A distribution over non-negative reals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dist {
    Constant(f64),
    /// Uniform on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
    Exponential { mean: f64 },
    /// Log-uniform on `[lo, hi]`, both positive.
    LogUniform { lo: f64, hi: f64 },
}

impl Dist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::Constant(v) => v,
            Dist::Uniform { lo, hi } => {
                if hi <= lo {
                    lo
                } else {
                    lo + (hi - lo) * rng.random::<f64>()
                }
            }
            Dist::Exponential { mean } => {
                let u: f64 = rng.random();
                -mean * libm::log(1.0 - u)
            }
            Dist::LogUniform { lo, hi } => {
                if hi <= lo {
                    lo
                } else {
                    let u: f64 = rng.random();
                    lo * libm::exp(u * libm::log(hi / lo))
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Constant(v) => v,
            Dist::Uniform { lo, hi } => (lo + hi.max(lo)) / 2.0,
            Dist::Exponential { mean } => mean,
            Dist::LogUniform { lo, hi } => {
                if hi <= lo {
                    lo
                } else {
                    (hi - lo) / libm::log(hi / lo)
                }
            }
        }
    }

    /// Smallest value the distribution can produce.
    pub fn lower_bound(&self) -> f64 {
        match *self {
            Dist::Constant(v) => v,
            Dist::Uniform { lo, .. } | Dist::LogUniform { lo, .. } => lo,
            Dist::Exponential { .. } => 0.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            Dist::Constant(v) => v.is_finite() && v >= 0.0,
            Dist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi >= lo,
            Dist::Exponential { mean } => mean.is_finite() && mean >= 0.0,
            Dist::LogUniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo > 0.0 && hi >= lo,
        }
    }

    /// Samples a value interpreted as seconds.
    pub fn sample_secs<R: Rng + ?Sized>(&self, rng: &mut R) -> Duration {
        Duration::from_secs_f64(self.sample(rng).max(0.0))
    }
}
