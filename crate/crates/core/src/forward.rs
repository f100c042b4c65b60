//! Forward noising process and training-tuple draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::Schedule;

/// Recorded in every run manifest.
pub const PRNG_ALGORITHM: &str =
    "ChaCha8 (rand_chacha 0.9, seed_from_u64 + set_stream); normals: rand_distr 0.5 StandardNormal ziggurat";

/// Generator for `(seed, stream)`. Distinct streams are independent.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `alpha(t) x0 + sigma(t) eps`.
pub fn noise(x0: &[f64], t: f64, eps: &[f64], s: &Schedule) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::ShapeMismatch {
            expected: x0.len(),
            got: eps.len(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain { t, min: 0.0, max: 1.0 });
    }
    let (a, sg) = (s.alpha(t), s.sigma(t));
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + sg * e).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TimeDist {
    #[default]
    Uniform,
}

/// Training time drawn from `dist` over the schedule's clip range.
pub fn sample_time(rng: &mut impl Rng, s: &Schedule, dist: TimeDist) -> f64 {
    match dist {
        TimeDist::Uniform => rng.random_range(s.t_min()..=s.t_max()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: f64,
    pub xt: Vec<f64>,
    pub control: Vec<f64>,
}

impl TrainingPair {
    /// Noises `x0` at `t` with the given `eps`.
    pub fn new(x0: Vec<f64>, eps: Vec<f64>, t: f64, control: Vec<f64>, s: &Schedule) -> Result<Self> {
        let xt = noise(&x0, t, &eps, s)?;
        Ok(TrainingPair { x0, eps, t, xt, control })
    }

    /// Draws `t` and `eps` from stream `index` of `seed`; the same
    /// `(seed, index)` always yields the same tuple.
    pub fn draw(x0: Vec<f64>, control: Vec<f64>, s: &Schedule, seed: u64, index: u64) -> Result<Self> {
        let mut rng = rng_for(seed, index);
        let t = sample_time(&mut rng, s, TimeDist::Uniform);
        let eps = standard_normal(&mut rng, x0.len());
        Self::new(x0, eps, t, control, s)
    }
}
