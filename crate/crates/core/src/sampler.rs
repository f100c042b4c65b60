//! DDIM / DDPM ancestral sampling and Euler integration of the flow ODE.
//!
//! All samplers go through the x0 estimate:
//! `x_prev = alpha_prev x0_hat + sqrt(sigma_prev^2 - gamma^2) eps_hat + gamma z`.
//! The chain evaluates the predictor on the first `n_steps` points of
//! [`Schedule::discrete_grid`]; the last update lands on `t = 0` where
//! `alpha = 1`, `sigma = 0`, so the final output is the last x0 estimate.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::forward::rng_for;
use crate::param::{conversion_coeffs, convert, PredKind, Prediction};
use crate::schedule::Schedule;

/// Negative `sigma_prev^2 - gamma^2` up to this magnitude is clamped to 0.
pub const GAMMA_CLAMP_TOL: f64 = 1e-12;

/// A (possibly conditional) model evaluated on a batch of states sharing `t`.
pub trait Predictor {
    /// Kind of the returned values.
    fn kind(&self) -> PredKind;

    /// `states` and the result are `n x dim`; `controls`, when given, has one
    /// row per state.
    fn predict(
        &self,
        states: ArrayView2<'_, f64>,
        t: f64,
        controls: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array2<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    Ddim,
    Ddpm,
    EulerFlow,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Ddim => "ddim",
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::EulerFlow => "euler_flow",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(SamplerKind::Ddim),
            "ddpm" => Ok(SamplerKind::Ddpm),
            "euler_flow" => Ok(SamplerKind::EulerFlow),
            other => Err(Error::Parse(format!("unknown sampler `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EtaMode {
    Deterministic,
    DdpmGamma,
}

impl EtaMode {
    pub fn name(self) -> &'static str {
        match self {
            EtaMode::Deterministic => "deterministic",
            EtaMode::DdpmGamma => "ddpm_gamma",
        }
    }
}

impl FromStr for EtaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(EtaMode::Deterministic),
            "ddpm_gamma" => Ok(EtaMode::DdpmGamma),
            other => Err(Error::Parse(format!("unknown eta mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub n_steps: usize,
    pub eta_mode: EtaMode,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn ddim(n_steps: usize, seed: u64) -> Self {
        SamplerConfig {
            kind: SamplerKind::Ddim,
            n_steps,
            eta_mode: EtaMode::Deterministic,
            seed,
        }
    }

    pub fn ddpm(n_steps: usize, seed: u64) -> Self {
        SamplerConfig {
            kind: SamplerKind::Ddpm,
            n_steps,
            eta_mode: EtaMode::DdpmGamma,
            seed,
        }
    }

    pub fn euler_flow(n_steps: usize, seed: u64) -> Self {
        SamplerConfig {
            kind: SamplerKind::EulerFlow,
            n_steps,
            eta_mode: EtaMode::Deterministic,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("sampler needs n_steps >= 1".into()));
        }
        let ok = matches!(
            (self.kind, self.eta_mode),
            (SamplerKind::Ddim, EtaMode::Deterministic)
                | (SamplerKind::Ddpm, EtaMode::DdpmGamma)
                | (SamplerKind::EulerFlow, EtaMode::Deterministic)
        );
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "sampler {} is incompatible with eta mode {}",
                self.kind.name(),
                self.eta_mode.name()
            )))
        }
    }
}

/// Noise scale of the stochastic term for a `t -> t_prev` transition.
pub fn gamma(mode: EtaMode, s: &Schedule, t: f64, t_prev: f64) -> f64 {
    match mode {
        EtaMode::Deterministic => 0.0,
        EtaMode::DdpmGamma => {
            let (a, sg) = (s.alpha(t), s.sigma(t));
            let (ap, sp) = (s.alpha(t_prev), s.sigma(t_prev));
            if sp == 0.0 {
                return 0.0;
            }
            (sp / sg) * (1.0 - a * a / (ap * ap)).max(0.0).sqrt()
        }
    }
}

/// One reverse transition from `t` to `t_prev`. `rng` is only drawn from
/// when the transition is stochastic.
pub fn reverse_step(
    x_t: &[f64],
    pred: &Prediction,
    t: f64,
    t_prev: f64,
    cfg: &SamplerConfig,
    s: &Schedule,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if pred.value.len() != x_t.len() {
        return Err(Error::ShapeMismatch {
            expected: x_t.len(),
            got: pred.value.len(),
        });
    }
    if !(t_prev < t) || !(0.0..=1.0).contains(&t_prev) || !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain {
            t: t_prev,
            min: 0.0,
            max: t,
        });
    }
    if cfg.kind == SamplerKind::EulerFlow {
        let u = convert(pred, PredKind::U, s)?;
        let dt = t - t_prev;
        return Ok(x_t.iter().zip(&u.value).map(|(x, u)| x - dt * u).collect());
    }
    let x0 = convert(pred, PredKind::X0, s)?;
    let eps = convert(pred, PredKind::Eps, s)?;
    let g = gamma(cfg.eta_mode, s, t, t_prev);
    let (ap, sp) = (s.alpha(t_prev), s.sigma(t_prev));
    let dir = direction_coeff(sp, g)?;
    let mut out: Vec<f64> = x0
        .value
        .iter()
        .zip(&eps.value)
        .map(|(x, e)| ap * x + dir * e)
        .collect();
    if g > 0.0 {
        for o in out.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *o += g * z;
        }
    }
    Ok(out)
}

fn direction_coeff(sigma_prev: f64, gamma: f64) -> Result<f64> {
    let rem = sigma_prev * sigma_prev - gamma * gamma;
    if rem < -GAMMA_CLAMP_TOL {
        return Err(Error::GammaOverflow { value: rem });
    }
    Ok(rem.max(0.0).sqrt())
}

/// Evaluation times and landing times of a sampling chain.
pub fn chain_times(s: &Schedule, n_steps: usize) -> Result<Vec<(f64, f64)>> {
    let grid = s.discrete_grid(n_steps)?;
    Ok((0..n_steps)
        .map(|k| {
            let t_prev = if k + 1 == n_steps { 0.0 } else { grid[k + 1] };
            (grid[k], t_prev)
        })
        .collect())
}

/// Draws `n_chains` samples of dimension `dim`. Chain `i` takes its initial
/// noise and any injected noise from stream `i` of `cfg.seed`, so results do
/// not depend on how chains are batched.
pub fn sample<P: Predictor + ?Sized>(
    predictor: &P,
    cfg: &SamplerConfig,
    s: &Schedule,
    n_chains: usize,
    dim: usize,
    controls: Option<ArrayView2<'_, f64>>,
) -> Result<Array2<f64>> {
    sample_from(predictor, cfg, s, n_chains, dim, 0, controls)
}

/// As [`sample`], with chain indices starting at `first_chain`.
pub fn sample_from<P: Predictor + ?Sized>(
    predictor: &P,
    cfg: &SamplerConfig,
    s: &Schedule,
    n_chains: usize,
    dim: usize,
    first_chain: u64,
    controls: Option<ArrayView2<'_, f64>>,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    if let Some(c) = &controls {
        if c.nrows() != n_chains {
            return Err(Error::ShapeMismatch {
                expected: n_chains,
                got: c.nrows(),
            });
        }
    }
    let native = predictor.kind();
    if !native.valid_on(s) {
        return Err(Error::VpRequired);
    }
    let mut rngs: Vec<_> = (0..n_chains as u64)
        .map(|i| rng_for(cfg.seed, first_chain + i))
        .collect();
    let mut x = Array2::<f64>::zeros((n_chains, dim));
    for (mut row, rng) in x.outer_iter_mut().zip(rngs.iter_mut()) {
        for v in row.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
    for (t, t_prev) in chain_times(s, cfg.n_steps)? {
        let out = predictor.predict(x.view(), t, controls)?;
        if out.dim() != x.dim() {
            return Err(Error::ShapeMismatch {
                expected: dim,
                got: out.ncols(),
            });
        }
        step_batch(&mut x, &out, native, t, t_prev, cfg, s, &mut rngs)?;
    }
    Ok(x)
}

/// Batched form of [`reverse_step`]; the coefficients are shared because all
/// chains sit at the same `t`.
#[allow(clippy::too_many_arguments)]
fn step_batch(
    x: &mut Array2<f64>,
    native_out: &Array2<f64>,
    native: PredKind,
    t: f64,
    t_prev: f64,
    cfg: &SamplerConfig,
    s: &Schedule,
    rngs: &mut [rand_chacha::ChaCha8Rng],
) -> Result<()> {
    if cfg.kind == SamplerKind::EulerFlow {
        let to_u = conversion_coeffs(native, PredKind::U, s, t)?;
        let dt = t - t_prev;
        for (xv, ov) in x.iter_mut().zip(native_out.iter()) {
            *xv -= dt * to_u.apply(*ov, *xv);
        }
        return Ok(());
    }
    let to_x0 = conversion_coeffs(native, PredKind::X0, s, t)?;
    let to_eps = conversion_coeffs(native, PredKind::Eps, s, t)?;
    let g = gamma(cfg.eta_mode, s, t, t_prev);
    let (ap, sp) = (s.alpha(t_prev), s.sigma(t_prev));
    let dir = direction_coeff(sp, g)?;
    for ((mut row, orow), rng) in x
        .outer_iter_mut()
        .zip(native_out.outer_iter())
        .zip(rngs.iter_mut())
    {
        for (xv, ov) in row.iter_mut().zip(orow.iter()) {
            let x0 = to_x0.apply(*ov, *xv);
            let eps = to_eps.apply(*ov, *xv);
            *xv = ap * x0 + dir * eps;
        }
        if g > 0.0 {
            for xv in row.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *xv += g * z;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{GaussianData, GaussianOracle};
    use approx::assert_relative_eq;

    fn point_mass(c: f64, s: &Schedule, kind: PredKind) -> GaussianOracle {
        let d = GaussianData::diagonal(vec![c], vec![1e-18]).unwrap();
        GaussianOracle::new(d, s.clone(), kind).unwrap()
    }

    #[test]
    fn ddim_step_on_point_mass_matches_hand_chain() {
        let s = Schedule::vp_cosine();
        let c = 0.8;
        let cfg = SamplerConfig::ddim(10, 0);
        let mut x = 1.3;
        let mut rng = rng_for(0, 0);
        for (t, tp) in chain_times(&s, 10).unwrap() {
            let p = Prediction::new(PredKind::X0, vec![c], t, vec![x]).unwrap();
            let next = reverse_step(&[x], &p, t, tp, &cfg, &s, &mut rng).unwrap()[0];
            let eps_hat = (x - s.alpha(t) * c) / s.sigma(t);
            let hand = s.alpha(tp) * c + s.sigma(tp) * eps_hat;
            assert_relative_eq!(next, hand, max_relative = 1e-9, epsilon = 1e-12);
            x = next;
        }
        assert!((x - c).abs() < 1e-6);

        let o = point_mass(c, &s, PredKind::Eps);
        let out = sample(&o, &cfg, &s, 16, 1, None).unwrap();
        assert!(out.iter().all(|v| (v - c).abs() < 1e-6));
    }

    #[test]
    fn landing_on_clean_end_returns_x0_hat() {
        let s = Schedule::vp_cosine();
        let cfg = SamplerConfig::ddim(5, 0);
        let p = Prediction::new(PredKind::Eps, vec![0.4, -1.0], 0.3, vec![0.2, 0.9]).unwrap();
        let x0 = crate::param::to_x0(&p, &s).unwrap();
        let mut rng = rng_for(0, 0);
        let out = reverse_step(&[0.2, 0.9], &p, 0.3, 0.0, &cfg, &s, &mut rng).unwrap();
        assert_eq!(out, x0.value);
    }

    #[test]
    fn full_stochasticity_kills_direction_term() {
        assert_eq!(direction_coeff(0.6, 0.6).unwrap(), 0.0);
        assert_eq!(direction_coeff(0.6, 0.6 + 1e-14).unwrap(), 0.0);
        assert!(matches!(direction_coeff(0.6, 0.7), Err(Error::GammaOverflow { .. })));
    }

    #[test]
    fn ddpm_gamma_bounded_on_vp() {
        let s = Schedule::vp_cosine();
        for (t, tp) in chain_times(&s, 50).unwrap() {
            let g = gamma(EtaMode::DdpmGamma, &s, t, tp);
            assert!(g >= 0.0 && g <= s.sigma(tp) + 1e-15);
        }
        assert_eq!(gamma(EtaMode::Deterministic, &s, 0.5, 0.4), 0.0);
    }

    #[test]
    fn single_step_collapses_to_x0_hat_at_t_max() {
        let s = Schedule::vp_cosine();
        let d = GaussianData::diagonal(vec![0.5, -0.5], vec![0.3, 2.0]).unwrap();
        let o = GaussianOracle::new(d.clone(), s.clone(), PredKind::Eps).unwrap();
        let cfg = SamplerConfig::ddim(1, 9);
        let out = sample(&o, &cfg, &s, 4, 2, None).unwrap();
        let mut rng = rng_for(9, 2);
        let z: Vec<f64> = crate::forward::standard_normal(&mut rng, 2);
        let x0 = d.posterior_mean(&z, s.t_max(), &s).unwrap();
        for j in 0..2 {
            assert_relative_eq!(out[[2, j]], x0.value[j], max_relative = 1e-9);
        }
    }

    #[test]
    fn deterministic_and_chain_independent() {
        let s = Schedule::vp_cosine();
        let d = GaussianData::diagonal(vec![1.0, 0.0, -1.0], vec![0.5, 1.0, 0.2]).unwrap();
        let o = GaussianOracle::new(d, s.clone(), PredKind::Eps).unwrap();
        for cfg in [SamplerConfig::ddim(20, 3), SamplerConfig::ddpm(20, 3)] {
            let a = sample(&o, &cfg, &s, 8, 3, None).unwrap();
            let b = sample(&o, &cfg, &s, 8, 3, None).unwrap();
            assert_eq!(a, b);
            let tail = sample_from(&o, &cfg, &s, 3, 3, 5, None).unwrap();
            for i in 0..3 {
                assert_eq!(a.row(5 + i), tail.row(i));
            }
        }
    }

    #[test]
    fn batched_step_matches_reverse_step() {
        let s = Schedule::vp_cosine();
        let d = GaussianData::diagonal(vec![1.0, -0.3], vec![0.5, 1.4]).unwrap();
        let o = GaussianOracle::new(d, s.clone(), PredKind::V).unwrap();
        for cfg in [SamplerConfig::ddim(6, 1), SamplerConfig::ddpm(6, 1), SamplerConfig::euler_flow(6, 1)] {
            let batch = sample(&o, &cfg, &s, 2, 2, None).unwrap();
            for chain in 0..2u64 {
                let mut rng = rng_for(1, chain);
                let mut x = crate::forward::standard_normal(&mut rng, 2);
                for (t, tp) in chain_times(&s, 6).unwrap() {
                    let xa = ndarray::Array2::from_shape_vec((1, 2), x.clone()).unwrap();
                    let out = o.predict(xa.view(), t, None).unwrap();
                    let p = Prediction::new(PredKind::V, out.row(0).to_vec(), t, x.clone()).unwrap();
                    x = reverse_step(&x, &p, t, tp, &cfg, &s, &mut rng).unwrap();
                }
                for j in 0..2 {
                    assert_relative_eq!(batch[[chain as usize, j]], x[j], max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::ddim(0, 0).validate().is_err());
        let mut c = SamplerConfig::ddim(5, 0);
        c.eta_mode = EtaMode::DdpmGamma;
        assert!(c.validate().is_err());
        assert!(SamplerConfig::euler_flow(5, 0).validate().is_ok());
    }

    #[test]
    fn ddpm_on_fine_ot_grid_overflows() {
        // gamma^2 > sigma_prev^2 near the clean end of the OT path.
        let s = Schedule::ot_flow();
        let o = point_mass(0.0, &s, PredKind::U);
        let r = sample(&o, &SamplerConfig::ddpm(100, 0), &s, 1, 1, None);
        assert!(matches!(r, Err(Error::GammaOverflow { .. })));
    }
}
