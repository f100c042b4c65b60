//! Randomized checks of the algebraic identities between parameterizations,
//! losses and weightings. Each check reports the worst relative error it saw.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::forward::{rng_for, standard_normal, TrainingPair};
use crate::mlp::Mlp;
use crate::param::{
    convert, target_value, v_from_eps_with_target, w_u_from_log_snr, weight, PredKind, Prediction,
    WeightKind,
};
use crate::schedule::Schedule;
use crate::toytrainer::{gradient, loss, Batch, Head, Supervision};

/// Worst relative error of one identity over a run.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub schedule: String,
    pub instances: usize,
    pub worst: f64,
    /// Multiplier on the requested tolerance for ill-conditioned checks.
    pub tolerance_factor: f64,
}

impl IdentityCheck {
    fn new(name: &'static str, s: &Schedule) -> Self {
        IdentityCheck {
            name,
            schedule: s.name().to_string(),
            instances: 0,
            worst: 0.0,
            tolerance_factor: 1.0,
        }
    }

    fn record(&mut self, err: f64) {
        self.instances += 1;
        if err > self.worst || err.is_nan() {
            self.worst = err;
        }
    }

    pub fn tolerance(&self, tol: f64) -> f64 {
        tol * self.tolerance_factor
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst <= self.tolerance(tol)
    }
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// `||a - b|| / max(||a||, ||b||)`.
pub fn rel_err_vec(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nd = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        nd / scale
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn targets(kind: PredKind, s: &Schedule, t: f64, x0: &[f64], eps: &[f64]) -> Vec<f64> {
    x0.iter()
        .zip(eps)
        .map(|(&x, &e)| target_value(kind, s, t, x, e))
        .collect()
}

/// Tolerance multiplier for `cross_eps_to_v_weight`.
pub const EPS_TO_V_TOLERANCE_FACTOR: f64 = 10.0;

/// Elements per random instance.
pub const INSTANCE_DIM: usize = 4;

/// Round-trip, loss-identity and weighting-identity checks over `n` random
/// `(x0, eps, t, prediction)` instances.
pub fn algebra_checks(s: &Schedule, n: usize, seed: u64) -> Result<Vec<IdentityCheck>> {
    let vp = s.is_vp();
    let mut round_trip = IdentityCheck::new("round_trip", s);
    let mut loss_eps = IdentityCheck::new("loss_eps_eq_snr_x0", s);
    let mut loss_v = IdentityCheck::new("loss_v_eq_snr_plus_one_x0", s);
    let mut loss_u = IdentityCheck::new("loss_u_eq_w_u_x0", s);
    let mut w_u_log = IdentityCheck::new("w_u_eq_log_snr_form", s);
    let mut eps_to_v = IdentityCheck::new("cross_eps_to_v_weight", s);
    // v and its cross-converted estimate agree up to O(alpha^2), so forming
    // both loses about u / alpha^2 of relative precision near t_max.
    eps_to_v.tolerance_factor = EPS_TO_V_TOLERANCE_FACTOR;
    let mut u_to_eps = IdentityCheck::new("cross_u_to_eps_weight", s);
    let mut inv_snr = IdentityCheck::new("loss_x0_eq_inv_snr_eps", s);

    let kinds: Vec<PredKind> = PredKind::ALL.into_iter().filter(|k| k.valid_on(s)).collect();
    let mut rng = rng_for(seed, 0);
    for _ in 0..n {
        let t = rng.random_range(s.t_min()..=s.t_max());
        let x0 = standard_normal(&mut rng, INSTANCE_DIM);
        let eps = standard_normal(&mut rng, INSTANCE_DIM);
        let pair = TrainingPair::new(x0.clone(), eps.clone(), t, vec![0.0; INSTANCE_DIM], s)?;
        let kind = kinds[rng.random_range(0..kinds.len())];
        let pred = Prediction::new(kind, standard_normal(&mut rng, INSTANCE_DIM), t, pair.xt.clone())?;

        let mut worst_rt: f64 = 0.0;
        for &from in &kinds {
            let p = convert(&pred, from, s)?;
            for &to in &kinds {
                let back = convert(&convert(&p, to, s)?, from, s)?;
                worst_rt = worst_rt.max(rel_err_vec(&p.value, &back.value));
            }
        }
        round_trip.record(worst_rt);

        let x0_hat = convert(&pred, PredKind::X0, s)?.value;
        let l_x0 = sq_dist(&x0, &x0_hat);
        let snr = s.snr(t)?;

        let eps_hat = convert(&pred, PredKind::Eps, s)?.value;
        loss_eps.record(rel_err(sq_dist(&eps, &eps_hat), snr * l_x0));

        let u_hat = convert(&pred, PredKind::U, s)?.value;
        let u = targets(PredKind::U, s, t, &x0, &eps);
        loss_u.record(rel_err(sq_dist(&u, &u_hat), weight(WeightKind::U, s, t)? * l_x0));
        w_u_log.record(rel_err(weight(WeightKind::U, s, t)?, w_u_from_log_snr(s, t)?));

        let eps_from_u = convert(&Prediction::new(PredKind::U, u_hat, t, pair.xt.clone())?, PredKind::Eps, s)?;
        u_to_eps.record(rel_err(
            sq_dist(&eps, &eps_from_u.value),
            weight(WeightKind::UToEps, s, t)? * l_x0,
        ));

        if vp {
            let v = targets(PredKind::V, s, t, &x0, &eps);
            let v_hat = convert(&pred, PredKind::V, s)?.value;
            loss_v.record(rel_err(sq_dist(&v, &v_hat), (snr + 1.0) * l_x0));
            let v_cross = v_from_eps_with_target(&eps_hat, &x0, s, t)?;
            eps_to_v.record(rel_err(
                sq_dist(&v, &v_cross),
                weight(WeightKind::EpsToV, s, t)? * l_x0,
            ));
        }

        let eps_pred = Prediction::new(PredKind::Eps, eps_hat, t, pair.xt.clone())?;
        inv_snr.record(rel_err(
            loss(&eps_pred, &pair, Supervision::X0FromNative, s)?,
            loss(&eps_pred, &pair, Supervision::InvSnrEps, s)?,
        ));
    }

    let mut out = vec![round_trip, loss_eps];
    if vp {
        out.push(loss_v);
    }
    out.extend([loss_u, w_u_log]);
    if vp {
        out.push(eps_to_v);
    }
    out.extend([u_to_eps, inv_snr]);
    Ok(out)
}

/// Shape of the network and batches used by [`gradient_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientProbe {
    pub dim: usize,
    pub hidden: usize,
    pub time_features: usize,
    pub batch: usize,
}

impl Default for GradientProbe {
    fn default() -> Self {
        GradientProbe {
            dim: 16,
            hidden: 32,
            time_features: 8,
            batch: 16,
        }
    }
}

fn random_batch(p: &GradientProbe, s: &Schedule, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let shape = (p.batch, p.dim);
    let x0 = Array2::from_shape_vec(shape, standard_normal(rng, p.batch * p.dim)).expect("shape");
    let eps = Array2::from_shape_vec(shape, standard_normal(rng, p.batch * p.dim)).expect("shape");
    let control = Array2::from_shape_fn(shape, |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    let t = (0..p.batch)
        .map(|_| rng.random_range(s.t_min()..=s.t_max()))
        .collect();
    Batch::from_parts(x0, eps, t, control, s)
}

/// Parameter gradients under x0 supervision and inverse-SNR eps supervision
/// of an eps-native network, compared on `n_batches` random batches with a
/// freshly initialized network per batch.
pub fn gradient_check(
    s: &Schedule,
    probe: &GradientProbe,
    n_batches: usize,
    seed: u64,
) -> Result<IdentityCheck> {
    let mut check = IdentityCheck::new("grad_x0_eq_inv_snr_eps", s);
    let sizes = [2 * probe.dim + probe.time_features, probe.hidden, probe.hidden, probe.dim];
    let head = Head {
        native: PredKind::Eps,
        time_features: probe.time_features,
        linear_skip: true,
    };
    let mut rng = rng_for(seed, 1);
    for _ in 0..n_batches {
        let mlp = Mlp::init(&sizes, &mut rng);
        let batch = random_batch(probe, s, &mut rng)?;
        let (_, ga) = gradient(&mlp, &head, &batch, Supervision::X0FromNative, s)?;
        let (_, gb) = gradient(&mlp, &head, &batch, Supervision::InvSnrEps, s)?;
        check.record(rel_err_vec(&ga.flatten(), &gb.flatten()));
    }
    Ok(check)
}
