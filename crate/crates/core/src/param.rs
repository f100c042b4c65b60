//! Conversions between eps-, x0-, v- and u-predictions, and the loss
//! weightings they imply on the x0 regression loss.
//!
//! Every conversion is affine in `(value, state)` with time-dependent
//! coefficients, so each one is expressed as an [`Affine`] pair. Converting
//! between two non-x0 kinds routes through the x0 estimate.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::schedule::Schedule;

/// Denominators below this magnitude are rejected rather than clamped.
pub const SINGULAR_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PredKind {
    Eps,
    X0,
    V,
    U,
}

impl PredKind {
    pub const ALL: [PredKind; 4] = [PredKind::Eps, PredKind::X0, PredKind::V, PredKind::U];

    pub fn name(self) -> &'static str {
        match self {
            PredKind::Eps => "eps",
            PredKind::X0 => "x0",
            PredKind::V => "v",
            PredKind::U => "u",
        }
    }

    /// Whether this kind can be used with `s` (v needs a VP schedule).
    pub fn valid_on(self, s: &Schedule) -> bool {
        self != PredKind::V || s.is_vp()
    }
}

impl fmt::Display for PredKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PredKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eps" => Ok(PredKind::Eps),
            "x0" => Ok(PredKind::X0),
            "v" => Ok(PredKind::V),
            "u" => Ok(PredKind::U),
            other => Err(Error::Parse(format!("unknown prediction kind `{other}`"))),
        }
    }
}

/// A model output of a given kind, tied to the noisy state it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub kind: PredKind,
    pub value: Vec<f64>,
    pub t: f64,
    pub state: Vec<f64>,
}

impl Prediction {
    pub fn new(kind: PredKind, value: Vec<f64>, t: f64, state: Vec<f64>) -> Result<Self> {
        if value.len() != state.len() {
            return Err(Error::ShapeMismatch {
                expected: state.len(),
                got: value.len(),
            });
        }
        Ok(Prediction { kind, value, t, state })
    }
}

/// `out = on_value * value + on_state * state`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub on_value: f64,
    pub on_state: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        on_value: 1.0,
        on_state: 0.0,
    };

    #[inline]
    pub fn apply(&self, value: f64, state: f64) -> f64 {
        self.on_value * value + self.on_state * state
    }

    pub fn apply_slice(&self, value: &[f64], state: &[f64], out: &mut [f64]) {
        for ((o, &v), &x) in out.iter_mut().zip(value).zip(state) {
            *o = self.apply(v, x);
        }
    }
}

fn nonsingular(what: &'static str, value: f64) -> Result<f64> {
    if value.abs() < SINGULAR_TOL || !value.is_finite() {
        Err(Error::Singular { what, value })
    } else {
        Ok(value)
    }
}

/// Coefficients mapping a `kind` prediction to the x0 estimate at `t`.
pub fn to_x0_coeffs(kind: PredKind, s: &Schedule, t: f64) -> Result<Affine> {
    s.check_time(t)?;
    let (a, sg) = (s.alpha(t), s.sigma(t));
    match kind {
        PredKind::X0 => Ok(Affine::IDENTITY),
        PredKind::Eps => {
            let (c_skip, c_out) = precondition_coeffs(s, t)?;
            Ok(Affine {
                on_value: c_out,
                on_state: c_skip,
            })
        }
        PredKind::V => {
            if !s.is_vp() {
                return Err(Error::VpRequired);
            }
            // x0 = alpha x_t - sigma v
            Ok(Affine {
                on_value: -sg,
                on_state: a,
            })
        }
        PredKind::U => {
            let (ad, sd) = (s.alpha_dot(t), s.sigma_dot(t));
            let denom = nonsingular("alpha_dot sigma - alpha sigma_dot", ad * sg - a * sd)?;
            // x0 = (sigma u - sigma_dot x_t) / (alpha_dot sigma - alpha sigma_dot)
            Ok(Affine {
                on_value: sg / denom,
                on_state: -sd / denom,
            })
        }
    }
}

/// Coefficients mapping an x0 estimate to a `kind` prediction at `t`.
pub fn from_x0_coeffs(kind: PredKind, s: &Schedule, t: f64) -> Result<Affine> {
    s.check_time(t)?;
    let (a, sg) = (s.alpha(t), s.sigma(t));
    match kind {
        PredKind::X0 => Ok(Affine::IDENTITY),
        PredKind::Eps => {
            let sg = nonsingular("sigma", sg)?;
            // eps = (x_t - alpha x0) / sigma
            Ok(Affine {
                on_value: -a / sg,
                on_state: 1.0 / sg,
            })
        }
        PredKind::V => {
            if !s.is_vp() {
                return Err(Error::VpRequired);
            }
            let sg = nonsingular("sigma", sg)?;
            // v = alpha eps - sigma x0 with eps = (x_t - alpha x0) / sigma
            Ok(Affine {
                on_value: -(a * a / sg + sg),
                on_state: a / sg,
            })
        }
        PredKind::U => {
            let sg = nonsingular("sigma", sg)?;
            let (ad, sd) = (s.alpha_dot(t), s.sigma_dot(t));
            // u = ((alpha_dot sigma - alpha sigma_dot) / sigma) x0 + (sigma_dot / sigma) x_t
            Ok(Affine {
                on_value: (ad * sg - a * sd) / sg,
                on_state: sd / sg,
            })
        }
    }
}

/// Composite coefficients for `from -> to`; identity when the kinds match.
pub fn conversion_coeffs(from: PredKind, to: PredKind, s: &Schedule, t: f64) -> Result<Affine> {
    if from == to {
        if !from.valid_on(s) {
            return Err(Error::VpRequired);
        }
        s.check_time(t)?;
        return Ok(Affine::IDENTITY);
    }
    let into = to_x0_coeffs(from, s, t)?;
    let out = from_x0_coeffs(to, s, t)?;
    Ok(Affine {
        on_value: out.on_value * into.on_value,
        on_state: out.on_value * into.on_state + out.on_state,
    })
}

/// x0 estimate of `p`. Returns `p` unchanged when it is already x0.
pub fn to_x0(p: &Prediction, s: &Schedule) -> Result<Prediction> {
    if p.kind == PredKind::X0 {
        return Ok(p.clone());
    }
    let c = to_x0_coeffs(p.kind, s, p.t)?;
    let mut value = vec![0.0; p.value.len()];
    c.apply_slice(&p.value, &p.state, &mut value);
    Ok(Prediction {
        kind: PredKind::X0,
        value,
        t: p.t,
        state: p.state.clone(),
    })
}

/// Re-expresses `p` as a `target` prediction.
pub fn convert(p: &Prediction, target: PredKind, s: &Schedule) -> Result<Prediction> {
    if p.kind == target {
        if !target.valid_on(s) {
            return Err(Error::VpRequired);
        }
        return Ok(p.clone());
    }
    let x0 = to_x0(p, s)?;
    if target == PredKind::X0 {
        return Ok(x0);
    }
    let c = from_x0_coeffs(target, s, p.t)?;
    let mut value = vec![0.0; p.value.len()];
    c.apply_slice(&x0.value, &p.state, &mut value);
    Ok(Prediction {
        kind: target,
        value,
        t: p.t,
        state: x0.state,
    })
}

/// Ground-truth regression target of `kind` for a forward-process draw.
pub fn target_value(kind: PredKind, s: &Schedule, t: f64, x0: f64, eps: f64) -> f64 {
    match kind {
        PredKind::X0 => x0,
        PredKind::Eps => eps,
        PredKind::V => s.alpha(t) * eps - s.sigma(t) * x0,
        PredKind::U => s.alpha_dot(t) * x0 + s.sigma_dot(t) * eps,
    }
}

/// `v` built from an eps-prediction with the clean target substituted for the
/// x0 term: `alpha eps_hat - sigma x0`. Supervising v this way weights the x0
/// loss by `alpha^4 / sigma^2`.
pub fn v_from_eps_with_target(
    eps_hat: &[f64],
    x0: &[f64],
    s: &Schedule,
    t: f64,
) -> Result<Vec<f64>> {
    if !s.is_vp() {
        return Err(Error::VpRequired);
    }
    if eps_hat.len() != x0.len() {
        return Err(Error::ShapeMismatch {
            expected: x0.len(),
            got: eps_hat.len(),
        });
    }
    s.check_time(t)?;
    let (a, sg) = (s.alpha(t), s.sigma(t));
    Ok(eps_hat.iter().zip(x0).map(|(e, x)| a * e - sg * x).collect())
}

/// `(c_skip, c_out) = (1 / alpha, -sigma / alpha)`, so that
/// `x0_hat = c_skip x_t + c_out eps_hat`.
pub fn precondition_coeffs(s: &Schedule, t: f64) -> Result<(f64, f64)> {
    s.check_time(t)?;
    let a = nonsingular("alpha", s.alpha(t))?;
    Ok((1.0 / a, -s.sigma(t) / a))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightKind {
    Eps,
    V,
    U,
    X0,
    EpsToV,
    UToEps,
}

impl WeightKind {
    pub const ALL: [WeightKind; 6] = [
        WeightKind::Eps,
        WeightKind::V,
        WeightKind::U,
        WeightKind::X0,
        WeightKind::EpsToV,
        WeightKind::UToEps,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WeightKind::Eps => "w_eps",
            WeightKind::V => "w_v",
            WeightKind::U => "w_u",
            WeightKind::X0 => "w_x0",
            WeightKind::EpsToV => "w_eps_to_v",
            WeightKind::UToEps => "w_u_to_eps",
        }
    }
}

/// Weight on `||x0 - x0_hat||^2` that reproduces each loss.
pub fn weight(kind: WeightKind, s: &Schedule, t: f64) -> Result<f64> {
    s.check_time(t)?;
    let (a, sg) = (s.alpha(t), s.sigma(t));
    let sg = nonsingular("sigma", sg)?;
    let sg2 = sg * sg;
    Ok(match kind {
        WeightKind::X0 => 1.0,
        WeightKind::Eps | WeightKind::UToEps => a * a / sg2,
        WeightKind::V => {
            if !s.is_vp() {
                return Err(Error::VpRequired);
            }
            1.0 / sg2
        }
        WeightKind::U => {
            let r = (s.alpha_dot(t) * sg - a * s.sigma_dot(t)) / sg;
            r * r
        }
        WeightKind::EpsToV => {
            if !s.is_vp() {
                return Err(Error::VpRequired);
            }
            a * a * a * a / sg2
        }
    })
}

/// `w_u` through the log-SNR route, `(alpha^2 / 4) (d log SNR / dt)^2`.
pub fn w_u_from_log_snr(s: &Schedule, t: f64) -> Result<f64> {
    let a = s.alpha(t);
    let d = s.dlog_snr_dt(t)?;
    Ok(a * a / 4.0 * d * d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Table schedule with alpha = 0.8, sigma = 0.6 at t = 0.5.
    fn vp86() -> Schedule {
        Schedule::parse_table("# schedule: vp\n0 1\n0.5 0.8\n1 0\n").unwrap()
    }

    fn pred(kind: PredKind, v: f64, t: f64, x: f64) -> Prediction {
        Prediction::new(kind, vec![v], t, vec![x]).unwrap()
    }

    #[test]
    fn eps_to_x0_example() {
        let s = vp86();
        assert_relative_eq!(s.sigma(0.5), 0.6, max_relative = 1e-15);
        let p = pred(PredKind::Eps, 1.0, 0.5, 2.2);
        assert_relative_eq!(to_x0(&p, &s).unwrap().value[0], 2.0, max_relative = 1e-15);
    }

    #[test]
    fn u_to_x0_on_ot_example() {
        // x0 = 1, eps = 0, t = 0.5: x_t = 0.5 and u = eps - x0 = -1.
        let s = Schedule::ot_flow();
        let p = pred(PredKind::U, -1.0, 0.5, 0.5);
        assert_relative_eq!(to_x0(&p, &s).unwrap().value[0], 1.0, max_relative = 1e-15);
    }

    #[test]
    fn x0_is_identity() {
        let s = Schedule::ot_flow();
        let p = pred(PredKind::X0, 0.3, 0.7, -1.1);
        assert_eq!(to_x0(&p, &s).unwrap(), p);
        let e = pred(PredKind::Eps, 0.3, 0.7, -1.1);
        assert_eq!(convert(&e, PredKind::Eps, &s).unwrap(), e);
    }

    #[test]
    fn x0_to_v_example() {
        let s = vp86();
        let p = pred(PredKind::X0, 2.0, 0.5, 2.2);
        assert_relative_eq!(
            convert(&p, PredKind::V, &s).unwrap().value[0],
            -0.4,
            max_relative = 1e-14
        );
    }

    #[test]
    fn x0_to_u_on_ot_simplifies() {
        let s = Schedule::ot_flow();
        for (t, x, p0) in [(0.3, 0.4, -0.2), (0.75, 1.5, 0.9), (0.5, 0.0, 1.0)] {
            let p = pred(PredKind::X0, p0, t, x);
            let u = convert(&p, PredKind::U, &s).unwrap().value[0];
            let eps_hat = (x - (1.0 - t) * p0) / t;
            assert_relative_eq!(u, eps_hat - p0, max_relative = 1e-13, epsilon = 1e-15);
        }
    }

    #[test]
    fn v_rejected_off_vp() {
        let s = Schedule::ot_flow();
        let p = pred(PredKind::X0, 1.0, 0.5, 0.5);
        assert!(matches!(convert(&p, PredKind::V, &s), Err(Error::VpRequired)));
        let v = pred(PredKind::V, 1.0, 0.5, 0.5);
        assert!(matches!(to_x0(&v, &s), Err(Error::VpRequired)));
        assert!(matches!(weight(WeightKind::V, &s, 0.5), Err(Error::VpRequired)));
    }

    #[test]
    fn singular_conversions_raise() {
        let s = Schedule::ot_flow().with_clip(0.0, 1.0).unwrap();
        let p = pred(PredKind::Eps, 1.0, 1.0, 0.5);
        assert!(matches!(to_x0(&p, &s), Err(Error::Singular { .. })));
        let x = pred(PredKind::X0, 1.0, 0.0, 0.5);
        assert!(matches!(convert(&x, PredKind::Eps, &s), Err(Error::Singular { .. })));
        assert!(matches!(precondition_coeffs(&s, 1.0), Err(Error::Singular { .. })));
    }

    #[test]
    fn out_of_clip_is_domain_error() {
        let s = Schedule::vp_cosine();
        let p = pred(PredKind::Eps, 1.0, 0.99999, 0.5);
        assert!(matches!(to_x0(&p, &s), Err(Error::Domain { .. })));
        assert!(weight(WeightKind::X0, &s, 0.0).is_err());
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(
            Prediction::new(PredKind::Eps, vec![1.0], 0.5, vec![1.0, 2.0]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn weight_examples() {
        let ot = Schedule::ot_flow();
        assert_relative_eq!(weight(WeightKind::U, &ot, 0.5).unwrap(), 4.0, max_relative = 1e-15);
        let vc = Schedule::vp_cosine();
        assert_relative_eq!(weight(WeightKind::Eps, &vc, 0.5).unwrap(), 1.0, max_relative = 1e-14);
        assert_relative_eq!(weight(WeightKind::V, &vc, 0.5).unwrap(), 2.0, max_relative = 1e-14);
        for s in [&ot, &vc] {
            for t in [1e-4, 0.3, 0.9999] {
                assert_eq!(weight(WeightKind::X0, s, t).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn w_u_on_ot_matches_numeric_derivative_oracle() {
        // Rebuild alpha, sigma numerically and plug into ((a' s - a s') / s)^2.
        let s = Schedule::ot_flow();
        let h = 1e-6;
        for t in [0.1, 0.25, 0.5, 0.8] {
            let ad = ((1.0 - (t + h)) - (1.0 - (t - h))) / (2.0 * h);
            let sd = ((t + h) - (t - h)) / (2.0 * h);
            let r = (ad * t - (1.0 - t) * sd) / t;
            assert_relative_eq!(weight(WeightKind::U, &s, t).unwrap(), r * r, max_relative = 1e-8);
            assert_relative_eq!(weight(WeightKind::U, &s, t).unwrap(), 1.0 / (t * t), max_relative = 1e-14);
        }
    }

    #[test]
    fn w_u_two_routes_agree() {
        for s in [Schedule::ot_flow(), Schedule::vp_cosine(), Schedule::vp_linear()] {
            for i in 0..200 {
                let t = s.t_min() + (s.t_max() - s.t_min()) * i as f64 / 199.0;
                let a = weight(WeightKind::U, &s, t).unwrap();
                let b = w_u_from_log_snr(&s, t).unwrap();
                assert!((a - b).abs() <= 1e-8 * a.abs().max(b.abs()), "{} t={t}", s.name());
            }
        }
    }

    #[test]
    fn w_v_minus_w_eps_is_one_on_vp() {
        for s in [Schedule::vp_cosine(), Schedule::vp_linear()] {
            for i in 0..200 {
                let t = s.t_min() + (s.t_max() - s.t_min()) * i as f64 / 199.0;
                let wv = weight(WeightKind::V, &s, t).unwrap();
                let we = weight(WeightKind::Eps, &s, t).unwrap();
                assert!((wv - we - 1.0).abs() <= 1e-10 * wv, "t={t}");
            }
        }
    }

    #[test]
    fn precondition_examples() {
        let s = vp86();
        let (cs, co) = precondition_coeffs(&s, 0.5).unwrap();
        assert_relative_eq!(cs, 1.25, max_relative = 1e-15);
        assert_relative_eq!(co, -0.75, max_relative = 1e-15);

        let vc = Schedule::vp_cosine();
        let (cs, co) = precondition_coeffs(&vc, vc.t_min()).unwrap();
        assert!((cs - 1.0).abs() < 1e-7 && co.abs() < 1e-3);

        // Forward-process triple: c_skip x_t + c_out eps recovers x0.
        let (x0, e) = (2.0, 1.0);
        let xt = 0.8 * x0 + 0.6 * e;
        let (cs, co) = precondition_coeffs(&s, 0.5).unwrap();
        assert_relative_eq!(cs * xt + co * e, x0, max_relative = 1e-15);
    }

    #[test]
    fn precondition_is_bitwise_to_x0() {
        let s = Schedule::vp_cosine();
        for (t, x, e) in [(0.1, 0.3, -1.2), (0.6, 2.0, 0.4), (0.97, -0.5, 0.9)] {
            let (cs, co) = precondition_coeffs(&s, t).unwrap();
            let via_to_x0 = to_x0(&pred(PredKind::Eps, e, t, x), &s).unwrap().value[0];
            assert_eq!((co * e + cs * x).to_bits(), via_to_x0.to_bits());
        }
    }

    #[test]
    fn composite_coeffs_match_two_step_convert() {
        let s = Schedule::vp_cosine();
        for from in PredKind::ALL {
            for to in PredKind::ALL {
                let c = conversion_coeffs(from, to, &s, 0.4).unwrap();
                let p = pred(from, 0.7, 0.4, -0.3);
                let direct = convert(&p, to, &s).unwrap().value[0];
                assert_relative_eq!(c.apply(0.7, -0.3), direct, max_relative = 1e-12, epsilon = 1e-14);
            }
        }
    }
}
