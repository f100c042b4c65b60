use proptest::collection::vec;
use proptest::prelude::*;

use denoise_lab::forward::TrainingPair;
use denoise_lab::identities::{rel_err, rel_err_vec};
use denoise_lab::metrics::{aucc_at, ema_smooth, maucc, ConvergenceCurve, Direction, MauccConfig};
use denoise_lab::param::{convert, weight, WeightKind};
use denoise_lab::toytrainer::{loss, Supervision};
use denoise_lab::{PredKind, Prediction, Schedule};

const KINDS: [PredKind; 4] = [PredKind::X0, PredKind::Eps, PredKind::V, PredKind::U];

fn schedule(vp: bool) -> Schedule {
    if vp {
        Schedule::vp_cosine()
    } else {
        Schedule::ot_flow()
    }
}

fn curve(values: &[f64]) -> ConvergenceCurve {
    let points = values.iter().enumerate().map(|(i, &v)| (10 * (i as u64 + 1), v)).collect();
    ConvergenceCurve::new(points, "m", 1.0, Direction::HigherBetter).unwrap()
}

fn pair_and_prediction(
    x0: Vec<f64>,
    eps: Vec<f64>,
    raw: Vec<f64>,
    t: f64,
    native: PredKind,
    s: &Schedule,
) -> (TrainingPair, Prediction) {
    let n = x0.len();
    let pair = TrainingPair::new(x0, eps, t, vec![0.0; n], s).unwrap();
    let pred = Prediction::new(native, raw, t, pair.xt.clone()).unwrap();
    (pair, pred)
}

proptest! {
    #[test]
    fn conversions_round_trip(
        vp in any::<bool>(),
        from in 0usize..4,
        to in 0usize..4,
        t in 0.02f64..0.98,
        value in vec(-4.0f64..4.0, 6),
        state in vec(-4.0f64..4.0, 6),
    ) {
        let s = schedule(vp);
        let (from, to) = (KINDS[from], KINDS[to]);
        prop_assume!(from.valid_on(&s) && to.valid_on(&s));
        let p = Prediction::new(from, value.clone(), t, state).unwrap();
        let back = convert(&convert(&p, to, &s).unwrap(), from, &s).unwrap();
        let scale = value.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (a, b) in back.value.iter().zip(&value) {
            prop_assert!((a - b).abs() <= 1e-9 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn eps_loss_is_snr_weighted_x0_loss(
        vp in any::<bool>(),
        t in 0.02f64..0.98,
        x0 in vec(-2.0f64..2.0, 5),
        eps in vec(-2.0f64..2.0, 5),
        raw in vec(-2.0f64..2.0, 5),
    ) {
        let s = schedule(vp);
        let native = if vp { PredKind::Eps } else { PredKind::U };
        let (pair, pred) = pair_and_prediction(x0, eps, raw, t, native, &s);
        let l_x0 = loss(&pred, &pair, Supervision::X0FromNative, &s).unwrap();
        let l_eps = loss(&pred, &pair, Supervision::Eps, &s).unwrap();
        let l_u = loss(&pred, &pair, Supervision::U, &s).unwrap();
        prop_assert!(rel_err(l_eps, s.snr(t).unwrap() * l_x0) < 1e-9);
        prop_assert!(rel_err(l_u, weight(WeightKind::U, &s, t).unwrap() * l_x0) < 1e-9);
        if vp {
            let l_v = loss(&pred, &pair, Supervision::V, &s).unwrap();
            let l_inv = loss(&pred, &pair, Supervision::InvSnrEps, &s).unwrap();
            prop_assert!(rel_err(l_v, (s.snr(t).unwrap() + 1.0) * l_x0) < 1e-9);
            prop_assert!(rel_err(l_inv, l_x0) < 1e-9);
        }
    }

    #[test]
    fn maucc_respects_domination(
        base in vec(0.0f64..0.9, 2..40),
        lift in vec(0.0f64..0.1, 40),
        ema in 0.0f64..0.95,
    ) {
        let upper: Vec<f64> = base.iter().zip(&lift).map(|(b, l)| b + l).collect();
        let cfg = MauccConfig { ema_weight: ema, ..MauccConfig::default() };
        let lo = maucc(&curve(&base), &cfg).unwrap();
        let hi = maucc(&curve(&upper), &cfg).unwrap();
        prop_assert!(hi >= lo - 1e-12, "{hi} < {lo}");
        prop_assert!((0.0..=100.0).contains(&lo));
    }

    #[test]
    fn ema_stays_within_observed_range(values in vec(0.0f64..1.0, 1..60), w in 0.0f64..0.999) {
        let c = curve(&values);
        let smooth = ema_smooth(&c, w).unwrap();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(smooth.len(), c.len());
        prop_assert_eq!(smooth.points()[0].1, values[0]);
        for v in smooth.values() {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn full_horizon_is_plain_trapezoid(values in vec(0.0f64..1.0, 1..50)) {
        let c = curve(&values);
        let pts = c.points();
        // Left-constant extension from step 0 to the first record, then trapezoids.
        let mut area = pts[0].0 as f64 * pts[0].1;
        for w in pts.windows(2) {
            area += (w[1].0 - w[0].0) as f64 * (w[0].1 + w[1].1) / 2.0;
        }
        let expected = area / pts.last().unwrap().0 as f64;
        prop_assert!(rel_err(aucc_at(&c, 1.0).unwrap(), expected) < 1e-12);
    }

    #[test]
    fn gaussian_posterior_mean_matches_kind_conversion(
        t in 0.05f64..0.95,
        xt in vec(-3.0f64..3.0, 3),
    ) {
        use denoise_lab::oracle::{GaussianData, GaussianOracle};
        use denoise_lab::sampler::Predictor;
        let s = Schedule::vp_cosine();
        let data = GaussianData::diagonal(vec![0.5, -1.0, 0.0], vec![0.4, 1.0, 2.0]).unwrap();
        let states = ndarray::Array2::from_shape_vec((1, 3), xt.clone()).unwrap();
        let x0 = GaussianOracle::new(data.clone(), s.clone(), PredKind::X0).unwrap()
            .predict(states.view(), t, None).unwrap();
        let eps = GaussianOracle::new(data, s.clone(), PredKind::Eps).unwrap()
            .predict(states.view(), t, None).unwrap();
        let p = Prediction::new(PredKind::Eps, eps.row(0).to_vec(), t, xt).unwrap();
        let via = convert(&p, PredKind::X0, &s).unwrap();
        prop_assert!(rel_err_vec(&via.value, &x0.row(0).to_vec()) < 1e-9);
    }
}
