//! Desk-scale controllable-generation experiment.
//!
//! A conditional MLP sees `(x_t, control mask, Fourier(t))` and outputs a
//! native eps- or u-prediction. The supervision mode decides which quantity
//! the loss compares after converting the native output:
//!
//! | mode             | loss per element                          |
//! |------------------|-------------------------------------------|
//! | `eps`            | `(eps - eps_hat)^2`                       |
//! | `v`              | `(v - v_hat)^2` (VP only)                 |
//! | `u`              | `(u - u_hat)^2`                           |
//! | `x0_from_native` | `(x0 - x0_hat)^2`                         |
//! | `inv_snr_eps`    | `sigma^2 / alpha^2 (eps - eps_hat)^2`     |
//!
//! The last two are the same scalar for an eps-native model.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::forward::{rng_for, sample_time, standard_normal, TimeDist, TrainingPair};
use crate::metrics::{mask_iou, ConvergenceCurve, Direction};
use crate::mlp::{Adam, Cache, Grads, Mlp};
use crate::param::{conversion_coeffs, convert, target_value, PredKind, Prediction};
use crate::sampler::{sample, Predictor, SamplerConfig};
use crate::schedule::Schedule;

/// Losses above this abort training.
pub const DIVERGENCE_LOSS: f64 = 1e6;

const EVAL_CONTROL_STREAM: u64 = 0xE7A1;
const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Supervision {
    Eps,
    V,
    U,
    X0FromNative,
    InvSnrEps,
}

impl Supervision {
    pub fn name(self) -> &'static str {
        match self {
            Supervision::Eps => "eps",
            Supervision::V => "v",
            Supervision::U => "u",
            Supervision::X0FromNative => "x0_from_native",
            Supervision::InvSnrEps => "inv_snr_eps",
        }
    }

    /// Kind the native output is converted to before comparison.
    pub fn target_kind(self) -> PredKind {
        match self {
            Supervision::Eps | Supervision::InvSnrEps => PredKind::Eps,
            Supervision::V => PredKind::V,
            Supervision::U => PredKind::U,
            Supervision::X0FromNative => PredKind::X0,
        }
    }

    /// Per-sample loss weight at `t`.
    pub fn weight(self, s: &Schedule, t: f64) -> f64 {
        match self {
            Supervision::InvSnrEps => {
                let (a, sg) = (s.alpha(t), s.sigma(t));
                sg * sg / (a * a)
            }
            _ => 1.0,
        }
    }

    /// Checks the mode against the native kind and schedule.
    pub fn check(self, native: PredKind, s: &Schedule) -> Result<()> {
        if !matches!(native, PredKind::Eps | PredKind::U) {
            return Err(Error::Incompatible(format!(
                "native kind must be eps or u, got {native}"
            )));
        }
        if self == Supervision::V && !s.is_vp() {
            return Err(Error::Incompatible("v supervision needs a VP schedule".into()));
        }
        if self == Supervision::InvSnrEps && native != PredKind::Eps {
            return Err(Error::Incompatible(
                "inv_snr_eps supervision needs an eps-native model".into(),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eps" => Ok(Supervision::Eps),
            "v" => Ok(Supervision::V),
            "u" => Ok(Supervision::U),
            "x0_from_native" | "x0" => Ok(Supervision::X0FromNative),
            "inv_snr_eps" => Ok(Supervision::InvSnrEps),
            other => Err(Error::Parse(format!("unknown supervision `{other}`"))),
        }
    }
}

/// Per-sample loss: mean over elements of the weighted squared error.
pub fn loss(pred: &Prediction, pair: &TrainingPair, mode: Supervision, s: &Schedule) -> Result<f64> {
    mode.check(pred.kind, s)?;
    if pred.value.len() != pair.x0.len() {
        return Err(Error::ShapeMismatch {
            expected: pair.x0.len(),
            got: pred.value.len(),
        });
    }
    let target = mode.target_kind();
    let hat = convert(pred, target, s)?;
    let w = mode.weight(s, pair.t);
    let sum: f64 = hat
        .value
        .iter()
        .zip(pair.x0.iter().zip(&pair.eps))
        .map(|(h, (&x0, &e))| {
            let d = h - target_value(target, s, pair.t, x0, e);
            d * d
        })
        .sum();
    Ok(w * sum / pair.x0.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub image_side: usize,
    pub mask_blobs: (usize, usize),
    pub texture_amp: f64,
    pub seed: u64,
}

impl Default for ToyTask {
    fn default() -> Self {
        ToyTask {
            image_side: 16,
            mask_blobs: (1, 3),
            texture_amp: 0.25,
            seed: 0,
        }
    }
}

/// Coarse grid of the band-limited texture.
const TEXTURE_GRID: usize = 4;

impl ToyTask {
    pub fn dim(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side < 4 {
            return Err(Error::Config("image_side must be at least 4".into()));
        }
        let (lo, hi) = self.mask_blobs;
        if lo == 0 || hi < lo {
            return Err(Error::Config("mask_blobs must be a range with min >= 1".into()));
        }
        if !(self.texture_amp >= 0.0) {
            return Err(Error::Config("texture_amp must be non-negative".into()));
        }
        Ok(())
    }

    /// Union of random ellipses, as a `{0, 1}` image.
    pub fn sample_control(&self, rng: &mut impl Rng) -> Vec<f64> {
        let n = self.image_side;
        let side = n as f64;
        let blobs = rng.random_range(self.mask_blobs.0..=self.mask_blobs.1);
        let mut c = vec![0.0; n * n];
        for _ in 0..blobs {
            let cy = rng.random_range(0.0..side);
            let cx = rng.random_range(0.0..side);
            let ry = rng.random_range(2.0..2.0 + side / 4.0);
            let rx = rng.random_range(2.0..2.0 + side / 4.0);
            for r in 0..n {
                for col in 0..n {
                    let dy = (r as f64 + 0.5 - cy) / ry;
                    let dx = (col as f64 + 0.5 - cx) / rx;
                    if dy * dy + dx * dx <= 1.0 {
                        c[r * n + col] = 1.0;
                    }
                }
            }
        }
        c
    }

    /// Clean image for a control: blurred mask mapped to `[-1, 1]` plus a
    /// smooth texture, clipped to `[-1, 1]`.
    pub fn render(&self, control: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let n = self.image_side;
        let coarse: Vec<f64> = (0..TEXTURE_GRID * TEXTURE_GRID)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let blurred = box_blur(control, n);
        (0..n * n)
            .map(|i| {
                let (r, c) = (i / n, i % n);
                let tex = bilinear(&coarse, TEXTURE_GRID, r, c, n);
                (blurred[i] * 2.0 - 1.0 + self.texture_amp * tex).clamp(-1.0, 1.0)
            })
            .collect()
    }

    /// `n` (clean image, control) rows.
    pub fn draw(&self, rng: &mut impl Rng, n: usize) -> (Array2<f64>, Array2<f64>) {
        let d = self.dim();
        let mut x0 = Array2::zeros((n, d));
        let mut ctrl = Array2::zeros((n, d));
        for i in 0..n {
            let c = self.sample_control(rng);
            let img = self.render(&c, rng);
            x0.row_mut(i).assign(&ndarray::ArrayView1::from(&img));
            ctrl.row_mut(i).assign(&ndarray::ArrayView1::from(&c));
        }
        (x0, ctrl)
    }

    /// Held-out controls, fixed by the task seed and disjoint from the
    /// training stream.
    pub fn eval_controls(&self, n: usize) -> Array2<f64> {
        let mut rng = rng_for(self.seed, EVAL_CONTROL_STREAM);
        self.draw(&mut rng, n).1
    }
}

fn box_blur(img: &[f64], n: usize) -> Vec<f64> {
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, n as isize - 1) as usize;
        let c = c.clamp(0, n as isize - 1) as usize;
        img[r * n + c]
    };
    (0..n * n)
        .map(|i| {
            let (r, c) = ((i / n) as isize, (i % n) as isize);
            let mut acc = 0.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    acc += at(r + dr, c + dc);
                }
            }
            acc / 9.0
        })
        .collect()
}

fn bilinear(grid: &[f64], g: usize, r: usize, c: usize, n: usize) -> f64 {
    let scale = (g - 1) as f64 / (n - 1) as f64;
    let (y, x) = (r as f64 * scale, c as f64 * scale);
    let (y0, x0) = ((y.floor() as usize).min(g - 2), (x.floor() as usize).min(g - 2));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let v = |yy: usize, xx: usize| grid[yy * g + xx];
    (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x0 + 1))
        + fy * ((1.0 - fx) * v(y0 + 1, x0) + fx * v(y0 + 1, x0 + 1))
}

/// Fourier time features: `sin(2^k pi t), cos(2^k pi t)` for
/// `k = 0 .. width / 2 - 1`.
pub fn time_features(t: f64, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(width);
    for k in 0..width / 2 {
        let w = (1u64 << k) as f64 * std::f64::consts::PI * t;
        out.push(w.sin());
        out.push(w.cos());
    }
    out
}

/// Rows of `[x_t | control | Fourier(t)]`.
pub fn network_input(
    xt: ArrayView2<'_, f64>,
    control: ArrayView2<'_, f64>,
    ts: &[f64],
    width: usize,
) -> Array2<f64> {
    let (n, d) = xt.dim();
    let mut input = Array2::zeros((n, 2 * d + width));
    input.slice_mut(s![.., ..d]).assign(&xt);
    input.slice_mut(s![.., d..2 * d]).assign(&control);
    for (i, &t) in ts.iter().enumerate() {
        for (j, f) in time_features(t, width).into_iter().enumerate() {
            input[[i, 2 * d + j]] = f;
        }
    }
    input
}

/// A minibatch of forward-process draws, one row per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x0: Array2<f64>,
    pub eps: Array2<f64>,
    pub t: Vec<f64>,
    pub xt: Array2<f64>,
    pub control: Array2<f64>,
}

impl Batch {
    pub fn from_parts(
        x0: Array2<f64>,
        eps: Array2<f64>,
        t: Vec<f64>,
        control: Array2<f64>,
        s: &Schedule,
    ) -> Result<Self> {
        if x0.dim() != eps.dim() || x0.dim() != control.dim() || t.len() != x0.nrows() {
            return Err(Error::ShapeMismatch {
                expected: x0.len(),
                got: eps.len(),
            });
        }
        let mut xt = Array2::zeros(x0.raw_dim());
        for (i, &ti) in t.iter().enumerate() {
            let (a, sg) = (s.alpha(ti), s.sigma(ti));
            ndarray::Zip::from(xt.row_mut(i))
                .and(x0.row(i))
                .and(eps.row(i))
                .for_each(|o, &x, &e| *o = a * x + sg * e);
        }
        Ok(Batch { x0, eps, t, xt, control })
    }

    /// Draws images, times and noise from `rng`.
    pub fn draw(task: &ToyTask, s: &Schedule, n: usize, rng: &mut impl Rng) -> Result<Self> {
        let (x0, control) = task.draw(rng, n);
        let t: Vec<f64> = (0..n).map(|_| sample_time(rng, s, TimeDist::Uniform)).collect();
        let eps = Array2::from_shape_vec(x0.raw_dim(), standard_normal(rng, x0.len()))
            .expect("shape");
        Self::from_parts(x0, eps, t, control, s)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn pair(&self, i: usize) -> TrainingPair {
        TrainingPair {
            x0: self.x0.row(i).to_vec(),
            eps: self.eps.row(i).to_vec(),
            t: self.t[i],
            xt: self.xt.row(i).to_vec(),
            control: self.control.row(i).to_vec(),
        }
    }

    /// The batch stacked with itself.
    pub fn duplicated(&self) -> Self {
        let cat = |a: &Array2<f64>| ndarray::concatenate![ndarray::Axis(0), a.view(), a.view()];
        Batch {
            x0: cat(&self.x0),
            eps: cat(&self.eps),
            t: self.t.iter().chain(&self.t).copied().collect(),
            xt: cat(&self.xt),
            control: cat(&self.control),
        }
    }
}

/// Mean loss over batch and elements for native outputs `out`, and its
/// gradient with respect to `out`.
pub fn batch_loss_and_output_grad(
    out: ArrayView2<'_, f64>,
    batch: &Batch,
    mode: Supervision,
    native: PredKind,
    s: &Schedule,
) -> Result<(f64, Array2<f64>)> {
    mode.check(native, s)?;
    if out.dim() != batch.x0.dim() {
        return Err(Error::ShapeMismatch {
            expected: batch.x0.len(),
            got: out.len(),
        });
    }
    let target = mode.target_kind();
    let (n, d) = out.dim();
    let norm = (n * d) as f64;
    let mut grad = Array2::zeros((n, d));
    let mut total = 0.0;
    for i in 0..n {
        let t = batch.t[i];
        let c = conversion_coeffs(native, target, s, t)?;
        let w = mode.weight(s, t);
        let mut row_sum = 0.0;
        for j in 0..d {
            let hat = c.apply(out[[i, j]], batch.xt[[i, j]]);
            let diff = hat - target_value(target, s, t, batch.x0[[i, j]], batch.eps[[i, j]]);
            row_sum += diff * diff;
            grad[[i, j]] = 2.0 * w * diff * c.on_value / norm;
        }
        total += w * row_sum;
    }
    Ok((total / norm, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub supervision: Supervision,
    pub native_kind: PredKind,
    pub schedule: String,
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub hidden: usize,
    pub time_features: usize,
    pub eval_samples: usize,
    pub eval_steps: usize,
    pub eval_seed: u64,
    pub linear_skip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            supervision: Supervision::Eps,
            native_kind: PredKind::Eps,
            schedule: "vp_linear".into(),
            lr: 1e-3,
            batch: 64,
            steps: 5000,
            eval_every: 100,
            seed: 0,
            hidden: 256,
            time_features: 16,
            eval_samples: 32,
            eval_steps: 20,
            eval_seed: 1234,
            linear_skip: true,
        }
    }
}

impl TrainConfig {
    /// eps-native for VP schedules, u-native otherwise.
    pub fn default_native(s: &Schedule) -> PredKind {
        if s.is_vp() {
            PredKind::Eps
        } else {
            PredKind::U
        }
    }

    pub fn validate(&self, s: &Schedule) -> Result<()> {
        self.supervision.check(self.native_kind, s)?;
        if !(self.lr > 0.0) || self.batch == 0 || self.eval_every == 0 {
            return Err(Error::Config("lr, batch and eval_every must be positive".into()));
        }
        if self.hidden == 0 || !self.time_features.is_multiple_of(2) || self.time_features == 0 {
            return Err(Error::Config(
                "hidden must be positive and time_features a positive even number".into(),
            ));
        }
        if self.time_features / 2 > 52 {
            return Err(Error::Config("too many time features".into()));
        }
        if self.eval_samples == 0 || self.eval_steps == 0 {
            return Err(Error::Config("eval_samples and eval_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn head(&self) -> Head {
        Head {
            native: self.native_kind,
            time_features: self.time_features,
            linear_skip: self.linear_skip,
        }
    }

    pub fn layer_sizes(&self, dim: usize) -> Vec<usize> {
        vec![2 * dim + self.time_features, self.hidden, self.hidden, dim]
    }
}

/// How raw network outputs become native predictions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Head {
    pub native: PredKind,
    pub time_features: usize,
    pub linear_skip: bool,
}

/// Coefficient of the linear least-squares estimate of the `kind` target from
/// `x_t`, for unit-variance data: `(a alpha + b sigma) / (alpha^2 + sigma^2)`
/// when the target is `a x0 + b eps`.
pub fn skip_coeff(kind: PredKind, s: &Schedule, t: f64) -> f64 {
    let (a, sg) = (s.alpha(t), s.sigma(t));
    target_value(kind, s, t, a, sg) / (a * a + sg * sg)
}

impl Head {
    fn add_skip(&self, out: &mut Array2<f64>, xt: ArrayView2<'_, f64>, ts: &[f64], s: &Schedule) {
        if !self.linear_skip {
            return;
        }
        for ((mut row, x), &t) in out.outer_iter_mut().zip(xt.outer_iter()).zip(ts) {
            let k = skip_coeff(self.native, s, t);
            row.zip_mut_with(&x, |o, &x| *o += k * x);
        }
    }

    /// Native predictions for rows of `xt` at per-row times `ts`.
    pub fn output(
        &self,
        mlp: &Mlp,
        xt: ArrayView2<'_, f64>,
        control: ArrayView2<'_, f64>,
        ts: &[f64],
        s: &Schedule,
    ) -> Array2<f64> {
        let input = network_input(xt, control, ts, self.time_features);
        let mut out = mlp.forward(input.view());
        self.add_skip(&mut out, xt, ts, s);
        out
    }

    fn output_cached(
        &self,
        mlp: &Mlp,
        xt: ArrayView2<'_, f64>,
        control: ArrayView2<'_, f64>,
        ts: &[f64],
        s: &Schedule,
    ) -> (Array2<f64>, Cache) {
        let input = network_input(xt, control, ts, self.time_features);
        let (mut out, cache) = mlp.forward_cached(input.view());
        self.add_skip(&mut out, xt, ts, s);
        (out, cache)
    }
}

/// Network weights plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub mlp: Mlp,
    pub optimizer: Adam,
    pub head: Head,
}

impl ModelParams {
    pub fn init(cfg: &TrainConfig, dim: usize) -> Self {
        let mut rng = rng_for(cfg.seed, INIT_STREAM);
        let mlp = Mlp::init(&cfg.layer_sizes(dim), &mut rng);
        let optimizer = Adam::new(&mlp, cfg.lr);
        ModelParams {
            mlp,
            optimizer,
            head: cfg.head(),
        }
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn predictor<'a>(&'a self, s: &'a Schedule) -> ConditionalModel<'a> {
        ConditionalModel {
            mlp: &self.mlp,
            head: self.head,
            schedule: s,
        }
    }
}

/// The network viewed as a conditional [`Predictor`].
pub struct ConditionalModel<'a> {
    pub mlp: &'a Mlp,
    pub head: Head,
    pub schedule: &'a Schedule,
}

impl Predictor for ConditionalModel<'_> {
    fn kind(&self) -> PredKind {
        self.head.native
    }

    fn predict(
        &self,
        states: ArrayView2<'_, f64>,
        t: f64,
        controls: Option<ArrayView2<'_, f64>>,
    ) -> Result<Array2<f64>> {
        let controls = controls
            .ok_or_else(|| Error::Config("conditional model needs controls".into()))?;
        let ts = vec![t; states.nrows()];
        Ok(self.head.output(self.mlp, states, controls, &ts, self.schedule))
    }
}

/// Batch loss and parameter gradients.
pub fn gradient(
    mlp: &Mlp,
    head: &Head,
    batch: &Batch,
    mode: Supervision,
    s: &Schedule,
) -> Result<(f64, Grads)> {
    let (out, cache) =
        head.output_cached(mlp, batch.xt.view(), batch.control.view(), &batch.t, s);
    let (l, d_out) = batch_loss_and_output_grad(out.view(), batch, mode, head.native, s)?;
    Ok((l, mlp.backward(&cache, d_out)))
}

/// Scalar batch loss without gradients.
pub fn batch_loss(
    mlp: &Mlp,
    head: &Head,
    batch: &Batch,
    mode: Supervision,
    s: &Schedule,
) -> Result<f64> {
    let out = head.output(mlp, batch.xt.view(), batch.control.view(), &batch.t, s);
    Ok(batch_loss_and_output_grad(out.view(), batch, mode, head.native, s)?.0)
}

/// Control fidelity of the current model on the held-out controls.
pub fn evaluate(params: &ModelParams, cfg: &TrainConfig, task: &ToyTask, s: &Schedule) -> Result<f64> {
    let controls = task.eval_controls(cfg.eval_samples);
    let sampler = SamplerConfig::ddim(cfg.eval_steps, cfg.eval_seed);
    let samples = sample(
        &params.predictor(s),
        &sampler,
        s,
        cfg.eval_samples,
        task.dim(),
        Some(controls.view()),
    )?;
    mask_iou(samples.view(), controls.view())
}

pub fn train(cfg: &TrainConfig, task: &ToyTask) -> Result<(ModelParams, ConvergenceCurve)> {
    let s = Schedule::from_name(&cfg.schedule)?;
    train_with_schedule(cfg, task, &s, |_, _| {})
}

/// Training loop; `on_eval(step, metric)` is called after every evaluation.
pub fn train_with_schedule(
    cfg: &TrainConfig,
    task: &ToyTask,
    s: &Schedule,
    mut on_eval: impl FnMut(u64, f64),
) -> Result<(ModelParams, ConvergenceCurve)> {
    cfg.validate(s)?;
    task.validate()?;
    let mut params = ModelParams::init(cfg, task.dim());
    let mut curve = ConvergenceCurve::empty("mask_iou", 100.0, Direction::HigherBetter);
    let mut rng = rng_for(cfg.seed, TRAIN_STREAM);
    for step in 1..=cfg.steps {
        let batch = Batch::draw(task, s, cfg.batch, &mut rng)?;
        let (l, grads) = gradient(&params.mlp, &params.head, &batch, cfg.supervision, s)?;
        if !l.is_finite() {
            return Err(Error::NonFinite { step, what: "loss".into() });
        }
        if l > DIVERGENCE_LOSS {
            return Err(Error::Divergence { step, loss: l });
        }
        params.optimizer.update(&mut params.mlp, &grads);
        if !params.mlp.all_finite() {
            return Err(Error::NonFinite { step, what: "parameters".into() });
        }
        if step % cfg.eval_every == 0 {
            let m = evaluate(&params, cfg, task, s)?;
            curve.push(step, m)?;
            on_eval(step, m);
        }
    }
    Ok((params, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn vp86() -> Schedule {
        Schedule::parse_table("# schedule: vp\n0 1\n0.5 0.8\n1 0\n").unwrap()
    }

    fn small_cfg(mode: Supervision, native: PredKind, schedule: &str) -> TrainConfig {
        TrainConfig {
            supervision: mode,
            native_kind: native,
            schedule: schedule.into(),
            batch: 8,
            steps: 20,
            eval_every: 10,
            hidden: 16,
            time_features: 4,
            eval_samples: 4,
            eval_steps: 3,
            ..TrainConfig::default()
        }
    }

    fn small_task() -> ToyTask {
        ToyTask {
            image_side: 4,
            ..ToyTask::default()
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let s = Schedule::vp_cosine();
        let pair = TrainingPair::new(vec![0.3, -0.8], vec![1.1, 0.2], 0.4, vec![1.0, 0.0], &s).unwrap();
        let p = Prediction::new(PredKind::Eps, pair.eps.clone(), pair.t, pair.xt.clone()).unwrap();
        for mode in [
            Supervision::Eps,
            Supervision::V,
            Supervision::U,
            Supervision::X0FromNative,
            Supervision::InvSnrEps,
        ] {
            assert!(loss(&p, &pair, mode, &s).unwrap() < 1e-28, "{mode}");
        }
    }

    #[test]
    fn scalar_loss_example() {
        // alpha = 0.8, sigma = 0.6, x0 = 2, eps = 1, x0_hat = 1.5.
        let s = vp86();
        let pair = TrainingPair::new(vec![2.0], vec![1.0], 0.5, vec![0.0], &s).unwrap();
        let eps_hat = (pair.xt[0] - 0.8 * 1.5) / 0.6;
        let p = Prediction::new(PredKind::Eps, vec![eps_hat], 0.5, pair.xt.clone()).unwrap();
        let lx0 = loss(&p, &pair, Supervision::X0FromNative, &s).unwrap();
        let leps = loss(&p, &pair, Supervision::Eps, &s).unwrap();
        let linv = loss(&p, &pair, Supervision::InvSnrEps, &s).unwrap();
        assert_relative_eq!(lx0, 0.25, max_relative = 1e-12);
        assert_relative_eq!(leps, 16.0 / 9.0 * 0.25, max_relative = 1e-12);
        assert_relative_eq!(linv, 0.25, max_relative = 1e-12);
    }

    #[test]
    fn u_loss_is_four_times_x0_loss_at_half_on_ot() {
        let s = Schedule::ot_flow();
        let pair = TrainingPair::new(vec![0.7, -0.2], vec![0.1, 1.3], 0.5, vec![0.0; 2], &s).unwrap();
        let x0_hat = Prediction::new(PredKind::X0, vec![0.5, 0.1], 0.5, pair.xt.clone()).unwrap();
        let u_hat = convert(&x0_hat, PredKind::U, &s).unwrap();
        let lu = loss(&u_hat, &pair, Supervision::U, &s).unwrap();
        let lx = loss(&u_hat, &pair, Supervision::X0FromNative, &s).unwrap();
        assert_relative_eq!(lu, 4.0 * lx, max_relative = 1e-12);
    }

    #[test]
    fn incompatible_modes_rejected() {
        let ot = Schedule::ot_flow();
        let vp = Schedule::vp_cosine();
        assert!(Supervision::V.check(PredKind::U, &ot).is_err());
        assert!(Supervision::InvSnrEps.check(PredKind::U, &vp).is_err());
        assert!(Supervision::Eps.check(PredKind::X0, &vp).is_err());
        assert!(Supervision::U.check(PredKind::Eps, &vp).is_ok());
        let pair = TrainingPair::new(vec![0.0], vec![1.0], 0.5, vec![0.0], &vp).unwrap();
        let p = Prediction::new(PredKind::U, vec![0.0], 0.5, pair.xt.clone()).unwrap();
        assert!(matches!(loss(&p, &pair, Supervision::InvSnrEps, &vp), Err(Error::Incompatible(_))));
    }

    #[test]
    fn batch_loss_matches_per_sample_loss() {
        let s = Schedule::vp_linear();
        let task = small_task();
        let mut rng = rng_for(4, 0);
        let batch = Batch::draw(&task, &s, 5, &mut rng).unwrap();
        let out = Array2::from_shape_fn(batch.x0.raw_dim(), |_| rng.random_range(-1.0..1.0));
        for (mode, native) in [
            (Supervision::Eps, PredKind::Eps),
            (Supervision::V, PredKind::Eps),
            (Supervision::X0FromNative, PredKind::U),
            (Supervision::InvSnrEps, PredKind::Eps),
        ] {
            let (l, _) = batch_loss_and_output_grad(out.view(), &batch, mode, native, &s).unwrap();
            let per: f64 = (0..batch.len())
                .map(|i| {
                    let pair = batch.pair(i);
                    let p = Prediction::new(native, out.row(i).to_vec(), pair.t, pair.xt.clone()).unwrap();
                    loss(&p, &pair, mode, &s).unwrap()
                })
                .sum::<f64>()
                / batch.len() as f64;
            assert_relative_eq!(l, per, max_relative = 1e-10);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_with_zero_weights() {
        let s = Schedule::vp_cosine();
        let task = small_task();
        let cfg = small_cfg(Supervision::Eps, PredKind::Eps, "vp_cosine");
        let mut rng = rng_for(9, 0);
        let batch = Batch::draw(&task, &s, 4, &mut rng).unwrap();
        let mlp = Mlp::zeros(&cfg.layer_sizes(task.dim()));
        let (_, g) = gradient(&mlp, &cfg.head(), &batch, cfg.supervision, &s).unwrap();
        let flat = g.flatten();
        let out_bias_start = mlp.num_params() - task.dim();
        for idx in out_bias_start..mlp.num_params() {
            let h = 1e-6;
            let mut p = mlp.clone();
            p.set(idx, h);
            let up = batch_loss(&p, &cfg.head(), &batch, cfg.supervision, &s).unwrap();
            p.set(idx, -h);
            let down = batch_loss(&p, &cfg.head(), &batch, cfg.supervision, &s).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!((fd - flat[idx]).abs() <= 1e-6 * fd.abs().max(1e-6), "{idx}");
        }
    }

    #[test]
    fn duplicated_batch_leaves_gradient_unchanged() {
        let s = Schedule::vp_linear();
        let task = small_task();
        let cfg = small_cfg(Supervision::X0FromNative, PredKind::Eps, "vp_linear");
        let params = ModelParams::init(&cfg, task.dim());
        let mut rng = rng_for(2, 0);
        let batch = Batch::draw(&task, &s, 6, &mut rng).unwrap();
        let (_, g1) = gradient(&params.mlp, &params.head, &batch, cfg.supervision, &s).unwrap();
        let (_, g2) =
            gradient(&params.mlp, &params.head, &batch.duplicated(), cfg.supervision, &s)
                .unwrap();
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn toy_task_invariants() {
        let task = ToyTask::default();
        let mut rng = rng_for(1, 0);
        let (x0, c) = task.draw(&mut rng, 20);
        assert!(x0.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(c.iter().all(|v| *v == 0.0 || *v == 1.0));
        assert!(c.rows().into_iter().all(|r| r.sum() > 0.0));
        // Layout follows the control: the clean image is mostly positive on
        // the mask and negative off it.
        let agree = x0
            .iter()
            .zip(c.iter())
            .filter(|(x, c)| (**x > 0.0) == (**c > 0.5))
            .count();
        assert!(agree as f64 > 0.85 * x0.len() as f64);
        assert_eq!(task.eval_controls(5), task.eval_controls(5));
    }

    #[test]
    fn time_features_layout() {
        let f = time_features(0.25, 4);
        assert_eq!(f.len(), 4);
        assert_relative_eq!(f[0], (std::f64::consts::PI * 0.25).sin());
        assert_relative_eq!(f[3], (2.0 * std::f64::consts::PI * 0.25).cos(), epsilon = 1e-15);
    }

    #[test]
    fn zero_steps_gives_empty_curve_and_initial_params() {
        let task = small_task();
        let mut cfg = small_cfg(Supervision::Eps, PredKind::Eps, "vp_linear");
        cfg.steps = 0;
        let (params, curve) = train(&cfg, &task).unwrap();
        assert!(curve.is_empty());
        assert_eq!(params, ModelParams::init(&cfg, task.dim()));
    }

    #[test]
    fn training_is_deterministic() {
        let task = small_task();
        let cfg = small_cfg(Supervision::X0FromNative, PredKind::U, "ot_flow");
        let (p1, c1) = train(&cfg, &task).unwrap();
        let (p2, c2) = train(&cfg, &task).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(p1, p2);
        assert_eq!(c1.len(), 2);
        assert_eq!(p1.step(), 20);
    }

    #[test]
    fn invalid_config_rejected() {
        let task = small_task();
        let cfg = small_cfg(Supervision::V, PredKind::U, "ot_flow");
        assert!(matches!(train(&cfg, &task), Err(Error::Incompatible(_))));
        let mut cfg = small_cfg(Supervision::Eps, PredKind::Eps, "vp_linear");
        cfg.time_features = 3;
        assert!(train(&cfg, &task).is_err());
    }

    #[test]
    fn divergence_aborts() {
        let task = small_task();
        let mut cfg = small_cfg(Supervision::X0FromNative, PredKind::Eps, "vp_cosine");
        cfg.lr = 1e3;
        cfg.steps = 200;
        let r = train(&cfg, &task);
        assert!(matches!(r, Err(Error::Divergence { .. }) | Err(Error::NonFinite { .. })), "{r:?}");
    }
}
