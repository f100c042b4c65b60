//! Convergence-curve processing and the toy control-fidelity metric.
//!
//! Pipeline for [`maucc`]: EMA smoothing, division by the curve's maximum
//! achievable value, trapezoidal integration up to each horizon. Because
//! smoothing is linear, smoothing before or after the division gives the
//! same result up to rounding.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::HigherBetter => "higher_better",
            Direction::LowerBetter => "lower_better",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "higher_better" | "higher" => Ok(Direction::HigherBetter),
            "lower_better" | "lower" => Ok(Direction::LowerBetter),
            other => Err(Error::Parse(format!("unknown direction `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceCurve {
    points: Vec<(u64, f64)>,
    pub metric_name: String,
    pub max_value: f64,
    pub direction: Direction,
}

impl ConvergenceCurve {
    pub fn new(
        points: Vec<(u64, f64)>,
        metric_name: impl Into<String>,
        max_value: f64,
        direction: Direction,
    ) -> Result<Self> {
        if !(max_value > 0.0) || !max_value.is_finite() {
            return Err(Error::Curve(format!("max_value must be positive, got {max_value}")));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Curve("steps must be strictly increasing".into()));
        }
        if let Some((s, v)) = points.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Curve(format!("non-finite value {v} at step {s}")));
        }
        Ok(ConvergenceCurve {
            points,
            metric_name: metric_name.into(),
            max_value,
            direction,
        })
    }

    pub fn empty(metric_name: impl Into<String>, max_value: f64, direction: Direction) -> Self {
        ConvergenceCurve {
            points: Vec::new(),
            metric_name: metric_name.into(),
            max_value,
            direction,
        }
    }

    /// Appends a point; its step must exceed the last one.
    pub fn push(&mut self, step: u64, value: f64) -> Result<()> {
        if let Some(&(last, _)) = self.points.last() {
            if step <= last {
                return Err(Error::Curve(format!("step {step} does not follow {last}")));
            }
        }
        if !value.is_finite() {
            return Err(Error::Curve(format!("non-finite value {value} at step {step}")));
        }
        self.points.push((step, value));
        Ok(())
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.1)
    }

    pub fn last_value(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }

    fn with_values(&self, values: impl Iterator<Item = f64>, max_value: f64) -> Self {
        ConvergenceCurve {
            points: self.points.iter().zip(values).map(|(p, v)| (p.0, v)).collect(),
            metric_name: self.metric_name.clone(),
            max_value,
            direction: self.direction,
        }
    }

    /// Divides by `max_value`. Errors if any result leaves `[0, 1]`.
    pub fn normalized(&self) -> Result<Self> {
        let out = self.with_values(self.values().map(|v| v / self.max_value), 1.0);
        if let Some((s, v)) = out.points.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            return Err(Error::Curve(format!(
                "normalized value {v} at step {s} outside [0, 1]; check max_value"
            )));
        }
        Ok(out)
    }
}

/// `s_0 = v_0`, `s_k = w s_{k-1} + (1 - w) v_k`, evaluated as
/// `s_{k-1} + (1 - w)(v_k - s_{k-1})` so constant runs stay exact.
pub fn ema_smooth(c: &ConvergenceCurve, w: f64) -> Result<ConvergenceCurve> {
    if !(0.0..1.0).contains(&w) {
        return Err(Error::Config(format!("EMA weight must be in [0, 1), got {w}")));
    }
    let mut acc: Option<f64> = None;
    let smoothed = c.values().map(|v| {
        let s = match acc {
            None => v,
            Some(_) if w == 0.0 => v,
            Some(prev) => prev + (1.0 - w) * (v - prev),
        };
        acc = Some(s);
        s
    });
    let smoothed: Vec<f64> = smoothed.collect();
    Ok(c.with_values(smoothed.into_iter(), c.max_value))
}

/// `ceil(h * t_max)`, ignoring rounding noise in the product so that e.g.
/// `0.35 * 100` gives 35.
pub fn horizon_steps(horizon: f64, t_max: u64) -> f64 {
    let x = horizon * t_max as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// Mean value of the normalized curve over `[0, ceil(h T_max)]`, with
/// `T_max` the last recorded step. The curve is extended left-constant to
/// step 0 and interpolated linearly at the cutoff.
pub fn aucc_at(c: &ConvergenceCurve, horizon: f64) -> Result<f64> {
    let pts = c.points();
    let (first, last) = match (pts.first(), pts.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(Error::EmptyCurve),
    };
    if !(horizon > 0.0 && horizon <= 1.0) {
        return Err(Error::Config(format!("horizon must be in (0, 1], got {horizon}")));
    }
    let t_max = last.0;
    if t_max == 0 {
        return Err(Error::Curve("last step must be positive".into()));
    }
    let cutoff = horizon_steps(horizon, t_max);

    let mut knots: Vec<(f64, f64)> = Vec::with_capacity(pts.len() + 2);
    if first.0 > 0 {
        knots.push((0.0, first.1));
    }
    knots.extend(pts.iter().map(|&(s, v)| (s as f64, v)));

    let mut area = 0.0;
    for w in knots.windows(2) {
        let ((s0, v0), (s1, v1)) = (w[0], w[1]);
        if s0 >= cutoff {
            break;
        }
        if s1 <= cutoff {
            area += 0.5 * (v0 + v1) * (s1 - s0);
        } else {
            let v_cut = v0 + (v1 - v0) * (cutoff - s0) / (s1 - s0);
            area += 0.5 * (v0 + v_cut) * (cutoff - s0);
            break;
        }
    }
    Ok(area / cutoff)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MauccConfig {
    pub horizons: Vec<f64>,
    pub ema_weight: f64,
    pub report_scale: f64,
}

impl Default for MauccConfig {
    fn default() -> Self {
        MauccConfig {
            horizons: default_horizons(),
            ema_weight: 0.9,
            report_scale: 100.0,
        }
    }
}

/// 0.25, 0.30, ..., 1.00.
pub fn default_horizons() -> Vec<f64> {
    (5..=20).map(|k| k as f64 * 5.0 / 100.0).collect()
}

impl MauccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() {
            return Err(Error::Config("at least one horizon is required".into()));
        }
        if self.horizons.iter().any(|h| !(*h > 0.0 && *h <= 1.0)) {
            return Err(Error::Config("horizons must lie in (0, 1]".into()));
        }
        if self.horizons.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("horizons must be sorted".into()));
        }
        if !(0.0..1.0).contains(&self.ema_weight) {
            return Err(Error::Config("EMA weight must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MauccReport {
    /// `(horizon, AUCC)` pairs on the report scale.
    pub per_horizon: Vec<(f64, f64)>,
    pub maucc: f64,
    pub direction: Direction,
}

pub fn maucc_report(c: &ConvergenceCurve, cfg: &MauccConfig) -> Result<MauccReport> {
    cfg.validate()?;
    if c.is_empty() {
        return Err(Error::EmptyCurve);
    }
    let norm = ema_smooth(c, cfg.ema_weight)?.normalized()?;
    let per_horizon = cfg
        .horizons
        .iter()
        .map(|&h| aucc_at(&norm, h).map(|a| (h, a * cfg.report_scale)))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_horizon.iter().map(|p| p.1).sum::<f64>() / per_horizon.len() as f64;
    Ok(MauccReport {
        per_horizon,
        maucc: mean,
        direction: c.direction,
    })
}

/// Mean of AUCC over the configured horizons, times `report_scale`. Error
/// metrics are not inverted; their mAUCC stays lower-is-better.
pub fn maucc(c: &ConvergenceCurve, cfg: &MauccConfig) -> Result<f64> {
    maucc_report(c, cfg).map(|r| r.maucc)
}

/// Mean IoU in `[0, 100]` between samples thresholded at 0 and binary
/// controls (`> 0.5`). Two empty masks count as a perfect match.
pub fn mask_iou(samples: ArrayView2<'_, f64>, controls: ArrayView2<'_, f64>) -> Result<f64> {
    if samples.dim() != controls.dim() {
        return Err(Error::ShapeMismatch {
            expected: controls.len(),
            got: samples.len(),
        });
    }
    if samples.nrows() == 0 {
        return Err(Error::Config("mask_iou needs at least one sample".into()));
    }
    let mut total = 0.0;
    for (s, c) in samples.outer_iter().zip(controls.outer_iter()) {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&sv, &cv) in s.iter().zip(c.iter()) {
            let (a, b) = (sv > 0.0, cv > 0.5);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(100.0 * total / samples.nrows() as f64)
}
