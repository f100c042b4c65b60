//! Interpolation coefficients `alpha(t)`, `sigma(t)` on `t in [0, 1]`.
//!
//! Time runs from clean data (`t = 0`, `alpha = 1`, `sigma = 0`) to pure
//! noise (`t = 1`, `alpha = 0`, `sigma = 1`). Flow-matching code often uses
//! the reverse convention; every formula in this crate assumes this one.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_T_MIN: f64 = 1e-4;
pub const DEFAULT_T_MAX: f64 = 1.0 - 1e-4;

/// Central-difference step for schedules without analytic derivatives.
pub const FD_STEP: f64 = 1e-6;

const BOUNDARY_TOL: f64 = 1e-6;
const CHECK_GRID: usize = 1024;

/// Discrete beta range of the Stable-Diffusion-style linear schedule. The
/// exact range of any particular backbone is not pinned here; these are the
/// conventional values.
pub const VP_LINEAR_BETA_START: f64 = 0.00085;
pub const VP_LINEAR_BETA_END: f64 = 0.012;
pub const VP_LINEAR_STEPS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    VpLinear,
    VpCosine,
    OtFlow,
    CustomTabulated,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::VpLinear => "vp_linear",
            ScheduleKind::VpCosine => "vp_cosine",
            ScheduleKind::OtFlow => "ot_flow",
            ScheduleKind::CustomTabulated => "custom_tabulated",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Piecewise-linear `alpha` table over sorted knots spanning `[0, 1]`.
#[derive(Clone, Debug)]
struct Table {
    ts: Vec<f64>,
    alphas: Vec<f64>,
}

impl Table {
    fn eval(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        let hi = self.ts.partition_point(|&k| k < t);
        if hi == 0 {
            return self.alphas[0];
        }
        if hi >= self.ts.len() {
            return *self.alphas.last().unwrap();
        }
        let (t0, t1) = (self.ts[hi - 1], self.ts[hi]);
        let (a0, a1) = (self.alphas[hi - 1], self.alphas[hi]);
        let frac = (t - t0) / (t1 - t0);
        a0 + frac * (a1 - a0)
    }
}

/// A noise schedule. Immutable after construction.
#[derive(Clone, Debug)]
pub struct Schedule {
    kind: ScheduleKind,
    table: Option<Table>,
    variance_preserving: bool,
    t_min: f64,
    t_max: f64,
    label: String,
}

impl Schedule {
    /// `alpha(t) = cos(pi t / 2)`, `sigma(t) = sin(pi t / 2)`.
    pub fn vp_cosine() -> Self {
        Self::analytic(ScheduleKind::VpCosine, true)
    }

    /// Optimal-transport path `alpha = 1 - t`, `sigma = t`.
    pub fn ot_flow() -> Self {
        Self::analytic(ScheduleKind::OtFlow, false)
    }

    /// Discrete linear-beta VP schedule, tabulated and linearly interpolated.
    ///
    /// The 1000 cumulative products `abar_k` sit on knots `k / 1001`
    /// (`k = 1..=1000`), with `alpha = 1` prepended at `t = 0` and `alpha = 0`
    /// appended at `t = 1`, so the boundary conditions hold while every
    /// discrete level is kept.
    pub fn vp_linear() -> Self {
        let n = VP_LINEAR_STEPS;
        let knots = n + 2;
        let mut ts = Vec::with_capacity(knots);
        let mut alphas = Vec::with_capacity(knots);
        ts.push(0.0);
        alphas.push(1.0);
        let mut abar = 1.0;
        for k in 0..n {
            let beta = VP_LINEAR_BETA_START
                + (VP_LINEAR_BETA_END - VP_LINEAR_BETA_START) * k as f64 / (n - 1) as f64;
            abar *= 1.0 - beta;
            ts.push((k + 1) as f64 / (n + 1) as f64);
            alphas.push(abar.sqrt());
        }
        ts.push(1.0);
        alphas.push(0.0);
        Schedule {
            kind: ScheduleKind::VpLinear,
            table: Some(Table { ts, alphas }),
            variance_preserving: true,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
            label: ScheduleKind::VpLinear.name().to_string(),
        }
    }

    fn analytic(kind: ScheduleKind, variance_preserving: bool) -> Self {
        Schedule {
            kind,
            table: None,
            variance_preserving,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
            label: kind.name().to_string(),
        }
    }

    /// Builds a tabulated schedule from `(t, alpha)` knots. With
    /// `variance_preserving` the noise level is `sqrt(1 - alpha^2)`,
    /// otherwise `1 - alpha`.
    pub fn tabulated(ts: Vec<f64>, alphas: Vec<f64>, variance_preserving: bool) -> Result<Self> {
        if ts.len() != alphas.len() || ts.len() < 2 {
            return Err(Error::Schedule(
                "table needs at least two (t, alpha) rows".into(),
            ));
        }
        if ts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Schedule("t column must be strictly increasing".into()));
        }
        if ts[0].abs() > BOUNDARY_TOL || (ts[ts.len() - 1] - 1.0).abs() > BOUNDARY_TOL {
            return Err(Error::Schedule("t column must span [0, 1]".into()));
        }
        if alphas.iter().any(|a| !a.is_finite() || *a < 0.0 || *a > 1.0) {
            return Err(Error::Schedule("alpha values must lie in [0, 1]".into()));
        }
        let s = Schedule {
            kind: ScheduleKind::CustomTabulated,
            table: Some(Table { ts, alphas }),
            variance_preserving,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
            label: ScheduleKind::CustomTabulated.name().to_string(),
        };
        s.validate()?;
        Ok(s)
    }

    /// Parses a two-column `(t, alpha)` table. The first non-empty line must
    /// be a header `# schedule: vp` or `# schedule: generic`.
    pub fn parse_table(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Schedule("empty schedule table".into()))?;
        let decl = header
            .strip_prefix('#')
            .map(str::trim)
            .and_then(|h| h.strip_prefix("schedule:"))
            .map(str::trim)
            .ok_or_else(|| Error::Schedule(format!("bad header line `{header}`")))?;
        let vp = match decl {
            "vp" => true,
            "generic" => false,
            other => return Err(Error::Schedule(format!("unknown table kind `{other}`"))),
        };
        let mut ts = Vec::new();
        let mut alphas = Vec::new();
        for line in lines {
            if line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|c| !c.is_empty())
                .collect();
            if cols.len() != 2 {
                return Err(Error::Schedule(format!("expected two columns in `{line}`")));
            }
            let parse = |c: &str| {
                c.parse::<f64>()
                    .map_err(|e| Error::Schedule(format!("`{c}`: {e}")))
            };
            ts.push(parse(cols[0])?);
            alphas.push(parse(cols[1])?);
        }
        Self::tabulated(ts, alphas, vp)
    }

    pub fn load_table(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut s = Self::parse_table(&text)?;
        s.label = format!("custom:{}", path.display());
        Ok(s)
    }

    /// Resolves `vp_linear`, `vp_cosine`, `ot_flow` or `custom:<path>`.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "vp_linear" => Ok(Self::vp_linear()),
            "vp_cosine" => Ok(Self::vp_cosine()),
            "ot_flow" => Ok(Self::ot_flow()),
            other => match other.strip_prefix("custom:") {
                Some(path) => Self::load_table(Path::new(path)),
                None => Err(Error::Schedule(format!("unknown schedule `{other}`"))),
            },
        }
    }

    /// Replaces the sampling clamp. `0 <= t_min < t_max <= 1`.
    pub fn with_clip(mut self, t_min: f64, t_max: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&t_min) || !(t_max > t_min && t_max <= 1.0) {
            return Err(Error::Schedule(format!(
                "invalid clip range ({t_min}, {t_max})"
            )));
        }
        self.t_min = t_min;
        self.t_max = t_max;
        Ok(self)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Name usable with [`Schedule::from_name`].
    pub fn name(&self) -> &str {
        &self.label
    }

    pub fn is_vp(&self) -> bool {
        self.variance_preserving
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VpCosine => (FRAC_PI_2 * t).cos(),
            ScheduleKind::OtFlow => 1.0 - t,
            ScheduleKind::VpLinear | ScheduleKind::CustomTabulated => {
                self.table.as_ref().expect("tabulated schedule").eval(t)
            }
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VpCosine => (FRAC_PI_2 * t).sin(),
            ScheduleKind::OtFlow => t,
            ScheduleKind::VpLinear | ScheduleKind::CustomTabulated => {
                let a = self.alpha(t);
                if self.variance_preserving {
                    (1.0 - a * a).max(0.0).sqrt()
                } else {
                    1.0 - a
                }
            }
        }
    }

    pub fn alpha_dot(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VpCosine => -FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
            ScheduleKind::OtFlow => -1.0,
            _ => central_difference(|x| self.alpha(x), t),
        }
    }

    pub fn sigma_dot(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VpCosine => FRAC_PI_2 * (FRAC_PI_2 * t).cos(),
            ScheduleKind::OtFlow => 1.0,
            _ => central_difference(|x| self.sigma(x), t),
        }
    }

    /// Errors unless `t` lies in the clip range.
    pub fn check_time(&self, t: f64) -> Result<()> {
        if t >= self.t_min && t <= self.t_max {
            Ok(())
        } else {
            Err(Error::Domain {
                t,
                min: self.t_min,
                max: self.t_max,
            })
        }
    }

    /// Signal-to-noise ratio `alpha^2 / sigma^2`.
    pub fn snr(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let (a, s) = (self.alpha(t), self.sigma(t));
        if s == 0.0 {
            return Err(Error::Singular { what: "sigma", value: s });
        }
        Ok(a * a / (s * s))
    }

    /// `d log SNR / dt = 2 (alpha_dot / alpha - sigma_dot / sigma)`.
    pub fn dlog_snr_dt(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        let (a, s) = (self.alpha(t), self.sigma(t));
        if a == 0.0 {
            return Err(Error::Singular { what: "alpha", value: a });
        }
        if s == 0.0 {
            return Err(Error::Singular { what: "sigma", value: s });
        }
        Ok(2.0 * (self.alpha_dot(t) / a - self.sigma_dot(t) / s))
    }

    /// `n_steps + 1` uniformly spaced times from `t_max` down to `t_min`.
    pub fn discrete_grid(&self, n_steps: usize) -> Result<Vec<f64>> {
        if n_steps == 0 {
            return Err(Error::Config("discrete grid needs at least one step".into()));
        }
        let span = self.t_max - self.t_min;
        let mut grid: Vec<f64> = (0..=n_steps)
            .map(|i| self.t_max - span * i as f64 / n_steps as f64)
            .collect();
        grid[n_steps] = self.t_min;
        Ok(grid)
    }

    /// Checks monotonicity and boundary values on a 1024-point grid, plus the
    /// VP identity when it applies.
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Schedule(format!("{}: {msg}", self.label)))
            }
        };
        check((self.alpha(0.0) - 1.0).abs() <= BOUNDARY_TOL, "alpha(0) != 1")?;
        check(self.sigma(0.0).abs() <= BOUNDARY_TOL, "sigma(0) != 0")?;
        check(self.alpha(1.0).abs() <= BOUNDARY_TOL, "alpha(1) != 0")?;
        check((self.sigma(1.0) - 1.0).abs() <= BOUNDARY_TOL, "sigma(1) != 1")?;
        let mut prev = (self.alpha(0.0), self.sigma(0.0));
        for i in 1..CHECK_GRID {
            let t = i as f64 / (CHECK_GRID - 1) as f64;
            let cur = (self.alpha(t), self.sigma(t));
            check(cur.0 <= prev.0, "alpha must be non-increasing")?;
            check(cur.1 >= prev.1, "sigma must be non-decreasing")?;
            if self.variance_preserving {
                check(
                    (cur.0 * cur.0 + cur.1 * cur.1 - 1.0).abs() <= 1e-10,
                    "alpha^2 + sigma^2 != 1",
                )?;
            }
            prev = cur;
        }
        Ok(())
    }
}

fn central_difference(f: impl Fn(f64) -> f64, t: f64) -> f64 {
    let lo = (t - FD_STEP).max(0.0);
    let hi = (t + FD_STEP).min(1.0);
    (f(hi) - f(lo)) / (hi - lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn builtins() -> Vec<Schedule> {
        vec![Schedule::vp_linear(), Schedule::vp_cosine(), Schedule::ot_flow()]
    }

    fn clipped_grid(s: &Schedule) -> impl Iterator<Item = f64> + '_ {
        (0..CHECK_GRID).map(move |i| {
            s.t_min() + (s.t_max() - s.t_min()) * i as f64 / (CHECK_GRID - 1) as f64
        })
    }

    #[test]
    fn builtins_validate() {
        for s in builtins() {
            s.validate().unwrap();
        }
    }

    #[test]
    fn ot_flow_is_exact() {
        let s = Schedule::ot_flow();
        for t in [0.0, 0.1, 0.25, 0.5, 0.9, 1.0] {
            assert_eq!(s.alpha(t), 1.0 - t);
            assert_eq!(s.sigma(t), t);
        }
    }

    #[test]
    fn snr_examples() {
        let ot = Schedule::ot_flow();
        assert_eq!(ot.snr(0.5).unwrap(), 1.0);
        assert_relative_eq!(ot.snr(0.25).unwrap(), 9.0, max_relative = 1e-15);
        // alpha = sigma = 1/sqrt(2) at t = 1/2 on the cosine schedule.
        assert_relative_eq!(Schedule::vp_cosine().snr(0.5).unwrap(), 1.0, max_relative = 1e-15);
    }

    #[test]
    fn snr_outside_clip_is_domain_error() {
        let s = Schedule::ot_flow();
        assert!(matches!(s.snr(0.0), Err(Error::Domain { .. })));
        assert!(matches!(s.snr(1.0), Err(Error::Domain { .. })));
        assert!(matches!(s.dlog_snr_dt(1.5), Err(Error::Domain { .. })));
        assert!(s.snr(f64::NAN).is_err());
    }

    #[test]
    fn snr_strictly_decreasing() {
        for s in builtins() {
            let vals: Vec<f64> = clipped_grid(&s).map(|t| s.snr(t).unwrap()).collect();
            assert!(vals.windows(2).all(|w| w[1] < w[0]), "{}", s.name());
        }
    }

    #[test]
    fn dlog_snr_ot_closed_form() {
        let s = Schedule::ot_flow();
        assert_relative_eq!(s.dlog_snr_dt(0.5).unwrap(), -8.0, max_relative = 1e-15);
        assert_relative_eq!(s.dlog_snr_dt(0.25).unwrap(), -32.0 / 3.0, max_relative = 1e-14);
        for t in clipped_grid(&s) {
            let closed = -2.0 / (t * (1.0 - t));
            assert_relative_eq!(s.dlog_snr_dt(t).unwrap(), closed, max_relative = 1e-9);
        }
    }

    #[test]
    fn dlog_snr_matches_finite_difference_of_log_snr() {
        let s = Schedule::vp_cosine();
        let log_snr = |t: f64| {
            let (a, sg) = ((FRAC_PI_2 * t).cos(), (FRAC_PI_2 * t).sin());
            (a * a / (sg * sg)).ln()
        };
        for t in [0.05, 0.2, 0.5, 0.7, 0.95] {
            let h = 1e-6;
            let fd = (log_snr(t + h) - log_snr(t - h)) / (2.0 * h);
            assert_relative_eq!(s.dlog_snr_dt(t).unwrap(), fd, max_relative = 1e-5);
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        for s in [Schedule::vp_cosine(), Schedule::ot_flow()] {
            for t in clipped_grid(&s) {
                let fa = central_difference(|x| s.alpha(x), t);
                let fs = central_difference(|x| s.sigma(x), t);
                let (da, ds) = (s.alpha_dot(t), s.sigma_dot(t));
                assert!((da - fa).abs() <= 1e-5 * da.abs().max(1e-3), "{t}");
                assert!((ds - fs).abs() <= 1e-5 * ds.abs().max(1e-3), "{t}");
            }
        }
    }

    #[test]
    fn vp_identity_on_grid() {
        for s in [Schedule::vp_linear(), Schedule::vp_cosine()] {
            for i in 0..CHECK_GRID {
                let t = i as f64 / (CHECK_GRID - 1) as f64;
                let (a, sg) = (s.alpha(t), s.sigma(t));
                assert!((a * a + sg * sg - 1.0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn vp_linear_hits_discrete_levels() {
        let s = Schedule::vp_linear();
        let beta0 = VP_LINEAR_BETA_START;
        assert_relative_eq!(s.alpha(1.0 / 1001.0), (1.0 - beta0).sqrt(), max_relative = 1e-12);
        // Last discrete level is the product over all betas.
        let abar: f64 = (0..1000)
            .map(|k| 1.0 - (0.00085 + (0.012 - 0.00085) * k as f64 / 999.0))
            .product();
        assert_relative_eq!(s.alpha(1000.0 / 1001.0), abar.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn grid_examples() {
        let relaxed = Schedule::ot_flow().with_clip(0.0, 1.0).unwrap();
        assert_eq!(relaxed.discrete_grid(2).unwrap(), vec![1.0, 0.5, 0.0]);

        let s = Schedule::vp_cosine();
        let g = s.discrete_grid(4).unwrap();
        assert_eq!(g.len(), 5);
        let gap = g[0] - g[1];
        for w in g.windows(2) {
            assert!((w[0] - w[1] - gap).abs() <= 1e-12);
        }
        assert_eq!(s.discrete_grid(1).unwrap(), vec![1.0 - 1e-4, 1e-4]);
        assert!(s.discrete_grid(0).is_err());
    }

    #[test]
    fn parse_tables() {
        let vp = "# schedule: vp\n0 1\n0.5, 0.6\n1 0\n";
        let s = Schedule::parse_table(vp).unwrap();
        assert!(s.is_vp());
        assert_relative_eq!(s.alpha(0.25), 0.8, max_relative = 1e-15);
        assert_relative_eq!(s.sigma(0.5), 0.8, max_relative = 1e-15);

        let generic = "# schedule: generic\n0 1\n1 0\n";
        let g = Schedule::parse_table(generic).unwrap();
        assert!(!g.is_vp());
        assert_relative_eq!(g.sigma(0.3), 0.3, max_relative = 1e-12);
        // Piecewise-linear alpha falls back to central differences.
        assert_relative_eq!(g.alpha_dot(0.3), -1.0, max_relative = 1e-6);

        assert!(Schedule::parse_table("0 1\n1 0\n").is_err());
        assert!(Schedule::parse_table("# schedule: vp\n0 1\n1 0.5\n").is_err());
        assert!(Schedule::parse_table("# schedule: vp\n0 0.5\n0.5 1\n1 0\n").is_err());
    }

    #[test]
    fn names_round_trip() {
        for s in builtins() {
            let back = Schedule::from_name(s.name()).unwrap();
            assert_eq!(back.kind(), s.kind());
        }
        assert!(Schedule::from_name("ve").is_err());
    }
}
