use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;

use denoise_lab::config::{fmt_list, parse_list, Config, MauccSettings};
use denoise_lab::identities::{algebra_checks, gradient_check, GradientProbe, IdentityCheck};
use denoise_lab::metrics::{ema_smooth, maucc_report, ConvergenceCurve};
use denoise_lab::oracle::{GaussianData, GaussianOracle};
use denoise_lab::report::{curve_from_csv, curve_to_csv, fmt_decimal, line_plot, Series};
use denoise_lab::sampler::{sample as run_sampler, SamplerConfig};
use denoise_lab::toytrainer::{train_with_schedule, Supervision, ToyTask, TrainConfig};
use denoise_lab::{Error, PredKind, Schedule};

use crate::output::{io_failure, load_config, put, RunDir, RUN};
use crate::{Common, Failure, EXIT_DIVERGENCE, EXIT_IDENTITY};

fn parse_cfg_list<T: std::str::FromStr>(cfg: &Config, section: &str, key: &str, default: &str) -> Result<Vec<T>, Failure>
where
    T::Err: std::fmt::Display,
{
    match cfg.get_list(section, key)? {
        Some(v) => Ok(v),
        None => parse_list(default).map_err(io_failure),
    }
}

// ---------------------------------------------------------------- identity

#[derive(Args, Debug)]
pub struct IdentityArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated schedule names.
    #[arg(long)]
    pub schedules: Option<String>,
    /// Random instances per schedule.
    #[arg(long)]
    pub n_random: Option<usize>,
    /// Largest accepted relative error.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Random batches for the gradient identity.
    #[arg(long)]
    pub grad_batches: Option<usize>,
}

const IDENTITY: &str = "identity";
const IDENTITY_KEYS: &[&str] = &["schedules", "n_random", "tol", "grad_batches", "seed"];

pub fn identity_check(a: IdentityArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.common, "identity-check")?;
    put(&mut cfg, IDENTITY, "schedules", &a.schedules);
    put(&mut cfg, IDENTITY, "n_random", &a.n_random);
    put(&mut cfg, IDENTITY, "tol", &a.tol);
    put(&mut cfg, IDENTITY, "grad_batches", &a.grad_batches);
    put(&mut cfg, IDENTITY, "seed", &a.common.seed);
    cfg.reject_unknown(IDENTITY, IDENTITY_KEYS)?;
    let schedules: Vec<String> = parse_cfg_list(&cfg, IDENTITY, "schedules", "vp_cosine,ot_flow")?;
    let n: usize = cfg.get(IDENTITY, "n_random")?.unwrap_or(10_000);
    let tol: f64 = cfg.get(IDENTITY, "tol")?.unwrap_or(1e-9);
    let grad_batches: usize = cfg.get(IDENTITY, "grad_batches")?.unwrap_or(20);
    let seed: u64 = cfg.get(IDENTITY, "seed")?.unwrap_or(0);
    cfg.set(IDENTITY, "schedules", fmt_list(&schedules));
    cfg.set(IDENTITY, "n_random", n);
    cfg.set(IDENTITY, "tol", tol);
    cfg.set(IDENTITY, "grad_batches", grad_batches);
    cfg.set(IDENTITY, "seed", seed);

    let run = RunDir::create(&a.common, &mut cfg, "identity-check")?;
    run.write_manifest(&cfg)?;
    if n == 0 && grad_batches == 0 {
        eprintln!("warning: no random instances requested; the check is vacuous");
    } else if n == 0 {
        eprintln!("warning: n_random = 0; algebraic identities are not exercised");
    }

    let mut checks: Vec<IdentityCheck> = Vec::new();
    for name in &schedules {
        let s = Schedule::from_name(name)?;
        checks.extend(algebra_checks(&s, n, seed)?);
        checks.push(gradient_check(&s, &GradientProbe::default(), grad_batches, seed)?);
    }

    let mut csv = String::from("schedule,identity,instances,worst_rel_err,tol,pass\n");
    println!(
        "{:<12} {:<28} {:>9} {:>14} {:>10}  result",
        "schedule", "identity", "instances", "worst rel err", "tolerance"
    );
    let mut failed = 0;
    for c in &checks {
        let ok = c.passes(tol);
        failed += usize::from(!ok);
        println!(
            "{:<12} {:<28} {:>9} {:>14.3e} {:>10.1e}  {}",
            c.schedule,
            c.name,
            c.instances,
            c.worst,
            c.tolerance(tol),
            if ok { "ok" } else { "FAIL" }
        );
        let _ = writeln!(csv, "{},{},{},{:e},{:e},{}", c.schedule, c.name, c.instances, c.worst, c.tolerance(tol), ok);
    }
    run.write("identities.csv", &csv)?;
    if failed > 0 {
        return Err(Failure {
            code: EXIT_IDENTITY,
            message: format!("{failed} identities exceeded tolerance {tol:e}"),
        });
    }
    println!("all identities within {tol:e}");
    Ok(())
}

// ------------------------------------------------------------------ sample

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub schedule: Option<String>,
    /// ddim, ddpm or euler_flow.
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub chains: Option<usize>,
    /// Data dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Data mean, one value or one per coordinate.
    #[arg(long)]
    pub mean: Option<String>,
    /// Data variance, one value or one per coordinate.
    #[arg(long)]
    pub var: Option<String>,
    /// Prediction kind the oracle exposes.
    #[arg(long)]
    pub expose: Option<String>,
}

const ORACLE: &str = "oracle";
const ORACLE_KEYS: &[&str] = &["schedule", "chains", "dim", "mean", "var", "expose"];
const SAMPLER: &str = "sampler";

fn broadcast(v: Vec<f64>, dim: usize, what: &str) -> Result<Vec<f64>, Failure> {
    match v.len() {
        1 => Ok(vec![v[0]; dim]),
        n if n == dim => Ok(v),
        n => Err(io_failure(format!("{what} has {n} values for dimension {dim}"))),
    }
}

pub fn sample(a: SampleArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.common, "sample")?;
    put(&mut cfg, ORACLE, "schedule", &a.schedule);
    put(&mut cfg, ORACLE, "chains", &a.chains);
    put(&mut cfg, ORACLE, "dim", &a.dim);
    put(&mut cfg, ORACLE, "mean", &a.mean);
    put(&mut cfg, ORACLE, "var", &a.var);
    put(&mut cfg, ORACLE, "expose", &a.expose);
    put(&mut cfg, SAMPLER, "kind", &a.sampler);
    put(&mut cfg, SAMPLER, "n_steps", &a.steps);
    put(&mut cfg, SAMPLER, "seed", &a.common.seed);
    if a.sampler.is_some() && a.common.config.is_some() {
        // A new sampler kind brings its own default noise mode.
        let mut probe = Config::new();
        probe.set(SAMPLER, "kind", a.sampler.as_deref().unwrap_or("ddim"));
        let kind_default = SamplerConfig::from_config(&probe, SAMPLER)?;
        cfg.set(SAMPLER, "eta_mode", kind_default.eta_mode.name());
    }
    cfg.reject_unknown(ORACLE, ORACLE_KEYS)?;

    let schedule_name: String = cfg.get(ORACLE, "schedule")?.unwrap_or_else(|| "vp_cosine".into());
    let s = Schedule::from_name(&schedule_name)?;
    let dim: usize = cfg.get(ORACLE, "dim")?.unwrap_or(8);
    let chains: usize = cfg.get(ORACLE, "chains")?.unwrap_or(10_000);
    let mean = broadcast(parse_cfg_list(&cfg, ORACLE, "mean", "1.0")?, dim, "mean")?;
    let var = broadcast(parse_cfg_list(&cfg, ORACLE, "var", "0.25")?, dim, "var")?;
    let expose: PredKind = cfg.get(ORACLE, "expose")?.unwrap_or(PredKind::X0);
    let sampler = SamplerConfig::from_config(&cfg, SAMPLER)?;
    if chains == 0 || dim == 0 {
        return Err(io_failure("chains and dim must be positive"));
    }
    cfg.set(ORACLE, "schedule", &schedule_name);
    cfg.set(ORACLE, "dim", dim);
    cfg.set(ORACLE, "chains", chains);
    cfg.set(ORACLE, "mean", fmt_list(&mean));
    cfg.set(ORACLE, "var", fmt_list(&var));
    cfg.set(ORACLE, "expose", expose);
    sampler.write_config(&mut cfg, SAMPLER);

    let run = RunDir::create(&a.common, &mut cfg, "sample")?;
    run.write_manifest(&cfg)?;

    let data = GaussianData::diagonal(mean.clone(), var.clone())?;
    let oracle = GaussianOracle::new(data, s.clone(), expose)?;
    let x = run_sampler(&oracle, &sampler, &s, chains, dim, None)?;

    let mut samples = (0..dim).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    samples.push('\n');
    for row in x.rows() {
        let line: Vec<String> = row.iter().map(|v| fmt_decimal(*v)).collect();
        samples.push_str(&line.join(","));
        samples.push('\n');
    }
    run.write("samples.csv", &samples)?;

    let n = chains as f64;
    let mut stats = String::from("coord,mean,data_mean,std_err,z,var,data_var,var_rel_err\n");
    println!(
        "{} steps={} chains={chains} schedule={schedule_name} oracle={expose}",
        sampler.kind.name(),
        sampler.n_steps
    );
    println!("{:>5} {:>10} {:>10} {:>7} {:>10} {:>10} {:>8}", "coord", "mean", "target", "z", "var", "target", "rel");
    for j in 0..dim {
        let col = x.column(j);
        let m = col.sum() / n;
        let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / (n - 1.0).max(1.0);
        let se = (v / n).sqrt();
        let z = if se > 0.0 { (m - mean[j]) / se } else { 0.0 };
        let rel = (v - var[j]).abs() / var[j];
        println!("{j:>5} {m:>10.5} {:>10.5} {z:>7.2} {v:>10.5} {:>10.5} {rel:>8.4}", mean[j], var[j]);
        let _ = writeln!(
            stats,
            "{j},{},{},{},{},{},{},{}",
            fmt_decimal(m),
            fmt_decimal(mean[j]),
            fmt_decimal(se),
            fmt_decimal(z),
            fmt_decimal(v),
            fmt_decimal(var[j]),
            fmt_decimal(rel)
        );
    }
    run.write("stats.csv", &stats)?;
    Ok(())
}

// ------------------------------------------------------------------- train

/// Training flags shared by `train` and `compare`.
#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub schedule: Option<String>,
    /// eps or u.
    #[arg(long)]
    pub native_kind: Option<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    #[arg(long)]
    pub eval_steps: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub image_side: Option<usize>,
    /// Seed of the held-out evaluation controls.
    #[arg(long)]
    pub task_seed: Option<u64>,
}

const TRAIN: &str = "train";
const TASK: &str = "task";
const MAUCC: &str = "maucc";

impl TrainFlags {
    fn apply(&self, cfg: &mut Config) {
        put(cfg, TRAIN, "schedule", &self.schedule);
        put(cfg, TRAIN, "native_kind", &self.native_kind);
        put(cfg, TRAIN, "steps", &self.steps);
        put(cfg, TRAIN, "batch", &self.batch);
        put(cfg, TRAIN, "lr", &self.lr);
        put(cfg, TRAIN, "eval_every", &self.eval_every);
        put(cfg, TRAIN, "eval_samples", &self.eval_samples);
        put(cfg, TRAIN, "eval_steps", &self.eval_steps);
        put(cfg, TRAIN, "hidden", &self.hidden);
        put(cfg, TASK, "image_side", &self.image_side);
        put(cfg, TASK, "seed", &self.task_seed);
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// eps, v, u, x0_from_native or inv_snr_eps.
    #[arg(long)]
    pub supervision: Option<String>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

fn resolved(cfg: &mut Config) -> Result<(TrainConfig, ToyTask, MauccSettings), Failure> {
    let train = TrainConfig::from_config(cfg, TRAIN)?;
    let task = ToyTask::from_config(cfg, TASK)?;
    let m = MauccSettings::from_config(cfg, MAUCC)?;
    train.write_config(cfg, TRAIN);
    task.write_config(cfg, TASK);
    m.write_config(cfg, MAUCC);
    Ok((train, task, m))
}

struct ArmResult {
    curve: ConvergenceCurve,
    maucc: f64,
}

fn run_arm(
    train: &TrainConfig,
    task: &ToyTask,
    m: &MauccSettings,
    mut progress: impl FnMut(u64, f64),
) -> Result<ArmResult, Error> {
    let s = Schedule::from_name(&train.schedule)?;
    let (_, mut curve) = train_with_schedule(train, task, &s, &mut progress)?;
    curve.max_value = m.max_value;
    curve.direction = m.direction;
    let maucc = if curve.is_empty() {
        f64::NAN
    } else {
        maucc_report(&curve, &m.maucc)?.maucc
    };
    Ok(ArmResult { curve, maucc })
}

fn curve_plot(title: &str, curves: &[(String, &ConvergenceCurve)], ema: f64) -> Result<String, Failure> {
    let mut series = Vec::new();
    for (label, c) in curves {
        let smooth = ema_smooth(c, ema)?;
        series.push(Series::from_curve(label.clone(), &smooth));
    }
    Ok(line_plot(title, "step", &format!("mask IoU (EMA {ema})"), &series))
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.common, "train")?;
    put(&mut cfg, TRAIN, "supervision", &a.supervision);
    put(&mut cfg, TRAIN, "seed", &a.common.seed);
    a.flags.apply(&mut cfg);
    let (train, task, m) = resolved(&mut cfg)?;
    let run = RunDir::create(&a.common, &mut cfg, "train")?;
    run.write_manifest(&cfg)?;

    let result = run_arm(&train, &task, &m, |step, v| eprintln!("step {step:>6}  mask_iou {v:8.3}"))?;
    run.write("curve.csv", &curve_to_csv(&result.curve))?;
    let label = format!("{} seed {}", train.supervision, train.seed);
    run.write(
        "curve.svg",
        &curve_plot(&format!("{} on {}", train.supervision, train.schedule), &[(label, &result.curve)], m.maucc.ema_weight)?,
    )?;
    let final_value = result.curve.last_value().unwrap_or(f64::NAN);
    let summary = format!(
        "supervision,seed,final,maucc\n{},{},{},{}\n",
        train.supervision,
        train.seed,
        fmt_decimal(final_value),
        fmt_decimal(result.maucc)
    );
    run.write("summary.csv", &summary)?;
    println!(
        "{} seed={} final mask_iou={final_value:.3} mAUCC={:.3}",
        train.supervision, train.seed, result.maucc
    );
    Ok(())
}

// ----------------------------------------------------------------- compare

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated supervision modes, at least two.
    #[arg(long)]
    pub supervisions: Option<String>,
    /// Comma-separated training seeds; defaults to `--seed` or 1,2,3.
    #[arg(long)]
    pub seeds: Option<String>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

const COMPARE: &str = "compare";
const COMPARE_KEYS: &[&str] = &["supervisions", "seeds"];

fn spread(xs: &[f64]) -> (f64, f64, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, lo, hi)
}

pub fn compare(a: CompareArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.common, "compare")?;
    put(&mut cfg, COMPARE, "supervisions", &a.supervisions);
    put(&mut cfg, COMPARE, "seeds", &a.seeds);
    if a.seeds.is_none() {
        put(&mut cfg, COMPARE, "seeds", &a.common.seed);
    }
    a.flags.apply(&mut cfg);
    cfg.reject_unknown(COMPARE, COMPARE_KEYS)?;
    let sups: Vec<Supervision> = parse_cfg_list(&cfg, COMPARE, "supervisions", "eps,x0_from_native")?;
    let seeds: Vec<u64> = parse_cfg_list(&cfg, COMPARE, "seeds", "1,2,3")?;
    if sups.len() < 2 {
        return Err(io_failure("compare needs at least two supervisions"));
    }
    if seeds.is_empty() {
        return Err(io_failure("compare needs at least one seed"));
    }
    cfg.set(COMPARE, "supervisions", fmt_list(&sups));
    cfg.set(COMPARE, "seeds", fmt_list(&seeds));
    // The [train] section is the template every arm shares.
    cfg.set(TRAIN, "supervision", sups[0]);
    let (template, task, m) = resolved(&mut cfg)?;
    let run = RunDir::create(&a.common, &mut cfg, "compare")?;
    run.write_manifest(&cfg)?;

    let arms: Vec<(usize, Supervision, u64)> = sups
        .iter()
        .enumerate()
        .flat_map(|(i, &sup)| seeds.iter().map(move |&seed| (i, sup, seed)))
        .collect();
    let results: Vec<Result<ArmResult, Error>> = arms
        .par_iter()
        .map(|&(_, sup, seed)| {
            let cfg = TrainConfig {
                supervision: sup,
                seed,
                ..template.clone()
            };
            run_arm(&cfg, &task, &m, |_, _| {})
        })
        .collect();

    let mut summary = String::from("arm,supervision,seed,status,final,maucc\n");
    let mut failures = 0;
    for (&(i, sup, seed), r) in arms.iter().zip(&results) {
        let dir = format!("arms/{i}-{sup}-seed{seed}");
        match r {
            Ok(res) => {
                run.write(&format!("{dir}/curve.csv"), &curve_to_csv(&res.curve))?;
                let _ = writeln!(
                    summary,
                    "{i},{sup},{seed},ok,{},{}",
                    fmt_decimal(res.curve.last_value().unwrap_or(f64::NAN)),
                    fmt_decimal(res.maucc)
                );
            }
            Err(e) => {
                failures += 1;
                eprintln!("arm {sup} seed {seed} aborted: {e}");
                let _ = writeln!(summary, "{i},{sup},{seed},aborted,,");
            }
        }
    }
    run.write("summary.csv", &summary)?;

    let mut table = String::from("row,supervision,arms,maucc_mean,maucc_min,maucc_max,final_mean,final_min,final_max\n");
    println!(
        "{:<16} {:>4} {:>26} {:>26}",
        "supervision", "arms", "mAUCC mean [min, max]", "final mean [min, max]"
    );
    let mut plotted: Vec<(String, &ConvergenceCurve)> = Vec::new();
    for (i, sup) in sups.iter().enumerate() {
        let ok: Vec<&ArmResult> = arms
            .iter()
            .zip(&results)
            .filter(|((j, _, _), _)| *j == i)
            .filter_map(|(_, r)| r.as_ref().ok())
            .collect();
        for ((_, _, seed), r) in arms.iter().zip(&results).filter(|((j, _, _), _)| *j == i) {
            if let Ok(res) = r {
                plotted.push((format!("{sup} seed {seed}"), &res.curve));
            }
        }
        if ok.is_empty() {
            println!("{sup:<16} {:>4} {:>26} {:>26}", 0, "-", "-");
            let _ = writeln!(table, "{i},{sup},0,,,,,,");
            continue;
        }
        let mauccs: Vec<f64> = ok.iter().map(|r| r.maucc).collect();
        let finals: Vec<f64> = ok.iter().map(|r| r.curve.last_value().unwrap_or(f64::NAN)).collect();
        let (mm, ml, mh) = spread(&mauccs);
        let (fm, fl, fh) = spread(&finals);
        println!(
            "{sup:<16} {:>4} {:>26} {:>26}",
            ok.len(),
            format!("{mm:.3} [{ml:.3}, {mh:.3}]"),
            format!("{fm:.3} [{fl:.3}, {fh:.3}]")
        );
        let _ = writeln!(
            table,
            "{i},{sup},{},{},{},{},{},{},{}",
            ok.len(),
            fmt_decimal(mm),
            fmt_decimal(ml),
            fmt_decimal(mh),
            fmt_decimal(fm),
            fmt_decimal(fl),
            fmt_decimal(fh)
        );
    }
    run.write("table.csv", &table)?;
    run.write(
        "curves.svg",
        &curve_plot(&format!("convergence on {}", template.schedule), &plotted, m.maucc.ema_weight)?,
    )?;
    if failures > 0 {
        return Err(Failure {
            code: EXIT_DIVERGENCE,
            message: format!("{failures} of {} arms aborted", arms.len()),
        });
    }
    Ok(())
}

// ------------------------------------------------------------------- maucc

#[derive(Args, Debug)]
pub struct MauccArgs {
    #[command(flatten)]
    pub common: Common,
    /// Curve CSV with a `step,value` header.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Normalization ceiling of the metric.
    #[arg(long)]
    pub max_value: Option<f64>,
    /// EMA smoothing weight in [0, 1).
    #[arg(long)]
    pub ema: Option<f64>,
    /// Comma-separated horizon fractions.
    #[arg(long)]
    pub horizons: Option<String>,
    /// higher_better or lower_better.
    #[arg(long)]
    pub direction: Option<String>,
    /// Also write a raw vs smoothed plot here.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

const INPUT: &str = "input";

pub fn maucc(a: MauccArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&a.common, "maucc")?;
    put(&mut cfg, INPUT, "csv", &a.csv.as_ref().map(|p| p.display().to_string()));
    put(&mut cfg, MAUCC, "max_value", &a.max_value);
    put(&mut cfg, MAUCC, "ema_weight", &a.ema);
    put(&mut cfg, MAUCC, "horizons", &a.horizons);
    put(&mut cfg, MAUCC, "direction", &a.direction);
    cfg.reject_unknown(INPUT, &["csv"])?;
    let m = MauccSettings::from_config(&cfg, MAUCC)?;
    m.write_config(&mut cfg, MAUCC);
    let path: PathBuf = cfg
        .raw(INPUT, "csv")
        .map(PathBuf::from)
        .ok_or_else(|| io_failure("no curve given; pass --csv"))?;
    let text = std::fs::read_to_string(&path)
        .map_err(|e| io_failure(format!("reading {}: {e}", path.display())))?;
    let curve = curve_from_csv(&text, "metric", m.max_value, m.direction)?;
    let report = maucc_report(&curve, &m.maucc)?;

    println!("{:>8} {:>8} {:>10}", "horizon", "steps", "AUCC");
    let t_max = curve.points().last().map(|p| p.0).unwrap_or(0);
    let mut aucc = String::from("horizon,cutoff_step,aucc\n");
    for &(h, v) in &report.per_horizon {
        let cut = denoise_lab::metrics::horizon_steps(h, t_max);
        println!("{h:>8.2} {cut:>8} {v:>10.4}");
        let _ = writeln!(aucc, "{},{},{}", fmt_decimal(h), cut, fmt_decimal(v));
    }
    println!("mAUCC = {:.4} ({})", report.maucc, report.direction.name());
    let _ = writeln!(aucc, "mean,,{}", fmt_decimal(report.maucc));

    let smooth = ema_smooth(&curve, m.maucc.ema_weight)?;
    let plot = || {
        line_plot(
            &format!("mAUCC {:.3}", report.maucc),
            "step",
            "value",
            &[
                Series::from_curve("raw", &curve),
                Series::from_curve(format!("EMA {}", m.maucc.ema_weight), &smooth),
            ],
        )
    };
    if let Some(p) = &a.svg {
        std::fs::write(p, plot()).map_err(|e| io_failure(format!("writing {}: {e}", p.display())))?;
    }
    if a.common.out_dir.is_some() || cfg.raw(RUN, "out_dir").is_some() {
        let run = RunDir::create(&a.common, &mut cfg, "maucc")?;
        run.write_manifest(&cfg)?;
        run.write("aucc.csv", &aucc)?;
        run.write("smoothed.csv", &curve_to_csv(&smooth))?;
        run.write("curve.svg", &plot())?;
    }
    Ok(())
}
