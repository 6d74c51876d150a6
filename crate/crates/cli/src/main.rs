//! `dynident`: command-line pipeline for dynamic-model identification and
//! model-based compensation.

mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dynident_core::baseparams::{compute_base, BaseParameterization};
use dynident_core::dynamics::{self, DynamicParameters};
use dynident_core::excitation::{optimize_trajectory, FourierTrajectory, JointLimits, OptimizeOptions};
use dynident_core::ident::{self, ConsistencyConstraints, ConstraintMode, StaticsModel};
use dynident_core::kinematics::{load_model_file, psm_si, RobotModel};
use dynident_core::runtime::{self, Controller, GravityModel};
use dynident_core::signals::{build_problem, read_log, Butterworth, FilterSpec, ProblemOptions};
use dynident_core::sim;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SCHEMAS: &str = "\
File formats:
  model       TOML robot description (links, DH parameters, flags); default: bundled dVRK-Si PSM
  limits      TOML with q_min, q_max, qd_min, qd_max arrays (motor coordinates)
  params      CSV, one header row of parameter names (L<link>_<name>, A<link>_<name>), one value row
  trajectory  TOML with f_f, n_h and one [[motor]] table per motor holding q0, a[n_h], b[n_h]
  log         CSV t,q1..qn,qd1..qdn,tau1..taun in motor coordinates at a uniform rate
  states      CSV t,q1..qn,qd1..qdn,qdd1..qddn
  poses       CSV q1..qn (motor coordinates), one pose per row
  statics     CSV q1..qn,tau1..taun (static holding efforts); fitted model is TOML links, values [hx, hy, hz, m]
  base        TOML n_b, active (column indices), permutation, b_d (dependency rows) written by `baseparams`
  constraints TOML mode, [[links]] id/mass/com_min/com_max, [[elements]] id with optional fv/fc/im/ks bounds
  pid         TOML kp, kd (per motor) and rate (Hz)
  plant       TOML static_friction (per motor), rate (Hz), stick_velocity
  test traj   TOML alpha_ori (rad), alpha_pos (m), omega_gen (rad per control step), q3_offset (m)";

#[derive(Parser)]
#[command(name = "dynident", version, about = "Dynamic-model identification and gravity compensation", after_help = SCHEMAS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inspect a robot model
    #[command(subcommand)]
    Model(ModelCmd),
    /// Compute the base-parameter map
    #[command(after_help = SCHEMAS)]
    Baseparams(BaseArgs),
    /// Excitation trajectories
    #[command(subcommand)]
    Traj(TrajCmd),
    /// Simulate measurements
    #[command(subcommand)]
    Sim(SimCmd),
    /// Parameter identification
    #[command(subcommand)]
    Ident(IdentCmd),
    /// Evaluate feedforward terms
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Simulated experiments
    #[command(subcommand)]
    Exp(ExpCmd),
    /// Time computed-torque evaluations
    #[command(after_help = SCHEMAS)]
    Bench(BenchArgs),
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Load a model, print its structure and run numerical self-checks
    #[command(after_help = SCHEMAS)]
    Check(CheckArgs),
}

#[derive(Subcommand)]
enum TrajCmd {
    /// Optimize a Fourier excitation trajectory for a low condition number
    #[command(after_help = SCHEMAS)]
    Optimize(OptimizeArgs),
    /// Sample positions, velocities and accelerations of a trajectory
    #[command(after_help = SCHEMAS)]
    Sample(SampleArgs),
}

#[derive(Subcommand)]
enum SimCmd {
    /// Record simulated efforts along a trajectory as a log
    #[command(after_help = SCHEMAS)]
    Excite(ExciteArgs),
}

#[derive(Subcommand)]
enum IdentCmd {
    /// Fit dynamic parameters to a log under consistency constraints
    #[command(after_help = SCHEMAS)]
    Fit(FitArgs),
    /// Fit the statics-only gravity model of joints 1-3
    #[command(after_help = SCHEMAS)]
    Statics(StaticsArgs),
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Gravity torques at poses
    #[command(after_help = SCHEMAS)]
    Gravity(GravityArgs),
    /// Computed-torque feedforward at states
    #[command(after_help = SCHEMAS)]
    Ctff(CtffArgs),
}

#[derive(Subcommand)]
enum ExpCmd {
    /// Open-loop gravity hold against the simulated plant
    #[command(after_help = SCHEMAS)]
    Drift(DriftArgs),
    /// Sinusoidal tracking under PD control with optional feedforward
    #[command(after_help = SCHEMAS)]
    Track(TrackArgs),
}

#[derive(Args, Clone)]
struct ModelArg {
    /// Robot model TOML (default: bundled dVRK-Si PSM)
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct LimitsArg {
    /// Joint limits TOML (default: bundled PSM limits)
    #[arg(long)]
    limits: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    limits: LimitsArg,
    /// Random states for the self-checks
    #[arg(long, default_value_t = 100)]
    states: usize,
    /// Seed for every random draw of this invocation
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the built-in synthetic ground-truth parameters (CSV)
    #[arg(long)]
    synthetic_params: Option<PathBuf>,
}

#[derive(Args)]
struct BaseArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    limits: LimitsArg,
    /// Random states stacked for the rank decision
    #[arg(long, default_value_t = 150)]
    samples: usize,
    /// Seed for every random draw of this invocation
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output base-parameter map (TOML)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    limits: LimitsArg,
    /// Base-parameter map (TOML); computed from 150 random states when omitted
    #[arg(long)]
    base: Option<PathBuf>,
    /// Fundamental frequency (Hz)
    #[arg(long, default_value_t = 0.18)]
    f_f: f64,
    /// Harmonics per motor
    #[arg(long, default_value_t = 6)]
    harmonics: usize,
    /// Multistart count
    #[arg(long, default_value_t = 8)]
    starts: usize,
    /// Iteration cap per start
    #[arg(long, default_value_t = 150)]
    max_iter: usize,
    /// Seed for every random draw of this invocation
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output trajectory (TOML)
    #[arg(long)]
    out: PathBuf,
    /// Optional optimization report (text)
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Trajectory TOML
    #[arg(long)]
    traj: PathBuf,
    /// Sample rate (Hz)
    #[arg(long, default_value_t = 200.0)]
    rate: f64,
    /// Number of periods
    #[arg(long, default_value_t = 1)]
    periods: usize,
    /// Output states CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExciteArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Trajectory TOML
    #[arg(long)]
    traj: PathBuf,
    /// True parameters CSV (default: built-in synthetic set)
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 200.0)]
    rate: f64,
    #[arg(long, default_value_t = 1)]
    periods: usize,
    /// Effort noise standard deviation as a fraction of each motor's range
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Seed for every random draw of this invocation
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output log CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Unconstrained,
    GravityOnly,
    Full,
}

impl From<Mode> for ConstraintMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Unconstrained => ConstraintMode::Unconstrained,
            Mode::GravityOnly => ConstraintMode::GravityOnly,
            Mode::Full => ConstraintMode::Full,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    limits: LimitsArg,
    /// Log CSV
    #[arg(long)]
    log: PathBuf,
    /// Base-parameter map (TOML); computed when omitted
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Full)]
    mode: Mode,
    /// Constraint bounds TOML (default: model-derived bounds for the mode)
    #[arg(long)]
    constraints: Option<PathBuf>,
    /// Butterworth order
    #[arg(long, default_value_t = 6)]
    filter_order: usize,
    /// Butterworth cutoff (Hz)
    #[arg(long, default_value_t = 5.4)]
    cutoff: f64,
    /// Skip zero-phase filtering
    #[arg(long)]
    no_filter: bool,
    /// Also filter positions
    #[arg(long)]
    filter_positions: bool,
    /// Samples dropped at each end (default: filter settling length)
    #[arg(long)]
    trim: Option<usize>,
    /// Hold out samples from this time (s) on and report their NRMSE
    #[arg(long)]
    holdout_from: Option<f64>,
    /// Output parameters CSV
    #[arg(long)]
    out: PathBuf,
    /// Optional fit report (text; also printed)
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct StaticsArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    limits: LimitsArg,
    /// Static samples CSV; omit to simulate them with --simulate
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Simulate this many random poses, each approached from both directions
    #[arg(long)]
    simulate: Option<usize>,
    /// True parameters for --simulate (default: built-in synthetic set)
    #[arg(long)]
    params: Option<PathBuf>,
    /// Per-motor effort offset for --simulate, comma separated (default: plant friction band)
    #[arg(long, value_delimiter = ',')]
    offset: Option<Vec<f64>>,
    /// Seed for every random draw of this invocation
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Constraint bounds TOML (default: gravity-only model bounds)
    #[arg(long)]
    constraints: Option<PathBuf>,
    /// Output statics model (TOML)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct PoseSource {
    /// Poses CSV
    #[arg(long)]
    poses: Option<PathBuf>,
    /// Random poses when no file is given
    #[arg(long, default_value_t = 5)]
    count: usize,
    /// Seed for every random draw of this invocation
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct CompensatorArgs {
    /// Identified parameters CSV (full gravity model)
    #[arg(long, conflicts_with = "statics")]
    params: Option<PathBuf>,
    /// Statics model TOML (joints 1-3 only)
    #[arg(long)]
    statics: Option<PathBuf>,
}

#[derive(Args)]
struct GravityArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    limits: LimitsArg,
    #[command(flatten)]
    comp: CompensatorArgs,
    #[command(flatten)]
    poses: PoseSource,
    /// Output CSV q1..qn,tau_g1..tau_gn
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CtffArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Parameters CSV
    #[arg(long)]
    params: PathBuf,
    /// States CSV (measured q, qd and desired qdd)
    #[arg(long)]
    states: PathBuf,
    /// Output CSV t,tau1..taun
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct PlantArgs {
    /// True plant parameters CSV (default: built-in synthetic set)
    #[arg(long)]
    truth: Option<PathBuf>,
    /// PD gains TOML (kp, kd, rate)
    #[arg(long)]
    pid: Option<PathBuf>,
    /// Plant TOML (static_friction, rate, stick_velocity)
    #[arg(long)]
    plant: Option<PathBuf>,
}

#[derive(Args)]
struct DriftArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    limits: LimitsArg,
    #[command(flatten)]
    comp: CompensatorArgs,
    #[command(flatten)]
    plant: PlantArgs,
    #[command(flatten)]
    poses: PoseSource,
    /// Open-loop hold (s)
    #[arg(long, default_value_t = runtime::DEFAULT_HOLD_S)]
    hold: f64,
    /// PD settle before the hold (s)
    #[arg(long, default_value_t = runtime::DEFAULT_SETTLE_S)]
    settle: f64,
    /// Output report (TOML)
    #[arg(long)]
    out: PathBuf,
    /// Optional per-pose, per-joint table (CSV)
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ControllerKind {
    Pid,
    #[value(name = "pid+gravity")]
    PidGravity,
    #[value(name = "pid+ctff")]
    PidCtff,
    All,
}

#[derive(Args)]
struct TrackArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    limits: LimitsArg,
    #[command(flatten)]
    comp: CompensatorArgs,
    #[command(flatten)]
    plant: PlantArgs,
    #[arg(long, value_enum, default_value_t = ControllerKind::All)]
    controller: ControllerKind,
    /// Test trajectory TOML (alpha_ori, alpha_pos, omega_gen, q3_offset)
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Trial length (s); default one reference period
    #[arg(long)]
    duration: Option<f64>,
    /// Regulation pre-roll (s)
    #[arg(long, default_value_t = runtime::DEFAULT_SETTLE_S)]
    settle: f64,
    /// Output directory for <controller>.toml reports and <controller>.csv traces
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    limits: LimitsArg,
    /// Parameters CSV (default: built-in synthetic set)
    #[arg(long)]
    params: Option<PathBuf>,
    /// Random states timed
    #[arg(long, default_value_t = 10_000)]
    count: usize,
    /// Seed for every random draw of this invocation
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Invalid flag combinations clap cannot express; exits with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn model(arg: &ModelArg) -> Result<RobotModel> {
    match &arg.model {
        Some(p) => load_model_file(p).with_context(|| format!("loading model {}", p.display())),
        None => Ok(psm_si()),
    }
}

fn limits(arg: &LimitsArg, model: &RobotModel) -> Result<JointLimits> {
    let l = match &arg.limits {
        Some(p) => JointLimits::load(p).with_context(|| format!("loading limits {}", p.display()))?,
        None => JointLimits::psm_default(),
    };
    l.validate()?;
    l.check_dof(model.dof())?;
    Ok(l)
}

fn params_or_synthetic(model: &RobotModel, path: Option<&PathBuf>) -> Result<DynamicParameters> {
    match path {
        Some(p) => io::read_params(model, p),
        None => Ok(sim::synthetic_parameters(model)),
    }
}

fn base(model: &RobotModel, limits: &JointLimits, path: Option<&PathBuf>) -> Result<BaseParameterization> {
    match path {
        Some(p) => BaseParameterization::load(p).with_context(|| format!("loading base map {}", p.display())),
        None => Ok(compute_base(model, limits, 150, 0)?),
    }
}

fn poses(src: &PoseSource, limits: &JointLimits) -> Result<Vec<DVector<f64>>> {
    match &src.poses {
        Some(p) => io::read_rows(p, limits.dof()),
        None => Ok(sim::random_poses(limits, src.count, &mut ChaCha8Rng::seed_from_u64(src.seed))),
    }
}

enum Compensator {
    Full(DynamicParameters),
    Statics(StaticsModel),
}

impl Compensator {
    fn load(model: &RobotModel, args: &CompensatorArgs) -> Result<Option<Self>> {
        Ok(match (&args.params, &args.statics) {
            (Some(p), _) => Some(Compensator::Full(io::read_params(model, p)?)),
            (None, Some(s)) => Some(Compensator::Statics(
                StaticsModel::load(s).with_context(|| format!("loading statics model {}", s.display()))?,
            )),
            (None, None) => None,
        })
    }

    fn gravity(&self) -> GravityModel<'_> {
        match self {
            Compensator::Full(p) => GravityModel::Full(p),
            Compensator::Statics(s) => GravityModel::Statics(s),
        }
    }
}

fn plant_setup(model: &RobotModel, args: &PlantArgs) -> Result<(DynamicParameters, runtime::PidConfig, runtime::PlantConfig)> {
    let truth = params_or_synthetic(model, args.truth.as_ref())?;
    let pid = match &args.pid {
        Some(p) => runtime::PidConfig::load(p)?,
        None => runtime::PidConfig::psm_default(),
    };
    let plant = match &args.plant {
        Some(p) => runtime::PlantConfig::load(p)?,
        None => runtime::PlantConfig::psm_default(),
    };
    Ok((truth, pid, plant))
}

fn cmd_check(a: &CheckArgs) -> Result<()> {
    let m = model(&a.model)?;
    let l = limits(&a.limits, &m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let truth = sim::synthetic_parameters(&m);
    let mut regressor_err = 0.0f64;
    let mut asym = 0.0f64;
    let mut min_eig = f64::INFINITY;
    for _ in 0..a.states {
        let s = dynident_core::baseparams::random_state(&l, &mut rng);
        let y = dynamics::regressor(&m, &s)?;
        let id = dynamics::inverse_dynamics(&m, &truth, &s)?;
        regressor_err = regressor_err.max((y * &truth.values - &id).norm() / id.norm().max(1e-300));
        let mm = dynamics::mass_matrix(&m, &truth, &s.q)?;
        asym = asym.max((&mm - mm.transpose()).amax() / mm.amax());
        min_eig = min_eig.min(mm.symmetric_eigenvalues().min());
    }
    let ids: Vec<String> = m.links.iter().map(|l| format!("\"{}\"", l.id)).collect();
    println!("dof = {}", m.dof());
    println!("links = {}", m.n_links());
    println!("kinematic_frames = {}", m.n_kinematic());
    println!("auxiliary_elements = {}", m.n_auxiliary());
    println!("parameters = {}", m.n_links() * dynamics::PARAMS_PER_LINK);
    println!("active_parameters = {}", dynamics::active_indices(&m).len());
    println!("link_ids = [{}]", ids.join(", "));
    println!("checked_states = {}", a.states);
    println!("regressor_relative_error = {regressor_err:e}");
    println!("mass_matrix_asymmetry = {asym:e}");
    println!("mass_matrix_min_eigenvalue = {min_eig:e}");
    if let Some(p) = &a.synthetic_params {
        io::write(p, &truth.to_csv(&m))?;
    }
    if a.states > 0 && !(regressor_err < 1e-9 && asym < 1e-10 && min_eig > 0.0) {
        bail!("model self-check failed");
    }
    Ok(())
}

fn cmd_base(a: &BaseArgs) -> Result<()> {
    let m = model(&a.model)?;
    let l = limits(&a.limits, &m)?;
    let b = compute_base(&m, &l, a.samples, a.seed)?;
    io::write(&a.out, &b.to_toml())?;
    println!("n_active = {}", b.n_active());
    println!("n_b = {}", b.n_b);
    let names: Vec<String> = b.names(&m).iter().map(|n| format!("\"{n}\"")).collect();
    println!("base = [{}]", names.join(", "));
    Ok(())
}

fn cmd_optimize(a: &OptimizeArgs) -> Result<()> {
    let m = model(&a.model)?;
    let l = limits(&a.limits, &m)?;
    let b = base(&m, &l, a.base.as_ref())?;
    let opts = OptimizeOptions {
        f_f: a.f_f,
        n_h: a.harmonics,
        seed: a.seed,
        starts: a.starts,
        max_iter: a.max_iter,
        ..Default::default()
    };
    let r = optimize_trajectory(&m, &b, &l, &opts)?;
    io::write(&a.out, &r.trajectory.to_toml())?;
    let mut text = format!(
        "kappa = {:e}\nlog_kappa = {:e}\nbest_start = {}\nverification_slack = {:e}\n",
        r.kappa, r.log_kappa, r.best_start, r.verification_slack
    );
    for s in &r.starts {
        text.push_str(&format!(
            "[[start]]\nindex = {}\ninitial_log_kappa = {:e}\nfinal_log_kappa = {:e}\niterations = {}\nverified = {}\n",
            s.seed_index, s.initial_log_kappa, s.final_log_kappa, s.iterations, s.verified
        ));
    }
    if let Some(p) = &a.report {
        io::write(p, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let t = FourierTrajectory::load(&a.traj)?;
    if !(a.rate > 0.0) || a.periods == 0 {
        return Err(usage("rate and periods must be positive"));
    }
    let n = (a.periods as f64 * t.period() * a.rate).round() as usize;
    let states: Vec<(f64, dynamics::JointState)> = (0..n)
        .map(|i| {
            let time = i as f64 / a.rate;
            (time, t.state(time))
        })
        .collect();
    io::write(&a.out, &io::states_csv(t.dof(), &states))?;
    println!("samples = {n}");
    println!("period = {}", t.period());
    Ok(())
}

fn cmd_excite(a: &ExciteArgs) -> Result<()> {
    let m = model(&a.model)?;
    let t = FourierTrajectory::load(&a.traj)?;
    let p = params_or_synthetic(&m, a.params.as_ref())?;
    let opts = sim::ExciteOptions {
        rate: a.rate,
        periods: a.periods,
        noise: a.noise,
        seed: a.seed,
    };
    let log = sim::excite(&m, &p, &t, &opts)?;
    log.write(&a.out)?;
    println!("samples = {}", log.len());
    println!("duration = {}", log.duration());
    Ok(())
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let m = model(&a.model)?;
    let l = limits(&a.limits, &m)?;
    let b = base(&m, &l, a.base.as_ref())?;
    let log = read_log(&a.log)?;
    let filter = (!a.no_filter).then_some(FilterSpec {
        order: a.filter_order,
        cutoff_hz: a.cutoff,
    });
    let opts = ProblemOptions {
        filter,
        filter_positions: a.filter_positions,
    };
    let problem = build_problem(&m, &b, &log, &opts)?;
    let trim = match (a.trim, filter) {
        (Some(t), _) => t,
        (None, Some(f)) => Butterworth::design(&f, log.rate())?.settling_length(),
        (None, None) => 0,
    };
    if 2 * trim >= problem.n_samples() {
        bail!("trimming {trim} samples per end leaves no data");
    }
    let problem = problem.select_samples(trim..problem.n_samples() - trim);
    let (train, test) = match a.holdout_from {
        Some(t) => {
            let (tr, te) = problem.split_at_time(t);
            (tr, Some(te))
        }
        None => (problem, None),
    };
    let mode: ConstraintMode = a.mode.into();
    let c = match &a.constraints {
        Some(p) => ConsistencyConstraints::load(&m, p)?,
        None => ConsistencyConstraints::defaults(&m, mode),
    };
    let c = ConsistencyConstraints { mode, ..c };
    let (theta, report) = ident::solve(&train, &c)?;
    io::write(&a.out, &theta.to_csv(&m))?;
    let mut text = report.to_text();
    text.push_str(&format!("training_samples = {}\n", train.n_samples()));
    if let Some(te) = test {
        if te.n_samples() == 0 {
            bail!("no samples after the hold-out time");
        }
        let pred = &te.w * te.to_active(&theta.values);
        let nr: Vec<String> = (0..te.dof)
            .map(|i| {
                ident::nrmse(&te.motor_series(&te.b, i), &te.motor_series(&pred, i))
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|_| "nan".into())
            })
            .collect();
        text.push_str(&format!("holdout_samples = {}\nholdout_nrmse_percent = [{}]\n", te.n_samples(), nr.join(", ")));
    }
    if let Some(p) = &a.report {
        io::write(p, &text)?;
    }
    print!("{text}");
    if !report.audit.is_feasible(ident::FEASIBILITY_TOL) {
        bail!("identified parameters violate the declared constraints");
    }
    Ok(())
}

fn cmd_statics(a: &StaticsArgs) -> Result<()> {
    let m = model(&a.model)?;
    let l = limits(&a.limits, &m)?;
    let samples = match (&a.samples, a.simulate) {
        (Some(p), None) => io::read_static_samples(p, m.dof())?,
        (None, Some(n)) => {
            let truth = params_or_synthetic(&m, a.params.as_ref())?;
            let offset = a.offset.clone().unwrap_or_else(|| runtime::PlantConfig::psm_default().static_friction);
            if offset.len() != m.dof() {
                return Err(usage(format!("--offset needs {} values, got {}", m.dof(), offset.len())));
            }
            let poses = sim::random_poses(&l, n, &mut ChaCha8Rng::seed_from_u64(a.seed));
            sim::static_samples(&m, &truth, &poses, &DVector::from_vec(offset))?
        }
        _ => return Err(usage("give exactly one of --samples or --simulate")),
    };
    let c = match &a.constraints {
        Some(p) => ConsistencyConstraints::load(&m, p)?,
        None => ConsistencyConstraints::defaults(&m, ConstraintMode::GravityOnly),
    };
    let (s, report) = ident::fit_statics(&m, &samples, &c)?;
    io::write(&a.out, &s.to_toml())?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_gravity(a: &GravityArgs) -> Result<()> {
    let m = model(&a.model)?;
    let l = limits(&a.limits, &m)?;
    let comp = Compensator::load(&m, &a.comp)?.ok_or_else(|| usage("give --params or --statics"))?;
    let qs = poses(&a.poses, &l)?;
    let mut rows = Vec::with_capacity(qs.len());
    for q in &qs {
        rows.push((q.clone(), comp.gravity().torque(&m, q)?));
    }
    io::write(&a.out, &io::pairs_csv(m.dof(), "tau_g", &rows))?;
    println!("poses = {}", rows.len());
    println!("model = \"{}\"", comp.gravity().name());
    Ok(())
}

fn cmd_ctff(a: &CtffArgs) -> Result<()> {
    let m = model(&a.model)?;
    let p = io::read_params(&m, &a.params)?;
    let states = io::read_states(&a.states, m.dof())?;
    let mut out = Vec::with_capacity(states.len());
    for (t, s) in &states {
        out.push((*t, runtime::computed_torque(&m, &p, &s.q, &s.qd, &s.qdd)?));
    }
    io::write(&a.out, &io::torque_csv(m.dof(), &out))?;
    println!("states = {}", out.len());
    Ok(())
}

fn cmd_drift(a: &DriftArgs) -> Result<()> {
    let m = model(&a.model)?;
    let l = limits(&a.limits, &m)?;
    let (truth, pid, plant) = plant_setup(&m, &a.plant)?;
    let comp = match Compensator::load(&m, &a.comp)? {
        Some(c) => c,
        None => Compensator::Full(truth.clone()),
    };
    let qs = poses(&a.poses, &l)?;
    let opts = runtime::DriftOptions {
        hold: a.hold,
        settle: a.settle,
        pid,
        plant,
        limits: l,
    };
    let r = runtime::simulate_drift_test(&m, &truth, comp.gravity(), &qs, &opts)?;
    io::write(&a.out, &r.to_text())?;
    if let Some(p) = &a.csv {
        io::write(p, &r.to_csv())?;
    }
    println!("poses = {}", r.poses.len());
    println!("drift_poses = {}", r.drift_poses);
    println!("skipped_poses = {}", r.skipped_poses);
    for p in &r.poses {
        if let Some(note) = &p.skipped {
            println!("pose {} skipped: {note}", p.index);
        }
    }
    Ok(())
}

fn cmd_track(a: &TrackArgs) -> Result<()> {
    let m = model(&a.model)?;
    let l = limits(&a.limits, &m)?;
    let (truth, pid, plant) = plant_setup(&m, &a.plant)?;
    let trajectory = match &a.trajectory {
        Some(p) => runtime::TestTrajectoryConfig::load(p)?,
        None => runtime::TestTrajectoryConfig::default(),
    };
    let comp = Compensator::load(&m, &a.comp)?;
    let hat = match &comp {
        Some(Compensator::Full(p)) => Some(p),
        _ => None,
    };
    let gravity = comp.as_ref().map(Compensator::gravity);
    let need = |what: &str| usage(format!("{what} needs --params (or --statics for pid+gravity)"));
    let mut controllers = Vec::new();
    if matches!(a.controller, ControllerKind::Pid | ControllerKind::All) {
        controllers.push(Controller::Pid);
    }
    if matches!(a.controller, ControllerKind::PidGravity | ControllerKind::All) {
        controllers.push(Controller::PidGravity(gravity.ok_or_else(|| need("pid+gravity"))?));
    }
    if matches!(a.controller, ControllerKind::PidCtff | ControllerKind::All) {
        if a.controller == ControllerKind::All && hat.is_none() && gravity.is_some() {
            // A statics model cannot drive computed torque; skip it.
        } else {
            controllers.push(Controller::PidComputedTorque(hat.ok_or_else(|| need("pid+ctff"))?));
        }
    }
    let opts = runtime::TrackingOptions {
        pid,
        plant,
        trajectory,
        limits: l,
        duration: a.duration,
        settle: a.settle,
    };
    let reports = runtime::compare_controllers(&m, &truth, &controllers, &opts)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for r in &reports {
        let stem = r.controller.replace('+', "_");
        io::write(&a.out_dir.join(format!("{stem}.toml")), &r.to_text())?;
        io::write(&a.out_dir.join(format!("{stem}.csv")), &r.trace.to_csv())?;
        print!("{}", r.table());
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let m = model(&a.model)?;
    let l = limits(&a.limits, &m)?;
    let p = params_or_synthetic(&m, a.params.as_ref())?;
    let b = runtime::benchmark_runtime(&m, &p, &l, a.count, a.seed)?;
    println!("states = {}", b.n);
    println!("mean_ms = {:.6}", b.mean_ms);
    println!("std_ms = {:.6}", b.std_ms);
    Ok(())
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("DYNIDENT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("DYNIDENT_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Model(ModelCmd::Check(a)) => cmd_check(a),
        Command::Baseparams(a) => cmd_base(a),
        Command::Traj(TrajCmd::Optimize(a)) => cmd_optimize(a),
        Command::Traj(TrajCmd::Sample(a)) => cmd_sample(a),
        Command::Sim(SimCmd::Excite(a)) => cmd_excite(a),
        Command::Ident(IdentCmd::Fit(a)) => cmd_fit(a),
        Command::Ident(IdentCmd::Statics(a)) => cmd_statics(a),
        Command::Eval(EvalCmd::Gravity(a)) => cmd_gravity(a),
        Command::Eval(EvalCmd::Ctff(a)) => cmd_ctff(a),
        Command::Exp(ExpCmd::Drift(a)) => cmd_drift(a),
        Command::Exp(ExpCmd::Track(a)) => cmd_track(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
