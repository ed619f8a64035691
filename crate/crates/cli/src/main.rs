//! `safelearn`: run the safe-learning experiments from a config file.
//!
//! Exit codes: 0 success, 2 learning proved impossible, 1 runtime error or
//! failed audit, 64 bad usage or malformed config.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use safelearn::harness::config::{bundled, Mode};
use safelearn::harness::run::measurements_from_steps;
use safelearn::harness::{audit, cost_bounds, fit_report, run, ConfigError, Experiment, ExperimentConfig, Outcome, RunLog};

#[derive(Parser)]
#[command(name = "safelearn", version, about = "Safe learning of discrete-time dynamical systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One-step safe learning of a linear system.
    Learn1(LearnArgs),
    /// Two-step safe learning of a linear system.
    Learn2(LearnArgs),
    /// One-step safe exploration of a nonlinear system.
    #[command(name = "learnN")]
    LearnN(LearnArgs),
    /// Fit unconstrained and SOS-constrained models to exploration data.
    Fit(FitArgs),
    /// Export the projected safe region after `step` measurements as CSV.
    Region(RegionArgs),
    /// Print the offline upper bound and the lower bound on the learning cost.
    Bounds(BoundsArgs),
    /// Check that every state in a run log lies in the safety region.
    Audit(AuditArgs),
}

/// Overrides of config values.
#[derive(Args, Clone, Debug, Default)]
struct Overrides {
    /// Blend weight ε in (0, 1] for one-step learning [config: learner.epsilon, default 0.01].
    #[arg(long)]
    epsilon: Option<f64>,
    /// Seed for sampled directions [config: learner.seed, default 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Support directions per polygon [config: snapshot.directions, default 128].
    #[arg(long)]
    directions: Option<usize>,
    /// Solver feasibility tolerance [default 1e-8 for LPs, 1e-7 for cones].
    #[arg(long)]
    feas_tol: Option<f64>,
    /// Solver duality-gap tolerance [default 1e-8 for LPs, 1e-7 for cones].
    #[arg(long)]
    gap_tol: Option<f64>,
}

#[derive(Args, Debug)]
struct LearnArgs {
    /// Config file, or the name of a bundled config (e.g. example-3-4).
    config: String,
    #[command(flatten)]
    overrides: Overrides,
    /// Run log directory [default: runs/<config name>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Plan every query from the initial safe region (learn1 only).
    #[arg(long)]
    offline: bool,
    /// Number of exploration steps (learnN only) [config: learner.steps, default 30].
    #[arg(long)]
    steps: Option<usize>,
    /// Skip the offline and lower cost bounds.
    #[arg(long)]
    no_bounds: bool,
}

#[derive(Args, Debug)]
struct FitArgs {
    config: String,
    /// Run log directory or steps.csv with the training data; explores afresh when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory for the models and the report [default: runs/<config name>-fit].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RegionArgs {
    config: String,
    /// Number of measurements taken before the snapshot.
    #[arg(long, default_value_t = 0)]
    step: usize,
    /// Coordinates to project onto, e.g. `0,1` [config: snapshot.dims].
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 2]>,
    /// Replace the nonlinear bound γ.
    #[arg(long)]
    gamma: Option<f64>,
    #[command(flatten)]
    overrides: Overrides,
    /// CSV output file [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    config: String,
    /// Run log directory whose realized cost is shown alongside the bounds.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct AuditArgs {
    /// Run log directory.
    log: PathBuf,
    /// Config to audit against [default: the config.toml inside the log].
    #[arg(long)]
    config: Option<String>,
    /// Allowed violation [config: learner.safety_tol, default 1e-6].
    #[arg(long)]
    tol: Option<f64>,
}

fn parse_dims(s: &str) -> Result<[usize; 2], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok([a.parse().map_err(|e| format!("{a:?}: {e}"))?, b.parse().map_err(|e| format!("{b:?}: {e}"))?]),
        _ => Err(format!("expected two comma-separated coordinates, got {s:?}")),
    }
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 64,
            Failure::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// A config as read from disk or from the bundled set.
struct Source {
    label: String,
    path: String,
    text: String,
}

fn read_source(name: &str) -> Result<Source, Failure> {
    let path = Path::new(name);
    if path.exists() {
        let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{name}: {e}")))?;
        let label = path.file_stem().map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned());
        return Ok(Source {
            label,
            path: name.to_string(),
            text,
        });
    }
    match bundled(name) {
        Some(text) => Ok(Source {
            label: name.to_string(),
            path: format!("<bundled {name}>"),
            text: text.to_string(),
        }),
        None => Err(Failure::Usage(format!("{name}: no such file and no bundled config of that name"))),
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

/// Line of the first `key =` assignment, for anchoring validation messages.
fn key_line(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let t = l.trim_start();
        t.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

fn diagnostic(src: &Source, err: &ConfigError) -> String {
    let (line, col, msg) = match err {
        ConfigError::Parse(e) => {
            let (l, c) = e.span().map_or((1, 1), |s| line_col(&src.text, s.start));
            (l, c, e.message().trim().to_string())
        }
        ConfigError::Expr { source, .. } => {
            let hit = src.text.lines().enumerate().find_map(|(i, l)| l.find(&source.source).map(|c| (i + 1, c + source.pos + 1)));
            let (l, c) = hit.unwrap_or_else(|| (key_line(&src.text, "g_star").unwrap_or(1), 1));
            (l, c, err.to_string())
        }
        ConfigError::Invalid(msg) => {
            // messages name the offending key first, e.g. `prior.bound must …`
            let key = msg.split([' ', ':']).next().unwrap_or("");
            let leaf = key.rsplit('.').next().unwrap_or(key);
            let line = key_line(&src.text, leaf)
                .or_else(|| (!key.is_empty()).then(|| src.text.lines().position(|l| l.contains(key)).map(|i| i + 1)).flatten())
                .unwrap_or(1);
            (line, 1, err.to_string())
        }
    };
    format!("{}:{line}:{col}: {msg}", src.path)
}

fn parse_config(src: &Source) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::from_toml(&src.text).map_err(|e| Failure::Usage(diagnostic(src, &e)))
}

fn apply(cfg: &mut ExperimentConfig, ov: &Overrides) {
    if let Some(e) = ov.epsilon {
        cfg.learner.epsilon = e;
    }
    if let Some(s) = ov.seed {
        cfg.learner.seed = s;
    }
    if let Some(k) = ov.directions {
        cfg.snapshot.directions = k;
    }
    if ov.feas_tol.is_some() {
        cfg.solver.feas_tol = ov.feas_tol;
    }
    if ov.gap_tol.is_some() {
        cfg.solver.gap_tol = ov.gap_tol;
    }
}

fn resolve(src: &Source, cfg: &ExperimentConfig) -> Result<Experiment, Failure> {
    cfg.resolve().map_err(|e| Failure::Usage(format!("{}: {e}", src.path)))
}

fn load(name: &str, ov: &Overrides, edit: impl FnOnce(&mut ExperimentConfig)) -> Result<(Source, Experiment), Failure> {
    let src = read_source(name)?;
    let mut cfg = parse_config(&src)?;
    apply(&mut cfg, ov);
    edit(&mut cfg);
    let exp = resolve(&src, &cfg)?;
    Ok((src, exp))
}

fn write_log(log: &RunLog, dir: &Path) -> Result<(), Failure> {
    log.write_dir(dir).map_err(|e| Failure::Runtime(format!("writing {}: {e}", dir.display())))
}

fn print_costs(log: &RunLog) {
    println!("measurements         {}", log.steps.len());
    for (name, label) in [
        ("online_cost", "online cost"),
        ("offline_upper_bound", "offline upper bound"),
        ("lower_bound", "lower bound"),
    ] {
        if let Some(v) = log.metric(name) {
            println!("{label:<21}{v:.4}");
        }
    }
}

fn learn(args: &LearnArgs, want: Mode) -> Result<u8, Failure> {
    let (src, exp) = load(&args.config, &args.overrides, |cfg| {
        if args.offline {
            cfg.learner.offline = true;
        }
        if let Some(s) = args.steps {
            cfg.learner.steps = s;
        }
        if args.no_bounds {
            cfg.learner.bounds = false;
        }
    })?;
    if exp.config.mode != want {
        return Err(Failure::Usage(format!(
            "{}: config mode is {}, this subcommand needs {}",
            src.path,
            exp.config.mode.name(),
            want.name()
        )));
    }
    let dir = args.out.clone().unwrap_or_else(|| Path::new("runs").join(&src.label));
    match run(&exp) {
        Ok(log) => {
            write_log(&log, &dir)?;
            print_costs(&log);
            let outcome = log.outcome.as_ref().expect("completed runs record an outcome");
            match outcome {
                Outcome::Learned { .. } => println!("outcome              learned"),
                Outcome::Impossible { reason } => println!("outcome              impossible: {reason}"),
                Outcome::Completed { detail } => println!("outcome              {detail}"),
            }
            println!("log                  {}", dir.display());
            Ok(outcome.exit_code() as u8)
        }
        Err(f) => {
            write_log(&f.log, &dir)?;
            eprintln!("partial log written to {}", dir.display());
            Err(runtime(f.error))
        }
    }
}

fn read_steps(path: &Path) -> Result<Vec<safelearn::harness::StepRecord>, Failure> {
    let file = if path.is_dir() { path.join("steps.csv") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Failure::Usage(format!("{}: {e}", file.display())))?;
    RunLog::parse_steps_csv(&text).map_err(|e| Failure::Usage(format!("{}: {e}", file.display())))
}

fn fit(args: &FitArgs) -> Result<u8, Failure> {
    let (src, exp) = load(&args.config, &args.overrides, |_| {})?;
    if exp.config.mode != Mode::Nonlinear1 {
        return Err(Failure::Usage(format!("{}: fitting needs a nonlinear1 config", src.path)));
    }
    let steps = match &args.data {
        Some(p) => read_steps(p)?,
        None => {
            let mut cfg = exp.config.clone();
            cfg.learner.steps = cfg.learner.steps.max(cfg.fit.train);
            cfg.snapshot.regions = false;
            cfg.snapshot.uncertainty = false;
            let quick = resolve(&src, &cfg)?;
            info!("exploring {} steps for training data", cfg.learner.steps);
            run(&quick).map_err(|f| runtime(f.error))?.steps
        }
    };
    let data = measurements_from_steps(exp.config.n, &steps).map_err(runtime)?;
    let rep = fit_report(&exp, &data, &exp.solver()).map_err(runtime)?;
    let dir = args.out.clone().unwrap_or_else(|| Path::new("runs").join(format!("{}-fit", src.label)));
    let io = |e: std::io::Error| Failure::Runtime(format!("writing {}: {e}", dir.display()));
    fs::create_dir_all(&dir).map_err(io)?;
    fs::write(dir.join("least_squares.model"), rep.least_squares.to_text()).map_err(io)?;
    fs::write(dir.join("sos.model"), rep.sos.model.to_text()).map_err(io)?;
    let mut table = toml::Table::new();
    table.insert("train".into(), toml::Value::Integer(rep.train as i64));
    table.insert("test".into(), toml::Value::Integer(rep.test as i64));
    table.insert("rmse_least_squares".into(), toml::Value::Float(rep.rmse_least_squares));
    table.insert("rmse_sos".into(), toml::Value::Float(rep.rmse_sos));
    table.insert("sos_loss".into(), toml::Value::Float(rep.sos.loss));
    table.insert("sos_min_eigenvalue".into(), toml::Value::Float(rep.sos.certificate.min_eigenvalue()));
    let u = exp.nonlinear.as_ref().expect("nonlinear1 configs carry a bound");
    let resid = rep.sos.certificate.identity_residual(&rep.sos.model, &exp.safety, u.gamma);
    table.insert("sos_identity_residual".into(), toml::Value::Float(resid));
    fs::write(dir.join("fit.toml"), table.to_string()).map_err(io)?;
    println!("training points      {}", rep.train);
    println!("test points          {}", rep.test);
    println!("rmse least squares   {:.4}", rep.rmse_least_squares);
    println!("rmse sos             {:.4}", rep.rmse_sos);
    println!("models               {}", dir.display());
    Ok(0)
}

fn region(args: &RegionArgs) -> Result<u8, Failure> {
    let (_, exp) = load(&args.config, &args.overrides, |cfg| {
        cfg.snapshot.regions = true;
        cfg.snapshot.uncertainty = false;
        cfg.learner.bounds = false;
        if let Some(d) = args.dims {
            cfg.snapshot.dims = d;
        }
        if let (Some(g), Some(nl)) = (args.gamma, cfg.nonlinear.as_mut()) {
            nl.gamma = g;
        }
        if cfg.mode == Mode::Nonlinear1 {
            cfg.learner.steps = args.step.max(1);
        }
    })?;
    if args.gamma.is_some() && exp.config.mode != Mode::Nonlinear1 {
        return Err(Failure::Usage("--gamma applies to nonlinear1 configs only".into()));
    }
    let log = run(&exp).map_err(|f| runtime(f.error))?;
    let snap = log
        .regions
        .iter()
        .find(|s| s.k == args.step)
        .ok_or_else(|| Failure::Usage(format!("step {} is past the end of the run ({} measurements)", args.step, log.steps.len())))?;
    match &args.out {
        Some(p) => {
            let f = fs::File::create(p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
            snap.polygon.write_csv(f).map_err(runtime)?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            snap.polygon.write_csv(&mut out).map_err(runtime)?;
            out.flush().map_err(runtime)?;
        }
    }
    Ok(0)
}

fn bounds(args: &BoundsArgs) -> Result<u8, Failure> {
    let (src, exp) = load(&args.config, &args.overrides, |_| {})?;
    if exp.config.mode == Mode::Nonlinear1 {
        return Err(Failure::Usage(format!("{}: cost bounds need a linear config", src.path)));
    }
    let b = cost_bounds(&exp, &exp.solver()).map_err(runtime)?;
    println!("offline upper bound  {:.4}", b.offline);
    if let Some(dir) = &args.log {
        let steps = read_steps(dir)?;
        let online = steps.last().map_or(0.0, |s| s.cumulative_cost);
        println!("online cost          {online:.4}");
    }
    println!("lower bound          {:.4}", b.lower);
    Ok(0)
}

fn audit_log(args: &AuditArgs) -> Result<u8, Failure> {
    let name = match &args.config {
        Some(c) => c.clone(),
        None => args.log.join("config.toml").to_string_lossy().into_owned(),
    };
    let (_, exp) = load(&name, &Overrides::default(), |_| {})?;
    let steps = read_steps(&args.log)?;
    let tol = args.tol.unwrap_or(exp.config.learner.safety_tol);
    let rep = audit(&steps, &exp.safety, tol).map_err(runtime)?;
    println!("states checked       {}", rep.states);
    if rep.states > 0 {
        println!("worst margin         {:.3e}", rep.worst_margin());
    }
    for v in &rep.violations {
        println!("violation            step {} {}: {:.3e}", v.k, v.state, v.violation);
    }
    if rep.passed() {
        println!("audit                passed");
        Ok(0)
    } else {
        println!("audit                failed");
        Ok(1)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match &cli.command {
        Command::Learn1(a) => learn(a, Mode::Linear1),
        Command::Learn2(a) => learn(a, Mode::Linear2),
        Command::LearnN(a) => learn(a, Mode::Nonlinear1),
        Command::Fit(a) => fit(a),
        Command::Region(a) => region(a),
        Command::Bounds(a) => bounds(a),
        Command::Audit(a) => audit_log(a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Runtime(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
