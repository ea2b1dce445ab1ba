//! Command-line workflows. Every command reads a TOML run configuration,
//! writes only inside the output directory, and echoes the resolved
//! configuration there as `config.toml`.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success (train: target risk reached; verify: verified; simulate: all safe and reached) |
//! | 1 | verify: violated; simulate: some rollout unsafe or short of the goal |
//! | 2 | verify: inconclusive |
//! | 3 | train: iteration cap |
//! | 4 | train: diverged |
//! | 64 | malformed or inconsistent configuration |
//! | 65 | checkpoint or gains file does not match the configuration |
//! | 66 | missing input file or empty run directory |
//! | 70 | any other failure (resource cap, numerical error, I/O) |

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::certify::{train_with, RiskRecord, StopReason, TrainState};
use crate::config::{GainsFile, RawConfig, RunConfig};
use crate::diffnet::{Checkpoint, LinearPolicy, MlpNet, Policy};
use crate::error::Error;
use crate::par;
use crate::sim::{batch_rollouts, write_trajectory_csv};
use crate::systems::closed_loop;
use crate::verify::{verify_all, Status};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATED: i32 = 1;
pub const EXIT_INCONCLUSIVE: i32 = 2;
pub const EXIT_ITERATION_CAP: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_CONFIG: i32 = 64;
pub const EXIT_MISMATCH: i32 = 65;
pub const EXIT_NO_INPUT: i32 = 66;
pub const EXIT_FAILURE: i32 = 70;

#[derive(Parser, Debug)]
#[command(
    name = "neural-cert",
    version,
    about = "Train, verify and simulate neural safety and goal-reaching certificates"
)]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Jointly train the policy and both certificates.
    Train,
    /// Grid-verify the certificates of a checkpoint.
    Verify {
        /// Defaults to `<out>/checkpoint.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Roll out a policy from seeded initial states.
    Simulate {
        /// A checkpoint (JSON) or a gains file (TOML, `gains = [[...]]`).
        policy: PathBuf,
    },
    /// Collect a run directory into one plot-ready `bundle.json`.
    Export {
        /// Defaults to the output directory.
        run_dir: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Checkpoint(_) => EXIT_MISMATCH,
            Error::Io(io) if io.kind() == ErrorKind::NotFound => EXIT_NO_INPUT,
            _ => EXIT_FAILURE,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parse-free entry point: run a command and return its exit code,
/// reporting failures on stderr.
pub fn run(cli: &Cli) -> i32 {
    if let Some(t) = cli.threads {
        par::init_threads(t);
    }
    let res = match &cli.command {
        Command::Train => cmd_train(cli),
        Command::Verify { checkpoint } => cmd_verify(cli, checkpoint.as_deref()),
        Command::Simulate { policy } => cmd_simulate(cli, policy),
        Command::Export { run_dir } => cmd_export(cli, run_dir.as_deref()),
    };
    match res {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn read_input(path: &Path, what: &str) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| {
        let code = if e.kind() == ErrorKind::NotFound {
            EXIT_NO_INPUT
        } else {
            EXIT_FAILURE
        };
        Failure::new(code, format!("cannot read {what} {}: {e}", path.display()))
    })
}

fn parse_raw(path: &Path) -> CliResult<RawConfig> {
    let text = read_input(path, "config")?;
    toml::from_str(&text).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

fn resolve(raw: &RawConfig, path: &Path) -> CliResult<RunConfig> {
    RunConfig::resolve(raw).map_err(|e| match e {
        Error::Config(msg) => Failure::new(EXIT_CONFIG, format!("{}: {msg}", path.display())),
        other => Failure::new(EXIT_CONFIG, format!("{}: {other}", path.display())),
    })
}

/// Load `--config`, apply the command-line overrides, create the output
/// directory and echo the resolved configuration into it.
fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::new(EXIT_CONFIG, "this command needs --config"))?;
    let mut raw = parse_raw(path)?;
    if cli.seed.is_some() {
        raw.seed = cli.seed;
    }
    if cli.out.is_some() {
        raw.out = cli.out.clone();
    }
    let cfg = resolve(&raw, path)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.toml"), cfg.to_toml_string()?)?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    system: &'a str,
    seed: u64,
    stop: &'static str,
    message: Option<&'a str>,
    iterations: u64,
    l_b: Option<f64>,
    l_v: Option<f64>,
    total: Option<f64>,
}

fn cmd_train(cli: &Cli) -> CliResult<i32> {
    let cfg = load_config(cli)?;
    let out = &cfg.out;
    let state = TrainState::init(&cfg.system, &cfg.model, cfg.seed)?;
    let mut history = BufWriter::new(File::create(out.join("history.csv"))?);
    let mut timing = BufWriter::new(File::create(out.join("history_timing.csv"))?);
    writeln!(history, "iteration,l_b,l_v,total")?;
    writeln!(timing, "iteration,wall_time_s")?;
    let ck_dir = out.join("checkpoints");
    if cfg.checkpoint_every > 0 {
        fs::create_dir_all(&ck_dir)?;
    }
    let name = cfg.system.name().to_string();
    let start = Instant::now();
    let mut observer = |s: &TrainState, r: &RiskRecord| -> crate::Result<()> {
        writeln!(history, "{},{},{},{}", r.iteration, r.l_b, r.l_v, r.total)?;
        writeln!(timing, "{},{:.6}", r.iteration, start.elapsed().as_secs_f64())?;
        if r.iteration.is_multiple_of(1000) {
            eprintln!(
                "iter {:>6}  l_b {:.6e}  l_v {:.6e}  total {:.6e}",
                r.iteration, r.l_b, r.l_v, r.total
            );
        }
        if cfg.checkpoint_every > 0 && r.iteration > 0 && r.iteration.is_multiple_of(cfg.checkpoint_every) {
            Checkpoint::new(&name, r.iteration, &s.barrier, &s.lyapunov, &s.policy)
                .save(&ck_dir.join(format!("iter_{:06}.json", r.iteration)))?;
        }
        Ok(())
    };
    let outcome = train_with(state, &cfg.system, &cfg.sets, &cfg.train, &mut observer)?;
    history.flush()?;
    timing.flush()?;
    let s = &outcome.state;
    Checkpoint::new(&name, s.iteration, &s.barrier, &s.lyapunov, &s.policy).save(&out.join("checkpoint.json"))?;
    let message = match &outcome.stop {
        StopReason::Diverged(m) => Some(m.as_str()),
        _ => None,
    };
    let summary = TrainSummary {
        system: &name,
        seed: cfg.seed,
        stop: outcome.stop.label(),
        message,
        iterations: s.iteration,
        l_b: outcome.final_risk.as_ref().map(|r| r.l_b()),
        l_v: outcome.final_risk.as_ref().map(|r| r.l_v()),
        total: outcome.final_risk.as_ref().map(|r| r.total()),
    };
    fs::write(
        out.join("train_summary.json"),
        serde_json::to_string_pretty(&summary).map_err(Error::from)? + "\n",
    )?;
    println!(
        "{}: {} after {} iterations, total risk {}",
        name,
        outcome.stop.label(),
        s.iteration,
        summary.total.map_or("n/a".to_string(), |t| format!("{t:.6e}"))
    );
    if let Some(m) = message {
        println!("  {m}");
    }
    Ok(match outcome.stop {
        StopReason::TargetReached => EXIT_OK,
        StopReason::IterationCap => EXIT_ITERATION_CAP,
        StopReason::Diverged(_) => EXIT_DIVERGED,
    })
}

fn mismatch(msg: impl Into<String>) -> Failure {
    Failure::new(EXIT_MISMATCH, msg)
}

fn check_policy(policy: &Policy, cfg: &RunConfig) -> CliResult<()> {
    let (n, m) = (cfg.system.state_dim(), cfg.system.control_dim());
    if policy.state_dim() != n || policy.control_dim() != m {
        return Err(mismatch(format!(
            "policy maps {} states to {} controls; {} needs {n} to {m}",
            policy.state_dim(),
            policy.control_dim(),
            cfg.system.name()
        )));
    }
    Ok(())
}

fn load_checkpoint(path: &Path, cfg: &RunConfig) -> CliResult<(MlpNet, MlpNet, Policy)> {
    let text = read_input(path, "checkpoint")?;
    let ck = Checkpoint::parse(&text).map_err(|e| mismatch(format!("{}: {e}", path.display())))?;
    if ck.system != cfg.system.name() {
        return Err(mismatch(format!(
            "{}: checkpoint is for system {:?}, config is for {:?}",
            path.display(),
            ck.system,
            cfg.system.name()
        )));
    }
    let (b, v, p) = ck
        .networks()
        .map_err(|e| mismatch(format!("{}: {e}", path.display())))?;
    let n = cfg.system.state_dim();
    for (what, net) in [("barrier", &b), ("lyapunov", &v)] {
        if net.input_dim() != n {
            return Err(mismatch(format!(
                "{}: {what} network takes {} inputs, state dimension is {n}",
                path.display(),
                net.input_dim()
            )));
        }
    }
    check_policy(&p, cfg)?;
    Ok((b, v, p))
}

fn cmd_verify(cli: &Cli, checkpoint: Option<&Path>) -> CliResult<i32> {
    let cfg = load_config(cli)?;
    let ck_path = checkpoint.map_or_else(|| cfg.out.join("checkpoint.json"), Path::to_path_buf);
    let (b, v, policy) = load_checkpoint(&ck_path, &cfg)?;
    let field = closed_loop(&cfg.system, &policy)?;
    let report = verify_all(&b, &v, &field, &cfg.sets, &cfg.verify)?;
    fs::write(cfg.out.join("report.json"), report.to_json()? + "\n")?;
    let summary = report.summary();
    fs::write(cfg.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(match report.status {
        Status::Verified => EXIT_OK,
        Status::Violated => EXIT_VIOLATED,
        Status::Inconclusive => EXIT_INCONCLUSIVE,
    })
}

/// A checkpoint if the file is JSON, otherwise a TOML gains file.
fn load_policy(path: &Path, cfg: &RunConfig) -> CliResult<(Policy, &'static str)> {
    let text = read_input(path, "policy file")?;
    if text.trim_start().starts_with('{') {
        let (_, _, p) = load_checkpoint(path, cfg)?;
        return Ok((p, "checkpoint"));
    }
    let gains = GainsFile::parse(&text).map_err(|e| mismatch(format!("{}: {e}", path.display())))?;
    let lin = LinearPolicy::from_rows(&gains.gains).map_err(|e| mismatch(format!("{}: {e}", path.display())))?;
    let p = Policy::Linear(lin);
    check_policy(&p, cfg)?;
    Ok((p, "gains"))
}

#[derive(Serialize)]
struct RunRecord<'a> {
    index: usize,
    file: String,
    start: &'a [f64],
    safe: bool,
    first_violation_time: Option<f64>,
    min_dist_unsafe: f64,
    reached_goal: bool,
    final_dist_goal: f64,
    monotone_envelope_ok: bool,
    blowup: Option<&'a str>,
}

#[derive(Serialize)]
struct SimulateSummary<'a> {
    policy_source: &'static str,
    policy_checksum: u64,
    seed: u64,
    dt: f64,
    horizon: f64,
    #[serde(flatten)]
    summary: &'a crate::sim::RolloutSummary,
    fraction_unsafe: f64,
    runs: Vec<RunRecord<'a>>,
}

fn cmd_simulate(cli: &Cli, policy_path: &Path) -> CliResult<i32> {
    let cfg = load_config(cli)?;
    let (policy, source) = load_policy(policy_path, &cfg)?;
    let s = &cfg.sets;
    let ro = batch_rollouts(&policy, &cfg.system, &s.x0, &s.xu, &s.xg, cfg.seed, &cfg.simulate)?;
    let dir = cfg.out.join("trajectories");
    fs::create_dir_all(&dir)?;
    let mut runs = Vec::with_capacity(ro.runs.len());
    for (i, (traj, v)) in ro.runs.iter().enumerate() {
        let file = format!("traj_{i:03}.csv");
        write_trajectory_csv(&dir.join(&file), traj, &s.xu, &s.xg)?;
        runs.push(RunRecord {
            index: i,
            file: format!("trajectories/{file}"),
            start: &traj.states[0],
            safe: v.safe,
            first_violation_time: v.first_violation_time,
            min_dist_unsafe: v.min_dist_unsafe,
            reached_goal: v.reached_goal,
            final_dist_goal: v.final_dist_goal,
            monotone_envelope_ok: v.monotone_envelope_ok,
            blowup: traj.blowup.as_deref(),
        });
    }
    let sum = &ro.summary;
    let out = SimulateSummary {
        policy_source: source,
        policy_checksum: policy.checksum(),
        seed: cfg.seed,
        dt: cfg.simulate.dt,
        horizon: cfg.simulate.horizon,
        summary: sum,
        fraction_unsafe: (sum.n - sum.n_safe) as f64 / sum.n as f64,
        runs,
    };
    fs::write(
        cfg.out.join("summary.json"),
        serde_json::to_string_pretty(&out).map_err(Error::from)? + "\n",
    )?;
    println!(
        "{}: {}/{} safe, {}/{} reached goal, {} blew up, min distance to unsafe {:.6}, max final distance to goal {:.6}",
        sum.system, sum.n_safe, sum.n, sum.n_reached, sum.n, sum.n_blowup, sum.min_dist_unsafe, sum.max_final_dist_goal
    );
    Ok(if sum.all_safe_and_reached() {
        EXIT_OK
    } else {
        EXIT_VIOLATED
    })
}

/// Columns and rows of one of our own comma-separated numeric files.
#[derive(Serialize)]
struct Table {
    name: String,
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_table(path: &Path) -> CliResult<Table> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let columns = lines.next().unwrap_or("").split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let row = line
            .split(',')
            .map(|c| if c.is_empty() { Ok(f64::NAN) } else { c.parse::<f64>() })
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| mismatch(format!("{}:{}: {e}", path.display(), k + 2)))?;
        rows.push(row);
    }
    Ok(Table {
        name: path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        columns,
        rows,
    })
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| mismatch(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct Slice {
    axes: [usize; 2],
    resolution: usize,
    /// Values of the remaining coordinates.
    fixed: Vec<f64>,
    axis_a: Vec<f64>,
    axis_b: Vec<f64>,
    /// `barrier[i][j]` is B at `axis_a[i]`, `axis_b[j]`.
    barrier: Vec<Vec<f64>>,
    lyapunov: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct Bundle {
    system: Option<String>,
    notes: Vec<String>,
    history: Option<Table>,
    slice: Option<Slice>,
    trajectories: Vec<Table>,
    rollouts: Option<Value>,
    report: Option<Value>,
    train_summary: Option<Value>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Axis coordinates `a`, `b` and the values `B[i][j]`, `V[i][j]` at `(a[i], b[j])`.
pub type SliceGrids = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>);

/// B and V on a regular grid over the state box, in the plane of two axes.
pub fn level_set_slice(b: &MlpNet, v: &MlpNet, cfg: &RunConfig) -> crate::Result<SliceGrids> {
    let [ia, ib] = cfg.slice_axes;
    let r = cfg.slice_resolution;
    let (lo, hi) = cfg.sets.x.bounds();
    let xa = linspace(lo[ia], hi[ia], r);
    let xb = linspace(lo[ib], hi[ib], r);
    let n = cfg.system.state_dim();
    let rows = par::map_indexed(r, |i| {
        let mut x = vec![0.0; n];
        x[ia] = xa[i];
        let mut bs = Vec::with_capacity(r);
        let mut vs = Vec::with_capacity(r);
        for &q in &xb {
            x[ib] = q;
            bs.push(b.eval(&x)?);
            vs.push(v.eval(&x)?);
        }
        Ok::<_, Error>((bs, vs))
    });
    let mut bg = Vec::with_capacity(r);
    let mut vg = Vec::with_capacity(r);
    for row in rows {
        let (bs, vs) = row?;
        bg.push(bs);
        vg.push(vs);
    }
    Ok((xa, xb, bg, vg))
}

fn cmd_export(cli: &Cli, run_dir: Option<&Path>) -> CliResult<i32> {
    let dir = match (run_dir, &cli.out) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(o)) => o.clone(),
        (None, None) => return Err(Failure::new(EXIT_CONFIG, "export needs a run directory or --out")),
    };
    let empty = match fs::read_dir(&dir) {
        Ok(mut it) => it.next().is_none(),
        Err(_) => true,
    };
    if empty {
        return Err(Failure::new(
            EXIT_NO_INPUT,
            format!("{} is missing or empty", dir.display()),
        ));
    }
    let mut notes = Vec::new();

    let echoed = dir.join("config.toml");
    let cfg_path = if echoed.exists() {
        Some(echoed)
    } else {
        cli.config.clone()
    };
    let cfg = match &cfg_path {
        Some(p) => Some(resolve(&parse_raw(p)?, p)?),
        None => {
            notes.push("no config.toml: level-set slice skipped".to_string());
            None
        }
    };

    let history = dir.join("history.csv");
    let history = if history.exists() {
        Some(read_table(&history)?)
    } else {
        notes.push("history.csv absent".to_string());
        None
    };

    let ck_path = dir.join("checkpoint.json");
    let slice = match (&cfg, ck_path.exists()) {
        (Some(cfg), true) => {
            let (b, v, _) = load_checkpoint(&ck_path, cfg)?;
            let (axis_a, axis_b, barrier, lyapunov) = level_set_slice(&b, &v, cfg)?;
            let fixed = vec![0.0; cfg.system.state_dim() - 2];
            Some(Slice {
                axes: cfg.slice_axes,
                resolution: cfg.slice_resolution,
                fixed,
                axis_a,
                axis_b,
                barrier,
                lyapunov,
            })
        }
        (_, false) => {
            notes.push("checkpoint.json absent: level-set slice skipped".to_string());
            None
        }
        (None, true) => None,
    };

    let mut trajectories = Vec::new();
    let tdir = dir.join("trajectories");
    if let Ok(entries) = fs::read_dir(&tdir) {
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        for f in files {
            trajectories.push(read_table(&f)?);
        }
    } else {
        notes.push("trajectories/ absent".to_string());
    }

    let opt_json = |name: &str, notes: &mut Vec<String>| -> CliResult<Option<Value>> {
        let p = dir.join(name);
        if p.exists() {
            Ok(Some(read_json(&p)?))
        } else {
            notes.push(format!("{name} absent"));
            Ok(None)
        }
    };
    let rollouts = opt_json("summary.json", &mut notes)?;
    let report = opt_json("report.json", &mut notes)?;
    let train_summary = opt_json("train_summary.json", &mut notes)?;

    if history.is_none() && slice.is_none() && trajectories.is_empty() && rollouts.is_none() && report.is_none() {
        return Err(Failure::new(
            EXIT_NO_INPUT,
            format!("{} holds no run artifacts", dir.display()),
        ));
    }
    let bundle = Bundle {
        system: cfg.as_ref().map(|c| c.system.name().to_string()),
        notes,
        history,
        slice,
        trajectories,
        rollouts,
        report,
        train_summary,
    };
    let path = dir.join("bundle.json");
    fs::write(&path, serde_json::to_string(&bundle).map_err(Error::from)? + "\n")?;
    let mut msg = format!("wrote {}", path.display());
    for n in &bundle.notes {
        let _ = write!(msg, "\n  note: {n}");
    }
    println!("{msg}");
    Ok(EXIT_OK)
}
