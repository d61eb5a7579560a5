//! Command-line front end: data generation, training, prediction, and
//! evaluation for the benchmark systems.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use due::config::{config_echo, parse_config, Config};
use due::datasets::{
    load_mesh_csv, load_trajectories, load_trajectory_csv, make_bursts, segment_fixed,
    segment_osg, train_test_split, write_manifest, write_mesh_csv, write_trajectory_csv,
    Trajectory, TrajectorySet,
};
use due::error::{DueError, Result};
use due::modal::{basis_sine, project_trajectory_set, Basis};
use due::networks::{load_model, save_model, LagInfo, ModelBundle, ModelKind};
use due::rollout::{
    aggregate_metrics, metrics, predict_fixed, predict_fixed_on_mesh, predict_memory,
    predict_varied, rollout_modal, write_prediction_csv, PredictionResult, StepSchedule,
};
use due::simulate::{
    burgers_trajectory, implicit_trajectory, lorenz, pendulum, rk4_trajectory, robertson,
    sample_initial_conditions, sample_lags_loguniform, BurgersGrid, IcKind, LorenzParams,
    PendulumParams, RobertsonParams,
};
use due::tensor::Tensor;
use due::training::{loss_csv_string, train, ArchSpec, TrainConfig, TrainData};

#[derive(Parser)]
#[command(name = "due", version, about = "Learn flow maps of unknown equations from data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic benchmark trajectory data.
    Generate(GenerateArgs),
    /// Train a model from an INI config.
    Train(TrainArgs),
    /// Roll out a trained model from an initial condition.
    Predict(PredictArgs),
    /// Evaluate a trained model on a test manifest.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// pendulum | lorenz | robertson | burgers
    system: String,
    /// Trajectories (or triples for robertson).
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Recorded steps per trajectory (rows = length + 1).
    #[arg(long, default_value_t = 100)]
    length: usize,
    /// Record lag; defaults per system (0.02, 0.01, -, 0.05).
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Burgers interior nodes.
    #[arg(long, default_value_t = 128)]
    nodes: usize,
    /// Robertson lag exponent range (base 10).
    #[arg(long, default_value_t = -4.5)]
    lag_lo_exp: f64,
    #[arg(long, default_value_t = 2.5)]
    lag_hi_exp: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    model: PathBuf,
    /// Inline initial condition, comma-separated.
    #[arg(long)]
    ic: Option<String>,
    /// Trajectory CSV supplying the IC (first row; M+1 rows for memory
    /// models).
    #[arg(long)]
    ic_file: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// fixed:LAG:STEPS | doubling:START:CAP:T_END | explicit:d1,d2,...
    #[arg(long)]
    schedule: Option<String>,
    /// Reference trajectory CSV to attach error columns.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Evaluation mesh CSV (PiT models) or modal basis mesh.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Sine-basis mode count: treat the model as modal and the IC as nodal.
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Cap on rollout steps per trajectory.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_run_manifest(dir: &Path, artifacts: &[PathBuf]) -> Result<()> {
    let mut out = format!(
        "# due {} run manifest, epoch seconds {}\n",
        env!("CARGO_PKG_VERSION"),
        timestamp()
    );
    for a in artifacts {
        out.push_str(&format!("{}\n", a.display()));
    }
    fs::write(dir.join("run_manifest.txt"), out)?;
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let mut files = Vec::new();
    match args.system.as_str() {
        "pendulum" | "lorenz" => {
            let (sys, names, kind, default_dt) = if args.system == "pendulum" {
                (
                    pendulum(PendulumParams::default()),
                    vec!["u1".to_string(), "u2".to_string()],
                    IcKind::Pendulum,
                    0.02,
                )
            } else {
                (
                    lorenz(LorenzParams::default()),
                    vec!["u1".to_string(), "u2".to_string(), "u3".to_string()],
                    IcKind::Lorenz,
                    0.01,
                )
            };
            let dt = args.dt.unwrap_or(default_dt);
            let ics = sample_initial_conditions(kind, args.count, args.seed);
            for (i, ic) in ics.iter().enumerate() {
                let traj = rk4_trajectory(&sys, ic, dt, args.length, 1)?;
                let name = format!("traj_{:04}.csv", i);
                write_trajectory_csv(&args.out.join(&name), &traj, &names)?;
                files.push(PathBuf::from(name));
            }
        }
        "robertson" => {
            let sys = robertson(RobertsonParams::default());
            let names = vec!["u1".to_string(), "u2".to_string(), "u3".to_string()];
            let ics = sample_initial_conditions(IcKind::Robertson, args.count, args.seed);
            let lags = sample_lags_loguniform(
                args.lag_lo_exp,
                args.lag_hi_exp,
                args.count,
                args.seed.wrapping_add(1),
            )?;
            for (i, (ic, lag)) in ics.iter().zip(&lags).enumerate() {
                let traj = implicit_trajectory(&sys, ic, &[*lag], 1e-8)?;
                let mut times = vec![0.0];
                times.extend_from_slice(&traj.times);
                let mut data = ic.clone();
                data.extend_from_slice(traj.states.data());
                let pair = Trajectory::new(times, Tensor::new(vec![2, 3], data)?)?;
                let name = format!("triple_{:05}.csv", i);
                write_trajectory_csv(&args.out.join(&name), &pair, &names)?;
                files.push(PathBuf::from(name));
            }
        }
        "burgers" => {
            let grid = BurgersGrid::new(args.nodes, 0.1);
            let dt = args.dt.unwrap_or(0.05);
            let names: Vec<String> = (1..=args.nodes).map(|i| format!("u{i}")).collect();
            let ics =
                sample_initial_conditions(IcKind::Burgers { nodes: args.nodes }, args.count, args.seed);
            for (i, ic) in ics.iter().enumerate() {
                let traj = burgers_trajectory(&grid, ic, dt, args.length)?;
                let name = format!("traj_{:04}.csv", i);
                write_trajectory_csv(&args.out.join(&name), &traj, &names)?;
                files.push(PathBuf::from(name));
            }
            write_mesh_csv(&args.out.join("mesh.csv"), &grid.mesh())?;
        }
        other => {
            return Err(DueError::Config(format!("unknown system {other:?}")));
        }
    }
    write_manifest(&args.out.join("manifest.txt"), &files)?;
    let mut artifacts: Vec<PathBuf> = files.iter().map(|f| args.out.join(f)).collect();
    artifacts.push(args.out.join("manifest.txt"));
    write_run_manifest(&args.out, &artifacts)?;
    Ok(())
}

fn select_components(ts: &TrajectorySet, names: &[String]) -> Result<TrajectorySet> {
    let mut cols = Vec::with_capacity(names.len());
    for n in names {
        let j = ts
            .component_names
            .iter()
            .position(|c| c == n)
            .ok_or_else(|| DueError::Config(format!("unknown component {n:?}")))?;
        cols.push(j);
    }
    let mut out = Vec::with_capacity(ts.trajectories.len());
    for traj in &ts.trajectories {
        let mut data = Vec::with_capacity(traj.len() * cols.len());
        for k in 0..traj.len() {
            let row = traj.states.row(k);
            for &j in &cols {
                data.push(row[j]);
            }
        }
        out.push(Trajectory::new(
            traj.times.clone(),
            Tensor::new(vec![traj.len(), cols.len()], data)?,
        )?);
    }
    TrajectorySet::new(out, names.to_vec())
}

fn load_basis(cfg: &Config) -> Result<Option<Basis>> {
    match cfg.data.basis_modes {
        None => Ok(None),
        Some(p) => {
            let mesh_path = cfg.data.mesh.as_ref().ok_or_else(|| {
                DueError::Config("basis_modes requires a mesh file in [data]".into())
            })?;
            let mesh = load_mesh_csv(mesh_path)?;
            if mesh.cols() != 1 {
                return Err(DueError::Config("modal basis needs a 1-D mesh".into()));
            }
            let xs: Vec<f64> = (0..mesh.rows()).map(|i| mesh.at(i, 0)).collect();
            Ok(Some(basis_sine(&xs, p)?))
        }
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config)?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let cfg = parse_config(&text, base)?;
    fs::create_dir_all(&args.out)?;

    let mut ts = load_trajectories(&cfg.data.manifest)?;
    if let Some(names) = &cfg.data.components {
        ts = select_components(&ts, names)?;
    }
    if cfg.data.noise > 0.0 {
        ts = due::datasets::add_multiplicative_noise(&ts, cfg.data.noise, cfg.data.split_seed)?;
    }
    if let Some(basis) = load_basis(&cfg)? {
        ts = project_trajectory_set(&basis, &ts)?;
    }
    if cfg.data.test_fraction > 0.0 {
        let (tr, _) = train_test_split(&ts, cfg.data.test_fraction, cfg.data.split_seed)?;
        ts = tr;
    }

    let data = if cfg.network.kind.varied_lag() {
        TrainData::Osg(segment_osg(&ts)?)
    } else if cfg.data.memory > 0 || cfg.data.multistep > 0 {
        TrainData::Bursts(make_bursts(
            &ts,
            cfg.data.memory,
            cfg.data.multistep,
            cfg.data.bursts_per_traj,
            cfg.data.split_seed,
        )?)
    } else {
        TrainData::Pairs(segment_fixed(&ts, cfg.data.lag_tol)?)
    };

    let mut arch = ArchSpec::new(
        cfg.network.kind,
        cfg.network.depth,
        cfg.network.width,
        cfg.network.activation,
    );
    arch.gate_depth = cfg.network.gate_depth;
    arch.gate_width = cfg.network.gate_width;
    if cfg.network.kind == ModelKind::PitResNet {
        let mesh_path = cfg
            .data
            .mesh
            .as_ref()
            .ok_or_else(|| DueError::Config("PiT training requires a mesh file".into()))?;
        arch.mesh = Some(load_mesh_csv(mesh_path)?);
        arch.latent_nodes = cfg.network.latent_nodes;
    }
    let tcfg = TrainConfig {
        epochs: cfg.training.epochs,
        batch_size: cfg.training.batch,
        lr: cfg.training.lr,
        lr_min: cfg.training.lr_min,
        memory: cfg.data.memory,
        multistep: cfg.data.multistep,
        gdsg_lambda: cfg.training.lambda,
        gdsg_pairs: cfg.training.q,
        seed: cfg.training.seed,
        kind: cfg.network.kind,
    };
    let (bundle, record) = train(&arch, &data, &tcfg)?;

    let model_path = args.out.join("model.due");
    let tmp_path = args.out.join("model.due.tmp");
    fs::write(&tmp_path, save_model(&bundle)?)?;
    fs::rename(&tmp_path, &model_path)?;
    let loss_path = args.out.join("loss.csv");
    fs::write(&loss_path, loss_csv_string(&record, true))?;
    let echo_path = args.out.join("config_echo.ini");
    fs::write(&echo_path, config_echo(&cfg))?;
    write_run_manifest(&args.out, &[model_path, loss_path, echo_path])?;
    Ok(())
}

fn parse_schedule(s: &str) -> Result<StepSchedule> {
    let parts: Vec<&str> = s.split(':').collect();
    let parse_f = |t: &str| -> Result<f64> {
        t.parse()
            .map_err(|_| DueError::Config(format!("bad schedule number {t:?}")))
    };
    match parts.as_slice() {
        ["fixed", lag, steps] => Ok(StepSchedule::Fixed {
            lag: parse_f(lag)?,
            steps: steps
                .parse()
                .map_err(|_| DueError::Config(format!("bad step count {steps:?}")))?,
        }),
        ["doubling", start, cap, t_end] => Ok(StepSchedule::Doubling {
            start: parse_f(start)?,
            cap: parse_f(cap)?,
            t_end: parse_f(t_end)?,
        }),
        ["explicit", lags] => Ok(StepSchedule::Explicit(
            lags.split(',').map(parse_f).collect::<Result<_>>()?,
        )),
        _ => Err(DueError::Config(format!("bad schedule spec {s:?}"))),
    }
}

fn load_ic(args: &PredictArgs, bundle: &ModelBundle) -> Result<(Tensor, Vec<String>)> {
    if let Some(ic) = &args.ic {
        let vals: Vec<f64> = ic
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| DueError::Config(format!("bad IC value {t:?}")))
            })
            .collect::<Result<_>>()?;
        let names = (1..=vals.len()).map(|i| format!("u{i}")).collect();
        let n = vals.len();
        return Ok((Tensor::new(vec![1, n], vals)?, names));
    }
    let path = args
        .ic_file
        .as_ref()
        .ok_or_else(|| DueError::Config("predict needs --ic or --ic-file".into()))?;
    let (traj, names) = load_trajectory_csv(path)?;
    let rows_needed = bundle.memory + 1;
    if traj.len() < rows_needed {
        return Err(DueError::InsufficientData(format!(
            "IC file has {} rows, memory M={} needs {}",
            traj.len(),
            bundle.memory,
            rows_needed
        )));
    }
    let mut data = Vec::with_capacity(rows_needed * traj.width());
    for k in 0..rows_needed {
        data.extend_from_slice(traj.states.row(k));
    }
    Ok((Tensor::new(vec![rows_needed, traj.width()], data)?, names))
}

fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let bundle = load_model(&fs::read_to_string(&args.model)?)?;
    let (seed_states, mut names) = load_ic(args, &bundle)?;

    let result: PredictionResult = if let Some(p) = args.modes {
        let mesh_path = args
            .mesh
            .as_ref()
            .ok_or_else(|| DueError::Config("modal prediction needs --mesh".into()))?;
        let mesh = load_mesh_csv(mesh_path)?;
        let xs: Vec<f64> = (0..mesh.rows()).map(|i| mesh.at(i, 0)).collect();
        let basis = basis_sine(&xs, p)?;
        let steps = args
            .steps
            .ok_or_else(|| DueError::Config("modal prediction needs --steps".into()))?;
        rollout_modal(&bundle, &basis, seed_states.row(0), steps)?
    } else if bundle.kind.varied_lag() {
        let spec = args
            .schedule
            .as_ref()
            .ok_or_else(|| DueError::Config("varied-lag model needs --schedule".into()))?;
        predict_varied(&bundle, seed_states.row(0), &parse_schedule(spec)?)?
    } else if bundle.memory > 0 {
        let steps = args
            .steps
            .ok_or_else(|| DueError::Config("memory prediction needs --steps".into()))?;
        predict_memory(&bundle, &seed_states, steps)?
    } else {
        let steps = args
            .steps
            .ok_or_else(|| DueError::Config("fixed-lag prediction needs --steps".into()))?;
        let eval_mesh = match &args.mesh {
            Some(m) if bundle.kind == ModelKind::PitResNet => Some(load_mesh_csv(m)?),
            _ => None,
        };
        predict_fixed_on_mesh(&bundle, seed_states.row(0), steps, eval_mesh.as_ref())?
    };

    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    if names.len() != result.states.cols() {
        names = (1..=result.states.cols()).map(|i| format!("u{i}")).collect();
    }
    let result = match &args.reference {
        Some(path) => {
            let (r, _) = load_trajectory_csv(path)?;
            if r.states.shape() == result.states.shape() {
                result.with_reference(r.states)?
            } else {
                return Err(DueError::Dimension(format!(
                    "reference shape {:?} does not match prediction {:?}",
                    r.states.shape(),
                    result.states.shape()
                )));
            }
        }
        None => result,
    };
    write_prediction_csv(&args.out, &result, &names)?;
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let bundle = load_model(&fs::read_to_string(&args.model)?)?;
    let ts = load_trajectories(&args.test)?;
    let mut per_traj = Vec::new();
    let mut times: Vec<f64> = Vec::new();
    for traj in &ts.trajectories {
        let (pred, reference) = evaluate_one(&bundle, traj, args.steps)?;
        let m = metrics(&pred.states, &reference)?;
        if pred.times.len() > times.len() {
            times = pred.times.clone();
        }
        per_traj.push(m);
    }
    let steps = per_traj.iter().map(|m| m.l2.len()).min().unwrap_or(0);
    let truncated: Vec<_> = per_traj
        .iter()
        .map(|m| due::rollout::Metrics {
            l2: m.l2[..steps].to_vec(),
            rel_l2: m.rel_l2[..steps].to_vec(),
            linf: m.linf[..steps].to_vec(),
        })
        .collect();
    let agg = aggregate_metrics(&truncated)?;
    let mut out = String::from("step,t,l2,rel_l2,linf\n");
    for k in 0..steps {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            k, times[k], agg.l2[k], agg.rel_l2[k], agg.linf[k]
        ));
    }
    fs::write(&args.out, out)?;
    Ok(())
}

/// Roll the model along one test trajectory and pair the outputs with the
/// aligned reference rows.
fn evaluate_one(
    bundle: &ModelBundle,
    traj: &Trajectory,
    step_cap: Option<usize>,
) -> Result<(PredictionResult, Tensor)> {
    let width = traj.width();
    match bundle.lag {
        LagInfo::Fixed(model_lag) => {
            let data_lag = traj.times[1] - traj.times[0];
            if (data_lag - model_lag).abs() > 1e-6 * model_lag.abs().max(1e-300) {
                return Err(DueError::Domain(format!(
                    "test data lag {} incompatible with model lag {}",
                    data_lag, model_lag
                )));
            }
            if bundle.memory > 0 {
                let m = bundle.memory;
                if traj.len() < m + 2 {
                    return Err(DueError::InsufficientData(format!(
                        "trajectory of {} rows too short for memory M={}",
                        traj.len(),
                        m
                    )));
                }
                let mut steps = traj.len() - 1 - m;
                if let Some(cap) = step_cap {
                    steps = steps.min(cap);
                }
                let mut seeds = Vec::with_capacity((m + 1) * width);
                for k in 0..=m {
                    seeds.extend_from_slice(traj.states.row(k));
                }
                let pred =
                    predict_memory(bundle, &Tensor::new(vec![m + 1, width], seeds)?, steps)?;
                let rows = pred.states.rows();
                let mut reference = Tensor::zeros(vec![rows, width]);
                for k in 0..rows {
                    for j in 0..width {
                        reference.set(k, j, traj.states.at(k, j));
                    }
                }
                Ok((pred, reference))
            } else {
                let mut steps = traj.len() - 1;
                if let Some(cap) = step_cap {
                    steps = steps.min(cap);
                }
                let pred = predict_fixed(bundle, traj.states.row(0), steps)?;
                let mut reference = Tensor::zeros(vec![steps + 1, width]);
                for k in 0..=steps {
                    for j in 0..width {
                        reference.set(k, j, traj.states.at(k, j));
                    }
                }
                Ok((pred, reference))
            }
        }
        LagInfo::Range(_, _) => {
            let mut lags: Vec<f64> = traj.times.windows(2).map(|w| w[1] - w[0]).collect();
            if let Some(cap) = step_cap {
                lags.truncate(cap);
            }
            let n_steps = lags.len();
            let pred = predict_varied(bundle, traj.states.row(0), &StepSchedule::Explicit(lags))?;
            for w in &pred.warnings {
                eprintln!("warning: {w}");
            }
            let mut reference = Tensor::zeros(vec![n_steps + 1, width]);
            for k in 0..=n_steps {
                for j in 0..width {
                    reference.set(k, j, traj.states.at(k, j));
                }
            }
            Ok((pred, reference))
        }
    }
}
