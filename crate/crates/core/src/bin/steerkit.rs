use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use steerkit::blockworld::{build_dataset, reset, Dataset, COLOR_NAMES, N_COLORS};
use steerkit::diffusion::{train_denoiser, GoalMode};
use steerkit::dynamics::train_dynamics;
use steerkit::guidance::guided_sample;
use steerkit::harness::{
    build_guidance, emit_report, episode_seed, run_experiment, spearman, BehaviorTable, ConfigFile, ExperimentId, LoadedModels, N_BEHAVIORS,
};
use steerkit::numerics::Rng;
use steerkit::{Error, Result};

#[derive(Parser)]
#[command(name = "steerkit", version, about = "Dynamics-guided steering of diffusion policies in a 2D block-touch world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Config file ("format": "steerkit-exp-v1"); relative paths inside it
    /// resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; STEERKIT_OUT takes precedence.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a demonstration dataset.
    GenData(Common),
    /// Train the diffusion policy (goal-conditioned if the config asks for it).
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; overrides the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the dynamics model.
    TrainDynamics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the configured experiment and write a report.
    Eval(Common),
    /// Run guided episodes towards one color and print the metric trace.
    Steer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        target_color: usize,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
    },
    /// Sweep guidance strength and temperature.
    Grid(Common),
}

fn out_dir(common: &Common, default: &str) -> PathBuf {
    std::env::var_os("STEERKIT_OUT")
        .map(PathBuf::from)
        .or_else(|| common.out.clone())
        .unwrap_or_else(|| PathBuf::from(default))
}

fn load_config(common: &Common) -> Result<(ConfigFile, Value)> {
    match &common.config {
        Some(p) => ConfigFile::load(p),
        None => {
            let cfg = ConfigFile::default();
            let raw = serde_json::to_value(&cfg).map_err(|e| Error::json("default config", e))?;
            Ok((cfg, raw))
        }
    }
}

fn data_dir(flag: Option<PathBuf>, from_config: &Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| from_config.clone())
        .ok_or_else(|| Error::Config("no training data given; pass --data or set it in the config".into()))
}

fn write_curve(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(header).map_err(|e| Error::io(path, e.into()))?;
    for (i, r) in rows.enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(r.iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn print_table(table: &BehaviorTable) {
    print!("{:<32}", "method");
    for b in 0..N_BEHAVIORS {
        print!("{:>16}", COLOR_NAMES.get(b).copied().unwrap_or("none"));
    }
    println!();
    for row in &table.rows {
        print!("{:<32}", row.method);
        for b in 0..N_BEHAVIORS {
            print!("{:>16}", format!("{:.3}±{:.3}", row.mean[b], row.stderr[b]));
        }
        println!();
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(common) => {
            let (cfg, _) = load_config(&common)?;
            let out = out_dir(&common, "data");
            let ds = build_dataset(
                common.seed.unwrap_or(0),
                cfg.data.n_per_color,
                cfg.data.layout_spec,
                cfg.data.retention_array()?,
                &cfg.world,
            )?;
            ds.write(&out)?;
            println!("wrote {} trajectories {:?} to {}", ds.trajectories.len(), ds.manifest.counts, out.display());
        }
        Command::TrainPolicy { common, data } => {
            let (cfg, _) = load_config(&common)?;
            let ds = Dataset::read(&data_dir(data, &cfg.policy_train.data)?)?;
            let out = out_dir(&common, "policy");
            let mut rng = Rng::new(common.seed.unwrap_or(0));
            let (params, curve) = train_denoiser(&ds, &cfg.schedule()?, &mut rng, &cfg.policy_train.train, cfg.experiment.sample.chunk_len, cfg.policy_train.goal_mode)?;
            let role = match cfg.policy_train.goal_mode {
                GoalMode::None => "policy",
                GoalMode::TerminalGoal { .. } => "goal_policy",
            };
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            params.to_checkpoint(role).save(&out.join(format!("{role}.json")))?;
            write_curve(&out.join("loss.csv"), &["epoch", "loss"], curve.iter().map(|&l| vec![l]))?;
            println!("{role}: loss {:.4} -> {:.4}; wrote {}", curve[0], params.final_loss, out.display());
        }
        Command::TrainDynamics { common, data } => {
            let (cfg, _) = load_config(&common)?;
            let ds = Dataset::read(&data_dir(data, &cfg.dynamics_train.data)?)?;
            let out = out_dir(&common, "dynamics");
            let mut rng = Rng::new(common.seed.unwrap_or(0));
            let (params, curve) = train_dynamics(&ds, &cfg.schedule()?, &mut rng, &cfg.dynamics_train.train, cfg.experiment.sample.chunk_len)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            params.to_checkpoint().save(&out.join("dynamics.json"))?;
            write_curve(&out.join("loss.csv"), &["epoch", "latent", "classifier"], curve.iter().map(|l| vec![l.latent, l.classifier]))?;
            let last = curve.last().copied().unwrap_or_default();
            println!("dynamics: latent {:.4}, classifier {:.4}; wrote {}", last.latent, last.classifier, out.display());
        }
        Command::Eval(common) => return eval(common, None),
        Command::Grid(common) => return eval(common, Some(ExperimentId::GridSearch)),
        Command::Steer { common, target_color, episodes } => {
            if target_color >= N_COLORS {
                return Err(Error::InvalidArgument(format!("target color {target_color} out of range 0..{N_COLORS}")));
            }
            let (cfg, _) = load_config(&common)?;
            let spec = &cfg.experiment;
            let sched = cfg.schedule()?;
            let loaded = LoadedModels::load(&spec.models)?;
            let policy = loaded.policy.as_ref().ok_or_else(|| Error::Config("steer needs models.policy".into()))?;
            let dataset = spec.guidance.data.as_deref().map(Dataset::read).transpose()?;
            let mut src = spec.guidance.clone();
            src.positive_colors = vec![target_color];
            src.negative_colors.clear();
            let gset = build_guidance(&src, dataset.as_ref())?;
            let gcfg = spec.guidance_config;
            let seed = common.seed.unwrap_or(0);
            let mut rising = 0;
            let mut hits = 0;
            for e in 0..episodes {
                let es = episode_seed(seed, e);
                let mut rng = Rng::new(es);
                let mut state = reset(&mut rng, spec.layout_spec, &cfg.world)?;
                let mut first_rho = None;
                let mut behavior = None;
                let mut chunk_i = 0;
                'episode: while state.t < spec.horizon {
                    let out = guided_sample(policy, loaded.dynamics.as_ref(), &state.observe(), &gset, &gcfg, &mut rng, &sched)?;
                    let ds: Vec<f64> = out.trace.iter().map(|p| p.d).collect();
                    let trace: Vec<String> = out.trace.iter().map(|p| format!("k={}:{:.4}", p.k, p.d)).collect();
                    println!("episode {e} chunk {chunk_i} d: {}", trace.join(" "));
                    if first_rho.is_none() {
                        first_rho = Some(spearman(&ds));
                    }
                    chunk_i += 1;
                    for d in out.chunk.deltas.iter().take(spec.sample.execute_len) {
                        let (next, touched) = state.step(*d, &cfg.world);
                        state = next;
                        if touched.is_some() || state.t >= spec.horizon {
                            behavior = touched;
                            break 'episode;
                        }
                    }
                }
                let rho = first_rho.unwrap_or(f64::NAN);
                if rho > 0.0 {
                    rising += 1;
                }
                if behavior == Some(target_color) {
                    hits += 1;
                }
                println!(
                    "episode {e}: behavior {} after {} steps, trace spearman {rho:.3}",
                    behavior.map_or("none", |c| COLOR_NAMES[c]),
                    state.t
                );
            }
            println!(
                "summary: target {} in {hits}/{episodes} episodes; rising d trace in {rising}/{episodes}",
                COLOR_NAMES[target_color]
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(common: Common, force: Option<ExperimentId>) -> Result<ExitCode> {
    let (cfg, mut raw) = load_config(&common)?;
    let mut spec = cfg.experiment.clone();
    if let Some(id) = force {
        spec.experiment = id;
        raw["experiment"] = serde_json::to_value(id).map_err(|e| Error::json("experiment id", e))?;
    }
    if let Some(seed) = common.seed {
        spec.seeds = (0..spec.seeds.len() as u64).map(|i| seed + i).collect();
        raw["seeds"] = serde_json::to_value(&spec.seeds).map_err(|e| Error::json("seeds", e))?;
    }
    let out = out_dir(&common, "results");
    let outcome = run_experiment(&spec, &cfg.world, &cfg.schedule()?)?;
    let mut notes = outcome.notes.clone();
    notes.extend(outcome.failures.iter().map(|f| format!("failed: {f}")));
    emit_report(&outcome.table, &raw, &notes, &out)?;
    print_table(&outcome.table);
    for n in &notes {
        println!("{n}");
    }
    println!("wrote report to {}", out.display());
    Ok(if outcome.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
