use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use engage_cli::ablation::{run_ablation, AblationConfig};
use engage_cli::eval::{calibration_against_logs, evaluate, BaseScore, EvalOptions};
use engage_cli::variant::Variant;
use engage_core::dataio::{
    read_json, read_jsonl, read_model, read_transitions, write_json, write_jsonl, write_model, write_trace,
};
use engage_core::distdp::{solve_fixed_point, DiscountMode, DiscountSpec};
use engage_core::qrlearn::{train, LearnerSetup, TrainingConfig};
use engage_core::ranker::{rank_request, RankRequest};
use engage_core::simenv::{generate_logs, myopic_trap, random_mdp, FeatureMap, RandomMdpConfig, SyntheticMDP};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "engage", version, about = "Distributional engagement values from session logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic environment spec.
    MakeMdp(MakeMdpArgs),
    /// Sample logged sessions under the behavior policy.
    Simulate(SimulateArgs),
    /// Solve the tabular distributional fixed point.
    Dp(DpArgs),
    /// Train a value model on logged transitions.
    Train(TrainArgs),
    /// Evaluate a model inside the simulator.
    Eval(EvalArgs),
    /// Rank candidate lists with a trained model.
    Rank(RankArgs),
    /// Train all variants over several seeds and compare simulated engagement.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MdpKind {
    Random,
    Trap,
}

#[derive(Args, Serialize)]
struct MakeMdpArgs {
    #[arg(long, value_enum, default_value = "random")]
    kind: MdpKind,
    #[arg(long, default_value_t = 5)]
    states: usize,
    #[arg(long, default_value_t = 3)]
    actions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long)]
    sessions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct DpArgs {
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    eta: f64,
    #[arg(long, default_value_t = 200)]
    quantiles: usize,
    #[arg(long, default_value = "termination-aware")]
    mode: DiscountMode,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 10_000)]
    max_iter: usize,
    #[arg(long)]
    out: PathBuf,
    /// CSV of per-iteration sup distances.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    logs: PathBuf,
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "proposed")]
    variant: Variant,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    quantiles: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    target_copy: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// State count; inferred from the logs when absent.
    #[arg(long)]
    states: Option<usize>,
    /// Action count; inferred from the logs when absent.
    #[arg(long)]
    actions: Option<usize>,
    /// Use this many hashed state features instead of the state id.
    #[arg(long, requires = "hash_vocab")]
    hash_fields: Option<usize>,
    #[arg(long)]
    hash_vocab: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    mdp: PathBuf,
    /// Logs for termination calibration against empirical rates.
    #[arg(long)]
    logs: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    min_visits: usize,
    #[arg(long, default_value_t = 10_000)]
    sessions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to the eta the model was trained with.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, value_enum, default_value = "zero")]
    base: BaseScore,
    #[arg(long, default_value_t = 1.0)]
    w: f64,
    #[arg(long, default_value_t = 2000)]
    mc_rollouts: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct RankArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSON Lines of `{state, candidates: [{action, base}]}`.
    #[arg(long)]
    requests: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    w: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct AblateArgs {
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    train_sessions: usize,
    #[arg(long, default_value_t = 10_000)]
    eval_sessions: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    quantiles: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    target_copy: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

/// Echoes the command and its flags next to an output file.
fn write_manifest<T: Serialize>(out: &Path, command: &str, args: &T) -> Result<()> {
    let doc = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "args": args,
    });
    let mut w = create(&manifest_path(out))?;
    write_json(&doc, &mut w)?;
    w.flush()?;
    Ok(())
}

fn load_mdp(path: &Path) -> Result<SyntheticMDP> {
    let mdp: SyntheticMDP = read_json(open(path)?)?;
    mdp.validate()?;
    Ok(mdp)
}

fn load_config(path: Option<&PathBuf>) -> Result<TrainingConfig> {
    match path {
        Some(p) => Ok(read_json(open(p)?)?),
        None => Ok(TrainingConfig::default()),
    }
}

fn make_mdp(args: &MakeMdpArgs) -> Result<()> {
    let mdp = match args.kind {
        MdpKind::Random => random_mdp(&RandomMdpConfig::new(args.states, args.actions), args.seed),
        MdpKind::Trap => {
            if args.states < 2 || args.states % 2 == 1 || args.actions < 2 || args.actions % 2 == 1 {
                return Err(engage_core::Error::Validation(
                    "trap needs an even number (>= 2) of states and of actions".into(),
                )
                .into());
            }
            myopic_trap(args.states, args.actions)
        }
    };
    mdp.validate()?;
    let mut w = create(&args.out)?;
    write_json(&mdp, &mut w)?;
    w.flush()?;
    write_manifest(&args.out, "make-mdp", args)
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let mdp = load_mdp(&args.mdp)?;
    let logs = generate_logs(&mdp, args.sessions, args.seed)?;
    let mut w = create(&args.out)?;
    write_jsonl(&logs, &mut w)?;
    w.flush()?;
    write_manifest(&args.out, "simulate", args)
}

fn dp(args: &DpArgs) -> Result<()> {
    let mdp = load_mdp(&args.mdp)?;
    let disc = DiscountSpec::from_mdp(&mdp, args.eta, args.mode);
    let fp = solve_fixed_point(&mdp, &disc, args.quantiles, args.tol, args.max_iter)?;
    let mut w = create(&args.out)?;
    write_json(&fp.table, &mut w)?;
    w.flush()?;
    if let Some(path) = &args.trace {
        let mut w = create(path)?;
        writeln!(w, "iteration,distance")?;
        for (i, d) in fp.trace.iter().enumerate() {
            writeln!(w, "{},{:?}", i + 1, d)?;
        }
        w.flush()?;
    }
    write_manifest(&args.out, "dp", args)?;
    eprintln!("converged after {} iterations", fp.trace.len());
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let logs = read_transitions(open(&args.logs)?)?;
    let mut config = load_config(args.config.as_ref())?;
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.eta {
        config.eta = v;
    }
    if let Some(v) = args.quantiles {
        config.quantiles = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.lr {
        config.learning_rate = v;
    }
    if let Some(v) = args.target_copy {
        config.target_copy = v;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    let seen_states = logs.iter().flat_map(|t| [Some(t.state), t.next_state]).flatten().max();
    let seen_actions = logs.iter().flat_map(|t| [Some(t.action), t.next_action]).flatten().max();
    let n_states = args.states.unwrap_or(seen_states.map_or(1, |s| s + 1));
    let n_actions = args.actions.unwrap_or(seen_actions.map_or(1, |a| a + 1));
    let features = match (args.hash_fields, args.hash_vocab) {
        (Some(fields), Some(vocab)) => FeatureMap::Hashed { fields, vocab, seed: config.seed },
        _ => FeatureMap::Tabular { n_states },
    };
    let setup = LearnerSetup { features, n_actions, objective: args.variant.objective() };
    let out = train(&logs, &config, &setup)?;
    let echo = serde_json::json!({ "variant": args.variant, "training": config, "args": args });
    let mut w = create(&args.out)?;
    write_model(&out.model, &echo, &mut w)?;
    w.flush()?;
    if let Some(path) = &args.trace {
        let mut w = create(path)?;
        write_trace(&out.trace, &mut w)?;
        w.flush()?;
    }
    if let Some(last) = out.trace.last() {
        eprintln!("trained {} steps, final loss {:.6}", last.step, last.total);
    }
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Result<()> {
    let (model, manifest) = read_model(open(&args.model)?)?;
    let mdp = load_mdp(&args.mdp)?;
    let trained_eta = manifest.config.pointer("/training/eta").and_then(|v| v.as_f64());
    let options = EvalOptions {
        sessions: args.sessions,
        seed: args.seed,
        eta: args.eta.or(trained_eta).unwrap_or(TrainingConfig::default().eta),
        base: args.base,
        w: args.w,
        mc_rollouts: args.mc_rollouts,
    };
    let report = evaluate(&model, &mdp, &options)?;
    let logged = match &args.logs {
        Some(path) => calibration_against_logs(&model, &read_transitions(open(path)?)?, args.min_visits)?,
        None => None,
    };
    let doc = serde_json::json!({ "report": report, "ell_calibration_vs_logs": logged });
    let mut w = create(&args.out)?;
    write_json(&doc, &mut w)?;
    w.flush()?;
    write_manifest(&args.out, "eval", args)?;
    eprintln!(
        "vv {:.4} (ctr-greedy {:.4}), mean value error {:.4}",
        report.ranked.vv, report.ctr_greedy.vv, report.mean_value_error.max
    );
    Ok(())
}

fn rank_cmd(args: &RankArgs) -> Result<()> {
    let (model, _) = read_model(open(&args.model)?)?;
    let requests: Vec<RankRequest> = read_jsonl(open(&args.requests)?)?;
    let responses = requests
        .iter()
        .map(|req| rank_request(req, &model, args.w))
        .collect::<engage_core::Result<Vec<_>>>()?;
    let mut w = create(&args.out)?;
    write_jsonl(&responses, &mut w)?;
    w.flush()?;
    write_manifest(&args.out, "rank", args)
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let mdp = load_mdp(&args.mdp)?;
    let mut training = load_config(args.config.as_ref())?;
    if let Some(v) = args.eta {
        training.eta = v;
    }
    if let Some(v) = args.quantiles {
        training.quantiles = v;
    }
    if let Some(v) = args.batch_size {
        training.batch_size = v;
    }
    if let Some(v) = args.lr {
        training.learning_rate = v;
    }
    if let Some(v) = args.target_copy {
        training.target_copy = v;
    }
    let config = AblationConfig {
        train_sessions: args.train_sessions,
        eval_sessions: args.eval_sessions,
        seeds: args.seeds.clone(),
        training,
    };
    let report = run_ablation(&mdp, &config)?;
    let mut w = create(&args.out)?;
    write_json(&report, &mut w)?;
    w.flush()?;
    write_manifest(&args.out, "ablate", args)?;
    for p in &report.policies {
        eprintln!("{:<11} vv {:.4} imp {:.4} ctr {:.4}", p.name, p.mean.vv, p.mean.imp, p.mean.ctr);
    }
    Ok(())
}

/// 2: invalid input, 3: inconsistent or unparsable data, 4: no convergence
/// or divergence, 1: anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use engage_core::Error;
    match err.downcast_ref::<Error>() {
        Some(Error::Validation(_)) => 2,
        Some(Error::Data(_) | Error::Parse { .. }) => 3,
        Some(Error::NonConvergence { .. } | Error::Divergence { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::MakeMdp(a) => make_mdp(a),
        Command::Simulate(a) => simulate(a),
        Command::Dp(a) => dp(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Rank(a) => rank_cmd(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
