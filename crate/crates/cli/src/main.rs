//! `gazecot`: preprocess eye-tracking sessions, train the two stages,
//! evaluate checkpoints and render per-step gaze overlays.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use gazecot::checkpoint::Checkpoint;
use gazecot::dataset::{load_samples, preprocess_dir};
use gazecot::eval::{evaluate, EvalMode};
use gazecot::model::ModelState;
use gazecot::session::{load_session, Split, MANIFEST_FILE};
use gazecot::supervision::{write_supervision_file, PatchGrid, SupervisionParams};
use gazecot::synth::{generate_corpus, Scenario, ScenarioKind};
use gazecot::train::{load_config_file, parse_config, train_stage1, train_stage2, Variant};
use gazecot::NUM_GAZE_TOKENS;

/// Environment variable naming the default output root.
const OUT_ROOT_ENV: &str = "GAZECOT_OUT";

#[derive(Parser)]
#[command(
    name = "gazecot",
    version,
    about = "Gaze-token supervision for a miniature vision-language model"
)]
struct Cli {
    /// Root for outputs whose location is not given explicitly.
    #[arg(long, global = true, env = OUT_ROOT_ENV, default_value = "runs")]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build per-token patch supervision for every session directory.
    Preprocess(PreprocessArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Render Step 1-4 gaze overlays for one session.
    Visualize(VisualizeArgs),
    /// Write a synthetic corpus with a manifest.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct GridArgs {
    /// Patch grid side G.
    #[arg(long = "grid-g", default_value_t = 16)]
    grid_g: usize,
    /// Patches kept per gaze token.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Gaussian sigma in normalized units [default: 1/G].
    #[arg(long)]
    sigma: Option<f64>,
    /// Weight fixations equally instead of by duration.
    #[arg(long)]
    unweighted: bool,
    /// Also pool fixations that fall outside every spoken word.
    #[arg(long)]
    include_unattributed: bool,
}

impl GridArgs {
    fn params(&self) -> Result<SupervisionParams> {
        let grid = PatchGrid::new(self.grid_g)?;
        let params = SupervisionParams {
            grid,
            sigma_norm: self.sigma.unwrap_or(1.0 / self.grid_g as f64),
            k: self.k,
            duration_weighted: !self.unweighted,
            include_unattributed: self.include_unattributed,
        };
        params.validate()?;
        Ok(params)
    }
}

#[derive(Args)]
struct PreprocessArgs {
    /// Directory containing session_<id>/ subdirectories.
    #[arg(long)]
    sessions: PathBuf,
    /// Supervision file to write (one JSON record per line).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Stage to run (1 = gaze tokens, 2 = classifier + language modeling).
    #[arg(long)]
    stage: u8,
    /// Flat key = value file with training and model settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Supervision variant: original, random or shuffled.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Corpus root; its train split is used when a manifest is present.
    #[arg(long)]
    data: PathBuf,
    /// Supervision file written by `preprocess`.
    #[arg(long)]
    supervision: Option<PathBuf>,
    /// Stage-1 checkpoint to start stage 2 from.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Output directory [default: <out-root>/stage<N>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus root.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "classifier_head")]
    mode: EvalMode,
    /// Split to score when the corpus has a manifest.
    #[arg(long, default_value = "test")]
    split: Split,
    /// Supervision file, used for gaze top-1 accuracy.
    #[arg(long)]
    supervision: Option<PathBuf>,
    /// Refuse to score unless the checkpoint was trained with this variant.
    #[arg(long)]
    variant: Option<Variant>,
    /// Report file (JSON line) [default: <out-root>/eval_<mode>.jsonl].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 1 when macro AUROC falls below this value.
    #[arg(long)]
    min_auroc: Option<f64>,
}

#[derive(Args)]
struct VisualizeArgs {
    /// A session_<id>/ directory.
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args)]
struct GenerateArgs {
    /// separable, order_sensitive or dropout_heavy.
    #[arg(long)]
    scenario: ScenarioKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "grid-g", default_value_t = 8)]
    grid_g: usize,
    #[arg(long, default_value_t = 32)]
    image_side: usize,
}

fn preprocess(args: &PreprocessArgs) -> Result<bool> {
    let params = args.grid.params()?;
    let outcome = preprocess_dir(&args.sessions, &params)?;
    for r in &outcome.records {
        let k: Vec<usize> = r.gaze_tokens.iter().map(Vec::len).collect();
        println!("{} K={k:?}", r.sample_id);
    }
    let mut counts = vec![[0usize; NUM_GAZE_TOKENS]; params.k + 1];
    for r in &outcome.records {
        for (i, list) in r.gaze_tokens.iter().enumerate() {
            counts[list.len().min(params.k)][i] += 1;
        }
    }
    println!("K histogram (rows: K, columns: tokens 1-4)");
    for (k, row) in counts.iter().enumerate() {
        println!("  K={k:<2} {:>6} {:>6} {:>6} {:>6}", row[0], row[1], row[2], row[3]);
    }
    for (dir, e) in &outcome.failures {
        eprintln!("error: {}: {e}", dir.display());
    }
    write_supervision_file(&args.out, &outcome.records)?;
    println!(
        "wrote {} records to {} ({} sessions failed)",
        outcome.records.len(),
        args.out.display(),
        outcome.failures.len()
    );
    Ok(outcome.failures.is_empty())
}

fn train_split(data: &Path) -> Option<Split> {
    data.join(MANIFEST_FILE).exists().then_some(Split::Train)
}

fn train(args: &TrainArgs, out_root: &Path) -> Result<()> {
    let (mut cfg, model) = match &args.config {
        Some(path) => load_config_file(path)?,
        None => parse_config("")?,
    };
    cfg.stage = args.stage;
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| out_root.join(format!("stage{}", cfg.stage)));

    let output = match cfg.stage {
        1 => {
            let data = load_samples(
                &args.data,
                train_split(&args.data),
                args.supervision.as_deref(),
                model.grid_side,
            )?;
            info!("stage 1 on {} samples", data.len());
            let state = ModelState::init(&model, cfg.seed)?;
            train_stage1(&data, &cfg, state, Some(&out))?
        }
        _ => {
            let init = match &args.init_from {
                Some(p) => Some(Checkpoint::load(p)?),
                None => None,
            };
            let grid = init.as_ref().map_or(model.grid_side, |c| c.state.config.grid_side);
            let data = load_samples(&args.data, train_split(&args.data), args.supervision.as_deref(), grid)?;
            info!("stage 2 on {} samples", data.len());
            train_stage2(&data, &cfg, init.as_ref(), Some(&out))?
        }
    };
    let last = output.metrics.last();
    println!(
        "stage {} done: {} steps, final loss {}, checkpoint {}",
        cfg.stage,
        cfg.steps,
        last.map_or("n/a".to_string(), |m| format!("{:.5}", m.l_combined)),
        out.join(format!("stage{}.gzck", cfg.stage)).display()
    );
    Ok(())
}

fn eval(args: &EvalArgs, out_root: &Path) -> Result<bool> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let split = args.data.join(MANIFEST_FILE).exists().then_some(args.split);
    let data = load_samples(
        &args.data,
        split,
        args.supervision.as_deref(),
        ckpt.state.config.grid_side,
    )?;
    let report = evaluate(&ckpt, &data, args.mode, args.variant)?;
    print!("{}", report.to_table());
    let out = args.out.clone().unwrap_or_else(|| {
        let mode = if args.mode == EvalMode::ClassifierHead {
            "classifier_head"
        } else {
            "parsed_text"
        };
        out_root.join(format!("eval_{mode}.jsonl"))
    });
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(&out, format!("{}\n", report.to_json_line()?))
        .with_context(|| format!("writing {}", out.display()))?;
    if let Some(min) = args.min_auroc {
        match report.macro_auroc {
            Some(a) if a >= min => {}
            other => {
                eprintln!("macro AUROC {other:?} below threshold {min}");
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn visualize(args: &VisualizeArgs) -> Result<()> {
    let params = args.grid.params()?;
    let session = load_session(&args.session)?;
    for p in gazecot::viz::visualize_session(&session, &params, &args.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn generate(args: &GenerateArgs) -> Result<()> {
    if args.n == 0 {
        bail!("--n must be at least 1");
    }
    let sc = Scenario {
        grid_side: args.grid_g,
        image_side: args.image_side,
        ..Scenario::new(args.scenario, args.n, args.seed)
    };
    let entries = generate_corpus(&sc, &args.out)?;
    println!("wrote {} sessions to {}", entries.len(), args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a, &cli.out_root).map(|_| true),
        Command::Eval(a) => eval(a, &cli.out_root),
        Command::Visualize(a) => visualize(a).map(|_| true),
        Command::Generate(a) => generate(a).map(|_| true),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<gazecot::Error>() {
        Some(e) if !e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
