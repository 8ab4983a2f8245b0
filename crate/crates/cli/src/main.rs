use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ifan_core::detector::Domain;
use ifan_core::synthdata::{benchmark_seeds, generate_split, load_split, DomainShift, SceneParams};
use ifan_core::train::{self, grad_check, Modes, TrainConfig};
use ifan_core::ParamStore;
use serde::{Deserialize, Serialize};

mod ablate;
mod report;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "ifan", version, about = "Domain-adaptive detection on a synthetic two-domain benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic split (or the full benchmark) as PPM + JSONL.
    Synth(SynthArgs),
    /// Train a detector, optionally evaluating it at the end.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an annotated split.
    Eval(EvalArgs),
    /// Finite-difference check of the training objective's gradients.
    Gradcheck(GradcheckArgs),
    /// Run the six-configuration ablation over several seeds.
    Ablate(AblateArgs),
    /// Render loss curves and the ablation table as SVG + CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed; falls back to the config file, then to IFAN_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum DomainArg {
    Source,
    Target,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Number of images.
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, value_enum, default_value_t = DomainArg::Source)]
    domain: DomainArg,
    /// Write source/, target/ and eval/ splits instead of one split.
    #[arg(long)]
    benchmark: bool,
    /// Evaluation images for --benchmark.
    #[arg(long, default_value_t = 200)]
    n_eval: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Annotated source split.
    #[arg(long)]
    source: PathBuf,
    /// Target split (annotations are not read).
    #[arg(long)]
    target: Option<PathBuf>,
    /// Annotated target split to evaluate on after training.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Override the alignment modules, e.g. `img+cat+corr` or `none`.
    #[arg(long)]
    modes: Option<String>,
    /// Override total steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Print a progress line every this many steps (0 = quiet).
    #[arg(long, default_value_t = 500)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Parameters sampled per module.
    #[arg(long, default_value_t = 32)]
    per_module: usize,
}

#[derive(Args, Debug)]
pub(crate) struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
    seeds: Vec<u64>,
    /// Concurrent child runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories holding metrics.csv.
    #[arg(long = "run")]
    runs: Vec<PathBuf>,
    /// Ablation directory holding ablation.json.
    #[arg(long)]
    ablation: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Synthetic-data settings accepted by `synth --config`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SynthConfig {
    seed: u64,
    scene: SceneParams,
    shift: DomainShift,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("IFAN_SEED") {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("IFAN_SEED={v:?} is not a u64"))?)),
        Err(_) => Ok(None),
    }
}

/// Seed precedence: flag, then the config file, then IFAN_SEED, then 0.
fn resolve_seed(flag: Option<u64>, file_text: Option<&str>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    let in_file = file_text
        .and_then(|t| serde_json::from_str::<serde_json::Value>(t).ok())
        .is_some_and(|v| v.get("seed").is_some());
    if in_file {
        return Ok(None);
    }
    env_seed()
}

pub(crate) fn parse_modes(s: &str) -> Result<Modes> {
    let mut m = Modes::SOURCE_ONLY;
    if s == "none" {
        return Ok(m);
    }
    for part in s.split('+') {
        match part {
            "img" => m.img = true,
            "ins" => m.ins = true,
            "cat" => m.cat = true,
            "corr" => m.corr = true,
            other => bail!("unknown mode {other:?} in {s:?} (expected img, ins, cat, corr or none)"),
        }
    }
    Ok(m)
}

pub(crate) fn load_train_config(common: &Common, modes: Option<&str>, steps: Option<usize>) -> Result<TrainConfig> {
    let text = common.config.as_deref().map(read_text).transpose()?;
    let mut cfg = match &text {
        Some(t) => TrainConfig::from_json(t)
            .with_context(|| format!("config {}", common.config.as_ref().unwrap().display()))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = resolve_seed(common.seed, text.as_deref())? {
        cfg.seed = seed;
    }
    if let Some(m) = modes {
        cfg.set_modes(parse_modes(m)?);
    }
    if let Some(n) = steps {
        // keep the late-launch ratios when the schedule is shortened
        let scale = |x: usize| ((x as u128 * n as u128) / cfg.total_steps as u128) as usize;
        cfg.launch_instance = scale(cfg.launch_instance).max(1);
        cfg.launch_corr = scale(cfg.launch_corr).max(cfg.launch_instance);
        cfg.lr_decay_step = scale(cfg.lr_decay_step);
        cfg.total_steps = n;
    }
    cfg.validate().context("resolved config")?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    command: &'a str,
    config: &'a T,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    inputs: Vec<String>,
}

fn write_run(out: &Path, command: &str, config: &impl Serialize, inputs: &[&Path]) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let rec = RunRecord {
        command,
        config,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
    };
    write_json(&out.join("run.json"), &rec)
}

fn synth(a: SynthArgs) -> Result<()> {
    let text = a.common.config.as_deref().map(read_text).transpose()?;
    let mut cfg: SynthConfig = match &text {
        Some(t) => serde_json::from_str(t).map_err(|e| anyhow::anyhow!("line {} column {}: {e}", e.line(), e.column()))?,
        None => SynthConfig::default(),
    };
    if let Some(s) = resolve_seed(a.common.seed, text.as_deref())? {
        cfg.seed = s;
    }
    cfg.scene.validate()?;
    cfg.shift.validate()?;
    let out = &a.common.out;
    write_run(out, "synth", &cfg, &[])?;
    if a.benchmark {
        let [s, t, e] = benchmark_seeds(cfg.seed);
        generate_split(&out.join("source"), s, a.n, Domain::Source, &cfg.scene, &cfg.shift)?;
        generate_split(&out.join("target"), t, a.n, Domain::Target, &cfg.scene, &cfg.shift)?;
        generate_split(&out.join("eval"), e, a.n_eval, Domain::Target, &cfg.scene, &cfg.shift)?;
    } else {
        let domain = match a.domain {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        };
        generate_split(out, cfg.seed, a.n, domain, &cfg.scene, &cfg.shift)?;
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = load_train_config(&a.common, a.modes.as_deref(), a.steps)?;
    let out = &a.common.out;
    let mut inputs = vec![a.source.as_path()];
    inputs.extend(a.target.as_deref());
    inputs.extend(a.eval.as_deref());
    write_run(out, "train", &cfg, &inputs)?;
    let source = load_split(&a.source).with_context(|| format!("loading {}", a.source.display()))?;
    let target = match &a.target {
        Some(t) => load_split(t)
            .with_context(|| format!("loading {}", t.display()))?
            .into_iter()
            .map(|s| s.image)
            .collect(),
        None if cfg.modes().any() => bail!("modes {} need --target", cfg.modes().label()),
        None => Vec::new(),
    };
    let start = std::time::Instant::now();
    let every = a.log_every;
    let trainer = train::train_to_dir(&cfg, &source, &target, out, |r| {
        if every > 0 && (r.step + 1) % every == 0 {
            eprintln!(
                "step {:>6}  L_det {:.4}  total {:.4}  [{}]  {:.1}s",
                r.step + 1,
                r.det,
                r.total,
                r.active_flags,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    if let Some(eval_dir) = &a.eval {
        let samples = load_split(eval_dir).with_context(|| format!("loading {}", eval_dir.display()))?;
        let res = train::evaluate(&trainer.store, &samples, Domain::Target)?;
        eprintln!("target mAP@0.5 {:.4}", res.map);
        write_json(&out.join("eval.json"), &res)?;
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    write_run(&a.out, "eval", &serde_json::json!({}), &[&a.checkpoint, &a.data])?;
    let store = ParamStore::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let samples = load_split(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    let res = train::evaluate(&store, &samples, Domain::Target)?;
    println!("mAP@0.5 {:.4}", res.map);
    write_json(&a.out.join("eval.json"), &res)
}

fn run_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let mut cfg = load_train_config(&a.common, None, None)?;
    if a.common.config.is_none() {
        cfg.set_modes(Modes::FULL);
    }
    write_run(&a.common.out, "gradcheck", &cfg, &[])?;
    let probe = ifan_core::synthdata::render_benchmark(cfg.seed, 1, 0, &SceneParams::default(), &DomainShift::default())?;
    let start = std::time::Instant::now();
    let report = grad_check(
        &cfg,
        &probe.source[0].image,
        &probe.source[0].gt,
        &probe.target[0].image,
        a.per_module,
    )?;
    print!("{}", report.summary());
    println!("runtime {:.1}s", start.elapsed().as_secs_f64());
    write_json(&a.common.out.join("gradcheck.json"), &report)?;
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Train(a) => run_train(a).map(|_| true),
        Command::Eval(a) => run_eval(a).map(|_| true),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Ablate(a) => ablate::run(a).map(|_| true),
        Command::Report(a) => report::run(&a.runs, a.ablation.as_deref(), &a.out).map(|_| true),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
