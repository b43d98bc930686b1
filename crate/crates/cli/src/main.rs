//! `hipa`: train, evaluate, super-resolve and ablate.
//!
//! Exit codes: 0 success, 2 config error, 3 data or checkpoint error,
//! 4 non-finite training loss, 5 checkpoint/config mismatch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hipa_core::ablation::{run_ablation, Suite};
use hipa_core::checkpoint::Checkpoint;
use hipa_core::data::{load_png, save_png, Dataset, Manifest};
use hipa_core::io::write_atomic;
use hipa_core::metrics::{evaluate_bicubic, evaluate_model, EvalReport};
use hipa_core::trainer::{Trainer, FINAL_CHECKPOINT};
use hipa_core::{Hipa, HipaConfig, HipaError};

#[derive(Parser)]
#[command(name = "hipa", version, about = "Train, evaluate and run a three-stage patch-based super-resolution model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config and an image manifest.
    Train(TrainArgs),
    /// Score a checkpoint (or bicubic upscaling) on a manifest.
    Eval(EvalArgs),
    /// Super-resolve one PNG.
    Sr(SrArgs),
    /// Train and score every variant of an ablation suite.
    Ablate(AblateArgs),
    /// Write seeded synthetic training images and a manifest.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file, or a preset name (`desk`, `paper`).
    #[arg(long)]
    config: String,
    /// Manifest listing HR PNGs.
    #[arg(long)]
    data: PathBuf,
    /// Total optimization steps.
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint up to `--steps`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Bicubic,
}

#[derive(Args)]
struct EvalArgs {
    /// Required unless `--baseline` is given.
    #[arg(long, required_unless_present = "baseline")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scale: usize,
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Fails with exit 5 unless the checkpoint was trained with this config.
    #[arg(long)]
    config: Option<String>,
}

#[derive(Args)]
struct SrArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write `<out>_stage1.png` and `<out>_stage2.png`.
    #[arg(long)]
    emit_stages: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    suite: String,
    #[arg(long)]
    config: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Failure {
    code: u8,
    err: HipaError,
    context: String,
}

type CliResult<T> = Result<T, Failure>;

/// Maps an error to its exit code, with `default` for plain I/O and data
/// problems.
fn fail(default: u8, context: impl Into<String>) -> impl FnOnce(HipaError) -> Failure {
    let context = context.into();
    move |err| {
        let code = match err {
            HipaError::NonFiniteLoss { .. } => 4,
            HipaError::ConfigMismatch(_) => 5,
            HipaError::ConfigParse { .. } | HipaError::InvalidConfig(_) | HipaError::UnsupportedScale(_) => 2,
            _ => default,
        };
        Failure { code, err, context }
    }
}

fn load_config(spec: &str, seed: Option<u64>) -> CliResult<HipaConfig> {
    let mut cfg = match HipaConfig::preset(spec) {
        Some(c) if !Path::new(spec).exists() => c,
        _ => HipaConfig::load(Path::new(spec)).map_err(fail(2, format!("config {spec}")))?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(fail(2, format!("config {spec}")))?;
    Ok(cfg)
}

fn load_data(manifest: &Path, scale: usize) -> CliResult<Dataset> {
    let ctx = format!("data {}", manifest.display());
    let m = Manifest::load(manifest).map_err(fail(3, ctx.clone()))?;
    Dataset::from_manifest(&m, scale).map_err(fail(3, ctx))
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(fail(3, format!("checkpoint {}", path.display())))
}

fn write_out(path: &Path, bytes: &[u8]) -> CliResult<()> {
    write_atomic(path, bytes).map_err(fail(3, format!("output {}", path.display())))
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let cfg = load_config(&a.config, a.seed)?;
    let data = load_data(&a.data, cfg.scale)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            ck.ensure_config(&cfg).map_err(fail(5, format!("resume {}", path.display())))?;
            Trainer::resume(ck).map_err(fail(3, format!("resume {}", path.display())))?
        }
        None => Trainer::new(&cfg).map_err(fail(2, format!("config {}", a.config)))?,
    };
    eprintln!(
        "training {} parameters on {} images, steps {}..{}, seed {}",
        trainer.model.num_params(),
        data.len(),
        trainer.step,
        a.steps,
        cfg.seed
    );
    let every = (a.steps / 20).max(1);
    trainer
        .run(&data, a.steps, Some(&a.out), |r| {
            if r.step % every == 0 || r.step == a.steps {
                eprintln!("step {:>6}  loss {:.5}  {:>8.1}s", r.step, r.loss, r.seconds);
            }
        })
        .map_err(fail(3, "training"))?;
    eprintln!("wrote {}", a.out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn report_summary(rep: &EvalReport, label: &str) {
    println!(
        "{label}: {} images, mean PSNR {:.4} dB, mean SSIM {:.6} (Y channel, border {})",
        rep.rows.len(),
        rep.mean_psnr,
        rep.mean_ssim,
        rep.border
    );
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let (report, label) = match (a.baseline, &a.ckpt) {
        (Some(Baseline::Bicubic), _) => {
            let data = load_data(&a.data, a.scale)?;
            (evaluate_bicubic(&data).map_err(fail(3, "evaluation"))?, "bicubic".to_string())
        }
        (None, Some(path)) => {
            let ck = load_checkpoint(path)?;
            if let Some(spec) = &a.config {
                let cfg = load_config(spec, None)?;
                ck.ensure_config(&cfg).map_err(fail(5, format!("checkpoint {}", path.display())))?;
            }
            if ck.config.scale != a.scale {
                return Err(fail(5, format!("checkpoint {}", path.display()))(HipaError::ConfigMismatch(format!(
                    "checkpoint is ×{}, --scale is {}",
                    ck.config.scale, a.scale
                ))));
            }
            let data = load_data(&a.data, a.scale)?;
            let model = Hipa::new(&ck.config).map_err(fail(3, "checkpoint config"))?;
            let rep = evaluate_model(&model, &ck.params, &data).map_err(fail(3, "evaluation"))?;
            (rep, format!("checkpoint step {}", ck.step))
        }
        (None, None) => unreachable!("clap requires --ckpt without --baseline"),
    };
    write_out(&a.out, report.to_csv().as_bytes())?;
    report_summary(&report, &label);
    Ok(())
}

fn stage_path(out: &Path, stage: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_stage{stage}.png"))
}

fn cmd_sr(a: SrArgs) -> CliResult<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let lr = load_png(&a.input).map_err(fail(3, format!("input {}", a.input.display())))?;
    let model = Hipa::new(&ck.config).map_err(fail(3, "checkpoint config"))?;
    let batch = hipa_core::data::unsqueeze(&lr).map_err(fail(3, "input"))?;
    let outs = model.super_resolve(&ck.params, &batch).map_err(fail(3, "super-resolve"))?;
    let image = |t: &hipa_core::Tensor| t.reshape(t.shape()[1..].to_vec()).map_err(|e| fail(3, "output")(e.into()));
    let save = |path: &Path, t: &hipa_core::Tensor| -> CliResult<()> {
        save_png(path, &image(t)?).map_err(fail(3, format!("output {}", path.display())))
    };
    save(&a.out, &outs[2])?;
    if a.emit_stages {
        for stage in 1..=2 {
            save(&stage_path(&a.out, stage), &outs[stage - 1])?;
        }
    }
    let [_, _, h, w] = outs[2].shape() else { unreachable!() };
    eprintln!("wrote {} ({w}×{h})", a.out.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CliResult<()> {
    let suite: Suite = a.suite.parse().map_err(fail(2, "suite"))?;
    let base = load_config(&a.config, a.seed)?;
    let data = load_data(&a.data, base.scale)?;
    eprintln!(
        "ablation {}: seed {}, {} images (fingerprint {:016x}), {} steps per variant",
        suite.as_str(),
        base.seed,
        data.len(),
        data.fingerprint(),
        a.steps
    );
    let report = run_ablation(suite, &base, &data, a.steps, Some(&a.out), |r| {
        eprintln!(
            "  {:<9} psnr {:.4}  ssim {:.6}  params {}  seed {}  data {:016x}",
            r.variant, r.psnr, r.ssim, r.params, r.seed, r.data_hash
        )
    })
    .map_err(fail(3, "ablation"))?;
    eprintln!("fairness: identical seed, data and steps across variants: {}", report.is_fair());
    let csv = a.out.join(format!("ablation_{}.csv", suite.as_str()));
    write_out(&csv, report.to_csv().as_bytes())?;
    println!("{}", csv.display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let images = hipa_core::synthetic::generate(a.count, a.size, a.seed);
    let mut entries = Vec::new();
    for (id, img) in &images {
        let name = format!("{id}.png");
        save_png(&a.out.join(&name), img).map_err(fail(3, format!("output {}", a.out.display())))?;
        entries.push(name);
    }
    let manifest = a.out.join("manifest.txt");
    Manifest::write(&manifest, &entries).map_err(fail(3, "manifest"))?;
    println!("{}", manifest.display());
    Ok(())
}

fn init_threads() {
    if let Some(n) = std::env::var("HIPA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // only fails if a pool already exists, which cannot happen this early
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_threads();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sr(a) => cmd_sr(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.context, f.err);
            ExitCode::from(f.code)
        }
    }
}
