use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use pfn_core::arch::PfnModel;
use pfn_core::gradcheck::ops::op_suite;
use pfn_core::synth::Split;

use pfn_cli::checkpoint;
use pfn_cli::config::{overlay_file, peek_task, PoseSource, Task, TrainConfig};
use pfn_cli::data::export_dataset;
use pfn_cli::eval::{evaluate, EvalOut};
use pfn_cli::gradfull::full_model_fd;
use pfn_cli::train::train;

#[derive(Parser)]
#[command(
    name = "pfn",
    about = "Self-supervised depth and segmentation on synthetic scenes",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; settings come from task defaults, then flags, then
    /// the config file (the file wins).
    Train(TrainArgs),
    /// Score a checkpoint on freshly generated scenes.
    Eval(EvalArgs),
    /// Print structural statistics for a model configuration.
    Inspect(InspectArgs),
    /// Render a synthetic dataset to disk.
    GenData(GenDataArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigFlags {
    /// TOML config file; keys present in it override the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<Task>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_iter: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    pose_source: Option<PoseSource>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Scene indices scanned by the generator (even → train, odd → val).
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    scales: Option<usize>,
    #[arg(long)]
    shared_channels: Option<usize>,
    #[arg(long)]
    private_channels: Option<usize>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<TrainConfig> {
        let task = match (&self.config, self.task) {
            (Some(path), _) => peek_task(path)?.or(self.task).unwrap_or(Task::Depth),
            (None, Some(t)) => t,
            (None, None) => Task::Depth,
        };
        let mut cfg = TrainConfig::default_for(task);
        macro_rules! flag {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        flag!(cfg.lr, self.lr);
        flag!(cfg.max_iter, self.max_iter);
        flag!(cfg.batch_size, self.batch_size);
        flag!(cfg.seed, self.seed);
        flag!(cfg.pose_source, self.pose_source);
        flag!(cfg.checkpoint_every, self.checkpoint_every);
        flag!(cfg.data.scenes, self.scenes);
        flag!(cfg.data.height, self.height);
        flag!(cfg.data.width, self.width);
        flag!(cfg.model.scales, self.scales);
        flag!(cfg.model.shared_channels, self.shared_channels);
        flag!(cfg.model.private_channels, self.private_channels);
        if let Some(path) = &self.config {
            cfg = overlay_file(&cfg, path)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Directory name under the run root (PFN_RUN_ROOT, default ./runs).
    #[arg(long)]
    run_name: Option<String>,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory (holds manifest.toml).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Rescale each prediction by median(gt)/median(pred) before scoring.
    #[arg(long, default_value_t = false)]
    median_scaling: bool,
    /// Upper clamp for predicted depth during scoring.
    #[arg(long, default_value_t = 80.0)]
    cap: f64,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    /// Write per-sample metric rows to this CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

impl SplitArg {
    fn to_core(self) -> Split {
        match self {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::All => Split::All,
        }
    }
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for the dataset.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    scenes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    split: SplitArg,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Entries sampled per parameter tensor in the composed-model check.
    #[arg(long, default_value_t = 6)]
    param_samples: usize,
    /// Input pixels sampled in the composed-model check.
    #[arg(long, default_value_t = 48)]
    input_samples: usize,
}

fn run_root() -> PathBuf {
    std::env::var_os("PFN_RUN_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.flags.resolve()?;
    let name = args.run_name.clone().unwrap_or_else(|| {
        format!(
            "{}-{}",
            match cfg.task {
                Task::Depth => "depth",
                Task::Segmentation => "seg",
            },
            cfg.seed
        )
    });
    let run_dir = run_root().join(&name);
    if args.resume.is_none() && run_dir.join("metrics.csv").exists() {
        bail!(
            "{} already holds a run; pick another --run-name or remove it",
            run_dir.display()
        );
    }
    let outcome = train(&cfg, &run_dir, args.resume.as_deref())?;
    println!("run directory: {}", outcome.run_dir.display());
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    for (key, value) in &outcome.last_metrics {
        println!("last {key}: {value}");
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (manifest, state) = checkpoint::load(&args.checkpoint, None)?;
    let out = evaluate(
        &manifest.config,
        &state,
        args.split.to_core(),
        args.median_scaling,
        args.cap,
        args.out.as_deref(),
    )?;
    println!("checkpoint: {} (iteration {})", args.checkpoint.display(), manifest.iteration);
    match out {
        EvalOut::Depth(d) => {
            println!("samples: {}", d.samples);
            println!("{}", d.mean.table());
            println!("tac      {:>9.4}", d.tac);
            println!("trc      {:>9.4}", d.trc);
        }
        EvalOut::Seg(s) => {
            println!("samples: {}", s.samples);
            for (c, iou) in s.per_class.iter().enumerate() {
                match iou {
                    Some(v) => println!("class {c}: iou {v:.4}"),
                    None => println!("class {c}: absent"),
                }
            }
            println!("miou: {:.4}", s.miou);
        }
    }
    if let Some(path) = &args.out {
        println!("rows written to {}", path.display());
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let cfg = args.flags.resolve()?;
    let core = cfg.model.to_core();
    let model = PfnModel::<f32>::new(core.clone(), cfg.seed)
        .map_err(|e| anyhow::anyhow!("building model: {e}"))?;
    let stats = model.stats();
    println!("scales: {}", core.scales);
    println!("sa modules per scale (fine to coarse): {:?}", stats.sa_count_per_scale);
    println!("fusion blocks: {}", stats.fusion_count);
    println!("parameters: {}", stats.param_count);
    println!("longest conv path: {}", stats.max_conv_depth);
    println!("input resolution multiple: {}", core.resolution_multiple());
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let scene = pfn_core::synth::SceneConfig {
        height: args.height,
        width: args.width,
        num_classes: args.classes,
        ..pfn_core::synth::SceneConfig::default()
    };
    let written = export_dataset(&args.out, &scene, args.scenes, args.seed, args.split.to_core())?;
    println!("{written} samples written to {}", args.out.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let begun = Instant::now();
    let mut worst_op = 0.0f64;
    let mut failed = Vec::new();
    for report in op_suite() {
        if report.max_rel_err > worst_op {
            worst_op = report.max_rel_err;
        }
        let ok = report.max_rel_err < 1e-4 && report.checked > 0;
        println!(
            "op {:<18} input {} checked {:>4} skipped {:>3} max_rel_err {:.3e}{}",
            report.op,
            report.input,
            report.checked,
            report.skipped_nonsmooth,
            report.max_rel_err,
            if ok { "" } else { "  FAIL" }
        );
        if !ok {
            failed.push(format!("{}[{}]", report.op, report.input));
        }
    }
    let full = full_model_fd(args.param_samples, args.input_samples)?;
    println!(
        "composed model: {} param entries ({} skipped) max_rel_err {:.3e}",
        full.param_entries_checked, full.param_entries_skipped, full.max_param_err
    );
    println!(
        "composed model: {} input entries ({} skipped) max_rel_err {:.3e}",
        full.input_entries_checked, full.input_entries_skipped, full.max_input_err
    );
    println!("elapsed: {:.1}s", begun.elapsed().as_secs_f64());
    if !failed.is_empty() {
        bail!("per-op checks failed: {}", failed.join(", "));
    }
    if full.max_param_err >= 1e-3 || full.max_input_err >= 1e-3 {
        bail!(
            "composed-model gradients disagree with finite differences \
             (param {:.3e}, input {:.3e})",
            full.max_param_err,
            full.max_input_err
        );
    }
    println!("gradcheck ok");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Inspect(args) => cmd_inspect(args),
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
