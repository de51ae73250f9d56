//! `eventxai`: scan, train, evaluate, explain and run annotation studies.

mod commands;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "eventxai", version, about = "Explainable event recognition pipeline")]
struct Cli {
    /// Output directory for every artifact and the run record.
    #[arg(long, global = true, env = "EVENTXAI_OUT", default_value = "eventxai-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Index a class-per-directory image dataset and assign splits.
    Scan(ScanArgs),
    /// Fine-tune a backbone and a fresh head on a dataset.
    Train(TrainArgs),
    /// Classification report and misclassification gallery for one split.
    Evaluate(EvaluateArgs),
    /// Activation maps and heatmap overlays for an image or a whole split.
    Explain(ExplainArgs),
    /// Serve the annotation study HTTP API until interrupted.
    StudyServe(StudyServeArgs),
    /// Replay a study's vote log into an accuracy report.
    StudyReport(StudyReportArgs),
    /// Write the synthetic circle/square/triangle dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
struct SplitArgs {
    /// Seed for the split assignment.
    #[arg(long, default_value_t = 13)]
    seed: u64,
    /// Train,val,test fractions.
    #[arg(long, default_value = "0.7,0.15,0.15", value_parser = commands::parse_fractions)]
    fractions: [f64; 3],
}

#[derive(Args, Debug)]
struct ScanArgs {
    /// Dataset root with one sub-directory per class.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    split: SplitArgs,
}

/// Where samples come from: a saved manifest or a fresh scan.
#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
struct DataSource {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    source: DataSource,
    #[command(flatten)]
    split: SplitArgs,
    /// Expected number of classes; checked against the dataset.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value = "shape-primitives")]
    backbone: String,
    /// Activation layer used for explanations (defaults to the backbone's last).
    #[arg(long)]
    target_layer: Option<String>,
    /// `dense` or `mlp:<hidden units>`.
    #[arg(long, default_value = "dense", value_parser = commands::parse_head)]
    head: eventxai_core::model::HeadKind,
    #[arg(long, default_value_t = 299)]
    input_size: u32,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 120)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr_backbone: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr_head: f64,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    source: DataSource,
    #[command(flatten)]
    split_args: SplitArgs,
    #[arg(long, default_value = "test")]
    split: eventxai_core::dataset::Split,
    #[arg(long, default_value_t = 120)]
    batch_size: usize,
    /// Overlays per confusion cell in the gallery.
    #[arg(long, default_value_t = 4)]
    gallery_per_cell: usize,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Single image to explain.
    #[arg(long, conflicts_with_all = ["manifest", "split"])]
    image: Option<PathBuf>,
    /// Explain every sample of `--split` from this manifest.
    #[arg(long, requires = "split")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    split: Option<eventxai_core::dataset::Split>,
    /// Class to explain; defaults to the predicted class.
    #[arg(long, conflicts_with = "class_id")]
    class_name: Option<String>,
    #[arg(long)]
    class_id: Option<usize>,
    #[arg(long, default_value = "gradcam")]
    method: String,
    /// Override the checkpoint's target layer.
    #[arg(long)]
    layer: Option<String>,
    /// Heatmap opacity in (0, 1).
    #[arg(long, default_value_t = eventxai_core::explain::DEFAULT_BLEND_ALPHA)]
    alpha: f64,
}

#[derive(Args, Debug)]
struct StudyServeArgs {
    /// Study store directory (defaults to `<out>/study-store`).
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: std::net::SocketAddr,
    /// Create a study from this evaluation JSON before serving.
    #[arg(long, requires_all = ["image_root", "overlay_dir"])]
    create_from: Option<PathBuf>,
    #[arg(long)]
    image_root: Option<PathBuf>,
    #[arg(long)]
    overlay_dir: Option<PathBuf>,
    #[arg(long, default_value_t = eventxai_core::study::DEFAULT_VOTES_NEEDED)]
    votes_needed: usize,
}

#[derive(Args, Debug)]
struct StudyReportArgs {
    /// Study store directory (defaults to `<out>/study-store`).
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    study: String,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    dest: PathBuf,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    image_size: u32,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
