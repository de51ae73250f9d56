use std::fs::{self, File};
use std::io::{BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use eventxai_core::backbone::BackboneRegistry;
use eventxai_core::dataset::{image_to_tensor, open_rgb, resize_to_input, scan, DatasetManifest, Split, SplitFractions};
use eventxai_core::eval::{evaluate, misclassification_gallery, Evaluation};
use eventxai_core::explain::{explain, render_overlay, ActivationMap, ExplainerRegistry};
use eventxai_core::model::{build, HeadKind, ModelBundle, ModelConfig};
use eventxai_core::nn::argmax;
use eventxai_core::study::{overlay_path, replay_report, CreateStudy, StudyReport, StudyStore};
use eventxai_core::synth::{generate_shapes, ShapeDatasetSpec};
use eventxai_core::train::finetune;
use image::{ImageFormat, RgbImage};
use serde_json::{json, Value};

use crate::record::RunRecord;
use crate::{
    Cli, Command, DataSource, EvaluateArgs, ExplainArgs, ScanArgs, SplitArgs, StudyReportArgs, StudyServeArgs,
    SynthArgs, TrainArgs,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAINING_LOG_FILE: &str = "training_log.jsonl";

pub fn parse_fractions(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let [train, val, test] = parts[..] else {
        return Err("expected three comma-separated fractions".into());
    };
    SplitFractions::new(train, val, test).map_err(|e| e.to_string())?;
    Ok([train, val, test])
}

pub fn parse_head(s: &str) -> Result<HeadKind, String> {
    match s.split_once(':') {
        None if s == "dense" => Ok(HeadKind::GapDense),
        Some(("mlp", n)) => match n.parse::<usize>() {
            Ok(hidden) if hidden > 0 => Ok(HeadKind::GapMlp { hidden }),
            _ => Err(format!("invalid hidden size {n:?}")),
        },
        _ => Err("expected `dense` or `mlp:<hidden>`".into()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let out = cli.out;
    match cli.command {
        Command::Scan(args) => scan_cmd(&out, args),
        Command::Train(args) => train_cmd(&out, args),
        Command::Evaluate(args) => evaluate_cmd(&out, args),
        Command::Explain(args) => explain_cmd(&out, args),
        Command::StudyServe(args) => study_serve_cmd(&out, args),
        Command::StudyReport(args) => study_report_cmd(&out, args),
        Command::Synth(args) => synth_cmd(&out, args),
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    ensure!(path.is_dir(), "{what} {} is not a directory", path.display());
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    ensure!(path.is_file(), "{what} {} does not exist", path.display());
    Ok(())
}

/// Runs `body` between writing the start and the end of the run record.
fn recorded(
    out: &Path,
    command: &str,
    config: Value,
    seed: Option<u64>,
    body: impl FnOnce(&mut Vec<PathBuf>) -> Result<()>,
) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
    let mut record = RunRecord::start(command, config, seed);
    record.write(out).context("writing run record")?;
    let mut outputs = Vec::new();
    let result = body(&mut outputs);
    record.outputs = outputs;
    record.finish(out, &result).context("writing run record")?;
    result
}

fn fractions(split: &SplitArgs) -> SplitFractions {
    let [train, val, test] = split.fractions;
    SplitFractions::new(train, val, test).expect("validated by the parser")
}

fn validate_source(source: &DataSource) -> Result<()> {
    match (&source.data, &source.manifest) {
        (Some(data), _) => require_dir(data, "dataset root"),
        (None, Some(manifest)) => require_file(manifest, "manifest"),
        (None, None) => bail!("one of --data or --manifest is required"),
    }
}

fn load_source(source: &DataSource, split: &SplitArgs) -> Result<DatasetManifest> {
    if let Some(path) = &source.manifest {
        return DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()));
    }
    let data = source.data.as_ref().expect("validated");
    let root = data.canonicalize().with_context(|| format!("resolving {}", data.display()))?;
    Ok(scan(&root, split.seed, fractions(split))?)
}

fn summary(manifest: &DatasetManifest) -> String {
    format!(
        "{} samples in {} classes (train {}, val {}, test {}), {} skipped files",
        manifest.samples.len(),
        manifest.classes.len(),
        manifest.split_len(Split::Train),
        manifest.split_len(Split::Val),
        manifest.split_len(Split::Test),
        manifest.skipped_files
    )
}

fn scan_cmd(out: &Path, args: ScanArgs) -> Result<()> {
    require_dir(&args.data, "dataset root")?;
    let config = json!({ "data": args.data, "fractions": args.split.fractions });
    recorded(out, "scan", config, Some(args.split.seed), |outputs| {
        let source = DataSource { data: Some(args.data.clone()), manifest: None };
        let manifest = load_source(&source, &args.split)?;
        let path = out.join(MANIFEST_FILE);
        manifest.save(&path)?;
        println!("{}", summary(&manifest));
        println!("manifest: {}", path.display());
        outputs.push(path);
        Ok(())
    })
}

fn train_cmd(out: &Path, args: TrainArgs) -> Result<()> {
    validate_source(&args.source)?;
    let registry = BackboneRegistry::with_builtins();
    if let Some(path) = args.backbone.strip_prefix("file:") {
        require_file(Path::new(path), "backbone checkpoint")?;
    } else if registry.get(&args.backbone).is_none() {
        bail!("unknown backbone {:?}; available: {:?}", args.backbone, registry.ids());
    }
    let manifest = load_source(&args.source, &args.split)?;
    let target_layer = match &args.target_layer {
        Some(layer) => layer.clone(),
        None => registry.default_target_layer(&args.backbone).unwrap_or_default(),
    };
    let config = ModelConfig {
        backbone_id: args.backbone.clone(),
        input_size: args.input_size,
        num_classes: args.classes.unwrap_or(manifest.classes.len()),
        target_layer,
        lr_backbone: args.lr_backbone,
        lr_head: args.lr_head,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.split.seed,
        head: args.head,
    };
    config.validate()?;
    let record_config = json!({ "model": config, "dataset": manifest.root, "fractions": args.split.fractions });
    recorded(out, "train", record_config, Some(args.split.seed), |outputs| {
        let manifest_path = out.join(MANIFEST_FILE);
        manifest.save(&manifest_path)?;
        outputs.push(manifest_path);
        eprintln!("{}", summary(&manifest));

        let mut bundle = build(config, &registry)?;
        let log_path = out.join(TRAINING_LOG_FILE);
        let mut log = BufWriter::new(File::create(&log_path)?);
        let mut log_error = None;
        let record = finetune(&mut bundle, &manifest, |epoch| {
            let f1 = epoch.val_weighted_f1.map_or("-".to_string(), |f| format!("{f:.4}"));
            eprintln!("epoch {:>3}  loss {:.4}  val weighted F1 {f1}  ({:.1}s)", epoch.epoch, epoch.train_loss, epoch.seconds);
            let line = serde_json::to_string(epoch).expect("epoch record serializes");
            if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
                log_error.get_or_insert(e);
            }
        })?;
        if let Some(e) = log_error {
            return Err(e).context("writing training log");
        }
        outputs.push(log_path);

        let ckpt = out.join(CHECKPOINT_FILE);
        bundle.save(&ckpt)?;
        println!("kept epoch {} of {} ({:.1}s)", record.best_epoch, record.epochs.len(), record.wall_seconds);
        println!("checkpoint: {}", ckpt.display());
        outputs.push(ckpt);
        Ok(())
    })
}

fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    require_file(path, "checkpoint")?;
    ModelBundle::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Target class: explicit name or id, otherwise the predicted class.
fn choose_class(bundle: &ModelBundle, name: Option<&str>, id: Option<usize>, tensor: &ndarray::Array3<f32>) -> Result<usize> {
    match (name, id) {
        (Some(name), _) => bundle
            .class_id(name)
            .with_context(|| format!("unknown class {name:?}; classes: {:?}", bundle.class_names)),
        (None, Some(id)) => {
            ensure!(id < bundle.config.num_classes, "class id {id} out of range for {} classes", bundle.config.num_classes);
            Ok(id)
        }
        (None, None) => Ok(argmax(&bundle.logits(tensor.view())?)),
    }
}

struct Explained {
    map: ActivationMap,
    overlay: RgbImage,
}

fn explain_image(
    bundle: &ModelBundle,
    path: &Path,
    class: impl FnOnce(&ndarray::Array3<f32>) -> Result<usize>,
    method: &str,
    alpha: f64,
) -> Result<Explained> {
    let original = open_rgb(path).map_err(anyhow::Error::msg).with_context(|| format!("reading {}", path.display()))?;
    let tensor = image_to_tensor(&resize_to_input(&original, bundle.config.input_size));
    let class = class(&tensor)?;
    let explainers = ExplainerRegistry::with_builtins();
    let map = explain(bundle, tensor.view(), class, explainers.get(method)?)?;
    let overlay = render_overlay(&original, &map.resized(original.width(), original.height()), alpha)?;
    Ok(Explained { map, overlay })
}

fn png_bytes(img: &RgbImage) -> Option<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).ok()?;
    Some(buf.into_inner())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn evaluate_cmd(out: &Path, args: EvaluateArgs) -> Result<()> {
    let bundle = load_checkpoint(&args.checkpoint)?;
    validate_source(&args.source)?;
    ensure!(args.batch_size > 0, "--batch-size must be positive");
    let manifest = load_source(&args.source, &args.split_args)?;
    let config = json!({ "checkpoint": args.checkpoint, "dataset": manifest.root, "split": args.split });
    recorded(out, "evaluate", config, Some(manifest.seed), |outputs| {
        let evaluation = evaluate(&bundle, &manifest, args.split, args.batch_size)?;
        let text = evaluation.report.table().render_text();
        print!("{text}");
        for w in &evaluation.report.warnings {
            eprintln!("warning: {w}");
        }
        let files = [
            (out.join("evaluation.json"), serde_json::to_string_pretty(&evaluation)? + "\n"),
            (out.join("report.json"), evaluation.report.to_json()),
            (out.join("report.txt"), text),
        ];
        for (path, body) in files {
            fs::write(&path, body)?;
            outputs.push(path);
        }

        let overlay_for = |sample_id: &str| {
            let p = evaluation.predictions.iter().find(|p| p.sample_id == sample_id)?;
            let path = manifest.root.join(sample_id);
            let explained = explain_image(&bundle, &path, |_| Ok(p.predicted_class), "gradcam", 0.4).ok()?;
            png_bytes(&explained.overlay)
        };
        let gallery = misclassification_gallery(&evaluation, overlay_for, args.gallery_per_cell);
        let path = out.join("gallery.html");
        fs::write(&path, gallery.render_html())?;
        outputs.push(path);
        Ok(())
    })
}

fn explain_cmd(out: &Path, args: ExplainArgs) -> Result<()> {
    let mut bundle = load_checkpoint(&args.checkpoint)?;
    if let Some(layer) = &args.layer {
        bundle.set_target_layer(layer)?;
    }
    ExplainerRegistry::with_builtins().get(&args.method)?;
    ensure!(args.alpha > 0.0 && args.alpha < 1.0, "--alpha must lie in (0, 1), got {}", args.alpha);
    match (&args.image, &args.manifest) {
        (Some(image), _) => require_file(image, "image")?,
        (None, Some(manifest)) => require_file(manifest, "manifest")?,
        (None, None) => bail!("one of --image or --manifest/--split is required"),
    }
    let config = json!({
        "checkpoint": args.checkpoint,
        "image": args.image,
        "manifest": args.manifest,
        "split": args.split,
        "class_name": args.class_name,
        "class_id": args.class_id,
        "method": args.method,
        "layer": bundle.target_layer(),
        "alpha": args.alpha,
    });
    recorded(out, "explain", config, None, |outputs| {
        let pick = |t: &ndarray::Array3<f32>| choose_class(&bundle, args.class_name.as_deref(), args.class_id, t);
        if let Some(image) = &args.image {
            let explained = explain_image(&bundle, image, pick, &args.method, args.alpha)?;
            let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let paths = [
                out.join(format!("{stem}_overlay.png")),
                out.join(format!("{stem}_map.png")),
                out.join(format!("{stem}_map.json")),
            ];
            explained.overlay.save(&paths[0])?;
            let class_name = bundle.class_names.get(explained.map.target_class).map(String::as_str);
            explained.map.export(&paths[1], &paths[2], class_name)?;
            println!(
                "{} for class {:?}: {}",
                explained.map.method,
                class_name.unwrap_or("?"),
                paths[0].display()
            );
            outputs.extend(paths);
            return Ok(());
        }

        let manifest_path = args.manifest.as_ref().expect("validated");
        let manifest = DatasetManifest::load(manifest_path)?;
        let split = args.split.expect("clap requires --split with --manifest");
        let (overlays, maps) = (out.join("overlays"), out.join("maps"));
        let samples = manifest.split_samples(split);
        ensure!(!samples.is_empty(), "split {split} has no samples");
        for sample in &samples {
            let explained = explain_image(&bundle, &manifest.sample_path(sample), pick, &args.method, args.alpha)
                .with_context(|| format!("explaining {}", sample.sample_id))?;
            let overlay = overlay_path(&overlays, &sample.sample_id);
            let map_png = overlay_path(&maps, &sample.sample_id);
            fs::create_dir_all(overlay.parent().expect("has parent"))?;
            fs::create_dir_all(map_png.parent().expect("has parent"))?;
            explained.overlay.save(&overlay)?;
            let class_name = bundle.class_names.get(explained.map.target_class).map(String::as_str);
            explained.map.export(&map_png, &map_png.with_extension("json"), class_name)?;
        }
        println!("{} overlays in {}", samples.len(), overlays.display());
        outputs.push(overlays);
        outputs.push(maps);
        Ok(())
    })
}

fn store_dir(out: &Path, store: Option<&PathBuf>) -> PathBuf {
    store.cloned().unwrap_or_else(|| out.join("study-store"))
}

fn study_serve_cmd(out: &Path, args: StudyServeArgs) -> Result<()> {
    if let Some(path) = &args.create_from {
        require_file(path, "evaluation")?;
        require_dir(args.image_root.as_ref().expect("clap requires it"), "image root")?;
        require_dir(args.overlay_dir.as_ref().expect("clap requires it"), "overlay directory")?;
    }
    let store_path = store_dir(out, args.store.as_ref());
    let config = json!({ "store": store_path, "addr": args.addr.to_string(), "create_from": args.create_from });
    recorded(out, "study-serve", config, None, |outputs| {
        let store = Arc::new(StudyStore::open(&store_path)?);
        if let Some(path) = &args.create_from {
            let evaluation: Evaluation = serde_json::from_slice(&fs::read(path)?)
                .with_context(|| format!("parsing evaluation {}", path.display()))?;
            let request = CreateStudy {
                evaluation,
                image_root: args.image_root.clone().expect("validated"),
                overlay_dir: args.overlay_dir.clone().expect("validated"),
                votes_needed: args.votes_needed,
            };
            let id = store.create_study(&request)?;
            println!("study {id} ({} tasks)", store.state(&id)?.definition.tasks.len());
        }
        outputs.push(store_path.clone());
        let runtime = tokio::runtime::Runtime::new()?;
        runtime.block_on(eventxai_study_server::serve(
            store,
            args.addr,
            async {
                let _ = tokio::signal::ctrl_c().await;
            },
            |addr| println!("listening on http://{addr}"),
        ))?;
        Ok(())
    })
}

pub fn render_study_report(report: &StudyReport) -> String {
    let mut text = String::from("Class Accuracy Resolved\n");
    for c in &report.per_class {
        let acc = c.accuracy.map_or("-".to_string(), |a| format!("{a:.2}"));
        text.push_str(&format!("{} {acc} {}\n", c.class_name, c.resolved));
    }
    text.push_str(&format!("Weighted Average {:.2} {}\n", report.weighted_average, report.resolved_tasks));
    text
}

fn study_report_cmd(out: &Path, args: StudyReportArgs) -> Result<()> {
    let store_path = store_dir(out, args.store.as_ref());
    let study_dir = store_path.join("studies").join(&args.study);
    require_dir(&study_dir, "study")?;
    let config = json!({ "store": store_path, "study": args.study });
    recorded(out, "study-report", config, None, |outputs| {
        let report = replay_report(&study_dir)?;
        print!("{}", render_study_report(&report));
        if report.unresolved_tasks > 0 {
            eprintln!("{} unresolved tasks excluded", report.unresolved_tasks);
        }
        let path = out.join("study_report.json");
        fs::write(&path, report.to_json())?;
        outputs.push(path);
        Ok(())
    })
}

fn synth_cmd(out: &Path, args: SynthArgs) -> Result<()> {
    let spec = ShapeDatasetSpec { per_class: args.per_class, image_size: args.image_size, seed: args.seed };
    ensure!(spec.per_class > 0 && spec.image_size >= 32, "need --per-class > 0 and --image-size >= 32");
    recorded(out, "synth", serde_json::to_value(&spec)?, Some(spec.seed), |outputs| {
        let annotations = generate_shapes(&args.dest, &spec)?;
        println!("{} images in {}", annotations.len(), args.dest.display());
        outputs.push(args.dest.clone());
        write_json(&out.join("synth_spec.json"), &spec)?;
        Ok(())
    })
}
