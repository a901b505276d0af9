use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use lungscope::clf_model::{self, Family};
use lungscope::dataset::{self, LabelledScan};
use lungscope::experiment::{self, Recipe};
use lungscope::explainer::{self, VarGradConfig};
use lungscope::metrics::IntervalMethod;
use lungscope::phantom::{emit_phantom_dataset, DatasetSpec, Manifest};
use lungscope::pipeline::{self, run_pipeline, MemorySink, ModelSet, PipelineConfig, SliceDetector};
use lungscope::seg_model::{extract_lobe_crops, segment_volume, SegModel};
use lungscope::store::FileStore;
use lungscope::trainer::{self, ScanEntry, SplitManifest, SplitRequest, SplitRole, Task, TrainConfig};
use lungscope::volume_io::{self, apply_window, load_volume, WindowSpec};

use crate::api::{self, AppState};

#[derive(Parser)]
#[command(name = "lungscope", version, about = "Lung CT segmentation, detection, lesion categorization and saliency")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Label every voxel with its lobe (0 = outside the lungs)
    Segment(SegmentArgs),
    /// Score slices and vote on the scan
    Detect(DetectArgs),
    /// Categorize the lobes of selected (default: flagged) slices
    Categorize(CategorizeArgs),
    /// Render a VarGrad saliency overlay for one slice
    Explain(ExplainArgs),
    /// Train models on a phantom manifest, or fine-tune the detector from stored feedback
    Train(TrainArgs),
    /// Write a synthetic phantom dataset with ground truth
    Phantom(PhantomArgs),
    /// Serve the REST API
    Serve(ServeArgs),
    /// Evaluate a model set on a labelled manifest
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct ModelArgs {
    /// Directory holding seg/det/cat checkpoints
    #[arg(long)]
    pub models: PathBuf,
}

#[derive(Args)]
pub struct VolumeArgs {
    /// Volume header (.json) with its .raw payload alongside
    #[arg(long)]
    pub volume: PathBuf,
    #[command(flatten)]
    pub models: ModelArgs,
}

#[derive(Args)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub input: VolumeArgs,
    /// Write the lobe grid here (header .json plus .raw)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub input: VolumeArgs,
    /// Fraction of flagged slices that makes the scan positive
    #[arg(long, default_value_t = pipeline::VOTING_THRESHOLD)]
    pub threshold: f64,
    /// Slice probability at or above which a slice is flagged
    #[arg(long, default_value_t = pipeline::SLICE_THRESHOLD)]
    pub slice_threshold: f64,
}

#[derive(Args)]
pub struct CategorizeArgs {
    #[command(flatten)]
    pub input: VolumeArgs,
    #[arg(long = "slice")]
    pub slices: Vec<usize>,
    #[arg(long, default_value_t = pipeline::VOTING_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub input: VolumeArgs,
    #[arg(long)]
    pub slice: usize,
    /// Output PNG; a .json sidecar is written next to it
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum TaskArg {
    All,
    Segmentation,
    Detection,
    Categorization,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum RecipeArg {
    Tiny,
    Reference,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Phantom manifest with ground truth
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory for checkpoints, histories and the split
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub task: TaskArg,
    #[arg(long, value_enum, default_value = "tiny")]
    pub recipe: RecipeArg,
    /// Classifier backbone family for detector and categorizer
    #[arg(long)]
    pub family: Option<Family>,
    /// Split file to reuse; defaults to OUT/split.json, created when absent
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Train/val/test fractions used when a new split is drawn
    #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.1, 0.2])]
    pub split_ratios: Vec<f64>,
    /// Training config file (JSON or key = value lines); replaces the recipe's settings
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra key=value training settings
    #[arg(long = "set")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub voting_threshold: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub augmentation: Option<String>,
    /// Fine-tune the detector in --models from unconsumed feedback in the store
    #[arg(long)]
    pub from_feedback: bool,
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long, env = "LUNGSCOPE_STORE")]
    pub store: Option<PathBuf>,
}

#[derive(Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub scans: usize,
    /// Fraction of scans with lesions
    #[arg(long, default_value_t = 0.5)]
    pub mix: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// slices,rows,cols
    #[arg(long, value_delimiter = ',', default_values_t = [16, 48, 48])]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 15.0)]
    pub noise: f64,
    /// min,max lesion radius in voxels
    #[arg(long, value_delimiter = ',', default_values_t = [2, 4])]
    pub radius: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub max_lesions: usize,
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long, env = "LUNGSCOPE_STORE")]
    pub store: PathBuf,
    /// Model directory; without it scans can be stored but not processed
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// 0 binds an ephemeral port
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = pipeline::VOTING_THRESHOLD)]
    pub threshold: f64,
    /// Skip saliency computation
    #[arg(long)]
    pub no_explain: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum MethodArg {
    ClopperPearson,
    Wilson,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum RoleArg {
    Train,
    Val,
    Test,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub models: ModelArgs,
    /// Restrict to one role of this split
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub role: RoleArg,
    #[arg(long, default_value_t = pipeline::VOTING_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, value_enum, default_value = "clopper-pearson")]
    pub method: MethodArg,
    /// Extra voting thresholds to report
    #[arg(long, value_delimiter = ',')]
    pub sweep: Vec<f64>,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_models(dir: &Path) -> Result<ModelSet> {
    ModelSet::load(dir).with_context(|| format!("loading models from {}", dir.display()))
}

fn pipeline_config(threshold: f64, slice_threshold: f64, explain: Option<VarGradConfig>) -> Result<PipelineConfig> {
    if !(threshold > 0.0 && threshold < 1.0) {
        bail!("threshold must lie in (0, 1), got {threshold}");
    }
    Ok(PipelineConfig {
        slice_threshold,
        voting_threshold: threshold,
        explain,
        ..PipelineConfig::default()
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Segment(a) => segment(a),
        Command::Detect(a) => detect(a),
        Command::Categorize(a) => categorize(a),
        Command::Explain(a) => explain(a),
        Command::Train(a) => train(a),
        Command::Phantom(a) => phantom(a),
        Command::Serve(a) => serve(a),
        Command::Eval(a) => eval(a),
    }
}

fn segment(a: SegmentArgs) -> Result<()> {
    let volume = load_volume(&a.input.volume)?;
    let models = load_models(&a.input.models.models)?;
    let masks = segment_volume(&models.segmenter, &volume)?;
    let mut voxels = [0usize; 6];
    for m in &masks {
        for &l in m.labels.iter() {
            voxels[l as usize] += 1;
        }
    }
    if let Some(out) = &a.out {
        let (s, r, c) = volume.dims();
        let mut grid = ndarray::Array3::<u8>::zeros((s, r, c));
        for (i, m) in masks.iter().enumerate() {
            grid.index_axis_mut(ndarray::Axis(0), i).assign(&m.labels);
        }
        volume_io::write_label_grid(&grid, volume.spacing_mm(), &volume.scan_id, out)?;
    }
    print_json(&serde_json::json!({
        "scan_id": volume.scan_id,
        "slices": masks.len(),
        "lung_slices": masks.iter().filter(|m| m.has_lung()).count(),
        "lobe_voxels": &voxels[1..],
        "out": a.out,
    }))
}

fn detect(a: DetectArgs) -> Result<()> {
    let volume = load_volume(&a.input.volume)?;
    let models = load_models(&a.input.models.models)?;
    let config = pipeline_config(a.threshold, a.slice_threshold, None)?;
    let run = run_pipeline(&volume, &models.models(), &config, &mut MemorySink::default())?;
    print_json(&run.report.verdict)
}

fn categorize(a: CategorizeArgs) -> Result<()> {
    let volume = load_volume(&a.input.volume)?;
    let models = load_models(&a.input.models.models)?;
    let config = pipeline_config(a.threshold, pipeline::SLICE_THRESHOLD, None)?;
    if a.slices.is_empty() {
        let run = run_pipeline(&volume, &models.models(), &config, &mut MemorySink::default())?;
        return print_json(&run.report.findings);
    }
    let masks = segment_volume(&models.segmenter, &volume)?;
    let windowed = apply_window(&volume, &config.window)?;
    let mut findings = Vec::new();
    for &i in &a.slices {
        if i >= volume.num_slices() {
            bail!("slice {i} out of range (scan has {} slices)", volume.num_slices());
        }
        let slice = windowed.index_axis(ndarray::Axis(0), i).to_owned();
        for crop in extract_lobe_crops(&slice, &masks[i], &volume.scan_id, i)? {
            findings.push(pipeline::LesionFinding {
                slice_index: i,
                lobe_index: crop.lobe_index,
                prediction: clf_model::categorize_crop(&models.categorizer, &crop)?,
            });
        }
    }
    print_json(&findings)
}

fn explain(a: ExplainArgs) -> Result<()> {
    let volume = load_volume(&a.input.volume)?;
    let models = load_models(&a.input.models.models)?;
    if a.slice >= volume.num_slices() {
        bail!("slice {} out of range (scan has {} slices)", a.slice, volume.num_slices());
    }
    let cfg = VarGradConfig {
        n_samples: a.samples,
        noise_std: a.noise,
        seed: a.seed,
    };
    cfg.validate()?;
    let masks = segment_volume(&models.segmenter, &volume)?;
    let slice = apply_window(&volume, &WindowSpec::default())?
        .index_axis(ndarray::Axis(0), a.slice)
        .to_owned();
    let prepared = models.detector.prepare(&slice, &masks[a.slice].lung())?;
    let p = models.detector.score(&[&prepared])?[0];
    let mut map = models.detector.saliency(&prepared, &cfg)?;
    let (rows, cols) = slice.dim();
    map.values = lungscope::imageops::resize_bilinear(&map.values, rows, cols).mapv(|v| v.max(0.0));
    explainer::export_saliency(&map, &slice, &a.out)?;
    print_json(&serde_json::json!({
        "scan_id": volume.scan_id,
        "slice_index": a.slice,
        "p_positive": p,
        "layer": map.layer_name,
        "out": a.out,
    }))
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let (Ok(dims), [rmin, rmax]) = (<[usize; 3]>::try_from(a.dims.as_slice()), a.radius.as_slice()) else {
        bail!("--dims takes 3 values and --radius takes 2");
    };
    let spec = DatasetSpec {
        dims,
        noise_std: a.noise,
        radius_range: (*rmin, *rmax),
        max_lesions: a.max_lesions,
        ..DatasetSpec::new(a.scans, a.mix, a.seed)
    };
    let manifest = emit_phantom_dataset(&a.out, &spec)?;
    print_json(&serde_json::json!({
        "manifest": a.out.join("manifest.json"),
        "scans": manifest.entries.len(),
        "positive": manifest.entries.iter().filter(|e| e.label.is_positive()).count(),
    }))
}

fn entries(manifest: &Manifest) -> Vec<ScanEntry> {
    manifest
        .entries
        .iter()
        .map(|e| ScanEntry::new(e.scan_id.clone(), e.label.is_positive()))
        .collect()
}

fn load_split(path: &Path) -> Result<SplitManifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let split: SplitManifest = serde_json::from_str(&text)?;
    split.check_disjoint()?;
    Ok(split)
}

fn load_role(manifest: &Manifest, list: &[ScanEntry]) -> Result<Vec<LabelledScan>> {
    Ok(dataset::load_scans(manifest, &SplitManifest::ids(list), &WindowSpec::default())?)
}

fn apply_overrides(config: &mut TrainConfig, task: Task, a: &TrainArgs) -> Result<()> {
    if let Some(path) = &a.config {
        *config = TrainConfig::load(path, task)?;
    }
    let flags = [
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("learning_rate", a.learning_rate.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("optimizer", a.optimizer.clone()),
        ("voting_threshold", a.voting_threshold.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
        ("augmentation", a.augmentation.clone()),
    ];
    for (k, v) in flags.iter().filter_map(|(k, v)| v.as_ref().map(|v| (*k, v.as_str()))) {
        config.set(k, v)?;
    }
    for kv in &a.sets {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects key=value, got {kv:?}"))?;
        config.set(k.trim(), v.trim())?;
    }
    config.task = task;
    config.validate()?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    if a.from_feedback {
        return finetune(a);
    }
    let (Some(manifest_path), Some(out)) = (&a.manifest, &a.out) else {
        bail!("train needs --manifest and --out (or --from-feedback with --models and --store)");
    };
    let manifest = Manifest::load(manifest_path)?;
    std::fs::create_dir_all(out)?;
    let mut recipe = match a.recipe {
        RecipeArg::Tiny => Recipe::tiny(a.seed.unwrap_or(0)),
        RecipeArg::Reference => Recipe::reference(a.seed.unwrap_or(0)),
    };
    if let Some(f) = a.family {
        recipe.detector.family = f;
        recipe.categorizer.family = f;
    }
    apply_overrides(&mut recipe.seg_train, Task::Segmentation, &a)?;
    apply_overrides(&mut recipe.det_train, Task::Detection, &a)?;
    apply_overrides(&mut recipe.cat_train, Task::Categorization, &a)?;

    let split_path = a.split.clone().unwrap_or_else(|| out.join("split.json"));
    let split = if split_path.is_file() {
        load_split(&split_path)?
    } else {
        let [train, val, test] = <[f64; 3]>::try_from(a.split_ratios.as_slice())
            .map_err(|_| anyhow::anyhow!("--split-ratios takes 3 values"))?;
        let split = trainer::split_scans(&entries(&manifest), &SplitRequest::Ratios { train, val, test }, recipe.seed)?;
        std::fs::write(&split_path, serde_json::to_string_pretty(&split)?)?;
        split
    };
    let train_scans = load_role(&manifest, &split.train)?;
    let val_scans = load_role(&manifest, &split.val)?;
    std::fs::write(out.join("recipe.json"), serde_json::to_string_pretty(&recipe)?)?;

    let mut summary = serde_json::Map::new();
    let mut record = |name: &str, history: &trainer::History| -> Result<()> {
        history.write_csv(&out.join(format!("history_{name}.csv")))?;
        summary.insert(
            name.into(),
            serde_json::json!({
                "best_epoch": history.best_epoch,
                "final_train_loss": history.records.last().map(|r| r.train_loss),
                "best_val_metric": history.records.iter().filter_map(|r| r.val_metric).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))),
            }),
        );
        Ok(())
    };
    let (seg, det, cat) = match a.task {
        TaskArg::All => (true, true, true),
        TaskArg::Segmentation => (true, false, false),
        TaskArg::Detection => (false, true, false),
        TaskArg::Categorization => (false, false, true),
    };
    let seg_path = out.join(pipeline::SEG_CHECKPOINT);
    let segmenter = if seg {
        let (model, h) = experiment::fit_segmenter(&recipe, &train_scans, &val_scans)?;
        model.save(&seg_path)?;
        record("segmentation", &h)?;
        Some(model)
    } else if det && seg_path.is_file() {
        Some(SegModel::load(&seg_path)?)
    } else {
        None
    };
    let detector = if det {
        let (model, h) = experiment::fit_detector(&recipe, segmenter.as_ref(), &train_scans, &val_scans)?;
        model.save(&out.join(pipeline::DET_CHECKPOINT))?;
        record("detection", &h)?;
        Some(model)
    } else {
        None
    };
    if cat {
        let detector = match detector {
            Some(d) => d,
            None => clf_model::Classifier::load(&out.join(pipeline::DET_CHECKPOINT))
                .context("categorizer training starts from the detector checkpoint in --out")?,
        };
        let (model, h) = experiment::fit_categorizer(&recipe, &detector, &train_scans, &val_scans)?;
        model.save(&out.join(pipeline::CAT_CHECKPOINT))?;
        record("categorization", &h)?;
    }
    print_json(&serde_json::Value::Object(summary))
}

/// Fine-tunes the detector on unconsumed feedback (plus the training split of
/// `--manifest`, when given) and marks the feedback consumed.
fn finetune(a: TrainArgs) -> Result<()> {
    let (Some(models_dir), Some(store_root)) = (&a.models, &a.store) else {
        bail!("--from-feedback needs --models and --store (or LUNGSCOPE_STORE)");
    };
    let store = FileStore::open(store_root)?;
    let records = store.feedback(None, true)?;
    if records.is_empty() {
        bail!("no unconsumed feedback in {}", store_root.display());
    }
    let det_path = models_dir.join(pipeline::DET_CHECKPOINT);
    let mut detector = clf_model::Classifier::load(&det_path)?;
    let mut config = Recipe::tiny(0).det_train;
    config.epochs = 1;
    apply_overrides(&mut config, Task::Detection, &a)?;
    let original = match &a.manifest {
        Some(path) => {
            let manifest = Manifest::load(path)?;
            let train = match &a.split {
                Some(split) => load_split(split)?.train,
                None => entries(&manifest),
            };
            dataset::detection_samples(&load_role(&manifest, &train)?, &detector)?
        }
        None => Vec::new(),
    };
    let feedback = store.feedback_samples(&records, &|s, m| detector.prepare_slice(s, m), &WindowSpec::default())?;
    let history = trainer::finetune_from_feedback(&mut detector, &original, &feedback, &config)?;
    detector.save(&det_path)?;
    store.mark_consumed(&records.iter().map(|r| r.id).collect::<Vec<_>>())?;
    print_json(&serde_json::json!({
        "consumed": records.iter().map(|r| r.id).collect::<Vec<_>>(),
        "feedback_samples": feedback.len(),
        "original_samples": original.len(),
        "detector_version": detector.version,
        "final_train_loss": history.records.last().map(|r| r.train_loss),
    }))
}

fn serve(a: ServeArgs) -> Result<()> {
    let store = Arc::new(FileStore::open(&a.store)?);
    let models = a.models.as_deref().map(load_models).transpose()?.map(Arc::new);
    let explain = (!a.no_explain).then(VarGradConfig::default);
    let state = AppState {
        store,
        models,
        config: pipeline_config(a.threshold, pipeline::SLICE_THRESHOLD, explain)?,
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        let addr = listener.local_addr()?;
        println!("listening on http://{addr}");
        use std::io::Write;
        std::io::stdout().flush()?;
        log::info!("store at {}", a.store.display());
        axum::serve(listener, api::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let models = load_models(&a.models.models)?;
    let list = match &a.split {
        Some(path) => {
            let split = load_split(path)?;
            match a.role {
                RoleArg::Train => split.train,
                RoleArg::Val => split.val,
                RoleArg::Test => split.test,
            }
        }
        None => entries(&manifest),
    };
    let scans = load_role(&manifest, &list)?;
    let method = match a.method {
        MethodArg::ClopperPearson => IntervalMethod::ClopperPearson,
        MethodArg::Wilson => IntervalMethod::Wilson,
    };
    let config = pipeline_config(a.threshold, pipeline::SLICE_THRESHOLD, None)?;
    let mut sweep = a.sweep.clone();
    if !sweep.contains(&a.threshold) {
        sweep.insert(0, a.threshold);
    }
    let e = experiment::evaluate(&models, &scans, &config, a.level, method, &sweep)?;
    let role = a.split.as_ref().map(|_| match a.role {
        RoleArg::Train => SplitRole::Train,
        RoleArg::Val => SplitRole::Val,
        RoleArg::Test => SplitRole::Test,
    });
    let mut value = serde_json::to_value(&e)?;
    value["role"] = serde_json::to_value(role)?;
    value["threshold"] = a.threshold.into();
    print_json(&value)
}
