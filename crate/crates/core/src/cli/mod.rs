//! The `segdiscover` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error.

mod svg;

pub use svg::{render_timeline, FRAME_PX};

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::data::{
    check_segments, file_stem, generate_synthetic, labeling_to_segments, load_dataset, load_segments, read_features,
    save_dataset, save_segments, segments_to_labeling, Dataset, FeatureSequence, Segment, SynthConfig,
};
use crate::error::Error;
use crate::eval::{evaluate, evaluate_with, match_pooled, EvalReport, F1Rule, Metric};
use crate::model::{decode_model, greedy_segment, ModelParams, MODEL_MAGIC};
use crate::trainer::{
    decode_checkpoint, load_checkpoint, save_checkpoint, segment_all, train_from, EpochRecord, TrainConfig,
    TrainState, TRAIN_MAGIC,
};
use crate::Labeling;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_data_error() {
            CliError::Data(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "segdiscover", version, about = "Unsupervised action segmentation by self-labeling")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenSynth(GenSynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Segment videos greedily with a trained model.
    Segment(SegmentArgs),
    /// Score predicted segments against ground truth.
    Eval(EvalArgs),
    /// Train and evaluate over several values of k.
    SweepK(SweepArgs),
    /// Render segmentations as an SVG timeline.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("input").required(true).args(["video", "data"])))]
struct SegmentArgs {
    #[arg(long)]
    model: PathBuf,
    /// A single feature file; `--out` is then the output file.
    #[arg(long)]
    video: Option<PathBuf>,
    /// A dataset directory; `--out` is then a directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    /// Dataset directory or directory of ground-truth JSON files.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "mof,jaccard,f1")]
    metrics: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Match symbols per video instead of over the whole task.
    #[arg(long)]
    per_video: bool,
    #[arg(long, value_enum, default_value = "midpoint")]
    f1_rule: F1RuleArg,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum F1RuleArg {
    Midpoint,
    Overlap,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "5,7,9,11,13")]
    k_list: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    seg: PathBuf,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (program name first), runs the command, returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenSynth(a) => cmd_gen_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Segment(a) => cmd_segment(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::SweepK(a) => cmd_sweep_k(&a),
        Command::Plot(a) => cmd_plot(&a),
    }
}

fn read_json(path: &Path) -> CliResult<Value> {
    let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn from_value<T: serde::de::DeserializeOwned>(v: Value, path: &Path) -> CliResult<T> {
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

fn cmd_gen_synth(a: &GenSynthArgs) -> CliResult<()> {
    let cfg: SynthConfig = from_value(read_json(&a.config)?, &a.config)?;
    let ds = generate_synthetic(&cfg)?;
    save_dataset(&ds, &a.out)?;
    let lens = ds.videos.iter().map(FeatureSequence::len);
    let (lo, hi) = (lens.clone().min().unwrap_or(0), lens.max().unwrap_or(0));
    println!(
        "wrote {} videos to {} (k={}, D={}, T in [{lo}, {hi}])",
        ds.videos.len(),
        a.out.display(),
        cfg.k,
        ds.feature_dim
    );
    Ok(())
}

/// Builds a [`TrainConfig`] from JSON, taking `model.k` and
/// `model.feature_dim` from the dataset when absent.
pub fn train_config_for(mut v: Value, ds: &Dataset, path: &Path) -> CliResult<TrainConfig> {
    let obj = v
        .as_object_mut()
        .ok_or_else(|| CliError::Usage(format!("{}: config must be a JSON object", path.display())))?;
    let model = obj.entry("model").or_insert_with(|| Value::Object(Default::default()));
    let model = model
        .as_object_mut()
        .ok_or_else(|| CliError::Usage(format!("{}: `model` must be an object", path.display())))?;
    if !model.contains_key("k") {
        let k = ds
            .num_classes()
            .ok_or_else(|| CliError::Usage(format!("{}: missing field `k` and the dataset has no k_true", path.display())))?;
        model.insert("k".into(), k.into());
    }
    model.entry("feature_dim").or_insert_with(|| ds.feature_dim.into());
    let cfg: TrainConfig = from_value(v, path)?;
    cfg.check()?;
    Ok(cfg)
}

fn log_path(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.log.jsonl", out.display()))
}

fn check_dims(ds_dim: usize, cfg: &TrainConfig) -> CliResult<()> {
    if ds_dim != cfg.model.feature_dim {
        return Err(CliError::Data(format!(
            "dataset feature dim {ds_dim} does not match config feature_dim {}",
            cfg.model.feature_dim
        )));
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let ds = load_dataset(&a.data)?;
    let cfg = train_config_for(read_json(&a.config)?, &ds, &a.config)?;
    check_dims(ds.feature_dim, &cfg)?;
    let log = log_path(&a.out);
    let mut state = match &a.resume {
        Some(p) => load_checkpoint(p)?,
        None => TrainState::init(&cfg, &ds)?,
    };
    // keep log lines up to the resumed epoch
    let mut lines: Vec<String> = Vec::new();
    if a.resume.is_some() {
        if let Ok(text) = fs::read_to_string(&log) {
            for line in text.lines() {
                let keep = serde_json::from_str::<EpochRecord>(line).is_ok_and(|r| r.epoch <= state.epoch);
                if keep {
                    lines.push(line.to_string());
                }
            }
        }
    }
    write_bytes(&log, lines.iter().map(|l| format!("{l}\n")).collect::<String>().as_bytes())?;
    let mut log_file = fs::OpenOptions::new().append(true).open(&log).map_err(|e| Error::io(&log, e))?;
    let out = a.out.clone();
    train_from(&ds, &cfg, &mut state, |st, rec| {
        let line = serde_json::to_string(rec).expect("serializable");
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log, e))?;
        if cfg.checkpoint_every > 0 && st.epoch % cfg.checkpoint_every == 0 {
            save_checkpoint(st, Path::new(&format!("{}.epoch{}", out.display(), st.epoch)))?;
        }
        Ok(())
    })?;
    save_checkpoint(&state, &a.out)?;
    println!("trained {} epochs; checkpoint {} log {}", state.epoch, a.out.display(), log.display());
    Ok(())
}

/// Loads model parameters from a model or a training checkpoint.
pub fn load_any_model(path: &Path) -> CliResult<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(TRAIN_MAGIC) {
        Ok(decode_checkpoint(&bytes, path)?.model)
    } else if bytes.starts_with(MODEL_MAGIC) {
        Ok(decode_model(&bytes, path)?)
    } else {
        Err(CliError::Data(format!("{}: not a checkpoint", path.display())))
    }
}

fn segment_one(model: &ModelParams, v: &FeatureSequence) -> CliResult<Vec<Segment>> {
    if v.dim() != model.config.feature_dim {
        return Err(CliError::Data(format!(
            "video {} has feature dim {}, model expects {}",
            v.video_id,
            v.dim(),
            model.config.feature_dim
        )));
    }
    Ok(labeling_to_segments(&greedy_segment(model, v)?.symbols))
}

fn cmd_segment(a: &SegmentArgs) -> CliResult<()> {
    let model = load_any_model(&a.model)?;
    if let Some(path) = &a.video {
        let features = read_features(path)?;
        let id = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        let v = FeatureSequence { video_id: id, task_id: String::new(), features };
        let segs = segment_one(&model, &v)?;
        save_segments(&a.out, &segs)?;
        println!("wrote {} segments to {}", segs.len(), a.out.display());
    } else if let Some(dir) = &a.data {
        let ds = load_dataset(dir)?;
        for v in &ds.videos {
            let segs = segment_one(&model, v)?;
            save_segments(&a.out.join(format!("{}.json", file_stem(&v.video_id))), &segs)?;
        }
        println!("segmented {} videos into {}", ds.videos.len(), a.out.display());
    }
    Ok(())
}

fn json_files(dir: &Path) -> CliResult<BTreeMap<String, PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "json") && p.file_name().is_some_and(|n| n != "manifest.json") {
            let stem = p.file_stem().expect("has name").to_string_lossy().into_owned();
            out.insert(stem, p);
        }
    }
    Ok(out)
}

/// Ground truth keyed by file stem, plus the class count.
fn load_gt(dir: &Path) -> CliResult<(BTreeMap<String, Vec<Segment>>, usize)> {
    if dir.join("manifest.json").exists() {
        let ds = load_dataset(dir)?;
        let k = ds.num_classes().unwrap_or(0);
        let gt = ds
            .ground_truth
            .ok_or_else(|| CliError::Data(format!("{} has no ground truth", dir.display())))?;
        let map = ds.videos.iter().map(|v| file_stem(&v.video_id)).zip(gt).collect();
        return Ok((map, k));
    }
    let mut map = BTreeMap::new();
    for (id, p) in json_files(dir)? {
        let segs = load_segments(&p)?;
        let t = segs.last().map_or(0, |s| s.end);
        if let Some(msg) = check_segments(&segs, t, None) {
            return Err(CliError::Data(format!("{}: {msg}", p.display())));
        }
        map.insert(id, segs);
    }
    let k = map.values().flatten().filter_map(|s| s.action).max().map_or(0, |m| m + 1);
    Ok((map, k))
}

#[derive(Serialize)]
struct VideoReport {
    video_id: String,
    #[serde(flatten)]
    report: EvalReport,
}

#[derive(Serialize)]
struct EvalOutput {
    matching: &'static str,
    aggregate: EvalReport,
    per_video: Vec<VideoReport>,
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.collect::<Option<Vec<_>>>()?;
    Some(if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 })
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let metrics: Vec<Metric> = a
        .metrics
        .iter()
        .filter(|m| !m.trim().is_empty())
        .map(|m| m.parse::<Metric>().map_err(|e| CliError::Usage(e.to_string())))
        .collect::<CliResult<_>>()?;
    if metrics.is_empty() {
        return Err(CliError::Usage("--metrics: at least one metric is required".into()));
    }
    let rule = match a.f1_rule {
        F1RuleArg::Midpoint => F1Rule::Midpoint,
        F1RuleArg::Overlap => F1Rule::Overlap,
    };
    let (gt, k_true) = load_gt(&a.gt)?;
    let pred_files = json_files(&a.pred)?;
    let missing: Vec<&str> = gt.keys().filter(|id| !pred_files.contains_key(*id)).map(String::as_str).collect();
    let extra: Vec<&str> = pred_files.keys().filter(|id| !gt.contains_key(*id)).map(String::as_str).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(CliError::Data(format!(
            "video ids differ: missing predictions [{}], unknown predictions [{}]",
            missing.join(", "),
            extra.join(", ")
        )));
    }
    let mut pred_segs = Vec::with_capacity(gt.len());
    for (id, p) in &pred_files {
        let segs = load_segments(p)?;
        let t = gt[id].last().map_or(0, |s| s.end);
        if let Some(msg) = check_segments(&segs, t, None) {
            return Err(CliError::Data(format!("{}: {msg}", p.display())));
        }
        pred_segs.push(segs);
    }
    let k_pred = pred_segs.iter().flatten().filter_map(|s| s.action).max().map_or(1, |m| m + 1);
    let preds: Vec<Labeling> = pred_segs.iter().map(|s| segments_to_labeling(s, k_pred)).collect();
    let gts: Vec<Labeling> = gt.values().map(|s| segments_to_labeling(s, k_true)).collect();
    let ids: Vec<String> = gt.keys().cloned().collect();

    let (aggregate, per_video) = if a.per_video {
        let mut reps = Vec::with_capacity(ids.len());
        for i in 0..ids.len() {
            reps.push(evaluate(&preds[i..=i], &gts[i..=i], &metrics, rule)?);
        }
        let mut conf = vec![vec![0u64; k_true + 1]; k_true];
        for r in &reps {
            for (row, rr) in conf.iter_mut().zip(&r.confusion) {
                for (c, v) in row.iter_mut().zip(rr) {
                    *c += v;
                }
            }
        }
        let want = |m| metrics.contains(&m);
        let agg = EvalReport {
            mapping: Vec::new(),
            mof: want(Metric::Mof).then(|| mean_of(reps.iter().map(|r| r.mof))).flatten(),
            jaccard: want(Metric::Jaccard).then(|| mean_of(reps.iter().map(|r| r.jaccard))).flatten(),
            f1: want(Metric::F1).then(|| mean_of(reps.iter().map(|r| r.f1))).flatten(),
            confusion: conf,
        };
        (agg, reps)
    } else {
        let mapping = match_pooled(&preds, &gts)?;
        let agg = evaluate_with(&preds, &gts, &mapping, &metrics, rule)?;
        let mut reps = Vec::with_capacity(ids.len());
        for i in 0..ids.len() {
            reps.push(evaluate_with(&preds[i..=i], &gts[i..=i], &mapping, &metrics, rule)?);
        }
        (agg, reps)
    };
    let csv = aggregate.confusion_csv();
    let summary: Vec<String> = [("mof", aggregate.mof), ("jaccard", aggregate.jaccard), ("f1", aggregate.f1)]
        .iter()
        .filter_map(|(n, v)| v.map(|v| format!("{n}={v:.4}")))
        .collect();
    let out = EvalOutput {
        matching: if a.per_video { "per-video" } else { "pooled" },
        aggregate,
        per_video: ids.into_iter().zip(per_video).map(|(video_id, report)| VideoReport { video_id, report }).collect(),
    };
    write_bytes(&a.out, &to_json(&out))?;
    write_bytes(&a.out.with_extension("confusion.csv"), csv.as_bytes())?;
    println!("{}", summary.join(" "));
    Ok(())
}

#[derive(Default)]
struct SweepRow {
    status: String,
    mof: Option<f64>,
    jaccard: Option<f64>,
    f1: Option<f64>,
    final_cost: Option<f64>,
    final_runs: Option<f64>,
}

fn sweep_one(ds: &Dataset, base: &Value, config: &Path, k: usize, out: &Path) -> CliResult<SweepRow> {
    let mut v = base.clone();
    if let Some(m) = v.get_mut("model").and_then(Value::as_object_mut) {
        m.insert("k".into(), k.into());
    } else if let Some(o) = v.as_object_mut() {
        o.insert("model".into(), serde_json::json!({ "k": k }));
    }
    let cfg = train_config_for(v, ds, config)?;
    check_dims(ds.feature_dim, &cfg)?;
    let mut state = TrainState::init(&cfg, ds)?;
    let mut last = None;
    train_from(ds, &cfg, &mut state, |_, r| {
        last = Some(r.clone());
        Ok(())
    })?;
    save_checkpoint(&state, &out.join(format!("k{k}.ckpt")))?;
    let mut row = SweepRow {
        status: "ok".into(),
        final_cost: last.as_ref().map(|r| r.mean_cost),
        final_runs: last.as_ref().map(|r| r.mean_runs),
        ..SweepRow::default()
    };
    if let Some(gts) = ds.gt_labelings() {
        let preds: Vec<Labeling> = segment_all(&state.model, &ds.videos, cfg.exec)?.into_iter().map(|r| r.symbols).collect();
        let rep = evaluate(&preds, &gts, &[Metric::Mof, Metric::Jaccard, Metric::F1], F1Rule::Midpoint)?;
        row.mof = rep.mof;
        row.jaccard = rep.jaccard;
        row.f1 = rep.f1;
    }
    Ok(row)
}

fn cmd_sweep_k(a: &SweepArgs) -> CliResult<()> {
    if a.k_list.is_empty() {
        return Err(CliError::Usage("--k-list must not be empty".into()));
    }
    let ds = load_dataset(&a.data)?;
    let base = read_json(&a.config)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    let mut csv = String::from("k,status,mof,jaccard,f1,final_cost,final_runs\n");
    for &k in &a.k_list {
        let row = sweep_one(&ds, &base, &a.config, k, &a.out).unwrap_or_else(|e| {
            log::warn!("k={k} failed: {e}");
            SweepRow { status: format!("error: {}", e.to_string().replace([',', '\n'], ";")), ..SweepRow::default() }
        });
        csv.push_str(&format!(
            "{k},{},{},{},{},{},{}\n",
            row.status,
            opt(row.mof),
            opt(row.jaccard),
            opt(row.f1),
            opt(row.final_cost),
            opt(row.final_runs)
        ));
    }
    let path = a.out.join("sweep_k.csv");
    write_bytes(&path, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn load_checked(path: &Path) -> CliResult<Vec<Segment>> {
    let segs = load_segments(path)?;
    let t = segs.last().map_or(0, |s| s.end);
    if let Some(msg) = check_segments(&segs, t, None) {
        return Err(CliError::Data(format!("{}: {msg}", path.display())));
    }
    Ok(segs)
}

fn cmd_plot(a: &PlotArgs) -> CliResult<()> {
    let pred = load_checked(&a.seg)?;
    let gt = a.gt.as_deref().map(load_checked).transpose()?;
    let t = pred.last().map_or(0, |s| s.end);
    let mut rows: Vec<(&str, &[Segment])> = Vec::new();
    if let Some(g) = &gt {
        let tg = g.last().map_or(0, |s| s.end);
        if tg != t {
            return Err(CliError::Data(format!("ground truth covers {tg} frames, segmentation {t}")));
        }
        rows.push(("ground truth", g));
    }
    rows.push(("prediction", &pred));
    write_bytes(&a.out, render_timeline(&rows, t).as_bytes())?;
    println!("wrote {}", a.out.display());
    Ok(())
}
