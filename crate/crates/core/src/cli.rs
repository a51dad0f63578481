//! `gcml` command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, ensure, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::{BitOrder, GcmlConfig};
use crate::cam::{compute_cam, minmax_normalize, upsample_bilinear, ClassifierHead, FeatureMapStack, PoolingMode};
use crate::eval::{self, SweepSettings};
use crate::store::{self, load_samples, reduce_to_grid, Fallback, GcmlStore, PredictOptions};
use crate::synth::{self, SpatialClassSpec};
use crate::tensorio::{load_tensor, save_tensor, DatasetManifest};

#[derive(Debug, Parser)]
#[command(name = "gcml", version, about = "Spatial attention keys over class activation maps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a count store from a labelled dataset.
    Train(TrainArgs),
    /// Classify a dataset with both the head scores and the store.
    Predict(PredictArgs),
    /// Metrics, confusion matrices and a Z test from a predictions file.
    Eval(EvalArgs),
    /// Train and score one store per threshold.
    Sweep(SweepArgs),
    /// Add the counts of two stores.
    Merge(MergeArgs),
    /// Upsample one class activation map into a heatmap tensor.
    Heatmap(HeatmapArgs),
    /// Write a synthetic spatial dataset and a unit head.
    Synth(SynthArgs),
}

/// `HxW` grid size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
        let grid = Grid { h: parse(h)?, w: parse(w)? };
        if grid.h == 0 || grid.w == 0 {
            return Err("grid dimensions must be positive".into());
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderArg {
    Little,
    Big,
}

impl From<OrderArg> for BitOrder {
    fn from(o: OrderArg) -> Self {
        match o {
            OrderArg::Little => BitOrder::Little,
            OrderArg::Big => BitOrder::Big,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Sum,
    Mean,
}

impl From<PoolingArg> for PoolingMode {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Sum => PoolingMode::Sum,
            PoolingArg::Mean => PoolingMode::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FallbackArg {
    Cnn,
    First,
}

impl From<FallbackArg> for Fallback {
    fn from(f: FallbackArg) -> Self {
        match f {
            FallbackArg::Cnn => Fallback::CnnScore,
            FallbackArg::First => Fallback::FirstClass,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayoutArg {
    Diagonal,
    Anchored,
    ThreeWay,
}

#[derive(Debug, Args)]
pub struct HeadArgs {
    /// Head manifest (JSON with `weights`, `bias`, `pooling_mode`).
    #[arg(long)]
    pub head: PathBuf,
    /// Override the head's pooling mode.
    #[arg(long, value_enum)]
    pub pooling: Option<PoolingArg>,
}

impl HeadArgs {
    fn load(&self) -> anyhow::Result<ClassifierHead> {
        let head = ClassifierHead::load(&self.head).with_context(|| format!("loading head {}", self.head.display()))?;
        Ok(match self.pooling {
            Some(p) => head.with_pooling(p.into()),
            None => head,
        })
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub head: HeadArgs,
    /// Output store file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub tau: f32,
    #[arg(long, default_value = "4x4")]
    pub grid: Grid,
    /// Passes over the dataset; 0 writes an empty store.
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    /// Augmentation seed; epoch `e` shifts stacks with seed `seed + e`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "little")]
    pub bit_order: OrderArg,
    /// Mark the store as normalized for inference, which disables further training.
    #[arg(long)]
    pub normalize: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub head: HeadArgs,
    #[arg(long)]
    pub store: PathBuf,
    /// Output predictions CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "cnn")]
    pub fallback: FallbackArg,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    /// Attention grid shape when the store's key length is not a square.
    #[arg(long)]
    pub grid: Option<Grid>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions CSV written by `predict`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Dataset manifest supplying class names.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Held-out set to score; defaults to the training set.
    #[arg(long)]
    pub eval_dataset: Option<PathBuf>,
    #[command(flatten)]
    pub head: HeadArgs,
    /// Comma-separated thresholds.
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.1,0.05,0.009,0.001")]
    pub taus: Vec<f32>,
    #[arg(long, default_value = "4x4")]
    pub grid: Grid,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "little")]
    pub bit_order: OrderArg,
    #[arg(long, value_enum, default_value = "cnn")]
    pub fallback: FallbackArg,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    /// Feature stack tensor for one sample.
    #[arg(long)]
    pub sample: PathBuf,
    #[command(flatten)]
    pub head: HeadArgs,
    #[arg(long)]
    pub class: usize,
    /// Output size.
    #[arg(long)]
    pub size: Grid,
    /// Pool the stack onto this grid before computing the map.
    #[arg(long)]
    pub grid: Option<Grid>,
    /// Min-max normalize the map before upsampling.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "anchored")]
    pub layout: LayoutArg,
    #[arg(long, default_value_t = 100)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.1)]
    pub jitter: f64,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Merge(a) => cmd_merge(&a),
        Command::Heatmap(a) => cmd_heatmap(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn load_dataset(path: &Path) -> anyhow::Result<(DatasetManifest, Vec<store::Sample>)> {
    let m = DatasetManifest::load(path).with_context(|| format!("loading dataset {}", path.display()))?;
    let samples = load_samples(&m).with_context(|| format!("reading samples of {}", path.display()))?;
    Ok((m, samples))
}

fn ensure_classes(manifest: &DatasetManifest, head: &ClassifierHead) -> anyhow::Result<()> {
    ensure!(
        manifest.classes.len() == head.classes(),
        "dataset declares {} classes but the head has {}",
        manifest.classes.len(),
        head.classes()
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    ensure!((0.0..=1.0).contains(&a.tau), "--tau must lie in [0, 1]");
    let head = a.head.load()?;
    let (manifest, samples) = load_dataset(&a.dataset)?;
    ensure_classes(&manifest, &head)?;
    let cfg = GcmlConfig::new(a.tau, a.grid.h, a.grid.w, a.bit_order.into())?;
    let mut s = GcmlStore::new(manifest.classes.clone(), cfg, head.pooling())?;
    for epoch in 0..a.epochs {
        let augment = a.seed.map(|seed| seed.wrapping_add(epoch as u64));
        s.train_epoch(&samples, &head, augment).with_context(|| format!("training epoch {epoch}"))?;
    }
    if a.normalize {
        s.mark_normalized();
    }
    s.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    // Validate what was written.
    let back = GcmlStore::load(&a.out)?;
    ensure!(back.row_totals() == s.row_totals(), "store file did not read back");
    for (c, (label, total)) in s.classes().iter().zip(s.row_totals()).enumerate() {
        println!("{label}\t{total}\t{} keys", s.row(c)?.len());
    }
    println!("total\t{}", s.total());
    Ok(())
}

fn load_store(path: &Path, grid: Option<Grid>) -> anyhow::Result<GcmlStore> {
    let mut s = GcmlStore::load(path).with_context(|| format!("loading store {}", path.display()))?;
    if let Some(g) = grid {
        s.set_grid(g.h, g.w)?;
    }
    Ok(s)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

pub fn cmd_predict(a: &PredictArgs) -> anyhow::Result<()> {
    let head = a.head.load()?;
    let s = load_store(&a.store, a.grid)?;
    let (manifest, samples) = load_dataset(&a.dataset)?;
    ensure_classes(&manifest, &head)?;
    ensure!(
        manifest.classes == s.classes(),
        "dataset classes {:?} differ from store classes {:?}",
        manifest.classes,
        s.classes()
    );
    let opts = PredictOptions { fallback: a.fallback.into(), alpha: a.alpha };
    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    w.write_record(["index", "path", "label", "gcml_class", "cnn_class", "fallback", "keys", "likelihoods", "scores"])?;
    let mut agree = 0usize;
    for (i, (entry, sample)) in manifest.samples.iter().zip(&samples).enumerate() {
        let p = s.predict(&sample.stack, &head, opts).with_context(|| format!("sample {i}"))?;
        agree += usize::from(p.class_index == sample.label);
        let keys: Vec<u64> = p.keys.iter().map(|k| k.0).collect();
        w.write_record([
            i.to_string(),
            entry.path.display().to_string(),
            sample.label.to_string(),
            p.class_index.to_string(),
            p.cnn_class.to_string(),
            u8::from(p.fallback_used).to_string(),
            join(&keys),
            join(&p.likelihoods),
            join(&p.scores),
        ])?;
    }
    w.flush()?;
    println!("{} predictions, {} correct", samples.len(), agree);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub label: usize,
    pub gcml_class: usize,
    pub cnn_class: usize,
    pub fallback: bool,
    pub classes: usize,
}

pub fn read_predictions(path: &Path) -> anyhow::Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).with_context(|| format!("predictions file lacks a {name} column"))
    };
    let (label, gcml, cnn, fb, lik) =
        (col("label")?, col("gcml_class")?, col("cnn_class")?, col("fallback")?, col("likelihoods")?);
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> anyhow::Result<usize> {
            rec[c].parse().with_context(|| format!("row {i}: bad integer {:?}", &rec[c]))
        };
        rows.push(PredictionRow {
            label: num(label)?,
            gcml_class: num(gcml)?,
            cnn_class: num(cnn)?,
            fallback: &rec[fb] == "1",
            classes: rec[lik].split(';').count(),
        });
    }
    Ok(rows)
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let rows = read_predictions(&a.predictions)?;
    ensure!(!rows.is_empty(), "no predictions in {}", a.predictions.display());
    let classes = rows[0].classes;
    ensure!(rows.iter().all(|r| r.classes == classes), "inconsistent class counts across rows");
    let labels: Vec<String> = match &a.dataset {
        Some(p) => {
            let m = DatasetManifest::load(p)?;
            ensure!(m.classes.len() == classes, "dataset has {} classes, predictions {}", m.classes.len(), classes);
            m.classes
        }
        None => (0..classes).map(|c| c.to_string()).collect(),
    };
    fs::create_dir_all(&a.out_dir)?;
    let truth: Vec<usize> = rows.iter().map(|r| r.label).collect();
    let mut correct = Vec::new();
    let mut summary = String::new();
    for (name, preds) in [
        ("gcml", rows.iter().map(|r| r.gcml_class).collect::<Vec<_>>()),
        ("cnn", rows.iter().map(|r| r.cnn_class).collect::<Vec<_>>()),
    ] {
        let m = eval::confusion(&preds, &truth, classes)?;
        let report = eval::metrics(&m)?;
        fs::write(a.out_dir.join(format!("metrics_{name}.csv")), report.to_csv(&labels))?;
        fs::write(a.out_dir.join(format!("confusion_{name}.txt")), m.render(&labels))?;
        let _ = writeln!(
            summary,
            "{name}: accuracy {} macro_f1 {} sensitivity {}",
            report.accuracy, report.macro_f1, report.sensitivity
        );
        correct.push(m.correct());
    }
    let n = rows.len() as u64;
    let z = eval::two_proportion_z(correct[1], correct[0], n)?;
    fs::write(
        a.out_dir.join("ztest.csv"),
        format!(
            "group1,group2,correct1,correct2,n,p1,p2,p_hat,z\ncnn,gcml,{},{},{n},{:.6},{:.6},{:.6},{:.6}\n",
            correct[1], correct[0], z.p1, z.p2, z.p_hat, z.z
        ),
    )?;
    let fallbacks = rows.iter().filter(|r| r.fallback).count();
    print!("{summary}");
    println!("z (cnn vs gcml) {:.4}; {fallbacks} fallback predictions", z.z);
    Ok(())
}

pub fn cmd_sweep(a: &SweepArgs) -> anyhow::Result<()> {
    ensure!(!a.taus.is_empty(), "--taus is empty");
    ensure!(a.epochs >= 1, "--epochs must be at least 1");
    let head = a.head.load()?;
    let (manifest, train) = load_dataset(&a.dataset)?;
    ensure_classes(&manifest, &head)?;
    let test = match &a.eval_dataset {
        Some(p) => {
            let (m, s) = load_dataset(p)?;
            ensure!(m.classes == manifest.classes, "evaluation dataset has different classes");
            s
        }
        None => train.clone(),
    };
    let settings = SweepSettings {
        classes: manifest.classes.clone(),
        grid: (a.grid.h, a.grid.w),
        bit_order: a.bit_order.into(),
        epochs: a.epochs,
        augment_seed: a.seed,
        predict: PredictOptions { fallback: a.fallback.into(), alpha: a.alpha },
    };
    let table = eval::tau_sweep(&train, &test, &head, &a.taus, &settings)?;
    fs::write(&a.out, table.to_csv())?;
    for r in &table.rows {
        println!("tau {}\taccuracy {:.4}", r.tau, r.accuracy);
    }
    println!("best tau {}", table.best_row().tau);
    Ok(())
}

pub fn cmd_merge(a: &MergeArgs) -> anyhow::Result<()> {
    let x = GcmlStore::load(&a.a).with_context(|| format!("loading {}", a.a.display()))?;
    let y = GcmlStore::load(&a.b).with_context(|| format!("loading {}", a.b.display()))?;
    let merged = store::merge(&x, &y)?;
    merged.save(&a.out)?;
    println!("merged {} + {} = {} observations", x.total(), y.total(), merged.total());
    Ok(())
}

pub fn cmd_heatmap(a: &HeatmapArgs) -> anyhow::Result<()> {
    let head = a.head.load()?;
    let t = load_tensor(&a.sample).with_context(|| format!("loading {}", a.sample.display()))?;
    let mut f = FeatureMapStack::from_tensor(&t)?;
    if let Some(g) = a.grid {
        let cfg =
            GcmlConfig::new(0.0, g.h, g.w, BitOrder::Little).or_else(|_| bail!("grid {}x{} is too large", g.h, g.w))?;
        f = reduce_to_grid(&f, &cfg)?;
    }
    let mut cam = compute_cam(&f, &head, a.class)?;
    if a.normalize {
        cam = minmax_normalize(&cam);
    }
    let heat = upsample_bilinear(&cam, a.size.h, a.size.w)?;
    save_tensor(&heat, &a.out)?;
    println!("wrote {}x{} heatmap for class {}", a.size.h, a.size.w, a.class);
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let spec = match a.layout {
        LayoutArg::Diagonal => SpatialClassSpec::diagonal_pair(a.noise, a.jitter),
        LayoutArg::Anchored => SpatialClassSpec::anchored_diagonal_pair(a.noise, a.jitter),
        LayoutArg::ThreeWay => SpatialClassSpec::three_way(a.noise, a.jitter),
    };
    let ds = synth::gen_spatial_classes(&spec, a.seed, a.n_per_class)?;
    let manifest = ds.write(&a.out_dir)?;
    let head = synth::unit_head(spec.classes()).save(&a.out_dir, "head")?;
    println!("{}", manifest.display());
    println!("{}", head.display());
    Ok(())
}
