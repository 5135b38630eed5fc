//! Command-line driver: data generation, training, evaluation, ablation
//! grids and attention export.
//!
//! Every command resolves its settings into one `key = value` set, built
//! from the defaults, then `--config FILE`, then the named flags, then
//! `--set KEY=VALUE` overrides. The resolved set is written to
//! `resolved.cfg` in the output directory, and passing that file back with
//! `--config` replays the run.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 for
//! runtime and data errors.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, ModelCheckpoint};
use crate::config::{format_list, parse_list, Kv};
use crate::dap::Integration;
use crate::data::{
    generate_shape, load_manifest, load_xyz, make_split, save_dataset, split_indices,
    synthetic_classification, synthetic_parts, Dataset, PartClass, PointCloud, ShapeClass,
};
use crate::error::{Error, Result};
use crate::models::{
    attention_text, build_model, export_attention, Head, Model, ModelConfig, Variant,
};
use crate::train::{evaluate, fit, metrics_csv, predict, Metrics, MetricsRow, TrainConfig};

pub const RESOLVED_FILE: &str = "resolved.cfg";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_SUMMARY_FILE: &str = "ablation_summary.csv";
pub const ATTENTION_FILE: &str = "attention.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// A manifest written by `gen-data` or by hand.
    Manifest(PathBuf),
    /// Generated classification shapes.
    Shapes {
        classes: Vec<ShapeClass>,
        per_class: usize,
        points: usize,
        seed: u64,
    },
    /// Generated part-labeled objects.
    Parts {
        per_class: usize,
        points: usize,
        seed: u64,
    },
}

/// A dataset and its train/test split, from the `data.*` keys.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub source: DataSource,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            source: DataSource::Shapes {
                classes: ShapeClass::ALL.to_vec(),
                per_class: 50,
                points: 512,
                seed: 1,
            },
            train_fraction: 0.8,
            split_seed: 1,
        }
    }
}

/// Parses `data.classes`: `all`, a count of leading classes, or a list of
/// class names.
pub fn parse_classes(v: &str) -> Result<Vec<ShapeClass>> {
    let v = v.trim();
    if v == "all" {
        return Ok(ShapeClass::ALL.to_vec());
    }
    if let Ok(n) = v.parse::<usize>() {
        if n == 0 || n > ShapeClass::ALL.len() {
            return Err(Error::config(format!(
                "class count {n} not in 1..={}",
                ShapeClass::ALL.len()
            )));
        }
        return Ok(ShapeClass::ALL[..n].to_vec());
    }
    let classes: Vec<ShapeClass> = parse_list(v).map_err(Error::config)?;
    if classes.is_empty() {
        return Err(Error::config("no classes selected"));
    }
    if (1..classes.len()).any(|i| classes[..i].contains(&classes[i])) {
        return Err(Error::config(format!("repeated class in {v:?}")));
    }
    Ok(classes)
}

impl DataSpec {
    pub fn to_kv(&self) -> Kv {
        let mut kv = Kv::new();
        match &self.source {
            DataSource::Manifest(path) => {
                kv.set("data.kind", "manifest");
                kv.set("data.manifest", path.display());
            }
            DataSource::Shapes {
                classes,
                per_class,
                points,
                seed,
            } => {
                kv.set("data.kind", "shapes");
                kv.set("data.classes", format_list(classes));
                kv.set("data.per_class", per_class);
                kv.set("data.points", points);
                kv.set("data.seed", seed);
            }
            DataSource::Parts {
                per_class,
                points,
                seed,
            } => {
                kv.set("data.kind", "parts");
                kv.set("data.per_class", per_class);
                kv.set("data.points", points);
                kv.set("data.seed", seed);
            }
        }
        kv.set("data.train_fraction", self.train_fraction);
        kv.set("data.split_seed", self.split_seed);
        kv
    }

    /// Reads `data.*` keys over the defaults. A `data.manifest` key
    /// without `data.kind` selects the manifest source.
    pub fn from_kv(kv: &Kv) -> Result<Self> {
        let mut spec = DataSpec::default();
        let kind = match kv.get("data.kind") {
            Some(k) => k.to_string(),
            None if kv.contains("data.manifest") => "manifest".into(),
            None => "shapes".into(),
        };
        let per_class = kv.parse_opt("data.per_class")?.unwrap_or(50);
        let points = kv.parse_opt("data.points")?.unwrap_or(512);
        let seed = kv.parse_opt("data.seed")?.unwrap_or(1);
        spec.source = match kind.as_str() {
            "manifest" => DataSource::Manifest(
                kv.get("data.manifest")
                    .map(PathBuf::from)
                    .ok_or_else(|| Error::config("data.kind = manifest needs data.manifest"))?,
            ),
            "shapes" => DataSource::Shapes {
                classes: kv
                    .get("data.classes")
                    .map_or(Ok(ShapeClass::ALL.to_vec()), parse_classes)?,
                per_class,
                points,
                seed,
            },
            "parts" => DataSource::Parts {
                per_class,
                points,
                seed,
            },
            other => {
                return Err(Error::config(format!(
                    "unknown data.kind {other:?}; valid: shapes, parts, manifest"
                )))
            }
        };
        if let Some(v) = kv.parse_opt("data.train_fraction")? {
            spec.train_fraction = v;
        }
        if let Some(v) = kv.parse_opt("data.split_seed")? {
            spec.split_seed = v;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::config(format!(
                "data.train_fraction {} not in (0, 1]",
                self.train_fraction
            )));
        }
        match self.source {
            DataSource::Shapes { per_class, .. } | DataSource::Parts { per_class, .. }
                if per_class == 0 =>
            {
                Err(Error::config("data.per_class must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match &self.source {
            DataSource::Manifest(path) => load_manifest(path),
            DataSource::Shapes {
                classes,
                per_class,
                points,
                seed,
            } => synthetic_classification(classes, *per_class, *points, *seed),
            DataSource::Parts {
                per_class,
                points,
                seed,
            } => synthetic_parts(*per_class, *points, *seed),
        }
    }

    pub fn split(&self, dataset: &Dataset) -> Result<(Dataset, Dataset)> {
        make_split(dataset, self.train_fraction, self.split_seed)
    }
}

/// The head matching a dataset: segmentation when it carries part labels.
pub fn head_for(dataset: &Dataset) -> Head {
    match dataset.num_parts() {
        0 => Head::Classify(dataset.num_classes()),
        n => Head::Segment(n),
    }
}

/// The ablation grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    /// Baseline, random offsets and 1, 2 or 4 attention points.
    DapVariant,
    /// Addition against concatenation with an MLP.
    Integration,
    /// Neighborhood size.
    K,
    /// Training fraction.
    Split,
}

impl Grid {
    pub const ALL: [Grid; 4] = [Grid::DapVariant, Grid::Integration, Grid::K, Grid::Split];

    pub fn name(self) -> &'static str {
        match self {
            Grid::DapVariant => "dap-variant",
            Grid::Integration => "integration",
            Grid::K => "k",
            Grid::Split => "split",
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Grid::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown grid {s:?}; valid: dap-variant, integration, k, split"
                ))
            })
    }
}

/// Cells and seeds of an ablation run, from the `ablate.*` keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationPlan {
    pub grids: Vec<Grid>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub integrations: Vec<Integration>,
    pub ks: Vec<usize>,
    pub fractions: Vec<f64>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        AblationPlan {
            grids: Grid::ALL.to_vec(),
            seeds: vec![1, 2, 3, 4, 5],
            variants: Variant::ALL.to_vec(),
            integrations: vec![Integration::Add, Integration::ConcatMlp],
            ks: vec![5, 10, 20, 40],
            fractions: vec![0.8, 0.6, 0.4, 0.2, 0.1, 0.05, 0.01],
        }
    }
}

fn list_or<T>(kv: &Kv, key: &str, default: Vec<T>) -> Result<Vec<T>>
where
    T: FromStr,
    T::Err: fmt::Display,
{
    let v = kv.parse_list(key)?.unwrap_or(default);
    if v.is_empty() {
        return Err(Error::config(format!("{key} must not be empty")));
    }
    Ok(v)
}

impl AblationPlan {
    pub fn to_kv(&self) -> Kv {
        let mut kv = Kv::new();
        kv.set("ablate.grids", format_list(&self.grids));
        kv.set("ablate.seeds", format_list(&self.seeds));
        kv.set("ablate.variants", format_list(&self.variants));
        kv.set("ablate.integrations", format_list(&self.integrations));
        kv.set("ablate.ks", format_list(&self.ks));
        kv.set("ablate.fractions", format_list(&self.fractions));
        kv
    }

    pub fn from_kv(kv: &Kv) -> Result<Self> {
        let d = AblationPlan::default();
        let grids = match kv.get("ablate.grids") {
            Some("all") => Grid::ALL.to_vec(),
            _ => list_or(kv, "ablate.grids", d.grids)?,
        };
        let plan = AblationPlan {
            grids,
            seeds: list_or(kv, "ablate.seeds", d.seeds)?,
            variants: list_or(kv, "ablate.variants", d.variants)?,
            integrations: list_or(kv, "ablate.integrations", d.integrations)?,
            ks: list_or(kv, "ablate.ks", d.ks)?,
            fractions: list_or(kv, "ablate.fractions", d.fractions)?,
        };
        if plan.ks.contains(&0) {
            return Err(Error::config("ablate.ks must be positive"));
        }
        if let Some(f) = plan.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::config(format!(
                "ablate.fractions: {f} not in (0, 1]"
            )));
        }
        Ok(plan)
    }

    /// Cells of one grid as (name, model, train fraction).
    pub fn cells(
        &self,
        grid: Grid,
        base: &ModelConfig,
        fraction: f64,
    ) -> Vec<(String, ModelConfig, f64)> {
        // every grid but the variant grid studies the attention block
        let dap_base = if base.dap_layers.is_empty() {
            base.clone().with_dap()
        } else {
            base.clone()
        };
        match grid {
            Grid::DapVariant => self
                .variants
                .iter()
                .map(|&v| (v.to_string(), base.clone().with_variant(v), fraction))
                .collect(),
            Grid::Integration => self
                .integrations
                .iter()
                .map(|&i| {
                    let mut cfg = dap_base.clone();
                    cfg.dap.integration = i;
                    let name = match i {
                        Integration::Add => "I1",
                        Integration::ConcatMlp => "I2",
                    };
                    (name.to_string(), cfg, fraction)
                })
                .collect(),
            Grid::K => self
                .ks
                .iter()
                .map(|&k| {
                    (
                        k.to_string(),
                        ModelConfig {
                            k,
                            ..dap_base.clone()
                        },
                        fraction,
                    )
                })
                .collect(),
            Grid::Split => self
                .fractions
                .iter()
                .map(|&f| (format!("{}%", f * 100.0), dap_base.clone(), f))
                .collect(),
        }
    }
}

/// One trained cell of an ablation grid, scored on its test split.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub grid: Grid,
    pub cell: String,
    pub seed: u64,
    pub oa: f64,
    pub macc: f64,
}

pub const ABLATION_HEADER: &str = "grid,cell,seed,OA,mAcc";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.grid, r.cell, r.seed, r.oa, r.macc
        ));
    }
    s
}

pub fn parse_ablation_csv(text: &str) -> Result<Vec<AblationRow>> {
    let bad = |line: usize, msg: &str| Error::Parse {
        path: PathBuf::from(ABLATION_FILE),
        line,
        msg: msg.to_string(),
    };
    let mut lines = text.lines();
    if lines.next() != Some(ABLATION_HEADER) {
        return Err(bad(1, "missing header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(i + 2, "expected 5 fields"));
            }
            Ok(AblationRow {
                grid: f[0].parse().map_err(|_| bad(i + 2, "bad grid"))?,
                cell: f[1].to_string(),
                seed: f[2].parse().map_err(|_| bad(i + 2, "bad seed"))?,
                oa: f[3].parse().map_err(|_| bad(i + 2, "bad OA"))?,
                macc: f[4].parse().map_err(|_| bad(i + 2, "bad mAcc"))?,
            })
        })
        .collect()
}

/// Mean and standard deviation of test OA and mean mAcc per cell, in
/// first-appearance order, as CSV.
pub fn ablation_summary(rows: &[AblationRow]) -> String {
    let mut cells: Vec<(Grid, &str)> = Vec::new();
    for r in rows {
        if !cells.contains(&(r.grid, r.cell.as_str())) {
            cells.push((r.grid, &r.cell));
        }
    }
    let mut s = String::from("grid,cell,seeds,mean_OA,sd_OA,mean_mAcc\n");
    for (grid, cell) in cells {
        let sel: Vec<&AblationRow> = rows
            .iter()
            .filter(|r| r.grid == grid && r.cell == cell)
            .collect();
        let n = sel.len() as f64;
        let mean = sel.iter().map(|r| r.oa).sum::<f64>() / n;
        let sd = if sel.len() > 1 {
            (sel.iter().map(|r| (r.oa - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let macc = sel.iter().map(|r| r.macc).sum::<f64>() / n;
        s.push_str(&format!("{grid},{cell},{},{mean},{sd},{macc}\n", sel.len()));
    }
    s
}

/// Trains one model for a cell and scores it on the held-out split.
/// The seed sets the split, the initial weights and the training stream,
/// so cells sharing a seed are paired.
pub fn run_cell(
    dataset: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    fraction: f64,
    seed: u64,
) -> Result<Metrics> {
    let (train_set, test_set) = make_split(dataset, fraction, seed)?;
    if test_set.is_empty() {
        return Err(Error::invalid(format!(
            "train fraction {fraction} leaves no test samples"
        )));
    }
    let mut m = build_model(model, seed)?;
    let cfg = TrainConfig {
        seed,
        eval_every: train.epochs.max(1),
        ..train.clone()
    };
    fit(&mut m, &train_set, None, &cfg)?;
    evaluate(&m, &test_set)
}

/// Runs every cell of every grid in the plan for every seed. `on_row` sees
/// each row as it completes. Split fractions are checked up front.
pub fn run_ablation(
    dataset: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    fraction: f64,
    plan: &AblationPlan,
    mut on_row: impl FnMut(&AblationRow, &[AblationRow]) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    let mut jobs = Vec::new();
    for &grid in &plan.grids {
        for (cell, cfg, f) in plan.cells(grid, model, fraction) {
            cfg.validate()?;
            for &seed in &plan.seeds {
                split_indices(dataset, f, seed)?;
                jobs.push((grid, cell.clone(), cfg.clone(), f, seed));
            }
        }
    }
    let mut rows = Vec::with_capacity(jobs.len());
    for (grid, cell, cfg, f, seed) in jobs {
        let m = run_cell(dataset, &cfg, train, f, seed)
            .map_err(|e| Error::invalid(format!("{grid} cell {cell} seed {seed}: {e}")))?;
        rows.push(AblationRow {
            grid,
            cell,
            seed,
            oa: m.oa,
            macc: m.macc,
        });
        on_row(rows.last().expect("just pushed"), &rows)?;
    }
    Ok(rows)
}

/// Per-sample predictions as CSV. Classification gives one row per
/// sample; segmentation gives one row per point with its coordinates.
pub fn predictions_csv(model: &Model, dataset: &Dataset) -> Result<String> {
    let segment = matches!(model.cfg.head, Head::Segment(_));
    let mut s = String::from(if segment {
        "sample,source,point,x,y,z,label,pred\n"
    } else {
        "sample,source,label,pred\n"
    });
    let na = |v: Option<usize>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
    for (i, cloud) in dataset.clouds.iter().enumerate() {
        let pred = predict(model, cloud)?;
        if segment {
            for (j, (p, y)) in cloud.positions.iter().zip(&pred).enumerate() {
                let label = na(cloud.part_labels.as_ref().map(|l| l[j]));
                s.push_str(&format!(
                    "{i},{},{j},{:e},{:e},{:e},{label},{y}\n",
                    cloud.source_id, p[0], p[1], p[2]
                ));
            }
        } else {
            s.push_str(&format!(
                "{i},{},{},{}\n",
                cloud.source_id,
                na(cloud.class_label),
                pred[0]
            ));
        }
    }
    Ok(s)
}

#[derive(Parser, Debug)]
#[command(
    name = "dapconv",
    version,
    about = "Point-cloud networks with directional attention points"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as XYZ files plus a manifest.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and score every cell of the ablation grids.
    Ablate(AblateArgs),
    /// Dump attention points of one layer for one cloud.
    ExportAttention(ExportArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// `key = value` settings file; flags take precedence.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Set one key, for example `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    /// shapes or parts.
    #[arg(long)]
    kind: Option<String>,
    /// Number of shape classes, `all`, or a list of class names.
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DataFlags {
    /// shapes, parts or manifest.
    #[arg(long)]
    kind: Option<String>,
    /// Dataset manifest; implies `--kind manifest`.
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
    /// Number of shape classes, `all`, or a list of class names.
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ModelFlags {
    /// mini-dgcnn or mini-pointnet.
    #[arg(long)]
    model: Option<String>,
    /// Layers using the attention block: `all`, `none`, or indices.
    #[arg(long)]
    dap: Option<String>,
    /// euclidean or feature.
    #[arg(long)]
    space: Option<String>,
    /// add (I1) or concat (I2).
    #[arg(long)]
    integration: Option<String>,
    /// Attention points per point.
    #[arg(long)]
    dap_count: Option<usize>,
    /// baseline, random, dap1, dap2 or dap4; sets the layer list, count
    /// and offset mode together.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated layer widths.
    #[arg(long)]
    widths: Option<String>,
}

#[derive(Args, Debug)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// adam or sgd.
    #[arg(long)]
    optimizer: Option<String>,
    /// Seeds the initial weights and the training stream.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataFlags,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// train, test or all.
    #[arg(long)]
    split: Option<String>,
    /// Also write per-sample (or per-point) predictions.
    #[arg(long)]
    predictions: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
    /// Grids to run: `all` or a list of dap-variant, integration, k, split.
    #[arg(long)]
    grid: Option<String>,
    /// Comma-separated seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Comma-separated variants for the dap-variant grid.
    #[arg(long)]
    variants: Option<String>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Layer index to export.
    #[arg(long)]
    layer: Option<usize>,
    /// XYZ file of the cloud to export.
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,
    /// Generate the cloud from this shape class instead of reading it.
    #[arg(long)]
    shape: Option<String>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Why a command failed, carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(e: impl fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn push<T: fmt::Display>(out: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        out.push((key, v.to_string()));
    }
}

impl DataFlags {
    fn keys(&self, out: &mut Vec<(&'static str, String)>) {
        push(out, "data.kind", &self.kind);
        push(
            out,
            "data.manifest",
            &self.manifest.as_ref().map(|p| p.display()),
        );
        push(out, "data.classes", &self.classes);
        push(out, "data.per_class", &self.per_class);
        push(out, "data.points", &self.points);
        push(out, "data.seed", &self.data_seed);
        push(out, "data.train_fraction", &self.train_fraction);
        push(out, "data.split_seed", &self.split_seed);
    }
}

impl ModelFlags {
    fn keys(&self, out: &mut Vec<(&'static str, String)>) {
        push(out, "model.backbone", &self.model);
        match self.variant {
            Some(Variant::Baseline) => out.push(("model.dap_layers", "none".into())),
            Some(v) => {
                out.push(("model.dap_layers", "all".into()));
                out.push(("model.random_offset", (v == Variant::Random).to_string()));
                let m = match v {
                    Variant::Dap(m) => m,
                    _ => 1,
                };
                out.push(("model.dap_count", m.to_string()));
            }
            None => {}
        }
        push(out, "model.dap_layers", &self.dap);
        push(out, "model.space", &self.space);
        push(out, "model.integration", &self.integration);
        push(out, "model.dap_count", &self.dap_count);
        push(out, "model.k", &self.k);
        push(out, "model.widths", &self.widths);
    }
}

impl TrainFlags {
    fn keys(&self, out: &mut Vec<(&'static str, String)>) {
        push(out, "train.epochs", &self.epochs);
        push(out, "train.batch_size", &self.batch_size);
        push(out, "train.lr", &self.lr);
        push(out, "train.optimizer", &self.optimizer);
        push(out, "train.seed", &self.seed);
    }
}

/// Config file, then flag keys, then `--set` overrides.
fn gather(common: &Common, flags: Vec<(&'static str, String)>) -> Outcome<Kv> {
    let mut kv = match &common.config {
        Some(path) => {
            Kv::load(path).map_err(|e| usage(format!("config {}: {e}", path.display())))?
        }
        None => Kv::new(),
    };
    for (k, v) in flags {
        kv.set(k, v);
    }
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

fn prepare_out(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::Io(e)))
}

fn write_resolved(dir: &Path, command: &str, parts: &[Kv]) -> Outcome {
    let mut text = format!("# dapconv {command}\n");
    for kv in parts {
        text.push_str(&kv.to_text());
    }
    fs::write(dir.join(RESOLVED_FILE), text).map_err(|e| Failure::Runtime(Error::Io(e)))
}

/// Model settings, with the head taken from the data when not given.
fn resolve_model(
    kv: &Kv,
    data: &DataSpec,
    defaults: &[(&str, &str)],
) -> Outcome<(ModelConfig, Option<Dataset>)> {
    let mut kv: Kv = Kv::parse(&kv.to_text(), Path::new("<settings>")).map_err(usage)?;
    let mut loaded = None;
    if !kv.contains("model.head") {
        let head = match &data.source {
            DataSource::Shapes { classes, .. } => Head::Classify(classes.len()),
            DataSource::Parts { .. } => {
                Head::Segment(PartClass::ALL.iter().map(|c| c.part_names().len()).sum())
            }
            DataSource::Manifest(_) => {
                let ds = data.load()?;
                let head = head_for(&ds);
                loaded = Some(ds);
                head
            }
        };
        kv.set("model.head", head);
    }
    for (k, v) in defaults {
        if !kv.contains(k) {
            kv.set(k, v);
        }
    }
    let cfg = ModelConfig::from_kv(&kv).map_err(usage)?;
    let unknown: Vec<String> = kv
        .unused()
        .into_iter()
        .filter(|k| k.starts_with("model."))
        .collect();
    if !unknown.is_empty() {
        return Err(usage(format!(
            "settings: unknown keys {}",
            unknown.join(", ")
        )));
    }
    Ok((cfg, loaded))
}

fn cmd_gen_data(a: &GenDataArgs) -> Outcome {
    let mut keys = Vec::new();
    push(&mut keys, "data.kind", &a.kind);
    push(&mut keys, "data.classes", &a.classes);
    push(&mut keys, "data.per_class", &a.per_class);
    push(&mut keys, "data.points", &a.points);
    push(&mut keys, "data.seed", &a.seed);
    let kv = gather(&a.common, keys)?;
    let spec = DataSpec::from_kv(&kv).map_err(usage)?;
    if matches!(spec.source, DataSource::Manifest(_)) {
        return Err(usage("gen-data needs data.kind = shapes or parts"));
    }
    kv.reject_unused("settings").map_err(usage)?;
    let ds = spec.load()?;
    prepare_out(&a.common.out)?;
    let manifest = save_dataset(&ds, &a.common.out)?;
    write_resolved(&a.common.out, "gen-data", &[spec.to_kv()])?;
    println!("wrote {} clouds, manifest {}", ds.len(), manifest.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Outcome {
    let mut keys = Vec::new();
    a.data.keys(&mut keys);
    a.model.keys(&mut keys);
    a.train.keys(&mut keys);
    let kv = gather(&a.common, keys)?;
    let data = DataSpec::from_kv(&kv).map_err(usage)?;
    let train = TrainConfig::from_kv(&kv).map_err(usage)?;
    let (model_cfg, loaded) = resolve_model(&kv, &data, &[])?;
    kv.ignore_prefix("model.");
    kv.reject_unused("settings").map_err(usage)?;

    let ds = match loaded {
        Some(ds) => ds,
        None => data.load()?,
    };
    let (train_set, test_set) = data.split(&ds)?;
    prepare_out(&a.common.out)?;
    write_resolved(
        &a.common.out,
        "train",
        &[data.to_kv(), model_cfg.to_kv(), train.to_kv()],
    )?;

    let mut model = build_model(&model_cfg, train.seed)?;
    let out = fit(&mut model, &train_set, Some(&test_set), &train)?;
    fs::write(a.common.out.join(METRICS_FILE), metrics_csv(&out.history)).map_err(Error::Io)?;
    save_checkpoint(&out.checkpoint, &a.common.out.join(CHECKPOINT_FILE))?;
    print_final(&out.history, out.epochs_run);
    Ok(())
}

fn print_final(history: &[MetricsRow], epochs: usize) {
    let last = history.last().map_or(0, |r| r.epoch);
    for r in history.iter().filter(|r| r.epoch == last) {
        let miou = r.miou.map_or_else(String::new, |v| format!(" mIoU {v:.4}"));
        println!(
            "epoch {epochs} {}: OA {:.4} mAcc {:.4}{miou} loss {:.4}",
            r.split, r.oa, r.macc, r.loss
        );
    }
}

fn cmd_eval(a: &EvalArgs) -> Outcome {
    let mut keys = Vec::new();
    a.data.keys(&mut keys);
    push(&mut keys, "eval.split", &a.split);
    let kv = gather(&a.common, keys)?;
    let data = DataSpec::from_kv(&kv).map_err(usage)?;
    let split = kv.get("eval.split").unwrap_or("test").to_string();
    if !["train", "test", "all"].contains(&split.as_str()) {
        return Err(usage(format!(
            "unknown split {split:?}; valid: train, test, all"
        )));
    }
    for prefix in ["model.", "train.", "ablate."] {
        kv.ignore_prefix(prefix);
    }
    kv.reject_unused("settings").map_err(usage)?;

    let ckpt = open_checkpoint(&a.checkpoint)?;
    let model = ckpt.model()?;
    let ds = data.load()?;
    let subset = match split.as_str() {
        "all" => ds,
        s => {
            let (train, test) = data.split(&ds)?;
            if s == "train" {
                train
            } else {
                test
            }
        }
    };
    if subset.is_empty() {
        return Err(Failure::Runtime(Error::invalid(format!(
            "{split} split is empty"
        ))));
    }
    let metrics = evaluate(&model, &subset)?;
    let epoch = ckpt.history.last().map_or(0, |r| r.epoch);
    let row = MetricsRow::new(epoch, &split, &metrics);
    prepare_out(&a.common.out)?;
    let mut resolved = data.to_kv();
    resolved.set("eval.split", &split);
    write_resolved(&a.common.out, "eval", &[resolved])?;
    fs::write(
        a.common.out.join(METRICS_FILE),
        metrics_csv(std::slice::from_ref(&row)),
    )
    .map_err(Error::Io)?;
    if a.predictions {
        fs::write(
            a.common.out.join(PREDICTIONS_FILE),
            predictions_csv(&model, &subset)?,
        )
        .map_err(Error::Io)?;
    }
    print_final(&[row], epoch);
    Ok(())
}

fn open_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    load_checkpoint(path).map_err(|e| Error::invalid(format!("checkpoint {}: {e}", path.display())))
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Outcome {
    let mut keys = Vec::new();
    a.data.keys(&mut keys);
    a.model.keys(&mut keys);
    a.train.keys(&mut keys);
    push(&mut keys, "ablate.grids", &a.grid);
    push(&mut keys, "ablate.seeds", &a.seeds);
    push(&mut keys, "ablate.variants", &a.variants);
    let kv = gather(&a.common, keys)?;
    let data = DataSpec::from_kv(&kv).map_err(usage)?;
    let train = TrainConfig::from_kv(&kv).map_err(usage)?;
    let plan = AblationPlan::from_kv(&kv).map_err(usage)?;
    let (model_cfg, loaded) = resolve_model(&kv, &data, &[("model.dap_layers", "all")])?;
    kv.ignore_prefix("model.");
    kv.reject_unused("settings").map_err(usage)?;

    let ds = match loaded {
        Some(ds) => ds,
        None => data.load()?,
    };
    prepare_out(&a.common.out)?;
    write_resolved(
        &a.common.out,
        "ablate",
        &[data.to_kv(), model_cfg.to_kv(), train.to_kv(), plan.to_kv()],
    )?;
    let csv_path = a.common.out.join(ABLATION_FILE);
    let rows = run_ablation(
        &ds,
        &model_cfg,
        &train,
        data.train_fraction,
        &plan,
        |row, all| {
            eprintln!(
                "{} {} seed {}: OA {:.4} mAcc {:.4}",
                row.grid, row.cell, row.seed, row.oa, row.macc
            );
            write_atomic(&csv_path, &ablation_csv(all))
        },
    )?;
    write_atomic(&csv_path, &ablation_csv(&rows))?;
    write_atomic(
        &a.common.out.join(ABLATION_SUMMARY_FILE),
        &ablation_summary(&rows),
    )?;
    print!("{}", ablation_summary(&rows));
    Ok(())
}

fn cmd_export_attention(a: &ExportArgs) -> Outcome {
    let mut keys = Vec::new();
    push(&mut keys, "export.layer", &a.layer);
    push(
        &mut keys,
        "export.input",
        &a.input.as_ref().map(|p| p.display()),
    );
    push(&mut keys, "export.shape", &a.shape);
    push(&mut keys, "export.points", &a.points);
    push(&mut keys, "export.seed", &a.seed);
    let kv = gather(&a.common, keys)?;
    let layer: usize = kv.parse_opt("export.layer").map_err(usage)?.unwrap_or(0);
    let points: usize = kv.parse_opt("export.points").map_err(usage)?.unwrap_or(512);
    let seed: u64 = kv.parse_opt("export.seed").map_err(usage)?.unwrap_or(1);
    let input = kv.get("export.input").map(PathBuf::from);
    let shape: ShapeClass = kv
        .get("export.shape")
        .unwrap_or("torus")
        .parse()
        .map_err(usage)?;
    if input.is_some() && kv.contains("export.shape") {
        return Err(usage("give either an input file or a shape, not both"));
    }
    for prefix in ["data.", "model.", "train.", "ablate.", "eval."] {
        kv.ignore_prefix(prefix);
    }
    kv.reject_unused("settings").map_err(usage)?;

    let model = open_checkpoint(&a.checkpoint)?.model()?;
    let cloud: PointCloud = match &input {
        Some(path) => load_xyz(path)?,
        None => generate_shape(shape, points, seed)?,
    };
    let records = export_attention(&model, &cloud, layer)?;
    prepare_out(&a.common.out)?;
    let mut resolved = Kv::new();
    resolved.set("export.layer", layer);
    match &input {
        Some(path) => resolved.set("export.input", path.display()),
        None => {
            resolved.set("export.shape", shape);
            resolved.set("export.points", points);
            resolved.set("export.seed", seed);
        }
    }
    write_resolved(&a.common.out, "export-attention", &[resolved])?;
    fs::write(a.common.out.join(ATTENTION_FILE), attention_text(&records)).map_err(Error::Io)?;
    println!(
        "wrote {} attention records for layer {layer}",
        records.len()
    );
    Ok(())
}

fn dispatch(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::ExportAttention(a) => cmd_export_attention(a),
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(std::io::stderr(), "{f}");
            f.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_spec_round_trip() {
        let spec = DataSpec {
            source: DataSource::Shapes {
                classes: vec![ShapeClass::Cube, ShapeClass::Helix],
                per_class: 3,
                points: 64,
                seed: 9,
            },
            train_fraction: 0.5,
            split_seed: 4,
        };
        let kv = spec.to_kv();
        assert_eq!(DataSpec::from_kv(&kv).unwrap(), spec);
        assert!(kv.reject_unused("t").is_ok());
        let parts = DataSpec {
            source: DataSource::Parts {
                per_class: 2,
                points: 100,
                seed: 1,
            },
            ..DataSpec::default()
        };
        assert_eq!(DataSpec::from_kv(&parts.to_kv()).unwrap(), parts);
    }

    #[test]
    fn class_lists() {
        assert_eq!(parse_classes("3").unwrap(), ShapeClass::ALL[..3].to_vec());
        assert_eq!(parse_classes("all").unwrap().len(), 8);
        assert_eq!(
            parse_classes("torus,cube").unwrap(),
            vec![ShapeClass::Torus, ShapeClass::Cube]
        );
        let e = parse_classes("torus,blob").unwrap_err().to_string();
        assert!(e.contains("sphere") && e.contains("helix"), "{e}");
        assert!(parse_classes("9").is_err());
        assert!(parse_classes("cube,cube").is_err());
    }

    #[test]
    fn plan_round_trip_and_cells() {
        let plan = AblationPlan::default();
        assert_eq!(AblationPlan::from_kv(&plan.to_kv()).unwrap(), plan);
        let base = ModelConfig::mini_dgcnn(Head::Classify(8));
        let names = |g| {
            plan.cells(g, &base, 0.8)
                .into_iter()
                .map(|c| c.0)
                .collect::<Vec<_>>()
        };
        assert_eq!(
            names(Grid::DapVariant),
            ["baseline", "random", "dap1", "dap2", "dap4"]
        );
        assert_eq!(names(Grid::Integration), ["I1", "I2"]);
        assert_eq!(names(Grid::K), ["5", "10", "20", "40"]);
        assert_eq!(
            names(Grid::Split),
            ["80%", "60%", "40%", "20%", "10%", "5%", "1%"]
        );
        for (_, cfg, _) in plan.cells(Grid::K, &base, 0.8) {
            assert!(!cfg.dap_layers.is_empty());
        }
    }

    #[test]
    fn ablation_csv_round_trip() {
        let rows = vec![
            AblationRow {
                grid: Grid::K,
                cell: "5".into(),
                seed: 1,
                oa: 0.5,
                macc: 0.25,
            },
            AblationRow {
                grid: Grid::K,
                cell: "5".into(),
                seed: 2,
                oa: 0.7,
                macc: 0.5,
            },
        ];
        assert_eq!(parse_ablation_csv(&ablation_csv(&rows)).unwrap(), rows);
        let summary = ablation_summary(&rows);
        assert!(
            summary.lines().nth(1).unwrap().starts_with("k,5,2,0.6"),
            "{summary}"
        );
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["dapconv", "frobnicate"]), 1);
        assert_eq!(
            run(["dapconv", "train", "--out", "/nonexistent", "--bogus", "1"]),
            1
        );
        assert_eq!(run(["dapconv", "--help"]), 0);
    }
}
