use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde_json::json;

use ctseg::eval::RunReport;
use ctseg::experiment::{build_cohort, cross_validate, dose_ablation, reconstruct_gray, ExperimentConfig};
use ctseg::filters::FilterKind;
use ctseg::io::{
    decode_pgm, encode_pgm16, encode_pgm8, load_sinogram, load_volume, peek_dtype, save_sinogram, save_volume,
    LABEL_PALETTE,
};
use ctseg::phantom::{generate, PhantomSpec};
use ctseg::pipeline::{run_full, train_stage, StageId};
use ctseg::segmodel::{SliceSegmenter, SoftmaxModel};
use ctseg::tomo::{forward_project, DoseLevel, FbpFilter};
use ctseg::volume::{ClassId, Dims, FloatVolume, GrayVolume, Image2, LabelVolume, ViewAxis};
use ctseg::Error;

use crate::{Command, Common};

pub fn run(common: &Common, cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom(a) => phantom(common, a),
        Command::Project(a) => project(common, a),
        Command::Reconstruct(a) => reconstruct(common, a),
        Command::Train(a) => train(common, a),
        Command::Infer(a) => infer(common, a),
        Command::Evaluate(a) => evaluate(common, a),
        Command::Crossval(a) => crossval(common, a),
        Command::AblateDose(a) => ablate(common, a),
        Command::ExportSlices(a) => export(common, a),
        Command::Filter(a) => filter(common, a),
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text)
}

fn required_out(common: &Common, what: &str) -> Result<PathBuf> {
    common
        .out
        .clone()
        .ok_or_else(|| Error::Config(format!("--out is required ({what})")).into())
}

/// Experiment config from `--config`, defaults otherwise, with `--seed` applied.
fn load_config(path: Option<&Path>, common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_json(&read_text(p)?).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parse_pair(s: &str, what: &str) -> Result<(f64, f64), Error> {
    let bad = || Error::Config(format!("{what} must look like 'a,b', got '{s}'"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    /// Phantom spec JSON; defaults to the built-in anatomy
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Take the phantom section of an experiment config instead
    #[arg(long, conflicts_with = "spec")]
    pub config: Option<PathBuf>,
    /// Cubic grid edge; anatomy scales with it
    #[arg(long)]
    pub size: Option<usize>,
}

fn rescale(spec: &mut PhantomSpec, n: usize) {
    let old = spec.dims.nx.min(spec.dims.ny).min(spec.dims.nz) as f64;
    let s = n as f64 / old;
    spec.dims = Dims::cube(n);
    spec.compacta_thickness = (spec.compacta_thickness * s).max(2.0);
    spec.lacunae.radius = ((spec.lacunae.radius.0 * s).max(1.0), (spec.lacunae.radius.1 * s).max(1.5));
}

fn phantom(common: &Common, a: PhantomArgs) -> Result<()> {
    let mut spec = match (&a.spec, &a.config) {
        (Some(p), _) => serde_json::from_str::<PhantomSpec>(&read_text(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        (None, Some(p)) => load_config(Some(p), common)?.phantom,
        (None, None) => PhantomSpec::default(),
    };
    if let Some(n) = a.size {
        rescale(&mut spec, n);
    }
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let dir = required_out(common, "output directory")?;
    let ph = generate(&spec)?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    save_volume(&ph.attenuation, dir.join("phantom.vol"))?;
    save_volume(&ph.labels, dir.join("labels.vol"))?;
    write_json(&dir.join("spec.json"), &spec)?;
    println!("{}", json!({"phantom": dir.join("phantom.vol"), "labels": dir.join("labels.vol"), "dims": spec.dims.as_array()}));
    Ok(())
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    /// Attenuation volume (f32)
    #[arg(long)]
    pub input: PathBuf,
    /// Experiment config providing the acquisition section
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of projections over the 180 degree arc
    #[arg(long)]
    pub projections: Option<usize>,
    /// Detector bins (default: smallest odd count covering the diagonal)
    #[arg(long)]
    pub bins: Option<usize>,
}

fn project(common: &Common, a: ProjectArgs) -> Result<()> {
    let mut acq = load_config(a.config.as_deref(), common)?.acquisition;
    if let Some(n) = a.projections {
        acq.n_projections = n;
        acq.angular_step_deg = 180.0 / n as f64;
    }
    if a.bins.is_some() {
        acq.detector_bins = a.bins;
    }
    acq.validate()?;
    let vol: FloatVolume = load_volume(&a.input)?;
    let sino = forward_project(&vol, &acq)?;
    let out = required_out(common, "sinogram path")?;
    ensure_parent(&out)?;
    save_sinogram(&sino, &out)?;
    println!("{}", json!({"sinogram": out, "angles": sino.n_angles(), "bins": sino.n_bins(), "slices": sino.n_slices()}));
    Ok(())
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    /// Sinogram stack
    #[arg(long)]
    pub input: PathBuf,
    /// Experiment config JSON
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Keep every n-th projection: 1 (D1), 2 (D2) or 3 (D3)
    #[arg(long, default_value_t = 1)]
    pub dose: u8,
    /// Attenuation window mapped to 0..65535, as lo,hi
    #[arg(long, allow_hyphen_values = true)]
    pub window: Option<String>,
    /// Ramp filter: ramlak or hann
    #[arg(long)]
    pub filter: Option<String>,
    /// Slice size as nx,ny (default: square, edge = number of slices)
    #[arg(long)]
    pub size: Option<String>,
}

fn reconstruct(common: &Common, a: ReconstructArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), common)?;
    let dose = DoseLevel::new(a.dose)?;
    let window = match &a.window {
        Some(w) => parse_pair(w, "--window")?,
        None => cfg.acquisition.absorption_window,
    };
    let filter = match &a.filter {
        Some(f) => f.parse::<FbpFilter>()?,
        None => cfg.reconstruction_filter,
    };
    let sino = load_sinogram(&a.input)?;
    let (nx, ny) = match &a.size {
        Some(s) => {
            let (x, y) = parse_pair(s, "--size")?;
            if !(x >= 1.0 && y >= 1.0 && x.fract() == 0.0 && y.fract() == 0.0) {
                return Err(Error::Config(format!("--size must be two positive integers, got '{s}'")).into());
            }
            (x as usize, y as usize)
        }
        None => (sino.n_slices(), sino.n_slices()),
    };
    let gray = reconstruct_gray(&sino, Dims::new(nx, ny, sino.n_slices()), dose, filter, window)?;
    let out = required_out(common, "gray volume path")?;
    ensure_parent(&out)?;
    save_volume(&gray, &out)?;
    println!("{}", json!({"volume": out, "dose": dose.name(), "dims": gray.dims().as_array()}));
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Experiment config JSON
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// 1: atrium/ventricle/bulbus, 2: lacunary, 3: compacta
    #[arg(long)]
    pub stage: u8,
    /// Gray training volume (repeatable)
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    /// Ground-truth labels, one per --input
    #[arg(long, required = true)]
    pub labels: Vec<PathBuf>,
    /// Square tile edge in pixels
    #[arg(long)]
    pub tile: Option<usize>,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    pub lr: Option<f64>,
}

fn model_path(dir: &Path, stage: StageId) -> PathBuf {
    dir.join(format!("stage{}.model.json", stage.number()))
}

fn train(common: &Common, a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), common)?;
    let stage = StageId::try_from(a.stage)?;
    if a.input.len() != a.labels.len() {
        return Err(Error::Config(format!("{} --input volumes but {} --labels", a.input.len(), a.labels.len())).into());
    }
    {
        let sc = cfg.stage_mut(stage);
        if let Some(t) = a.tile {
            sc.tile_size = t;
        }
        if let Some(e) = a.epochs {
            sc.hyper.epochs = e;
        }
        if let Some(lr) = a.lr {
            sc.hyper.learning_rate = lr;
        }
    }
    cfg.validate()?;
    let grays: Vec<GrayVolume> = a.input.iter().map(load_volume).collect::<Result<_, _>>()?;
    let labels: Vec<LabelVolume> = a.labels.iter().map(load_volume).collect::<Result<_, _>>()?;
    let pairs: Vec<_> = grays.iter().zip(&labels).collect();
    let (model, meta) = train_stage(&cfg.pipeline(), stage, &pairs, cfg.seed)?;
    let out = match &common.out {
        Some(p) if p.extension().is_some_and(|e| e == "json") => p.clone(),
        Some(dir) => model_path(dir, stage),
        None => model_path(Path::new(&cfg.output_dir), stage),
    };
    write_bytes(&out, model.to_json(&meta) + "\n")?;
    println!(
        "{}",
        json!({
            "model": out,
            "stage": stage.number(),
            "epochs": meta.epochs_run,
            "final_loss": meta.train_loss.last(),
            "final_val_iou": meta.val_iou.last(),
        })
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Experiment config JSON
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Gray volume to segment
    #[arg(long)]
    pub input: PathBuf,
    /// Directory holding stage1/2/3.model.json (default: the config's output_dir)
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Run report destination
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Include wall-clock stage timings in the report (makes it run-dependent)
    #[arg(long)]
    pub timings: bool,
}

fn load_model(path: &Path) -> Result<SoftmaxModel> {
    let (m, _) = SoftmaxModel::from_json(&read_text(path)?).with_context(|| format!("reading {}", path.display()))?;
    Ok(m)
}

fn infer(common: &Common, a: InferArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), common)?;
    let dir = a.models.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let models = StageId::ALL
        .iter()
        .map(|&s| load_model(&model_path(&dir, s)))
        .collect::<Result<Vec<_>>>()?;
    let gray: GrayVolume = load_volume(&a.input)?;
    let segs: [&dyn SliceSegmenter; 3] = [&models[0], &models[1], &models[2]];
    let (seg, trace) = run_full(&cfg.pipeline(), segs, &gray, a.timings)?;
    let out = required_out(common, "segmentation path")?;
    ensure_parent(&out)?;
    save_volume(&seg, &out)?;
    if let Some(r) = &a.report {
        write_json(
            r,
            &json!({
                "seed": cfg.seed,
                "config": cfg.pipeline(),
                "trace": trace,
            }),
        )?;
    }
    println!("{}", json!({"segmentation": out, "histogram": trace.final_histogram}));
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Predicted label volume
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth label volume
    #[arg(long)]
    pub gt: PathBuf,
    /// Report destination (JSON)
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Count background in the weighted IoU
    #[arg(long)]
    pub include_background: bool,
    /// Dose level recorded in the report
    #[arg(long)]
    pub dose: Option<u8>,
}

fn evaluate(common: &Common, a: EvaluateArgs) -> Result<()> {
    let pred: LabelVolume = load_volume(&a.pred)?;
    let gt: LabelVolume = load_volume(&a.gt)?;
    let mut report = RunReport::new(&pred, &gt, a.include_background)?;
    report.seed = common.seed;
    report.dose = a.dose.map(DoseLevel::new).transpose()?;
    if let Some(r) = &a.report {
        write_json(r, &report)?;
    }
    println!("{}", json!({"weighted_iou": report.score.weighted_iou, "per_class_iou": report.score.per_class_iou}));
    Ok(())
}

#[derive(Args, Debug)]
pub struct CrossvalArgs {
    /// Experiment config JSON
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dose level 1, 2 or 3
    #[arg(long, default_value_t = 1)]
    pub dose: u8,
    /// Epochs for every stage
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn crossval(common: &Common, a: CrossvalArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), common)?;
    if let Some(e) = a.epochs {
        cfg.set_epochs(e);
    }
    let dose = DoseLevel::new(a.dose)?;
    cfg.doses = vec![dose];
    cfg.validate()?;
    let cohort = build_cohort(&cfg)?;
    let report = cross_validate(&cfg, &cohort, dose)?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    write_json(&dir.join("crossval.json"), &json!({"config": cfg, "report": report}))?;
    println!(
        "{}",
        json!({"dose": dose.name(), "mean": report.summary.mean, "std": report.summary.std, "folds": report.summary.scores})
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Experiment config JSON
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Epochs for every stage
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn ablate(common: &Common, a: AblateArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), common)?;
    if let Some(e) = a.epochs {
        cfg.set_epochs(e);
    }
    let mut doses = cfg.doses.clone();
    for d in DoseLevel::ALL {
        if !doses.contains(&d) {
            doses.push(d);
        }
    }
    doses.sort();
    cfg.doses = doses;
    cfg.validate()?;
    let cohort = build_cohort(&cfg)?;
    let matrix = dose_ablation(&cfg, &cohort)?;
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    write_json(&dir.join("dose_matrix.json"), &json!({"config": cfg, "matrix": matrix}))?;
    let table = matrix.to_table();
    write_bytes(&dir.join("dose_matrix.txt"), &table)?;
    print!("{table}");
    Ok(())
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Volume of any supported dtype
    #[arg(long)]
    pub input: PathBuf,
    /// View: xy, xz or yz
    #[arg(long, default_value = "xy")]
    pub axis: String,
    /// Single slice; without it every slice is written into the --out directory
    #[arg(long)]
    pub index: Option<usize>,
}

fn to_u8_slices(path: &Path, axis: ViewAxis) -> Result<Vec<Image2<u8>>> {
    Ok(match peek_dtype(path)?.as_str() {
        "u8" => {
            let v: LabelVolume = load_volume(path)?;
            v.slices(axis).iter().map(|s| s.map(|c: ClassId| LABEL_PALETTE[c as usize])).collect()
        }
        "u16" => {
            let v: GrayVolume = load_volume(path)?;
            v.slices(axis).iter().map(|s| s.map(|g| (g >> 8) as u8)).collect()
        }
        "f32" => {
            let v: FloatVolume = load_volume(path)?;
            let lo = v.data().iter().copied().fold(f32::INFINITY, f32::min);
            let hi = v.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            v.slices(axis)
                .iter()
                .map(|s| s.map(|x| (255.0 * (x - lo) / span).round().clamp(0.0, 255.0) as u8))
                .collect()
        }
        other => return Err(Error::Format(format!("unsupported dtype '{other}'")).into()),
    })
}

fn export(common: &Common, a: ExportArgs) -> Result<()> {
    let axis: ViewAxis = a.axis.parse()?;
    let out = required_out(common, "PGM file or directory")?;
    let slices = to_u8_slices(&a.input, axis)?;
    match a.index {
        Some(i) => {
            let img = slices.get(i).ok_or(Error::Bounds {
                axis: axis.name(),
                index: i,
                extent: slices.len(),
            })?;
            write_bytes(&out, encode_pgm8(img))?;
        }
        None => {
            for (i, img) in slices.iter().enumerate() {
                write_bytes(&out.join(format!("{}_{i:04}.pgm", axis.name())), encode_pgm8(img))?;
            }
        }
    }
    println!("{}", json!({"axis": axis.name(), "slices": a.index.map_or(slices.len(), |_| 1), "out": out}));
    Ok(())
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    /// PGM image (P2 or P5, 8 or 16 bit)
    #[arg(long)]
    pub input: PathBuf,
    /// unsharp, median or hist_eq
    #[arg(long)]
    pub filter: String,
    /// Experiment config JSON
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Unsharp blur sigma
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Unsharp gain
    #[arg(long)]
    pub amount: Option<f64>,
    /// Median radius
    #[arg(long)]
    pub radius: Option<usize>,
    /// Histogram bins for hist_eq
    #[arg(long)]
    pub bins: Option<usize>,
}

fn filter(common: &Common, a: FilterArgs) -> Result<()> {
    let mut fc = load_config(a.config.as_deref(), common)?.filters;
    if let Some(s) = a.sigma {
        fc.unsharp.sigma = s;
    }
    if let Some(x) = a.amount {
        fc.unsharp.amount = x;
    }
    if let Some(r) = a.radius {
        fc.median_radius = r;
    }
    if let Some(b) = a.bins {
        fc.histeq_bins = b;
    }
    fc.validate()?;
    let kind: FilterKind = a.filter.parse()?;
    let bytes = fs::read(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let img = decode_pgm(&bytes)?;
    let out_img = kind.apply(&img, &fc);
    let out = required_out(common, "PGM path")?;
    write_bytes(&out, encode_pgm16(&out_img))?;
    println!("{}", json!({"filter": a.filter, "width": img.width, "height": img.height, "out": out}));
    Ok(())
}

