//! Three-stage segmentation: a 4-class region model, two binary models run
//! inside the ventricle, tri-view fusion with hole filling, and the rule-based
//! ensemble that merges everything into the final 6-class volume.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::histogram_map;
use crate::filters::{dilate_mask, fill_holes_3d, mode_fuse, FilterConfig, FilterKind, Tiebreak};
use crate::segmodel::{predict_volume, train, Hyper, SliceSegmenter, SoftmaxModel, TrainProtocol, TrainStack, TrainingMeta, N_FEATURES};
use crate::volume::{ClassId, Dims, GrayVolume, LabelVolume, ViewAxis, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum StageId {
    /// Background / atrium / ventricle / bulbus.
    Regions = 1,
    /// Lacunary spaces inside the ventricle.
    Lacunary = 2,
    /// Compacta inside the ventricle.
    Compacta = 3,
}

impl StageId {
    pub const ALL: [StageId; 3] = [StageId::Regions, StageId::Lacunary, StageId::Compacta];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize - 1
    }

    /// Labels the stage's model predicts.
    pub fn classes(self) -> Vec<ClassId> {
        match self {
            StageId::Regions => vec![ClassId::Background, ClassId::Atrium, ClassId::Ventricle, ClassId::Bulbus],
            StageId::Lacunary => vec![ClassId::Ventricle, ClassId::Lacunary],
            StageId::Compacta => vec![ClassId::Ventricle, ClassId::Compacta],
        }
    }

    /// Ground-truth label as seen by this stage.
    pub fn target(self, gt: ClassId) -> ClassId {
        match (self, gt) {
            (StageId::Regions, ClassId::Compacta | ClassId::Lacunary) => ClassId::Ventricle,
            (StageId::Regions, c) => c,
            (StageId::Lacunary, ClassId::Lacunary) => ClassId::Lacunary,
            (StageId::Compacta, ClassId::Compacta) => ClassId::Compacta,
            _ => ClassId::Ventricle,
        }
    }

    pub fn masked(self) -> bool {
        self != StageId::Regions
    }
}

impl TryFrom<u8> for StageId {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(StageId::Regions),
            2 => Ok(StageId::Lacunary),
            3 => Ok(StageId::Compacta),
            _ => Err(Error::Config(format!("stage must be 1, 2 or 3, got {v}"))),
        }
    }
}

impl From<StageId> for u8 {
    fn from(s: StageId) -> u8 {
        s.number()
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage{}", self.number())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: StageId,
    pub tile_size: usize,
    #[serde(default)]
    pub filters: Vec<FilterKind>,
    pub mask_to_ventricle: bool,
    #[serde(default)]
    pub hyper: Hyper,
}

impl StageConfig {
    pub fn default_for(stage: StageId) -> Self {
        StageConfig {
            stage,
            tile_size: if stage == StageId::Regions { 400 } else { 224 },
            filters: if stage == StageId::Lacunary { vec![FilterKind::Unsharp] } else { vec![] },
            mask_to_ventricle: stage.masked(),
            hyper: Hyper::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask_to_ventricle != self.stage.masked() {
            return Err(Error::Config(format!(
                "{}: mask_to_ventricle must be {}",
                self.stage,
                self.stage.masked()
            )));
        }
        if self.tile_size == 0 {
            return Err(Error::Config(format!("{}: tile_size must be positive", self.stage)));
        }
        let h = &self.hyper;
        if !(h.learning_rate > 0.0 && h.learning_rate.is_finite()) || h.batch_size == 0 || !(h.l2 >= 0.0) {
            return Err(Error::Config(format!("{}: invalid optimizer settings", self.stage)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub filters: FilterConfig,
    pub stages: Vec<StageConfig>,
    /// Shared training schedule; each stage substitutes its own tile size.
    pub protocol: TrainProtocol,
    /// Box dilation (voxels) of the ventricle mask before cropping.
    pub mask_dilation: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            filters: FilterConfig::default(),
            stages: StageId::ALL.into_iter().map(StageConfig::default_for).collect(),
            protocol: TrainProtocol::default(),
            mask_dilation: 8,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.filters.validate()?;
        self.protocol.validate()?;
        if self.stages.len() != 3 || self.stages.iter().zip(StageId::ALL).any(|(s, id)| s.stage != id) {
            return Err(Error::Config("stages must list stage 1, 2 and 3 in order".into()));
        }
        self.stages.iter().try_for_each(StageConfig::validate)
    }

    pub fn stage(&self, id: StageId) -> &StageConfig {
        &self.stages[id.index()]
    }

    pub fn stage_mut(&mut self, id: StageId) -> &mut StageConfig {
        &mut self.stages[id.index()]
    }

    /// Sets the epoch count of every stage.
    pub fn set_epochs(&mut self, epochs: usize) {
        for s in &mut self.stages {
            s.hyper.epochs = epochs;
        }
    }
}

/// Applies `filters` in order to every axial slice.
pub fn preprocess(vol: &GrayVolume, filters: &[FilterKind], cfg: &FilterConfig) -> Result<GrayVolume> {
    if filters.is_empty() {
        return Ok(vol.clone());
    }
    let slices: Vec<_> = vol
        .slices(ViewAxis::Xy)
        .into_par_iter()
        .map(|s| filters.iter().fold(s, |img, f| f.apply(&img, cfg)))
        .collect();
    Volume::restack(ViewAxis::Xy, &slices, vol.voxel_size())
}

/// Voxels belonging to the ventricle in either a ground-truth or a stage-1
/// volume (ventricle, compacta and lacunary labels).
pub fn ventricle_region(labels: &LabelVolume) -> Vec<bool> {
    labels
        .data()
        .iter()
        .map(|c| matches!(c, ClassId::Ventricle | ClassId::Compacta | ClassId::Lacunary))
        .collect()
}

/// Axis-aligned box `[lo, lo + dims)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub origin: [usize; 3],
    pub dims: Dims,
}

pub fn bounding_box(mask: &[bool], dims: Dims) -> Option<Region> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        any = true;
        let p = [i % dims.nx, (i / dims.nx) % dims.ny, i / (dims.nx * dims.ny)];
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    any.then(|| Region {
        origin: lo,
        dims: Dims::new(hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1),
    })
}

pub fn crop<T: Copy>(vol: &Volume<T>, r: Region) -> Result<Volume<T>> {
    crop_slice(vol.data(), vol.dims(), r).and_then(|d| Volume::new(r.dims, vol.voxel_size(), d))
}

fn crop_slice<T: Copy>(data: &[T], dims: Dims, r: Region) -> Result<Vec<T>> {
    let [x0, y0, z0] = r.origin;
    if x0 + r.dims.nx > dims.nx || y0 + r.dims.ny > dims.ny || z0 + r.dims.nz > dims.nz {
        return Err(Error::Shape(format!("crop region exceeds {dims}")));
    }
    let mut out = Vec::with_capacity(r.dims.len());
    for z in z0..z0 + r.dims.nz {
        for y in y0..y0 + r.dims.ny {
            let start = dims.index(x0, y, z);
            out.extend_from_slice(&data[start..start + r.dims.nx]);
        }
    }
    Ok(out)
}

/// Writes `part` into `dst` at `r.origin`.
pub fn paste<T: Copy>(dst: &mut [T], dims: Dims, part: &[T], r: Region) {
    let [x0, y0, z0] = r.origin;
    for z in 0..r.dims.nz {
        for y in 0..r.dims.ny {
            let src = r.dims.index(0, y, z);
            let d = dims.index(x0, y0 + y, z0 + z);
            dst[d..d + r.dims.nx].copy_from_slice(&part[src..src + r.dims.nx]);
        }
    }
}

/// The ventricle image part fed to the masked stages.
#[derive(Debug, Clone)]
pub struct MaskedInput {
    pub region: Region,
    /// Cropped, out-of-mask pixels zeroed, stage filters applied.
    pub gray: GrayVolume,
    /// Undilated mask within the crop.
    pub inside: Vec<bool>,
}

/// Crops `vol` to the bounding box of the dilated mask and zeroes everything
/// outside the dilated mask. `None` when the mask is empty.
pub fn masked_input(
    vol: &GrayVolume,
    mask: &[bool],
    dilation: usize,
    filters: &[FilterKind],
    fcfg: &FilterConfig,
) -> Result<Option<MaskedInput>> {
    let dims = vol.dims();
    if mask.len() != dims.len() {
        return Err(Error::Shape(format!("mask of {} voxels for a {dims} volume", mask.len())));
    }
    let grown = dilate_mask(mask, dims, dilation);
    let Some(region) = bounding_box(&grown, dims) else {
        return Ok(None);
    };
    let grown = crop_slice(&grown, dims, region)?;
    let inside = crop_slice(mask, dims, region)?;
    let data = crop_slice(vol.data(), dims, region)?
        .into_iter()
        .zip(&grown)
        .map(|(v, &g)| if g { v } else { 0 })
        .collect();
    let gray = preprocess(&Volume::new(region.dims, vol.voxel_size(), data)?, filters, fcfg)?;
    Ok(Some(MaskedInput { region, gray, inside }))
}

/// Training volume for one stage derived from a ground-truth pair.
pub struct StageData {
    pub gray: GrayVolume,
    pub labels: LabelVolume,
    pub valid: Option<Vec<bool>>,
}

pub fn stage_data(cfg: &PipelineConfig, stage: StageId, gray: &GrayVolume, gt: &LabelVolume) -> Result<Option<StageData>> {
    if !gray.same_dims(gt) {
        return Err(Error::Shape(format!("gray {} vs labels {}", gray.dims(), gt.dims())));
    }
    let sc = cfg.stage(stage);
    if !stage.masked() {
        return Ok(Some(StageData {
            gray: preprocess(gray, &sc.filters, &cfg.filters)?,
            labels: gt.map(|c| stage.target(c)),
            valid: None,
        }));
    }
    let Some(m) = masked_input(gray, &ventricle_region(gt), cfg.mask_dilation, &sc.filters, &cfg.filters)? else {
        return Ok(None);
    };
    let labels = crop(gt, m.region)?.map(|c| stage.target(c));
    Ok(Some(StageData {
        gray: m.gray,
        labels,
        valid: Some(m.inside),
    }))
}

pub fn stage_seed(seed: u64, stage: StageId) -> u64 {
    seed ^ (stage.number() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains one stage's model on ground-truth pairs.
pub fn train_stage(
    cfg: &PipelineConfig,
    stage: StageId,
    stacks: &[(&GrayVolume, &LabelVolume)],
    seed: u64,
) -> Result<(SoftmaxModel, TrainingMeta)> {
    cfg.validate()?;
    let sc = cfg.stage(stage);
    let data = stacks
        .iter()
        .map(|(g, l)| stage_data(cfg, stage, g, l))
        .collect::<Result<Vec<_>>>()?;
    let data: Vec<StageData> = data.into_iter().flatten().collect();
    if data.is_empty() {
        return Err(Error::Training(format!("{stage}: no ventricle voxels in the training labels")));
    }
    let train_stacks: Vec<TrainStack> = data
        .iter()
        .map(|d| TrainStack {
            gray: &d.gray,
            labels: &d.labels,
            valid: d.valid.as_deref(),
        })
        .collect();
    let proto = TrainProtocol {
        tile_size: sc.tile_size,
        seed: stage_seed(seed, stage),
        ..cfg.protocol
    };
    let classes = stage.classes();
    let model = SoftmaxModel::new(&classes, N_FEATURES, sc.hyper)?;
    let (model, mut meta) = train(model, &train_stacks, &proto, &classes)?;
    meta.stage = Some(stage.number());
    Ok((model, meta))
}

/// Trained models for all three stages.
#[derive(Debug, Clone, PartialEq)]
pub struct StageModels {
    pub models: [SoftmaxModel; 3],
    pub meta: [TrainingMeta; 3],
}

impl StageModels {
    pub fn segmenters(&self) -> [&dyn SliceSegmenter; 3] {
        [&self.models[0], &self.models[1], &self.models[2]]
    }
}

pub fn train_all(cfg: &PipelineConfig, stacks: &[(&GrayVolume, &LabelVolume)], seed: u64) -> Result<StageModels> {
    let trained = StageId::ALL
        .par_iter()
        .map(|&s| train_stage(cfg, s, stacks, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut it = trained.into_iter();
    let mut next = || it.next().expect("three stages");
    let (m1, t1) = next();
    let (m2, t2) = next();
    let (m3, t3) = next();
    Ok(StageModels {
        models: [m1, m2, m3],
        meta: [t1, t2, t3],
    })
}

fn check_classes(stage: StageId, model: &dyn SliceSegmenter) -> Result<()> {
    let mut got = model.classes().to_vec();
    got.sort();
    if got != stage.classes() {
        return Err(Error::Model(format!(
            "{stage} expects classes {:?}, model has {:?}",
            stage.classes(),
            got
        )));
    }
    Ok(())
}

fn tri_view(model: &dyn SliceSegmenter, vol: &GrayVolume, inside: Option<&[bool]>) -> Result<LabelVolume> {
    let views = ViewAxis::ALL
        .iter()
        .map(|&axis| {
            let pred = predict_volume(model, vol, axis)?;
            Ok(match inside {
                None => pred,
                Some(m) => {
                    let data = pred
                        .data()
                        .iter()
                        .zip(m)
                        .map(|(&c, &keep)| if keep { c } else { ClassId::Background })
                        .collect();
                    pred.with_data(data)?
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // views are XY, XZ, YZ; XY decides three-way disagreements
    let fused = mode_fuse(&views[0], &views[1], &views[2], Tiebreak::A)?;
    Ok(fill_holes_3d(&fused))
}

/// Runs one stage on a full gray volume.
///
/// Masked stages need `ventricle_mask`; their output is Background outside the
/// mask and the stage's negative (Ventricle) or positive class inside.
pub fn run_stage(
    cfg: &PipelineConfig,
    stage: StageId,
    model: &dyn SliceSegmenter,
    vol: &GrayVolume,
    ventricle_mask: Option<&[bool]>,
) -> Result<LabelVolume> {
    let sc = cfg.stage(stage);
    sc.validate()?;
    check_classes(stage, model)?;
    if !sc.mask_to_ventricle {
        let pre = preprocess(vol, &sc.filters, &cfg.filters)?;
        return tri_view(model, &pre, None);
    }
    let mask = ventricle_mask.ok_or_else(|| Error::Config(format!("{stage} requires a ventricle mask")))?;
    let dims = vol.dims();
    let mut out = vec![ClassId::Background; dims.len()];
    if let Some(m) = masked_input(vol, mask, cfg.mask_dilation, &sc.filters, &cfg.filters)? {
        let part = tri_view(model, &m.gray, Some(&m.inside))?;
        paste(&mut out, dims, part.data(), m.region);
    }
    Volume::new(dims, vol.voxel_size(), out)
}

/// Final label for one voxel, applying in order: atrium always wins; bulbus
/// beats lacunary and compacta; compacta beats ventricle and lacunary;
/// lacunary beats ventricle; otherwise the stage-1 label stands. Stage-1
/// background stays background.
pub fn ensemble_rule(stage1: ClassId, lacunary: bool, compacta: bool) -> ClassId {
    match stage1 {
        ClassId::Atrium => ClassId::Atrium,
        ClassId::Bulbus => ClassId::Bulbus,
        ClassId::Ventricle if compacta => ClassId::Compacta,
        ClassId::Ventricle if lacunary => ClassId::Lacunary,
        other => other,
    }
}

pub fn ensemble(stage1: &LabelVolume, lacunary: &LabelVolume, compacta: &LabelVolume) -> Result<LabelVolume> {
    if !stage1.same_dims(lacunary) || !stage1.same_dims(compacta) {
        return Err(Error::Shape(format!(
            "ensemble inputs {}, {}, {}",
            stage1.dims(),
            lacunary.dims(),
            compacta.dims()
        )));
    }
    let data = stage1
        .data()
        .iter()
        .zip(lacunary.data())
        .zip(compacta.data())
        .map(|((&s, &l), &c)| ensemble_rule(s, l == ClassId::Lacunary, c == ClassId::Compacta))
        .collect();
    stage1.with_data(data)
}

/// Label histograms of each intermediate and, optionally, wall-clock timings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub stage_histograms: BTreeMap<String, BTreeMap<String, u64>>,
    pub final_histogram: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub timings_s: BTreeMap<String, f64>,
}

/// Stage 1, ventricle mask, stages 2 and 3 (independently), ensemble.
pub fn run_full(
    cfg: &PipelineConfig,
    models: [&dyn SliceSegmenter; 3],
    vol: &GrayVolume,
    record_timings: bool,
) -> Result<(LabelVolume, PipelineTrace)> {
    cfg.validate()?;
    let mut trace = PipelineTrace::default();
    let t0 = Instant::now();
    let s1 = run_stage(cfg, StageId::Regions, models[0], vol, None)?;
    let t1 = t0.elapsed().as_secs_f64();
    let mask = ventricle_region(&s1);
    let timed = |stage: StageId, model: &dyn SliceSegmenter| {
        let t = Instant::now();
        run_stage(cfg, stage, model, vol, Some(&mask)).map(|v| (v, t.elapsed().as_secs_f64()))
    };
    let (lac, comp) = rayon::join(|| timed(StageId::Lacunary, models[1]), || timed(StageId::Compacta, models[2]));
    let ((lac, t2), (comp, t3)) = (lac?, comp?);
    let t = Instant::now();
    let out = ensemble(&s1, &lac, &comp)?;
    let t4 = t.elapsed().as_secs_f64();

    for (stage, v) in StageId::ALL.iter().zip([&s1, &lac, &comp]) {
        trace.stage_histograms.insert(stage.to_string(), histogram_map(v));
    }
    trace.final_histogram = histogram_map(&out);
    if record_timings {
        for (k, v) in [("stage1", t1), ("stage2", t2), ("stage3", t3), ("ensemble", t4)] {
            trace.timings_s.insert(k.to_string(), v);
        }
    }
    Ok((out, trace))
}
