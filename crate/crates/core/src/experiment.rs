//! Experiment configuration and the end-to-end drivers: phantom cohort,
//! acquisition at several doses, cross-validated pipeline runs and the dose
//! ablation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{dose_matrix, kfold_cv, score, DoseMatrix, DoseStack, FoldSummary, Score, TrainSet};
use crate::filters::FilterConfig;
use crate::phantom::{generate, jittered_spec, Phantom, PhantomSpec};
use crate::pipeline::{run_full, train_all, PipelineConfig, StageConfig, StageId};
use crate::segmodel::TrainProtocol;
use crate::tomo::{fbp_reconstruct, forward_project, normalize_to_u16, subsample_dose, AcquisitionConfig, DoseLevel, FbpFilter, SinogramStack};
use crate::volume::{Dims, GrayVolume, LabelVolume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub include_background: bool,
    pub cohort_size: usize,
    pub folds: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            include_background: false,
            cohort_size: 3,
            folds: 3,
        }
    }
}

/// The whole experiment in one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub phantom: PhantomSpec,
    pub acquisition: AcquisitionConfig,
    pub reconstruction_filter: FbpFilter,
    pub doses: Vec<DoseLevel>,
    pub filters: FilterConfig,
    pub stages: Vec<StageConfig>,
    pub protocol: TrainProtocol,
    pub mask_dilation: usize,
    pub eval: EvalOptions,
    pub output_dir: String,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        ExperimentConfig {
            phantom: PhantomSpec::default(),
            acquisition: AcquisitionConfig::default(),
            reconstruction_filter: FbpFilter::RamLak,
            doses: DoseLevel::ALL.to_vec(),
            filters: p.filters,
            stages: p.stages,
            protocol: p.protocol,
            mask_dilation: p.mask_dilation,
            eval: EvalOptions::default(),
            output_dir: "out".into(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates; unknown keys are rejected.
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(json).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.acquisition.validate()?;
        self.pipeline().validate()?;
        if self.doses.is_empty() {
            return Err(Error::Config("at least one dose level is required".into()));
        }
        if self.eval.folds != self.eval.cohort_size || self.eval.folds < 2 {
            return Err(Error::Config(format!(
                "folds ({}) must equal cohort_size ({}) and be at least 2",
                self.eval.folds, self.eval.cohort_size
            )));
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            filters: self.filters,
            stages: self.stages.clone(),
            protocol: self.protocol,
            mask_dilation: self.mask_dilation,
        }
    }

    pub fn set_epochs(&mut self, epochs: usize) {
        for s in &mut self.stages {
            s.hyper.epochs = epochs;
        }
    }

    pub fn stage_mut(&mut self, id: StageId) -> &mut StageConfig {
        &mut self.stages[id.index()]
    }
}

/// FBP at `dose` followed by the fixed-window 16-bit mapping.
pub fn reconstruct_gray(
    sino: &SinogramStack,
    dims: Dims,
    dose: DoseLevel,
    filter: FbpFilter,
    window: (f64, f64),
) -> Result<GrayVolume> {
    let sub = subsample_dose(sino, dose);
    normalize_to_u16(&fbp_reconstruct(&sub, dims, filter)?, window)
}

/// Projects a phantom once and reconstructs it at each dose.
pub fn acquire(phantom: &Phantom, cfg: &ExperimentConfig) -> Result<DoseStack> {
    let sino = forward_project(&phantom.attenuation, &cfg.acquisition)?;
    let dims = phantom.attenuation.dims();
    let gray = cfg
        .doses
        .par_iter()
        .map(|&d| {
            reconstruct_gray(&sino, dims, d, cfg.reconstruction_filter, cfg.acquisition.absorption_window).map(|g| (d, g))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(DoseStack {
        labels: phantom.labels.clone(),
        gray,
    })
}

/// Generates and acquires every cohort member.
pub fn build_cohort(cfg: &ExperimentConfig) -> Result<Vec<DoseStack>> {
    (0..cfg.eval.cohort_size)
        .into_par_iter()
        .map(|i| acquire(&generate(&jittered_spec(&cfg.phantom, i))?, cfg))
        .collect()
}

/// Training seed for one job.
pub fn job_seed(seed: u64, row: usize, fold: usize) -> u64 {
    seed.wrapping_add(1_000_003 * row as u64).wrapping_add(fold as u64)
}

/// Per-fold scores of a leave-one-stack-out run at a single dose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub dose: DoseLevel,
    pub seed: u64,
    pub summary: FoldSummary,
    pub folds: Vec<Score>,
}

/// Leave-one-stack-out: train all stages on the other members at `dose` and
/// score the full pipeline on the held-out member at the same dose.
pub fn cross_validate(cfg: &ExperimentConfig, cohort: &[DoseStack], dose: DoseLevel) -> Result<CvReport> {
    let pcfg = cfg.pipeline();
    let include_bg = cfg.eval.include_background;
    let fold_scores = std::sync::Mutex::new(vec![None; cohort.len()]);
    let summary = kfold_cv(
        cohort,
        cfg.eval.folds,
        |fold, train: &[&DoseStack]| {
            let pairs = train
                .iter()
                .map(|m| Ok((m.at(dose)?, &m.labels)))
                .collect::<Result<Vec<(&GrayVolume, &LabelVolume)>>>()?;
            train_all(&pcfg, &pairs, job_seed(cfg.seed, 0, fold)).map(|m| (fold, m))
        },
        |(fold, models), held| {
            let (pred, _) = run_full(&pcfg, models.segmenters(), held.at(dose)?, false)?;
            let s = score(&pred, &held.labels, include_bg)?;
            let w = s.weighted_iou;
            fold_scores.lock().expect("no poisoning")[*fold] = Some(s);
            Ok(w)
        },
    )?;
    let folds = fold_scores.into_inner().expect("no poisoning").into_iter().map(|s| s.expect("every fold scored")).collect();
    Ok(CvReport {
        dose,
        seed: cfg.seed,
        summary,
        folds,
    })
}

/// Weighted-IoU matrix over training dose sets D1, D2, D3, D1+D2 and the
/// configured test doses.
pub fn dose_ablation(cfg: &ExperimentConfig, cohort: &[DoseStack]) -> Result<DoseMatrix> {
    let pcfg = cfg.pipeline();
    let include_bg = cfg.eval.include_background;
    if cohort.len() != cfg.eval.folds {
        return Err(Error::Config(format!(
            "cohort of {} members for {} folds",
            cohort.len(),
            cfg.eval.folds
        )));
    }
    dose_matrix(
        cohort,
        &TrainSet::standard_rows(),
        &cfg.doses,
        |row, fold, pairs| train_all(&pcfg, pairs, job_seed(cfg.seed, row, fold)),
        |models, gray, gt| {
            let (pred, _) = run_full(&pcfg, models.segmenters(), gray, false)?;
            Ok(score(&pred, gt, include_bg)?.weighted_iou)
        },
    )
}
