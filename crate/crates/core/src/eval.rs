//! Overlap metrics, frequency-weighted IoU, leave-one-stack-out cross
//! validation and the dose-ablation matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tomo::DoseLevel;
use crate::volume::{ClassId, GrayVolume, LabelVolume};

/// Per-class intersection, union and ground-truth counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Overlap {
    pub intersection: [u64; ClassId::COUNT],
    pub union: [u64; ClassId::COUNT],
    pub gt_count: [u64; ClassId::COUNT],
}

impl Overlap {
    pub fn between(pred: &LabelVolume, gt: &LabelVolume) -> Result<Overlap> {
        if !pred.same_dims(gt) {
            return Err(Error::Shape(format!("prediction {} vs ground truth {}", pred.dims(), gt.dims())));
        }
        let mut o = Overlap::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            let (p, g) = (p as usize, g as usize);
            o.gt_count[g] += 1;
            o.union[g] += 1;
            if p == g {
                o.intersection[g] += 1;
            } else {
                o.union[p] += 1;
            }
        }
        Ok(o)
    }

    /// 1.0 when the class is absent from both volumes.
    pub fn iou(&self, class: ClassId) -> f64 {
        let c = class as usize;
        if self.union[c] == 0 {
            1.0
        } else {
            self.intersection[c] as f64 / self.union[c] as f64
        }
    }
}

pub fn iou(pred: &LabelVolume, gt: &LabelVolume, class: ClassId) -> Result<f64> {
    Ok(Overlap::between(pred, gt)?.iou(class))
}

/// Per-class scores and the frequency-weighted total for one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub weighted_iou: f64,
    pub per_class_iou: BTreeMap<String, f64>,
    /// Ground-truth frequency of each included class present in the ground
    /// truth; sums to 1.
    pub frequencies: BTreeMap<String, f64>,
    pub include_background: bool,
}

/// `sum_c f_c * IoU_c` over included classes, with `f_c` the class's share of
/// included ground-truth voxels.
pub fn weighted_iou(pred: &LabelVolume, gt: &LabelVolume, include_background: bool) -> Result<f64> {
    Ok(score(pred, gt, include_background)?.weighted_iou)
}

pub fn score(pred: &LabelVolume, gt: &LabelVolume, include_background: bool) -> Result<Score> {
    let o = Overlap::between(pred, gt)?;
    let included: Vec<ClassId> = ClassId::ALL
        .into_iter()
        .filter(|&c| include_background || c != ClassId::Background)
        .collect();
    let total: u64 = included.iter().map(|&c| o.gt_count[c as usize]).sum();
    if total == 0 {
        return Err(Error::Metric("no included class occurs in the ground truth".into()));
    }
    let mut weighted = 0.0;
    let mut per_class_iou = BTreeMap::new();
    let mut frequencies = BTreeMap::new();
    for &c in &included {
        let n = o.gt_count[c as usize];
        let iou = o.iou(c);
        per_class_iou.insert(c.name().to_string(), iou);
        if n > 0 {
            let f = n as f64 / total as f64;
            frequencies.insert(c.name().to_string(), f);
            weighted += f * iou;
        }
    }
    Ok(Score {
        weighted_iou: weighted.clamp(0.0, 1.0),
        per_class_iou,
        frequencies,
        include_background,
    })
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for a single
/// value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl FoldSummary {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&scores);
        FoldSummary { scores, mean, std }
    }
}

/// Leave-one-out cross validation over `cohort`: fold `i` trains on every
/// member except `i` (in cohort order) and evaluates on member `i`.
pub fn kfold_cv<T, M, TF, EF>(cohort: &[T], k: usize, train_fn: TF, eval_fn: EF) -> Result<FoldSummary>
where
    T: Sync,
    M: Send,
    TF: Fn(usize, &[&T]) -> Result<M> + Sync,
    EF: Fn(&M, &T) -> Result<f64> + Sync,
{
    if k != cohort.len() || k < 2 {
        return Err(Error::Config(format!(
            "k = {k} must equal the cohort size ({}) and be at least 2",
            cohort.len()
        )));
    }
    let scores = (0..k)
        .into_par_iter()
        .map(|fold| {
            let train: Vec<&T> = cohort.iter().enumerate().filter(|&(i, _)| i != fold).map(|(_, t)| t).collect();
            let model = train_fn(fold, &train)?;
            eval_fn(&model, &cohort[fold])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldSummary::from_scores(scores))
}

/// One cohort member reconstructed at several doses.
#[derive(Debug, Clone)]
pub struct DoseStack {
    pub labels: LabelVolume,
    pub gray: BTreeMap<DoseLevel, GrayVolume>,
}

impl DoseStack {
    pub fn at(&self, dose: DoseLevel) -> Result<&GrayVolume> {
        self.gray
            .get(&dose)
            .ok_or_else(|| Error::Data(format!("no reconstruction at dose {dose}")))
    }
}

/// A training set made of one or more doses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSet(pub Vec<DoseLevel>);

impl TrainSet {
    pub fn name(&self) -> String {
        self.0.iter().map(|d| d.name()).collect::<Vec<_>>().join("+")
    }

    /// D1, D2, D3 and D1+D2.
    pub fn standard_rows() -> Vec<TrainSet> {
        let [d1, d2, d3] = DoseLevel::ALL;
        vec![TrainSet(vec![d1]), TrainSet(vec![d2]), TrainSet(vec![d3]), TrainSet(vec![d1, d2])]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseMatrix {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    /// `cells[row][column]`.
    pub cells: Vec<Vec<FoldSummary>>,
}

impl DoseMatrix {
    pub fn mean(&self, row: usize, col: usize) -> f64 {
        self.cells[row][col].mean
    }

    pub fn row_min(&self, row: usize) -> f64 {
        self.cells[row].iter().map(|c| c.mean).fold(f64::INFINITY, f64::min)
    }

    /// Aligned text table of mean ± std in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let w0 = self.rows.iter().map(|r| r.len()).max().unwrap_or(0).max("train \\ test".len());
        let _ = write!(out, "{:<w0$}", "train \\ test");
        for c in &self.columns {
            let _ = write!(out, "  {c:>15}");
        }
        out.push('\n');
        for (r, name) in self.rows.iter().enumerate() {
            let _ = write!(out, "{name:<w0$}");
            for cell in &self.cells[r] {
                let _ = write!(out, "  {:>15}", format!("{:.1} ± {:.1}", 100.0 * cell.mean, 100.0 * cell.std));
            }
            out.push('\n');
        }
        out
    }
}

/// Weighted-IoU matrix over (training dose set, test dose).
///
/// Each row is cross-validated leave-one-stack-out: per fold a model is
/// trained once on the other members' reconstructions at every dose of the
/// row, then scored on the held-out member at each test dose.
pub fn dose_matrix<M, TF, EF>(
    cohort: &[DoseStack],
    rows: &[TrainSet],
    test_doses: &[DoseLevel],
    train_fn: TF,
    eval_fn: EF,
) -> Result<DoseMatrix>
where
    M: Send + Sync,
    TF: Fn(usize, usize, &[(&GrayVolume, &LabelVolume)]) -> Result<M> + Sync,
    EF: Fn(&M, &GrayVolume, &LabelVolume) -> Result<f64> + Sync,
{
    let k = cohort.len();
    if k < 2 {
        return Err(Error::Config("dose matrix needs at least two cohort members".into()));
    }
    for member in cohort {
        for d in rows.iter().flat_map(|r| r.0.iter()).chain(test_doses) {
            member.at(*d)?;
        }
    }
    let jobs: Vec<(usize, usize)> = (0..rows.len()).flat_map(|r| (0..k).map(move |f| (r, f))).collect();
    let results = jobs
        .par_iter()
        .map(|&(r, fold)| {
            let mut train = Vec::new();
            for (i, m) in cohort.iter().enumerate() {
                if i == fold {
                    continue;
                }
                for &d in &rows[r].0 {
                    train.push((m.at(d)?, &m.labels));
                }
            }
            let model = train_fn(r, fold, &train)?;
            let held = &cohort[fold];
            test_doses
                .iter()
                .map(|&d| eval_fn(&model, held.at(d)?, &held.labels))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let cells = (0..rows.len())
        .map(|r| {
            (0..test_doses.len())
                .map(|c| FoldSummary::from_scores((0..k).map(|f| results[r * k + f][c]).collect()))
                .collect()
        })
        .collect();
    Ok(DoseMatrix {
        rows: rows.iter().map(TrainSet::name).collect(),
        columns: test_doses.iter().map(|d| d.name()).collect(),
        cells,
    })
}

/// Everything recorded about one evaluated prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub score: Score,
    pub label_histogram: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dose: Option<DoseLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub timings_s: BTreeMap<String, f64>,
}

impl RunReport {
    pub fn new(pred: &LabelVolume, gt: &LabelVolume, include_background: bool) -> Result<RunReport> {
        Ok(RunReport {
            score: score(pred, gt, include_background)?,
            label_histogram: histogram_map(pred),
            dose: None,
            seed: None,
            config: None,
            timings_s: BTreeMap::new(),
        })
    }
}

pub fn histogram_map(labels: &LabelVolume) -> BTreeMap<String, u64> {
    labels
        .histogram()
        .iter()
        .zip(ClassId::ALL)
        .map(|(&n, c)| (c.name().to_string(), n))
        .collect()
}
