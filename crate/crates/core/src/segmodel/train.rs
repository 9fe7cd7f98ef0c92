use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{extract_features, FeatureImage};
use super::softmax::{argmax_first, Adam, Batch, SoftmaxModel, TrainingMeta};
use crate::error::{Error, Result};
use crate::volume::{ClassId, GrayVolume, LabelVolume, ViewAxis};

/// Tile-sampling training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainProtocol {
    /// Square tile edge in pixels; clamped to the slice extent.
    pub tile_size: usize,
    pub slice_stride: usize,
    pub val_fraction: f64,
    pub tiles_per_slice_per_epoch: usize,
    pub seed: u64,
    pub class_balance: bool,
    pub balance_cap: f64,
}

impl Default for TrainProtocol {
    fn default() -> Self {
        TrainProtocol {
            tile_size: 400,
            slice_stride: 3,
            val_fraction: 0.3,
            tiles_per_slice_per_epoch: 1,
            seed: 0,
            class_balance: true,
            balance_cap: 10.0,
        }
    }
}

impl TrainProtocol {
    pub fn with_tile(tile_size: usize) -> Self {
        TrainProtocol {
            tile_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::Config("tile_size must be positive".into()));
        }
        if self.slice_stride == 0 {
            return Err(Error::Config("slice_stride must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction {} is not in (0, 1)", self.val_fraction)));
        }
        if self.tiles_per_slice_per_epoch == 0 {
            return Err(Error::Config("tiles_per_slice_per_epoch must be positive".into()));
        }
        if !(self.balance_cap >= 1.0) {
            return Err(Error::Config("balance_cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// Axial slice indices used for training: every `stride`-th, starting at 0.
pub fn select_slices(n: usize, stride: usize) -> Vec<usize> {
    (0..n).step_by(stride.max(1)).collect()
}

/// One training volume. Labels outside the model's class set, and voxels
/// where `valid` is false, do not contribute to the loss.
#[derive(Debug, Clone, Copy)]
pub struct TrainStack<'a> {
    pub gray: &'a GrayVolume,
    pub labels: &'a LabelVolume,
    pub valid: Option<&'a [bool]>,
}

impl<'a> TrainStack<'a> {
    pub fn new(gray: &'a GrayVolume, labels: &'a LabelVolume) -> Self {
        TrainStack {
            gray,
            labels,
            valid: None,
        }
    }
}

const IGNORE: u8 = u8::MAX;

struct PreparedSlice {
    feats: FeatureImage,
    /// Class index per pixel, or IGNORE.
    target: Vec<u8>,
}

fn prepare(stacks: &[TrainStack], stride: usize, classes: &[ClassId]) -> Result<Vec<PreparedSlice>> {
    let mut jobs = Vec::new();
    for (s, st) in stacks.iter().enumerate() {
        if !st.gray.same_dims(st.labels) {
            return Err(Error::Shape(format!(
                "stack {s}: gray {} vs labels {}",
                st.gray.dims(),
                st.labels.dims()
            )));
        }
        if let Some(v) = st.valid {
            if v.len() != st.gray.dims().len() {
                return Err(Error::Shape(format!("stack {s}: validity mask has the wrong length")));
            }
        }
        for z in select_slices(st.gray.dims().nz, stride) {
            jobs.push((s, z));
        }
    }
    jobs.par_iter()
        .map(|&(s, z)| {
            let st = &stacks[s];
            let img = st.gray.extract_slice(ViewAxis::Xy, z)?;
            let lab = st.labels.extract_slice(ViewAxis::Xy, z)?;
            let plane = img.width * img.height;
            let target = lab
                .data
                .iter()
                .enumerate()
                .map(|(p, c)| {
                    let ok = st.valid.is_none_or(|v| v[z * plane + p]);
                    match classes.iter().position(|k| k == c) {
                        Some(i) if ok => i as u8,
                        _ => IGNORE,
                    }
                })
                .collect();
            Ok(PreparedSlice {
                feats: extract_features(&img),
                target,
            })
        })
        .collect()
}

fn standardization(slices: &[&PreparedSlice], n_features: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; n_features];
    let mut sq = vec![0.0; n_features];
    let mut n = 0usize;
    for s in slices {
        for (p, &t) in s.target.iter().enumerate() {
            if t == IGNORE {
                continue;
            }
            n += 1;
            for (f, &v) in s.feats.pixel(p).iter().enumerate() {
                sum[f] += v as f64;
                sq[f] += (v as f64) * (v as f64);
            }
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let scale = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let var = (q / n - m * m).max(0.0);
            if var > 1e-20 {
                1.0 / var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Mean over classes of pixel IoU on the held-out slices. Classes absent from
/// both prediction and target are skipped.
fn validation_iou(model: &SoftmaxModel, slices: &[&PreparedSlice]) -> f64 {
    let k = model.n_classes();
    let per_slice: Vec<(Vec<u64>, Vec<u64>)> = slices
        .par_iter()
        .map(|s| {
            let mut inter = vec![0u64; k];
            let mut union = vec![0u64; k];
            let mut x = vec![0.0; model.n_features];
            let mut z = vec![0.0; k];
            for (p, &t) in s.target.iter().enumerate() {
                if t == IGNORE {
                    continue;
                }
                model.standardize(s.feats.pixel(p), &mut x);
                model.logits(&x, &mut z);
                let pred = argmax_first(&z);
                let t = t as usize;
                if pred == t {
                    inter[t] += 1;
                    union[t] += 1;
                } else {
                    union[t] += 1;
                    union[pred] += 1;
                }
            }
            (inter, union)
        })
        .collect();
    let mut inter = vec![0u64; k];
    let mut union = vec![0u64; k];
    for (i, u) in per_slice {
        for c in 0..k {
            inter[c] += i[c];
            union[c] += u[c];
        }
    }
    let scores: Vec<f64> = (0..k)
        .filter(|&c| union[c] > 0)
        .map(|c| inter[c] as f64 / union[c] as f64)
        .collect();
    if scores.is_empty() {
        f64::NAN
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

/// Trains `model` on axial slices of `stacks`.
///
/// Every `slice_stride`-th axial slice of each stack is selected; the selection
/// is split once into training and validation slices. Each epoch draws
/// `tiles_per_slice_per_epoch` random tiles from every training slice,
/// shuffles their pixels and takes one Adam step per mini-batch. Per-epoch
/// training loss and validation IoU are recorded in the returned metadata.
pub fn train(
    mut model: SoftmaxModel,
    stacks: &[TrainStack],
    proto: &TrainProtocol,
    class_subset: &[ClassId],
) -> Result<(SoftmaxModel, TrainingMeta)> {
    proto.validate()?;
    if stacks.is_empty() {
        return Err(Error::Training("no training stacks".into()));
    }
    if class_subset.is_empty() {
        return Err(Error::Training("empty class subset".into()));
    }
    let mut subset = class_subset.to_vec();
    subset.sort();
    subset.dedup();
    if subset != model.classes {
        return Err(Error::Training(format!(
            "class subset {:?} does not match the model classes {:?}",
            subset, model.classes
        )));
    }
    let classes = model.classes.clone();

    let mut present = vec![false; classes.len()];
    for st in stacks {
        for (i, c) in st.labels.data().iter().enumerate() {
            if st.valid.is_none_or(|v| v[i]) {
                if let Some(k) = classes.iter().position(|x| x == c) {
                    present[k] = true;
                }
            }
        }
    }
    if let Some(k) = present.iter().position(|p| !p) {
        return Err(Error::Training(format!(
            "class {} does not occur in the training labels",
            classes[k].name()
        )));
    }

    let prepared = prepare(stacks, proto.slice_stride, &classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(proto.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if prepared.len() < 2 {
        0
    } else {
        ((proto.val_fraction * prepared.len() as f64).round() as usize).clamp(1, prepared.len() - 1)
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let train_slices: Vec<&PreparedSlice> = train_idx.iter().map(|&i| &prepared[i]).collect();
    let val_slices: Vec<&PreparedSlice> = val_idx.iter().map(|&i| &prepared[i]).collect();

    let mut meta = TrainingMeta {
        seed: proto.seed,
        tile_size: proto.tile_size,
        train_slices: train_slices.len(),
        val_slices: val_slices.len(),
        ..Default::default()
    };
    let hyper = model.hyper;
    if hyper.epochs == 0 {
        return Ok((model, meta));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }

    let (shift, scale) = standardization(&train_slices, model.n_features);
    model.feature_shift = shift;
    model.feature_scale = scale;

    let nf = model.n_features;
    let mut adam = Adam::new(model.weights.len());
    let mut x = vec![0.0; nf];
    for _epoch in 0..hyper.epochs {
        // (slice, pixel, weight) samples for this epoch
        let mut samples: Vec<(u32, u32, f32)> = Vec::new();
        for (si, s) in train_slices.iter().enumerate() {
            let (w, h) = (s.feats.width, s.feats.height);
            let tw = proto.tile_size.min(w);
            let th = proto.tile_size.min(h);
            for _ in 0..proto.tiles_per_slice_per_epoch {
                let x0 = rng.random_range(0..=w - tw);
                let y0 = rng.random_range(0..=h - th);
                let start = samples.len();
                let mut counts = vec![0u64; classes.len()];
                for y in y0..y0 + th {
                    for xx in x0..x0 + tw {
                        let p = xx + w * y;
                        let t = s.target[p];
                        if t != IGNORE {
                            counts[t as usize] += 1;
                            samples.push((si as u32, p as u32, 1.0));
                        }
                    }
                }
                if proto.class_balance {
                    let n_max = counts.iter().copied().max().unwrap_or(0) as f64;
                    for smp in &mut samples[start..] {
                        let t = train_slices[smp.0 as usize].target[smp.1 as usize] as usize;
                        smp.2 = (n_max / counts[t] as f64).min(proto.balance_cap) as f32;
                    }
                }
            }
        }
        samples.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        let mut batch = Batch::default();
        for chunk in samples.chunks(hyper.batch_size) {
            batch.features.clear();
            batch.labels.clear();
            batch.weights.clear();
            for &(si, p, wgt) in chunk {
                let s = train_slices[si as usize];
                model.standardize(s.feats.pixel(p as usize), &mut x);
                batch.push(&x, s.target[p as usize] as usize, wgt as f64);
            }
            let (loss, grad) = model.loss_and_grad(&batch);
            adam.step(&mut model.weights, &grad, &hyper);
            loss_sum += loss;
            n_batches += 1;
        }
        model.check_finite().map_err(|_| Error::Training("training diverged to non-finite weights".into()))?;
        meta.train_loss.push(if n_batches > 0 { loss_sum / n_batches as f64 } else { 0.0 });
        if !val_slices.is_empty() {
            meta.val_iou.push(validation_iou(&model, &val_slices));
        }
        meta.epochs_run += 1;
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmodel::softmax::Hyper;
    use crate::segmodel::{predict_slice, N_FEATURES};
    use crate::volume::{Dims, Volume};

    /// Left half dark and Background, right half bright and Atrium, with a
    /// per-stack offset of the boundary column.
    fn separable_stack(n: usize, edge: usize) -> (GrayVolume, LabelVolume) {
        let dims = Dims::new(n, n, n);
        let mut gray = Vec::with_capacity(dims.len());
        let mut lab = Vec::with_capacity(dims.len());
        for i in 0..dims.len() {
            let x = i % n;
            let noise = ((i * 2654435761) % 2001) as u16;
            if x < edge {
                gray.push(10_000 + noise);
                lab.push(ClassId::Background);
            } else {
                gray.push(50_000 + noise);
                lab.push(ClassId::Atrium);
            }
        }
        (Volume::new(dims, 1.0, gray).unwrap(), Volume::new(dims, 1.0, lab).unwrap())
    }

    fn two_class() -> SoftmaxModel {
        let hyper = Hyper {
            learning_rate: 0.01,
            epochs: 15,
            ..Default::default()
        };
        SoftmaxModel::new(&[ClassId::Background, ClassId::Atrium], N_FEATURES, hyper).unwrap()
    }

    #[test]
    fn slice_selection_count() {
        for n in 0..40 {
            assert_eq!(select_slices(n, 3).len(), n.div_ceil(3));
        }
        assert_eq!(select_slices(7, 3), vec![0, 3, 6]);
    }

    #[test]
    fn separable_tiles_are_learned() {
        let (g, l) = separable_stack(24, 12);
        let (g2, l2) = separable_stack(24, 7);
        let stacks = [TrainStack::new(&g, &l), TrainStack::new(&g2, &l2)];
        let proto = TrainProtocol {
            tile_size: 16,
            seed: 3,
            ..Default::default()
        };
        let (model, meta) = train(two_class(), &stacks, &proto, &[ClassId::Atrium, ClassId::Background]).unwrap();
        assert_eq!(meta.train_slices + meta.val_slices, 2 * 8);
        assert_eq!(meta.val_slices, 5);
        assert_eq!(meta.train_loss.len(), 15);
        assert!(*meta.train_loss.last().unwrap() < 0.1, "{:?}", meta.train_loss);
        assert!(*meta.val_iou.last().unwrap() > 0.95, "{:?}", meta.val_iou);

        let (g3, l3) = separable_stack(24, 17);
        let mut correct = 0;
        let mut total = 0;
        for z in [1, 10, 22] {
            let pred = predict_slice(&model, &g3.extract_slice(ViewAxis::Xy, z).unwrap()).unwrap();
            let truth = l3.extract_slice(ViewAxis::Xy, z).unwrap();
            correct += pred.data.iter().zip(&truth.data).filter(|(a, b)| a == b).count();
            total += truth.data.len();
        }
        assert!(correct as f64 / total as f64 > 0.95);
    }

    #[test]
    fn zero_epochs_leave_the_model_unchanged() {
        let (g, l) = separable_stack(12, 5);
        let mut m = two_class();
        m.hyper.epochs = 0;
        m.weights[2] = 0.25;
        let (out, meta) = train(m.clone(), &[TrainStack::new(&g, &l)], &TrainProtocol::with_tile(8), &[ClassId::Background, ClassId::Atrium]).unwrap();
        assert_eq!(out, m);
        assert!(meta.train_loss.is_empty());
    }

    #[test]
    fn missing_class_is_named() {
        let (g, l) = separable_stack(12, 5);
        let m = SoftmaxModel::new(&[ClassId::Background, ClassId::Bulbus], N_FEATURES, Hyper::default()).unwrap();
        let err = train(m, &[TrainStack::new(&g, &l)], &TrainProtocol::with_tile(8), &[ClassId::Background, ClassId::Bulbus]).unwrap_err();
        assert!(matches!(err, Error::Training(ref msg) if msg.contains("bulbus")), "{err}");
    }

    #[test]
    fn invalid_voxels_do_not_count_as_present() {
        let (g, l) = separable_stack(12, 5);
        let valid: Vec<bool> = l.data().iter().map(|&c| c == ClassId::Background).collect();
        let stack = TrainStack {
            gray: &g,
            labels: &l,
            valid: Some(&valid),
        };
        let err = train(two_class(), &[stack], &TrainProtocol::with_tile(8), &[ClassId::Background, ClassId::Atrium]).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
    }

    #[test]
    fn training_is_deterministic() {
        let (g, l) = separable_stack(16, 6);
        let stacks = [TrainStack::new(&g, &l)];
        let proto = TrainProtocol {
            tile_size: 9,
            seed: 11,
            ..Default::default()
        };
        let mut m = two_class();
        m.hyper.epochs = 3;
        let a = train(m.clone(), &stacks, &proto, &[ClassId::Background, ClassId::Atrium]).unwrap();
        let b = train(m, &stacks, &proto, &[ClassId::Background, ClassId::Atrium]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn protocol_validation() {
        assert!(TrainProtocol::default().validate().is_ok());
        for bad in [
            TrainProtocol { val_fraction: 0.0, ..Default::default() },
            TrainProtocol { val_fraction: 1.0, ..Default::default() },
            TrainProtocol { tile_size: 0, ..Default::default() },
            TrainProtocol { slice_stride: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }
}
