//! Per-slice segmentation: the segmenter interface, the feature bank and the
//! built-in softmax baseline with its tile-sampling trainer.

pub mod features;
pub mod softmax;
pub mod train;

use rayon::prelude::*;

pub use features::{extract_features, FeatureImage, FEATURE_NAMES, FEATURE_SPEC_VERSION, N_FEATURES};
pub use softmax::{Adam, Batch, Hyper, ModelFile, SoftmaxModel, TrainingMeta};
pub use train::{select_slices, train, TrainProtocol, TrainStack};

use crate::error::{Error, Result};
use crate::volume::{ClassId, GrayVolume, Image2, LabelVolume, ViewAxis, Volume};

/// Anything that labels a 2D gray image pixel by pixel.
///
/// Output images have the input's shape and only contain labels from
/// `classes()`.
pub trait SliceSegmenter: Sync {
    fn classes(&self) -> &[ClassId];

    fn n_classes(&self) -> usize {
        self.classes().len()
    }

    fn predict(&self, img: &Image2<u16>) -> Result<Image2<ClassId>>;
}

impl SliceSegmenter for SoftmaxModel {
    fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    fn predict(&self, img: &Image2<u16>) -> Result<Image2<ClassId>> {
        predict_slice(self, img)
    }
}

pub fn predict_slice(model: &SoftmaxModel, img: &Image2<u16>) -> Result<Image2<ClassId>> {
    model.check_finite()?;
    model.predict_features(&extract_features(img))
}

/// Runs `model` on every slice along `axis` and restacks the result.
pub fn predict_volume<S: SliceSegmenter + ?Sized>(model: &S, vol: &GrayVolume, axis: ViewAxis) -> Result<LabelVolume> {
    let preds = vol
        .slices(axis)
        .par_iter()
        .map(|s| {
            let out = model.predict(s)?;
            if !out.same_shape(s) {
                return Err(Error::Model(format!(
                    "segmenter returned {}x{} for a {}x{} slice",
                    out.width, out.height, s.width, s.height
                )));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Volume::restack(axis, &preds, vol.voxel_size())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    /// Thresholds raw intensity; labels are pixel-local.
    struct Threshold;

    impl SliceSegmenter for Threshold {
        fn classes(&self) -> &[ClassId] {
            &[ClassId::Background, ClassId::Atrium]
        }
        fn predict(&self, img: &Image2<u16>) -> Result<Image2<ClassId>> {
            Ok(img.map(|v| if v > 30000 { ClassId::Atrium } else { ClassId::Background }))
        }
    }

    #[test]
    fn constant_volume_gives_constant_labels() {
        let dims = Dims::new(7, 5, 4);
        let vol = Volume::filled(dims, 1.0, 40000u16).unwrap();
        for axis in ViewAxis::ALL {
            let out = predict_volume(&Threshold, &vol, axis).unwrap();
            assert_eq!(out.dims(), dims);
            assert!(out.data().iter().all(|&c| c == ClassId::Atrium));
        }
    }

    #[test]
    fn restacked_prediction_matches_slicewise() {
        let dims = Dims::new(6, 5, 4);
        let data = (0..dims.len()).map(|i| ((i * 9973) % 65536) as u16).collect();
        let vol = Volume::new(dims, 1.0, data).unwrap();
        for axis in ViewAxis::ALL {
            let out = predict_volume(&Threshold, &vol, axis).unwrap();
            for k in 0..dims.extent(axis) {
                let want = Threshold.predict(&vol.extract_slice(axis, k).unwrap()).unwrap();
                assert_eq!(out.extract_slice(axis, k).unwrap(), want);
            }
        }
    }

    #[test]
    fn softmax_prediction_is_deterministic_and_shape_preserving() {
        let mut m = SoftmaxModel::new(&[ClassId::Background, ClassId::Bulbus, ClassId::Atrium], N_FEATURES, Hyper::default()).unwrap();
        for (i, w) in m.weights.iter_mut().enumerate() {
            *w = (i as f64 * 1.37).cos();
        }
        for (w, h) in [(1, 1), (3, 17), (23, 4)] {
            let data = (0..w * h).map(|i| ((i * 2654435761usize) % 65536) as u16).collect();
            let img = Image2::new(w, h, data).unwrap();
            let a = predict_slice(&m, &img).unwrap();
            let b = predict_slice(&m, &img).unwrap();
            assert_eq!(a, b);
            assert_eq!((a.width, a.height), (w, h));
            assert!(a.data.iter().all(|c| m.classes.contains(c)));
        }
    }
}
