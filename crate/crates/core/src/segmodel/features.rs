use crate::filters::{gaussian_blur, gradient_magnitude, local_std, median_filter};
use crate::volume::Image2;

/// Bumped whenever the feature layout changes; stored in model files.
pub const FEATURE_SPEC_VERSION: u32 = 1;

/// Per-pixel features, in order:
/// raw intensity in [0, 1]; Gaussian blur at sigma 1, 2, 4, 8; gradient
/// magnitude at sigma 1, 2; local standard deviation (radius 2); median
/// (radius 2).
pub const N_FEATURES: usize = 9;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "raw", "blur1", "blur2", "blur4", "blur8", "grad1", "grad2", "std2", "median2",
];

/// Pixel-major feature array: `data[p * N_FEATURES + f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FeatureImage {
    pub fn pixel(&self, p: usize) -> &[f32] {
        &self.data[p * N_FEATURES..(p + 1) * N_FEATURES]
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn extract_features(img: &Image2<u16>) -> FeatureImage {
    let raw = img.map(|v| v as f32 / 65535.0);
    let median = median_filter(img, 2).map(|v| v as f32 / 65535.0);
    let channels = [
        raw.clone(),
        gaussian_blur(&raw, 1.0),
        gaussian_blur(&raw, 2.0),
        gaussian_blur(&raw, 4.0),
        gaussian_blur(&raw, 8.0),
        gradient_magnitude(&raw, 1.0),
        gradient_magnitude(&raw, 2.0),
        local_std(&raw, 2),
        median,
    ];
    let n = img.width * img.height;
    let mut data = vec![0f32; n * N_FEATURES];
    for (f, ch) in channels.iter().enumerate() {
        for (p, &v) in ch.data.iter().enumerate() {
            data[p * N_FEATURES + f] = v;
        }
    }
    FeatureImage {
        width: img.width,
        height: img.height,
        data,
    }
}
