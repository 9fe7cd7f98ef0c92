//! 2D pre-processing filters and 3D label post-processing.
//!
//! 2D filters use symmetric reflection at the borders (`d c b a | a b c d`).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ClassId, Dims, Image2, LabelVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnsharpParams {
    pub sigma: f64,
    pub amount: f64,
}

impl Default for UnsharpParams {
    fn default() -> Self {
        UnsharpParams {
            sigma: 2.0,
            amount: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub unsharp: UnsharpParams,
    pub median_radius: usize,
    pub histeq_bins: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            unsharp: UnsharpParams::default(),
            median_radius: 1,
            histeq_bins: 1024,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.unsharp.sigma > 0.0) {
            return Err(Error::Config("unsharp sigma must be positive".into()));
        }
        if !(self.unsharp.amount >= 0.0) {
            return Err(Error::Config("unsharp amount must be non-negative".into()));
        }
        if self.median_radius < 1 {
            return Err(Error::Config("median radius must be at least 1".into()));
        }
        if self.histeq_bins < 2 {
            return Err(Error::Config("histogram equalization needs at least 2 bins".into()));
        }
        Ok(())
    }
}

/// A named 2D pre-processing step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Unsharp,
    Median,
    HistEq,
}

impl FilterKind {
    pub fn apply(self, img: &Image2<u16>, cfg: &FilterConfig) -> Image2<u16> {
        match self {
            FilterKind::Unsharp => unsharp_mask(img, cfg.unsharp.sigma, cfg.unsharp.amount),
            FilterKind::Median => median_filter(img, cfg.median_radius),
            FilterKind::HistEq => hist_equalize(img, cfg.histeq_bins),
        }
    }
}

impl std::str::FromStr for FilterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unsharp" => Ok(FilterKind::Unsharp),
            "median" => Ok(FilterKind::Median),
            "hist_eq" | "histeq" => Ok(FilterKind::HistEq),
            other => Err(Error::Config(format!("unknown filter '{other}'"))),
        }
    }
}

/// Symmetric reflection of index `i` into `0..n`.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Normalized Gaussian taps, truncated at 3 sigma.
pub fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.iter().map(|t| (t / total) as f32).collect()
}

fn convolve_rows(img: &Image2<f32>, kernel: &[f32]) -> Image2<f32> {
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        let row = &img.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0f32;
            for (k, &t) in kernel.iter().enumerate() {
                acc += t * row[reflect(x as isize + k as isize - r, w)];
            }
            out[y * w + x] = acc;
        }
    }
    Image2 { width: w, height: h, data: out }
}

fn convolve_cols(img: &Image2<f32>, kernel: &[f32]) -> Image2<f32> {
    let r = (kernel.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for (k, &t) in kernel.iter().enumerate() {
            let src = reflect(y as isize + k as isize - r, h) * w;
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, &s) in dst.iter_mut().zip(&img.data[src..src + w]) {
                *d += t * s;
            }
        }
    }
    Image2 { width: w, height: h, data: out }
}

/// Separable Gaussian blur.
pub fn gaussian_blur(img: &Image2<f32>, sigma: f64) -> Image2<f32> {
    let kernel = gaussian_kernel(sigma);
    convolve_cols(&convolve_rows(img, &kernel), &kernel)
}

/// Central-difference gradient magnitude of `img` after a Gaussian blur.
pub fn gradient_magnitude(img: &Image2<f32>, sigma: f64) -> Image2<f32> {
    let b = gaussian_blur(img, sigma);
    let (w, h) = (b.width, b.height);
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let gx = (b.get(reflect(x as isize + 1, w), y) - b.get(reflect(x as isize - 1, w), y)) * 0.5;
            let gy = (b.get(x, reflect(y as isize + 1, h)) - b.get(x, reflect(y as isize - 1, h))) * 0.5;
            out[x + w * y] = (gx * gx + gy * gy).sqrt();
        }
    }
    Image2 { width: w, height: h, data: out }
}

/// Standard deviation over the `(2r+1)^2` window.
pub fn local_std(img: &Image2<f32>, radius: usize) -> Image2<f32> {
    let box_kernel = vec![1.0 / (2 * radius + 1) as f32; 2 * radius + 1];
    let mean = convolve_cols(&convolve_rows(img, &box_kernel), &box_kernel);
    let sq = img.map(|v| v * v);
    let mean_sq = convolve_cols(&convolve_rows(&sq, &box_kernel), &box_kernel);
    Image2 {
        width: img.width,
        height: img.height,
        data: mean
            .data
            .iter()
            .zip(&mean_sq.data)
            .map(|(&m, &m2)| (m2 - m * m).max(0.0).sqrt())
            .collect(),
    }
}

/// `in + amount * (in - blur(in))`, clamped to the 16-bit range.
pub fn unsharp_mask(img: &Image2<u16>, sigma: f64, amount: f64) -> Image2<u16> {
    let f = img.map(|v| v as f32);
    let blurred = gaussian_blur(&f, sigma);
    Image2 {
        width: img.width,
        height: img.height,
        data: img
            .data
            .iter()
            .zip(&blurred.data)
            .map(|(&v, &b)| {
                let v = v as f64;
                (v + amount * (v - b as f64)).round().clamp(0.0, 65535.0) as u16
            })
            .collect(),
    }
}

/// Median over the `(2r+1)^2` neighborhood.
pub fn median_filter(img: &Image2<u16>, radius: usize) -> Image2<u16> {
    let r = radius as isize;
    let (w, h) = (img.width, img.height);
    let side = 2 * radius + 1;
    let mut window = Vec::with_capacity(side * side);
    let mut out = vec![0u16; w * h];
    for y in 0..h {
        for x in 0..w {
            window.clear();
            for dy in -r..=r {
                let yy = reflect(y as isize + dy, h);
                for dx in -r..=r {
                    window.push(img.data[reflect(x as isize + dx, w) + w * yy]);
                }
            }
            let mid = window.len() / 2;
            out[x + w * y] = *window.select_nth_unstable(mid).1;
        }
    }
    Image2 { width: w, height: h, data: out }
}

/// Maps each intensity bin to `65535 * CDF(bin)`. Constant images are
/// returned unchanged since their CDF is a single step.
pub fn hist_equalize(img: &Image2<u16>, bins: usize) -> Image2<u16> {
    let bins = bins.max(2);
    let first = img.data.first().copied();
    if img.data.iter().all(|&v| Some(v) == first) {
        return img.clone();
    }
    let bin_of = |v: u16| (v as usize * bins) >> 16;
    let mut hist = vec![0u64; bins];
    for &v in &img.data {
        hist[bin_of(v)] += 1;
    }
    let total = img.data.len() as f64;
    let mut cdf = 0u64;
    let lut: Vec<u16> = hist
        .iter()
        .map(|&c| {
            cdf += c;
            (65535.0 * cdf as f64 / total).round() as u16
        })
        .collect();
    img.map(|v| lut[bin_of(v)])
}

/// Which view's prediction wins when all three disagree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tiebreak {
    #[default]
    A,
    B,
    C,
}

#[inline]
pub fn mode3(a: ClassId, b: ClassId, c: ClassId, tiebreak: Tiebreak) -> ClassId {
    if a == b || a == c {
        a
    } else if b == c {
        b
    } else {
        match tiebreak {
            Tiebreak::A => a,
            Tiebreak::B => b,
            Tiebreak::C => c,
        }
    }
}

/// Per-voxel majority of three label volumes; all-distinct voxels take the
/// label from `tiebreak`.
pub fn mode_fuse(a: &LabelVolume, b: &LabelVolume, c: &LabelVolume, tiebreak: Tiebreak) -> Result<LabelVolume> {
    if !a.same_dims(b) || !a.same_dims(c) {
        return Err(Error::Shape(format!(
            "cannot fuse {}, {} and {}",
            a.dims(),
            b.dims(),
            c.dims()
        )));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| mode3(x, y, z, tiebreak))
        .collect();
    a.with_data(data)
}

fn face_neighbors(dims: Dims, i: usize) -> impl Iterator<Item = usize> {
    let x = i % dims.nx;
    let y = (i / dims.nx) % dims.ny;
    let z = i / (dims.nx * dims.ny);
    let sx = 1;
    let sy = dims.nx;
    let sz = dims.nx * dims.ny;
    [
        (x > 0).then(|| i - sx),
        (x + 1 < dims.nx).then(|| i + sx),
        (y > 0).then(|| i - sy),
        (y + 1 < dims.ny).then(|| i + sy),
        (z > 0).then(|| i - sz),
        (z + 1 < dims.nz).then(|| i + sz),
    ]
    .into_iter()
    .flatten()
}

/// Background voxels 6-connected to the volume border.
pub fn border_background(labels: &LabelVolume) -> Vec<bool> {
    let dims = labels.dims();
    let data = labels.data();
    let mut reached = vec![false; dims.len()];
    let mut queue = VecDeque::new();
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let on_border = x == 0 || y == 0 || z == 0 || x + 1 == dims.nx || y + 1 == dims.ny || z + 1 == dims.nz;
                let i = dims.index(x, y, z);
                if on_border && data[i] == ClassId::Background {
                    reached[i] = true;
                    queue.push_back(i);
                }
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        for n in face_neighbors(dims, i) {
            if !reached[n] && data[n] == ClassId::Background {
                reached[n] = true;
                queue.push_back(n);
            }
        }
    }
    reached
}

/// Relabels enclosed Background cavities.
///
/// Background not 6-connected to the border is a hole. Hole voxels are filled
/// in synchronous sweeps: each takes the most frequent label among its
/// already-labeled face neighbors (ties to the lower class id), until no hole
/// remains.
pub fn fill_holes_3d(labels: &LabelVolume) -> LabelVolume {
    let dims = labels.dims();
    let reached = border_background(labels);
    let mut data = labels.data().to_vec();
    let mut pending: Vec<usize> = (0..dims.len())
        .filter(|&i| data[i] == ClassId::Background && !reached[i])
        .collect();
    while !pending.is_empty() {
        let mut updates = Vec::new();
        let mut rest = Vec::new();
        for &i in &pending {
            let mut counts = [0u8; ClassId::COUNT];
            for n in face_neighbors(dims, i) {
                if data[n] != ClassId::Background {
                    counts[data[n] as usize] += 1;
                }
            }
            let best = (1..ClassId::COUNT).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
            if counts[best] > 0 {
                updates.push((i, ClassId::ALL[best]));
            } else {
                rest.push(i);
            }
        }
        if updates.is_empty() {
            // only possible if a hole has no labeled surroundings at all
            break;
        }
        for (i, c) in updates {
            data[i] = c;
        }
        pending = rest;
    }
    Volume::new(dims, labels.voxel_size(), data).expect("same geometry")
}

/// Box dilation of a boolean mask by `radius` voxels along each axis.
pub fn dilate_mask(mask: &[bool], dims: Dims, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let mut cur: Vec<bool> = mask.to_vec();
    let strides = [1, dims.nx, dims.nx * dims.ny];
    let extents = [dims.nx, dims.ny, dims.nz];
    for axis in 0..3 {
        let mut next = vec![false; cur.len()];
        let (stride, n) = (strides[axis], extents[axis]);
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / stride) % n;
            let lo = pos.saturating_sub(radius);
            let hi = (pos + radius).min(n - 1);
            let base = i - pos * stride;
            *out = (lo..=hi).any(|p| cur[base + p * stride]);
        }
        cur = next;
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reflect_is_symmetric() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn unsharp_leaves_constants_and_zero_amount_alone() {
        let flat = Image2::filled(9, 7, 1234u16);
        assert_eq!(unsharp_mask(&flat, 2.0, 1.5), flat);
        let img = Image2::new(3, 3, (0..9).map(|v| v * 5000).collect()).unwrap();
        assert_eq!(unsharp_mask(&img, 1.0, 0.0), img);
    }

    #[test]
    fn unsharp_sharpens_an_impulse() {
        let mut img = Image2::filled(11, 11, 0u16);
        img.set(5, 5, 10_000);
        // direct evaluation: the blurred impulse at the center is g0^2 and
        // at a face neighbor g0*g1, with g the normalized 1D kernel
        let k = gaussian_kernel(1.0);
        let center_blur = 10_000.0 * (k[3] * k[3]) as f64;
        let out = unsharp_mask(&img, 1.0, 1.0);
        let expected_center = (20_000.0 - center_blur).round() as u16;
        assert_eq!(out.get(5, 5), expected_center);
        assert!(out.get(5, 5) > 10_000);
        // neighbors go negative before clamping, so they drop to 0; they were 0
        // already, so compare on a raised background instead
        let mut raised = Image2::filled(11, 11, 1000u16);
        raised.set(5, 5, 11_000);
        let out = unsharp_mask(&raised, 1.0, 1.0);
        assert!(out.get(5, 5) > 11_000);
        for (x, y) in [(4, 5), (6, 5), (5, 4), (5, 6)] {
            assert!(out.get(x, y) < 1000, "({x},{y}) = {}", out.get(x, y));
        }
    }

    #[test]
    fn median_removes_salt_and_keeps_constants() {
        let flat = Image2::filled(5, 5, 7u16);
        assert_eq!(median_filter(&flat, 1), flat);
        let mut salt = flat.clone();
        salt.set(2, 2, 65535);
        assert_eq!(median_filter(&salt, 1), flat);
    }

    #[test]
    fn median_is_idempotent_on_filtered_sparse_noise() {
        let mut img = Image2::filled(16, 16, 0u16);
        for (x, y) in [(2, 3), (9, 9), (14, 1), (5, 12)] {
            img.set(x, y, 65535);
        }
        let once = median_filter(&img, 1);
        assert_eq!(median_filter(&once, 1), once);
    }

    #[test]
    fn hist_eq_two_levels_and_constant() {
        let flat = Image2::filled(4, 4, 500u16);
        assert_eq!(hist_equalize(&flat, 256), flat);
        let img = Image2::new(4, 1, vec![0, 0, 65535, 65535]).unwrap();
        let out = hist_equalize(&img, 256);
        assert!((out.data[0] as i32 - 32767).abs() <= 1);
        assert_eq!(out.data[2], 65535);
    }

    fn normalized_entropy(img: &Image2<u16>, bins: usize) -> f64 {
        let mut hist = vec![0f64; bins];
        for &v in &img.data {
            hist[(v as usize * bins) >> 16] += 1.0;
        }
        let n = img.data.len() as f64;
        -hist.iter().filter(|&&c| c > 0.0).map(|&c| (c / n) * (c / n).ln()).sum::<f64>() / (bins as f64).ln()
    }

    #[test]
    fn mode_of_every_triple_matches_counting() {
        for a in ClassId::ALL {
            for b in ClassId::ALL {
                for c in ClassId::ALL {
                    let votes = [a, b, c];
                    let count = |x: ClassId| votes.iter().filter(|&&v| v == x).count();
                    let expected = votes.iter().copied().find(|&v| count(v) >= 2).unwrap_or(a);
                    assert_eq!(mode3(a, b, c, Tiebreak::A), expected);
                }
            }
        }
    }

    #[test]
    fn mode_fuse_checks_dims() {
        let a = LabelVolume::filled(Dims::cube(2), 1.0, ClassId::Atrium).unwrap();
        let b = LabelVolume::filled(Dims::new(2, 2, 3), 1.0, ClassId::Atrium).unwrap();
        assert!(matches!(mode_fuse(&a, &a, &b, Tiebreak::A), Err(Error::Shape(_))));
        assert_eq!(mode_fuse(&a, &a, &a, Tiebreak::A).unwrap(), a);
    }

    #[test]
    fn interior_hole_is_filled_and_tunnel_kept() {
        let dims = Dims::cube(5);
        let mut data = vec![ClassId::Background; dims.len()];
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    data[dims.index(x, y, z)] = ClassId::Ventricle;
                }
            }
        }
        data[dims.index(2, 2, 2)] = ClassId::Background;
        let vol = LabelVolume::new(dims, 1.0, data.clone()).unwrap();
        let filled = fill_holes_3d(&vol);
        assert_eq!(filled.get(2, 2, 2), ClassId::Ventricle);

        // open a tunnel from the center to the border along +x
        data[dims.index(3, 2, 2)] = ClassId::Background;
        let tunnel = LabelVolume::new(dims, 1.0, data).unwrap();
        assert_eq!(fill_holes_3d(&tunnel), tunnel);
    }

    #[test]
    fn dilation_grows_by_radius() {
        let dims = Dims::cube(7);
        let mut mask = vec![false; dims.len()];
        mask[dims.index(3, 3, 3)] = true;
        let d = dilate_mask(&mask, dims, 2);
        assert_eq!(d.iter().filter(|&&b| b).count(), 125);
        assert!(d[dims.index(1, 5, 3)]);
        assert!(!d[dims.index(0, 3, 3)]);
    }

    fn random_labels(seed: u64, dims: Dims, density: u64) -> LabelVolume {
        let mut s = seed | 1;
        let data = (0..dims.len())
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                if s % 100 < density {
                    ClassId::ALL[1 + (s / 100 % 5) as usize]
                } else {
                    ClassId::Background
                }
            })
            .collect();
        LabelVolume::new(dims, 1.0, data).unwrap()
    }

    proptest! {
        #[test]
        fn fill_holes_is_idempotent_and_conservative(seed in any::<u64>(), density in 40u64..95) {
            let vol = random_labels(seed, Dims::new(9, 8, 7), density);
            let once = fill_holes_3d(&vol);
            prop_assert_eq!(&fill_holes_3d(&once), &once);
            let reached = border_background(&vol);
            for (i, (&before, &after)) in vol.data().iter().zip(once.data()).enumerate() {
                if before != ClassId::Background || reached[i] {
                    prop_assert_eq!(before, after);
                }
            }
        }

        #[test]
        fn mode_is_permutation_invariant_under_majority(a in 0u8..6, b in 0u8..6) {
            let (a, b) = (ClassId::ALL[a as usize], ClassId::ALL[b as usize]);
            let expect = a;
            for (x, y, z) in [(a, a, b), (a, b, a), (b, a, a)] {
                for t in [Tiebreak::A, Tiebreak::B, Tiebreak::C] {
                    prop_assert_eq!(mode3(x, y, z, t), expect);
                }
            }
        }

        #[test]
        fn filters_preserve_shape(w in 1usize..12, h in 1usize..12, seed in any::<u32>()) {
            let data: Vec<u16> = (0..w * h).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as u16).collect();
            let img = Image2::new(w, h, data).unwrap();
            for out in [unsharp_mask(&img, 1.5, 2.0), median_filter(&img, 2), hist_equalize(&img, 64)] {
                prop_assert!(out.same_shape(&img));
            }
        }

        #[test]
        fn hist_eq_does_not_lower_entropy(seed in any::<u64>(), skew in 1.0f64..4.0) {
            let mut s = seed | 1;
            let data: Vec<u16> = (0..64 * 64)
                .map(|_| {
                    s ^= s << 13;
                    s ^= s >> 7;
                    s ^= s << 17;
                    let u = (s >> 11) as f64 / (1u64 << 53) as f64;
                    (u.powf(skew) * 65535.0) as u16
                })
                .collect();
            let img = Image2::new(64, 64, data).unwrap();
            // equalize finely, judge flatness on a coarse histogram
            let out = hist_equalize(&img, 1024);
            prop_assert!(normalized_entropy(&out, 16) >= normalized_entropy(&img, 16));
        }
    }
}
