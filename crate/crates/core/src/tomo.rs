//! Parallel-beam acquisition and filtered back-projection.
//!
//! Geometry: for an XY slice with pixel centers at `(i - (nx-1)/2, j - (ny-1)/2)`,
//! the ray at angle `theta` and detector offset `s` is the line
//! `x*cos(theta) + y*sin(theta) = s`. Detector bin `b` sits at offset
//! `b - (n_bins-1)/2`. Angles cover a 180 degree arc starting at 0.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, FloatVolume, GrayVolume, Volume};

/// Angular arc covered by a parallel-beam scan.
pub const SCAN_ARC_DEG: f64 = 180.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionConfig {
    pub n_projections: usize,
    pub angular_step_deg: f64,
    /// `None` picks the smallest odd count covering the slice diagonal.
    pub detector_bins: Option<usize>,
    /// Attenuation range mapped onto the 16-bit output.
    pub absorption_window: (f64, f64),
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            n_projections: 180,
            angular_step_deg: 1.0,
            detector_bins: None,
            absorption_window: (-0.25, 1.25),
        }
    }
}

impl AcquisitionConfig {
    pub fn with_projections(n_projections: usize) -> Self {
        AcquisitionConfig {
            n_projections,
            angular_step_deg: SCAN_ARC_DEG / n_projections as f64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_projections == 0 {
            return Err(Error::Config("n_projections must be positive".into()));
        }
        let arc = self.n_projections as f64 * self.angular_step_deg;
        if !((arc - SCAN_ARC_DEG).abs() <= 1e-6 * SCAN_ARC_DEG) {
            return Err(Error::Config(format!(
                "{} projections x {} deg = {arc} deg does not cover the {SCAN_ARC_DEG} deg arc",
                self.n_projections, self.angular_step_deg
            )));
        }
        let (lo, hi) = self.absorption_window;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("absorption window ({lo}, {hi}) is degenerate")));
        }
        Ok(())
    }

    /// Detector bins required for a slice of the given size.
    pub fn bins_for(&self, nx: usize, ny: usize) -> usize {
        self.detector_bins.unwrap_or_else(|| min_detector_bins(nx, ny) | 1)
    }
}

/// Smallest bin count whose aperture spans the slice diagonal.
pub fn min_detector_bins(nx: usize, ny: usize) -> usize {
    ((nx * nx + ny * ny) as f64).sqrt().ceil() as usize
}

/// Projection-dose level: keep every `stride`-th angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct DoseLevel(u8);

impl DoseLevel {
    pub const FULL: DoseLevel = DoseLevel(1);
    pub const HALF: DoseLevel = DoseLevel(2);
    pub const THIRD: DoseLevel = DoseLevel(3);
    pub const ALL: [DoseLevel; 3] = [DoseLevel::FULL, DoseLevel::HALF, DoseLevel::THIRD];

    pub fn new(stride: u8) -> Result<Self> {
        match stride {
            1..=3 => Ok(DoseLevel(stride)),
            _ => Err(Error::Config(format!("dose stride must be 1, 2 or 3, got {stride}"))),
        }
    }

    pub fn stride(self) -> usize {
        self.0 as usize
    }

    /// Dataset name: D1 (all projections), D2 (half), D3 (a third).
    pub fn name(self) -> String {
        format!("D{}", self.0)
    }
}

impl TryFrom<u8> for DoseLevel {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        DoseLevel::new(v)
    }
}

impl From<DoseLevel> for u8 {
    fn from(d: DoseLevel) -> u8 {
        d.0
    }
}

impl fmt::Display for DoseLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "D{}", self.0)
    }
}

/// Per-slice parallel-beam projections, laid out `[slice][angle][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SinogramStack {
    n_slices: usize,
    n_bins: usize,
    angle_step_deg: f64,
    arc_deg: f64,
    voxel_size: f64,
    angles_deg: Vec<f64>,
    data: Vec<f32>,
}

impl SinogramStack {
    pub fn from_parts(
        n_slices: usize,
        n_bins: usize,
        angle_step_deg: f64,
        arc_deg: f64,
        voxel_size: f64,
        n_angles: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if !(angle_step_deg > 0.0 && angle_step_deg.is_finite()) {
            return Err(Error::Config(format!("angle step {angle_step_deg} must be positive")));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) || !arc_deg.is_finite() {
            return Err(Error::Config("voxel size and arc must be positive and finite".into()));
        }
        if data.len() != n_slices * n_angles * n_bins {
            return Err(Error::Shape(format!(
                "sinogram {n_slices}x{n_angles}x{n_bins} needs {} samples, got {}",
                n_slices * n_angles * n_bins,
                data.len()
            )));
        }
        let angles_deg = (0..n_angles).map(|i| i as f64 * angle_step_deg).collect();
        Ok(SinogramStack {
            n_slices,
            n_bins,
            angle_step_deg,
            arc_deg,
            voxel_size,
            angles_deg,
            data,
        })
    }

    pub fn n_slices(&self) -> usize {
        self.n_slices
    }
    pub fn n_angles(&self) -> usize {
        self.angles_deg.len()
    }
    pub fn n_bins(&self) -> usize {
        self.n_bins
    }
    pub fn angles_deg(&self) -> &[f64] {
        &self.angles_deg
    }
    pub fn angle_step_deg(&self) -> f64 {
        self.angle_step_deg
    }
    pub fn arc_deg(&self) -> f64 {
        self.arc_deg
    }
    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Projection row of one slice at one angle.
    pub fn row(&self, slice: usize, angle: usize) -> &[f32] {
        let start = (slice * self.n_angles() + angle) * self.n_bins;
        &self.data[start..start + self.n_bins]
    }

    fn slice_block(&self, slice: usize) -> &[f32] {
        let len = self.n_angles() * self.n_bins;
        &self.data[slice * len..(slice + 1) * len]
    }
}

#[inline]
fn bilinear_zero(img: &[f32], nx: usize, ny: usize, px: f64, py: f64) -> f64 {
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |x: isize, y: isize| -> f64 {
        if x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny {
            img[x as usize + nx * y as usize] as f64
        } else {
            0.0
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1, y0))
        + fy * ((1.0 - fx) * at(x0, y0 + 1) + fx * at(x0 + 1, y0 + 1))
}

/// Parameter interval `[t0, t1]` on `origin + t*dir` that lies within `[lo, hi]` per axis.
fn clip_ray(origin: (f64, f64), dir: (f64, f64), lo: (f64, f64), hi: (f64, f64)) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for (o, d, l, h) in [(origin.0, dir.0, lo.0, hi.0), (origin.1, dir.1, lo.1, hi.1)] {
        if d.abs() < 1e-12 {
            if o < l || o > h {
                return None;
            }
        } else {
            let (a, b) = ((l - o) / d, (h - o) / d);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

fn project_slice(slice: &[f32], nx: usize, ny: usize, angles_deg: &[f64], n_bins: usize, voxel_size: f64, out: &mut [f32]) {
    let cx = (nx as f64 - 1.0) / 2.0;
    let cy = (ny as f64 - 1.0) / 2.0;
    let half_bins = (n_bins as f64 - 1.0) / 2.0;
    // Samples are taken at integer t so that a centered ray hits pixel centers.
    for (a, &deg) in angles_deg.iter().enumerate() {
        let theta = deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let row = &mut out[a * n_bins..(a + 1) * n_bins];
        for (b, cell) in row.iter_mut().enumerate() {
            let s = b as f64 - half_bins;
            let origin = (cx + s * cos, cy + s * sin);
            let dir = (-sin, cos);
            let Some((t0, t1)) = clip_ray(origin, dir, (-1.0, -1.0), (nx as f64, ny as f64)) else {
                *cell = 0.0;
                continue;
            };
            let mut sum = 0.0;
            let mut t = t0.ceil();
            while t <= t1 {
                sum += bilinear_zero(slice, nx, ny, origin.0 + t * dir.0, origin.1 + t * dir.1);
                t += 1.0;
            }
            *cell = (sum * voxel_size) as f32;
        }
    }
}

/// Line integrals of every XY slice over the configured angles.
pub fn forward_project(vol: &FloatVolume, cfg: &AcquisitionConfig) -> Result<SinogramStack> {
    cfg.validate()?;
    let Dims { nx, ny, nz } = vol.dims();
    let n_bins = cfg.bins_for(nx, ny);
    let needed = min_detector_bins(nx, ny);
    if n_bins < needed {
        return Err(Error::Config(format!(
            "{n_bins} detector bins cannot cover a {nx}x{ny} slice (need {needed})"
        )));
    }
    let angles: Vec<f64> = (0..cfg.n_projections)
        .map(|i| i as f64 * cfg.angular_step_deg)
        .collect();
    let block = angles.len() * n_bins;
    let mut data = vec![0f32; nz * block];
    let slice_len = nx * ny;
    data.par_chunks_mut(block.max(1))
        .enumerate()
        .for_each(|(z, out)| {
            let slice = &vol.data()[z * slice_len..(z + 1) * slice_len];
            project_slice(slice, nx, ny, &angles, n_bins, vol.voxel_size(), out);
        });
    SinogramStack::from_parts(
        nz,
        n_bins,
        cfg.angular_step_deg,
        SCAN_ARC_DEG,
        vol.voxel_size(),
        angles.len(),
        data,
    )
}

/// Keeps angles at indices `0, stride, 2*stride, ...`.
pub fn subsample_dose(s: &SinogramStack, dose: DoseLevel) -> SinogramStack {
    let stride = dose.stride();
    if stride == 1 {
        return s.clone();
    }
    let kept: Vec<usize> = (0..s.n_angles()).step_by(stride).collect();
    let mut data = Vec::with_capacity(s.n_slices * kept.len() * s.n_bins);
    for z in 0..s.n_slices {
        for &a in &kept {
            data.extend_from_slice(s.row(z, a));
        }
    }
    SinogramStack::from_parts(
        s.n_slices,
        s.n_bins,
        s.angle_step_deg * stride as f64,
        s.arc_deg,
        s.voxel_size,
        kept.len(),
        data,
    )
    .expect("decimated stack is consistent")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FbpFilter {
    #[default]
    RamLak,
    Hann,
}

impl FromStr for FbpFilter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ramlak" | "ram-lak" => Ok(FbpFilter::RamLak),
            "hann" => Ok(FbpFilter::Hann),
            other => Err(Error::Config(format!("unknown FBP filter '{other}'"))),
        }
    }
}

/// Frequency response of the ramp filter, built from the FFT of the
/// band-limited spatial Ram-Lak kernel so the DC term is not forced to zero.
fn ramp_response(padded: usize, filter: FbpFilter, fft: &Arc<dyn Fft<f64>>) -> Vec<f64> {
    let mut kernel = vec![Complex::new(0.0, 0.0); padded];
    kernel[0].re = 0.25;
    for (i, k) in kernel.iter_mut().enumerate().skip(1) {
        if i % 2 == 1 {
            let d = i.min(padded - i) as f64;
            k.re = -1.0 / (PI * d).powi(2);
        }
    }
    fft.process(&mut kernel);
    kernel
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let ramp = 2.0 * c.re;
            match filter {
                FbpFilter::RamLak => ramp,
                FbpFilter::Hann => {
                    let f = if i <= padded / 2 { i as f64 } else { i as f64 - padded as f64 } / padded as f64;
                    ramp * 0.5 * (1.0 + (2.0 * PI * f).cos())
                }
            }
        })
        .collect()
}

/// Filtered back-projection of every slice onto an `out_dims` grid.
///
/// Output is real-valued attenuation; see [`normalize_to_u16`] for the
/// 16-bit mapping.
pub fn fbp_reconstruct(s: &SinogramStack, out_dims: Dims, filter: FbpFilter) -> Result<FloatVolume> {
    let n_angles = s.n_angles();
    if n_angles < 2 {
        return Err(Error::Reconstruction(format!("need at least 2 angles, got {n_angles}")));
    }
    if out_dims.nz != s.n_slices {
        return Err(Error::Shape(format!(
            "output depth {} differs from {} sinogram slices",
            out_dims.nz, s.n_slices
        )));
    }
    let n_bins = s.n_bins;
    let padded = (2 * n_bins).next_power_of_two().max(64);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(padded);
    let inv = planner.plan_fft_inverse(padded);
    let response = ramp_response(padded, filter, &fwd);

    let trig: Vec<(f64, f64)> = s.angles_deg.iter().map(|d| d.to_radians().sin_cos()).collect();
    let Dims { nx, ny, .. } = out_dims;
    let slice_len = nx * ny;
    let scale = PI / (2.0 * n_angles as f64) / s.voxel_size;
    let half_bins = (n_bins as f64 - 1.0) / 2.0;
    let cx = (nx as f64 - 1.0) / 2.0;
    let cy = (ny as f64 - 1.0) / 2.0;

    let mut data = vec![0f32; out_dims.len()];
    data.par_chunks_mut(slice_len.max(1))
        .enumerate()
        .for_each(|(z, out)| {
            let block = s.slice_block(z);
            let mut filtered = vec![0f64; n_angles * n_bins];
            let mut buf = vec![Complex::new(0.0, 0.0); padded];
            for a in 0..n_angles {
                buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                for (c, &v) in buf.iter_mut().zip(&block[a * n_bins..(a + 1) * n_bins]) {
                    c.re = v as f64;
                }
                fwd.process(&mut buf);
                for (c, &r) in buf.iter_mut().zip(&response) {
                    *c *= r;
                }
                inv.process(&mut buf);
                for (f, c) in filtered[a * n_bins..(a + 1) * n_bins].iter_mut().zip(&buf) {
                    *f = c.re / padded as f64;
                }
            }
            let mut acc = vec![0f64; slice_len];
            for (a, &(sin, cos)) in trig.iter().enumerate() {
                let row = &filtered[a * n_bins..(a + 1) * n_bins];
                for j in 0..ny {
                    let yc = j as f64 - cy;
                    let base = yc * sin + half_bins;
                    for i in 0..nx {
                        let pos = (i as f64 - cx) * cos + base;
                        let b0 = pos.floor();
                        let frac = pos - b0;
                        let b0 = b0 as isize;
                        let mut v = 0.0;
                        if b0 >= 0 && (b0 as usize) < n_bins {
                            v += (1.0 - frac) * row[b0 as usize];
                        }
                        if b0 + 1 >= 0 && ((b0 + 1) as usize) < n_bins {
                            v += frac * row[(b0 + 1) as usize];
                        }
                        acc[i + nx * j] += v;
                    }
                }
            }
            for (o, v) in out.iter_mut().zip(acc) {
                *o = (v * scale) as f32;
            }
        });
    Volume::new(out_dims, s.voxel_size, data)
}

/// Maps attenuation onto 16 bits with a fixed window: values at or below `lo`
/// become 0, at or above `hi` become 65535, linear in between.
pub fn normalize_to_u16(vol: &FloatVolume, window: (f64, f64)) -> Result<GrayVolume> {
    let (lo, hi) = window;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!("absorption window ({lo}, {hi}) is degenerate")));
    }
    Ok(vol.map(|v| normalize_value(v as f64, lo, hi)))
}

#[inline]
pub fn normalize_value(v: f64, lo: f64, hi: f64) -> u16 {
    if v <= lo {
        0
    } else if v >= hi {
        u16::MAX
    } else {
        (65535.0 * (v - lo) / (hi - lo)).round() as u16
    }
}

/// Inverse of the window mapping, for inspection.
pub fn denormalize_value(v: u16, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * v as f64 / 65535.0
}
