//! Volume and slice containers shared by every stage of the workflow.
//!
//! Voxels are stored Z-major: `index = x + nx * (y + ny * z)`, so each axial
//! (XY) slice is a contiguous row-major block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anatomical label. Ids are dense in `0..ClassId::COUNT`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[repr(u8)]
pub enum ClassId {
    #[default]
    Background = 0,
    Atrium = 1,
    Ventricle = 2,
    Bulbus = 3,
    Compacta = 4,
    Lacunary = 5,
}

impl ClassId {
    pub const COUNT: usize = 6;

    pub const ALL: [ClassId; ClassId::COUNT] = [
        ClassId::Background,
        ClassId::Atrium,
        ClassId::Ventricle,
        ClassId::Bulbus,
        ClassId::Compacta,
        ClassId::Lacunary,
    ];

    pub fn from_u8(id: u8) -> Option<ClassId> {
        ClassId::ALL.get(id as usize).copied()
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Background => "background",
            ClassId::Atrium => "atrium",
            ClassId::Ventricle => "ventricle",
            ClassId::Bulbus => "bulbus",
            ClassId::Compacta => "compacta",
            ClassId::Lacunary => "lacunary",
        }
    }

    pub fn from_name(name: &str) -> Option<ClassId> {
        ClassId::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl TryFrom<u8> for ClassId {
    type Error = Error;

    fn try_from(id: u8) -> Result<Self> {
        ClassId::from_u8(id).ok_or_else(|| Error::Format(format!("invalid class id {id}")))
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Voxel counts along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    /// Number of slices along `axis`.
    pub fn extent(&self, axis: ViewAxis) -> usize {
        match axis {
            ViewAxis::Xy => self.nz,
            ViewAxis::Xz => self.ny,
            ViewAxis::Yz => self.nx,
        }
    }

    /// (width, height) of a slice along `axis`.
    pub fn slice_shape(&self, axis: ViewAxis) -> (usize, usize) {
        match axis {
            ViewAxis::Xy => (self.nx, self.ny),
            ViewAxis::Xz => (self.nx, self.nz),
            ViewAxis::Yz => (self.ny, self.nz),
        }
    }

    /// Maps pixel `(u, v)` of slice `index` along `axis` to a linear voxel index.
    #[inline]
    pub fn slice_voxel(&self, axis: ViewAxis, index: usize, u: usize, v: usize) -> usize {
        match axis {
            ViewAxis::Xy => self.index(u, v, index),
            ViewAxis::Xz => self.index(u, index, v),
            ViewAxis::Yz => self.index(index, u, v),
        }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Slice orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewAxis {
    /// Axial, perpendicular to the rotation axis.
    Xy,
    /// Sagittal.
    Xz,
    /// Coronal.
    Yz,
}

impl ViewAxis {
    pub const ALL: [ViewAxis; 3] = [ViewAxis::Xy, ViewAxis::Xz, ViewAxis::Yz];

    pub fn name(self) -> &'static str {
        match self {
            ViewAxis::Xy => "xy",
            ViewAxis::Xz => "xz",
            ViewAxis::Yz => "yz",
        }
    }
}

impl FromStr for ViewAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xy" | "axial" => Ok(ViewAxis::Xy),
            "xz" | "sagittal" => Ok(ViewAxis::Xz),
            "yz" | "coronal" => Ok(ViewAxis::Yz),
            other => Err(Error::Config(format!("unknown view axis '{other}'"))),
        }
    }
}

impl fmt::Display for ViewAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Row-major 2D image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Image2<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "image {width}x{height} needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Image2 { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Image2 {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[x + self.width * y]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[x + self.width * y] = value;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Image2<U> {
        Image2 {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape<U>(&self, other: &Image2<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Copies the `w`x`h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image2<T> {
        debug_assert!(x0 + w <= self.width && y0 + h <= self.height);
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            let row = y * self.width;
            data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
        }
        Image2 { width: w, height: h, data }
    }
}

/// Dense 3D grid with isotropic voxel size in micrometers.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: Dims,
    voxel_size: f64,
    data: Vec<T>,
}

/// Reconstructed 16-bit intensities.
pub type GrayVolume = Volume<u16>;
/// Class labels, ground truth or prediction.
pub type LabelVolume = Volume<ClassId>;
/// Real-valued attenuation (phantoms and raw reconstructions).
pub type FloatVolume = Volume<f32>;

impl<T: Copy> Volume<T> {
    pub fn new(dims: Dims, voxel_size: f64, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "volume {dims} needs {} voxels, got {}",
                dims.len(),
                data.len()
            )));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::Format(format!("voxel size must be positive, got {voxel_size}")));
        }
        Ok(Volume { dims, voxel_size, data })
    }

    pub fn filled(dims: Dims, voxel_size: f64, value: T) -> Result<Self> {
        Volume::new(dims, voxel_size, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            voxel_size: self.voxel_size,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Builds a volume of identical geometry from new voxel data.
    pub fn with_data<U: Copy>(&self, data: Vec<U>) -> Result<Volume<U>> {
        Volume::new(self.dims, self.voxel_size, data)
    }

    pub fn same_dims<U>(&self, other: &Volume<U>) -> bool {
        self.dims == other.dims
    }

    /// Returns cross-section `index` along `axis`.
    pub fn extract_slice(&self, axis: ViewAxis, index: usize) -> Result<Image2<T>> {
        let extent = self.dims.extent(axis);
        if index >= extent {
            return Err(Error::Bounds {
                axis: axis.name(),
                index,
                extent,
            });
        }
        let (w, h) = self.dims.slice_shape(axis);
        if axis == ViewAxis::Xy {
            let start = index * w * h;
            return Ok(Image2 {
                width: w,
                height: h,
                data: self.data[start..start + w * h].to_vec(),
            });
        }
        let mut data = Vec::with_capacity(w * h);
        for v in 0..h {
            for u in 0..w {
                data.push(self.data[self.dims.slice_voxel(axis, index, u, v)]);
            }
        }
        Ok(Image2 { width: w, height: h, data })
    }

    /// All slices along `axis`, in index order.
    pub fn slices(&self, axis: ViewAxis) -> Vec<Image2<T>> {
        (0..self.dims.extent(axis))
            .map(|i| self.extract_slice(axis, i).expect("index within extent"))
            .collect()
    }

    /// Reassembles a volume from its slices along `axis`.
    pub fn restack(axis: ViewAxis, slices: &[Image2<T>], voxel_size: f64) -> Result<Self>
    where
        T: Default,
    {
        let first = slices
            .first()
            .ok_or_else(|| Error::Shape("cannot restack zero slices".into()))?;
        let (w, h) = (first.width, first.height);
        if let Some(bad) = slices.iter().find(|s| s.width != w || s.height != h) {
            return Err(Error::Shape(format!(
                "slice {}x{} differs from {w}x{h}",
                bad.width, bad.height
            )));
        }
        let n = slices.len();
        let dims = match axis {
            ViewAxis::Xy => Dims::new(w, h, n),
            ViewAxis::Xz => Dims::new(w, n, h),
            ViewAxis::Yz => Dims::new(n, w, h),
        };
        let mut data = vec![T::default(); dims.len()];
        for (index, slice) in slices.iter().enumerate() {
            for v in 0..h {
                for u in 0..w {
                    data[dims.slice_voxel(axis, index, u, v)] = slice.data[u + w * v];
                }
            }
        }
        Volume::new(dims, voxel_size, data)
    }
}

impl LabelVolume {
    /// Voxel count per class id.
    pub fn histogram(&self) -> [u64; ClassId::COUNT] {
        let mut counts = [0u64; ClassId::COUNT];
        for &c in &self.data {
            counts[c as usize] += 1;
        }
        counts
    }

    /// Boolean mask of voxels labeled `class`.
    pub fn mask_of(&self, class: ClassId) -> Vec<bool> {
        self.data.iter().map(|&c| c == class).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(dims: Dims) -> Volume<u16> {
        Volume::new(dims, 1.0, (0..dims.len() as u16).collect()).unwrap()
    }

    #[test]
    fn axial_slice_zero_holds_z0_voxels() {
        let v = ramp(Dims::cube(2));
        let s = v.extract_slice(ViewAxis::Xy, 0).unwrap();
        assert_eq!(s.data, vec![0, 1, 2, 3]);
        let s1 = v.extract_slice(ViewAxis::Xy, 1).unwrap();
        assert_eq!(s1.data, vec![4, 5, 6, 7]);
    }

    #[test]
    fn xz_view_of_3x4x5_matches_brute_force_indexer() {
        let dims = Dims::new(3, 4, 5);
        let v = ramp(dims);
        let slices = v.slices(ViewAxis::Xz);
        assert_eq!(slices.len(), 4);
        for (y, s) in slices.iter().enumerate() {
            assert_eq!((s.width, s.height), (3, 5));
            for z in 0..5 {
                for x in 0..3 {
                    let brute = (x + 3 * y + 12 * z) as u16;
                    assert_eq!(s.get(x, z), brute);
                }
            }
        }
    }

    #[test]
    fn out_of_range_slice_is_bounds_error() {
        let v = ramp(Dims::new(3, 4, 5));
        assert!(matches!(
            v.extract_slice(ViewAxis::Yz, 3),
            Err(Error::Bounds { extent: 3, .. })
        ));
        assert!(v.extract_slice(ViewAxis::Xy, 5).is_err());
    }

    #[test]
    fn class_ids_reject_six_and_above() {
        for id in 0..6u8 {
            assert_eq!(ClassId::from_u8(id).unwrap().id(), id);
        }
        for id in 6..=255u8 {
            assert!(ClassId::try_from(id).is_err());
        }
        assert_eq!(ClassId::Background.id(), 0);
    }

    #[test]
    fn volume_rejects_bad_lengths_and_voxel_size() {
        assert!(Volume::new(Dims::cube(2), 1.0, vec![0u16; 7]).is_err());
        assert!(Volume::new(Dims::cube(2), 0.0, vec![0u16; 8]).is_err());
    }

    proptest! {
        #[test]
        fn restack_round_trips_on_all_axes(
            nx in 1usize..6, ny in 1usize..6, nz in 1usize..6, seed in any::<u64>()
        ) {
            let dims = Dims::new(nx, ny, nz);
            let data: Vec<u16> = (0..dims.len())
                .map(|i| (seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407)) >> 48) as u16)
                .collect();
            let v = Volume::new(dims, 5.55, data).unwrap();
            for axis in ViewAxis::ALL {
                let back = Volume::restack(axis, &v.slices(axis), 5.55).unwrap();
                prop_assert_eq!(&back, &v);
            }
        }
    }
}
