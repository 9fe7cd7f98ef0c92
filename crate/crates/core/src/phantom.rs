//! Synthetic heart phantoms: attenuation map plus ground-truth labels.
//!
//! The ventricle is an ellipsoid whose outer shell is compacta and whose
//! interior (spongiosa) holds spherical lacunae of background attenuation. The
//! atrium is a second ellipsoid; the bulbus is a z-aligned cylinder.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`),
//! a portable counter-based generator; Gaussian noise uses the `rand_distr`
//! ziggurat sampler. Lacunae are drawn first, then per-voxel noise in storage
//! order, so output depends only on the spec.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{ClassId, Dims, FloatVolume, LabelVolume, Volume};

/// Ellipsoid with center and semi-axes as fractions of the volume extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

/// Z-aligned cylinder. `radius` is a fraction of `nx` (applied to both x
/// and y, in voxels), `half_length` a fraction of `nz`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cylinder {
    pub center: [f64; 3],
    pub radius: f64,
    pub half_length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LacunaeSpec {
    pub count: (usize, usize),
    /// Radius range in voxels.
    pub radius: (f64, f64),
}

/// Mean attenuation per tissue. Lacunae use the background value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attenuation {
    pub background: f64,
    pub atrium: f64,
    pub ventricle: f64,
    pub bulbus: f64,
    pub compacta: f64,
}

impl Attenuation {
    pub fn of(&self, class: ClassId) -> f64 {
        match class {
            ClassId::Background | ClassId::Lacunary => self.background,
            ClassId::Atrium => self.atrium,
            ClassId::Ventricle => self.ventricle,
            ClassId::Bulbus => self.bulbus,
            ClassId::Compacta => self.compacta,
        }
    }

    fn values(&self) -> [f64; 5] {
        [self.background, self.atrium, self.ventricle, self.bulbus, self.compacta]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub voxel_size_um: f64,
    pub seed: u64,
    pub ventricle: Ellipsoid,
    pub atrium: Ellipsoid,
    pub bulbus: Cylinder,
    /// Compacta shell thickness in voxels, measured inward from the ventricle surface.
    pub compacta_thickness: f64,
    pub lacunae: LacunaeSpec,
    pub attenuation: Attenuation,
    pub noise_sigma: f64,
    /// Attenuation values are clamped to this range.
    pub window: (f64, f64),
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: Dims::cube(128),
            voxel_size_um: 5.55,
            seed: 0,
            ventricle: Ellipsoid {
                center: [0.5, 0.45, 0.5],
                semi_axes: [0.22, 0.19, 0.24],
            },
            atrium: Ellipsoid {
                center: [0.5, 0.81, 0.5],
                semi_axes: [0.17, 0.09, 0.17],
            },
            bulbus: Cylinder {
                center: [0.5, 0.14, 0.5],
                radius: 0.07,
                half_length: 0.18,
            },
            compacta_thickness: 4.0,
            lacunae: LacunaeSpec {
                count: (40, 60),
                radius: (2.0, 4.0),
            },
            attenuation: Attenuation {
                background: 0.0,
                atrium: 0.35,
                ventricle: 0.7,
                bulbus: 0.5,
                compacta: 0.95,
            },
            noise_sigma: 0.06,
            window: (-0.25, 1.25),
        }
    }
}

impl PhantomSpec {
    /// Same anatomy on a different grid size.
    pub fn with_dims(dims: Dims) -> Self {
        let mut spec = PhantomSpec {
            dims,
            ..Default::default()
        };
        let scale = dims.nx.min(dims.ny).min(dims.nz) as f64 / 128.0;
        spec.compacta_thickness = (spec.compacta_thickness * scale).max(2.0);
        spec.lacunae.radius = (
            (spec.lacunae.radius.0 * scale).max(1.0),
            (spec.lacunae.radius.1 * scale).max(1.5),
        );
        spec
    }

    fn extents(&self) -> [f64; 3] {
        [self.dims.nx as f64, self.dims.ny as f64, self.dims.nz as f64]
    }

    /// Ventricle center and semi-axes in voxel units.
    fn ventricle_vox(&self) -> ([f64; 3], [f64; 3]) {
        to_voxels(&self.ventricle, self.extents())
    }

    pub fn validate(&self) -> Result<()> {
        let ext = self.extents();
        if self.dims.is_empty() {
            return Err(Error::Spec("dims must be nonzero".into()));
        }
        if !(self.voxel_size_um > 0.0) {
            return Err(Error::Spec("voxel size must be positive".into()));
        }
        for (name, e) in [("ventricle", &self.ventricle), ("atrium", &self.atrium)] {
            let (c, a) = to_voxels(e, ext);
            for k in 0..3 {
                if !(a[k] > 0.0) || c[k] - a[k] < 0.0 || c[k] + a[k] > ext[k] - 1.0 {
                    return Err(Error::Spec(format!("{name} ellipsoid does not fit inside {}", self.dims)));
                }
            }
        }
        let b = &self.bulbus;
        let r = b.radius * ext[0];
        let hl = b.half_length * ext[2];
        let c = [b.center[0] * (ext[0] - 1.0), b.center[1] * (ext[1] - 1.0), b.center[2] * (ext[2] - 1.0)];
        if !(r > 0.0 && hl > 0.0)
            || c[0] - r < 0.0
            || c[0] + r > ext[0] - 1.0
            || c[1] - r < 0.0
            || c[1] + r > ext[1] - 1.0
            || c[2] - hl < 0.0
            || c[2] + hl > ext[2] - 1.0
        {
            return Err(Error::Spec(format!("bulbus cylinder does not fit inside {}", self.dims)));
        }
        let (_, va) = self.ventricle_vox();
        let min_axis = va.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(self.compacta_thickness >= 1.0 && self.compacta_thickness < min_axis) {
            return Err(Error::Spec(format!(
                "compacta thickness {} must lie in [1, {min_axis})",
                self.compacta_thickness
            )));
        }
        let (rmin, rmax) = self.lacunae.radius;
        let (cmin, cmax) = self.lacunae.count;
        if cmin > cmax || !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::Spec("lacunae ranges must be ordered and positive".into()));
        }
        if cmax > 0 && rmax + 1.0 >= min_axis - self.compacta_thickness {
            return Err(Error::Spec("lacunae do not fit inside the ventricle interior".into()));
        }
        let vals = self.attenuation.values();
        for i in 0..vals.len() {
            for j in i + 1..vals.len() {
                if (vals[i] - vals[j]).abs() < 1e-12 {
                    return Err(Error::Spec("class attenuation means must be pairwise distinct".into()));
                }
            }
        }
        let (lo, hi) = self.window;
        if !(lo < hi) || vals.iter().any(|&v| v < lo || v > hi) {
            return Err(Error::Spec("attenuation means must lie inside the window".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Spec("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

fn to_voxels(e: &Ellipsoid, ext: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let c = [0, 1, 2].map(|k| e.center[k] * (ext[k] - 1.0));
    let a = [0, 1, 2].map(|k| e.semi_axes[k] * ext[k]);
    (c, a)
}

#[inline]
fn ellipsoid_level(p: [f64; 3], c: [f64; 3], a: [f64; 3]) -> f64 {
    (0..3).map(|k| ((p[k] - c[k]) / a[k]).powi(2)).sum()
}

struct Lacuna {
    center: [f64; 3],
    radius: f64,
}

/// A generated phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub attenuation: FloatVolume,
    pub labels: LabelVolume,
}

/// Rasterizes the anatomy described by `spec` and adds Gaussian noise.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ext = spec.extents();
    let (vc, va) = spec.ventricle_vox();
    let t = spec.compacta_thickness;
    let interior = va.map(|a| a - t);

    let (cmin, cmax) = spec.lacunae.count;
    let count = if cmax == 0 { 0 } else { rng.random_range(cmin..=cmax) };
    let mut lacunae = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while lacunae.len() < count && attempts < 10_000 * count.max(1) {
        attempts += 1;
        let (rmin, rmax) = spec.lacunae.radius;
        let radius = if rmax > rmin { rng.random_range(rmin..rmax) } else { rmin };
        let p = [0, 1, 2].map(|k| vc[k] + rng.random_range(-1.0..1.0) * interior[k]);
        // sphere plus a one-voxel margin must stay within the interior ellipsoid
        let shrunk = interior.map(|a| a - radius - 1.0);
        if shrunk.iter().all(|&a| a > 0.0) && ellipsoid_level(p, vc, shrunk) <= 1.0 {
            lacunae.push(Lacuna { center: p, radius });
        }
    }
    if lacunae.len() < count {
        return Err(Error::Spec("could not place the requested lacunae".into()));
    }

    let (ac, aa) = to_voxels(&spec.atrium, ext);
    let b = &spec.bulbus;
    let bc = [0, 1, 2].map(|k| b.center[k] * (ext[k] - 1.0));
    let br = b.radius * ext[0];
    let bhl = b.half_length * ext[2];

    let dims = spec.dims;
    let mut labels = vec![ClassId::Background; dims.len()];
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let p = [x as f64, y as f64, z as f64];
                let mut class = ClassId::Background;
                if (p[0] - bc[0]).powi(2) + (p[1] - bc[1]).powi(2) <= br * br && (p[2] - bc[2]).abs() <= bhl {
                    class = ClassId::Bulbus;
                }
                if ellipsoid_level(p, ac, aa) <= 1.0 {
                    class = ClassId::Atrium;
                }
                if ellipsoid_level(p, vc, va) <= 1.0 {
                    class = if ellipsoid_level(p, vc, interior) <= 1.0 {
                        ClassId::Ventricle
                    } else {
                        ClassId::Compacta
                    };
                    if class == ClassId::Ventricle
                        && lacunae.iter().any(|l| {
                            (0..3).map(|k| (p[k] - l.center[k]).powi(2)).sum::<f64>() <= l.radius * l.radius
                        })
                    {
                        class = ClassId::Lacunary;
                    }
                }
                labels[dims.index(x, y, z)] = class;
            }
        }
    }

    let (lo, hi) = spec.window;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Spec(e.to_string()))?;
    let attenuation: Vec<f32> = labels
        .iter()
        .map(|&c| {
            let v = spec.attenuation.of(c) + noise.sample(&mut rng);
            v.clamp(lo, hi) as f32
        })
        .collect();

    Ok(Phantom {
        attenuation: Volume::new(dims, spec.voxel_size_um, attenuation)?,
        labels: Volume::new(dims, spec.voxel_size_um, labels)?,
    })
}

/// Spec for cohort member `index`: member 0 is `base` itself, later members
/// get a seed offset and their centers and semi-axes perturbed by up to 10%
/// (centers move by at most 10% of the matching semi-axis).
pub fn jittered_spec(base: &PhantomSpec, index: usize) -> PhantomSpec {
    let mut spec = base.clone();
    spec.seed = base.seed.wrapping_add(index as u64);
    if index == 0 {
        return spec;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64));
    let mut j = |v: f64| v * (1.0 + rng.random_range(-0.1..0.1));
    for e in [&mut spec.ventricle, &mut spec.atrium] {
        let axes = e.semi_axes;
        for k in 0..3 {
            e.center[k] += j(axes[k]) - axes[k];
        }
        e.semi_axes = e.semi_axes.map(&mut j);
    }
    let b = &mut spec.bulbus;
    for k in 0..2 {
        b.center[k] += j(b.radius) - b.radius;
    }
    b.radius = j(b.radius);
    b.half_length = j(b.half_length);
    spec
}

/// `n` phantoms with per-sample seed offsets and jittered geometry.
pub fn split_cohort(spec: &PhantomSpec, n: usize) -> Result<Vec<Phantom>> {
    if n == 0 {
        return Err(Error::Spec("cohort size must be at least 1".into()));
    }
    use rayon::prelude::*;
    (0..n)
        .into_par_iter()
        .map(|i| generate(&jittered_spec(spec, i)))
        .collect()
}

/// Centered disk on an `n`x`n` slice. Each pixel holds `value` times the
/// fraction of its area inside the circle (8x8 supersampling).
pub fn disk_slice(n: usize, radius: f64, value: f32) -> Vec<f32> {
    const SUB: usize = 8;
    let c = (n as f64 - 1.0) / 2.0;
    let r2 = radius * radius;
    (0..n * n)
        .map(|k| {
            let (x, y) = ((k % n) as f64 - c, (k / n) as f64 - c);
            let mut inside = 0usize;
            for a in 0..SUB {
                for b in 0..SUB {
                    let u = x - 0.5 + (a as f64 + 0.5) / SUB as f64;
                    let v = y - 0.5 + (b as f64 + 0.5) / SUB as f64;
                    if u * u + v * v <= r2 {
                        inside += 1;
                    }
                }
            }
            value * inside as f32 / (SUB * SUB) as f32
        })
        .collect()
}
