//! Deterministic five-lobe lung phantoms.
//!
//! Each lung is an ellipsoid in its half of the volume. Quadratic height
//! fields `z = h(x, y)` separate the lobes: one surface in the left lung, two
//! crossing surfaces in the right lung so that the upper lobe meets the lower
//! lobe behind the middle lobe.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volume::{LabelVolume, ScalarVolume, Shape3};
use crate::vvol::{read_volume, write_volume, Volume};
use crate::{Error, Result};

pub const LUNG_INTENSITY: f64 = 0.2;
pub const BODY_INTENSITY: f64 = 0.75;
pub const DEFAULT_CONTRAST: f64 = 0.3;

pub const LU: u8 = 1;
pub const LL: u8 = 2;
pub const RU: u8 = 3;
pub const RM: u8 = 4;
pub const RL: u8 = 5;
pub const NUM_CLASSES: usize = 6;

/// `z / nz = a + bx·s + by·t + cxx·s² + cxy·s·t + cyy·t²` with `s = (x + ½) / nx`
/// and `t = (y + ½) / ny`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeightField {
    pub a: f64,
    pub bx: f64,
    pub by: f64,
    pub cxx: f64,
    pub cxy: f64,
    pub cyy: f64,
}

impl HeightField {
    pub fn height(&self, shape: Shape3, x: usize, y: usize) -> f64 {
        let s = (x as f64 + 0.5) / shape.nx as f64;
        let t = (y as f64 + 0.5) / shape.ny as f64;
        let rel = self.a
            + self.bx * s
            + self.by * t
            + self.cxx * s * s
            + self.cxy * s * t
            + self.cyy * t * t;
        rel * shape.nz as f64
    }

    fn jittered(&self, rng: &mut impl Rng) -> Self {
        let mut j = |v: f64, r: f64| v + rng.random_range(-r..=r);
        Self {
            a: j(self.a, 0.03),
            bx: j(self.bx, 0.04),
            by: j(self.by, 0.04),
            cxx: j(self.cxx, 0.03),
            cxy: j(self.cxy, 0.03),
            cyy: j(self.cyy, 0.03),
        }
    }

    fn coefficients(&self) -> [f64; 6] {
        [self.a, self.bx, self.by, self.cxx, self.cxy, self.cyy]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub seed: u64,
    /// Separates LU (above) from LL (below).
    pub left_oblique: HeightField,
    /// Separates RU (above) from RM (below) where it lies above the oblique surface.
    pub right_horizontal: HeightField,
    /// Separates RL (below) from RU and RM.
    pub right_oblique: HeightField,
    /// Fraction of each fissure band's columns with the contrast removed.
    pub incompleteness: f64,
    pub noise_sigma: f64,
    pub fissure_contrast: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            seed: 0,
            left_oblique: HeightField {
                a: 0.35,
                bx: 0.0,
                by: 0.3,
                cxx: 0.2,
                cxy: 0.0,
                cyy: -0.1,
            },
            right_horizontal: HeightField {
                a: 0.6,
                bx: 0.05,
                by: 0.0,
                cxx: 0.0,
                cxy: 0.0,
                cyy: 0.05,
            },
            right_oblique: HeightField {
                a: 0.2,
                bx: 0.0,
                by: 0.7,
                cxx: 0.05,
                cxy: 0.0,
                cyy: -0.05,
            },
            incompleteness: 0.0,
            noise_sigma: 0.0,
            fissure_contrast: DEFAULT_CONTRAST,
        }
    }
}

impl PhantomSpec {
    pub fn cube(n: usize, seed: u64) -> Self {
        Self {
            dims: [n, n, n],
            seed,
            ..Self::default()
        }
    }

    pub fn shape(&self) -> Result<Shape3> {
        let [nx, ny, nz] = self.dims;
        if nx < 8 || ny < 8 || nz < 8 {
            return Err(Error::Spec(format!(
                "phantom needs at least 8 voxels per axis, got {:?}",
                self.dims
            )));
        }
        Shape3::new(nx, ny, nz)
    }

    pub fn validate(&self) -> Result<Shape3> {
        let shape = self.shape()?;
        if !(0.0..=1.0).contains(&self.incompleteness) {
            return Err(Error::Spec(format!(
                "incompleteness must lie in [0, 1], got {}",
                self.incompleteness
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Spec(format!(
                "invalid noise sigma {}",
                self.noise_sigma
            )));
        }
        if !self.fissure_contrast.is_finite() {
            return Err(Error::Spec("fissure contrast must be finite".into()));
        }
        let surfaces = [
            ("left_oblique", &self.left_oblique),
            ("right_horizontal", &self.right_horizontal),
            ("right_oblique", &self.right_oblique),
        ];
        for (name, h) in surfaces {
            if h.coefficients().iter().any(|c| !c.is_finite()) {
                return Err(Error::Spec(format!("{name} has non-finite coefficients")));
            }
            for y in 0..shape.ny {
                for x in 0..shape.nx {
                    let z = h.height(shape, x, y);
                    if !(0.0..=shape.nz as f64).contains(&z) {
                        return Err(Error::Spec(format!(
                            "{name} leaves the volume at column ({x}, {y}): z = {z:.3}"
                        )));
                    }
                }
            }
        }
        Ok(shape)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomCase {
    /// Intensities in `[0, 1]`.
    pub image: ScalarVolume,
    /// 0 outside the lungs, then LU, LL, RU, RM, RL.
    pub lobes: LabelVolume,
}

fn in_lung(shape: Shape3, x: usize, y: usize, z: usize) -> bool {
    let half = shape.nx as f64 / 2.0;
    let left = (x as f64 + 0.5) < half;
    let cx = if left { half / 2.0 } else { half * 1.5 };
    let rx = half / 2.0 - 0.75;
    let ry = shape.ny as f64 / 2.0 - 1.0;
    let rz = shape.nz as f64 / 2.0 - 1.0;
    let u = (x as f64 + 0.5 - cx) / rx;
    let v = (y as f64 + 0.5 - shape.ny as f64 / 2.0) / ry;
    let w = (z as f64 + 0.5 - shape.nz as f64 / 2.0) / rz;
    u * u + v * v + w * w <= 1.0
}

/// Lobe label of a voxel from the separating surfaces, ignoring the lung mask.
fn lobe_at(spec: &PhantomSpec, shape: Shape3, x: usize, y: usize, z: usize) -> u8 {
    let zc = z as f64 + 0.5;
    if 2 * x < shape.nx {
        if zc >= spec.left_oblique.height(shape, x, y) {
            LU
        } else {
            LL
        }
    } else if zc < spec.right_oblique.height(shape, x, y) {
        RL
    } else if zc >= spec.right_horizontal.height(shape, x, y) {
        RU
    } else {
        RM
    }
}

/// Voxels on the one-voxel band of each separator surface inside the lungs:
/// 1 left oblique, 2 right horizontal, 3 right oblique. The horizontal band
/// exists only where that surface lies above the right oblique one.
pub fn separator_bands(spec: &PhantomSpec) -> Result<LabelVolume> {
    let shape = spec.validate()?;
    let mut data = vec![0u8; shape.len()];
    for y in 0..shape.ny {
        for x in 0..shape.nx {
            let cut = |h: &HeightField| h.height(shape, x, y).floor() as usize;
            let (first, second) = if 2 * x < shape.nx {
                ((1, cut(&spec.left_oblique)), None)
            } else {
                let ho = spec.right_oblique.height(shape, x, y);
                let hh = spec.right_horizontal.height(shape, x, y);
                let horizontal = (hh >= ho).then(|| (2, cut(&spec.right_horizontal)));
                ((3, cut(&spec.right_oblique)), horizontal)
            };
            for (band, z) in std::iter::once(first).chain(second) {
                if z < shape.nz && in_lung(shape, x, y, z) {
                    let i = shape.index(x, y, z);
                    if data[i] == 0 {
                        data[i] = band;
                    }
                }
            }
        }
    }
    LabelVolume::new(shape, data, 4)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomCase> {
    let shape = spec.validate()?;
    let mut labels = vec![0u8; shape.len()];
    let mut counts = [0usize; NUM_CLASSES];
    for (i, l) in labels.iter_mut().enumerate() {
        let (x, y, z) = shape.coords(i);
        if in_lung(shape, x, y, z) {
            *l = lobe_at(spec, shape, x, y, z);
            counts[*l as usize] += 1;
        }
    }
    if let Some(empty) = (1..NUM_CLASSES).find(|&c| counts[c] == 0) {
        return Err(Error::Spec(format!(
            "lobe {empty} is empty; the separator surfaces miss the lung"
        )));
    }
    let lobes = LabelVolume::new(shape, labels, NUM_CLASSES)?;

    let bands = separator_bands(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut hidden = vec![false; shape.len()];
    for band in 1..=3u8 {
        let mut columns: Vec<(usize, usize)> = Vec::new();
        for (i, &b) in bands.data().iter().enumerate() {
            if b == band {
                let (x, y, _) = shape.coords(i);
                columns.push((x, y));
            }
        }
        columns.sort_unstable();
        columns.dedup();
        let remove = (spec.incompleteness * columns.len() as f64).round() as usize;
        columns.shuffle(&mut rng);
        let removed: std::collections::HashSet<_> = columns[..remove].iter().copied().collect();
        for (i, &b) in bands.data().iter().enumerate() {
            let (x, y, _) = shape.coords(i);
            if b == band && removed.contains(&(x, y)) {
                hidden[i] = true;
            }
        }
    }

    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Spec(e.to_string()))?)
    } else {
        None
    };
    let image = (0..shape.len())
        .map(|i| {
            let base = match (lobes.data()[i], bands.data()[i]) {
                (0, _) => BODY_INTENSITY,
                (_, 0) => LUNG_INTENSITY,
                _ if hidden[i] => LUNG_INTENSITY,
                _ => LUNG_INTENSITY + spec.fissure_contrast,
            };
            let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
            (base + n).clamp(0.0, 1.0)
        })
        .collect();
    Ok(PhantomCase {
        image: ScalarVolume::new(shape, image)?,
        lobes,
    })
}

/// The spec of case `k`: seed `base_seed + k` and surfaces jittered by a
/// generator derived from that seed.
pub fn case_spec(template: &PhantomSpec, base_seed: u64, k: usize) -> PhantomSpec {
    let seed = base_seed.wrapping_add(k as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    PhantomSpec {
        seed,
        left_oblique: template.left_oblique.jittered(&mut rng),
        right_horizontal: template.right_horizontal.jittered(&mut rng),
        right_oblique: template.right_oblique.jittered(&mut rng),
        ..template.clone()
    }
}

pub fn image_path(dir: &Path, k: usize) -> std::path::PathBuf {
    dir.join(format!("case_{k}_img.vvol"))
}

pub fn label_path(dir: &Path, k: usize) -> std::path::PathBuf {
    dir.join(format!("case_{k}_lab.vvol"))
}

/// Generates `n_cases` phantoms, writing the VVOL pair of each case when
/// `out_dir` is given.
pub fn generate_dataset(
    template: &PhantomSpec,
    n_cases: usize,
    base_seed: u64,
    out_dir: Option<&Path>,
) -> Result<Vec<PhantomCase>> {
    if n_cases == 0 {
        return Err(Error::param("a dataset needs at least one case"));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    (0..n_cases)
        .map(|k| {
            let case = generate_phantom(&case_spec(template, base_seed, k))?;
            if let Some(dir) = out_dir {
                write_volume(image_path(dir, k), &Volume::Scalar(case.image.clone()))?;
                write_volume(label_path(dir, k), &Volume::Label(case.lobes.clone()))?;
            }
            Ok(case)
        })
        .collect()
}

/// Reads the VVOL pair of case `k` back from `dir`.
pub fn read_case(dir: &Path, k: usize) -> Result<PhantomCase> {
    let image = read_volume(image_path(dir, k))?.into_scalar()?;
    let lobes = read_volume(label_path(dir, k))?
        .into_labels()?
        .with_num_classes(NUM_CLASSES)?;
    if image.shape() != lobes.shape() {
        return Err(Error::param(format!(
            "case {k}: image and label shapes differ"
        )));
    }
    Ok(PhantomCase { image, lobes })
}

/// Number of consecutive `case_<k>_img.vvol` files in `dir` starting at 0.
pub fn count_cases(dir: &Path) -> usize {
    (0..).take_while(|&k| image_path(dir, k).exists()).count()
}
